//! Set-conditioned generator and discriminator.
//!
//! Both networks encode the image and every instance mask separately, sum
//! the per-mask features into an order-independent set feature, and then
//! concatenate:
//!
//! - generator image head: `[f_x(x); sum_i f_a(a_i)]`
//! - generator mask head, slot n: `[f_x(x); sum_i f_a(a_i); f_a(a_n)]`
//! - discriminator head: `[f_x(x); sum_i f_a(a_i)]`
//!
//! so the translated image is permutation-invariant and the translated
//! mask set permutation-equivariant in the input set order.
//!
//! The generator encoder is a strided-conv + residual-block stack and the
//! decoders are transposed-conv stacks with `tanh` output heads; the
//! discriminator is a patch classifier whose first `layers-2` convolutions
//! act as extractors and whose last two form the realness head. Instance
//! normalization is applied on hidden layers of both networks, spectral
//! normalization (one power-iteration step per training step) on
//! discriminator convolutions only.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const IN_EPS: f64 = 1e-5;
const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub n_downsample: usize,
    pub discriminator_layers: usize,
    pub use_instance_norm: bool,
    pub use_spectral_norm_d: bool,
    pub mask_capacity: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 64,
            n_res_blocks: 9,
            n_downsample: 2,
            discriminator_layers: 5,
            use_instance_norm: true,
            use_spectral_norm_d: true,
            mask_capacity: 8,
        }
    }
}

impl NetConfig {
    /// Small profile that trains on a workstation CPU.
    pub fn desk() -> Self {
        NetConfig {
            base_channels: 16,
            n_res_blocks: 2,
            mask_capacity: 4,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be >= 1"));
        }
        if self.n_res_blocks == 0 {
            return Err(Error::invalid("n_res_blocks must be >= 1"));
        }
        if self.n_downsample == 0 {
            return Err(Error::invalid("n_downsample must be >= 1"));
        }
        if self.discriminator_layers < 3 {
            return Err(Error::invalid("discriminator_layers must be >= 3"));
        }
        if self.mask_capacity == 0 {
            return Err(Error::invalid("mask_capacity must be >= 1"));
        }
        Ok(())
    }

    /// Channels coming out of a generator encoder.
    pub fn encoder_out_channels(&self) -> usize {
        self.base_channels << self.n_downsample
    }

    /// Channels coming out of a discriminator extractor.
    pub fn extractor_out_channels(&self) -> usize {
        self.base_channels << (self.discriminator_layers - 3)
    }

    /// Spatial size of the discriminator realness map, or an error when the
    /// input is too small for the configured depth.
    pub fn disc_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let step = |d: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            let padded = d + 2 * p;
            if padded < k {
                return None;
            }
            Some((padded - k) / s + 1)
        };
        let mut hw = (h, w);
        for _ in 0..self.discriminator_layers - 2 {
            hw = match (step(hw.0, 4, 2, 1), step(hw.1, 4, 2, 1)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => return Err(Error::invalid("image too small for discriminator")),
            };
        }
        for _ in 0..2 {
            hw = match (step(hw.0, 4, 1, 1), step(hw.1, 4, 1, 1)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => return Err(Error::invalid("image too small for discriminator head")),
            };
        }
        Ok(hw)
    }

    /// The generator halves the spatial size `n_downsample` times and then
    /// doubles it back, so inputs must be divisible by `2^n_downsample`.
    pub fn check_generator_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.n_downsample;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} not divisible by {div} (n_downsample={})",
                self.n_downsample
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    None,
    Relu,
    LeakyRelu,
    Tanh,
}

/// Spectral-norm power-iteration state for one convolution.
#[derive(Clone, Debug)]
pub struct SnBuffers<E: Elem> {
    pub u: Array1<E>,
    pub v: Array1<E>,
}

#[derive(Clone, Debug)]
pub struct ConvLayer<E: Elem> {
    pub w: ArrayD<E>, // [Co, Ci, k, k]
    pub b: ArrayD<E>, // [Co]
    pub stride: usize,
    pub pad: usize,
    pub norm: bool,
    pub act: Act,
    pub sn: Option<SnBuffers<E>>,
}

#[derive(Clone, Debug)]
pub struct ConvTLayer<E: Elem> {
    pub w: ArrayD<E>, // [Ci, Co, k, k]
    pub b: ArrayD<E>,
    pub stride: usize,
    pub pad: usize,
    pub norm: bool,
    pub act: Act,
}

pub struct BoundConv {
    w: Var,
    b: Var,
}

fn normal_arr<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<E> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || E::from_f64(dist.sample(rng)))
}

fn normalized<E: Elem>(v: Array1<E>) -> Array1<E> {
    let norm = v.iter().fold(E::zero(), |a, &b| a + b * b).sqrt();
    let norm = if norm < E::from_f64(1e-12) {
        E::from_f64(1e-12)
    } else {
        norm
    };
    v.mapv(|x| x / norm)
}

impl<E: Elem> ConvLayer<E> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rng: &mut ChaCha8Rng,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        act: Act,
        spectral: bool,
    ) -> Self {
        let w = normal_arr::<E>(rng, &[co, ci, k, k], WEIGHT_STD);
        let b = ArrayD::zeros(IxDyn(&[co]));
        let sn = if spectral {
            let u = normalized(Array1::from_shape_simple_fn(co, || {
                E::from_f64(Normal::new(0.0, 1.0).unwrap().sample(rng))
            }));
            let mut sn = SnBuffers {
                u,
                v: Array1::zeros(ci * k * k),
            };
            power_iterate_one(&w, &mut sn);
            Some(sn)
        } else {
            None
        };
        ConvLayer {
            w,
            b,
            stride,
            pad,
            norm,
            act,
            sn,
        }
    }

    fn bind(&self, g: &mut Graph<E>, trainable: bool, out: &mut Vec<Var>) -> BoundConv {
        let w = if trainable {
            g.leaf(self.w.clone())
        } else {
            g.constant(self.w.clone())
        };
        let b = if trainable {
            g.leaf(self.b.clone())
        } else {
            g.constant(self.b.clone())
        };
        out.push(w);
        out.push(b);
        BoundConv { w, b }
    }

    fn forward(&self, g: &mut Graph<E>, bound: &BoundConv, x: Var, use_norm: bool) -> Var {
        let w_eff = match &self.sn {
            Some(sn) => g.spectral_scale(bound.w, sn.u.clone(), sn.v.clone()),
            None => bound.w,
        };
        let mut y = g.conv2d(x, w_eff, bound.b, self.stride, self.pad);
        if self.norm && use_norm {
            y = g.instance_norm(y, E::from_f64(IN_EPS));
        }
        apply_act(g, y, self.act)
    }
}

impl<E: Elem> ConvTLayer<E> {
    fn new(
        rng: &mut ChaCha8Rng,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        act: Act,
    ) -> Self {
        ConvTLayer {
            w: normal_arr::<E>(rng, &[ci, co, k, k], WEIGHT_STD),
            b: ArrayD::zeros(IxDyn(&[co])),
            stride,
            pad,
            norm,
            act,
        }
    }

    fn bind(&self, g: &mut Graph<E>, trainable: bool, out: &mut Vec<Var>) -> BoundConv {
        let w = if trainable {
            g.leaf(self.w.clone())
        } else {
            g.constant(self.w.clone())
        };
        let b = if trainable {
            g.leaf(self.b.clone())
        } else {
            g.constant(self.b.clone())
        };
        out.push(w);
        out.push(b);
        BoundConv { w, b }
    }

    fn forward(&self, g: &mut Graph<E>, bound: &BoundConv, x: Var, use_norm: bool) -> Var {
        let mut y = g.conv_t2d(x, bound.w, bound.b, self.stride, self.pad);
        if self.norm && use_norm {
            y = g.instance_norm(y, E::from_f64(IN_EPS));
        }
        apply_act(g, y, self.act)
    }
}

fn apply_act<E: Elem>(g: &mut Graph<E>, x: Var, act: Act) -> Var {
    match act {
        Act::None => x,
        Act::Relu => g.relu(x),
        Act::LeakyRelu => g.leaky_relu(x, E::from_f64(0.2)),
        Act::Tanh => g.tanh(x),
    }
}

fn power_iterate_one<E: Elem>(w: &ArrayD<E>, sn: &mut SnBuffers<E>) {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    let w_mat = w.to_shape((rows, cols)).unwrap();
    sn.v = normalized(w_mat.t().dot(&sn.u));
    sn.u = normalized(w_mat.dot(&sn.v));
}

/// Generator encoder: wide conv, strided downsampling, residual blocks.
#[derive(Clone, Debug)]
pub struct Encoder<E: Elem> {
    pub init: ConvLayer<E>,
    pub downs: Vec<ConvLayer<E>>,
    pub res: Vec<(ConvLayer<E>, ConvLayer<E>)>,
}

pub struct BoundEncoder {
    init: BoundConv,
    downs: Vec<BoundConv>,
    res: Vec<(BoundConv, BoundConv)>,
}

impl<E: Elem> Encoder<E> {
    fn new(rng: &mut ChaCha8Rng, cfg: &NetConfig, in_ch: usize) -> Self {
        let b = cfg.base_channels;
        let init = ConvLayer::new(rng, in_ch, b, 7, 1, 3, true, Act::Relu, false);
        let mut downs = Vec::new();
        for d in 0..cfg.n_downsample {
            downs.push(ConvLayer::new(
                rng,
                b << d,
                b << (d + 1),
                3,
                2,
                1,
                true,
                Act::Relu,
                false,
            ));
        }
        let ch = cfg.encoder_out_channels();
        let mut res = Vec::new();
        for _ in 0..cfg.n_res_blocks {
            let c1 = ConvLayer::new(rng, ch, ch, 3, 1, 1, true, Act::Relu, false);
            let c2 = ConvLayer::new(rng, ch, ch, 3, 1, 1, true, Act::None, false);
            res.push((c1, c2));
        }
        Encoder { init, downs, res }
    }

    fn bind(&self, g: &mut Graph<E>, trainable: bool, out: &mut Vec<Var>) -> BoundEncoder {
        BoundEncoder {
            init: self.init.bind(g, trainable, out),
            downs: self.downs.iter().map(|l| l.bind(g, trainable, out)).collect(),
            res: self
                .res
                .iter()
                .map(|(a, b)| (a.bind(g, trainable, out), b.bind(g, trainable, out)))
                .collect(),
        }
    }

    fn forward(&self, g: &mut Graph<E>, bound: &BoundEncoder, x: Var, use_norm: bool) -> Var {
        let mut h = self.init.forward(g, &bound.init, x, use_norm);
        for (layer, bv) in self.downs.iter().zip(&bound.downs) {
            h = layer.forward(g, bv, h, use_norm);
        }
        for ((c1, c2), (b1, b2)) in self.res.iter().zip(&bound.res) {
            let r = c1.forward(g, b1, h, use_norm);
            let r = c2.forward(g, b2, r, use_norm);
            h = g.add(h, r);
        }
        h
    }
}

/// Generator decoder: transposed-conv upsampling and a tanh output head.
#[derive(Clone, Debug)]
pub struct Decoder<E: Elem> {
    pub ups: Vec<ConvTLayer<E>>,
    pub out: ConvLayer<E>,
}

pub struct BoundDecoder {
    ups: Vec<BoundConv>,
    out: BoundConv,
}

impl<E: Elem> Decoder<E> {
    fn new(rng: &mut ChaCha8Rng, cfg: &NetConfig, in_ch: usize, out_ch: usize) -> Self {
        let b = cfg.base_channels;
        let mut ups = Vec::new();
        let mut ch = in_ch;
        for d in (0..cfg.n_downsample).rev() {
            let co = b << d;
            ups.push(ConvTLayer::new(rng, ch, co, 3, 2, 1, true, Act::Relu));
            ch = co;
        }
        let out = ConvLayer::new(rng, ch, out_ch, 7, 1, 3, false, Act::Tanh, false);
        Decoder { ups, out }
    }

    fn bind(&self, g: &mut Graph<E>, trainable: bool, out: &mut Vec<Var>) -> BoundDecoder {
        BoundDecoder {
            ups: self.ups.iter().map(|l| l.bind(g, trainable, out)).collect(),
            out: self.out.bind(g, trainable, out),
        }
    }

    fn forward(&self, g: &mut Graph<E>, bound: &BoundDecoder, x: Var, use_norm: bool) -> Var {
        let mut h = x;
        for (layer, bv) in self.ups.iter().zip(&bound.ups) {
            h = layer.forward(g, bv, h, use_norm);
        }
        self.out.forward(g, &bound.out, h, use_norm)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorParams<E: Elem> {
    pub f_x: Encoder<E>,
    pub f_a: Encoder<E>,
    pub g_x: Decoder<E>,
    pub g_a: Decoder<E>,
    pub config: NetConfig,
}

pub struct GenBound {
    f_x: BoundEncoder,
    f_a: BoundEncoder,
    g_x: BoundDecoder,
    g_a: BoundDecoder,
    /// Bound leaves in the same order as `visit_params`.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorParams<E: Elem> {
    pub f_x: Vec<ConvLayer<E>>,
    pub f_a: Vec<ConvLayer<E>>,
    pub head: Vec<ConvLayer<E>>,
    pub config: NetConfig,
}

pub struct DiscBound {
    f_x: Vec<BoundConv>,
    f_a: Vec<BoundConv>,
    head: Vec<BoundConv>,
    pub params: Vec<Var>,
}

impl<E: Elem> GeneratorParams<E> {
    fn new(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let enc = cfg.encoder_out_channels();
        GeneratorParams {
            f_x: Encoder::new(rng, cfg, 3),
            f_a: Encoder::new(rng, cfg, 1),
            g_x: Decoder::new(rng, cfg, 2 * enc, 3),
            g_a: Decoder::new(rng, cfg, 3 * enc, 1),
            config: cfg.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> GenBound {
        let mut params = Vec::new();
        GenBound {
            f_x: self.f_x.bind(g, trainable, &mut params),
            f_a: self.f_a.bind(g, trainable, &mut params),
            g_x: self.g_x.bind(g, trainable, &mut params),
            g_a: self.g_a.bind(g, trainable, &mut params),
            params,
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(String, &'a ArrayD<E>)) {
        visit_encoder(&self.f_x, "f_x", f);
        visit_encoder(&self.f_a, "f_a", f);
        visit_decoder(&self.g_x, "g_x", f);
        visit_decoder(&self.g_a, "g_a", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut ArrayD<E>)) {
        visit_encoder_mut(&mut self.f_x, f);
        visit_encoder_mut(&mut self.f_a, f);
        visit_decoder_mut(&mut self.g_x, f);
        visit_decoder_mut(&mut self.g_a, f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, a| n += a.len());
        n
    }
}

impl<E: Elem> DiscriminatorParams<E> {
    fn new(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let b = cfg.base_channels;
        let sn = cfg.use_spectral_norm_d;
        let n_ext = cfg.discriminator_layers - 2;
        let make_extractor = |rng: &mut ChaCha8Rng, in_ch: usize| -> Vec<ConvLayer<E>> {
            let mut layers = Vec::new();
            let mut ci = in_ch;
            for d in 0..n_ext {
                let co = b << d;
                layers.push(ConvLayer::new(rng, ci, co, 4, 2, 1, true, Act::LeakyRelu, sn));
                ci = co;
            }
            layers
        };
        let f_x = make_extractor(rng, 3);
        let f_a = make_extractor(rng, 1);
        let ext = cfg.extractor_out_channels();
        let head = vec![
            ConvLayer::new(rng, 2 * ext, 2 * ext, 4, 1, 1, true, Act::LeakyRelu, sn),
            // realness map keeps a learnable mean (no norm) and stays raw
            // because the least-squares loss consumes unsquashed values
            ConvLayer::new(rng, 2 * ext, 1, 4, 1, 1, false, Act::None, sn),
        ];
        DiscriminatorParams {
            f_x,
            f_a,
            head,
            config: cfg.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> DiscBound {
        let mut params = Vec::new();
        DiscBound {
            f_x: self.f_x.iter().map(|l| l.bind(g, trainable, &mut params)).collect(),
            f_a: self.f_a.iter().map(|l| l.bind(g, trainable, &mut params)).collect(),
            head: self.head.iter().map(|l| l.bind(g, trainable, &mut params)).collect(),
            params,
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(String, &'a ArrayD<E>)) {
        for (prefix, layers) in [("f_x", &self.f_x), ("f_a", &self.f_a), ("head", &self.head)] {
            for (i, l) in layers.iter().enumerate() {
                f(format!("{prefix}.{i}.w"), &l.w);
                f(format!("{prefix}.{i}.b"), &l.b);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut ArrayD<E>)) {
        for l in self
            .f_x
            .iter_mut()
            .chain(self.f_a.iter_mut())
            .chain(self.head.iter_mut())
        {
            f(&mut l.w);
            f(&mut l.b);
        }
    }

    /// One spectral-norm power-iteration step on every convolution.
    pub fn power_iterate(&mut self) {
        for l in self
            .f_x
            .iter_mut()
            .chain(self.f_a.iter_mut())
            .chain(self.head.iter_mut())
        {
            if let Some(sn) = &mut l.sn {
                let w = l.w.clone();
                power_iterate_one(&w, sn);
            }
        }
    }

    /// Spectral-norm buffers in a stable order (for checkpointing).
    pub fn visit_sn<'a>(&'a self, f: &mut impl FnMut(String, &'a SnBuffers<E>)) {
        for (prefix, layers) in [("f_x", &self.f_x), ("f_a", &self.f_a), ("head", &self.head)] {
            for (i, l) in layers.iter().enumerate() {
                if let Some(sn) = &l.sn {
                    f(format!("{prefix}.{i}"), sn);
                }
            }
        }
    }

    pub fn visit_sn_mut(&mut self, f: &mut impl FnMut(String, &mut SnBuffers<E>)) {
        for (prefix, layers) in [
            ("f_x", &mut self.f_x),
            ("f_a", &mut self.f_a),
            ("head", &mut self.head),
        ] {
            for (i, l) in layers.iter_mut().enumerate() {
                if let Some(sn) = &mut l.sn {
                    f(format!("{prefix}.{i}"), sn);
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, a| n += a.len());
        n
    }
}

fn visit_encoder<'a, E: Elem>(
    e: &'a Encoder<E>,
    prefix: &str,
    f: &mut impl FnMut(String, &'a ArrayD<E>),
) {
    f(format!("{prefix}.init.w"), &e.init.w);
    f(format!("{prefix}.init.b"), &e.init.b);
    for (i, l) in e.downs.iter().enumerate() {
        f(format!("{prefix}.down{i}.w"), &l.w);
        f(format!("{prefix}.down{i}.b"), &l.b);
    }
    for (i, (c1, c2)) in e.res.iter().enumerate() {
        f(format!("{prefix}.res{i}.c1.w"), &c1.w);
        f(format!("{prefix}.res{i}.c1.b"), &c1.b);
        f(format!("{prefix}.res{i}.c2.w"), &c2.w);
        f(format!("{prefix}.res{i}.c2.b"), &c2.b);
    }
}

fn visit_encoder_mut<E: Elem>(e: &mut Encoder<E>, f: &mut impl FnMut(&mut ArrayD<E>)) {
    f(&mut e.init.w);
    f(&mut e.init.b);
    for l in &mut e.downs {
        f(&mut l.w);
        f(&mut l.b);
    }
    for (c1, c2) in &mut e.res {
        f(&mut c1.w);
        f(&mut c1.b);
        f(&mut c2.w);
        f(&mut c2.b);
    }
}

fn visit_decoder<'a, E: Elem>(
    d: &'a Decoder<E>,
    prefix: &str,
    f: &mut impl FnMut(String, &'a ArrayD<E>),
) {
    for (i, l) in d.ups.iter().enumerate() {
        f(format!("{prefix}.up{i}.w"), &l.w);
        f(format!("{prefix}.up{i}.b"), &l.b);
    }
    f(format!("{prefix}.out.w"), &d.out.w);
    f(format!("{prefix}.out.b"), &d.out.b);
}

fn visit_decoder_mut<E: Elem>(d: &mut Decoder<E>, f: &mut impl FnMut(&mut ArrayD<E>)) {
    for l in &mut d.ups {
        f(&mut l.w);
        f(&mut l.b);
    }
    f(&mut d.out.w);
    f(&mut d.out.b);
}

#[derive(Clone, Debug)]
pub struct NetworkBundle<E: Elem> {
    pub g_xy: GeneratorParams<E>,
    pub g_yx: GeneratorParams<E>,
    pub d_x: DiscriminatorParams<E>,
    pub d_y: DiscriminatorParams<E>,
    pub config: NetConfig,
}

/// Build all four networks with weights drawn from N(0, 0.02); deterministic
/// in the seed.
pub fn init_networks<E: Elem>(config: &NetConfig, seed: u64) -> Result<NetworkBundle<E>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NetworkBundle {
        g_xy: GeneratorParams::new(&mut rng, config),
        g_yx: GeneratorParams::new(&mut rng, config),
        d_x: DiscriminatorParams::new(&mut rng, config),
        d_y: DiscriminatorParams::new(&mut rng, config),
        config: config.clone(),
    })
}

/// Sum feature maps over valid slots only; padding slots contribute nothing.
pub fn aggregate_set_feature<E: Elem>(
    g: &mut Graph<E>,
    features: &[Var],
    validity: &[bool],
) -> Result<Var> {
    debug_assert_eq!(features.len(), validity.len());
    let valid: Vec<Var> = features
        .iter()
        .zip(validity)
        .filter(|(_, &v)| v)
        .map(|(f, _)| *f)
        .collect();
    if valid.is_empty() {
        return Err(Error::invalid("aggregate_set_feature: zero valid slots"));
    }
    Ok(g.sum_n(&valid))
}

/// Graph-level generator forward over network-range inputs.
///
/// `masks` are the valid mask slots (already mapped to [-1, 1]). Returns the
/// translated image and one translated mask per input slot, in input order.
pub fn generator_forward_g<E: Elem>(
    g: &mut Graph<E>,
    p: &GeneratorParams<E>,
    bound: &GenBound,
    image: Var,
    masks: &[Var],
) -> Result<(Var, Vec<Var>)> {
    if masks.is_empty() {
        return Err(Error::invalid("generator_forward: zero valid masks"));
    }
    let use_norm = p.config.use_instance_norm;
    let enc_x = p.f_x.forward(g, &bound.f_x, image, use_norm);
    let enc_a: Vec<Var> = masks
        .iter()
        .map(|m| p.f_a.forward(g, &bound.f_a, *m, use_norm))
        .collect();
    let set_feat = g.sum_n(&enc_a);
    let h_img = g.concat_c(&[enc_x, set_feat]);
    let image_out = p.g_x.forward(g, &bound.g_x, h_img, use_norm);
    let mut masks_out = Vec::with_capacity(masks.len());
    for ea in &enc_a {
        let h_n = g.concat_c(&[enc_x, set_feat, *ea]);
        masks_out.push(p.g_a.forward(g, &bound.g_a, h_n, use_norm));
    }
    Ok((image_out, masks_out))
}

/// Graph-level discriminator forward; returns the patch realness map.
pub fn discriminator_forward_g<E: Elem>(
    g: &mut Graph<E>,
    p: &DiscriminatorParams<E>,
    bound: &DiscBound,
    image: Var,
    masks: &[Var],
) -> Result<Var> {
    if masks.is_empty() {
        return Err(Error::invalid("discriminator_forward: zero valid masks"));
    }
    let use_norm = p.config.use_instance_norm;
    let run_stack = |g: &mut Graph<E>, layers: &[ConvLayer<E>], bounds: &[BoundConv], x: Var| {
        let mut h = x;
        for (l, b) in layers.iter().zip(bounds) {
            h = l.forward(g, b, h, use_norm);
        }
        h
    };
    let ext_x = run_stack(g, &p.f_x, &bound.f_x, image);
    let ext_a: Vec<Var> = masks
        .iter()
        .map(|m| run_stack(g, &p.f_a, &bound.f_a, *m))
        .collect();
    let set_feat = g.sum_n(&ext_a);
    let h = g.concat_c(&[ext_x, set_feat]);
    Ok(run_stack(g, &p.head, &bound.head, h))
}

/// Mask values on disk and in `MaskSet` are {0, 1}; networks consume [-1, 1].
pub fn mask_to_net_range<E: Elem>(g: &mut Graph<E>, mask01: Var) -> Var {
    g.affine(mask01, E::from_f64(2.0), E::from_f64(-1.0))
}

/// Array-level generator forward (inference path, no gradients).
///
/// `masks` hold all slots in {0, 1} form with `valid` flags; padding slots
/// come back as constant background (-1) with their flags preserved.
pub fn generator_forward_arrays<E: Elem>(
    p: &GeneratorParams<E>,
    image: &Array3<E>,
    masks: &[Array3<E>],
    valid: &[bool],
) -> Result<(Array3<E>, Vec<Array3<E>>)> {
    let (_, h, w) = image.dim();
    p.config.check_generator_input(h, w)?;
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::invalid("generator_forward: zero valid masks"));
    }
    let mut g = Graph::<E>::new();
    let bound = p.bind(&mut g, false);
    let img = g.constant(image.clone().into_dyn());
    let mask_vars: Vec<Var> = masks
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(m, _)| {
            let raw = g.constant(m.clone().into_dyn());
            mask_to_net_range(&mut g, raw)
        })
        .collect();
    let (img_out, mask_out) = generator_forward_g(&mut g, p, &bound, img, &mask_vars)?;
    let image_t = g
        .value(img_out)
        .clone()
        .into_dimensionality()
        .expect("generator image output is [3,H,W]");
    let mut out_masks = Vec::with_capacity(masks.len());
    let mut it = mask_out.iter();
    for &v in valid {
        if v {
            let mv = *it.next().unwrap();
            out_masks.push(
                g.value(mv)
                    .clone()
                    .into_dimensionality()
                    .expect("generator mask output is [1,H,W]"),
            );
        } else {
            out_masks.push(Array3::from_elem((1, h, w), E::from_f64(-1.0)));
        }
    }
    Ok((image_t, out_masks))
}

/// Array-level discriminator forward (inference path, no gradients).
pub fn discriminator_forward_arrays<E: Elem>(
    p: &DiscriminatorParams<E>,
    image: &Array3<E>,
    masks: &[Array3<E>],
    valid: &[bool],
) -> Result<Array3<E>> {
    let (_, h, w) = image.dim();
    p.config.disc_output_hw(h, w)?;
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::invalid("discriminator_forward: zero valid masks"));
    }
    let mut g = Graph::<E>::new();
    let bound = p.bind(&mut g, false);
    let img = g.constant(image.clone().into_dyn());
    let mask_vars: Vec<Var> = masks
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(m, _)| {
            let raw = g.constant(m.clone().into_dyn());
            mask_to_net_range(&mut g, raw)
        })
        .collect();
    let out = discriminator_forward_g(&mut g, p, &bound, img, &mask_vars)?;
    Ok(g.value(out).clone().into_dimensionality().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_cfg() -> NetConfig {
        NetConfig {
            base_channels: 4,
            n_res_blocks: 1,
            n_downsample: 2,
            discriminator_layers: 4,
            use_instance_norm: true,
            use_spectral_norm_d: true,
            mask_capacity: 4,
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn(
            (1, h, w),
            |_| if rng.random_range(0.0..1.0f32) < 0.3 { 1.0 } else { 0.0 },
        )
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let a = init_networks::<f32>(&cfg, 7).unwrap();
        let b = init_networks::<f32>(&cfg, 7).unwrap();
        let c = init_networks::<f32>(&cfg, 8).unwrap();

        let collect = |p: &GeneratorParams<f32>| {
            let mut v = Vec::new();
            p.visit_params(&mut |name, arr| v.push((name, arr.clone())));
            v
        };
        assert_eq!(collect(&a.g_xy), collect(&b.g_xy));
        assert_ne!(collect(&a.g_xy), collect(&c.g_xy));
    }

    #[test]
    fn param_count_grows_with_res_blocks() {
        let small = tiny_cfg();
        let mut big = tiny_cfg();
        big.n_res_blocks = 3;
        let a = init_networks::<f32>(&small, 1).unwrap();
        let b = init_networks::<f32>(&big, 1).unwrap();
        assert!(a.g_xy.num_params() < b.g_xy.num_params());
    }

    #[test]
    fn generator_shapes_and_padding_slots() {
        let cfg = tiny_cfg();
        let bundle = init_networks::<f32>(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 3, 16, 16);
        let masks = vec![rand_mask(&mut rng, 16, 16), rand_mask(&mut rng, 16, 16)];
        let (out, out_masks) =
            generator_forward_arrays(&bundle.g_xy, &img, &masks, &[true, true]).unwrap();
        assert_eq!(out.dim(), (3, 16, 16));
        assert_eq!(out_masks.len(), 2);
        assert_eq!(out_masks[0].dim(), (1, 16, 16));
        assert!(out.iter().all(|v| v.abs() < 1.0), "tanh output is open (-1,1)");

        // padding capacity must not change valid outputs
        let padded = vec![
            masks[0].clone(),
            masks[1].clone(),
            Array3::zeros((1, 16, 16)),
            Array3::zeros((1, 16, 16)),
        ];
        let (out2, out_masks2) =
            generator_forward_arrays(&bundle.g_xy, &img, &padded, &[true, true, false, false])
                .unwrap();
        assert_eq!(out, out2);
        assert_eq!(out_masks[0], out_masks2[0]);
        assert_eq!(out_masks[1], out_masks2[1]);
        assert!(out_masks2[2].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn duplicated_mask_slots_translate_identically() {
        let cfg = tiny_cfg();
        let bundle = init_networks::<f32>(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_image(&mut rng, 3, 16, 16);
        let m = rand_mask(&mut rng, 16, 16);
        let (_, out_masks) =
            generator_forward_arrays(&bundle.g_xy, &img, &[m.clone(), m], &[true, true]).unwrap();
        assert_eq!(out_masks[0], out_masks[1]);
    }

    #[test]
    fn generator_permutation_contract_small() {
        let cfg = tiny_cfg();
        let bundle = init_networks::<f32>(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = rand_image(&mut rng, 3, 16, 16);
        let masks = vec![
            rand_mask(&mut rng, 16, 16),
            rand_mask(&mut rng, 16, 16),
            rand_mask(&mut rng, 16, 16),
        ];
        let (out_a, masks_a) =
            generator_forward_arrays(&bundle.g_xy, &img, &masks, &[true; 3]).unwrap();
        let permuted = vec![masks[2].clone(), masks[0].clone(), masks[1].clone()];
        let (out_b, masks_b) =
            generator_forward_arrays(&bundle.g_xy, &img, &permuted, &[true; 3]).unwrap();
        let img_diff = out_a
            .iter()
            .zip(out_b.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(img_diff <= 1e-5, "image must be permutation-invariant, diff={img_diff}");
        // input slot i of the permuted call is original slot perm[i]
        for (orig, perm) in [(2usize, 0usize), (0, 1), (1, 2)] {
            let d = masks_a[orig]
                .iter()
                .zip(masks_b[perm].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(d <= 1e-5, "mask equivariance slot {orig}->{perm}, diff={d}");
        }
    }

    #[test]
    fn discriminator_output_shape_and_invariance() {
        // 5-layer patch discriminator over 64x64: three stride-2 extractor
        // layers take 64 -> 8, the two head layers take 8 -> 7 -> 6.
        let cfg = NetConfig {
            base_channels: 4,
            n_res_blocks: 1,
            n_downsample: 2,
            discriminator_layers: 5,
            use_instance_norm: true,
            use_spectral_norm_d: true,
            mask_capacity: 4,
        };
        assert_eq!(cfg.disc_output_hw(64, 64).unwrap(), (6, 6));
        let bundle = init_networks::<f32>(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_image(&mut rng, 3, 64, 64);
        let masks = vec![rand_mask(&mut rng, 64, 64), rand_mask(&mut rng, 64, 64)];
        let out = discriminator_forward_arrays(&bundle.d_y, &img, &masks, &[true, true]).unwrap();
        assert_eq!(out.dim(), (1, 6, 6));

        let permuted = vec![masks[1].clone(), masks[0].clone()];
        let out_p =
            discriminator_forward_arrays(&bundle.d_y, &img, &permuted, &[true, true]).unwrap();
        let d = out
            .iter()
            .zip(out_p.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(d <= 1e-5, "discriminator permutation invariance, diff={d}");
    }

    #[test]
    fn zero_valid_masks_is_an_error() {
        let cfg = tiny_cfg();
        let bundle = init_networks::<f32>(&cfg, 3).unwrap();
        let img = Array3::zeros((3, 16, 16));
        let err = generator_forward_arrays(&bundle.g_xy, &img, &[], &[]).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidArgument(_)));
    }
}
