//! Reverse-mode autodiff over a flat tape of `ndarray` tensors.
//!
//! A [`Graph`] is built per forward pass: values are computed eagerly as
//! nodes are appended, `backward` walks the tape once in reverse, and
//! gradients are read off leaf nodes. Shapes are `[C, H, W]` for feature
//! maps, `[C]` for vectors and 0-d for scalars. There is no batch axis;
//! instance masks are separate tensors and samples are processed one at a
//! time.
//!
//! Ops only cover what the translation networks need. Convolution weights
//! are stored `[Co, Ci, k, k]` (transposed convolution `[Ci, Co, k, k]`)
//! and flattened to one GEMM per pass in `kernels`.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::kernels;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op<E: Elem> {
    Leaf,
    Const,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Option<Array2<E>>,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    SpectralScale {
        w: Var,
        u: Array1<E>,
        v: Array1<E>,
        sigma: E,
    },
    InstanceNorm {
        x: Var,
        inv_std: Array1<E>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: E,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulBcastC {
        a: Var,
        w: Var,
    },
    Affine {
        x: Var,
        scale: E,
    },
    SumN {
        xs: Vec<Var>,
    },
    ConcatC {
        xs: Vec<Var>,
    },
    MeanAll {
        x: Var,
    },
    MeanSpatial {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    Detach {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropyLogits {
        x: Var,
        softmax: Array1<E>,
        label: usize,
    },
}

struct Node<E: Elem> {
    value: ArrayD<E>,
    needs_grad: bool,
    op: Op<E>,
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<E>, needs_grad: bool, op: Op<E>) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<E> {
        &self.nodes[v.idx()].value
    }

    pub fn scalar_value(&self, v: Var) -> E {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().unwrap()
    }

    /// Trainable leaf: receives a gradient.
    pub fn leaf(&mut self, value: ArrayD<E>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable input: no gradient is accumulated for it.
    pub fn constant(&mut self, value: ArrayD<E>) -> Var {
        self.push(value, false, Op::Const)
    }

    pub fn scalar(&mut self, v: E) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// 2-D convolution over `[C, H, W]`; `w` shaped `[Co, Ci, k, k]`, `b` `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let ws = self.value(w).shape().to_vec();
        let (co, k) = (ws[0], ws[2]);
        debug_assert_eq!(ws[1], self.value(x).shape()[0], "conv2d channel mismatch");
        let x3 = self.nodes[x.idx()]
            .value
            .view()
            .into_dimensionality()
            .expect("conv2d input must be [C,H,W]");
        let w_flat = self.nodes[w.idx()]
            .value
            .to_shape((co, ws[1] * k * k))
            .unwrap();
        let b1 = self.nodes[b.idx()]
            .value
            .view()
            .into_dimensionality()
            .unwrap();
        let (y, cols) = kernels::conv2d_fwd(&x3, &w_flat.view(), &b1.to_owned(), k, stride, pad);
        let save_cols = self.ng(w);
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            y.into_dyn(),
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols: if save_cols { Some(cols) } else { None },
            },
        )
    }

    /// Transposed 2-D convolution; `w` shaped `[Ci, Co, k, k]`, `b` `[Co]`.
    /// Output padding is fixed to `stride - 1` so stride-2 exactly doubles
    /// the spatial size.
    pub fn conv_t2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let ws = self.value(w).shape().to_vec();
        let (ci, co, k) = (ws[0], ws[1], ws[2]);
        debug_assert_eq!(ci, self.value(x).shape()[0], "conv_t2d channel mismatch");
        let out_pad = stride - 1;
        let x3 = self.nodes[x.idx()]
            .value
            .view()
            .into_dimensionality()
            .unwrap();
        let w_flat = self.nodes[w.idx()].value.to_shape((ci, co * k * k)).unwrap();
        let b1: Array1<E> = self.nodes[b.idx()]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let y = kernels::convt2d_fwd(&x3, &w_flat.view(), &b1, co, k, stride, pad, out_pad);
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            y.into_dyn(),
            needs,
            Op::ConvT2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
            },
        )
    }

    /// Divide a convolution weight by its leading singular value estimated
    /// from fixed power-iteration vectors `u` (`[Co]`-like rows of the
    /// flattened matrix) and `v` (remaining dims). The vectors are treated
    /// as constants; the gradient flows through both the numerator and the
    /// `u^T W v` estimate of sigma.
    pub fn spectral_scale(&mut self, w: Var, u: Array1<E>, v: Array1<E>) -> Var {
        let wv = &self.nodes[w.idx()].value;
        let rows = wv.shape()[0];
        let cols: usize = wv.len() / rows;
        debug_assert_eq!(u.len(), rows);
        debug_assert_eq!(v.len(), cols);
        let w_mat = wv.to_shape((rows, cols)).unwrap();
        let sigma = u.dot(&w_mat.dot(&v));
        let sigma = if sigma.abs() < E::from_f64(1e-12) {
            E::from_f64(1e-12)
        } else {
            sigma
        };
        let value = wv.mapv(|x| x / sigma);
        let needs = self.ng(w);
        self.push(value, needs, Op::SpectralScale { w, u, v, sigma })
    }

    /// Per-channel normalization over the spatial axes (no affine part).
    pub fn instance_norm(&mut self, x: Var, eps: E) -> Var {
        let xv = &self.nodes[x.idx()].value;
        let c = xv.shape()[0];
        let n = xv.len() / c;
        let x2 = xv.to_shape((c, n)).unwrap();
        let mut y = Array2::<E>::zeros((c, n));
        let mut inv_std = Array1::<E>::zeros(c);
        let inv_n = E::from_usize(n).recip();
        for ci in 0..c {
            let row = x2.row(ci);
            let mean = row.iter().fold(E::zero(), |a, &b| a + b) * inv_n;
            let var = row
                .iter()
                .fold(E::zero(), |a, &b| a + (b - mean) * (b - mean))
                * inv_n;
            let is = (var + eps).sqrt().recip();
            inv_std[ci] = is;
            let mut out = y.row_mut(ci);
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.ng(x);
        self.push(
            y.into_shape_with_order(IxDyn(&shape)).unwrap(),
            needs,
            Op::InstanceNorm { x, inv_std },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.idx()].value.mapv(|a| a.max(E::zero()));
        let needs = self.ng(x);
        self.push(v, needs, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: E) -> Var {
        let v = self.nodes[x.idx()]
            .value
            .mapv(|a| if a > E::zero() { a } else { a * slope });
        let needs = self.ng(x);
        self.push(v, needs, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.idx()].value.mapv(|a| a.tanh());
        let needs = self.ng(x);
        self.push(v, needs, Op::Tanh { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.idx()].value + &self.nodes[b.idx()].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, needs, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.idx()].value - &self.nodes[b.idx()].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, needs, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.idx()].value * &self.nodes[b.idx()].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, needs, Op::Mul { a, b })
    }

    /// `a * w` with `w` of shape `[1, H, W]` broadcast across channels.
    pub fn mul_bcast_c(&mut self, a: Var, w: Var) -> Var {
        let av = &self.nodes[a.idx()].value;
        let wv = &self.nodes[w.idx()].value;
        debug_assert_eq!(wv.shape()[0], 1);
        debug_assert_eq!(&av.shape()[1..], &wv.shape()[1..]);
        let mut v = av.clone();
        let w0 = wv.index_axis(Axis(0), 0);
        for mut ch in v.axis_iter_mut(Axis(0)) {
            ch.zip_mut_with(&w0, |x, &y| *x = *x * y);
        }
        let needs = self.ng(a) || self.ng(w);
        self.push(v, needs, Op::MulBcastC { a, w })
    }

    /// `scale * x + shift`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: E, shift: E) -> Var {
        let v = self.nodes[x.idx()].value.mapv(|a| a * scale + shift);
        let needs = self.ng(x);
        self.push(v, needs, Op::Affine { x, scale })
    }

    /// Elementwise sum of any number of same-shape tensors.
    pub fn sum_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum_n needs at least one input");
        let mut v = self.nodes[xs[0].idx()].value.clone();
        for x in &xs[1..] {
            debug_assert_eq!(v.shape(), self.value(*x).shape());
            v += &self.nodes[x.idx()].value;
        }
        let needs = xs.iter().any(|x| self.ng(*x));
        self.push(v, needs, Op::SumN { xs: xs.to_vec() })
    }

    /// Concatenate along the channel axis (axis 0).
    pub fn concat_c(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|x| self.nodes[x.idx()].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_c shape mismatch");
        let needs = xs.iter().any(|x| self.ng(*x));
        self.push(v, needs, Op::ConcatC { xs: xs.to_vec() })
    }

    /// Mean over every element, producing a 0-d scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.idx()].value;
        let m = xv.iter().fold(E::zero(), |a, &b| a + b) * E::from_usize(xv.len()).recip();
        let needs = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), needs, Op::MeanAll { x })
    }

    /// Per-channel spatial mean: `[C, H, W] -> [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.idx()].value;
        let c = xv.shape()[0];
        let n = xv.len() / c;
        let x2 = xv.to_shape((c, n)).unwrap();
        let inv_n = E::from_usize(n).recip();
        let m = Array1::from_iter(
            x2.rows()
                .into_iter()
                .map(|r| r.iter().fold(E::zero(), |a, &b| a + b) * inv_n),
        );
        let needs = self.ng(x);
        self.push(m.into_dyn(), needs, Op::MeanSpatial { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.idx()].value.mapv(|a| a.abs());
        let needs = self.ng(x);
        self.push(v, needs, Op::Abs { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.nodes[x.idx()].value.mapv(|a| a * a);
        let needs = self.ng(x);
        self.push(v, needs, Op::Square { x })
    }

    /// Identity value that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.idx()].value.clone();
        self.push(v, false, Op::Detach { x })
    }

    /// Dense layer on a `[Cin]` vector; `w` is `[Cout, Cin]`, `b` `[Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv: Array1<E> = self.nodes[x.idx()]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let wv = self.nodes[w.idx()]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bv: Array1<E> = self.nodes[b.idx()]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let y = wv.dot(&xv) + bv;
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(y.into_dyn(), needs, Op::Linear { x, w, b })
    }

    /// Softmax cross-entropy of a `[C]` logit vector against an integer label.
    pub fn cross_entropy_logits(&mut self, x: Var, label: usize) -> Result<Var> {
        let xv = self.nodes[x.idx()]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::invalid("cross_entropy_logits expects a vector"))?;
        if label >= xv.len() {
            return Err(Error::invalid(format!(
                "label {} out of range for {} logits",
                label,
                xv.len()
            )));
        }
        let max = xv.iter().cloned().fold(E::neg_infinity(), E::max);
        let exps = xv.mapv(|v| (v - max).exp());
        let z = exps.iter().fold(E::zero(), |a, &b| a + b);
        let softmax = exps.mapv(|v| v / z);
        let loss = z.ln() + max - xv[label];
        let needs = self.ng(x);
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            needs,
            Op::CrossEntropyLogits { x, softmax, label },
        ))
    }

    /// `alpha * x + y` for scalar nodes (loss accumulation convenience).
    pub fn axpy(&mut self, alpha: E, x: Var, y: Var) -> Var {
        let ax = self.affine(x, alpha, E::zero());
        self.add(ax, y)
    }

    fn acc_grad(grads: &mut [Option<ArrayD<E>>], node_needs: bool, v: Var, delta: ArrayD<E>) {
        if !node_needs {
            return;
        }
        match &mut grads[v.idx()] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar output. Gradients accumulate on every
    /// node that (transitively) depends on a trainable leaf; fetch them
    /// with [`Graph::take_grad`].
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward target must be scalar");
        let n = self.nodes.len();
        self.grads = Vec::with_capacity(n);
        self.grads.resize_with(n, || None);
        let shape = self.nodes[out.idx()].value.shape().to_vec();
        self.grads[out.idx()] = Some(ArrayD::from_elem(IxDyn(&shape), E::one()));

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=out.idx()).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue; // keep the accumulated gradient for take_grad
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let needs = |v: Var| nodes[v.idx()].needs_grad;
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                    cols,
                } => {
                    let g3 = g.view().into_dimensionality().unwrap();
                    let ws = nodes[w.idx()].value.shape();
                    let (co, ci) = (ws[0], ws[1]);
                    if needs(*x) {
                        let w_flat = nodes[w.idx()].value.to_shape((co, ci * k * k)).unwrap();
                        let xs = nodes[x.idx()].value.shape();
                        let gx = kernels::conv2d_bwd_input(
                            &w_flat.view(),
                            &g3,
                            (xs[1], xs[2]),
                            *k,
                            *stride,
                            *pad,
                        );
                        Self::acc_grad(grads, true, *x, gx.into_dyn());
                    }
                    if needs(*w) {
                        let cols = cols.as_ref().expect("conv cols were not saved");
                        let (gw, gb) = kernels::conv2d_bwd_params(&cols.view(), &g3);
                        let gw = gw
                            .into_shape_with_order(IxDyn(&[co, ci, *k, *k]))
                            .unwrap();
                        Self::acc_grad(grads, true, *w, gw);
                        Self::acc_grad(grads, needs(*b), *b, gb.into_dyn());
                    } else if needs(*b) {
                        let gb = g3
                            .to_shape((g3.dim().0, g3.dim().1 * g3.dim().2))
                            .unwrap()
                            .sum_axis(Axis(1));
                        Self::acc_grad(grads, true, *b, gb.into_dyn());
                    }
                }
                Op::ConvT2d {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                } => {
                    let g3 = g.view().into_dimensionality().unwrap();
                    let ws = nodes[w.idx()].value.shape();
                    let (ci, co) = (ws[0], ws[1]);
                    let w_flat = nodes[w.idx()].value.to_shape((ci, co * k * k)).unwrap();
                    let x3 = nodes[x.idx()].value.view().into_dimensionality().unwrap();
                    let (gx, gwb) = kernels::convt2d_bwd(
                        &x3,
                        &w_flat.view(),
                        &g3,
                        *k,
                        *stride,
                        *pad,
                        needs(*x),
                        needs(*w),
                    );
                    if let Some(gx) = gx {
                        Self::acc_grad(grads, true, *x, gx.into_dyn());
                    }
                    if let Some((gw, gb)) = gwb {
                        let gw = gw
                            .into_shape_with_order(IxDyn(&[ci, co, *k, *k]))
                            .unwrap();
                        Self::acc_grad(grads, true, *w, gw);
                        Self::acc_grad(grads, needs(*b), *b, gb.into_dyn());
                    } else if needs(*b) {
                        let gb = g3
                            .to_shape((g3.dim().0, g3.dim().1 * g3.dim().2))
                            .unwrap()
                            .sum_axis(Axis(1));
                        Self::acc_grad(grads, true, *b, gb.into_dyn());
                    }
                }
                Op::SpectralScale { w, u, v, sigma } => {
                    // d(w/sigma)/dw = I/sigma - (w u v^T)/sigma^2 contracted with g
                    let wv = &nodes[w.idx()].value;
                    let dot_gw = g
                        .iter()
                        .zip(wv.iter())
                        .fold(E::zero(), |a, (&gi, &wi)| a + gi * wi);
                    let coef = dot_gw / (*sigma * *sigma);
                    let rows = u.len();
                    let cols = v.len();
                    let mut gw = g.mapv(|x| x / *sigma);
                    {
                        let mut gw2 = gw.view_mut().into_shape_with_order((rows, cols)).unwrap();
                        for r in 0..rows {
                            let ur = u[r] * coef;
                            let mut row = gw2.row_mut(r);
                            for (c, slot) in row.iter_mut().enumerate() {
                                *slot = *slot - ur * v[c];
                            }
                        }
                    }
                    Self::acc_grad(grads, needs(*w), *w, gw);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = &node.value;
                    let c = y.shape()[0];
                    let n = y.len() / c;
                    let inv_n = E::from_usize(n).recip();
                    let y2 = y.to_shape((c, n)).unwrap();
                    let g2 = g.to_shape((c, n)).unwrap();
                    let mut gx = Array2::<E>::zeros((c, n));
                    for ci in 0..c {
                        let yr = y2.row(ci);
                        let gr = g2.row(ci);
                        let mean_g = gr.iter().fold(E::zero(), |a, &b| a + b) * inv_n;
                        let mean_gy = gr
                            .iter()
                            .zip(yr.iter())
                            .fold(E::zero(), |a, (&gi, &yi)| a + gi * yi)
                            * inv_n;
                        let is = inv_std[ci];
                        let mut out = gx.row_mut(ci);
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *o = is * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    let shape = nodes[x.idx()].value.shape().to_vec();
                    Self::acc_grad(
                        grads,
                        needs(*x),
                        *x,
                        gx.into_shape_with_order(IxDyn(&shape)).unwrap(),
                    );
                }
                Op::Relu { x } => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&nodes[x.idx()].value, |gi, &xi| {
                        if xi <= E::zero() {
                            *gi = E::zero();
                        }
                    });
                    Self::acc_grad(grads, needs(*x), *x, gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&nodes[x.idx()].value, |gi, &xi| {
                        if xi <= E::zero() {
                            *gi = *gi * *slope;
                        }
                    });
                    Self::acc_grad(grads, needs(*x), *x, gx);
                }
                Op::Tanh { x } => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&node.value, |gi, &yi| {
                        *gi = *gi * (E::one() - yi * yi);
                    });
                    Self::acc_grad(grads, needs(*x), *x, gx);
                }
                Op::Add { a, b } => {
                    Self::acc_grad(grads, needs(*a), *a, g.clone());
                    Self::acc_grad(grads, needs(*b), *b, g.clone());
                }
                Op::Sub { a, b } => {
                    Self::acc_grad(grads, needs(*a), *a, g.clone());
                    Self::acc_grad(grads, needs(*b), *b, g.mapv(|v| -v));
                }
                Op::Mul { a, b } => {
                    if needs(*a) {
                        let ga = &g * &nodes[b.idx()].value;
                        Self::acc_grad(grads, true, *a, ga);
                    }
                    if needs(*b) {
                        let gb = &g * &nodes[a.idx()].value;
                        Self::acc_grad(grads, true, *b, gb);
                    }
                }
                Op::MulBcastC { a, w } => {
                    let wv = &nodes[w.idx()].value;
                    let w0 = wv.index_axis(Axis(0), 0);
                    if needs(*a) {
                        let mut ga = g.clone();
                        for mut ch in ga.axis_iter_mut(Axis(0)) {
                            ch.zip_mut_with(&w0, |x, &y| *x = *x * y);
                        }
                        Self::acc_grad(grads, true, *a, ga);
                    }
                    if needs(*w) {
                        let av = &nodes[a.idx()].value;
                        let prod = &g * av;
                        let gw = prod.sum_axis(Axis(0)).insert_axis(Axis(0));
                        Self::acc_grad(grads, true, *w, gw);
                    }
                }
                Op::Affine { x, scale } => {
                    Self::acc_grad(grads, needs(*x), *x, g.mapv(|v| v * *scale));
                }
                Op::SumN { xs } => {
                    for x in xs {
                        Self::acc_grad(grads, needs(*x), *x, g.clone());
                    }
                }
                Op::ConcatC { xs } => {
                    let mut start = 0;
                    for x in xs {
                        let len = nodes[x.idx()].value.shape()[0];
                        if needs(*x) {
                            let gx = g
                                .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
                                .to_owned();
                            Self::acc_grad(grads, true, *x, gx);
                        }
                        start += len;
                    }
                }
                Op::MeanAll { x } => {
                    let g0 = *g.iter().next().unwrap();
                    let shape = nodes[x.idx()].value.shape().to_vec();
                    let n = nodes[x.idx()].value.len();
                    let gx =
                        ArrayD::from_elem(IxDyn(&shape), g0 * E::from_usize(n).recip());
                    Self::acc_grad(grads, needs(*x), *x, gx);
                }
                Op::MeanSpatial { x } => {
                    let xv = &nodes[x.idx()].value;
                    let c = xv.shape()[0];
                    let n = xv.len() / c;
                    let inv_n = E::from_usize(n).recip();
                    let mut gx = ArrayD::zeros(IxDyn(xv.shape()));
                    let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    for (ci, mut ch) in gx.axis_iter_mut(Axis(0)).enumerate() {
                        ch.fill(g1[ci] * inv_n);
                    }
                    Self::acc_grad(grads, needs(*x), *x, gx);
                }
                Op::Abs { x } => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&nodes[x.idx()].value, |gi, &xi| {
                        if xi < E::zero() {
                            *gi = -*gi;
                        } else if xi == E::zero() {
                            *gi = E::zero();
                        }
                    });
                    Self::acc_grad(grads, needs(*x), *x, gx);
                }
                Op::Square { x } => {
                    let two = E::from_f64(2.0);
                    let mut gx = g.clone();
                    gx.zip_mut_with(&nodes[x.idx()].value, |gi, &xi| {
                        *gi = *gi * two * xi;
                    });
                    Self::acc_grad(grads, needs(*x), *x, gx);
                }
                Op::Detach { .. } => {}
                Op::Linear { x, w, b } => {
                    let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let wv = nodes[w.idx()]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    if needs(*x) {
                        let gx = wv.t().dot(&g1);
                        Self::acc_grad(grads, true, *x, gx.into_dyn());
                    }
                    if needs(*w) {
                        let xv = nodes[x.idx()]
                            .value
                            .view()
                            .into_dimensionality::<ndarray::Ix1>()
                            .unwrap();
                        let mut gw = Array2::<E>::zeros(wv.dim());
                        for (r, &gr) in g1.iter().enumerate() {
                            let mut row = gw.row_mut(r);
                            for (c, slot) in row.iter_mut().enumerate() {
                                *slot = gr * xv[c];
                            }
                        }
                        Self::acc_grad(grads, true, *w, gw.into_dyn());
                    }
                    Self::acc_grad(grads, needs(*b), *b, g.clone());
                }
                Op::CrossEntropyLogits { x, softmax, label } => {
                    let g0 = *g.iter().next().unwrap();
                    let mut gx = softmax.mapv(|p| p * g0);
                    gx[*label] = gx[*label] - g0;
                    Self::acc_grad(grads, needs(*x), *x, gx.into_dyn());
                }
            }
        }
    }

    /// Remove and return the accumulated gradient of a (leaf) node.
    pub fn take_grad(&mut self, v: Var) -> Option<ArrayD<E>> {
        self.grads.get_mut(v.idx()).and_then(Option::take)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dyn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a small network touching most ops and returns the scalar loss.
    fn build_loss(params: &[ArrayD<f64>], x: &ArrayD<f64>) -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::<f64>::new();
        let w1 = g.leaf(params[0].clone());
        let b1 = g.leaf(params[1].clone());
        let w2 = g.leaf(params[2].clone());
        let b2 = g.leaf(params[3].clone());
        let xin = g.constant(x.clone());
        let h = g.conv2d(xin, w1, b1, 2, 1);
        let h = g.instance_norm(h, 1e-5);
        let h = g.leaky_relu(h, 0.2);
        let u = g.conv_t2d(h, w2, b2, 2, 1);
        let u = g.tanh(u);
        let d = g.sub(u, xin);
        let d = g.abs(d);
        let loss = g.mean_all(d);
        (g, vec![w1, b1, w2, b2], loss)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            rand_dyn(&mut rng, &[4, 3, 3, 3]) * 0.3,
            rand_dyn(&mut rng, &[4]) * 0.1,
            rand_dyn(&mut rng, &[4, 3, 3, 3]) * 0.3,
            rand_dyn(&mut rng, &[3]) * 0.1,
        ];
        let x = rand_dyn(&mut rng, &[3, 8, 8]);

        let (mut g, vars, loss) = build_loss(&params, &x);
        g.backward(loss);
        let grads: Vec<_> = vars.iter().map(|v| g.take_grad(*v).unwrap()).collect();

        let eps = 1e-6;
        let mut checked = 0;
        for (pi, p) in params.iter().enumerate() {
            for flat in [0, p.len() / 2, p.len() - 1] {
                let mut plus = params.clone();
                plus[pi].as_slice_mut().unwrap()[flat] += eps;
                let (gp, _, lp) = build_loss(&plus, &x);
                let mut minus = params.clone();
                minus[pi].as_slice_mut().unwrap()[flat] -= eps;
                let (gm, _, lm) = build_loss(&minus, &x);
                let fd = (gp.scalar_value(lp) - gm.scalar_value(lm)) / (2.0 * eps);
                let an = grads[pi].as_slice().unwrap()[flat];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                    "param {pi} idx {flat}: fd={fd} analytic={an}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 12);
    }

    #[test]
    fn spectral_scale_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_dyn(&mut rng, &[3, 2, 3, 3]) * 0.2;
        let u = ndarray::Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0f64));
        let v = ndarray::Array1::from_shape_fn(18, |_| rng.random_range(-1.0..1.0f64));

        let run = |w: &ArrayD<f64>| -> (Graph<f64>, Var, Var) {
            let mut g = Graph::<f64>::new();
            let wv = g.leaf(w.clone());
            let ws = g.spectral_scale(wv, u.clone(), v.clone());
            let sq = g.square(ws);
            let loss = g.mean_all(sq);
            (g, wv, loss)
        };
        let (mut g, wv, loss) = run(&w);
        g.backward(loss);
        let gw = g.take_grad(wv).unwrap();

        let eps = 1e-7;
        for flat in [0, 17, w.len() - 1] {
            let mut wp = w.clone();
            wp.as_slice_mut().unwrap()[flat] += eps;
            let (gp, _, lp) = run(&wp);
            let mut wm = w.clone();
            wm.as_slice_mut().unwrap()[flat] -= eps;
            let (gm, _, lm) = run(&wm);
            let fd = (gp.scalar_value(lp) - gm.scalar_value(lm)) / (2.0 * eps);
            let an = gw.as_slice().unwrap()[flat];
            assert!(
                (fd - an).abs() <= 1e-7 + 1e-4 * fd.abs().max(an.abs()),
                "idx {flat}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let d = g.detach(w);
        let s = g.square(d);
        let loss = g.mean_all(s);
        g.backward(loss);
        assert!(g.take_grad(w).is_none());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ndarray::arr1(&[0.2f64, -0.4, 1.1]).into_dyn());
        let loss = g.cross_entropy_logits(x, 2).unwrap();
        g.backward(loss);
        let gx = g.take_grad(x).unwrap();
        let exps = [0.2f64, -0.4, 1.1].map(f64::exp);
        let z: f64 = exps.iter().sum();
        let expect = [exps[0] / z, exps[1] / z, exps[2] / z - 1.0];
        for (a, b) in gx.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
