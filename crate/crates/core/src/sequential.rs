//! Sequential mini-batch inference and the detached training step.
//!
//! Instance masks are split into contiguous mini-batches (after canonical
//! decreasing-area ordering). Translation runs the generator once per
//! mini-batch, feeding each intermediate image into the next step and
//! accumulating translated masks. Training applies the content losses
//! (cycle, identity, context) to the current mini-batch's intermediate pair
//! and the adversarial loss to the aggregate of all mini-batches translated
//! so far, with real samples always carrying their full mask set.
//!
//! Each mini-batch step is its own autodiff graph: the previous step's
//! outputs enter as constants, which is exactly the gradient detachment
//! that keeps the differentiable graph bounded by one mini-batch regardless
//! of the instance count. Per-step gradients are averaged over the number
//! of mini-batches before the parameter update.

use crate::data::{Domain, MaskSet, Sample};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossWeights};
use crate::networks::{
    discriminator_forward_g, generator_forward_arrays, generator_forward_g, mask_to_net_range,
    DiscriminatorParams, GeneratorParams, NetworkBundle,
};
use ndarray::{Array3, ArrayD};

/// A sample in network form: image in [-1, 1], masks in {0, 1}, canonically
/// ordered, no padding slots.
#[derive(Clone, Debug)]
pub struct NetSample<E: Elem> {
    pub id: String,
    pub image: Array3<E>,
    pub masks: Vec<Array3<E>>,
}

impl<E: Elem> NetSample<E> {
    pub fn from_sample(s: &Sample) -> Self {
        NetSample {
            id: s.id.clone(),
            image: s.image.mapv(E::from_f32),
            masks: s
                .masks
                .valid_masks()
                .into_iter()
                .map(|m| m.mapv(E::from_f32))
                .collect(),
        }
    }
}

/// One step of the sequential trace, all tensors in network range.
#[derive(Clone, Debug)]
pub struct TraceStep<E: Elem> {
    /// Input image of this step (`x_1 = x`, thereafter the previous output).
    pub input_image: Array3<E>,
    /// The {0,1} masks of the current mini-batch.
    pub input_masks: Vec<Array3<E>>,
    /// Translated image after this step.
    pub output_image: Array3<E>,
    /// Translated masks of the current mini-batch, continuous in (-1, 1).
    pub output_masks: Vec<Array3<E>>,
}

#[derive(Clone, Debug)]
pub struct SequentialTrace<E: Elem> {
    pub steps: Vec<TraceStep<E>>,
}

impl<E: Elem> SequentialTrace<E> {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn final_image(&self) -> &Array3<E> {
        &self.steps.last().expect("trace has at least one step").output_image
    }

    /// Translated masks aggregated over all steps, preserving the canonical
    /// input order.
    pub fn aggregated_masks(&self) -> Vec<&Array3<E>> {
        self.steps
            .iter()
            .flat_map(|s| s.output_masks.iter())
            .collect()
    }
}

fn chunk_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push(start..end);
        start = end;
    }
    out
}

fn clamp_unit<E: Elem>(img: &mut Array3<E>) {
    let one = E::one();
    img.mapv_inplace(|v| v.min(one).max(-one));
}

/// Translate every instance mini-batch in sequence (inference path).
///
/// `masks` must already be in canonical decreasing-area order. With
/// `batch_size >= masks.len()` this is exactly one generator forward.
pub fn sequential_translate<E: Elem>(
    generator: &GeneratorParams<E>,
    image: &Array3<E>,
    masks: &[Array3<E>],
    batch_size: usize,
) -> Result<SequentialTrace<E>> {
    if masks.is_empty() {
        return Err(Error::invalid("sequential_translate: empty mask set"));
    }
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut steps = Vec::new();
    let mut current = image.clone();
    for range in chunk_ranges(masks.len(), batch_size) {
        let chunk: Vec<Array3<E>> = masks[range].iter().cloned().collect();
        let valid = vec![true; chunk.len()];
        let (out_img, out_masks) = generator_forward_arrays(generator, &current, &chunk, &valid)?;
        let mut next = out_img.clone();
        clamp_unit(&mut next);
        steps.push(TraceStep {
            input_image: current,
            input_masks: chunk,
            output_image: out_img,
            output_masks: out_masks,
        });
        current = next;
    }
    Ok(SequentialTrace { steps })
}

/// Gradients for one network, aligned with its `visit_params` order.
/// `None` means the parameter received no gradient (treated as zero).
pub type GradSet<E> = Vec<Option<ArrayD<E>>>;

fn accumulate<E: Elem>(acc: &mut GradSet<E>, grads: Vec<Option<ArrayD<E>>>, scale: E) {
    if acc.is_empty() {
        *acc = grads
            .into_iter()
            .map(|g| g.map(|a| a.mapv(|v| v * scale)))
            .collect();
        return;
    }
    for (slot, g) in acc.iter_mut().zip(grads) {
        match (slot.as_mut(), g) {
            (Some(a), Some(b)) => a.zip_mut_with(&b, |x, &y| *x += y * scale),
            (None, Some(b)) => *slot = Some(b.mapv(|v| v * scale)),
            _ => {}
        }
    }
}

/// All four gradient sets produced by one training step.
#[derive(Debug)]
pub struct StepGrads<E: Elem> {
    pub g_xy: GradSet<E>,
    pub g_yx: GradSet<E>,
    pub d_x: GradSet<E>,
    pub d_y: GradSet<E>,
}

/// Scalar loss components of one training step (already averaged over
/// mini-batches, summed over the two translation directions).
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub gan_g: f64,
    pub gan_d: f64,
    pub cyc: f64,
    pub idt: f64,
    pub ctx: f64,
}

impl StepLosses {
    pub fn generator_total(&self, w: &LossWeights) -> f64 {
        self.gan_g + w.lambda_cyc * self.cyc + w.lambda_idt * self.idt + w.lambda_ctx * self.ctx
    }
}

/// A detached translated aggregate handed to the discriminator: the current
/// intermediate image plus every translated mask so far (network range).
#[derive(Clone, Debug)]
pub struct FakePair<E: Elem> {
    pub image: Array3<E>,
    pub masks: Vec<Array3<E>>,
}

/// Hook that may replace a fake aggregate before the discriminator consumes
/// it (the trainer routes this through the replay pool).
pub type FakeHook<'a, E> = dyn FnMut(Domain, FakePair<E>) -> FakePair<E> + 'a;

pub struct StepOptions {
    pub batch_size: usize,
    /// Collect per-mini-batch generator gradients (unscaled); used by the
    /// detachment diagnostics and tests.
    pub collect_per_m: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            batch_size: 2,
            collect_per_m: false,
        }
    }
}

#[derive(Debug)]
pub struct StepResult<E: Elem> {
    pub losses: StepLosses,
    pub grads: StepGrads<E>,
    /// Per-direction, per-mini-batch unscaled gradients of the translating
    /// generator, when requested: `[direction][m] -> GradSet`.
    pub per_m_translator_grads: Option<Vec<Vec<GradSet<E>>>>,
}

struct DirectionOutcome<E: Elem> {
    gan_g: f64,
    gan_d: f64,
    cyc: f64,
    idt: f64,
    ctx: f64,
    grads_gen: GradSet<E>,
    grads_inv: GradSet<E>,
    grads_disc: GradSet<E>,
    per_m_gen: Vec<GradSet<E>>,
}

/// One translation direction of the sequential training step.
///
/// `gen` translates src -> tgt, `inv` translates back, `disc` judges the
/// target domain. Gradients for `gen`/`inv` are averaged over mini-batches;
/// `disc` gradients come from one LSGAN update with the real sample
/// (full mask set) and the M pooled fake aggregates.
#[allow(clippy::too_many_arguments)]
fn direction_pass<E: Elem>(
    gen: &GeneratorParams<E>,
    inv: &GeneratorParams<E>,
    disc: &DiscriminatorParams<E>,
    src: &NetSample<E>,
    tgt: &NetSample<E>,
    tgt_domain: Domain,
    weights: &LossWeights,
    opts: &StepOptions,
    fake_hook: &mut FakeHook<'_, E>,
) -> Result<DirectionOutcome<E>> {
    let m_chunks = chunk_ranges(src.masks.len(), opts.batch_size);
    let idt_chunks = chunk_ranges(tgt.masks.len(), opts.batch_size);
    let m_total = m_chunks.len();
    let inv_m = 1.0 / m_total as f64;

    let mut current = src.image.clone();
    let mut prior_fake_masks: Vec<Array3<E>> = Vec::new();
    let mut fakes: Vec<FakePair<E>> = Vec::with_capacity(m_total);

    let mut gan_g_sum = 0.0;
    let mut cyc_sum = 0.0;
    let mut idt_sum = 0.0;
    let mut ctx_sum = 0.0;
    let mut grads_gen: GradSet<E> = Vec::new();
    let mut grads_inv: GradSet<E> = Vec::new();
    let mut per_m_gen: Vec<GradSet<E>> = Vec::new();

    let lam_cyc = E::from_f64(weights.lambda_cyc);
    let lam_idt = E::from_f64(weights.lambda_idt);
    let lam_ctx = E::from_f64(weights.lambda_ctx);

    for (m, range) in m_chunks.iter().enumerate() {
        let mut g = Graph::<E>::new();
        let gen_bound = gen.bind(&mut g, true);
        let inv_bound = inv.bind(&mut g, true);
        let disc_bound = disc.bind(&mut g, false); // critic only: no D grads here

        let x_m = g.constant(current.clone().into_dyn());
        let a01: Vec<Var> = src.masks[range.clone()]
            .iter()
            .map(|mask| g.constant(mask.clone().into_dyn()))
            .collect();
        let a_net: Vec<Var> = a01.iter().map(|&v| mask_to_net_range(&mut g, v)).collect();

        // translate the current mini-batch
        let (y_m, b_m) = generator_forward_g(&mut g, gen, &gen_bound, x_m, &a_net)?;

        // cycle: translate the current mini-batch back
        let (x_rec, a_rec) = generator_forward_g(&mut g, inv, &inv_bound, y_m, &b_m)?;
        let cyc_m = losses::pair_l1(&mut g, x_m, &a_net, x_rec, &a_rec)?;

        // identity: the generator applied to its own target domain, paired
        // with the target sample's m-th mini-batch (last one reused when the
        // target has fewer mini-batches)
        let idt_range = &idt_chunks[m.min(idt_chunks.len() - 1)];
        let y_img = g.constant(tgt.image.clone().into_dyn());
        let b01: Vec<Var> = tgt.masks[idt_range.clone()]
            .iter()
            .map(|mask| g.constant(mask.clone().into_dyn()))
            .collect();
        let b_net: Vec<Var> = b01.iter().map(|&v| mask_to_net_range(&mut g, v)).collect();
        let (y_idt, b_idt) = generator_forward_g(&mut g, gen, &gen_bound, y_img, &b_net)?;
        let idt_m = losses::pair_l1(&mut g, y_img, &b_net, y_idt, &b_idt)?;

        // context preservation on the intermediate pair; translated masks
        // enter in (0,1) without binarization
        let b01_soft: Vec<Var> = b_m
            .iter()
            .map(|&v| g.affine(v, E::from_f64(0.5), E::from_f64(0.5)))
            .collect();
        let w = losses::context_weight(&mut g, &a01, &b01_soft)?;
        let ctx_m = losses::context_loss_one(&mut g, x_m, y_m, w);

        // adversarial term on the aggregate of all translated mini-batches;
        // earlier steps enter as constants (detached)
        let mut agg: Vec<Var> = prior_fake_masks
            .iter()
            .map(|mask| g.constant(mask.clone().into_dyn()))
            .collect();
        agg.extend(b_m.iter().copied());
        let score = discriminator_forward_g(&mut g, disc, &disc_bound, y_m, &agg)?;
        let gan_m = losses::lsgan_g_loss(&mut g, score);

        // check & record components
        let vals = [
            ("cyc", g.scalar_value(cyc_m).to_f64()),
            ("idt", g.scalar_value(idt_m).to_f64()),
            ("ctx", g.scalar_value(ctx_m).to_f64()),
            ("gan_G", g.scalar_value(gan_m).to_f64()),
        ];
        for (name, v) in vals {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: name.to_string(),
                    step_m: m + 1,
                    value: v,
                });
            }
        }
        cyc_sum += vals[0].1;
        idt_sum += vals[1].1;
        ctx_sum += vals[2].1;
        gan_g_sum += vals[3].1;

        let mut seg = g.axpy(lam_cyc, cyc_m, gan_m);
        seg = g.axpy(lam_idt, idt_m, seg);
        seg = g.axpy(lam_ctx, ctx_m, seg);
        g.backward(seg);

        let gen_grads: Vec<Option<ArrayD<E>>> =
            gen_bound.params.iter().map(|v| g.take_grad(*v)).collect();
        let inv_grads: Vec<Option<ArrayD<E>>> =
            inv_bound.params.iter().map(|v| g.take_grad(*v)).collect();
        if opts.collect_per_m {
            let mut one: GradSet<E> = Vec::new();
            accumulate(
                &mut one,
                gen_grads
                    .iter()
                    .map(|g| g.clone())
                    .collect::<Vec<_>>(),
                E::one(),
            );
            per_m_gen.push(one);
        }
        accumulate(&mut grads_gen, gen_grads, E::from_f64(inv_m));
        accumulate(&mut grads_inv, inv_grads, E::from_f64(inv_m));

        // detach step outputs for the next iteration and for the critic
        let mut next = g
            .value(y_m)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        clamp_unit(&mut next);
        for &bv in &b_m {
            prior_fake_masks.push(
                g.value(bv)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap(),
            );
        }
        fakes.push(FakePair {
            image: next.clone(),
            masks: prior_fake_masks.clone(),
        });
        current = next;
    }

    // discriminator update: real sample with the full mask set, plus the
    // (pooled) fake aggregates; fakes are detached arrays by construction
    let mut g = Graph::<E>::new();
    let disc_bound = disc.bind(&mut g, true);
    let real_img = g.constant(tgt.image.clone().into_dyn());
    let real_masks: Vec<Var> = tgt
        .masks
        .iter()
        .map(|mask| {
            let v = g.constant(mask.clone().into_dyn());
            mask_to_net_range(&mut g, v)
        })
        .collect();
    let real_score = discriminator_forward_g(&mut g, disc, &disc_bound, real_img, &real_masks)?;
    let shifted = g.affine(real_score, E::one(), -E::one());
    let sq = g.square(shifted);
    let real_term = g.mean_all(sq);

    let mut fake_terms: Vec<Var> = Vec::with_capacity(fakes.len());
    for fake in fakes {
        let pooled = fake_hook(tgt_domain, fake);
        let img = g.constant(pooled.image.into_dyn());
        let masks: Vec<Var> = pooled
            .masks
            .into_iter()
            .map(|m| g.constant(m.into_dyn()))
            .collect();
        let score = discriminator_forward_g(&mut g, disc, &disc_bound, img, &masks)?;
        let sq = g.square(score);
        fake_terms.push(g.mean_all(sq));
    }
    let mut fake_sum = fake_terms[0];
    for t in &fake_terms[1..] {
        fake_sum = g.add(fake_sum, *t);
    }
    let fake_mean = g.affine(fake_sum, E::from_f64(inv_m), E::zero());
    let d_loss = g.add(real_term, fake_mean);
    let d_val = g.scalar_value(d_loss).to_f64();
    if !d_val.is_finite() {
        return Err(Error::NonFinite {
            term: "gan_D".to_string(),
            step_m: m_total,
            value: d_val,
        });
    }
    g.backward(d_loss);
    let mut grads_disc: GradSet<E> = Vec::new();
    accumulate(
        &mut grads_disc,
        disc_bound.params.iter().map(|v| g.take_grad(*v)).collect(),
        E::one(),
    );

    Ok(DirectionOutcome {
        gan_g: gan_g_sum * inv_m,
        gan_d: d_val,
        cyc: cyc_sum * inv_m,
        idt: idt_sum * inv_m,
        ctx: ctx_sum * inv_m,
        grads_gen,
        grads_inv,
        grads_disc,
        per_m_gen,
    })
}

/// Run both translation directions of Eq.-style sequential training on one
/// sample pair and return losses plus gradients for all four networks.
/// `fake_hook` may swap fake aggregates against a replay pool.
pub fn sequential_training_step<E: Elem>(
    bundle: &NetworkBundle<E>,
    sample_x: &NetSample<E>,
    sample_y: &NetSample<E>,
    weights: &LossWeights,
    opts: &StepOptions,
    fake_hook: &mut FakeHook<'_, E>,
) -> Result<StepResult<E>> {
    weights.validate()?;
    if sample_x.masks.is_empty() || sample_y.masks.is_empty() {
        return Err(Error::invalid("training step needs nonempty mask sets"));
    }
    let cap = bundle.config.mask_capacity;
    for (name, s) in [("X", sample_x), ("Y", sample_y)] {
        if s.masks.len() > cap {
            return Err(Error::invalid(format!(
                "sample {name} has {} masks, exceeding mask_capacity {cap}",
                s.masks.len()
            )));
        }
    }

    let xy = direction_pass(
        &bundle.g_xy,
        &bundle.g_yx,
        &bundle.d_y,
        sample_x,
        sample_y,
        Domain::Y,
        weights,
        opts,
        fake_hook,
    )?;
    let yx = direction_pass(
        &bundle.g_yx,
        &bundle.g_xy,
        &bundle.d_x,
        sample_y,
        sample_x,
        Domain::X,
        weights,
        opts,
        fake_hook,
    )?;

    // direction_pass(gen, inv, ...) accumulates into (gen, inv) slots;
    // merge them into per-network gradient sets
    let mut g_xy = xy.grads_gen;
    accumulate(
        &mut g_xy,
        yx.grads_inv,
        E::one(),
    );
    let mut g_yx = yx.grads_gen;
    accumulate(
        &mut g_yx,
        xy.grads_inv,
        E::one(),
    );

    let losses = StepLosses {
        gan_g: xy.gan_g + yx.gan_g,
        gan_d: xy.gan_d + yx.gan_d,
        cyc: xy.cyc + yx.cyc,
        idt: xy.idt + yx.idt,
        ctx: xy.ctx + yx.ctx,
    };
    let per_m = if opts.collect_per_m {
        Some(vec![xy.per_m_gen, yx.per_m_gen])
    } else {
        None
    };
    Ok(StepResult {
        losses,
        grads: StepGrads {
            g_xy,
            g_yx,
            d_x: yx.grads_disc,
            d_y: xy.grads_disc,
        },
        per_m_translator_grads: per_m,
    })
}

/// Inference convenience over a preprocessed `Sample`: returns the final
/// translated image, the aggregated translated masks (network range) and
/// the full trace.
pub fn translate_sample(
    generator: &GeneratorParams<f32>,
    sample: &Sample,
    batch_size: usize,
) -> Result<SequentialTrace<f32>> {
    let net = NetSample::<f32>::from_sample(sample);
    sequential_translate(generator, &net.image, &net.masks, batch_size)
}

/// Identity fake hook (no replay pool).
pub fn passthrough_hook<E: Elem>() -> impl FnMut(Domain, FakePair<E>) -> FakePair<E> {
    |_, fake| fake
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MaskSet;
    use crate::networks::{init_networks, NetConfig};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
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

    fn rand_sample(rng: &mut ChaCha8Rng, n_masks: usize, hw: usize, id: &str) -> NetSample<f32> {
        let image = Array3::from_shape_fn((3, hw, hw), |_| rng.random_range(-1.0..1.0));
        // blocky masks with distinct, decreasing areas
        let masks = (0..n_masks)
            .map(|i| {
                let mut m = Array3::zeros((1, hw, hw));
                let size = (hw / 2).saturating_sub(2 * i).max(2);
                let off = rng.random_range(0..hw - size);
                for y in off..off + size {
                    for x in off..off + size {
                        m[[0, y, x]] = 1.0;
                    }
                }
                m
            })
            .collect();
        NetSample {
            id: id.into(),
            image,
            masks,
        }
    }

    #[test]
    fn single_batch_equals_one_generator_forward_exactly() {
        let bundle = init_networks::<f32>(&tiny_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = rand_sample(&mut rng, 2, 16, "s");
        let trace = sequential_translate(&bundle.g_xy, &s.image, &s.masks, 2).unwrap();
        assert_eq!(trace.num_steps(), 1);
        let (img, masks) = generator_forward_arrays(
            &bundle.g_xy,
            &s.image,
            &s.masks,
            &[true, true],
        )
        .unwrap();
        assert_eq!(trace.final_image(), &img);
        assert_eq!(trace.steps[0].output_masks, masks);
    }

    #[test]
    fn chaining_feeds_previous_output_forward() {
        let bundle = init_networks::<f32>(&tiny_cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = rand_sample(&mut rng, 4, 16, "s");
        let trace = sequential_translate(&bundle.g_xy, &s.image, &s.masks, 2).unwrap();
        assert_eq!(trace.num_steps(), 2);
        assert_eq!(trace.aggregated_masks().len(), 4);
        // x_2 == clamp(y'_1); tanh output already lies in (-1,1)
        assert_eq!(trace.steps[1].input_image, trace.steps[0].output_image);
        assert_eq!(trace.steps[0].input_image, s.image);
    }

    #[test]
    fn remainder_chunk_sizes() {
        let bundle = init_networks::<f32>(&tiny_cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = rand_sample(&mut rng, 3, 16, "s");
        let trace = sequential_translate(&bundle.g_xy, &s.image, &s.masks, 2).unwrap();
        assert_eq!(trace.num_steps(), 2);
        assert_eq!(trace.steps[0].input_masks.len(), 2);
        assert_eq!(trace.steps[1].input_masks.len(), 1);
    }

    #[test]
    fn empty_mask_set_is_an_error() {
        let bundle = init_networks::<f32>(&tiny_cfg(), 4).unwrap();
        let img = Array3::zeros((3, 16, 16));
        assert!(sequential_translate(&bundle.g_xy, &img, &[], 2).is_err());
    }

    #[test]
    fn training_step_produces_finite_losses_and_full_grads() {
        let bundle = init_networks::<f32>(&tiny_cfg(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sx = rand_sample(&mut rng, 3, 16, "x");
        let sy = rand_sample(&mut rng, 2, 16, "y");
        let mut hook = passthrough_hook::<f32>();
        let res = sequential_training_step(
            &bundle,
            &sx,
            &sy,
            &LossWeights::default(),
            &StepOptions {
                batch_size: 2,
                collect_per_m: false,
            },
            &mut hook,
        )
        .unwrap();
        for v in [
            res.losses.gan_g,
            res.losses.gan_d,
            res.losses.cyc,
            res.losses.idt,
            res.losses.ctx,
        ] {
            assert!(v.is_finite());
        }
        assert!(res.losses.cyc > 0.0);
        // every parameter of every network received a gradient buffer
        assert_eq!(res.grads.g_xy.len(), count_tensors(&bundle.g_xy));
        assert_eq!(res.grads.d_x.len(), count_tensors_d(&bundle.d_x));
        let any_nonzero = res
            .grads
            .g_xy
            .iter()
            .flatten()
            .any(|g| g.iter().any(|&v| v != 0.0));
        assert!(any_nonzero);
        for g in res.grads.g_xy.iter().chain(res.grads.d_y.iter()).flatten() {
            assert!(g.iter().all(|v| v.is_finite()));
        }
    }

    fn count_tensors(p: &GeneratorParams<f32>) -> usize {
        let mut n = 0;
        p.visit_params(&mut |_, _| n += 1);
        n
    }

    fn count_tensors_d(p: &DiscriminatorParams<f32>) -> usize {
        let mut n = 0;
        p.visit_params(&mut |_, _| n += 1);
        n
    }

    #[test]
    fn capacity_overflow_is_an_error() {
        let bundle = init_networks::<f32>(&tiny_cfg(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sx = rand_sample(&mut rng, 5, 16, "x"); // capacity is 4
        let sy = rand_sample(&mut rng, 2, 16, "y");
        let mut hook = passthrough_hook::<f32>();
        let err = sequential_training_step(
            &bundle,
            &sx,
            &sy,
            &LossWeights::default(),
            &StepOptions::default(),
            &mut hook,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn canonical_order_absorbs_input_permutations() {
        // for pairwise-distinct areas, ordering + sequential translation is
        // invariant to the arrival order of masks
        let bundle = init_networks::<f32>(&tiny_cfg(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = rand_sample(&mut rng, 3, 16, "s");
        let ordered = crate::data::order_instances(&MaskSet::from_masks(
            s.masks.iter().map(|m| m.clone()).collect(),
        ));
        let shuffled = MaskSet::from_masks(vec![
            s.masks[2].clone(),
            s.masks[0].clone(),
            s.masks[1].clone(),
        ]);
        let reordered = crate::data::order_instances(&shuffled);
        let t1 = sequential_translate(
            &bundle.g_xy,
            &s.image,
            &ordered.masks,
            2,
        )
        .unwrap();
        let t2 = sequential_translate(&bundle.g_xy, &s.image, &reordered.masks, 2).unwrap();
        assert_eq!(t1.final_image(), t2.final_image());
    }
}
