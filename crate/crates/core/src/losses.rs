//! Training objectives: least-squares adversarial loss, cycle-consistency,
//! identity mapping, the context-preserving loss and their weighted total.
//!
//! Every loss reduces by MEAN over its elements (patches, pixels, valid
//! mask elements) so the default weights behave the same at any
//! resolution. Masks are compared in network range [-1, 1]; the context
//! weight is computed in [0, 1] space.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
    pub lambda_ctx: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_idt: 10.0,
            lambda_ctx: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cyc < 0.0 || self.lambda_idt < 0.0 || self.lambda_ctx < 0.0 {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Per-step loss summary, one JSON-lines record per training step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub cyc: f64,
    pub idt: f64,
    pub ctx: f64,
    pub total: f64,
}

/// Discriminator objective: mean((real-1)^2) + mean(fake^2).
pub fn lsgan_d_loss<E: Elem>(g: &mut Graph<E>, real_score: Var, fake_score: Var) -> Var {
    let real_shift = g.affine(real_score, E::one(), -E::one());
    let real_sq = g.square(real_shift);
    let real = g.mean_all(real_sq);
    let fake_sq = g.square(fake_score);
    let fake = g.mean_all(fake_sq);
    g.add(real, fake)
}

/// Generator objective: mean((fake-1)^2).
pub fn lsgan_g_loss<E: Elem>(g: &mut Graph<E>, fake_score: Var) -> Var {
    let shift = g.affine(fake_score, E::one(), -E::one());
    let sq = g.square(shift);
    g.mean_all(sq)
}

/// Mean absolute difference over image elements plus mean absolute
/// difference over valid mask elements; masks in network range.
pub fn pair_l1<E: Elem>(
    g: &mut Graph<E>,
    image_a: Var,
    masks_a: &[Var],
    image_b: Var,
    masks_b: &[Var],
) -> Result<Var> {
    if masks_a.len() != masks_b.len() {
        return Err(Error::invalid(format!(
            "pair_l1 slot count mismatch: {} vs {}",
            masks_a.len(),
            masks_b.len()
        )));
    }
    let d = g.sub(image_a, image_b);
    let d = g.abs(d);
    let img_term = g.mean_all(d);
    if masks_a.is_empty() {
        return Ok(img_term);
    }
    let ca = g.concat_c(masks_a);
    let cb = g.concat_c(masks_b);
    let dm = g.sub(ca, cb);
    let dm = g.abs(dm);
    let mask_term = g.mean_all(dm);
    Ok(g.add(img_term, mask_term))
}

/// Sum of round-trip reconstruction penalties for both directions.
pub fn cycle_loss<E: Elem>(
    g: &mut Graph<E>,
    original_x: (Var, &[Var]),
    reconstructed_x: (Var, &[Var]),
    original_y: (Var, &[Var]),
    reconstructed_y: (Var, &[Var]),
) -> Result<Var> {
    let a = pair_l1(g, original_x.0, original_x.1, reconstructed_x.0, reconstructed_x.1)?;
    let b = pair_l1(g, original_y.0, original_y.1, reconstructed_y.0, reconstructed_y.1)?;
    Ok(g.add(a, b))
}

/// Sum of same-domain identity penalties for both generators.
pub fn identity_loss<E: Elem>(
    g: &mut Graph<E>,
    y_pair: (Var, &[Var]),
    g_xy_of_y: (Var, &[Var]),
    x_pair: (Var, &[Var]),
    g_yx_of_x: (Var, &[Var]),
) -> Result<Var> {
    let a = pair_l1(g, y_pair.0, y_pair.1, g_xy_of_y.0, g_xy_of_y.1)?;
    let b = pair_l1(g, x_pair.0, x_pair.1, g_yx_of_x.0, g_yx_of_x.1)?;
    Ok(g.add(a, b))
}

/// Background weight map: 1 where a pixel lies outside every instance of
/// both sets, 0 where any instance covers it, with soft masks giving
/// intermediate values. Computed as `relu(1 - sum(masks))`, i.e. one minus
/// the clamped union. Inputs in [0, 1] space, output `[1, H, W]` in [0, 1].
pub fn context_weight<E: Elem>(
    g: &mut Graph<E>,
    masks_a01: &[Var],
    masks_b01: &[Var],
) -> Result<Var> {
    let all: Vec<Var> = masks_a01.iter().chain(masks_b01.iter()).copied().collect();
    if all.is_empty() {
        return Err(Error::invalid("context_weight: no masks given"));
    }
    let shape = g.value(all[0]).shape().to_vec();
    for m in &all {
        if g.value(*m).shape() != shape.as_slice() {
            return Err(Error::invalid("context_weight: mask shape mismatch"));
        }
    }
    let s = g.sum_n(&all);
    let one_minus = g.affine(s, -E::one(), E::one());
    Ok(g.relu(one_minus))
}

/// One direction of the context-preserving loss:
/// mean over image elements of `w * |x - y'|` with `w` broadcast over
/// channels. Callers sum the two translation directions.
pub fn context_loss_one<E: Elem>(g: &mut Graph<E>, x: Var, y_t: Var, w: Var) -> Var {
    let d = g.sub(x, y_t);
    let d = g.abs(d);
    let wd = g.mul_bcast_c(d, w);
    g.mean_all(wd)
}

/// Weighted total: `gan + l_cyc*cyc + l_idt*idt + l_ctx*ctx`. Inputs are
/// plain numbers (already evaluated); errors on any non-finite component.
pub fn total_loss(
    step: u64,
    gan_g: f64,
    gan_d: f64,
    cyc: f64,
    idt: f64,
    ctx: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    for (name, v) in [
        ("gan_G", gan_g),
        ("gan_D", gan_d),
        ("cyc", cyc),
        ("idt", idt),
        ("ctx", ctx),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                step_m: 0,
                value: v,
            });
        }
    }
    let total = gan_g + weights.lambda_cyc * cyc + weights.lambda_idt * idt + weights.lambda_ctx * ctx;
    Ok(LossReport {
        step,
        gan_g,
        gan_d,
        cyc,
        idt,
        ctx,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn filled(g: &mut Graph<f64>, shape: &[usize], v: f64) -> Var {
        g.constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    #[test]
    fn lsgan_d_loss_values() {
        let mut g = Graph::<f64>::new();
        // perfect discriminator
        let r = filled(&mut g, &[1, 3, 3], 1.0);
        let f = filled(&mut g, &[1, 3, 3], 0.0);
        let l = lsgan_d_loss(&mut g, r, f);
        assert_eq!(g.scalar_value(l), 0.0);
        // both at 0.5
        let r = filled(&mut g, &[1, 3, 3], 0.5);
        let f = filled(&mut g, &[1, 3, 3], 0.5);
        let l = lsgan_d_loss(&mut g, r, f);
        assert!((g.scalar_value(l) - 0.5).abs() < 1e-12);
        // maximally wrong
        let r = filled(&mut g, &[1, 3, 3], 0.0);
        let f = filled(&mut g, &[1, 3, 3], 1.0);
        let l = lsgan_d_loss(&mut g, r, f);
        assert!((g.scalar_value(l) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lsgan_g_loss_values() {
        let mut g = Graph::<f64>::new();
        for (v, expect) in [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)] {
            let f = filled(&mut g, &[1, 2, 2], v);
            let l = lsgan_g_loss(&mut g, f);
            assert!((g.scalar_value(l) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_l1_values() {
        let mut g = Graph::<f64>::new();
        let img_a = filled(&mut g, &[3, 4, 4], 0.3);
        let m_a0 = filled(&mut g, &[1, 4, 4], 1.0);
        let m_a1 = filled(&mut g, &[1, 4, 4], -1.0);

        // identical pairs -> 0
        let l = pair_l1(&mut g, img_a, &[m_a0, m_a1], img_a, &[m_a0, m_a1]).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        // images differ by constant 0.2, masks identical -> 0.2
        let img_b = filled(&mut g, &[3, 4, 4], 0.5);
        let l = pair_l1(&mut g, img_a, &[m_a0, m_a1], img_b, &[m_a0, m_a1]).unwrap();
        assert!((g.scalar_value(l) - 0.2).abs() < 1e-12);

        // one of two valid mask slots differs by 1.0 everywhere -> 0.5
        let m_b1 = filled(&mut g, &[1, 4, 4], 0.0);
        let l = pair_l1(&mut g, img_a, &[m_a0, m_a1], img_a, &[m_a0, m_b1]).unwrap();
        assert!((g.scalar_value(l) - 0.5).abs() < 1e-12);

        // slot count mismatch is an argument error
        assert!(pair_l1(&mut g, img_a, &[m_a0], img_a, &[m_a0, m_a1]).is_err());
    }

    #[test]
    fn cycle_and_identity_compose_additively() {
        let mut g = Graph::<f64>::new();
        let x = filled(&mut g, &[3, 2, 2], 0.1);
        let x_rec = filled(&mut g, &[3, 2, 2], 0.2); // off by 0.1
        let y = filled(&mut g, &[3, 2, 2], -0.4);
        let l = cycle_loss(&mut g, (x, &[]), (x_rec, &[]), (y, &[]), (y, &[])).unwrap();
        assert!((g.scalar_value(l) - 0.1).abs() < 1e-12);

        // symmetric in direction order
        let l2 = cycle_loss(&mut g, (y, &[]), (y, &[]), (x, &[]), (x_rec, &[])).unwrap();
        assert!((g.scalar_value(l) - g.scalar_value(l2)).abs() < 1e-12);

        let y_idt = filled(&mut g, &[3, 2, 2], -0.1); // off by 0.3
        let l = identity_loss(&mut g, (y, &[]), (y_idt, &[]), (x, &[]), (x, &[])).unwrap();
        assert!((g.scalar_value(l) - 0.3).abs() < 1e-12);
        let l = identity_loss(&mut g, (y, &[]), (y_idt, &[]), (x, &[]), (y_idt, &[])).unwrap();
        assert!((g.scalar_value(l) - 0.5).abs() < 1e-9); // 0.3 + |0.1-(-0.1)|=0.2
    }

    #[test]
    fn context_weight_background_in_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let b = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let w = context_weight(&mut g, &[a], &[b]).unwrap();
        let wv = g.value(w);
        assert_eq!(wv.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);

        // all-background masks -> weight 1 everywhere
        let z = filled(&mut g, &[1, 2, 2], 0.0);
        let w = context_weight(&mut g, &[z], &[z]).unwrap();
        assert!(g.value(w).iter().all(|&v| v == 1.0));

        // continuous values 0.5 and 0.25 -> 1 - 0.75 = 0.25
        let a = filled(&mut g, &[1, 1, 1], 0.5);
        let b = filled(&mut g, &[1, 1, 1], 0.25);
        let w = context_weight(&mut g, &[a], &[b]).unwrap();
        assert!((g.value(w).as_slice().unwrap()[0] - 0.25).abs() < 1e-12);

        // oversaturated sums clamp to 0
        let a = filled(&mut g, &[1, 1, 1], 0.9);
        let b = filled(&mut g, &[1, 1, 1], 0.8);
        let w = context_weight(&mut g, &[a], &[b]).unwrap();
        assert_eq!(g.value(w).as_slice().unwrap()[0], 0.0);
    }

    #[test]
    fn context_loss_values_and_annihilation() {
        let mut g = Graph::<f64>::new();
        let x = filled(&mut g, &[3, 2, 2], 0.1);
        let same = filled(&mut g, &[3, 2, 2], 0.1);
        let w1 = filled(&mut g, &[1, 2, 2], 1.0);
        let l = context_loss_one(&mut g, x, same, w1);
        assert_eq!(g.scalar_value(l), 0.0);

        let shifted = filled(&mut g, &[3, 2, 2], 0.5);
        let l = context_loss_one(&mut g, x, shifted, w1);
        assert!((g.scalar_value(l) - 0.4).abs() < 1e-12);

        let w0 = filled(&mut g, &[1, 2, 2], 0.0);
        let l = context_loss_one(&mut g, x, shifted, w0);
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn context_loss_gradient_vanishes_where_weight_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = filled(&mut g, &[3, 2, 2], 0.2);
        let y = g.leaf(ArrayD::from_elem(IxDyn(&[3, 2, 2]), -0.3));
        // binary weight: only pixel (0,0) is background
        let w = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let l = context_loss_one(&mut g, x, y, w);
        g.backward(l);
        let gy = g.take_grad(y).unwrap();
        for c in 0..3 {
            assert!(gy[[c, 0, 0]].abs() > 0.0);
            assert_eq!(gy[[c, 0, 1]], 0.0);
            assert_eq!(gy[[c, 1, 0]], 0.0);
            assert_eq!(gy[[c, 1, 1]], 0.0);
        }
    }

    #[test]
    fn total_loss_arithmetic_and_finiteness() {
        let w = LossWeights::default();
        let r = total_loss(3, 1.0, 0.7, 0.1, 0.1, 0.1, &w).unwrap();
        assert!((r.total - 4.0).abs() < 1e-12);
        assert_eq!(r.step, 3);
        assert_eq!(r.gan_d, 0.7);

        let zero = LossWeights {
            lambda_cyc: 0.0,
            lambda_idt: 0.0,
            lambda_ctx: 0.0,
        };
        let r = total_loss(0, 0.9, 0.0, 5.0, 5.0, 5.0, &zero).unwrap();
        assert_eq!(r.total, 0.9);

        let r = total_loss(0, 0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap();
        assert_eq!(r.total, 0.0);

        assert!(total_loss(0, f64::NAN, 0.0, 0.0, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn l1_losses_scale_linearly_in_perturbation() {
        for alpha in [0.0, 0.25, 1.0, 3.5] {
            let mut g = Graph::<f64>::new();
            let x = filled(&mut g, &[3, 4, 4], 0.0);
            let y = filled(&mut g, &[3, 4, 4], 0.1 * alpha);
            let l = pair_l1(&mut g, x, &[], y, &[]).unwrap();
            assert!((g.scalar_value(l) - 0.1 * alpha).abs() < 1e-12);
        }
    }
}
