//! The four physics-informed loss terms and their weighted combination.
//!
//! Every term exists twice: an `eval_*` function over plain arrays (the
//! reference definition, used by tests and diagnostics) and a `*_node`
//! builder that records the same computation on an autodiff [`Tape`] for
//! training. A cross-check test keeps the two routes equal.
//!
//! All terms are evaluated on the normalized temperature scale; the TV
//! exponent β is fixed at 2.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Tensor4, Var};
use crate::grid::RegionMasks;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("quantile level must lie in (0,1), got {0}")]
    TauOutOfRange(f64),
    #[error("{0} mask has no usable pixels")]
    EmptyMask(&'static str),
    #[error("batch size mismatch: {what} has {got}, expected {want}")]
    BatchMismatch { what: &'static str, got: usize, want: usize },
}

/// Weights of the combined loss; defaults follow the reference setting
/// α_τ = 1e5, α_LE = 1e2, α_BC = 1e2, α_TV = 1e4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_tau: f64,
    pub alpha_le: f64,
    pub alpha_bc: f64,
    pub alpha_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_tau: 1e5, alpha_le: 1e2, alpha_bc: 1e2, alpha_tv: 1e4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.alpha_tau, self.alpha_le, self.alpha_bc, self.alpha_tv];
        if all.iter().any(|&a| a < 0.0) || all.iter().all(|&a| a == 0.0) {
            return Err(LossError::EmptyMask("loss weights must be nonnegative, not all zero"));
        }
        Ok(())
    }
}

/// Values of the four raw terms for one batch, before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub tau: f64,
    pub le: f64,
    pub bc: f64,
    pub tv: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.alpha_tau * self.tau + w.alpha_le * self.le + w.alpha_bc * self.bc + w.alpha_tv * self.tv
    }
}

/// Raster carrying the quantile level τ at monitor pixels, 0 elsewhere.
pub fn quantile_image(masks: &RegionMasks, tau: f64) -> Result<Array2<f64>, LossError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LossError::TauOutOfRange(tau));
    }
    Ok(masks.mp.mapv(|m| if m { tau } else { 0.0 }))
}

/// Pixels of the component-free area whose full 5-point stencil lies inside
/// the grid, re-indexed to the (H−2)×(W−2) interior. Second value is the
/// pixel count N_NC used to normalize the Laplace term.
pub fn nc_interior_mask(nc: &Array2<bool>) -> (Array2<bool>, usize) {
    let (h, w) = nc.dim();
    let interior = Array2::from_shape_fn((h - 2, w - 2), |(y, x)| nc[[y + 1, x + 1]]);
    let count = interior.iter().filter(|&&b| b).count();
    (interior, count)
}

// ---------------------------------------------------------------------------
// Reference evaluation over plain arrays.
// ---------------------------------------------------------------------------

/// Pinball (quantile) error averaged over batch and monitor pixels.
pub fn eval_loss_tau(
    preds: &[Array2<f64>],
    mps: &[Array2<f64>],
    mp_mask: &Array2<bool>,
    taus: &[f64],
) -> Result<f64, LossError> {
    let n = preds.len();
    if mps.len() != n {
        return Err(LossError::BatchMismatch { what: "mp images", got: mps.len(), want: n });
    }
    if taus.len() != n {
        return Err(LossError::BatchMismatch { what: "taus", got: taus.len(), want: n });
    }
    let n_mp = mp_mask.iter().filter(|&&b| b).count();
    if n_mp == 0 {
        return Err(LossError::EmptyMask("monitor"));
    }
    let mut acc = 0.0;
    for ((pred, mp), &tau) in preds.iter().zip(mps).zip(taus) {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(LossError::TauOutOfRange(tau));
        }
        for ((y, x), &is_mp) in mp_mask.indexed_iter() {
            if is_mp {
                let w = mp[[y, x]];
                let w_hat = pred[[y, x]];
                acc += if w >= w_hat { tau * (w - w_hat) } else { (1.0 - tau) * (w_hat - w) };
            }
        }
    }
    Ok(acc / (n as f64 * n_mp as f64))
}

/// Mean squared discrete Laplacian over interior component-free pixels.
pub fn eval_loss_laplace(
    preds: &[Array2<f64>],
    nc: &Array2<bool>,
    dx: f64,
    dy: f64,
) -> Result<f64, LossError> {
    let (interior, count) = nc_interior_mask(nc);
    if count == 0 {
        return Err(LossError::EmptyMask("component-free interior"));
    }
    let mut acc = 0.0;
    for pred in preds {
        for ((iy, ix), &inside) in interior.indexed_iter() {
            if inside {
                let (y, x) = (iy + 1, ix + 1);
                let ddx =
                    (pred[[y, x + 1]] - 2.0 * pred[[y, x]] + pred[[y, x - 1]]) / (dx * dx);
                let ddy =
                    (pred[[y + 1, x]] - 2.0 * pred[[y, x]] + pred[[y - 1, x]]) / (dy * dy);
                acc += (ddx + ddy).powi(2);
            }
        }
    }
    Ok(acc / (preds.len() as f64 * count as f64))
}

/// Mean squared deviation from the sink temperature on boundary pixels.
pub fn eval_loss_bc(preds: &[Array2<f64>], bc: &Array2<bool>, t0: f64) -> Result<f64, LossError> {
    let n_bc = bc.iter().filter(|&&b| b).count();
    if n_bc == 0 {
        return Err(LossError::EmptyMask("boundary"));
    }
    let mut acc = 0.0;
    for pred in preds {
        for ((y, x), &is_bc) in bc.indexed_iter() {
            if is_bc {
                acc += (pred[[y, x]] - t0).powi(2);
            }
        }
    }
    Ok(acc / (preds.len() as f64 * n_bc as f64))
}

/// Total-variation smoothness term, β = 2.
pub fn eval_loss_tv(preds: &[Array2<f64>]) -> f64 {
    let mut acc = 0.0;
    for pred in preds {
        let (h, w) = pred.dim();
        let mut lx = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                lx += (pred[[y, x + 1]] - pred[[y, x]]).powi(2);
            }
        }
        let mut ly = 0.0;
        for y in 0..h - 1 {
            for x in 0..w {
                ly += (pred[[y + 1, x]] - pred[[y, x]]).powi(2);
            }
        }
        acc += lx / (h * (w - 1)) as f64 + ly / ((h - 1) * w) as f64;
    }
    acc / preds.len() as f64
}

// ---------------------------------------------------------------------------
// Tape builders: the same four terms as differentiable graph nodes.
// ---------------------------------------------------------------------------

/// τ error node. `mp` is the (B,1,H,W) monitor-image tensor (consumed as a
/// constant), `taus` the per-sample quantile levels.
pub fn loss_tau_node<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    mp: &Tensor4<S>,
    mp_mask: &Array2<bool>,
    taus: &[f64],
) -> Result<Var, LossError> {
    let (b, _, h, w) = tape.value(pred).dim();
    if taus.len() != b {
        return Err(LossError::BatchMismatch { what: "taus", got: taus.len(), want: b });
    }
    let n_mp = mp_mask.iter().filter(|&&m| m).count();
    if n_mp == 0 {
        return Err(LossError::EmptyMask("monitor"));
    }
    for &t in taus {
        if !(t > 0.0 && t < 1.0) {
            return Err(LossError::TauOutOfRange(t));
        }
    }
    let mut tau_t = Tensor4::zeros((b, 1, h, w));
    let mut one_minus = Tensor4::zeros((b, 1, h, w));
    for (i, &t) in taus.iter().enumerate() {
        tau_t.index_axis_mut(ndarray::Axis(0), i).fill(S::from_f64(t));
        one_minus.index_axis_mut(ndarray::Axis(0), i).fill(S::from_f64(1.0 - t));
    }
    let mp_var = tape.leaf(mp.clone());
    let tau_var = tape.leaf(tau_t);
    let one_minus_var = tape.leaf(one_minus);

    let d = tape.sub(mp_var, pred); // w − ŵ
    let over = tape.relu(d);
    let neg_d = tape.neg(d);
    let under = tape.relu(neg_d);
    let a = tape.mul(tau_var, over);
    let bterm = tape.mul(one_minus_var, under);
    let pin = tape.add(a, bterm);
    let s = tape.masked_sum(pin, mp_mask);
    Ok(tape.scale(s, S::from_f64(1.0 / (b as f64 * n_mp as f64))))
}

/// Laplace-equation error node with physical spacings.
pub fn loss_laplace_node<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    nc: &Array2<bool>,
    dx: f64,
    dy: f64,
) -> Result<Var, LossError> {
    let (b, _, h, w) = tape.value(pred).dim();
    let (interior, count) = nc_interior_mask(nc);
    if count == 0 {
        return Err(LossError::EmptyMask("component-free interior"));
    }
    let ddx = {
        let d1 = tape.diff_x(pred);
        tape.diff_x(d1)
    };
    let ddx = tape.crop(ddx, 1, 0, h - 2, w - 2);
    let ddx = tape.scale(ddx, S::from_f64(1.0 / (dx * dx)));
    let ddy = {
        let d1 = tape.diff_y(pred);
        tape.diff_y(d1)
    };
    let ddy = tape.crop(ddy, 0, 1, h - 2, w - 2);
    let ddy = tape.scale(ddy, S::from_f64(1.0 / (dy * dy)));
    let lap = tape.add(ddx, ddy);
    let sq = tape.square(lap);
    let s = tape.masked_sum(sq, &interior);
    Ok(tape.scale(s, S::from_f64(1.0 / (b as f64 * count as f64))))
}

/// Boundary-condition error node; `t0` on the same scale as `pred`.
pub fn loss_bc_node<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    bc: &Array2<bool>,
    t0: f64,
) -> Result<Var, LossError> {
    let b = tape.value(pred).dim().0;
    let n_bc = bc.iter().filter(|&&m| m).count();
    if n_bc == 0 {
        return Err(LossError::EmptyMask("boundary"));
    }
    let d = tape.add_scalar(pred, S::from_f64(-t0));
    let sq = tape.square(d);
    let s = tape.masked_sum(sq, bc);
    Ok(tape.scale(s, S::from_f64(1.0 / (b as f64 * n_bc as f64))))
}

/// TV regularization node.
pub fn loss_tv_node<S: Scalar>(tape: &mut Tape<S>, pred: Var) -> Var {
    let (b, _, h, w) = tape.value(pred).dim();
    let dxv = tape.diff_x(pred);
    let sx = tape.square(dxv);
    let sx = tape.sum_all(sx);
    let lx = tape.scale(sx, S::from_f64(1.0 / (h * (w - 1)) as f64));
    let dyv = tape.diff_y(pred);
    let sy = tape.square(dyv);
    let sy = tape.sum_all(sy);
    let ly = tape.scale(sy, S::from_f64(1.0 / ((h - 1) * w) as f64));
    let sum = tape.add(lx, ly);
    tape.scale(sum, S::from_f64(1.0 / b as f64))
}

/// Weighted combination node plus the scalar values of each raw term.
pub struct LossNodes {
    pub tau: Var,
    pub le: Var,
    pub bc: Var,
    pub tv: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn terms<S: Scalar>(&self, tape: &Tape<S>) -> LossTerms {
        LossTerms {
            tau: tape.scalar(self.tau).to_f64(),
            le: tape.scalar(self.le).to_f64(),
            bc: tape.scalar(self.bc).to_f64(),
            tv: tape.scalar(self.tv).to_f64(),
        }
    }
}

/// Build all four terms and their weighted total for one predicted batch.
#[allow(clippy::too_many_arguments)]
pub fn build_losses<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    mp: &Tensor4<S>,
    taus: &[f64],
    masks: &RegionMasks,
    dx: f64,
    dy: f64,
    t0_normalized: f64,
    weights: &LossWeights,
) -> Result<LossNodes, LossError> {
    weights.validate()?;
    let tau = loss_tau_node(tape, pred, mp, &masks.mp, taus)?;
    let le = loss_laplace_node(tape, pred, &masks.nc, dx, dy)?;
    let bc = loss_bc_node(tape, pred, &masks.bc, t0_normalized)?;
    let tv = loss_tv_node(tape, pred);
    let wt = tape.scale(tau, S::from_f64(weights.alpha_tau));
    let wle = tape.scale(le, S::from_f64(weights.alpha_le));
    let wbc = tape.scale(bc, S::from_f64(weights.alpha_bc));
    let wtv = tape.scale(tv, S::from_f64(weights.alpha_tv));
    let s1 = tape.add(wt, wle);
    let s2 = tape.add(s1, wbc);
    let total = tape.add(s2, wtv);
    Ok(LossNodes { tau, le, bc, tv, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, max_rel_err};
    use crate::grid::{build_masks, ComponentSpec, DomainSpec, LayoutSpec};
    use crate::stochastic::PowerDistribution;

    fn domain() -> DomainSpec {
        DomainSpec { side_length: 0.1, grid_h: 8, grid_w: 8, sink_width: 0.03, sink_temp: 298.0 }
    }

    fn masks_with_sensors() -> RegionMasks {
        let layout = LayoutSpec {
            components: vec![ComponentSpec {
                id: "C1".into(),
                x0: 5,
                y0: 5,
                x1: 7,
                y1: 7,
                dist: PowerDistribution::Uniform { lo: 1.0, hi: 2.0 },
            }],
            sensors: vec![[2, 2], [3, 6], [6, 1]],
            noise: None,
        };
        build_masks(&domain(), &layout).unwrap()
    }

    fn to_batch(fields: &[Array2<f64>]) -> Tensor4<f64> {
        let (h, w) = fields[0].dim();
        let mut t = Tensor4::zeros((fields.len(), 1, h, w));
        for (i, f) in fields.iter().enumerate() {
            t.index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(f);
        }
        t
    }

    #[test]
    fn quantile_image_construction() {
        let masks = masks_with_sensors();
        let q = quantile_image(&masks, 0.37).unwrap();
        assert_eq!(q.iter().filter(|&&v| v != 0.0).count(), 3);
        for &[r, c] in &[[2usize, 2usize], [3, 6], [6, 1]] {
            assert_eq!(q[[r, c]], 0.37);
        }
        assert!((q.sum() - 0.37 * 3.0).abs() < 1e-15);
        assert_eq!(quantile_image(&masks, 0.37).unwrap(), q);
        assert!(quantile_image(&masks, 0.0).is_err());
        assert!(quantile_image(&masks, 1.0).is_err());
    }

    #[test]
    fn pinball_branch_values() {
        let masks = masks_with_sensors();
        let mut mp = Array2::zeros((8, 8));
        mp[[2, 2]] = 1.0;
        // Restrict to a single sensor for the hand values.
        let mut one_sensor = Array2::from_elem((8, 8), false);
        one_sensor[[2, 2]] = true;

        let pred0 = Array2::zeros((8, 8));
        let l = eval_loss_tau(&[pred0], &[mp.clone()], &one_sensor, &[0.9]).unwrap();
        assert!((l - 0.9).abs() < 1e-15, "w=1, pred=0, tau=0.9 -> 0.9, got {l}");

        let pred2 = Array2::from_elem((8, 8), 2.0);
        let l = eval_loss_tau(&[pred2], &[mp.clone()], &one_sensor, &[0.9]).unwrap();
        assert!((l - 0.1).abs() < 1e-15, "w=1, pred=2, tau=0.9 -> 0.1, got {l}");

        let exact = mp.clone();
        let l = eval_loss_tau(&[exact], &[mp], &masks.mp, &[0.5]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn pinball_at_half_is_half_mae() {
        let masks = masks_with_sensors();
        let pred = Array2::from_shape_fn((8, 8), |(y, x)| 0.1 * y as f64 - 0.2 * x as f64);
        let mp = Array2::from_shape_fn((8, 8), |(y, x)| 0.05 * (x as f64 - y as f64) + 0.3);
        let pin = eval_loss_tau(
            std::slice::from_ref(&pred),
            std::slice::from_ref(&mp),
            &masks.mp,
            &[0.5],
        )
        .unwrap();
        let mut mae = 0.0;
        let mut n = 0;
        for ((y, x), &m) in masks.mp.indexed_iter() {
            if m {
                mae += (mp[[y, x]] - pred[[y, x]]).abs();
                n += 1;
            }
        }
        mae /= n as f64;
        assert!((pin - 0.5 * mae).abs() < 1e-14);
    }

    #[test]
    fn laplace_vanishes_on_affine_fields() {
        let masks = masks_with_sensors();
        let d = domain();
        let affine =
            Array2::from_shape_fn((8, 8), |(y, x)| 3.0 * x as f64 - 2.0 * y as f64 + 0.7);
        let l = eval_loss_laplace(&[affine], &masks.nc, d.dx(), d.dy()).unwrap();
        assert!(l < 1e-10, "affine field gave {l}");
        let constant = Array2::from_elem((8, 8), 5.0);
        let l = eval_loss_laplace(&[constant], &masks.nc, d.dx(), d.dy()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn laplace_quadratic_field_residual_is_two() {
        let d = domain();
        let dx = d.dx();
        // T = x² in physical coordinates: ∂²T/∂x² = 2 everywhere, so each
        // interior pixel contributes (2)² = 4 to the mean.
        let quad = Array2::from_shape_fn((8, 8), |(_, x)| (x as f64 * dx).powi(2));
        let all_nc = Array2::from_elem((8, 8), true);
        let l = eval_loss_laplace(&[quad], &all_nc, dx, d.dy()).unwrap();
        assert!((l - 4.0).abs() < 1e-8, "got {l}");
    }

    #[test]
    fn bc_offset_values() {
        let masks = masks_with_sensors();
        let t0 = 0.0;
        let exact = Array2::zeros((8, 8));
        assert_eq!(eval_loss_bc(&[exact], &masks.bc, t0).unwrap(), 0.0);
        let off1 = Array2::from_elem((8, 8), 1.0);
        assert_eq!(eval_loss_bc(&[off1], &masks.bc, t0).unwrap(), 1.0);
        let off2 = Array2::from_elem((8, 8), 2.0);
        assert_eq!(eval_loss_bc(&[off2], &masks.bc, t0).unwrap(), 4.0);
    }

    #[test]
    fn tv_checkerboard_is_two() {
        let checker = Array2::from_shape_fn((2, 2), |(y, x)| ((y + x) % 2) as f64);
        let l = eval_loss_tv(&[checker.clone()]);
        assert_eq!(l, 2.0);
        let scaled = checker.mapv(|v| 3.0 * v);
        assert_eq!(eval_loss_tv(&[scaled]), 18.0);
        let constant = Array2::from_elem((4, 4), 2.5);
        assert_eq!(eval_loss_tv(&[constant]), 0.0);
    }

    #[test]
    fn total_is_weighted_sum_and_linear() {
        let w = LossWeights::default();
        assert_eq!(w.alpha_tau, 1e5);
        assert_eq!(w.alpha_le, 1e2);
        assert_eq!(w.alpha_bc, 1e2);
        assert_eq!(w.alpha_tv, 1e4);
        let zero = LossTerms { tau: 0.0, le: 0.0, bc: 0.0, tv: 0.0 };
        assert_eq!(zero.total(&w), 0.0);
        let t = LossTerms { tau: 0.1, le: 0.2, bc: 0.3, tv: 0.4 };
        let t2 = LossTerms { tau: 0.2, le: 0.4, bc: 0.6, tv: 0.8 };
        assert!((t2.total(&w) - 2.0 * t.total(&w)).abs() < 1e-9);
    }

    #[test]
    fn tape_route_matches_reference_evaluation() {
        let masks = masks_with_sensors();
        let d = domain();
        let fields: Vec<Array2<f64>> = (0..3)
            .map(|i| {
                Array2::from_shape_fn((8, 8), |(y, x)| {
                    ((y * 8 + x + i * 13) as f64 * 0.713).sin() * 0.4
                })
            })
            .collect();
        let mps: Vec<Array2<f64>> = (0..3)
            .map(|i| masks.mp.mapv(|m| if m { 0.3 + 0.1 * i as f64 } else { 0.0 }))
            .collect();
        let taus = [0.21, 0.5, 0.83];
        let t0 = 0.05;
        let weights = LossWeights::default();

        let mut tape: Tape<f64> = Tape::new();
        let pred = tape.leaf(to_batch(&fields));
        let nodes = build_losses(
            &mut tape,
            pred,
            &to_batch(&mps),
            &taus,
            &masks,
            d.dx(),
            d.dy(),
            t0,
            &weights,
        )
        .unwrap();
        let terms = nodes.terms(&tape);

        let want_tau = eval_loss_tau(&fields, &mps, &masks.mp, &taus).unwrap();
        let want_le = eval_loss_laplace(&fields, &masks.nc, d.dx(), d.dy()).unwrap();
        let want_bc = eval_loss_bc(&fields, &masks.bc, t0).unwrap();
        let want_tv = eval_loss_tv(&fields);
        assert!((terms.tau - want_tau).abs() < 1e-12);
        assert!((terms.le - want_le).abs() < 1e-9);
        assert!((terms.bc - want_bc).abs() < 1e-12);
        assert!((terms.tv - want_tv).abs() < 1e-12);
        assert!(
            (tape.scalar(nodes.total) - terms.total(&weights)).abs()
                < 1e-9 * terms.total(&weights).abs().max(1.0)
        );
    }

    #[test]
    fn every_term_gradient_matches_finite_differences() {
        let masks = masks_with_sensors();
        let d = domain();
        let base = Array2::from_shape_fn((8, 8), |(y, x)| {
            0.37 * ((y as f64 * 1.3 - x as f64 * 0.7).sin() + 0.2)
        });
        let mp = masks.mp.mapv(|m| if m { 0.45 } else { 0.0 });
        let taus = [0.63];
        let t0 = 0.02;

        type BuildFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Var>;
        let mp_t = to_batch(std::slice::from_ref(&mp));
        let cases: Vec<(&str, BuildFn)> = vec![
            ("tau", {
                let masks = masks.clone();
                let mp_t = mp_t.clone();
                Box::new(move |tape, pred| {
                    loss_tau_node(tape, pred, &mp_t, &masks.mp, &taus).unwrap()
                })
            }),
            ("laplace", {
                let nc = masks.nc.clone();
                Box::new(move |tape, pred| {
                    loss_laplace_node(tape, pred, &nc, d.dx(), d.dy()).unwrap()
                })
            }),
            ("bc", {
                let bc = masks.bc.clone();
                Box::new(move |tape, pred| loss_bc_node(tape, pred, &bc, t0).unwrap())
            }),
            ("tv", Box::new(|tape, pred| loss_tv_node(tape, pred))),
        ];

        let flat: Vec<f64> = base.iter().cloned().collect();
        for (name, build) in &cases {
            let eval = |p: &[f64]| -> f64 {
                let f = Array2::from_shape_vec((8, 8), p.to_vec()).unwrap();
                let mut tape: Tape<f64> = Tape::new();
                let pred = tape.leaf(to_batch(std::slice::from_ref(&f)));
                let node = build(&mut tape, pred);
                tape.scalar(node)
            };
            let mut tape: Tape<f64> = Tape::new();
            let pred = tape.leaf(to_batch(std::slice::from_ref(&base)));
            let node = build(&mut tape, pred);
            let grads = tape.backward(node).unwrap();
            let analytic: Vec<f64> = grads.wrt(pred, &tape).into_iter().collect();
            let numeric = finite_diff(&eval, &flat, 1e-5);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: gradcheck err {err:.3e}");
        }
    }

    #[test]
    fn empty_masks_are_rejected() {
        let masks = masks_with_sensors();
        let empty = Array2::from_elem((8, 8), false);
        let f = vec![Array2::zeros((8, 8))];
        assert!(matches!(
            eval_loss_tau(&f, &f, &empty, &[0.5]),
            Err(LossError::EmptyMask(_))
        ));
        assert!(matches!(eval_loss_bc(&f, &empty, 0.0), Err(LossError::EmptyMask(_))));
        assert!(matches!(
            eval_loss_laplace(&f, &empty, 0.1, 0.1),
            Err(LossError::EmptyMask(_))
        ));
        let bad_tau = eval_loss_tau(&f, &f, &masks.mp, &[1.2]);
        assert!(matches!(bad_tau, Err(LossError::TauOutOfRange(_))));
    }
}
