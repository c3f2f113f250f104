//! Finite-difference verification of every tape primitive.
//!
//! Each check builds a small scalar function from one primitive (composed
//! with `square` and a reduction so gradients are value-dependent), then
//! compares the tape's reverse-mode gradient against central differences in
//! 64-bit precision. Inputs are drawn away from kinks (ReLU, abs, pool ties)
//! so the finite-difference oracle is valid.

use ndarray::Array2;

use super::{FlipKind, Scalar, Tape, Tensor4, Var};
use crate::stochastic::{SeededRng, Stream};

/// Step size for central differences; paired with the < 1e-4 pass threshold.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const PASS_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub param_count: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < PASS_THRESHOLD
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let fp = f(&xs);
            xs[i] = orig - h;
            let fm = f(&xs);
            xs[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// max over components of |a − b| / max(|a|, |b|, 1).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn run_check(
    name: &str,
    shapes: &[(usize, usize, usize, usize)],
    build: &Build,
    rng: &mut SeededRng,
) -> GradCheckReport {
    let sizes: Vec<usize> = shapes.iter().map(|&(b, c, h, w)| b * c * h * w).collect();
    let total: usize = sizes.iter().sum();
    let mut params = vec![0.0f64; total];
    for p in params.iter_mut() {
        // Magnitudes in [0.15, 0.85] with random sign: away from 0 and from
        // each other often enough that kinks and pool ties stay clear of the
        // finite-difference step.
        let sign = if rng.next_f64_open() < 0.5 { -1.0 } else { 1.0 };
        *p = sign * (0.15 + 0.7 * rng.next_f64_open());
    }

    let make_vars = |tape: &mut Tape<f64>, params: &[f64]| -> Vec<Var> {
        let mut vars = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (&shape, &size) in shapes.iter().zip(&sizes) {
            let t = Tensor4::from_shape_vec(shape, params[off..off + size].to_vec())
                .expect("shape/size agree");
            vars.push(tape.leaf(t));
            off += size;
        }
        vars
    };

    let eval = |p: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let vars = make_vars(&mut tape, p);
        let root = build(&mut tape, &vars);
        tape.scalar(root)
    };

    let mut tape = Tape::new();
    let vars = make_vars(&mut tape, &params);
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).expect("fresh tape");
    let mut analytic = Vec::with_capacity(total);
    for &v in &vars {
        analytic.extend(grads.wrt(v, &tape).iter().map(|g| g.to_f64()));
    }

    let numeric = finite_diff(&eval, &params, FD_STEP);
    GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel_err(&analytic, &numeric),
        param_count: total,
    }
}

fn checker_mask(h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| (y + 2 * x) % 3 == 0)
}

fn sq_sum(tape: &mut Tape<f64>, v: Var) -> Var {
    let s = tape.square(v);
    tape.sum_all(s)
}

/// Gradient-check every primitive; returns one report per op.
pub fn check_all(seed: u64) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let rng_for = |i: u64| SeededRng::keyed(seed, Stream::Init, &[0xadd1, i]);

    reports.push(run_check(
        "conv2d",
        &[(2, 2, 4, 4), (3, 2, 3, 3)],
        &|tape, vars| {
            let c = tape.conv2d(vars[0], vars[1]);
            sq_sum(tape, c)
        },
        &mut rng_for(0),
    ));
    reports.push(run_check(
        "add_bias",
        &[(2, 3, 4, 4), (1, 3, 1, 1)],
        &|tape, vars| {
            let c = tape.add_bias(vars[0], vars[1]);
            sq_sum(tape, c)
        },
        &mut rng_for(1),
    ));
    reports.push(run_check(
        "relu",
        &[(1, 2, 4, 4)],
        &|tape, vars| {
            let r = tape.relu(vars[0]);
            sq_sum(tape, r)
        },
        &mut rng_for(2),
    ));
    reports.push(run_check(
        "maxpool2x2",
        &[(1, 2, 4, 4)],
        &|tape, vars| {
            let p = tape.maxpool2x2(vars[0]);
            sq_sum(tape, p)
        },
        &mut rng_for(3),
    ));
    reports.push(run_check(
        "upsample_nearest2x",
        &[(1, 2, 3, 3)],
        &|tape, vars| {
            let u = tape.upsample_nearest2x(vars[0]);
            sq_sum(tape, u)
        },
        &mut rng_for(4),
    ));
    reports.push(run_check(
        "conv_transpose2x2",
        &[(1, 3, 3, 3), (3, 2, 2, 2)],
        &|tape, vars| {
            let c = tape.conv_transpose2x2(vars[0], vars[1]);
            sq_sum(tape, c)
        },
        &mut rng_for(5),
    ));
    reports.push(run_check(
        "concat_channels",
        &[(1, 2, 3, 3), (1, 3, 3, 3)],
        &|tape, vars| {
            let c = tape.concat_channels(vars[0], vars[1]);
            sq_sum(tape, c)
        },
        &mut rng_for(6),
    ));
    reports.push(run_check(
        "diag_flip_transpose",
        &[(1, 2, 4, 4)],
        &|tape, vars| {
            let f = tape.diag_flip(vars[0], FlipKind::Transpose);
            let c = tape.mul(f, vars[0]);
            sq_sum(tape, c)
        },
        &mut rng_for(7),
    ));
    reports.push(run_check(
        "diag_flip_anti",
        &[(1, 2, 4, 4)],
        &|tape, vars| {
            let f = tape.diag_flip(vars[0], FlipKind::AntiTranspose);
            let c = tape.mul(f, vars[0]);
            sq_sum(tape, c)
        },
        &mut rng_for(8),
    ));
    reports.push(run_check(
        "add",
        &[(1, 2, 3, 3), (1, 2, 3, 3)],
        &|tape, vars| {
            let c = tape.add(vars[0], vars[1]);
            sq_sum(tape, c)
        },
        &mut rng_for(9),
    ));
    reports.push(run_check(
        "sub",
        &[(1, 2, 3, 3), (1, 2, 3, 3)],
        &|tape, vars| {
            let c = tape.sub(vars[0], vars[1]);
            sq_sum(tape, c)
        },
        &mut rng_for(10),
    ));
    reports.push(run_check(
        "mul",
        &[(1, 2, 3, 3), (1, 2, 3, 3)],
        &|tape, vars| {
            let c = tape.mul(vars[0], vars[1]);
            sq_sum(tape, c)
        },
        &mut rng_for(11),
    ));
    reports.push(run_check(
        "neg",
        &[(1, 2, 3, 3)],
        &|tape, vars| {
            let c = tape.neg(vars[0]);
            sq_sum(tape, c)
        },
        &mut rng_for(12),
    ));
    reports.push(run_check(
        "abs",
        &[(1, 2, 3, 3)],
        &|tape, vars| {
            let a = tape.abs(vars[0]);
            let s = tape.mul(a, vars[0]);
            sq_sum(tape, s)
        },
        &mut rng_for(13),
    ));
    reports.push(run_check(
        "square",
        &[(1, 2, 3, 3)],
        &|tape, vars| {
            let c = tape.square(vars[0]);
            sq_sum(tape, c)
        },
        &mut rng_for(14),
    ));
    reports.push(run_check(
        "scale_add_scalar",
        &[(1, 2, 3, 3)],
        &|tape, vars| {
            let c = tape.scale(vars[0], 1.7);
            let c = tape.add_scalar(c, -0.3);
            sq_sum(tape, c)
        },
        &mut rng_for(15),
    ));
    reports.push(run_check(
        "diff_x",
        &[(1, 1, 4, 5)],
        &|tape, vars| {
            let c = tape.diff_x(vars[0]);
            sq_sum(tape, c)
        },
        &mut rng_for(16),
    ));
    reports.push(run_check(
        "diff_y",
        &[(1, 1, 5, 4)],
        &|tape, vars| {
            let c = tape.diff_y(vars[0]);
            sq_sum(tape, c)
        },
        &mut rng_for(17),
    ));
    reports.push(run_check(
        "crop",
        &[(1, 2, 5, 5)],
        &|tape, vars| {
            let c = tape.crop(vars[0], 1, 1, 3, 3);
            sq_sum(tape, c)
        },
        &mut rng_for(18),
    ));
    reports.push(run_check(
        "masked_sum",
        &[(1, 2, 4, 4)],
        &|tape, vars| {
            let s = tape.square(vars[0]);
            let m = tape.masked_sum(s, &checker_mask(4, 4));
            tape.square(m)
        },
        &mut rng_for(19),
    ));
    reports.push(run_check(
        "sum_all",
        &[(1, 2, 3, 3)],
        &|tape, vars| {
            let s = tape.square(vars[0]);
            let t = tape.sum_all(s);
            tape.square(t)
        },
        &mut rng_for(20),
    ));
    reports.push(run_check(
        "batch_norm",
        &[(2, 2, 3, 3), (1, 2, 1, 1), (1, 2, 1, 1)],
        &|tape, vars| {
            let b = tape.batch_norm(vars[0], vars[1], vars[2], 1e-6);
            sq_sum(tape, b)
        },
        &mut rng_for(21),
    ));
    reports
}

/// Gradient-check a two-conv-layer composite exercising the realistic chain:
/// conv → bias → ReLU → pool → conv → bias → upsample → flip → reduction.
pub fn check_composite_net(seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::keyed(seed, Stream::Init, &[0xc0, 0x51]);
    run_check(
        "composite_2layer",
        &[(1, 2, 6, 6), (4, 2, 3, 3), (1, 4, 1, 1), (2, 4, 3, 3), (1, 2, 1, 1)],
        &|tape, vars| {
            let c1 = tape.conv2d(vars[0], vars[1]);
            let c1 = tape.add_bias(c1, vars[2]);
            let r1 = tape.relu(c1);
            let p1 = tape.maxpool2x2(r1);
            let c2 = tape.conv2d(p1, vars[3]);
            let c2 = tape.add_bias(c2, vars[4]);
            let u = tape.upsample_nearest2x(c2);
            let f = tape.diag_flip(u, FlipKind::Transpose);
            let s = tape.square(f);
            tape.sum_all(s)
        },
        &mut rng,
    )
}
