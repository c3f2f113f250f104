//! Monte Carlo quantile prediction: mean field, aleatoric sigma field, and
//! the four evaluation metrics.
//!
//! A trained model is queried `n_pre` times with fresh quantile levels
//! τ ~ U(0,1); the reconstruction is the per-pixel arithmetic mean and the
//! aleatoric uncertainty the per-pixel population standard deviation of
//! those draws, both in Kelvin.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Tensor4};
use crate::grid::{normalize_mp, FieldGrid, MpImage, RegionMasks, T_REF, T_SCALE};
use crate::net::ModelParams;
use crate::stochastic::{draw_tau, SeededRng};

/// Default number of Monte Carlo quantile draws per prediction.
pub const DEFAULT_N_PRE: usize = 200;

/// Forward-pass batch size used by [`NetSampler`]; bounds peak memory while
/// leaving results independent of the chunking.
const DEFAULT_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("n_pre must be at least 2, got {0}")]
    NPreTooSmall(usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("prediction/truth count mismatch: {preds} vs {truths}")]
    CountMismatch { preds: usize, truths: usize },
    #[error("field shape mismatch at sample {index}: {got:?} vs {want:?}")]
    ShapeMismatch { index: usize, got: (usize, usize), want: (usize, usize) },
    #[error("MRE undefined: non-positive truth at sample {index}, pixel ({r},{c})")]
    NonPositiveTruth { index: usize, r: usize, c: usize },
    #[error("R² undefined: zero baseline variance at sample {index}")]
    DegenerateVariance { index: usize },
}

/// Mean reconstruction and aleatoric uncertainty of one MP image.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Per-pixel mean over the Monte Carlo draws, Kelvin.
    pub mean: FieldGrid,
    /// Per-pixel population standard deviation over the draws, Kelvin (≥ 0).
    pub sigma: FieldGrid,
    /// Number of draws behind the statistics.
    pub n_pre: usize,
}

/// Anything that can map a batch of quantile levels to predicted temperature
/// fields in Kelvin. Implemented by the trained network; test doubles model
/// closed-form τ dependencies.
pub trait TauSampler {
    fn sample_fields(&self, taus: &[f64]) -> Vec<Array2<f64>>;
}

/// The trained network as a [`TauSampler`]: fixes one MP image and runs the
/// two-channel forward pass for each quantile level, denormalizing outputs.
pub struct NetSampler<'a, S: Scalar> {
    params: &'a ModelParams<S>,
    mp_norm: Array2<f64>,
    mp_mask: Array2<bool>,
    chunk: usize,
}

impl<'a, S: Scalar> NetSampler<'a, S> {
    pub fn new(params: &'a ModelParams<S>, mp: &MpImage, masks: &RegionMasks) -> Self {
        NetSampler {
            params,
            mp_norm: normalize_mp(mp),
            mp_mask: masks.mp.clone(),
            chunk: DEFAULT_CHUNK,
        }
    }

    /// Override the forward-pass batch size (results do not depend on it).
    pub fn with_chunk(mut self, chunk: usize) -> Self {
        assert!(chunk >= 1);
        self.chunk = chunk;
        self
    }

    fn forward_chunk(&self, taus: &[f64]) -> Vec<Array2<f64>> {
        let (h, w) = self.mp_norm.dim();
        let b = taus.len();
        let mut input = Tensor4::zeros((b, 2, h, w));
        for (i, &tau) in taus.iter().enumerate() {
            for ((y, x), &v) in self.mp_norm.indexed_iter() {
                input[[i, 0, y, x]] = S::from_f64(v);
                if self.mp_mask[[y, x]] {
                    input[[i, 1, y, x]] = S::from_f64(tau);
                }
            }
        }
        let mut tape: Tape<S> = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = tape.leaf(input);
        let out = bound.forward(&mut tape, input);
        let vals = tape.value(out);
        (0..b)
            .map(|i| {
                Array2::from_shape_fn((h, w), |(y, x)| {
                    vals[[i, 0, y, x]].to_f64() * T_SCALE + T_REF
                })
            })
            .collect()
    }
}

impl<S: Scalar> TauSampler for NetSampler<'_, S> {
    fn sample_fields(&self, taus: &[f64]) -> Vec<Array2<f64>> {
        taus.chunks(self.chunk).flat_map(|c| self.forward_chunk(c)).collect()
    }
}

/// Running per-pixel mean/population-std accumulator in 64-bit.
#[derive(Debug, Clone)]
pub struct FieldStats {
    sum: Array2<f64>,
    sum_sq: Array2<f64>,
    n: usize,
}

impl FieldStats {
    pub fn new(shape: (usize, usize)) -> Self {
        FieldStats { sum: Array2::zeros(shape), sum_sq: Array2::zeros(shape), n: 0 }
    }

    pub fn push(&mut self, field: &Array2<f64>) {
        assert_eq!(field.dim(), self.sum.dim());
        self.sum += field;
        self.sum_sq.zip_mut_with(field, |a, &v| *a += v * v);
        self.n += 1;
    }

    /// (mean, population standard deviation); variance clamped at 0 against
    /// round-off.
    pub fn finish(self) -> (Array2<f64>, Array2<f64>) {
        assert!(self.n > 0);
        let n = self.n as f64;
        let mean = self.sum / n;
        let mut sigma = self.sum_sq / n;
        sigma.zip_mut_with(&mean, |s, &m| *s = (*s - m * m).max(0.0).sqrt());
        (mean, sigma)
    }
}

/// Algorithm 2: draw `n_pre` quantile levels, query the sampler, reduce to
/// mean and population-std fields. `dx`/`dy` are carried into the returned
/// grids.
pub fn predict_mcqr(
    sampler: &impl TauSampler,
    dx: f64,
    dy: f64,
    n_pre: usize,
    rng: &mut SeededRng,
) -> Result<Reconstruction, PredictError> {
    if n_pre < 2 {
        return Err(PredictError::NPreTooSmall(n_pre));
    }
    let taus: Vec<f64> = (0..n_pre).map(|_| draw_tau(rng)).collect();
    let fields = sampler.sample_fields(&taus);
    assert_eq!(fields.len(), n_pre, "sampler returned wrong draw count");
    let mut stats = FieldStats::new(fields[0].dim());
    for f in &fields {
        stats.push(f);
    }
    let (mean, sigma) = stats.finish();
    Ok(Reconstruction {
        mean: FieldGrid { values: mean, dx, dy },
        sigma: FieldGrid { values: sigma, dx, dy },
        n_pre,
    })
}

/// Convenience wrapper: predict directly from a model and MP image.
pub fn predict_field<S: Scalar>(
    params: &ModelParams<S>,
    mp: &MpImage,
    masks: &RegionMasks,
    dx: f64,
    dy: f64,
    n_pre: usize,
    rng: &mut SeededRng,
) -> Result<Reconstruction, PredictError> {
    let sampler = NetSampler::new(params, mp, masks);
    predict_mcqr(&sampler, dx, dy, n_pre, rng)
}

/// Which baseline the R² denominator deviates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum R2Baseline {
    /// The per-pixel mean prediction across the whole test set (the
    /// reference definition here, despite being nonstandard).
    #[default]
    MeanPrediction,
    /// The per-sample spatial mean of the truth field (textbook R²).
    Conventional,
}

/// The four test-set metrics, all in Kelvin except the dimensionless last
/// two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub mre: f64,
    pub r2: f64,
}

/// Average RMSE / MAE / MRE / R² over test pairs.
pub fn metrics(
    preds: &[FieldGrid],
    truths: &[FieldGrid],
    baseline: R2Baseline,
) -> Result<MetricReport, PredictError> {
    if preds.is_empty() {
        return Err(PredictError::EmptyTestSet);
    }
    if preds.len() != truths.len() {
        return Err(PredictError::CountMismatch { preds: preds.len(), truths: truths.len() });
    }
    let shape = preds[0].values.dim();
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.values.dim() != shape {
            return Err(PredictError::ShapeMismatch {
                index: i,
                got: p.values.dim(),
                want: shape,
            });
        }
        if t.values.dim() != shape {
            return Err(PredictError::ShapeMismatch {
                index: i,
                got: t.values.dim(),
                want: shape,
            });
        }
    }
    let n_test = preds.len() as f64;
    let n_px = (shape.0 * shape.1) as f64;

    let mut rmse = 0.0;
    let mut mae = 0.0;
    let mut mre = 0.0;
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        let mut sq = 0.0;
        let mut abs = 0.0;
        let mut rel = 0.0;
        for ((r, c), &tv) in t.values.indexed_iter() {
            let d = tv - p.values[[r, c]];
            sq += d * d;
            abs += d.abs();
            if tv <= 0.0 {
                return Err(PredictError::NonPositiveTruth { index: i, r, c });
            }
            rel += d.abs() / tv;
        }
        rmse += (sq / n_px).sqrt();
        mae += abs / n_px;
        mre += rel / n_px;
    }
    rmse /= n_test;
    mae /= n_test;
    mre /= n_test;

    let mean_pred = {
        let mut acc = Array2::<f64>::zeros(shape);
        for p in preds {
            acc += &p.values;
        }
        acc / n_test
    };
    let mut r2 = 0.0;
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        let truth_mean = t.values.sum() / n_px;
        for ((r, c), &tv) in t.values.indexed_iter() {
            let d = tv - p.values[[r, c]];
            num += d * d;
            let b = match baseline {
                R2Baseline::MeanPrediction => mean_pred[[r, c]],
                R2Baseline::Conventional => truth_mean,
            };
            den += (tv - b) * (tv - b);
        }
        if den == 0.0 {
            return Err(PredictError::DegenerateVariance { index: i });
        }
        r2 += 1.0 - num / den;
    }
    r2 /= n_test;

    Ok(MetricReport { rmse, mae, mre, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_masks, ComponentSpec, DomainSpec, LayoutSpec};
    use crate::net::ModelConfig;
    use crate::stochastic::{PowerDistribution, Stream};

    fn domain() -> DomainSpec {
        DomainSpec { side_length: 0.1, grid_h: 8, grid_w: 8, sink_width: 0.03, sink_temp: 298.0 }
    }

    fn layout() -> LayoutSpec {
        LayoutSpec {
            components: vec![ComponentSpec {
                id: "C1".into(),
                x0: 1,
                y0: 4,
                x1: 4,
                y1: 7,
                dist: PowerDistribution::Uniform { lo: 5.0, hi: 10.0 },
            }],
            sensors: vec![[1, 1], [2, 5], [6, 3], [5, 6]],
            noise: None,
        }
    }

    struct LinearTau {
        a: f64,
        b: f64,
        shape: (usize, usize),
    }

    impl TauSampler for LinearTau {
        fn sample_fields(&self, taus: &[f64]) -> Vec<Array2<f64>> {
            taus.iter()
                .map(|&t| Array2::from_elem(self.shape, self.a + self.b * t))
                .collect()
        }
    }

    #[test]
    fn linear_tau_sigma_approaches_uniform_std() {
        let sampler = LinearTau { a: 300.0, b: 12.0, shape: (4, 4) };
        let mut rng = SeededRng::new(99, Stream::Mc);
        let recon = predict_mcqr(&sampler, 1.0, 1.0, 10_000, &mut rng).unwrap();
        let want = 12.0 / 12f64.sqrt(); // |b| · std of U(0,1)
        for &s in recon.sigma.values.iter() {
            assert!((s - want).abs() / want < 0.03, "sigma {s} vs {want}");
        }
        // Mean tends to a + b/2.
        for &m in recon.mean.values.iter() {
            assert!((m - 306.0).abs() < 0.2);
        }
    }

    #[test]
    fn tau_independent_sampler_gives_zero_sigma() {
        struct Constant;
        impl TauSampler for Constant {
            fn sample_fields(&self, taus: &[f64]) -> Vec<Array2<f64>> {
                taus.iter().map(|_| Array2::from_elem((3, 3), 310.0)).collect()
            }
        }
        let mut rng = SeededRng::new(1, Stream::Mc);
        let recon = predict_mcqr(&Constant, 1.0, 1.0, 50, &mut rng).unwrap();
        assert!(recon.sigma.values.iter().all(|&s| s == 0.0));
        assert!(recon.mean.values.iter().all(|&m| m == 310.0));
    }

    #[test]
    fn n_pre_below_two_rejected() {
        let sampler = LinearTau { a: 0.0, b: 1.0, shape: (2, 2) };
        let mut rng = SeededRng::new(0, Stream::Mc);
        assert!(matches!(
            predict_mcqr(&sampler, 1.0, 1.0, 1, &mut rng),
            Err(PredictError::NPreTooSmall(1))
        ));
        assert_eq!(DEFAULT_N_PRE, 200);
    }

    #[test]
    fn net_mean_matches_direct_loop_oracle() {
        let d = domain();
        let masks = build_masks(&d, &layout()).unwrap();
        let params = ModelParams::<f32>::init(
            ModelConfig { base_channels: 4, ..ModelConfig::default() },
            7,
        );
        let mut mp = Array2::zeros((8, 8));
        for &[r, c] in &layout().sensors {
            mp[[r, c]] = 315.0 + (r * 8 + c) as f64;
        }
        let n_pre = 16;
        let mut rng = SeededRng::new(5, Stream::Mc);
        let recon =
            predict_field(&params, &mp, &masks, d.dx(), d.dy(), n_pre, &mut rng).unwrap();

        // Re-draw the same taus and average single-draw forwards in f64.
        let mut rng2 = SeededRng::new(5, Stream::Mc);
        let taus: Vec<f64> = (0..n_pre).map(|_| draw_tau(&mut rng2)).collect();
        let sampler = NetSampler::new(&params, &mp, &masks).with_chunk(1);
        let mut acc = Array2::<f64>::zeros((8, 8));
        for &t in &taus {
            acc += &sampler.sample_fields(&[t])[0];
        }
        acc /= n_pre as f64;
        for (got, want) in recon.mean.values.iter().zip(acc.iter()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn chunking_does_not_change_results() {
        let d = domain();
        let masks = build_masks(&d, &layout()).unwrap();
        let params = ModelParams::<f32>::init(
            ModelConfig { base_channels: 4, ..ModelConfig::default() },
            11,
        );
        let mut mp = Array2::zeros((8, 8));
        for &[r, c] in &layout().sensors {
            mp[[r, c]] = 320.0;
        }
        let run = |chunk: usize| {
            let sampler = NetSampler::new(&params, &mp, &masks).with_chunk(chunk);
            let mut rng = SeededRng::new(3, Stream::Mc);
            predict_mcqr(&sampler, d.dx(), d.dy(), 11, &mut rng).unwrap()
        };
        let a = run(1);
        let b = run(4);
        let c = run(64);
        for ((x, y), z) in a
            .mean
            .values
            .iter()
            .zip(b.mean.values.iter())
            .zip(c.mean.values.iter())
        {
            assert!((x - y).abs() < 1e-6);
            assert!((y - z).abs() < 1e-6);
        }
        for ((x, y), z) in a
            .sigma
            .values
            .iter()
            .zip(b.sigma.values.iter())
            .zip(c.sigma.values.iter())
        {
            assert!((x - y).abs() < 1e-6);
            assert!((y - z).abs() < 1e-6);
        }
    }

    #[test]
    fn sigma_invariant_under_draw_reordering() {
        let fields: Vec<Array2<f64>> =
            (0..7).map(|i| Array2::from_elem((2, 2), 300.0 + i as f64 * 3.0)).collect();
        let stats_of = |order: &[usize]| {
            let mut s = FieldStats::new((2, 2));
            for &i in order {
                s.push(&fields[i]);
            }
            s.finish()
        };
        let (m1, s1) = stats_of(&[0, 1, 2, 3, 4, 5, 6]);
        let (m2, s2) = stats_of(&[6, 2, 0, 5, 1, 4, 3]);
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn grid(vals: Array2<f64>) -> FieldGrid {
        FieldGrid { values: vals, dx: 1.0, dy: 1.0 }
    }

    #[test]
    fn perfect_predictions_score_zero_error_unit_r2() {
        let truths: Vec<FieldGrid> = (0..3)
            .map(|i| {
                grid(Array2::from_shape_fn((4, 4), |(r, c)| {
                    300.0 + (r * 4 + c) as f64 * (1.0 + i as f64) + (i * i) as f64 * 5.0
                }))
            })
            .collect();
        let preds = truths.clone();
        let m = metrics(&preds, &truths, R2Baseline::MeanPrediction).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.mre, 0.0);
        assert_eq!(m.r2, 1.0);
        let mc = metrics(&preds, &truths, R2Baseline::Conventional).unwrap();
        assert_eq!(mc.r2, 1.0);
    }

    #[test]
    fn uniform_offset_gives_unit_rmse_and_mae() {
        let truths: Vec<FieldGrid> = (0..2)
            .map(|i| {
                grid(Array2::from_shape_fn((4, 4), |(r, c)| {
                    300.0 + (r + c) as f64 + i as f64 * 10.0
                }))
            })
            .collect();
        let preds: Vec<FieldGrid> =
            truths.iter().map(|t| grid(t.values.mapv(|v| v + 1.0))).collect();
        let m = metrics(&preds, &truths, R2Baseline::MeanPrediction).unwrap();
        assert!((m.rmse - 1.0).abs() < 1e-12);
        assert!((m.mae - 1.0).abs() < 1e-12);
        assert!(m.mre > 0.0);
    }

    #[test]
    fn single_pixel_relative_error_contribution() {
        let truth = grid(Array2::from_shape_fn((4, 4), |(r, c)| 300.0 + (r * 4 + c) as f64));
        let mut pred = truth.values.clone();
        pred[[0, 0]] = 303.0; // truth 300 → |3|/300 = 0.01 at this pixel
        let m = metrics(&[grid(pred)], &[truth], R2Baseline::MeanPrediction).unwrap();
        assert!((m.mre * 16.0 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_truth_pixel_rejected() {
        let truth = grid(Array2::from_elem((4, 4), 0.0));
        let pred = grid(Array2::from_elem((4, 4), 1.0));
        assert!(matches!(
            metrics(&[pred], &[truth], R2Baseline::MeanPrediction),
            Err(PredictError::NonPositiveTruth { .. })
        ));
    }

    #[test]
    fn degenerate_baseline_variance_rejected() {
        // All predictions identical and truth equal to that constant: the
        // paper baseline has zero variance.
        let f = grid(Array2::from_elem((4, 4), 305.0));
        let res = metrics(
            &[f.clone(), f.clone()],
            &[f.clone(), f.clone()],
            R2Baseline::MeanPrediction,
        );
        assert!(matches!(res, Err(PredictError::DegenerateVariance { .. })));
    }

    #[test]
    fn baselines_disagree_on_biased_predictions() {
        let truths: Vec<FieldGrid> = (0..2)
            .map(|i| {
                grid(Array2::from_shape_fn((4, 4), |(r, c)| {
                    300.0 + (2 * r + c) as f64 + i as f64 * 20.0
                }))
            })
            .collect();
        let preds: Vec<FieldGrid> =
            truths.iter().map(|t| grid(t.values.mapv(|v| v + 2.0))).collect();
        let paper = metrics(&preds, &truths, R2Baseline::MeanPrediction).unwrap();
        let conv = metrics(&preds, &truths, R2Baseline::Conventional).unwrap();
        assert!((paper.r2 - conv.r2).abs() > 1e-6);
    }
}
