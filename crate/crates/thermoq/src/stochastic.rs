//! Seeded random sources, moment-matched power distributions, and Latin
//! Hypercube Sampling.
//!
//! All randomness in the pipeline flows from one root seed through named
//! streams so that independent phases (data generation, quantile draws,
//! sensor noise, Monte Carlo prediction) are reproducible in isolation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Euler–Mascheroni constant, used by the Gumbel moment inversion.
pub const EULER_GAMMA: f64 = 0.5772156649015329;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("lognormal distribution requires a positive mean, got {0}")]
    NonPositiveLognormalMean(f64),
    #[error("uniform distribution requires lower < upper, got [{lo}, {hi}]")]
    EmptyUniform { lo: f64, hi: f64 },
}

/// A component power distribution specified by its first two moments
/// (or by bounds, for the uniform case).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PowerDistribution {
    Normal { mean: f64, std: f64 },
    Lognormal { mean: f64, std: f64 },
    Gumbel { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Internal (natural) parameters of a distribution, solved from the
/// moment specification.
#[derive(Debug, Clone, PartialEq)]
pub enum DistParams {
    Normal { mean: f64, std: f64 },
    /// Parameters of the underlying normal.
    Lognormal { mu: f64, sigma: f64 },
    Gumbel { location: f64, scale: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl PowerDistribution {
    pub fn validate(&self) -> Result<(), StochasticError> {
        match *self {
            PowerDistribution::Normal { std, .. } | PowerDistribution::Gumbel { std, .. } => {
                if std <= 0.0 {
                    return Err(StochasticError::NonPositiveStd(std));
                }
            }
            PowerDistribution::Lognormal { mean, std } => {
                if std <= 0.0 {
                    return Err(StochasticError::NonPositiveStd(std));
                }
                if mean <= 0.0 {
                    return Err(StochasticError::NonPositiveLognormalMean(mean));
                }
            }
            PowerDistribution::Uniform { lo, hi } => {
                if lo >= hi {
                    return Err(StochasticError::EmptyUniform { lo, hi });
                }
            }
        }
        Ok(())
    }

    /// Solve natural parameters from the stated moments.
    ///
    /// Gumbel: `scale = std * sqrt(6) / pi`, `location = mean - gamma * scale`.
    /// Lognormal: `sigma^2 = ln(1 + std^2/mean^2)`, `mu = ln(mean) - sigma^2/2`.
    /// Normal and uniform pass through unchanged.
    pub fn params(&self) -> Result<DistParams, StochasticError> {
        self.validate()?;
        Ok(match *self {
            PowerDistribution::Normal { mean, std } => DistParams::Normal { mean, std },
            PowerDistribution::Lognormal { mean, std } => {
                let sigma2 = (1.0 + (std / mean).powi(2)).ln();
                DistParams::Lognormal {
                    mu: mean.ln() - 0.5 * sigma2,
                    sigma: sigma2.sqrt(),
                }
            }
            PowerDistribution::Gumbel { mean, std } => {
                let scale = std * 6.0_f64.sqrt() / std::f64::consts::PI;
                DistParams::Gumbel {
                    location: mean - EULER_GAMMA * scale,
                    scale,
                }
            }
            PowerDistribution::Uniform { lo, hi } => DistParams::Uniform { lo, hi },
        })
    }

    /// One plain Monte Carlo draw by inverse-CDF sampling.
    pub fn sample(&self, rng: &mut SeededRng) -> Result<f64, StochasticError> {
        Ok(self.params()?.quantile(rng.next_f64_open()))
    }
}

impl DistParams {
    /// Inverse CDF at probability `p` (must lie strictly in (0, 1)).
    pub fn quantile(&self, p: f64) -> f64 {
        debug_assert!(p > 0.0 && p < 1.0, "quantile level must be in (0,1)");
        match *self {
            DistParams::Normal { mean, std } => {
                Normal::new(mean, std).expect("validated").inverse_cdf(p)
            }
            DistParams::Lognormal { mu, sigma } => {
                Normal::new(mu, sigma).expect("validated").inverse_cdf(p).exp()
            }
            DistParams::Gumbel { location, scale } => location - scale * (-p.ln()).ln(),
            DistParams::Uniform { lo, hi } => lo + p * (hi - lo),
        }
    }

    /// CDF at `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            DistParams::Normal { mean, std } => Normal::new(mean, std).expect("validated").cdf(x),
            DistParams::Lognormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    Normal::new(mu, sigma).expect("validated").cdf(x.ln())
                }
            }
            DistParams::Gumbel { location, scale } => (-(-(x - location) / scale).exp()).exp(),
            DistParams::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
        }
    }
}

/// Named sub-streams of the root seed. Logged in dataset metadata so every
/// artifact can state exactly which streams produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    /// Power sampling for dataset generation.
    Data,
    /// Quantile levels during training and prediction.
    Tau,
    /// Sensor noise injection.
    Noise,
    /// Monte Carlo prediction and reliability draws.
    Mc,
    /// Parameter initialization.
    Init,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Tau => 2,
            Stream::Noise => 3,
            Stream::Mc => 4,
            Stream::Init => 5,
        }
    }
}

/// Counter-based seeded RNG: identical `(seed, stream, keys...)` yields an
/// identical sequence on every platform. Workers own independent streams.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream.id())
    }

    fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    /// Derive an independent sub-stream keyed by integers such as
    /// `(epoch, sample_index)`. The derived sequence depends only on the
    /// root seed, the stream, and the keys — never on draw order elsewhere.
    pub fn keyed(seed: u64, stream: Stream, keys: &[u64]) -> Self {
        let mut h = splitmix64(stream.id());
        for &k in keys {
            h = splitmix64(h ^ splitmix64(k));
        }
        Self::with_stream_id(seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw strictly inside (0, 1): never 0, never 1.
    pub fn next_f64_open(&mut self) -> f64 {
        // 53 significant bits, offset half an ulp away from the endpoints.
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// A quantile level drawn uniformly on the open interval (0, 1).
pub fn draw_tau(rng: &mut SeededRng) -> f64 {
    rng.next_f64_open()
}

/// Latin Hypercube Sampling: `n` rows by `dists.len()` columns. Per column,
/// exactly one draw falls in each of the `n` equal-probability strata of the
/// target distribution; columns are paired by independent permutations.
pub fn lhs_sample(
    n: usize,
    dists: &[PowerDistribution],
    rng: &mut SeededRng,
) -> Result<Array2<f64>, StochasticError> {
    assert!(n >= 1, "lhs_sample requires n >= 1");
    assert!(!dists.is_empty(), "lhs_sample requires at least one dimension");
    let params: Vec<DistParams> = dists.iter().map(|d| d.params()).collect::<Result<_, _>>()?;
    let mut out = Array2::zeros((n, dists.len()));
    for (j, p) in params.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for i in 0..n {
            let u = rng.next_f64_open();
            let prob = (strata[i] as f64 + u) / n as f64;
            out[[i, j]] = p.quantile(prob);
        }
    }
    Ok(out)
}
