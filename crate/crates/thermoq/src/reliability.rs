//! Component normal-probability intervals from Monte Carlo reconstructions.
//!
//! Each reconstruction yields an interval temperature field
//! `[mean − λσ, mean + λσ]` (clamped at 0 K), reduced per component to an
//! interval maximum; over `N_MCS` draws the fraction of draw maxima below a
//! component's working-state threshold gives its normal-probability
//! interval `[Pr⁻, Pr⁺]`.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::FieldGrid;
use crate::predictor::Reconstruction;

#[derive(Debug, Error)]
pub enum ReliabilityError {
    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("component region {0} has no pixels")]
    EmptyRegion(String),
    #[error("no Monte Carlo draws supplied")]
    NoDraws,
    #[error("draw {index} is missing component {id}")]
    MissingComponent { index: usize, id: String },
    #[error("no threshold configured for component {0}")]
    MissingThreshold(String),
    #[error("threshold for component {id} must be positive, got {t_lim}")]
    BadThreshold { id: String, t_lim: f64 },
    #[error("empty value set")]
    EmptyValues,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("invalid probability interval [{lo}, {hi}]")]
    BadProbInterval { lo: f64, hi: f64 },
}

/// A probability interval `[lo, hi] ⊆ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ProbInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, ReliabilityError> {
        let p = ProbInterval { lo, hi };
        p.validate()?;
        Ok(p)
    }

    /// Degenerate (point) interval.
    pub fn point(p: f64) -> Result<Self, ReliabilityError> {
        Self::new(p, p)
    }

    pub fn validate(&self) -> Result<(), ReliabilityError> {
        let ok = self.lo.is_finite()
            && self.hi.is_finite()
            && (0.0..=1.0).contains(&self.lo)
            && (0.0..=1.0).contains(&self.hi)
            && self.lo <= self.hi;
        if ok {
            Ok(())
        } else {
            Err(ReliabilityError::BadProbInterval { lo: self.lo, hi: self.hi })
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lo <= p && p <= self.hi
    }
}

/// Per-pixel `[lower, upper]` temperature bounds in Kelvin.
#[derive(Debug, Clone)]
pub struct IntervalField {
    pub lower: FieldGrid,
    pub upper: FieldGrid,
}

/// `lower = max(mean − λσ, 0)`, `upper = max(mean + λσ, 0)`; nonnegativity
/// enforced by clamping at zero.
pub fn interval_field(recon: &Reconstruction, lambda: f64) -> Result<IntervalField, ReliabilityError> {
    if !(lambda >= 0.0) {
        return Err(ReliabilityError::NegativeLambda(lambda));
    }
    let lower = ndarray::Zip::from(&recon.mean.values)
        .and(&recon.sigma.values)
        .map_collect(|&m, &s| (m - lambda * s).max(0.0));
    let upper = ndarray::Zip::from(&recon.mean.values)
        .and(&recon.sigma.values)
        .map_collect(|&m, &s| (m + lambda * s).max(0.0));
    let (dx, dy) = (recon.mean.dx, recon.mean.dy);
    Ok(IntervalField {
        lower: FieldGrid { values: lower, dx, dy },
        upper: FieldGrid { values: upper, dx, dy },
    })
}

/// Interval highest temperature over a component footprint: the maxima of
/// the lower and upper fields are taken independently.
pub fn component_interval_max(
    ifield: &IntervalField,
    region: &Array2<bool>,
    id: &str,
) -> Result<(f64, f64), ReliabilityError> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ((r, c), &inside) in region.indexed_iter() {
        if inside {
            lo = lo.max(ifield.lower.values[[r, c]]);
            hi = hi.max(ifield.upper.values[[r, c]]);
        }
    }
    if lo == f64::NEG_INFINITY {
        return Err(ReliabilityError::EmptyRegion(id.to_string()));
    }
    Ok((lo, hi))
}

/// Working-state thresholds `T_lim` per component id, Kelvin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentThresholds(pub BTreeMap<String, f64>);

impl ComponentThresholds {
    pub fn validate(&self) -> Result<(), ReliabilityError> {
        for (id, &t) in &self.0 {
            if !(t > 0.0) {
                return Err(ReliabilityError::BadThreshold { id: id.clone(), t_lim: t });
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<f64, ReliabilityError> {
        self.0
            .get(id)
            .copied()
            .ok_or_else(|| ReliabilityError::MissingThreshold(id.to_string()))
    }
}

/// Interval maxima of every component for one Monte Carlo draw.
pub type DrawMaxima = BTreeMap<String, (f64, f64)>;

/// Normal-probability interval of one component from its per-draw interval
/// maxima: `Pr⁻` counts draws whose upper bound stays below `t_lim`, `Pr⁺`
/// those whose lower bound does; both strict (`T = T_lim` is failure).
pub fn normal_prob_interval(maxima: &[(f64, f64)], t_lim: f64) -> Result<ProbInterval, ReliabilityError> {
    if maxima.is_empty() {
        return Err(ReliabilityError::NoDraws);
    }
    if !(t_lim > 0.0) {
        return Err(ReliabilityError::BadThreshold { id: String::new(), t_lim });
    }
    let n = maxima.len() as f64;
    let below_upper = maxima.iter().filter(|&&(_, hi)| hi < t_lim).count() as f64;
    let below_lower = maxima.iter().filter(|&&(lo, _)| lo < t_lim).count() as f64;
    ProbInterval::new(below_upper / n, below_lower / n)
}

/// Algorithm 3 counting step over all components.
pub fn normal_prob_intervals(
    draws: &[DrawMaxima],
    thresholds: &ComponentThresholds,
) -> Result<BTreeMap<String, ProbInterval>, ReliabilityError> {
    if draws.is_empty() {
        return Err(ReliabilityError::NoDraws);
    }
    thresholds.validate()?;
    let ids: Vec<&String> = draws[0].keys().collect();
    let mut out = BTreeMap::new();
    for id in ids {
        let mut maxima = Vec::with_capacity(draws.len());
        for (index, draw) in draws.iter().enumerate() {
            let &(lo, hi) = draw.get(id).ok_or_else(|| ReliabilityError::MissingComponent {
                index,
                id: id.clone(),
            })?;
            maxima.push((lo, hi));
        }
        out.insert(id.clone(), normal_prob_interval(&maxima, thresholds.get(id)?)?);
    }
    Ok(out)
}

/// Right-continuous empirical distribution function of a finite sample.
#[derive(Debug, Clone)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(values: &[f64]) -> Result<Self, ReliabilityError> {
        if values.is_empty() {
            return Err(ReliabilityError::EmptyValues);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ReliabilityError::NonFinite);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Ecdf { sorted })
    }

    /// F(q) = (#values ≤ q) / n.
    pub fn eval(&self, q: f64) -> f64 {
        let count = self.sorted.partition_point(|&v| v <= q);
        count as f64 / self.sorted.len() as f64
    }

    /// The sample values in ascending order.
    pub fn support(&self) -> &[f64] {
        &self.sorted
    }
}
