//! Temperature-field reconstruction and heat reliability analysis.
//!
//! The pipeline: generate steady-state conduction fields for sampled
//! component powers ([`solver`]), train a two-stage encoder-decoder quantile
//! model on sparse sensor images ([`net`], [`loss`], [`trainer`]), predict
//! dense fields with aleatoric uncertainty by Monte Carlo over quantile
//! levels ([`predictor`]), turn per-pixel uncertainty into component
//! normal-probability intervals ([`reliability`]), and propagate those
//! through an interval Bayesian network to a system-level verdict ([`bn`]).

pub mod autodiff;
pub mod bn;
pub mod grid;
pub mod io;
pub mod loss;
pub mod net;
pub mod predictor;
pub mod reliability;
pub mod solver;
pub mod stochastic;
pub mod trainer;

pub use grid::{DomainSpec, FieldGrid, LayoutFile, LayoutSpec, MpImage, RegionMasks};
pub use stochastic::{PowerDistribution, SeededRng};
