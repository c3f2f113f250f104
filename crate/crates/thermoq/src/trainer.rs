//! Monte Carlo iterative training: fresh quantile levels every epoch,
//! physics-informed loss, Adam updates.
//!
//! The quantile level of sample `i` in epoch `e` depends only on
//! `(seed, e, i)`, so a run resumed from a checkpoint reproduces the
//! remaining trace exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor4};
use crate::grid::{normalize_mp, DomainSpec, FieldGrid, MpImage, RegionMasks, T_REF, T_SCALE};
use crate::io::EpochRecord;
use crate::loss::{build_losses, LossError, LossWeights};
use crate::net::{adam_step, AdamState, ModelConfig, ModelParams};
use crate::predictor::{metrics, predict_field, MetricReport, PredictError, R2Baseline};
use crate::stochastic::{draw_tau, SeededRng, Stream};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("validation set has {mps} MP images but {truths} truth fields")]
    ValSizeMismatch { mps: usize, truths: usize },
    #[error("loss diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: &'static str },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Maximum training epochs.
    pub epochs: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Samples per gradient update; set to the dataset size for full-batch
    /// epochs.
    pub batch_size: usize,
    /// Root seed; initialization, quantile levels, and validation draws all
    /// derive from it through named streams.
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// Train on the normalized temperature scale (raw Kelvin when false).
    pub normalize: bool,
    /// Invoke the checkpoint callback every this many epochs (0 = only at
    /// the end).
    pub checkpoint_every: usize,
    /// Early stopping: stop after this many epochs without validation RMSE
    /// improvement. Off by default.
    pub patience: Option<usize>,
    /// Monte Carlo draws for in-training validation metrics.
    pub val_n_pre: usize,
    /// Cosine-anneal the learning rate down to `lr * lr_min_frac` by the
    /// final epoch; 1.0 keeps it constant.
    pub lr_min_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 0.1,
            batch_size: 16,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            normalize: true,
            checkpoint_every: 0,
            patience: None,
            val_n_pre: 8,
            lr_min_frac: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.epochs == 0 {
            return Err(TrainerError::ZeroEpochs);
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainerError::BadLearningRate(self.lr));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::ZeroBatch);
        }
        if !(self.lr_min_frac > 0.0 && self.lr_min_frac <= 1.0) {
            return Err(TrainerError::BadLearningRate(self.lr * self.lr_min_frac));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Validation split: MP images with their solver truth fields, Kelvin.
pub struct ValidationSet<'a> {
    pub mps: &'a [MpImage],
    pub truths: &'a [FieldGrid],
}

/// Trained parameters plus the per-epoch loss trace.
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    /// Validation metrics per epoch when a validation set was supplied and
    /// early stopping was active.
    pub val_rmse: Vec<(usize, f64)>,
}

/// Quantile level for sample `index` in `epoch` under `seed` — a pure
/// function, so checkpoint resumption replays the identical sequence.
pub fn tau_for(seed: u64, epoch: usize, index: usize) -> f64 {
    let mut rng = SeededRng::keyed(seed, Stream::Tau, &[epoch as u64, index as u64]);
    draw_tau(&mut rng)
}

/// Learning rate for `epoch` (1-based) under the cosine-annealing schedule.
fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.lr_min_frac >= 1.0 || cfg.epochs <= 1 {
        return cfg.lr;
    }
    let t = (epoch - 1) as f64 / (cfg.epochs - 1) as f64;
    let shape = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    cfg.lr * (cfg.lr_min_frac + (1.0 - cfg.lr_min_frac) * shape)
}

/// Train a fresh model on `mps` (Kelvin MP images) with Algorithm-1
/// dynamics. `on_checkpoint` runs at the configured cadence and once after
/// the final epoch.
pub fn train(
    mps: &[MpImage],
    masks: &RegionMasks,
    domain: &DomainSpec,
    val: Option<&ValidationSet<'_>>,
    cfg: &TrainConfig,
    mut on_checkpoint: Option<&mut dyn FnMut(usize, &ModelParams<f32>)>,
) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    if mps.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    if let Some(v) = val {
        if v.mps.len() != v.truths.len() {
            return Err(TrainerError::ValSizeMismatch {
                mps: v.mps.len(),
                truths: v.truths.len(),
            });
        }
    }
    let n = mps.len();
    let (h, w) = domain.shape();
    let t0 = if cfg.normalize {
        (domain.sink_temp - T_REF) / T_SCALE
    } else {
        domain.sink_temp
    };
    let scaled: Vec<Array2<f64>> = mps
        .iter()
        .map(|mp| if cfg.normalize { normalize_mp(mp) } else { mp.clone() })
        .collect();

    let mut params = ModelParams::<f32>::init(cfg.model, cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut val_rmse = Vec::new();
    let mut best_rmse = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let lr = epoch_lr(cfg, epoch);
        let taus: Vec<f64> = (0..n).map(|i| tau_for(cfg.seed, epoch, i)).collect();
        let mut acc = [0.0f64; 5]; // tau, le, bc, tv, total
        for batch_start in (0..n).step_by(cfg.batch_size) {
            let batch: Vec<usize> = (batch_start..(batch_start + cfg.batch_size).min(n)).collect();
            let b = batch.len();
            let mut input = Tensor4::<f32>::zeros((b, 2, h, w));
            let mut target = Tensor4::<f32>::zeros((b, 1, h, w));
            let mut batch_taus = Vec::with_capacity(b);
            for (bi, &i) in batch.iter().enumerate() {
                batch_taus.push(taus[i]);
                for ((y, x), &v) in scaled[i].indexed_iter() {
                    input[[bi, 0, y, x]] = v as f32;
                    target[[bi, 0, y, x]] = v as f32;
                    if masks.mp[[y, x]] {
                        input[[bi, 1, y, x]] = taus[i] as f32;
                    }
                }
            }

            let mut tape: Tape<f32> = Tape::new();
            let bound = params.bind(&mut tape);
            let input = tape.leaf(input);
            let pred = bound.forward(&mut tape, input);
            let nodes = build_losses(
                &mut tape,
                pred,
                &target,
                &batch_taus,
                masks,
                domain.dx(),
                domain.dy(),
                t0,
                &cfg.weights,
            )?;
            let terms = nodes.terms(&tape);
            let total = terms.total(&cfg.weights);
            for (value, name) in [
                (terms.tau, "loss_tau"),
                (terms.le, "loss_le"),
                (terms.bc, "loss_bc"),
                (terms.tv, "loss_tv"),
                (total, "total"),
            ] {
                if !value.is_finite() {
                    return Err(TrainerError::Diverged { epoch, term: name });
                }
            }
            let grads = tape.backward(nodes.total).expect("scalar loss root");
            let grad_tensors: Vec<Tensor4<f32>> =
                bound.vars.iter().map(|&v| grads.wrt(v, &tape)).collect();
            adam_step(&mut params, &grad_tensors, &mut adam, lr);

            let weight = b as f64 / n as f64;
            acc[0] += terms.tau * weight;
            acc[1] += terms.le * weight;
            acc[2] += terms.bc * weight;
            acc[3] += terms.tv * weight;
            acc[4] += total * weight;
        }
        history.push(EpochRecord {
            epoch,
            loss_tau: acc[0],
            loss_le: acc[1],
            loss_bc: acc[2],
            loss_tv: acc[3],
            total: acc[4],
        });
        log::debug!(
            "epoch {epoch}: tau {:.3e} le {:.3e} bc {:.3e} tv {:.3e} total {:.4e}",
            acc[0],
            acc[1],
            acc[2],
            acc[3],
            acc[4]
        );

        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            if let Some(cb) = on_checkpoint.as_deref_mut() {
                cb(epoch, &params);
            }
        }

        if let (Some(patience), Some(v)) = (cfg.patience, val) {
            let report = validate(&params, v.mps, v.truths, masks, domain, cfg.val_n_pre, cfg.seed)?;
            val_rmse.push((epoch, report.rmse));
            // Relative improvement below one part per million counts as a
            // plateau epoch.
            if report.rmse < best_rmse * (1.0 - 1e-6) {
                best_rmse = report.rmse;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log::info!("early stop at epoch {epoch}: no RMSE improvement in {patience}");
                    break;
                }
            }
        }
    }

    let last_epoch = history.last().map_or(0, |r| r.epoch);
    if let Some(cb) = on_checkpoint.as_deref_mut() {
        cb(last_epoch, &params);
    }
    Ok(TrainOutcome { params, history, val_rmse })
}

/// The four §3.4-style metrics of a model on a labelled split, using
/// per-sample seeded Monte Carlo prediction.
pub fn validate(
    params: &ModelParams<f32>,
    mps: &[MpImage],
    truths: &[FieldGrid],
    masks: &RegionMasks,
    domain: &DomainSpec,
    n_pre: usize,
    seed: u64,
) -> Result<MetricReport, TrainerError> {
    if mps.len() != truths.len() {
        return Err(TrainerError::ValSizeMismatch { mps: mps.len(), truths: truths.len() });
    }
    let mut preds = Vec::with_capacity(mps.len());
    for (i, mp) in mps.iter().enumerate() {
        let mut rng = SeededRng::keyed(seed, Stream::Mc, &[i as u64]);
        let recon = predict_field(params, mp, masks, domain.dx(), domain.dy(), n_pre, &mut rng)?;
        preds.push(recon.mean);
    }
    Ok(metrics(&preds, truths, R2Baseline::MeanPrediction)?)
}
