//! `thermoq` — temperature-field reconstruction and reliability pipeline.
//!
//! Subcommands cover the full workflow: dataset generation from the
//! finite-difference solver, quantile-network training, Monte Carlo
//! prediction with aleatoric uncertainty, metric evaluation, interval
//! reliability estimation, and interval Bayesian-network inference.
//! Every artifact is a flat file (f32 rasters, CSV, JSON, PGM); identical
//! inputs and seeds reproduce every CSV byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use thermoq::bn::{BnGraph, Evidence, NodeSpec};
use thermoq::grid::{build_masks, DomainSpec, FieldGrid, LayoutFile, MpImage};
use thermoq::io::{
    generate_dataset, load_checkpoint, read_f32_raster, read_json, save_checkpoint,
    write_ecdf_csv, write_f32_raster, write_history_csv, write_intervals_csv, write_json,
    write_metrics_csv, write_pgm_with_sidecar, Dataset,
};
use thermoq::net::ModelParams;
use thermoq::predictor::{predict_field, R2Baseline, DEFAULT_N_PRE};
use thermoq::reliability::{
    component_interval_max, interval_field, normal_prob_intervals, ComponentThresholds,
    DrawMaxima, Ecdf,
};
use thermoq::solver::{extract_mp, superpose, unit_responses, SolverConfig};
use thermoq::stochastic::{SeededRng, Stream};
use thermoq::trainer::{train, validate, TrainConfig, ValidationSet};

#[derive(Parser)]
#[command(
    name = "thermoq",
    version,
    about = "Physics-informed temperature field reconstruction with interval reliability analysis"
)]
struct Cli {
    /// Root seed; named sub-streams (data/tau/noise/mc/init) derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo loops (0 or 1 = serial).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the steady-state fields for sampled component powers and write
    /// a dataset directory (field/mp f32 rasters + meta.json).
    GenData(GenDataArgs),
    /// Train the two-stage quantile network on a dataset directory.
    Train(TrainArgs),
    /// Reconstruct dense fields (mean + sigma) for a dataset split.
    Predict(PredictArgs),
    /// Compare predicted fields against truth fields and write metrics.csv.
    Evaluate(EvaluateArgs),
    /// Monte Carlo interval reliability: component normal-probability
    /// intervals from reconstructed fields.
    Reliability(ReliabilityArgs),
    /// Propagate component intervals through an interval Bayesian network.
    BnInfer(BnInferArgs),
    /// Verify every autodiff primitive against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Layout JSON: domain, components, sensors, optional noise plan.
    #[arg(long)]
    layout: PathBuf,
    /// Training samples.
    #[arg(long)]
    n: usize,
    /// Validation samples.
    #[arg(long, default_value_t = 0)]
    n_val: usize,
    /// Test samples.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Solver config JSON (method, omega, max_iters, tolerance).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON (epochs, lr, batch_size, weights, model, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output run directory (checkpoint/, history.csv, metrics.csv).
    #[arg(long)]
    out: PathBuf,
    /// Monte Carlo draws for the final validation metrics.
    #[arg(long, default_value_t = DEFAULT_N_PRE)]
    n_pre: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Dataset directory holding the MP images.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory from train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for field_/sigma_ rasters.
    #[arg(long)]
    out: PathBuf,
    /// Which split of the dataset to reconstruct.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Monte Carlo draws per reconstruction.
    #[arg(long, default_value_t = DEFAULT_N_PRE)]
    n_pre: usize,
    /// Also write 8-bit PGM heatmaps with min/max sidecars.
    #[arg(long)]
    heatmap: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted field_*.f32 rasters.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of truth field_*.f32 rasters (dataset directory).
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// R² baseline convention.
    #[arg(long, value_enum, default_value_t = BaselineArg::MeanPrediction)]
    baseline: BaselineArg,
}

#[derive(Args)]
struct ReliabilityArgs {
    /// Checkpoint directory from train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layout JSON (domain + components + sensors + noise).
    #[arg(long)]
    layout: PathBuf,
    /// Component thresholds JSON: {"C1": 340.0, ...} in Kelvin.
    #[arg(long)]
    thresholds: PathBuf,
    /// Monte Carlo draws over operating conditions.
    #[arg(long, default_value_t = 1000)]
    n_mcs: usize,
    /// Uncertainty multiplier for the interval field.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Monte Carlo draws per field reconstruction.
    #[arg(long, default_value_t = DEFAULT_N_PRE)]
    n_pre: usize,
    /// Output directory for component_intervals.csv (+ ECDFs).
    #[arg(long)]
    out: PathBuf,
    /// Also write per-component ECDF CSVs of the maxima bound sets.
    #[arg(long)]
    ecdf: bool,
}

#[derive(Args)]
struct BnInferArgs {
    /// Network JSON: {nodes: [...], system: "S"}.
    #[arg(long)]
    network: PathBuf,
    /// Evidence assignment, repeatable: --evidence B1=0 --evidence C2=1.
    #[arg(long)]
    evidence: Vec<String>,
    /// Override root probabilities from a component_intervals.csv.
    #[arg(long)]
    roots: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Maximum relative error accepted per primitive.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    /// Baseline is the pixelwise mean predicted field over the whole set.
    MeanPrediction,
    /// Baseline is each sample's own spatial truth mean.
    Conventional,
}

impl From<BaselineArg> for R2Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::MeanPrediction => R2Baseline::MeanPrediction,
            BaselineArg::Conventional => R2Baseline::Conventional,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("THERMOQ_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("thread pool setup failed ({e}); continuing serial");
        }
    }
    let seed = cli.seed;
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a, seed),
        Cmd::Train(a) => run_train(a, seed),
        Cmd::Predict(a) => run_predict(a, seed),
        Cmd::Evaluate(a) => run_evaluate(a),
        Cmd::Reliability(a) => run_reliability(a, seed),
        Cmd::BnInfer(a) => run_bn_infer(a),
        Cmd::Gradcheck(a) => run_gradcheck(a, seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn gen_data(a: GenDataArgs, seed: Option<u64>) -> Result<()> {
    let layout: LayoutFile = read_json(&a.layout)
        .with_context(|| format!("reading layout {}", a.layout.display()))?;
    let solver_cfg: SolverConfig = match &a.config {
        Some(p) => read_json(p).with_context(|| format!("reading solver config {}", p.display()))?,
        None => SolverConfig::default(),
    };
    let seed = seed.unwrap_or(0);
    let meta = generate_dataset(
        &a.out,
        &layout.domain,
        &layout.layout,
        (a.n, a.n_val, a.n_test),
        seed,
        &solver_cfg,
    )?;
    log::info!(
        "dataset written to {}: {} train / {} val / {} test samples, seed {}",
        a.out.display(),
        meta.n_train,
        meta.n_val,
        meta.n_test,
        seed
    );
    Ok(())
}

fn load_split(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => ds.train_indices().collect(),
        SplitArg::Val => ds.val_indices().collect(),
        SplitArg::Test => ds.test_indices().collect(),
        SplitArg::All => (0..ds.meta.total()).collect(),
    }
}

fn run_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p).with_context(|| format!("reading train config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let domain = ds.meta.domain;
    let masks = build_masks(&domain, &ds.meta.layout)?;
    let mps: Vec<MpImage> =
        ds.train_indices().map(|i| ds.mp(i)).collect::<Result<_, _>>()?;
    let val_mps: Vec<MpImage> =
        ds.val_indices().map(|i| ds.mp(i)).collect::<Result<_, _>>()?;
    let val_truths: Vec<FieldGrid> =
        ds.val_indices().map(|i| ds.field(i)).collect::<Result<_, _>>()?;

    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    let ckpt_dir = a.out.join("checkpoint");
    let ckpt_seed = cfg.seed;
    let mut on_checkpoint = |epoch: usize, params: &ModelParams<f32>| {
        if let Err(e) = save_checkpoint(&ckpt_dir, params, epoch, ckpt_seed) {
            log::error!("checkpoint write failed at epoch {epoch}: {e}");
        } else {
            log::info!("checkpoint saved at epoch {epoch}");
        }
    };
    let val = (!val_mps.is_empty()).then(|| ValidationSet { mps: &val_mps, truths: &val_truths });
    let outcome = train(&mps, &masks, &domain, val.as_ref(), &cfg, Some(&mut on_checkpoint))?;
    write_history_csv(&a.out.join("history.csv"), &outcome.history)?;
    let last = outcome.history.last().expect("at least one epoch");
    log::info!(
        "training done: {} epochs, final total loss {:.4e}",
        outcome.history.len(),
        last.total
    );
    if !val_mps.is_empty() {
        let report = validate(&outcome.params, &val_mps, &val_truths, &masks, &domain, a.n_pre, cfg.seed)?;
        write_metrics_csv(&a.out.join("metrics.csv"), &report)?;
        log::info!(
            "validation: rmse {:.4} K  mae {:.4} K  mre {:.6}  r2 {:.4}",
            report.rmse,
            report.mae,
            report.mre,
            report.r2
        );
    }
    Ok(())
}

fn run_predict(a: PredictArgs, seed: Option<u64>) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let (params, ckpt_meta) = load_checkpoint(&a.checkpoint)?;
    let domain = ds.meta.domain;
    let masks = build_masks(&domain, &ds.meta.layout)?;
    let indices = load_split(&ds, a.split);
    if indices.is_empty() {
        bail!("selected split is empty in {}", a.data.display());
    }
    let seed = seed.unwrap_or(ckpt_meta.seed);
    std::fs::create_dir_all(&a.out)?;
    for &i in &indices {
        let mp = ds.mp(i)?;
        let mut rng = SeededRng::keyed(seed, Stream::Mc, &[i as u64]);
        let recon = predict_field(&params, &mp, &masks, domain.dx(), domain.dy(), a.n_pre, &mut rng)?;
        write_f32_raster(&a.out.join(format!("field_{i:06}.f32")), &recon.mean.values)?;
        write_f32_raster(&a.out.join(format!("sigma_{i:06}.f32")), &recon.sigma.values)?;
        if a.heatmap {
            write_pgm_with_sidecar(&a.out.join(format!("field_{i:06}.pgm")), &recon.mean.values)?;
            write_pgm_with_sidecar(&a.out.join(format!("sigma_{i:06}.pgm")), &recon.sigma.values)?;
        }
    }
    write_json(
        &a.out.join("predict.json"),
        &serde_json::json!({
            "domain": domain,
            "n_pre": a.n_pre,
            "seed": seed,
            "checkpoint_epoch": ckpt_meta.epoch,
            "samples": indices,
        }),
    )?;
    log::info!("wrote {} reconstructions to {}", indices.len(), a.out.display());
    Ok(())
}

/// Domain spec found in either a dataset meta.json or a predict.json.
fn dir_domain(dir: &Path) -> Option<DomainSpec> {
    if let Ok(meta) = Dataset::open(dir) {
        return Some(meta.meta.domain);
    }
    if let Ok(v) = read_json::<serde_json::Value>(&dir.join("predict.json")) {
        if let Some(d) = v.get("domain") {
            return serde_json::from_value(d.clone()).ok();
        }
    }
    None
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let domain = dir_domain(&a.truth)
        .or_else(|| dir_domain(&a.pred))
        .context("neither directory carries a domain spec (meta.json or predict.json)")?;
    let shape = domain.shape();

    let mut names: Vec<String> = std::fs::read_dir(&a.pred)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("field_") && n.ends_with(".f32"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no field_*.f32 rasters in {}", a.pred.display());
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut truths = Vec::with_capacity(names.len());
    for name in &names {
        let p = read_f32_raster(&a.pred.join(name), shape)?;
        let t = read_f32_raster(&a.truth.join(name), shape)
            .with_context(|| format!("truth raster {name} missing or malformed"))?;
        preds.push(FieldGrid::new(&domain, p)?);
        truths.push(FieldGrid::new(&domain, t)?);
    }
    let report = thermoq::predictor::metrics(&preds, &truths, a.baseline.into())?;
    std::fs::create_dir_all(&a.out)?;
    write_metrics_csv(&a.out.join("metrics.csv"), &report)?;
    println!(
        "rmse {:.6}  mae {:.6}  mre {:.8}  r2 {:.6}  ({} fields)",
        report.rmse,
        report.mae,
        report.mre,
        report.r2,
        names.len()
    );
    Ok(())
}

fn run_reliability(a: ReliabilityArgs, seed: Option<u64>) -> Result<()> {
    if a.n_mcs == 0 {
        bail!("n-mcs must be at least 1");
    }
    let (params, ckpt_meta) = load_checkpoint(&a.checkpoint)?;
    let layout: LayoutFile = read_json(&a.layout)?;
    let thresholds: ComponentThresholds = read_json(&a.thresholds)?;
    thresholds.validate()?;
    let domain = layout.domain;
    let masks = build_masks(&domain, &layout.layout)?;
    for (id, _) in &masks.components {
        thresholds
            .get(id)
            .with_context(|| format!("no threshold for component {id}"))?;
    }
    let seed = seed.unwrap_or(ckpt_meta.seed);
    let solver_cfg = SolverConfig::default();
    log::info!("precomputing {} unit responses", layout.layout.components.len());
    let responses = unit_responses(&domain, &layout.layout, &solver_cfg)?;

    let draw = |m: usize| -> Result<DrawMaxima> {
        let mut rng_p = SeededRng::keyed(seed, Stream::Mc, &[m as u64, 0]);
        let powers: Vec<f64> = layout
            .layout
            .components
            .iter()
            .map(|c| c.dist.sample(&mut rng_p))
            .collect::<Result<_, _>>()?;
        let field = superpose(&domain, &responses, &powers)?;
        let mut rng_n = SeededRng::keyed(seed, Stream::Noise, &[m as u64]);
        let mp = extract_mp(&field, &layout.layout, &mut rng_n);
        let mut rng_t = SeededRng::keyed(seed, Stream::Mc, &[m as u64, 1]);
        let recon =
            predict_field(&params, &mp, &masks, domain.dx(), domain.dy(), a.n_pre, &mut rng_t)?;
        let ifield = interval_field(&recon, a.lambda)?;
        let mut maxima = DrawMaxima::new();
        for (id, region) in &masks.components {
            maxima.insert(id.clone(), component_interval_max(&ifield, region, id)?);
        }
        Ok(maxima)
    };
    let draws: Vec<DrawMaxima> = if rayon::current_num_threads() > 1 {
        (0..a.n_mcs).into_par_iter().map(draw).collect::<Result<_>>()?
    } else {
        (0..a.n_mcs).map(draw).collect::<Result<_>>()?
    };

    let intervals = normal_prob_intervals(&draws, &thresholds)?;
    std::fs::create_dir_all(&a.out)?;
    write_intervals_csv(&a.out.join("component_intervals.csv"), &intervals)?;
    for (id, p) in &intervals {
        println!("{id} [{}, {}]", p.lo, p.hi);
    }
    if a.ecdf {
        for (id, _) in &masks.components {
            let lowers: Vec<f64> = draws.iter().map(|d| d[id].0).collect();
            let uppers: Vec<f64> = draws.iter().map(|d| d[id].1).collect();
            write_ecdf_csv(&a.out.join(format!("ecdf_{id}_lower.csv")), &Ecdf::new(&lowers)?)?;
            write_ecdf_csv(&a.out.join(format!("ecdf_{id}_upper.csv")), &Ecdf::new(&uppers)?)?;
        }
    }
    log::info!(
        "reliability done: {} draws, lambda {}, intervals in {}",
        a.n_mcs,
        a.lambda,
        a.out.display()
    );
    Ok(())
}

fn parse_evidence(items: &[String]) -> Result<Evidence> {
    let mut ev = Evidence::new();
    for item in items {
        let (id, state) = item
            .split_once('=')
            .with_context(|| format!("evidence '{item}' is not ID=STATE"))?;
        let state: u8 = state
            .parse()
            .ok()
            .filter(|s| *s <= 1)
            .with_context(|| format!("evidence state in '{item}' must be 0 or 1"))?;
        ev.insert(id.to_string(), state);
    }
    Ok(ev)
}

fn run_bn_infer(a: BnInferArgs) -> Result<()> {
    let mut graph: BnGraph = BnGraph::from_json(
        &std::fs::read_to_string(&a.network)
            .with_context(|| format!("reading network {}", a.network.display()))?,
    )?;
    if let Some(roots_csv) = &a.roots {
        let mut overrides: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(roots_csv)?;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                bail!("roots CSV rows must be id,pr_lo,pr_hi");
            }
            overrides.insert(rec[0].to_string(), (rec[1].parse()?, rec[2].parse()?));
        }
        for node in &mut graph.nodes {
            if let NodeSpec::Root { id, p_lo, p_hi } = node {
                if let Some(&(lo, hi)) = overrides.get(id.as_str()) {
                    *p_lo = lo;
                    *p_hi = hi;
                    overrides.remove(&id.clone());
                }
            }
        }
        if !overrides.is_empty() {
            let unknown: Vec<&str> = overrides.keys().map(|s| s.as_str()).collect();
            bail!("roots CSV names nodes absent from the network: {}", unknown.join(", "));
        }
        graph.validate()?;
    }
    let evidence = parse_evidence(&a.evidence)?;
    let p = graph.infer(&evidence)?;
    println!("[{}, {}]", p.lo, p.hi);
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut reports = thermoq::autodiff::check_all(seed);
    reports.push(thermoq::autodiff::check_composite_net(seed));
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err < a.tol;
        println!(
            "{:<28} {:>10.3e}  ({} values)  {}",
            r.name,
            r.max_rel_err,
            r.param_count,
            if ok { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_err);
        if !ok {
            failed.push(r.name.clone());
        }
    }
    println!("worst max_rel_err {worst:.3e} over {} checks", reports.len());
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}
