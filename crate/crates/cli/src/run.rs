//! Subcommand drivers and artifact layout.
//!
//! Every subcommand follows the same shape: validate the full config before
//! touching the filesystem, draw the deployment ensemble once, then run
//! replicates with seeds `base_seed + r` in parallel over disjoint output
//! files. Artifacts per run directory:
//!
//! * `trace_r{r}.csv` for optimizer subcommands (one row per recorded step),
//! * `results_r{r}.csv` / `sweep_r{r}.csv` with per-distribution Err values,
//! * `summary.csv` / `sweep_summary.csv` with mean and 2σ over replicates,
//! * `manifest.json` with the config hash, versions, seeds, and per-replicate
//!   status. Wall-clock timing lives only here, so the CSVs of identical runs
//!   are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use distdesign::ama::{ama_loop_with_state, default_lipschitz_cap, AmaConfig};
use distdesign::benchmarks::{
    acoreset_indices, baseline_distribution, err_metric, make_meta_ensemble, ncoreset_indices,
    MetaEnsembleDraw, TargetFunction,
};
use distdesign::bilevel::{run_bilevel, BilevelConfig, CosineSchedule};
use distdesign::kernel::{fit_krr, KernelModel};
use distdesign::measures::{
    sample_gaussian, EmpiricalMeasure, GaussianMeasure, MeasureAtom, MetaTestEnsemble,
};
use distdesign::rng::SeedStream;
use distdesign::target::{LabeledEnsemble, Target};
use distdesign::trace::{unflatten_gaussian, OptimizationTrace};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{
    AutoOr, ConfigError, DistributionKind, EvalModel, ExperimentConfig,
};

/// Per-iteration stream tags used by the optimizers run from 0 upward, so
/// driver-level draws derive from the top of the tag space.
const TAG_FINAL_TRAIN: u64 = u64::MAX;
const TAG_PARTICLE_INIT: u64 = u64::MAX - 1;
const TAG_BASELINES: u64 = u64::MAX - 2;
const TAG_SWEEP: u64 = u64::MAX - 3;
const TAG_EVAL: u64 = u64::MAX - 4;
/// Decorrelates the target-level Lipschitz probes from the replicate streams
/// seeded at `base_seed + r`.
const PROBE_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;
/// Out-of-loop ridge level: nugget = RIDGE_LEVEL / n for a fit on n points.
const RIDGE_LEVEL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Bilevel,
    AmaGaussian,
    AmaParticles,
    Baselines,
    Eval,
    Sweep,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Bilevel => "bilevel",
            CommandKind::AmaGaussian => "ama-gaussian",
            CommandKind::AmaParticles => "ama-particles",
            CommandKind::Baselines => "baselines",
            CommandKind::Eval => "eval",
            CommandKind::Sweep => "sweep",
        }
    }

}

/// Command-line overrides on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config_path: PathBuf,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Failures split by exit code: config errors (2) are detected before any
/// artifact exists, runtime failures (3) after.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

fn rt(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct TableRow {
    distribution: &'static str,
    err: f64,
}

struct SweepRow {
    distribution: &'static str,
    n: usize,
    cost_n: usize,
    err: f64,
}

struct ReplicateSuccess {
    files: Vec<String>,
    table: Vec<TableRow>,
    sweep: Vec<SweepRow>,
}

struct ReplicateReport {
    replicate: usize,
    seed: u64,
    wall_ms: f64,
    outcome: Result<ReplicateSuccess, String>,
}

/// Everything shared across replicates. The deployment ensemble is drawn
/// once from its own seed, so replicates differ only in algorithm randomness.
struct Setup {
    cfg: ExperimentConfig,
    command: CommandKind,
    target: TargetFunction,
    lengthscale: f64,
    draw: MetaEnsembleDraw,
    val_labeled: LabeledEnsemble,
    test_labeled: LabeledEnsemble,
    /// Union of the validation splits; selection pool for the coresets.
    pool: Option<EmpiricalMeasure>,
    /// Resolved (model cap, target constant) for the bound, AMA only.
    ama_lip: Option<(f64, f64)>,
    out_dir: PathBuf,
    config_sha256: String,
}

pub fn execute(command: CommandKind, inv: &Invocation) -> Result<(), Failure> {
    let config_text = fs::read_to_string(&inv.config_path).map_err(|e| {
        Failure::Config(format!(
            "cannot read config {}: {e}",
            inv.config_path.display()
        ))
    })?;
    let mut cfg = ExperimentConfig::from_text(&config_text)?;
    if let Some(seed) = inv.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(replicates) = inv.replicates {
        if replicates == 0 {
            return Err(Failure::Config("--replicates must be ≥ 1".into()));
        }
        cfg.experiment.replicates = replicates;
    }
    if let Some(out) = &inv.out {
        cfg.experiment.out = Some(out.clone());
    }
    if let Some(threads) = inv.threads {
        cfg.experiment.threads = threads;
    }

    // Everything below must fail before the output directory is created.
    let target = TargetFunction::new(
        cfg.experiment.target,
        cfg.experiment.dim,
        cfg.experiment.target_seed,
    )
    .map_err(|e| Failure::Config(format!("experiment.target: {e}")))?;
    let lengthscale = cfg
        .experiment
        .lengthscale
        .resolve(|| cfg.experiment.target.lengthscale());
    if command == CommandKind::AmaParticles && cfg.ama.particles > cfg.ensemble.m {
        return Err(Failure::Config(format!(
            "ama.particles: particle clouds pair pointwise with deployment clouds, \
             so particles ({}) must be ≤ ensemble.m ({})",
            cfg.ama.particles, cfg.ensemble.m
        )));
    }
    let out_dir = cfg.experiment.out.clone().ok_or_else(|| {
        Failure::Config("output directory: set experiment.out or pass --out".into())
    })?;

    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    let config_sha256 = hasher
        .finalize()
        .iter()
        .fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        });

    fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let setup = prepare(cfg, command, target, lengthscale, out_dir, config_sha256)
        .map_err(Failure::Runtime)?;
    let reports = run_replicates(&setup);
    finalize(&setup, &reports, inv).map_err(Failure::Runtime)?;

    let succeeded = reports.iter().filter(|r| r.outcome.is_ok()).count();
    if succeeded == 0 {
        let first = reports
            .iter()
            .find_map(|r| r.outcome.as_ref().err())
            .cloned()
            .unwrap_or_else(|| "no replicates ran".into());
        return Err(Failure::Runtime(format!(
            "all {} replicates failed; first error: {first}",
            reports.len()
        )));
    }
    Ok(())
}

fn prepare(
    cfg: ExperimentConfig,
    command: CommandKind,
    target: TargetFunction,
    lengthscale: f64,
    out_dir: PathBuf,
    config_sha256: String,
) -> Result<Setup, String> {
    let mut rng = SeedStream::new(cfg.ensemble.seed).rng();
    let draw = make_meta_ensemble(cfg.ensemble.k, cfg.experiment.dim, cfg.ensemble.m, &mut rng)
        .map_err(rt)?;
    let val_labeled = LabeledEnsemble::label(draw.validation.clone(), &target).map_err(rt)?;
    let test_labeled = LabeledEnsemble::label(draw.test.clone(), &target).map_err(rt)?;

    let list = match command {
        CommandKind::Eval => &cfg.eval.distributions,
        CommandKind::Sweep => &cfg.sweep.distributions,
        _ => &cfg.experiment.baselines,
    };
    let needs_pool = list
        .iter()
        .any(|d| matches!(d, DistributionKind::NCoreset | DistributionKind::ACoreset));
    let pool = if needs_pool {
        Some(validation_pool(&draw)?)
    } else {
        None
    };

    let ama_lip = match command {
        CommandKind::AmaGaussian | CommandKind::AmaParticles => {
            let probe_seed = cfg.experiment.seed ^ PROBE_SEED_XOR;
            let cap = match cfg.ama.lipschitz_cap {
                AutoOr::Given(v) => v,
                AutoOr::Auto => default_lipschitz_cap(
                    &target,
                    cfg.experiment.dim,
                    lengthscale,
                    128,
                    probe_seed,
                )
                .map_err(rt)?,
            };
            let lip_target = match cfg.ama.lip_target {
                AutoOr::Given(v) => v,
                AutoOr::Auto => {
                    target_lipschitz_probe(&target, cfg.experiment.dim, probe_seed ^ 1)?
                }
            };
            Some((cap, lip_target))
        }
        _ => None,
    };

    Ok(Setup {
        cfg,
        command,
        target,
        lengthscale,
        draw,
        val_labeled,
        test_labeled,
        pool,
        ama_lip,
        out_dir,
        config_sha256,
    })
}

/// Largest difference quotient of the target over 250 point pairs drawn from
/// N(0, 4I); the same endpoint law the model-cap probe uses.
fn target_lipschitz_probe(target: &TargetFunction, dim: usize, seed: u64) -> Result<f64, String> {
    let law = GaussianMeasure::isotropic(DVector::zeros(dim), 2.0).map_err(rt)?;
    let mut rng = SeedStream::new(seed).rng();
    let cloud = sample_gaussian(&law, 500, &mut rng).map_err(rt)?;
    let mut best = 0.0f64;
    for i in 0..250 {
        let a = cloud.point(2 * i);
        let b = cloud.point(2 * i + 1);
        let gap = (&a - &b).norm();
        if gap > 0.0 {
            best = best.max((target.eval(&a) - target.eval(&b)).abs() / gap);
        }
    }
    if best > 0.0 {
        Ok(best)
    } else {
        Err("target Lipschitz probe found no usable pair".into())
    }
}

fn validation_pool(draw: &MetaEnsembleDraw) -> Result<EmpiricalMeasure, String> {
    let atoms = draw.validation.atoms();
    let d = draw.validation.dim();
    let total: usize = atoms
        .iter()
        .map(|a| a.as_empirical().map_or(0, |e| e.len()))
        .sum();
    let mut pts = DMatrix::zeros(total, d);
    let mut row = 0;
    for atom in atoms {
        let e = atom
            .as_empirical()
            .ok_or_else(|| "validation atoms are empirical by construction".to_string())?;
        pts.rows_mut(row, e.len()).copy_from(e.points());
        row += e.len();
    }
    EmpiricalMeasure::new(pts).map_err(rt)
}

fn run_replicates(setup: &Setup) -> Vec<ReplicateReport> {
    let threads = setup.cfg.experiment.threads;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    let work = || {
        (0..setup.cfg.experiment.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = setup.cfg.experiment.seed.wrapping_add(r as u64);
                let started = Instant::now();
                let outcome = run_one(setup, r, seed);
                ReplicateReport {
                    replicate: r,
                    seed,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                    outcome,
                }
            })
            .collect::<Vec<_>>()
    };
    match builder.build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

fn run_one(setup: &Setup, r: usize, seed: u64) -> Result<ReplicateSuccess, String> {
    match setup.command {
        CommandKind::Bilevel => bilevel_replicate(setup, r, seed),
        CommandKind::AmaGaussian | CommandKind::AmaParticles => ama_replicate(setup, r, seed),
        CommandKind::Baselines => baselines_replicate(setup, r, seed),
        CommandKind::Eval => eval_replicate(setup, r, seed),
        CommandKind::Sweep => sweep_replicate(setup, r, seed),
    }
}

fn init_gaussian(
    setup: &Setup,
    init_mean: AutoOr<f64>,
    init_scale: f64,
) -> Result<GaussianMeasure, String> {
    let d = setup.cfg.experiment.dim;
    let mean = match init_mean {
        AutoOr::Auto => setup.target.normal_baseline_mean(),
        AutoOr::Given(v) => DVector::from_element(d, v),
    };
    GaussianMeasure::new(mean, DMatrix::identity(d, d) * init_scale).map_err(rt)
}

fn fit_on_points(setup: &Setup, points: &DMatrix<f64>) -> Result<KernelModel, String> {
    let n = points.nrows();
    let labels = DVector::from_iterator(
        n,
        (0..n).map(|i| setup.target.eval(&points.row(i).transpose())),
    );
    fit_krr(points, &labels, setup.lengthscale, RIDGE_LEVEL / n as f64).map_err(rt)
}

fn fit_from_gaussian(
    setup: &Setup,
    g: &GaussianMeasure,
    n: usize,
    stream: &SeedStream,
) -> Result<KernelModel, String> {
    let mut rng = stream.rng();
    let cloud = sample_gaussian(g, n, &mut rng).map_err(rt)?;
    fit_on_points(setup, cloud.points())
}

fn rows_at(points: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), points.ncols(), |r, c| points[(idx[r], c)])
}

/// Err of a model trained on `n` points from the given reference
/// distribution, with the replicate-local stream for its randomness.
fn eval_reference(
    setup: &Setup,
    kind: DistributionKind,
    n: usize,
    stream: &SeedStream,
) -> Result<f64, String> {
    let model = match kind {
        DistributionKind::Optimized => {
            return Err("optimized distribution has no sampler here".into())
        }
        DistributionKind::Baseline(b) => {
            let sampler = baseline_distribution(b, &setup.target, &setup.draw.samples).map_err(rt)?;
            let mut rng = stream.rng();
            let cloud = sampler.sample(n, &mut rng).map_err(rt)?;
            fit_on_points(setup, cloud.points())?
        }
        DistributionKind::NCoreset => {
            let pool = setup.pool.as_ref().expect("pool built for coreset runs");
            let mut rng = stream.rng();
            let idx = ncoreset_indices(pool, n, setup.lengthscale, &mut rng).map_err(rt)?;
            fit_on_points(setup, &rows_at(pool.points(), &idx))?
        }
        DistributionKind::ACoreset => {
            let pool = setup.pool.as_ref().expect("pool built for coreset runs");
            let mut rng = stream.rng();
            let idx = acoreset_indices(pool, n, setup.lengthscale, &setup.target, &mut rng)
                .map_err(rt)?;
            fit_on_points(setup, &rows_at(pool.points(), &idx))?
        }
    };
    err_metric(&model, &setup.test_labeled).map_err(rt)
}

fn baseline_rows(setup: &Setup, seed: u64) -> Result<Vec<TableRow>, String> {
    let root = SeedStream::new(seed).derive(TAG_BASELINES);
    setup
        .cfg
        .experiment
        .baselines
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let err = eval_reference(
                setup,
                *kind,
                setup.cfg.experiment.train_n,
                &root.derive(i as u64),
            )?;
            Ok(TableRow {
                distribution: kind.name(),
                err,
            })
        })
        .collect()
}

fn write_trace(setup: &Setup, r: usize, trace: &OptimizationTrace) -> Result<String, String> {
    let name = format!("trace_r{r}.csv");
    fs::write(setup.out_dir.join(&name), trace.to_csv_string()).map_err(rt)?;
    Ok(name)
}

fn write_table(setup: &Setup, r: usize, rows: &[TableRow]) -> Result<String, String> {
    let name = format!("results_r{r}.csv");
    let mut text = String::from("distribution,err\n");
    for row in rows {
        let _ = writeln!(text, "{},{}", row.distribution, row.err);
    }
    fs::write(setup.out_dir.join(&name), text).map_err(rt)?;
    Ok(name)
}

fn bilevel_replicate(setup: &Setup, r: usize, seed: u64) -> Result<ReplicateSuccess, String> {
    let b = &setup.cfg.bilevel;
    let horizon = b.iterations.max(1);
    let config = BilevelConfig {
        iterations: b.iterations,
        lr_schedule: CosineSchedule::new(b.lr_initial, b.lr_final, horizon).map_err(rt)?,
        nugget_schedule: CosineSchedule::new(b.nugget_initial, b.nugget_final, horizon)
            .map_err(rt)?,
        samples_per_step: b.samples_per_step,
        lengthscale: setup.lengthscale,
        seed,
        gradient_normalization: b.gradient_normalization,
        record_walltime: false,
    };
    let theta0 = init_gaussian(setup, b.init_mean, b.init_scale)?;
    let trace = run_bilevel(
        &config,
        &setup.target,
        &setup.val_labeled,
        &setup.test_labeled,
        &theta0,
    )
    .map_err(rt)?;
    let trace_file = write_trace(setup, r, &trace)?;

    let last = trace.last().ok_or("bilevel trace is empty")?;
    let theta = unflatten_gaussian(&last.params, setup.cfg.experiment.dim).map_err(rt)?;
    let model = fit_from_gaussian(
        setup,
        &theta,
        setup.cfg.experiment.train_n,
        &SeedStream::new(seed).derive(TAG_FINAL_TRAIN),
    )?;
    let mut table = vec![TableRow {
        distribution: DistributionKind::Optimized.name(),
        err: err_metric(&model, &setup.test_labeled).map_err(rt)?,
    }];
    table.extend(baseline_rows(setup, seed)?);
    let results_file = write_table(setup, r, &table)?;
    Ok(ReplicateSuccess {
        files: vec![trace_file, results_file],
        table,
        sweep: Vec::new(),
    })
}

fn ama_config(setup: &Setup, seed: u64, train_len: usize) -> AmaConfig {
    let a = &setup.cfg.ama;
    let (cap, lip_target) = setup.ama_lip.expect("AMA setup resolves the bound constants");
    AmaConfig {
        lipschitz_cap: cap,
        lip_target,
        outer_iterations: a.outer_iterations,
        samples_for_misfit: a.samples_for_misfit,
        w2_samples: a.w2_samples,
        step_size: a.step_size,
        step_halving: a.step_halving,
        tol_step: a.tol_step,
        mean_only: a.mean_only,
        lengthscale: setup.lengthscale,
        nugget: a.nugget.resolve(|| RIDGE_LEVEL / train_len as f64),
        seed,
        record_walltime: false,
    }
}

fn ama_replicate(setup: &Setup, r: usize, seed: u64) -> Result<ReplicateSuccess, String> {
    let a = &setup.cfg.ama;
    let init_gauss = init_gaussian(setup, a.init_mean, a.init_scale)?;
    let (config, init, qhat) = match setup.command {
        CommandKind::AmaGaussian => (
            ama_config(setup, seed, a.samples_for_misfit),
            MeasureAtom::Gaussian(init_gauss),
            setup.draw.gaussians.clone(),
        ),
        CommandKind::AmaParticles => {
            let mut rng = SeedStream::new(seed).derive(TAG_PARTICLE_INIT).rng();
            let cloud = sample_gaussian(&init_gauss, a.particles, &mut rng).map_err(rt)?;
            // Pair clouds pointwise: each deployment atom is truncated to the
            // particle count, keeping the per-atom assignments square.
            let atoms = setup
                .draw
                .samples
                .atoms()
                .iter()
                .map(|atom| {
                    let e = atom.as_empirical().expect("sample atoms are empirical");
                    EmpiricalMeasure::new(e.points().rows(0, a.particles).into_owned())
                        .map(MeasureAtom::Empirical)
                })
                .collect::<distdesign::Result<Vec<_>>>()
                .map_err(rt)?;
            let qhat = MetaTestEnsemble::new(atoms, setup.draw.samples.weights().to_vec())
                .map_err(rt)?;
            (
                ama_config(setup, seed, a.particles),
                MeasureAtom::Empirical(cloud),
                qhat,
            )
        }
        _ => unreachable!("ama_replicate only runs for AMA commands"),
    };
    let (trace, final_state) = ama_loop_with_state(
        &config,
        &setup.target,
        &qhat,
        &init,
        Some(&setup.val_labeled),
        Some(&setup.test_labeled),
    )
    .map_err(rt)?;
    let trace_file = write_trace(setup, r, &trace)?;

    let model = match &final_state {
        MeasureAtom::Gaussian(g) => fit_from_gaussian(
            setup,
            g,
            setup.cfg.experiment.train_n,
            &SeedStream::new(seed).derive(TAG_FINAL_TRAIN),
        )?,
        MeasureAtom::Empirical(cloud) => fit_on_points(setup, cloud.points())?,
    };
    let mut table = vec![TableRow {
        distribution: DistributionKind::Optimized.name(),
        err: err_metric(&model, &setup.test_labeled).map_err(rt)?,
    }];
    table.extend(baseline_rows(setup, seed)?);
    let results_file = write_table(setup, r, &table)?;
    Ok(ReplicateSuccess {
        files: vec![trace_file, results_file],
        table,
        sweep: Vec::new(),
    })
}

fn baselines_replicate(setup: &Setup, r: usize, seed: u64) -> Result<ReplicateSuccess, String> {
    let table = baseline_rows(setup, seed)?;
    let results_file = write_table(setup, r, &table)?;
    Ok(ReplicateSuccess {
        files: vec![results_file],
        table,
        sweep: Vec::new(),
    })
}

fn eval_replicate(setup: &Setup, r: usize, seed: u64) -> Result<ReplicateSuccess, String> {
    let root = SeedStream::new(seed).derive(TAG_EVAL);
    let mut table = Vec::new();
    for (i, kind) in setup.cfg.eval.distributions.iter().enumerate() {
        let err = match setup.cfg.eval.model {
            EvalModel::Zero => {
                let d = setup.cfg.experiment.dim;
                let zero =
                    KernelModel::new(DMatrix::zeros(1, d), DVector::zeros(1), setup.lengthscale, 0.0)
                        .map_err(rt)?;
                err_metric(&zero, &setup.test_labeled).map_err(rt)?
            }
            EvalModel::Train => eval_reference(
                setup,
                *kind,
                setup.cfg.experiment.train_n,
                &root.derive(i as u64),
            )?,
        };
        table.push(TableRow {
            distribution: kind.name(),
            err,
        });
    }
    let results_file = write_table(setup, r, &table)?;
    Ok(ReplicateSuccess {
        files: vec![results_file],
        table,
        sweep: Vec::new(),
    })
}

fn sweep_replicate(setup: &Setup, r: usize, seed: u64) -> Result<ReplicateSuccess, String> {
    let needs_optimized = setup
        .cfg
        .sweep
        .distributions
        .contains(&DistributionKind::Optimized);
    let mut files = Vec::new();
    let (theta, optimized_cost) = if needs_optimized {
        let b = &setup.cfg.bilevel;
        let horizon = b.iterations.max(1);
        let config = BilevelConfig {
            iterations: b.iterations,
            lr_schedule: CosineSchedule::new(b.lr_initial, b.lr_final, horizon).map_err(rt)?,
            nugget_schedule: CosineSchedule::new(b.nugget_initial, b.nugget_final, horizon)
                .map_err(rt)?,
            samples_per_step: b.samples_per_step,
            lengthscale: setup.lengthscale,
            seed,
            gradient_normalization: b.gradient_normalization,
            record_walltime: false,
        };
        let theta0 = init_gaussian(setup, b.init_mean, b.init_scale)?;
        let trace = run_bilevel(
            &config,
            &setup.target,
            &setup.val_labeled,
            &setup.test_labeled,
            &theta0,
        )
        .map_err(rt)?;
        files.push(write_trace(setup, r, &trace)?);
        let last = trace.last().ok_or("bilevel trace is empty")?;
        let theta = unflatten_gaussian(&last.params, setup.cfg.experiment.dim).map_err(rt)?;
        (Some(theta), b.iterations * b.samples_per_step)
    } else {
        (None, 0)
    };

    let root = SeedStream::new(seed).derive(TAG_SWEEP);
    let mut rows = Vec::new();
    for (ni, &n) in setup.cfg.sweep.n_grid.iter().enumerate() {
        let at_n = root.derive(ni as u64);
        for (di, kind) in setup.cfg.sweep.distributions.iter().enumerate() {
            let stream = at_n.derive(di as u64);
            let (err, cost_n) = match kind {
                DistributionKind::Optimized => {
                    let theta = theta.as_ref().expect("optimized sweep ran the optimizer");
                    let model = fit_from_gaussian(setup, theta, n, &stream)?;
                    (
                        err_metric(&model, &setup.test_labeled).map_err(rt)?,
                        n + optimized_cost,
                    )
                }
                other => (eval_reference(setup, *other, n, &stream)?, n),
            };
            rows.push(SweepRow {
                distribution: kind.name(),
                n,
                cost_n,
                err,
            });
        }
    }

    let name = format!("sweep_r{r}.csv");
    let mut text = String::from("distribution,n,cost_n,err\n");
    for row in &rows {
        let _ = writeln!(text, "{},{},{},{}", row.distribution, row.n, row.cost_n, row.err);
    }
    fs::write(setup.out_dir.join(&name), text).map_err(rt)?;
    files.push(name);
    Ok(ReplicateSuccess {
        files,
        table: Vec::new(),
        sweep: rows,
    })
}

/// Mean and twice the sample standard deviation (0 for a single value).
pub fn mean_and_two_sigma(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 2.0 * var.sqrt())
}

fn finalize(setup: &Setup, reports: &[ReplicateReport], inv: &Invocation) -> Result<(), String> {
    let successes: Vec<&ReplicateSuccess> = reports
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .collect();
    let mut outputs = Vec::new();

    if !successes.is_empty() {
        if setup.command == CommandKind::Sweep {
            let mut text = String::from("distribution,n,cost_n,mean_err,two_sigma,replicates\n");
            let template = &successes[0].sweep;
            let mut optimized_means: Vec<(usize, f64)> = Vec::new();
            for (i, key) in template.iter().enumerate() {
                let values: Vec<f64> = successes.iter().map(|s| s.sweep[i].err).collect();
                let (mean, two_sigma) = mean_and_two_sigma(&values);
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{}",
                    key.distribution,
                    key.n,
                    key.cost_n,
                    mean,
                    two_sigma,
                    values.len()
                );
                if key.distribution == DistributionKind::Optimized.name() {
                    optimized_means.push((key.n, mean));
                }
            }
            fs::write(setup.out_dir.join("sweep_summary.csv"), text).map_err(rt)?;
            outputs.push("sweep_summary.csv".to_string());

            optimized_means.sort_by_key(|(n, _)| *n);
            for pair in optimized_means.windows(2) {
                if pair[1].1 > pair[0].1 {
                    eprintln!(
                        "warning: optimized mean Err rises from {} at n={} to {} at n={}; \
                         expected a non-increasing trend in n",
                        pair[0].1, pair[0].0, pair[1].1, pair[1].0
                    );
                }
            }
        } else {
            let mut text = String::from("distribution,mean_err,two_sigma,replicates\n");
            let template = &successes[0].table;
            for (i, key) in template.iter().enumerate() {
                let values: Vec<f64> = successes.iter().map(|s| s.table[i].err).collect();
                let (mean, two_sigma) = mean_and_two_sigma(&values);
                let _ = writeln!(
                    text,
                    "{},{},{},{}",
                    key.distribution, mean, two_sigma, values.len()
                );
            }
            fs::write(setup.out_dir.join("summary.csv"), text).map_err(rt)?;
            outputs.push("summary.csv".to_string());
        }
    }

    let replicates: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            let (status, error, files) = match &r.outcome {
                Ok(s) => ("ok", serde_json::Value::Null, s.files.clone()),
                Err(e) => (
                    "failed",
                    serde_json::Value::String(e.clone()),
                    Vec::new(),
                ),
            };
            json!({
                "replicate": r.replicate,
                "seed": r.seed,
                "status": status,
                "error": error,
                "wall_ms": r.wall_ms,
                "files": files,
            })
        })
        .collect();
    let manifest = json!({
        "command": setup.command.name(),
        "config_path": inv.config_path.display().to_string(),
        "config_sha256": setup.config_sha256,
        "versions": {
            "distdesign": distdesign::VERSION,
            "distdesign-cli": env!("CARGO_PKG_VERSION"),
        },
        "target": {
            "id": setup.cfg.experiment.target.name(),
            "dim": setup.cfg.experiment.dim,
            "seed": setup.cfg.experiment.target_seed,
            "lengthscale": setup.lengthscale,
        },
        "ensemble": {
            "k": setup.cfg.ensemble.k,
            "m": setup.cfg.ensemble.m,
            "seed": setup.cfg.ensemble.seed,
            "validation_count": setup.draw.validation_count,
        },
        "base_seed": setup.cfg.experiment.seed,
        "train_n": setup.cfg.experiment.train_n,
        "threads": setup.cfg.experiment.threads,
        "replicates": replicates,
        "outputs": outputs,
    });
    let pretty = serde_json::to_string_pretty(&manifest).map_err(rt)?;
    fs::write(setup.out_dir.join("manifest.json"), pretty + "\n").map_err(rt)?;
    Ok(())
}

/// Reads a two-column results CSV back; used by tests to recompute summaries.
pub fn read_results_csv(path: &Path) -> Result<Vec<(String, f64)>, String> {
    let text = fs::read_to_string(path).map_err(rt)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let (name, value) = line
            .split_once(',')
            .ok_or_else(|| format!("malformed results row {line:?}"))?;
        rows.push((name.to_string(), value.parse().map_err(rt)?));
    }
    Ok(rows)
}
