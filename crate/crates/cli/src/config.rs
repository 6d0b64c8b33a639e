//! Sectioned key-value experiment configs.
//!
//! The format is INI-style: `[section]` headers, `key = value` lines, `#` or
//! `;` comments. Every key is checked against the schema; unknown sections or
//! keys, duplicates, and type errors are reported with the field path (e.g.
//! `ensemble.k`) and the line number, before any artifact is created.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use distdesign::benchmarks::{BaselineKind, TargetKind};

/// Config-level failure: reported on stderr, exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// A value that is either resolved from context or given explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr<T> {
    Auto,
    Given(T),
}

impl<T: Copy> AutoOr<T> {
    pub fn resolve(self, auto: impl FnOnce() -> T) -> T {
        match self {
            AutoOr::Auto => auto(),
            AutoOr::Given(v) => v,
        }
    }
}

/// A training distribution the driver can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionKind {
    Optimized,
    Baseline(BaselineKind),
    NCoreset,
    ACoreset,
}

impl DistributionKind {
    pub fn name(self) -> &'static str {
        match self {
            DistributionKind::Optimized => "optimized",
            DistributionKind::Baseline(BaselineKind::Normal) => "normal",
            DistributionKind::Baseline(BaselineKind::Barycenter) => "barycenter",
            DistributionKind::Baseline(BaselineKind::Mixture) => "mixture",
            DistributionKind::Baseline(BaselineKind::Uniform) => "uniform",
            DistributionKind::NCoreset => "ncoreset",
            DistributionKind::ACoreset => "acoreset",
        }
    }
}

impl FromStr for DistributionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "optimized" => Ok(DistributionKind::Optimized),
            "ncoreset" => Ok(DistributionKind::NCoreset),
            "acoreset" => Ok(DistributionKind::ACoreset),
            other => BaselineKind::from_str(other)
                .map(DistributionKind::Baseline)
                .map_err(|_| {
                    format!(
                        "unknown distribution {other:?} (expected optimized, normal, \
                         barycenter, mixture, uniform, ncoreset, or acoreset)"
                    )
                }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSection {
    pub target: TargetKind,
    pub dim: usize,
    pub target_seed: u64,
    pub replicates: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub lengthscale: AutoOr<f64>,
    pub train_n: usize,
    pub baselines: Vec<DistributionKind>,
}

#[derive(Debug, Clone)]
pub struct EnsembleSection {
    pub k: usize,
    pub m: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BilevelSection {
    pub iterations: usize,
    pub samples_per_step: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub nugget_initial: f64,
    pub nugget_final: f64,
    pub gradient_normalization: bool,
    pub init_mean: AutoOr<f64>,
    pub init_scale: f64,
}

#[derive(Debug, Clone)]
pub struct AmaSection {
    pub outer_iterations: usize,
    pub samples_for_misfit: usize,
    pub w2_samples: usize,
    pub step_size: f64,
    pub step_halving: bool,
    pub tol_step: f64,
    pub mean_only: bool,
    pub nugget: AutoOr<f64>,
    pub lipschitz_cap: AutoOr<f64>,
    pub lip_target: AutoOr<f64>,
    pub particles: usize,
    pub init_mean: AutoOr<f64>,
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModel {
    Zero,
    Train,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub model: EvalModel,
    pub distributions: Vec<DistributionKind>,
}

#[derive(Debug, Clone)]
pub struct SweepSection {
    pub n_grid: Vec<usize>,
    pub distributions: Vec<DistributionKind>,
}

/// Fully parsed and validated experiment description. Sections not used by
/// the requested subcommand still parse, so one file can drive several
/// subcommands.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub ensemble: EnsembleSection,
    pub bilevel: BilevelSection,
    pub ama: AmaSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

struct RawEntry {
    value: String,
    line: usize,
}

/// One parsed `[section]` with its entries keyed for typed extraction.
struct SectionView {
    name: &'static str,
    entries: BTreeMap<String, RawEntry>,
}

impl SectionView {
    fn empty(name: &'static str) -> Self {
        SectionView {
            name,
            entries: BTreeMap::new(),
        }
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    fn take_raw(&mut self, key: &str) -> Option<RawEntry> {
        self.entries.remove(key)
    }

    fn take_parsed<T: FromStr>(
        &mut self,
        key: &str,
        expected: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(entry) => entry.value.parse().map_err(|_| {
                err(format!(
                    "{}: expected {expected}, got {:?} (line {})",
                    self.path(key),
                    entry.value,
                    entry.line
                ))
            }),
        }
    }

    fn take_usize_min(
        &mut self,
        key: &str,
        min: usize,
        default: usize,
    ) -> Result<usize, ConfigError> {
        let v: usize = self.take_parsed(key, "a nonnegative integer", default)?;
        if v < min {
            return Err(err(format!("{}: must be ≥ {min}, got {v}", self.path(key))));
        }
        Ok(v)
    }

    fn take_u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.take_parsed(key, "an unsigned integer", default)
    }

    fn take_f64_positive(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v: f64 = self.take_parsed(key, "a number", default)?;
        if v <= 0.0 || !v.is_finite() {
            return Err(err(format!("{}: must be positive, got {v}", self.path(key))));
        }
        Ok(v)
    }

    fn take_f64_nonneg(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v: f64 = self.take_parsed(key, "a number", default)?;
        if v < 0.0 || v.is_nan() {
            return Err(err(format!(
                "{}: must be nonnegative, got {v}",
                self.path(key)
            )));
        }
        Ok(v)
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.take_parsed(key, "true or false", default)
    }

    fn take_auto_f64(
        &mut self,
        key: &str,
        positive: bool,
        default: AutoOr<f64>,
    ) -> Result<AutoOr<f64>, ConfigError> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(entry) if entry.value == "auto" => Ok(AutoOr::Auto),
            Some(entry) => {
                let v: f64 = entry.value.parse().map_err(|_| {
                    err(format!(
                        "{}: expected a number or \"auto\", got {:?} (line {})",
                        self.path(key),
                        entry.value,
                        entry.line
                    ))
                })?;
                if !v.is_finite() || (positive && v <= 0.0) {
                    return Err(err(format!(
                        "{}: must be {}, got {v}",
                        self.path(key),
                        if positive { "positive" } else { "finite" }
                    )));
                }
                Ok(AutoOr::Given(v))
            }
        }
    }

    fn take_list<T: FromStr<Err = String>>(
        &mut self,
        key: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>, ConfigError> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(entry) => {
                let mut out = Vec::new();
                for item in entry.value.split(',') {
                    let item = item.trim();
                    if item.is_empty() {
                        continue;
                    }
                    out.push(item.parse().map_err(|e| {
                        err(format!("{}: {e} (line {})", self.path(key), entry.line))
                    })?);
                }
                if out.is_empty() {
                    return Err(err(format!(
                        "{}: list is empty (line {})",
                        self.path(key),
                        entry.line
                    )));
                }
                Ok(out)
            }
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some((key, entry)) = self.entries.into_iter().next() {
            return Err(err(format!(
                "{}.{key}: unknown key (line {})",
                self.name, entry.line
            )));
        }
        Ok(())
    }
}

const SECTION_NAMES: [&str; 6] = ["experiment", "ensemble", "bilevel", "ama", "eval", "sweep"];

fn split_sections(text: &str) -> Result<BTreeMap<&'static str, SectionView>, ConfigError> {
    let mut sections: BTreeMap<&'static str, SectionView> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            let known = SECTION_NAMES
                .iter()
                .find(|s| **s == name)
                .copied()
                .ok_or_else(|| {
                    err(format!(
                        "unknown section [{name}] (line {line_no}); expected one of {}",
                        SECTION_NAMES.join(", ")
                    ))
                })?;
            if sections.contains_key(known) {
                return Err(err(format!("duplicate section [{known}] (line {line_no})")));
            }
            sections.insert(known, SectionView::empty(known));
            current = Some(known);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!(
                "line {line_no}: expected `key = value` or `[section]`, got {line:?}"
            )));
        };
        let section = current.ok_or_else(|| {
            err(format!(
                "line {line_no}: key {:?} appears before any [section] header",
                key.trim()
            ))
        })?;
        let key = key.trim().to_string();
        let view = sections.get_mut(section).expect("current section inserted");
        if view.entries.contains_key(&key) {
            return Err(err(format!(
                "{section}.{key}: duplicate key (line {line_no})"
            )));
        }
        view.entries.insert(
            key,
            RawEntry {
                value: value.trim().to_string(),
                line: line_no,
            },
        );
    }
    Ok(sections)
}

fn default_baselines() -> Vec<DistributionKind> {
    vec![
        DistributionKind::Baseline(BaselineKind::Normal),
        DistributionKind::Baseline(BaselineKind::Barycenter),
        DistributionKind::Baseline(BaselineKind::Mixture),
        DistributionKind::Baseline(BaselineKind::Uniform),
    ]
}

fn reject_optimized(list: &[DistributionKind], path: &str) -> Result<(), ConfigError> {
    if list.contains(&DistributionKind::Optimized) {
        return Err(err(format!(
            "{path}: \"optimized\" is only valid in sweep.distributions; \
             it needs an optimizer run to define"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut sections = split_sections(text)?;
        let mut section =
            |name: &'static str| sections.remove(name).unwrap_or(SectionView::empty(name));

        let mut s = section("experiment");
        let target_entry = s
            .take_raw("target")
            .ok_or_else(|| err("experiment.target: missing required key"))?;
        let target = TargetKind::from_str(&target_entry.value).map_err(|_| {
            err(format!(
                "experiment.target: expected g1, g2, g3, or g4, got {:?} (line {})",
                target_entry.value, target_entry.line
            ))
        })?;
        let dim = match s.take_raw("dim") {
            Some(entry) => entry.value.parse::<usize>().ok().filter(|d| *d >= 1).ok_or_else(|| {
                err(format!(
                    "experiment.dim: expected a positive integer, got {:?} (line {})",
                    entry.value, entry.line
                ))
            })?,
            None => return Err(err("experiment.dim: missing required key")),
        };
        let experiment = ExperimentSection {
            target,
            dim,
            target_seed: s.take_u64("target_seed", 0)?,
            replicates: s.take_usize_min("replicates", 1, 1)?,
            seed: s.take_u64("seed", 0)?,
            out: s.take_raw("out").map(|e| PathBuf::from(e.value)),
            threads: s.take_usize_min("threads", 0, 1)?,
            lengthscale: s.take_auto_f64("lengthscale", true, AutoOr::Auto)?,
            train_n: s.take_usize_min("train_n", 2, 1024)?,
            baselines: s.take_list("baselines", default_baselines())?,
        };
        reject_optimized(&experiment.baselines, "experiment.baselines")?;
        s.finish()?;

        let mut s = section("ensemble");
        let ensemble = EnsembleSection {
            k: s.take_usize_min("k", 1, 10)?,
            m: s.take_usize_min("m", 2, 5000)?,
            seed: s.take_u64("seed", 0)?,
        };
        s.finish()?;

        let mut s = section("bilevel");
        let bilevel = BilevelSection {
            iterations: s.take_usize_min("iterations", 1, 1000)?,
            samples_per_step: s.take_usize_min("samples_per_step", 2, 250)?,
            lr_initial: s.take_f64_positive("lr_initial", 1e-2)?,
            lr_final: s.take_f64_nonneg("lr_final", 0.0)?,
            nugget_initial: s.take_f64_positive("nugget_initial", 1e-3)?,
            nugget_final: s.take_f64_nonneg("nugget_final", 1e-7)?,
            gradient_normalization: s.take_bool("gradient_normalization", false)?,
            init_mean: s.take_auto_f64("init", false, AutoOr::Auto)?,
            init_scale: s.take_f64_positive("init_scale", 1.0)?,
        };
        s.finish()?;

        let mut s = section("ama");
        let samples_for_misfit = s.take_usize_min("samples_for_misfit", 2, 256)?;
        let ama = AmaSection {
            outer_iterations: s.take_usize_min("outer_iterations", 1, 50)?,
            samples_for_misfit,
            w2_samples: s.take_usize_min("w2_samples", 2, 128)?,
            step_size: s.take_f64_positive("step_size", 5e-2)?,
            step_halving: s.take_bool("step_halving", true)?,
            tol_step: s.take_f64_nonneg("tol_step", 1e-6)?,
            mean_only: s.take_bool("mean_only", false)?,
            nugget: s.take_auto_f64("nugget", false, AutoOr::Auto)?,
            lipschitz_cap: s.take_auto_f64("lipschitz_cap", true, AutoOr::Auto)?,
            lip_target: s.take_auto_f64("lip_target", true, AutoOr::Auto)?,
            particles: s.take_usize_min("particles", 2, 64)?,
            init_mean: s.take_auto_f64("init", false, AutoOr::Auto)?,
            init_scale: s.take_f64_positive("init_scale", 1.0)?,
        };
        s.finish()?;

        let mut s = section("eval");
        let model = match s.take_raw("model") {
            None => EvalModel::Zero,
            Some(entry) => match entry.value.as_str() {
                "zero" => EvalModel::Zero,
                "train" => EvalModel::Train,
                other => {
                    return Err(err(format!(
                        "eval.model: expected zero or train, got {other:?} (line {})",
                        entry.line
                    )))
                }
            },
        };
        let eval = EvalSection {
            model,
            distributions: s.take_list(
                "distributions",
                vec![DistributionKind::Baseline(BaselineKind::Normal)],
            )?,
        };
        reject_optimized(&eval.distributions, "eval.distributions")?;
        s.finish()?;

        let mut s = section("sweep");
        let n_grid = match s.take_raw("n_grid") {
            None => vec![64, 128, 256, 512, 1024],
            Some(entry) => {
                let mut grid = Vec::new();
                for item in entry.value.split(',') {
                    let item = item.trim();
                    if item.is_empty() {
                        continue;
                    }
                    let n: usize = item.parse().ok().filter(|n| *n >= 2).ok_or_else(|| {
                        err(format!(
                            "sweep.n_grid: expected integers ≥ 2, got {item:?} (line {})",
                            entry.line
                        ))
                    })?;
                    grid.push(n);
                }
                if grid.is_empty() {
                    return Err(err(format!(
                        "sweep.n_grid: list is empty (line {})",
                        entry.line
                    )));
                }
                grid
            }
        };
        let sweep = SweepSection {
            n_grid,
            distributions: s.take_list(
                "distributions",
                vec![
                    DistributionKind::Optimized,
                    DistributionKind::Baseline(BaselineKind::Normal),
                ],
            )?,
        };
        s.finish()?;

        let config = ExperimentConfig {
            experiment,
            ensemble,
            bilevel,
            ama,
            eval,
            sweep,
        };
        config.validate()?;
        Ok(config)
    }

    /// Cross-field checks that do not depend on the subcommand.
    fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.experiment;
        let min_dim = match e.target {
            TargetKind::G2 => 5,
            TargetKind::G3 => 4,
            _ => 1,
        };
        if e.dim < min_dim {
            return Err(err(format!(
                "experiment.dim: target {} needs dim ≥ {min_dim}, got {}",
                e.target.name(),
                e.dim
            )));
        }
        Ok(())
    }
}
