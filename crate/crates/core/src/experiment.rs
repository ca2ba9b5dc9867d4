//! Config-driven experiment runner.
//!
//! A run generates or loads data, trains the ensemble, computes the per-member
//! variances, evaluates both the classical and the extended posterior on the
//! test split, and writes its artifacts:
//!
//! ```text
//! <out>/ensemble/manifest.json     ensemble manifest + member_NNN.txt files
//! <out>/gammas.txt                 per-member gamma and ELBO coefficients
//! <out>/report.tsv                 dataset, variant, L, rmse, epistemic_cov, total_cov, ratio
//! <out>/summary.txt                key = value run summary (incl. ground-truth coverage)
//! <out>/plot.svg                   band plot, one-dimensional inputs only
//! ```
//!
//! # Configuration
//!
//! Plain text, one `key = value` per line, `#` starts a comment.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | required | `quartic1d`, `quartic2d` or `file` |
//! | `name` | dataset kind / file stem | dataset id used in reports |
//! | `n_train` | 200 | synthetic training size |
//! | `n_test` | 1000 | synthetic test size |
//! | `path` | required for `file` | delimited numeric text |
//! | `target_column` | `last` | 0-based target column |
//! | `delimiter` | `comma` | `comma`, `whitespace`, `tab`, `semicolon` or one character |
//! | `header` | `false` | skip the first line |
//! | `train_fraction` | 0.8 | share of rows used for training |
//! | `normalize_inputs` | `true` for files, `false` otherwise | standardise inputs |
//! | `hidden` | `128,64,32` | hidden widths; the last one feeds both heads |
//! | `variance_floor` | 1e-6 | lower bound on the predicted variance |
//! | `init` | `he` | `he`, `xavier` or `zeros` (biases always start at zero) |
//! | `epochs` | 60 | |
//! | `batch_size` | 64 | clamped to the training size |
//! | `lr` | 0.001 | number or `1/n` |
//! | `lambda` | `1/n` | L2 strength; number or `1/n` |
//! | `schedule` | `drop_once` | `constant`, `drop_once` or `drop_each` |
//! | `schedule_factor` | 0.1 | |
//! | `schedule_epochs` | 5 | final epochs affected by the schedule |
//! | `members` | 5 | ensemble size |
//! | `variant` | `both` | rows written to the report |
//! | `ratio` | `per_point` | `per_point` or `of_means` |
//! | `out` | `out` | output directory |
//! | `seed` | 0 | master seed |
//! | `threads` | 0 | worker threads, 0 = all cores |
//! | `plot` | `true` | write `plot.svg` for one-dimensional inputs |
//!
//! # Seeds
//!
//! The master seed `s` fans out through SplitMix64 as `derive_seed(s, k)` with
//! stream `k = 1` for synthetic training data, `2` for synthetic test data,
//! `3` for the train/test split and `4` for the ensemble. Member `l` then uses
//! `ensemble_seed + l`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{
    gen_quartic_1d, gen_quartic_2d, load_delimited, normalize, split, Dataset, Delimiter,
    NormStats, SplitTag,
};
use crate::ensemble::{train_ensemble, Ensemble, Execution};
use crate::error::{Error, Result};
use crate::hetero::{Architecture, Schedule, TrainConfig, DEFAULT_VARIANCE_FLOOR};
use crate::metrics::{
    coverage, report_table, rmse, variance_ratio_with, EvalReport, RatioMode, Variant,
};
use crate::nn::InitScheme;
use crate::plot::{render_grid, Panel, Series};
use crate::posterior::{point_moments, GammaSet, MomentPair, PointMoments};

/// SplitMix64 finaliser applied to `master + stream * golden`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_TRAIN_DATA: u64 = 1;
pub const STREAM_TEST_DATA: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;
pub const STREAM_ENSEMBLE: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Quartic1d {
        n_train: usize,
        n_test: usize,
    },
    Quartic2d {
        n_train: usize,
        n_test: usize,
    },
    File {
        path: PathBuf,
        /// `None` selects the last column.
        target_column: Option<usize>,
        delimiter: Delimiter,
        header: bool,
        train_fraction: f64,
    },
}

/// A scalar that may depend on the training-set size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    Fixed(f64),
    InverseN,
}

impl Scalar {
    pub fn resolve(self, n: usize) -> f64 {
        match self {
            Scalar::Fixed(v) => v,
            Scalar::InverseN => 1.0 / n as f64,
        }
    }

    fn parse(key: &str, v: &str) -> Result<Self> {
        if v == "1/n" || v == "1/N" {
            return Ok(Scalar::InverseN);
        }
        if let Some(den) = v.strip_prefix("1/") {
            let d: f64 = parse_value(key, den)?;
            return Ok(Scalar::Fixed(1.0 / d));
        }
        parse_value(key, v).map(Scalar::Fixed)
    }

    fn render(self) -> String {
        match self {
            Scalar::Fixed(v) => format!("{v}"),
            Scalar::InverseN => "1/n".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantSelection {
    Classical,
    Extended,
    Both,
}

impl VariantSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Self::Classical),
            "extended" => Ok(Self::Extended),
            "both" => Ok(Self::Both),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }

    pub fn includes(self, v: Variant) -> bool {
        matches!(
            (self, v),
            (Self::Both, _)
                | (Self::Classical, Variant::Classical)
                | (Self::Extended, Variant::Extended)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub normalize_inputs: Option<bool>,
    pub hidden: Vec<usize>,
    pub variance_floor: f64,
    pub init: InitScheme,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Scalar,
    pub lambda: Scalar,
    pub schedule: Schedule,
    pub members: usize,
    pub variant: VariantSelection,
    pub ratio_mode: RatioMode,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub plot: bool,
}

impl ExperimentConfig {
    /// Defaults for everything except the dataset.
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            name: None,
            dataset,
            normalize_inputs: None,
            hidden: vec![128, 64, 32],
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            init: InitScheme::He,
            epochs: 60,
            batch_size: 64,
            lr: Scalar::Fixed(1e-3),
            lambda: Scalar::InverseN,
            schedule: Schedule::DropOnce {
                factor: 0.1,
                last_epochs: 5,
            },
            members: 5,
            variant: VariantSelection::Both,
            ratio_mode: RatioMode::PerPoint,
            out_dir: PathBuf::from("out"),
            seed: 0,
            threads: 0,
            plot: true,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_in(text, None)
    }

    /// Parse config text; relative dataset paths resolve against `base`.
    pub fn parse_in(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", idx + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let kind = pairs
            .iter()
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::config("missing required key `dataset`"))?;
        let dataset = match kind.as_str() {
            "quartic1d" => DatasetSpec::Quartic1d {
                n_train: 200,
                n_test: 1000,
            },
            "quartic2d" => DatasetSpec::Quartic2d {
                n_train: 200,
                n_test: 1000,
            },
            "file" => DatasetSpec::File {
                path: PathBuf::new(),
                target_column: None,
                delimiter: Delimiter::Char(','),
                header: false,
                train_fraction: 0.8,
            },
            other => return Err(Error::config(format!("unknown dataset `{other}`"))),
        };
        let mut cfg = Self::new(dataset);
        for (k, v) in &pairs {
            if k != "dataset" {
                cfg.set(k, v)?;
            }
        }
        if let DatasetSpec::File { path, .. } = &mut cfg.dataset {
            if path.as_os_str().is_empty() {
                return Err(Error::config("`dataset = file` needs `path`"));
            }
            if let Some(base) = base {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_in(&text, path.parent())
    }

    /// Set one key; used by the parser and for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "name" => self.name = Some(v.to_string()),
            "n_train" | "n_test" => {
                let n: usize = parse_value(key, v)?;
                match &mut self.dataset {
                    DatasetSpec::Quartic1d { n_train, n_test }
                    | DatasetSpec::Quartic2d { n_train, n_test } => {
                        if key == "n_train" {
                            *n_train = n;
                        } else {
                            *n_test = n;
                        }
                    }
                    DatasetSpec::File { .. } => {
                        return Err(Error::config(format!(
                            "`{key}` only applies to synthetic data"
                        )))
                    }
                }
            }
            "path" | "target_column" | "delimiter" | "header" | "train_fraction" => {
                let DatasetSpec::File {
                    path,
                    target_column,
                    delimiter,
                    header,
                    train_fraction,
                } = &mut self.dataset
                else {
                    return Err(Error::config(format!(
                        "`{key}` only applies to file datasets"
                    )));
                };
                match key {
                    "path" => *path = PathBuf::from(v),
                    "target_column" => {
                        *target_column = if v == "last" {
                            None
                        } else {
                            Some(parse_value(key, v)?)
                        }
                    }
                    "delimiter" => *delimiter = Delimiter::parse(v)?,
                    "header" => *header = parse_bool(key, v)?,
                    _ => *train_fraction = parse_value(key, v)?,
                }
            }
            "normalize_inputs" => self.normalize_inputs = Some(parse_bool(key, v)?),
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|s| parse_value::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "variance_floor" => self.variance_floor = parse_value(key, v)?,
            "init" => {
                self.init = match v {
                    "he" => InitScheme::He,
                    "xavier" => InitScheme::Xavier,
                    "zeros" => InitScheme::Zeros,
                    _ => return Err(Error::config(format!("unknown init `{v}`"))),
                }
            }
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = Scalar::parse(key, v)?,
            "lambda" => self.lambda = Scalar::parse(key, v)?,
            "schedule" => {
                let (factor, last_epochs) = self.schedule_params();
                self.schedule = match v {
                    "constant" => Schedule::Constant,
                    "drop_once" => Schedule::DropOnce {
                        factor,
                        last_epochs,
                    },
                    "drop_each" => Schedule::DropEach {
                        factor,
                        last_epochs,
                    },
                    _ => return Err(Error::config(format!("unknown schedule `{v}`"))),
                };
            }
            "schedule_factor" | "schedule_epochs" => {
                let (mut factor, mut last_epochs) = self.schedule_params();
                if key == "schedule_factor" {
                    factor = parse_value(key, v)?;
                } else {
                    last_epochs = parse_value(key, v)?;
                }
                self.schedule = match self.schedule {
                    Schedule::DropEach { .. } => Schedule::DropEach {
                        factor,
                        last_epochs,
                    },
                    Schedule::Constant => Schedule::Constant,
                    Schedule::DropOnce { .. } => Schedule::DropOnce {
                        factor,
                        last_epochs,
                    },
                };
            }
            "members" => self.members = parse_value(key, v)?,
            "variant" => self.variant = VariantSelection::parse(v)?,
            "ratio" => {
                self.ratio_mode = match v {
                    "per_point" => RatioMode::PerPoint,
                    "of_means" => RatioMode::OfMeans,
                    _ => return Err(Error::config(format!("unknown ratio mode `{v}`"))),
                }
            }
            "out" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            "plot" => self.plot = parse_bool(key, v)?,
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn schedule_params(&self) -> (f64, usize) {
        match self.schedule {
            Schedule::DropOnce {
                factor,
                last_epochs,
            }
            | Schedule::DropEach {
                factor,
                last_epochs,
            } => (factor, last_epochs),
            Schedule::Constant => (0.1, 5),
        }
    }

    pub fn dataset_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match &self.dataset {
            DatasetSpec::Quartic1d { .. } => "quartic1d".into(),
            DatasetSpec::Quartic2d { .. } => "quartic2d".into(),
            DatasetSpec::File { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "file".into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::config("members must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        match &self.dataset {
            DatasetSpec::Quartic1d { n_train, n_test }
            | DatasetSpec::Quartic2d { n_train, n_test } => {
                if *n_train < 2 || *n_test == 0 {
                    return Err(Error::config(
                        "synthetic data needs n_train >= 2 and n_test >= 1",
                    ));
                }
            }
            DatasetSpec::File {
                path,
                train_fraction,
                ..
            } => {
                if !path.exists() {
                    return Err(Error::config(format!(
                        "data file {} not found",
                        path.display()
                    )));
                }
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(Error::config("train_fraction must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it gives back this config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DatasetSpec::Quartic1d { n_train, n_test }
            | DatasetSpec::Quartic2d { n_train, n_test } => {
                let kind = if matches!(self.dataset, DatasetSpec::Quartic1d { .. }) {
                    "quartic1d"
                } else {
                    "quartic2d"
                };
                let _ = writeln!(
                    s,
                    "dataset = {kind}\nn_train = {n_train}\nn_test = {n_test}"
                );
            }
            DatasetSpec::File {
                path,
                target_column,
                delimiter,
                header,
                train_fraction,
            } => {
                let _ = writeln!(s, "dataset = file\npath = {}", path.display());
                let _ = writeln!(
                    s,
                    "target_column = {}",
                    target_column.map_or("last".to_string(), |c| c.to_string())
                );
                let d = match delimiter {
                    Delimiter::Whitespace => "whitespace".to_string(),
                    Delimiter::Char(',') => "comma".to_string(),
                    Delimiter::Char('\t') => "tab".to_string(),
                    Delimiter::Char(c) => c.to_string(),
                };
                let _ = writeln!(
                    s,
                    "delimiter = {d}\nheader = {header}\ntrain_fraction = {train_fraction}"
                );
            }
        }
        if let Some(n) = &self.name {
            let _ = writeln!(s, "name = {n}");
        }
        if let Some(b) = self.normalize_inputs {
            let _ = writeln!(s, "normalize_inputs = {b}");
        }
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "hidden = {}", hidden.join(","));
        let _ = writeln!(s, "variance_floor = {}", self.variance_floor);
        let init = match self.init {
            InitScheme::He => "he",
            InitScheme::Xavier => "xavier",
            InitScheme::Zeros => "zeros",
        };
        let _ = writeln!(s, "init = {init}");
        let _ = writeln!(
            s,
            "epochs = {}\nbatch_size = {}",
            self.epochs, self.batch_size
        );
        let _ = writeln!(
            s,
            "lr = {}\nlambda = {}",
            self.lr.render(),
            self.lambda.render()
        );
        let (factor, last) = self.schedule_params();
        let kind = match self.schedule {
            Schedule::Constant => "constant",
            Schedule::DropOnce { .. } => "drop_once",
            Schedule::DropEach { .. } => "drop_each",
        };
        let _ = writeln!(
            s,
            "schedule = {kind}\nschedule_factor = {factor}\nschedule_epochs = {last}"
        );
        let variant = match self.variant {
            VariantSelection::Both => "both",
            VariantSelection::Classical => "classical",
            VariantSelection::Extended => "extended",
        };
        let ratio = match self.ratio_mode {
            RatioMode::PerPoint => "per_point",
            RatioMode::OfMeans => "of_means",
        };
        let _ = writeln!(
            s,
            "members = {}\nvariant = {variant}\nratio = {ratio}",
            self.members
        );
        let _ = writeln!(
            s,
            "out = {}\nseed = {}\nthreads = {}\nplot = {}",
            self.out_dir.display(),
            self.seed,
            self.threads,
            self.plot
        );
        s
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

/// Normalized train/test data ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
}

/// Build the normalized train and test splits for a config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test, default_norm_inputs) = match &cfg.dataset {
        DatasetSpec::Quartic1d { n_train, n_test } => (
            gen_quartic_1d(*n_train, derive_seed(cfg.seed, STREAM_TRAIN_DATA))?,
            gen_quartic_1d(*n_test, derive_seed(cfg.seed, STREAM_TEST_DATA))?,
            false,
        ),
        DatasetSpec::Quartic2d { n_train, n_test } => (
            gen_quartic_2d(*n_train, derive_seed(cfg.seed, STREAM_TRAIN_DATA))?,
            gen_quartic_2d(*n_test, derive_seed(cfg.seed, STREAM_TEST_DATA))?,
            false,
        ),
        DatasetSpec::File {
            path,
            target_column,
            delimiter,
            header,
            train_fraction,
        } => {
            let width = peek_width(path, *delimiter, *header)?;
            let col = target_column.unwrap_or(width.saturating_sub(1));
            let all = load_delimited(path, col, *delimiter, *header)?;
            let (tr, te) = split(&all, *train_fraction, derive_seed(cfg.seed, STREAM_SPLIT))?;
            (tr, te, true)
        }
    };
    let train = train.with_tag(SplitTag::Train);
    let test = test.with_tag(SplitTag::Test);
    let (train, test, norm) = normalize(
        &train,
        &test,
        cfg.normalize_inputs.unwrap_or(default_norm_inputs),
    )?;
    Ok(PreparedData { train, test, norm })
}

fn peek_width(path: &Path, delimiter: Delimiter, header: bool) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .nth(usize::from(header))
        .ok_or_else(|| Error::domain(format!("{} has no data rows", path.display())))?;
    Ok(match delimiter {
        Delimiter::Whitespace => line.split_whitespace().count(),
        Delimiter::Char(c) => line.split(c).count(),
    })
}

/// Training configuration resolved against the training-set size.
pub fn train_config(cfg: &ExperimentConfig, n_train: usize) -> TrainConfig {
    TrainConfig {
        arch: Architecture {
            hidden: cfg.hidden.clone(),
            variance_floor: cfg.variance_floor,
            init: cfg.init,
        },
        epochs: cfg.epochs,
        batch_size: cfg.batch_size.min(n_train),
        lr: cfg.lr.resolve(n_train),
        schedule: cfg.schedule,
        lambda: cfg.lambda.resolve(n_train),
        seed: derive_seed(cfg.seed, STREAM_ENSEMBLE),
    }
}

/// Train the ensemble for a config on prepared data.
pub fn train_for(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Ensemble> {
    let tc = train_config(cfg, data.train.len());
    Ok(
        train_ensemble(&data.train, &tc, cfg.members, Execution::Parallel)?
            .with_norm(data.norm.clone()),
    )
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub data: PreparedData,
    pub ensemble: Ensemble,
    pub gammas: GammaSet,
    pub classical: EvalReport,
    pub extended: EvalReport,
    pub moments: Vec<PointMoments>,
}

/// Evaluate an ensemble and its gammas on a (normalized) test set.
pub fn evaluate(
    dataset: &str,
    ensemble: &Ensemble,
    gammas: &GammaSet,
    test: &Dataset,
    ratio_mode: RatioMode,
) -> Result<(EvalReport, EvalReport, Vec<PointMoments>)> {
    if gammas.len() != ensemble.len() {
        return Err(Error::shape("gamma set does not match the ensemble"));
    }
    let moments = point_moments(ensemble, gammas, test.inputs(), test.len())?;
    let p_y = test.p_y();
    let means: Vec<f64> = moments
        .iter()
        .flat_map(|m| m.regression_classical.mean.iter().copied())
        .collect();
    let rmse_v = rmse(&means, test.targets())?;
    let truth_rmse = test.ground_truth().map(|g| rmse(&means, g)).transpose()?;
    let aleatoric: Vec<f64> = moments.iter().map(|m| m.aleatoric).collect();

    let build = |variant: Variant| -> Result<EvalReport> {
        fn pick(m: &PointMoments, variant: Variant) -> (&MomentPair, &MomentPair) {
            match variant {
                Variant::Classical => (&m.regression_classical, &m.predictive_classical),
                Variant::Extended => (&m.regression_extended, &m.predictive_extended),
            }
        }
        let epi: Vec<f64> = moments
            .iter()
            .flat_map(|m| pick(m, variant).0.variances())
            .collect();
        let tot: Vec<f64> = moments
            .iter()
            .flat_map(|m| pick(m, variant).1.variances())
            .collect();
        let epi_point: Vec<f64> = epi
            .chunks_exact(p_y)
            .map(|c| c.iter().sum::<f64>() / p_y as f64)
            .collect();
        Ok(EvalReport {
            dataset: dataset.to_string(),
            variant,
            ensemble_size: ensemble.len(),
            rmse: rmse_v,
            epistemic_coverage: coverage(&means, &epi, test.targets())?,
            total_coverage: coverage(&means, &tot, test.targets())?,
            variance_ratio: variance_ratio_with(&epi_point, &aleatoric, ratio_mode)?,
            truth_coverage: test
                .ground_truth()
                .map(|g| coverage(&means, &epi, g))
                .transpose()?,
            truth_rmse,
        })
    };
    Ok((
        build(Variant::Classical)?,
        build(Variant::Extended)?,
        moments,
    ))
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// The whole pipeline in memory, no files written.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    with_threads(cfg.threads, || {
        let data = prepare_data(cfg).map_err(|e| e.in_stage("data"))?;
        let ensemble = train_for(cfg, &data).map_err(|e| e.in_stage("train"))?;
        let lambda = ensemble.config().lambda;
        let gammas =
            GammaSet::compute(&ensemble, &data.train, lambda).map_err(|e| e.in_stage("gamma"))?;
        let (classical, extended, moments) = evaluate(
            &cfg.dataset_name(),
            &ensemble,
            &gammas,
            &data.test,
            cfg.ratio_mode,
        )
        .map_err(|e| e.in_stage("eval"))?;
        Ok(RunResult {
            data,
            ensemble,
            gammas,
            classical,
            extended,
            moments,
        })
    })
}

pub const ENSEMBLE_DIR: &str = "ensemble";
pub const GAMMA_FILE: &str = "gammas.txt";
pub const REPORT_FILE: &str = "report.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const PLOT_FILE: &str = "plot.svg";
pub const CONFIG_FILE: &str = "config.txt";

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Report rows selected by `cfg.variant`.
pub fn selected_reports(cfg: &ExperimentConfig, run: &RunResult) -> Vec<EvalReport> {
    [&run.classical, &run.extended]
        .into_iter()
        .filter(|r| cfg.variant.includes(r.variant))
        .cloned()
        .collect()
}

/// Key = value summary of a run, including ground-truth metrics.
pub fn summary_text(run: &RunResult) -> String {
    let mut s = String::new();
    let opt = |v: Option<f64>| v.map_or("na".to_string(), |v| format!("{v:.6}"));
    let _ = writeln!(s, "members = {}", run.ensemble.len());
    let _ = writeln!(s, "n_train = {}", run.data.train.len());
    let _ = writeln!(s, "n_test = {}", run.data.test.len());
    let _ = writeln!(s, "lambda = {:.6e}", run.gammas.lambda());
    let gs: Vec<String> = run
        .gammas
        .gammas()
        .iter()
        .map(|g| format!("{g:.6e}"))
        .collect();
    let _ = writeln!(s, "gammas = {}", gs.join(","));
    for r in [&run.classical, &run.extended] {
        let v = r.variant;
        let _ = writeln!(s, "{v}.rmse = {:.6}", r.rmse);
        let _ = writeln!(s, "{v}.epistemic_coverage = {:.6}", r.epistemic_coverage);
        let _ = writeln!(s, "{v}.total_coverage = {:.6}", r.total_coverage);
        let _ = writeln!(s, "{v}.variance_ratio = {:.6}", r.variance_ratio);
        let _ = writeln!(s, "{v}.truth_coverage = {}", opt(r.truth_coverage));
        let _ = writeln!(s, "{v}.truth_rmse = {}", opt(r.truth_rmse));
    }
    s.push_str(
        "# the gamma derivation assumes member posteriors barely overlap; this is not checked\n",
    );
    s
}

/// Paths of the artifacts a run wrote.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub manifest: PathBuf,
    pub gammas: PathBuf,
    pub report: PathBuf,
    pub summary: PathBuf,
    pub plot: Option<PathBuf>,
}

/// Run the pipeline and write all artifacts under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunResult, Artifacts)> {
    let run = run_pipeline(cfg)?;
    let artifacts = write_artifacts(cfg, &run).map_err(|e| e.in_stage("write"))?;
    Ok((run, artifacts))
}

pub fn write_artifacts(cfg: &ExperimentConfig, run: &RunResult) -> Result<Artifacts> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let manifest = run.ensemble.save(out.join(ENSEMBLE_DIR))?;
    let gammas = out.join(GAMMA_FILE);
    run.gammas.save(&gammas)?;
    let report = out.join(REPORT_FILE);
    write(&report, &report_table(&selected_reports(cfg, run))?)?;
    let summary = out.join(SUMMARY_FILE);
    write(&summary, &summary_text(run))?;
    let plot = if cfg.plot && run.data.train.p_x() == 1 {
        let p = out.join(PLOT_FILE);
        write(&p, &band_plot(&cfg.dataset_name(), run)?)?;
        Some(p)
    } else {
        None
    };
    Ok(Artifacts {
        manifest,
        gammas,
        report,
        summary,
        plot,
    })
}

/// Reload a run's ensemble and gammas from `out_dir` and re-evaluate.
pub fn evaluate_saved(cfg: &ExperimentConfig) -> Result<(EvalReport, EvalReport)> {
    let data = prepare_data(cfg).map_err(|e| e.in_stage("data"))?;
    let ensemble =
        Ensemble::load(cfg.out_dir.join(ENSEMBLE_DIR)).map_err(|e| e.in_stage("load"))?;
    let gammas = GammaSet::load(cfg.out_dir.join(GAMMA_FILE)).map_err(|e| e.in_stage("load"))?;
    let (c, e, _) = evaluate(
        &cfg.dataset_name(),
        &ensemble,
        &gammas,
        &data.test,
        cfg.ratio_mode,
    )
    .map_err(|e| e.in_stage("eval"))?;
    Ok((c, e))
}

/// Four-panel figure for one-dimensional inputs: rows are the classical and
/// extended variants, columns the predictive and regression-function bands.
pub fn band_plot(dataset: &str, run: &RunResult) -> Result<String> {
    let test = &run.data.test;
    if test.p_x() != 1 || test.p_y() != 1 {
        return Err(Error::shape("band plots need scalar inputs and outputs"));
    }
    let norm = &run.data.norm;
    let (lo, hi) = test
        .inputs()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let grid_n = 200;
    let grid: Vec<f64> = (0..grid_n)
        .map(|k| lo + (hi - lo) * k as f64 / (grid_n - 1) as f64)
        .collect();
    let moments = point_moments(&run.ensemble, &run.gammas, &grid, grid_n)?;
    let raw_x = |x: &[f64]| -> Vec<f64> {
        match &norm.inputs {
            Some(s) => s.invert(x),
            None => x.to_vec(),
        }
    };
    let gx = raw_x(&grid);
    let tx = raw_x(test.inputs());
    let ty = norm.invert_targets(test.targets());
    let truth = test.ground_truth().map(|g| norm.invert_targets(g));
    let mean: Vec<f64> = norm.invert_targets(
        &moments
            .iter()
            .map(|m| m.regression_classical.mean[0])
            .collect::<Vec<_>>(),
    );

    let mut panels = Vec::new();
    for (variant, title) in [
        (Variant::Classical, "classical"),
        (Variant::Extended, "extended"),
    ] {
        for predictive in [true, false] {
            let sd: Vec<f64> = moments
                .iter()
                .map(|m| {
                    let pair = match (variant, predictive) {
                        (Variant::Classical, true) => &m.predictive_classical,
                        (Variant::Classical, false) => &m.regression_classical,
                        (Variant::Extended, true) => &m.predictive_extended,
                        (Variant::Extended, false) => &m.regression_extended,
                    };
                    norm.invert_variance(pair.cov[0], 0).sqrt()
                })
                .collect();
            let report = match variant {
                Variant::Classical => &run.classical,
                Variant::Extended => &run.extended,
            };
            let cp = if predictive {
                report.total_coverage
            } else {
                report.truth_coverage.unwrap_or(report.epistemic_coverage)
            };
            let mut series = vec![Series::Band {
                x: gx.clone(),
                lo: mean.iter().zip(&sd).map(|(m, s)| m - 1.96 * s).collect(),
                hi: mean.iter().zip(&sd).map(|(m, s)| m + 1.96 * s).collect(),
                color: "#1f77b4",
                label: if predictive {
                    "total 95% band".into()
                } else {
                    "epistemic 95% band".into()
                },
            }];
            if predictive {
                series.push(Series::Points {
                    x: tx.clone(),
                    y: ty.clone(),
                    color: "#d62728",
                    label: "test data".into(),
                });
            }
            if let Some(t) = &truth {
                let mut pts: Vec<(f64, f64)> = tx.iter().copied().zip(t.iter().copied()).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                series.push(Series::Line {
                    x: pts.iter().map(|p| p.0).collect(),
                    y: pts.iter().map(|p| p.1).collect(),
                    color: "#d62728",
                    dashed: true,
                    label: "ground truth".into(),
                });
            }
            series.push(Series::Line {
                x: gx.clone(),
                y: mean.clone(),
                color: "#1f77b4",
                dashed: false,
                label: "ensemble mean".into(),
            });
            panels.push(Panel {
                title: format!(
                    "{dataset} {title} {} (cp {:.1}%, rmse {:.3})",
                    if predictive {
                        "predictive"
                    } else {
                        "regression"
                    },
                    100.0 * cp,
                    report.rmse
                ),
                x_label: "x".into(),
                y_label: "y".into(),
                series,
                y_range: None,
            });
        }
    }
    Ok(render_grid(&panels, 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TrainSize,
    EnsembleSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train_size" => Ok(Self::TrainSize),
            "ensemble_size" => Ok(Self::EnsembleSize),
            other => Err(Error::config(format!("unknown sweep axis `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TrainSize => "train_size",
            Self::EnsembleSize => "ensemble_size",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: usize,
    pub outcome: std::result::Result<(EvalReport, EvalReport), String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// Config of one sweep entry.
pub fn sweep_config(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    value: usize,
) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::TrainSize => c.set("n_train", &value.to_string())?,
        SweepAxis::EnsembleSize => c.members = value,
    }
    Ok(c)
}

/// Run one experiment per value. Failures are recorded per value.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("sweep values must be strictly ascending"));
    }
    let configs = values
        .iter()
        .map(|&v| sweep_config(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let points = with_threads(cfg.threads, || {
        Ok(configs
            .par_iter()
            .zip(values)
            .map(|(c, &value)| SweepPoint {
                value,
                outcome: run_pipeline(c)
                    .map(|r| (r.classical, r.extended))
                    .map_err(|e| e.to_string()),
            })
            .collect())
    })?;
    Ok(SweepResult { axis, points })
}

impl SweepResult {
    /// Tab-separated table, one row per value and variant.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{}\tvariant\trmse\tepistemic_cov\ttotal_cov\tratio\ttruth_cov\ttruth_rmse\tstatus\n",
            self.axis.as_str()
        );
        let opt = |v: Option<f64>| v.map_or("na".to_string(), |v| format!("{v:.6}"));
        for p in &self.points {
            match &p.outcome {
                Ok((c, e)) => {
                    for r in [c, e] {
                        let _ = writeln!(
                            s,
                            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\tok",
                            p.value,
                            r.variant,
                            r.rmse,
                            r.epistemic_coverage,
                            r.total_coverage,
                            r.variance_ratio,
                            opt(r.truth_coverage),
                            opt(r.truth_rmse)
                        );
                    }
                }
                Err(msg) => {
                    let _ = writeln!(
                        s,
                        "{}\tna\tna\tna\tna\tna\tna\tna\terror: {}",
                        p.value,
                        msg.replace(['\t', '\n'], " ")
                    );
                }
            }
        }
        s
    }

    /// Coverage-vs-axis and rmse-vs-axis panels.
    pub fn plot(&self) -> String {
        let ok: Vec<(f64, &EvalReport, &EvalReport)> = self
            .points
            .iter()
            .filter_map(|p| p.outcome.as_ref().ok().map(|(c, e)| (p.value as f64, c, e)))
            .collect();
        let xs: Vec<f64> = ok.iter().map(|p| p.0).collect();
        let cov = |r: &EvalReport| r.truth_coverage.unwrap_or(r.epistemic_coverage);
        let panels = [
            Panel {
                title: "epistemic coverage".into(),
                x_label: self.axis.as_str().into(),
                y_label: "coverage".into(),
                series: vec![
                    Series::Line {
                        x: xs.clone(),
                        y: ok.iter().map(|p| cov(p.1)).collect(),
                        color: "#7f7f7f",
                        dashed: true,
                        label: "classical".into(),
                    },
                    Series::Line {
                        x: xs.clone(),
                        y: ok.iter().map(|p| cov(p.2)).collect(),
                        color: "#1f77b4",
                        dashed: false,
                        label: "extended".into(),
                    },
                ],
                y_range: Some((0.0, 1.05)),
            },
            Panel {
                title: "rmse".into(),
                x_label: self.axis.as_str().into(),
                y_label: "rmse".into(),
                series: vec![Series::Line {
                    x: xs,
                    y: ok.iter().map(|p| p.1.rmse).collect(),
                    color: "#1f77b4",
                    dashed: false,
                    label: "both variants".into(),
                }],
                y_range: None,
            },
        ];
        render_grid(&panels, 2)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let t = dir.join(format!("sweep_{}.tsv", self.axis.as_str()));
        let p = dir.join(format!("sweep_{}.svg", self.axis.as_str()));
        write(&t, &self.table())?;
        write(&p, &self.plot())?;
        Ok((t, p))
    }
}
