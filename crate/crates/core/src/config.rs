//! Run configuration: defaults, overridden by a flat `key = value` file,
//! overridden by command-line flags. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bias::LossKind;
use crate::error::{Error, Result};
use crate::merge::MergeAlgorithm;
use crate::nn::{join_dims, parse_dims, AdamConfig, ModelSpec, TrainConfig};
use crate::summary::Summary;
use crate::surgery::{GradientMode, SurgeryMode};

pub const THREADS_ENV: &str = "MERGE_SURGEON_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the suite whose test inputs serve as wild data.
    pub wild_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            batch: self.batch,
            iterations: self.iterations,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Pick from `merge.grid` by validation accuracy.
    Grid,
}

impl fmt::Display for LambdaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaChoice::Fixed(v) => write!(f, "{v}"),
            LambdaChoice::Grid => f.write_str("grid"),
        }
    }
}

impl FromStr for LambdaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "grid" {
            return Ok(LambdaChoice::Grid);
        }
        s.parse()
            .map(LambdaChoice::Fixed)
            .map_err(|_| Error::Config(format!("lambda must be a number or grid, got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeSettings {
    pub algorithm: MergeAlgorithm,
    pub lambda: LambdaChoice,
    pub grid: Vec<f64>,
    pub keep: f64,
    pub ada_iterations: usize,
}

/// Where surgery gets its unlabeled inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum DataRegime {
    /// Each task's own test inputs.
    Test,
    /// Test inputs of another suite; `None` means the one generated from
    /// `suite.wild_seed` inside the run directory.
    Wild(Option<PathBuf>),
    /// Single pass over the first fraction of the test inputs.
    Stream(f64),
}

impl fmt::Display for DataRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataRegime::Test => f.write_str("test"),
            DataRegime::Wild(None) => f.write_str("wild"),
            DataRegime::Wild(Some(p)) => write!(f, "wild:{}", p.display()),
            DataRegime::Stream(frac) => write!(f, "stream:{frac}"),
        }
    }
}

impl FromStr for DataRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(DataRegime::Test),
            "wild" => Ok(DataRegime::Wild(None)),
            _ => {
                if let Some(p) = s.strip_prefix("wild:") {
                    return Ok(DataRegime::Wild(Some(PathBuf::from(p))));
                }
                if let Some(f) = s.strip_prefix("stream:") {
                    let frac: f64 = f.parse().map_err(|_| Error::Config(format!("bad stream fraction {f:?}")))?;
                    return Ok(DataRegime::Stream(frac));
                }
                Err(Error::Config(format!("unknown data regime {s:?}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgerySettings {
    pub modes: Vec<SurgeryMode>,
    pub psi: LossKind,
    pub rank: usize,
    pub train: TrainSettings,
    pub gradient: GradientMode,
    pub data: DataRegime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub suite: SuiteConfig,
    pub dims: Vec<usize>,
    pub train: TrainSettings,
    pub merge: MergeSettings,
    pub surgery: SurgerySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            seed: 42,
            suite: SuiteConfig { tasks: 4, dim: 16, classes: 5, n_train: 1000, n_test: 1000, wild_seed: 7 },
            dims: vec![32, 32, 32, 32, 32, 16],
            train: TrainSettings { lr: 1e-3, batch: 16, iterations: 1000 },
            merge: MergeSettings {
                algorithm: MergeAlgorithm::TaskArithmetic,
                lambda: LambdaChoice::Grid,
                grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
                keep: 0.2,
                ada_iterations: 200,
            },
            surgery: SurgerySettings {
                modes: vec![SurgeryMode::LastLayerOnly, SurgeryMode::AllLayers],
                psi: LossKind::L1,
                rank: 16,
                train: TrainSettings { lr: 1e-3, batch: 16, iterations: 1000 },
                gradient: GradientMode::BlockCoordinate,
                data: DataRegime::Test,
            },
        }
    }
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("invalid list item for {key}: {p:?}"))))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("invalid value for {key}: {raw:?}")))
}

impl RunConfig {
    /// Applies one assignment; the single place that knows every key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "run_dir" => self.run_dir = PathBuf::from(raw),
            "seed" => self.seed = value(key, raw)?,
            "suite.tasks" => self.suite.tasks = value(key, raw)?,
            "suite.dim" => self.suite.dim = value(key, raw)?,
            "suite.classes" => self.suite.classes = value(key, raw)?,
            "suite.n_train" => self.suite.n_train = value(key, raw)?,
            "suite.n_test" => self.suite.n_test = value(key, raw)?,
            "suite.wild_seed" => self.suite.wild_seed = value(key, raw)?,
            "model.dims" => self.dims = parse_dims(raw).map_err(|e| Error::Config(e.to_string()))?,
            "train.lr" => self.train.lr = value(key, raw)?,
            "train.batch" => self.train.batch = value(key, raw)?,
            "train.iterations" => self.train.iterations = value(key, raw)?,
            "merge.algorithm" => self.merge.algorithm = raw.parse()?,
            "merge.lambda" => self.merge.lambda = raw.parse()?,
            "merge.grid" => self.merge.grid = list(key, raw)?,
            "merge.keep" => self.merge.keep = value(key, raw)?,
            "merge.ada_iterations" => self.merge.ada_iterations = value(key, raw)?,
            "surgery.modes" => self.surgery.modes = list(key, raw)?,
            "surgery.psi" => self.surgery.psi = value(key, raw)?,
            "surgery.rank" => self.surgery.rank = value(key, raw)?,
            "surgery.lr" => self.surgery.train.lr = value(key, raw)?,
            "surgery.batch" => self.surgery.train.batch = value(key, raw)?,
            "surgery.iterations" => self.surgery.train.iterations = value(key, raw)?,
            "surgery.gradient" => self.surgery.gradient = value(key, raw)?,
            "surgery.data" => self.surgery.data = raw.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, summary: &Summary) -> Result<()> {
        for (k, v) in summary.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults overridden by the file at `path`; validated.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&Summary::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_summary(&self) -> Summary {
        let mut s = Summary::new();
        s.push("run_dir", self.run_dir.display());
        s.push("seed", self.seed);
        s.push("suite.tasks", self.suite.tasks);
        s.push("suite.dim", self.suite.dim);
        s.push("suite.classes", self.suite.classes);
        s.push("suite.n_train", self.suite.n_train);
        s.push("suite.n_test", self.suite.n_test);
        s.push("suite.wild_seed", self.suite.wild_seed);
        s.push("model.dims", join_dims(&self.dims));
        s.push("train.lr", self.train.lr);
        s.push("train.batch", self.train.batch);
        s.push("train.iterations", self.train.iterations);
        s.push("merge.algorithm", self.merge.algorithm);
        s.push("merge.lambda", self.merge.lambda);
        s.push("merge.grid", join(&self.merge.grid));
        s.push("merge.keep", self.merge.keep);
        s.push("merge.ada_iterations", self.merge.ada_iterations);
        s.push("surgery.modes", join(&self.surgery.modes));
        s.push("surgery.psi", self.surgery.psi);
        s.push("surgery.rank", self.surgery.rank);
        s.push("surgery.lr", self.surgery.train.lr);
        s.push("surgery.batch", self.surgery.train.batch);
        s.push("surgery.iterations", self.surgery.train.iterations);
        s.push("surgery.gradient", self.surgery.gradient);
        s.push("surgery.data", &self.surgery.data);
        s
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.suite.dim, self.dims.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let s = &self.suite;
        if s.tasks == 0 || s.n_train == 0 || s.n_test == 0 {
            return bad("suite.tasks, suite.n_train and suite.n_test must be positive".into());
        }
        if s.dim < 2 || s.classes < 2 {
            return bad("suite.dim and suite.classes must be at least 2".into());
        }
        let spec = self.model_spec().map_err(|e| Error::Config(e.to_string()))?;
        self.train.to_train_config(0).validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.surgery.train.to_train_config(0).validate().map_err(|e| Error::Config(format!("surgery: {e}")))?;
        if self.merge.grid.is_empty() {
            return bad("merge.grid must not be empty".into());
        }
        if !(self.merge.keep > 0.0 && self.merge.keep <= 1.0) {
            return bad(format!("merge.keep must lie in (0,1], got {}", self.merge.keep));
        }
        if self.merge.ada_iterations == 0 {
            return bad("merge.ada_iterations must be at least 1".into());
        }
        if self.surgery.rank == 0 {
            return bad("surgery.rank must be at least 1".into());
        }
        if self.surgery.modes.is_empty() {
            return bad("surgery.modes must not be empty".into());
        }
        for m in &self.surgery.modes {
            m.validate(spec.num_layers()).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let DataRegime::Stream(f) = self.surgery.data {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("stream fraction must lie in (0,1], got {f}"));
            }
        }
        Ok(())
    }
}

/// Sizes the global worker pool from `MERGE_SURGEON_THREADS` (0 or unset
/// means one worker per core). Returns the worker count in effect.
pub fn configure_threads() -> Result<usize> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be an integer, got {v:?}")))?,
        Err(_) => 0,
    };
    // A pool that is already built (tests, repeated calls) is left as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(requested).build_global();
    Ok(rayon::current_num_threads())
}
