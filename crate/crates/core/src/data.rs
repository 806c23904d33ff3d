//! Synthetic multi-task Gaussian suites, CSV ingest/export, and batch cursors.
//!
//! The generated suites are a desk-scale stand-in for real multi-task
//! benchmarks: each task draws its own `C` class means on the radius-3 sphere
//! in `R^d` and samples unit-variance Gaussians around them.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::summary::Summary;
use crate::tensor::Tensor;

pub const MEAN_RADIUS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × d`, one sample per row.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(invalid("features must be a matrix"));
        }
        if features.rows() != labels.len() {
            return Err(invalid(format!("{} rows but {} labels", features.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self { features, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Inputs laid out `d × N` (one sample per column), as the network consumes them.
    pub fn inputs(&self) -> Tensor {
        self.features.transpose()
    }

    /// The first `count` samples.
    pub fn head(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        let idx: Vec<usize> = (0..count).collect();
        Dataset {
            features: self.features.transpose().select_columns(&idx).transpose(),
            labels: self.labels[..count].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// `C × d` class means used for generation (empty when loaded from CSV).
    pub means: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteParams {
    pub seed: u64,
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub params: SuiteParams,
    pub tasks: Vec<TaskData>,
    /// Task-agnostic pretraining mixture.
    pub mixture: Dataset,
}

impl TaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn test_sets(&self) -> Vec<&Dataset> {
        self.tasks.iter().map(|t| &t.test).collect()
    }

    pub fn val_sets(&self) -> Vec<&Dataset> {
        self.tasks.iter().map(|t| &t.val).collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn draw(rng: &mut ChaCha8Rng, means: &[Vec<f64>], n: usize, split: Split) -> Result<Dataset> {
    let c = means.len();
    let d = means[0].len();
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..c);
        let noise = gaussian_vec(rng, d);
        feats.extend(means[y].iter().zip(noise).map(|(m, e)| (m + e) as f32));
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, d], feats)?, labels, c, split)
}

/// Generates a deterministic task suite; identical arguments give identical bytes.
pub fn gen_task_suite(
    seed: u64,
    tasks: usize,
    dim: usize,
    classes: usize,
    n_train: usize,
    n_test: usize,
) -> Result<TaskSuite> {
    if tasks == 0 || n_train == 0 || n_test == 0 {
        return Err(invalid("tasks, n_train and n_test must be positive"));
    }
    if dim < 2 || classes < 2 {
        return Err(invalid("dim and classes must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut task_means = Vec::with_capacity(tasks);
    let mut out = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let v = gaussian_vec(&mut rng, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * MEAN_RADIUS / norm).collect()
            })
            .collect();
        let train = draw(&mut rng, &means, n_train, Split::Train)?;
        let val = draw(&mut rng, &means, n_test, Split::Validation)?;
        let test = draw(&mut rng, &means, n_test, Split::Test)?;
        let flat: Vec<f32> = means.iter().flatten().map(|&v| v as f32).collect();
        out.push(TaskData { train, val, test, means: Some(Tensor::new(vec![classes, dim], flat)?) });
        task_means.push(means);
    }

    // Equal-count union of fresh draws from every task's training distribution.
    let mut feats = Vec::with_capacity(tasks * n_train * dim);
    for _ in 0..n_train {
        for means in &task_means {
            let y = rng.random_range(0..classes);
            let noise = gaussian_vec(&mut rng, dim);
            feats.extend(means[y].iter().zip(noise).map(|(m, e)| (m + e) as f32));
        }
    }
    let m = tasks * n_train;
    let features = Tensor::new(vec![m, dim], feats)?;
    let labels = quantize_first_coordinate(&features, classes);
    let mixture = Dataset::new(features, labels, classes, Split::Train)?;

    Ok(TaskSuite { params: SuiteParams { seed, tasks, dim, classes, n_train, n_test }, tasks: out, mixture })
}

/// Equal-frequency bins of feature 0; rank ties broken by row order.
fn quantize_first_coordinate(features: &Tensor, classes: usize) -> Vec<usize> {
    let n = features.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| features.at(a, 0).total_cmp(&features.at(b, 0)).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * classes / n;
    }
    labels
}

/// How the label column of a CSV is interpreted.
#[derive(Clone, Copy, Debug)]
pub enum LabelMode {
    /// Remap to `0..C` in order of first appearance.
    Dense,
    /// Keep the integer values; all must be below `classes`.
    Raw { classes: usize },
}

/// Loads a CSV with a header row; every column other than `label_column` is a feature.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    load_csv_with(path, label_column, LabelMode::Dense, Split::Test)
}

pub fn load_csv_with(path: impl AsRef<Path>, label_column: &str, mode: LabelMode, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Csv(format!("missing column {label_column:?}")))?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(Error::Csv("no feature columns".into()));
    }

    let mut feats = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if col == label_idx {
                let y: i64 =
                    cell.parse().map_err(|_| Error::Csv(format!("row {}: non-integer label {cell:?}", row + 1)))?;
                raw_labels.push(y);
            } else {
                let v: f32 =
                    cell.parse().map_err(|_| Error::Csv(format!("row {}: non-numeric cell {cell:?}", row + 1)))?;
                feats.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let (labels, classes) = match mode {
        LabelMode::Dense => {
            let mut map: HashMap<i64, usize> = HashMap::new();
            let labels: Vec<usize> = raw_labels
                .iter()
                .map(|y| {
                    let next = map.len();
                    *map.entry(*y).or_insert(next)
                })
                .collect();
            (labels, map.len())
        }
        LabelMode::Raw { classes } => {
            let labels = raw_labels
                .iter()
                .map(|&y| {
                    usize::try_from(y)
                        .ok()
                        .filter(|&y| y < classes)
                        .ok_or_else(|| Error::Csv(format!("label {y} outside 0..{classes}")))
                })
                .collect::<Result<Vec<_>>>()?;
            (labels, classes)
        }
    };
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, d], feats)?, labels, classes, split)
}

/// Writes `f0..f{d-1},label` with shortest round-trip float text.
pub fn export_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Csv(e.to_string()))?;
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for (i, &y) in ds.labels.iter().enumerate() {
        let mut row: Vec<String> = (0..d).map(|j| format!("{}", ds.features.at(i, j))).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a suite as CSV files plus `suite.txt`.
pub fn save_suite(suite: &TaskSuite, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (t, task) in suite.tasks.iter().enumerate() {
        for ds in [&task.train, &task.val, &task.test] {
            export_csv(ds, dir.join(format!("task{t}_{}.csv", ds.split.as_str())))?;
        }
    }
    export_csv(&suite.mixture, dir.join("mixture.csv"))?;
    let p = &suite.params;
    let mut s = Summary::new();
    s.push("seed", p.seed);
    s.push("tasks", p.tasks);
    s.push("dim", p.dim);
    s.push("classes", p.classes);
    s.push("n_train", p.n_train);
    s.push("n_test", p.n_test);
    s.write(dir.join("suite.txt"))
}

pub fn load_suite(dir: impl AsRef<Path>) -> Result<TaskSuite> {
    let dir = dir.as_ref();
    let s = Summary::read(dir.join("suite.txt"))?;
    let params = SuiteParams {
        seed: s.parse("seed")?,
        tasks: s.parse("tasks")?,
        dim: s.parse("dim")?,
        classes: s.parse("classes")?,
        n_train: s.parse("n_train")?,
        n_test: s.parse("n_test")?,
    };
    let mode = LabelMode::Raw { classes: params.classes };
    let mut tasks = Vec::with_capacity(params.tasks);
    for t in 0..params.tasks {
        let load =
            |split: Split| load_csv_with(dir.join(format!("task{t}_{}.csv", split.as_str())), "label", mode, split);
        tasks.push(TaskData {
            train: load(Split::Train)?,
            val: load(Split::Validation)?,
            test: load(Split::Test)?,
            means: None,
        });
    }
    let mixture = load_csv_with(dir.join("mixture.csv"), "label", mode, Split::Train)?;
    Ok(TaskSuite { params, tasks, mixture })
}

/// Sequential batches over `0..n` in order, wrapping around; the last batch of
/// each pass may be short.
#[derive(Clone, Debug)]
pub struct SequentialBatches {
    n: usize,
    batch: usize,
    pos: usize,
}

impl SequentialBatches {
    pub fn new(n: usize, batch: usize) -> Self {
        Self { n, batch: batch.max(1), pos: 0 }
    }

    pub fn batches_per_pass(&self) -> usize {
        self.n.div_ceil(self.batch)
    }
}

impl Iterator for SequentialBatches {
    type Item = Range<usize>;

    fn next(&mut self) -> Option<Range<usize>> {
        if self.n == 0 {
            return None;
        }
        let start = self.pos;
        let end = (start + self.batch).min(self.n);
        self.pos = if end == self.n { 0 } else { end };
        Some(start..end)
    }
}

/// Shuffled mini-batches, reshuffled each epoch from the caller's RNG.
#[derive(Debug)]
pub struct ShuffledBatches {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl ShuffledBatches {
    pub fn new(n: usize, batch: usize) -> Self {
        Self { order: (0..n).collect(), batch: batch.max(1).min(n.max(1)), pos: n }
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let s = self.pos;
        self.pos += self.batch;
        &self.order[s..s + self.batch]
    }
}
