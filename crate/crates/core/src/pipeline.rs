//! Run-directory stages: gen, pretrain, finetune, merge, surgery, bias, eval,
//! report, and the full pipeline with its manifest.
//!
//! Layout under `run_dir`:
//! `suite/`, `spec.txt`, `pretrained.msrg`, `expert{t}.msrg`, `merged.msrg`,
//! `recipe.txt`, `surgery_{tag}.msrg` + `.txt`, `results.csv`, `bias_*.csv`, `surgery.csv`,
//! `config.txt`, `manifest.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::bias::{layerwise_bias_report, BiasReport, LossKind};
use crate::checkpoint::{load_paramset, save_paramset};
use crate::config::{DataRegime, LambdaChoice, RunConfig};
use crate::data::{gen_task_suite, load_suite, save_suite, TaskSuite};
use crate::error::{invalid, Error, Result};
use crate::eval::{accuracy, evaluate, predict, EvalResult};
use crate::merge::{
    ada_merge, collect_heads, grid_search_lambda, grid_search_with, task_arithmetic, ties_merge, weight_average,
    with_heads, AdaMergeConfig, GridSearchResult, MergeAlgorithm, MergeRecipe,
};
use crate::nn::{pretrain, train_expert, ModelSpec};
use crate::report::emit_report;
use crate::seed::derive_seed;
use crate::summary::Summary;
use crate::surgery::{
    gradient_divergence, stream_train_surgery, train_surgery, SurgeryConfig, SurgeryMode, SurgeryStack,
};
use crate::tensor::{ParamSet, Tensor};

pub const MANIFEST: &str = "manifest.txt";

/// File-name fragment for a surgery mode (`block:3` → `block3`).
pub fn mode_tag(mode: SurgeryMode) -> String {
    mode.to_string().replace(':', "")
}

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn suite(&self) -> PathBuf {
        self.root.join("suite")
    }

    pub fn spec(&self) -> PathBuf {
        self.root.join("spec.txt")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained.msrg")
    }

    pub fn expert(&self, task: usize) -> PathBuf {
        self.root.join(format!("expert{task}.msrg"))
    }

    pub fn merged(&self) -> PathBuf {
        self.root.join("merged.msrg")
    }

    pub fn recipe(&self) -> PathBuf {
        self.root.join("recipe.txt")
    }

    pub fn surgery(&self, mode: SurgeryMode) -> PathBuf {
        self.root.join(format!("surgery_{}.msrg", mode_tag(mode)))
    }

    pub fn surgery_summary(&self, mode: SurgeryMode) -> PathBuf {
        self.root.join(format!("surgery_{}.txt", mode_tag(mode)))
    }
}

fn paths(cfg: &RunConfig) -> RunPaths {
    RunPaths::new(&cfg.run_dir)
}

pub fn pretrain_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "pretrain")
}

pub fn expert_seed(cfg: &RunConfig, task: usize) -> u64 {
    derive_seed(cfg.seed, &format!("expert.{task}"))
}

pub fn ada_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "ada")
}

pub fn surgery_seed(cfg: &RunConfig, mode: SurgeryMode) -> u64 {
    derive_seed(cfg.seed, &format!("surgery.{mode}"))
}

pub fn stage_gen(cfg: &RunConfig) -> Result<TaskSuite> {
    let s = &cfg.suite;
    let suite = gen_task_suite(cfg.seed, s.tasks, s.dim, s.classes, s.n_train, s.n_test)?;
    save_suite(&suite, paths(cfg).suite())?;
    Ok(suite)
}

pub fn load_run_suite(cfg: &RunConfig) -> Result<TaskSuite> {
    load_suite(paths(cfg).suite())
}

pub fn load_spec(cfg: &RunConfig) -> Result<ModelSpec> {
    ModelSpec::from_summary(&Summary::read(paths(cfg).spec())?)
}

/// Returns the final mini-batch loss.
pub fn stage_pretrain(cfg: &RunConfig) -> Result<f64> {
    let suite = load_run_suite(cfg)?;
    let spec = cfg.model_spec()?;
    if spec.input_dim != suite.mixture.dim() {
        return Err(invalid(format!("model input {} but suite dim {}", spec.input_dim, suite.mixture.dim())));
    }
    let out = pretrain(&spec, &suite.mixture, &cfg.train.to_train_config(pretrain_seed(cfg)))?;
    let p = paths(cfg);
    save_paramset(&out.params, p.pretrained())?;
    spec.to_summary().write(p.spec())?;
    Ok(*out.losses.last().expect("iterations >= 1"))
}

/// Returns the expert's test accuracy on its own task.
pub fn stage_finetune(cfg: &RunConfig, task: usize) -> Result<f64> {
    let suite = load_run_suite(cfg)?;
    let data = suite.tasks.get(task).ok_or_else(|| invalid(format!("task {task} not in suite")))?;
    let spec = load_spec(cfg)?;
    let pre = load_paramset(paths(cfg).pretrained())?;
    let out = train_expert(&pre, &spec, task, &data.train, &cfg.train.to_train_config(expert_seed(cfg, task)))?;
    save_paramset(&out.params, paths(cfg).expert(task))?;
    let pred = predict(&out.params, &spec, None, &data.test.inputs(), task)?;
    Ok(accuracy(&pred, &data.test.labels))
}

pub fn load_experts(cfg: &RunConfig, tasks: usize) -> Result<Vec<ParamSet>> {
    (0..tasks).map(|t| load_paramset(paths(cfg).expert(t))).collect()
}

fn test_inputs(suite: &TaskSuite) -> Vec<Tensor> {
    suite.tasks.iter().map(|t| t.test.inputs()).collect()
}

pub struct MergeOutput {
    pub recipe: MergeRecipe,
    pub grid: Option<GridSearchResult>,
    /// Backbone plus every task head.
    pub merged: ParamSet,
}

pub fn merge_models(
    cfg: &RunConfig,
    suite: &TaskSuite,
    spec: &ModelSpec,
    pre: &ParamSet,
    experts: &[&ParamSet],
) -> Result<MergeOutput> {
    let m = &cfg.merge;
    let val = suite.val_sets();
    let mut grid = None;
    let (backbone, recipe) = match m.algorithm {
        MergeAlgorithm::WeightAverage => {
            let r = MergeRecipe { algorithm: m.algorithm, lambda: None, keep_fraction: None, coefficients: None };
            (weight_average(experts)?, r)
        }
        MergeAlgorithm::TaskArithmetic => {
            let lambda = match m.lambda {
                LambdaChoice::Fixed(v) => v,
                LambdaChoice::Grid => {
                    let g = grid_search_lambda(pre, experts, spec, &m.grid, &val)?;
                    let best = g.best;
                    grid = Some(g);
                    best
                }
            };
            let r =
                MergeRecipe { algorithm: m.algorithm, lambda: Some(lambda), keep_fraction: None, coefficients: None };
            (task_arithmetic(pre, experts, lambda)?, r)
        }
        MergeAlgorithm::TiesMerging => {
            let lambda = match m.lambda {
                LambdaChoice::Fixed(v) => v,
                LambdaChoice::Grid => {
                    let g = grid_search_with(experts, spec, &m.grid, &val, |l| ties_merge(pre, experts, l, m.keep))?;
                    let best = g.best;
                    grid = Some(g);
                    best
                }
            };
            let r = MergeRecipe {
                algorithm: m.algorithm,
                lambda: Some(lambda),
                keep_fraction: Some(m.keep),
                coefficients: None,
            };
            (ties_merge(pre, experts, lambda, m.keep)?, r)
        }
        MergeAlgorithm::AdaMerging => {
            let mut train = cfg.train.to_train_config(ada_seed(cfg));
            train.iterations = m.ada_iterations;
            let ada = AdaMergeConfig { train, ..AdaMergeConfig::default() };
            let out = ada_merge(pre, experts, spec, &test_inputs(suite), &ada)?;
            let r = MergeRecipe {
                algorithm: m.algorithm,
                lambda: None,
                keep_fraction: None,
                coefficients: Some(out.coefficients),
            };
            (out.merged, r)
        }
    };
    recipe.validate()?;
    Ok(MergeOutput { recipe, grid, merged: with_heads(&backbone, &collect_heads(experts)) })
}

pub fn stage_merge(cfg: &RunConfig) -> Result<MergeOutput> {
    let suite = load_run_suite(cfg)?;
    let spec = load_spec(cfg)?;
    let pre = load_paramset(paths(cfg).pretrained())?;
    let experts = load_experts(cfg, suite.num_tasks())?;
    let refs: Vec<&ParamSet> = experts.iter().collect();
    let out = merge_models(cfg, &suite, &spec, &pre, &refs)?;
    let p = paths(cfg);
    save_paramset(&out.merged, p.merged())?;
    let mut summary = out.recipe.to_summary();
    if let Some(g) = &out.grid {
        for (l, a) in &g.scores {
            summary.push(&format!("grid.{l}"), format!("{a:.6}"));
        }
    }
    summary.write(p.recipe())?;
    Ok(out)
}

/// Per-task unlabeled inputs for surgery under `regime`.
pub fn surgery_inputs(cfg: &RunConfig, suite: &TaskSuite, regime: &DataRegime) -> Result<Vec<Tensor>> {
    let wild = match regime {
        DataRegime::Test | DataRegime::Stream(_) => return Ok(test_inputs(suite)),
        DataRegime::Wild(Some(dir)) => load_suite(dir)?,
        DataRegime::Wild(None) => {
            let s = &cfg.suite;
            gen_task_suite(s.wild_seed, s.tasks, s.dim, s.classes, s.n_train, s.n_test)?
        }
    };
    if wild.num_tasks() != suite.num_tasks() || wild.mixture.dim() != suite.mixture.dim() {
        return Err(invalid("wild suite does not match the task count and input dimension"));
    }
    Ok(test_inputs(&wild))
}

pub fn surgery_config(cfg: &RunConfig, mode: SurgeryMode) -> SurgeryConfig {
    let s = &cfg.surgery;
    SurgeryConfig {
        train: s.train.to_train_config(surgery_seed(cfg, mode)),
        mode,
        psi: s.psi,
        rank: s.rank,
        gradient: s.gradient,
    }
}

pub fn fit_surgery(
    cfg: &RunConfig,
    suite: &TaskSuite,
    spec: &ModelSpec,
    merged: &ParamSet,
    experts: &[&ParamSet],
    mode: SurgeryMode,
) -> Result<(SurgeryStack, Vec<f64>)> {
    let inputs = surgery_inputs(cfg, suite, &cfg.surgery.data)?;
    let sc = surgery_config(cfg, mode);
    let out = match cfg.surgery.data {
        DataRegime::Stream(frac) => stream_train_surgery(merged, experts, spec, &inputs, frac, &sc)?,
        _ => train_surgery(merged, experts, spec, &inputs, &sc)?,
    };
    Ok((out.stack, out.losses))
}

pub fn stage_surgery(cfg: &RunConfig, mode: SurgeryMode) -> Result<Vec<f64>> {
    let suite = load_run_suite(cfg)?;
    let spec = load_spec(cfg)?;
    let p = paths(cfg);
    let merged = load_paramset(p.merged())?;
    let experts = load_experts(cfg, suite.num_tasks())?;
    let refs: Vec<&ParamSet> = experts.iter().collect();
    let (stack, losses) = fit_surgery(cfg, &suite, &spec, &merged, &refs, mode)?;
    save_paramset(&stack.to_paramset(), p.surgery(mode))?;
    let mut summary = stack.to_summary();
    summary.push("data", &cfg.surgery.data);
    summary.push("gradient", cfg.surgery.gradient);
    summary.push("steps", losses.len());
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        summary.push("loss.first", format!("{first:.9}"));
        summary.push("loss.last", format!("{last:.9}"));
    }
    let inputs = surgery_inputs(cfg, &suite, &cfg.surgery.data)?;
    let divergence = gradient_divergence(&merged, &refs, &spec, &stack, &inputs)?;
    summary.push("gradient.divergence", format!("{divergence:.6}"));
    summary.write(p.surgery_summary(mode))?;
    Ok(losses)
}

/// Loads a stored stack; ψ comes from its summary when present.
pub fn load_stack(path: impl AsRef<Path>, spec: &ModelSpec, default_psi: LossKind) -> Result<SurgeryStack> {
    let path = path.as_ref();
    let psi = match Summary::read(path.with_extension("txt")) {
        Ok(s) => s.parse("psi")?,
        Err(Error::Io(_)) => default_psi,
        Err(e) => return Err(e),
    };
    let stack = SurgeryStack::from_paramset(&load_paramset(path)?, spec.num_layers(), psi)?;
    stack.validate(spec)?;
    Ok(stack)
}

/// Bias name used in report file names, e.g. `ta` or `ta_v2`.
pub fn bias_name(algorithm: MergeAlgorithm, mode: Option<SurgeryMode>) -> String {
    match mode {
        Some(m) => format!("{algorithm}_{}", mode_tag(m)),
        None => algorithm.to_string(),
    }
}

struct Loaded {
    suite: TaskSuite,
    spec: ModelSpec,
    merged: ParamSet,
    experts: Vec<ParamSet>,
}

fn load_for_analysis(cfg: &RunConfig) -> Result<Loaded> {
    let suite = load_run_suite(cfg)?;
    let spec = load_spec(cfg)?;
    let merged = load_paramset(paths(cfg).merged())?;
    let experts = load_experts(cfg, suite.num_tasks())?;
    Ok(Loaded { suite, spec, merged, experts })
}

fn merge_label(cfg: &RunConfig) -> Result<MergeAlgorithm> {
    match Summary::read(paths(cfg).recipe()) {
        Ok(s) => s.parse("algorithm"),
        Err(Error::Io(_)) => Ok(cfg.merge.algorithm),
        Err(e) => Err(e),
    }
}

/// Bias of the merged model (optionally corrected by the stored `mode` stack)
/// on each task's test inputs; writes the two bias CSVs.
pub fn stage_bias(cfg: &RunConfig, psi: LossKind, mode: Option<SurgeryMode>) -> Result<BiasReport> {
    let l = load_for_analysis(cfg)?;
    let stack = match mode {
        Some(m) => Some(load_stack(paths(cfg).surgery(m), &l.spec, cfg.surgery.psi)?),
        None => None,
    };
    let refs: Vec<&ParamSet> = l.experts.iter().collect();
    let mut report = layerwise_bias_report(&l.merged, &refs, &l.spec, &test_inputs(&l.suite), psi, stack.as_ref())?;
    let name = bias_name(merge_label(cfg)?, mode);
    report.model = name.clone();
    let p = paths(cfg);
    fs::write(p.root.join(format!("bias_{name}.csv")), report.to_csv())?;
    fs::write(p.root.join(format!("bias_{name}_layers.csv")), report.layer_means_csv())?;
    Ok(report)
}

/// Individual experts, the merged model, and the merged model with each
/// stored stack in `modes`.
pub fn stage_eval(cfg: &RunConfig, modes: &[SurgeryMode]) -> Result<Vec<EvalResult>> {
    let l = load_for_analysis(cfg)?;
    let algo = merge_label(cfg)?.to_string();
    let tests = l.suite.test_sets();
    let individual = (0..tests.len())
        .map(|t| Ok(accuracy(&predict(&l.experts[t], &l.spec, None, &tests[t].inputs(), t)?, &tests[t].labels)))
        .collect::<Result<Vec<f64>>>()?;
    let mut results = vec![EvalResult::new("individual", None, individual)];
    results.push(evaluate(&algo, &l.merged, &l.spec, None, &tests)?);
    for &m in modes {
        let stack = load_stack(paths(cfg).surgery(m), &l.spec, cfg.surgery.psi)?;
        results.push(evaluate(&algo, &l.merged, &l.spec, Some((&m.to_string(), &stack)), &tests)?);
    }
    Ok(results)
}

/// Evaluates everything and writes `results.csv` plus ψ-bias CSVs for the
/// merged model and each stack. Returns the written file names.
pub fn stage_report(cfg: &RunConfig, modes: &[SurgeryMode]) -> Result<Vec<String>> {
    let results = stage_eval(cfg, modes)?;
    let l = load_for_analysis(cfg)?;
    let algo = merge_label(cfg)?;
    let inputs = test_inputs(&l.suite);
    let refs: Vec<&ParamSet> = l.experts.iter().collect();
    let mut names = vec![bias_name(algo, None)];
    let mut reports = vec![layerwise_bias_report(&l.merged, &refs, &l.spec, &inputs, cfg.surgery.psi, None)?];
    for &m in modes {
        let stack = load_stack(paths(cfg).surgery(m), &l.spec, cfg.surgery.psi)?;
        names.push(bias_name(algo, Some(m)));
        reports.push(layerwise_bias_report(&l.merged, &refs, &l.spec, &inputs, cfg.surgery.psi, Some(&stack))?);
    }
    for (r, n) in reports.iter_mut().zip(&names) {
        r.model = n.clone();
    }
    let bias: Vec<(&str, &BiasReport)> = names.iter().map(|n| n.as_str()).zip(reports.iter()).collect();
    let mut written = emit_report(&cfg.run_dir, &results, &bias)?;
    if !modes.is_empty() {
        let mut csv = String::from("mode,psi,gradient,steps,loss_first,loss_last,gradient_divergence\n");
        for &m in modes {
            let s = Summary::read(paths(cfg).surgery_summary(m))?;
            let field = |k: &str| s.get(k).unwrap_or("").to_string();
            csv.push_str(&format!(
                "{m},{},{},{},{},{},{}\n",
                field("psi"),
                field("gradient"),
                field("steps"),
                field("loss.first"),
                field("loss.last"),
                field("gradient.divergence")
            ));
        }
        fs::write(cfg.run_dir.join("surgery.csv"), csv)?;
        written.push("surgery.csv".to_string());
    }
    Ok(written)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).map_err(|_| invalid("path outside run directory"))?;
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(rel.join("/"));
        }
    }
    Ok(())
}

/// Resolved config, derived seeds and the sha256 of every file in the run
/// directory. Contains no timestamps or absolute paths.
pub fn build_manifest(cfg: &RunConfig) -> Result<Summary> {
    let mut m = Summary::new();
    m.push("tool", concat!("merge-surgeon ", env!("CARGO_PKG_VERSION")));
    for (k, v) in cfg.to_summary().iter() {
        if k != "run_dir" {
            m.push(&format!("config.{k}"), v);
        }
    }
    m.push("seed.pretrain", pretrain_seed(cfg));
    for t in 0..cfg.suite.tasks {
        m.push(&format!("seed.expert.{t}"), expert_seed(cfg, t));
    }
    if cfg.merge.algorithm == MergeAlgorithm::AdaMerging {
        m.push("seed.ada", ada_seed(cfg));
    }
    for &mode in &cfg.surgery.modes {
        m.push(&format!("seed.surgery.{mode}"), surgery_seed(cfg, mode));
    }
    let mut files = Vec::new();
    collect_files(&cfg.run_dir, &cfg.run_dir, &mut files)?;
    files.retain(|f| f != MANIFEST);
    files.sort();
    for f in files {
        let bytes = fs::read(cfg.run_dir.join(&f))?;
        m.push(&format!("file.{f}"), sha256_hex(&bytes));
    }
    Ok(m)
}

/// Runs every stage in order and writes `config.txt` and `manifest.txt`.
/// `progress` receives one line per finished stage.
pub fn run_pipeline(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.run_dir)?;
    let mut written = cfg.to_summary();
    written.push("run_dir", ".");
    written.write(cfg.run_dir.join("config.txt"))?;
    stage_gen(cfg)?;
    progress("gen: suite written");
    let loss = stage_pretrain(cfg)?;
    progress(&format!("pretrain: final loss {loss:.4}"));
    for t in 0..cfg.suite.tasks {
        let acc = stage_finetune(cfg, t)?;
        progress(&format!("finetune: task {t} test accuracy {:.2}", 100.0 * acc));
    }
    let merged = stage_merge(cfg)?;
    progress(&format!("merge: {}", merged.recipe.to_summary().render().trim_end().replace('\n', "; ")));
    for &mode in &cfg.surgery.modes {
        let losses = stage_surgery(cfg, mode)?;
        let first = losses.first().copied().unwrap_or(f64::NAN);
        let last = losses.last().copied().unwrap_or(f64::NAN);
        progress(&format!("surgery {mode}: loss {first:.4} -> {last:.4}"));
    }
    let files = stage_report(cfg, &cfg.surgery.modes)?;
    progress(&format!("report: {}", files.join(", ")));
    let manifest = build_manifest(cfg)?;
    manifest.write(cfg.run_dir.join(MANIFEST))?;
    progress("manifest written");
    Ok(manifest)
}
