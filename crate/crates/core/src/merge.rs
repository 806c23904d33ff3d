//! Merging rules that build one multi-task backbone from a shared pretrained
//! backbone and per-task experts: weight averaging, task arithmetic,
//! Ties-Merging and layer-wise AdaMerging.
//!
//! Only backbone entries (`block{l}.*`) are merged. Heads stay per task.
//! All arithmetic runs in `f64` and is rounded to `f32` once per value, so
//! `Θ₀ + 1·(Θₜ − Θ₀)` reproduces `Θₜ` exactly.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ShuffledBatches};
use crate::error::{invalid, shape_err, Error, Result};
use crate::eval::mean_accuracy;
use crate::nn::{backprop_grads, LossSignal, ModelSpec, TrainConfig};
use crate::seed::derive_seed;
use crate::summary::Summary;
use crate::tensor::{block_bias, block_weight, is_backbone_name, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeAlgorithm {
    WeightAverage,
    TaskArithmetic,
    TiesMerging,
    AdaMerging,
}

impl MergeAlgorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeAlgorithm::WeightAverage => "avg",
            MergeAlgorithm::TaskArithmetic => "ta",
            MergeAlgorithm::TiesMerging => "ties",
            MergeAlgorithm::AdaMerging => "ada",
        }
    }
}

impl fmt::Display for MergeAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(MergeAlgorithm::WeightAverage),
            "ta" => Ok(MergeAlgorithm::TaskArithmetic),
            "ties" => Ok(MergeAlgorithm::TiesMerging),
            "ada" => Ok(MergeAlgorithm::AdaMerging),
            other => Err(Error::UnknownAlgorithm(other.to_string())),
        }
    }
}

/// Which values compete for the Ties trim budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrimScope {
    /// Top-k over the whole task vector.
    #[default]
    Global,
    /// Top-k separately inside every tensor.
    PerTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeRecipe {
    pub algorithm: MergeAlgorithm,
    pub lambda: Option<f64>,
    pub keep_fraction: Option<f64>,
    /// AdaMerging output, indexed `[layer - 1][task]`.
    pub coefficients: Option<Vec<Vec<f64>>>,
}

impl MergeRecipe {
    pub fn validate(&self) -> Result<()> {
        match self.algorithm {
            MergeAlgorithm::TaskArithmetic if self.lambda.is_none() => Err(invalid("task arithmetic needs lambda")),
            MergeAlgorithm::TiesMerging => {
                if self.lambda.is_none() {
                    return Err(invalid("ties needs lambda"));
                }
                check_keep(self.keep_fraction.ok_or_else(|| invalid("ties needs keep fraction"))?)
            }
            _ => Ok(()),
        }
    }

    pub fn to_summary(&self) -> Summary {
        let mut s = Summary::new();
        s.push("algorithm", self.algorithm);
        if let Some(l) = self.lambda {
            s.push("lambda", l);
        }
        if let Some(k) = self.keep_fraction {
            s.push("keep_fraction", k);
        }
        if let Some(c) = &self.coefficients {
            for (l, row) in c.iter().enumerate() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
                s.push(&format!("coeff.layer{}", l + 1), vals.join(","));
            }
        }
        s
    }
}

fn check_keep(keep: f64) -> Result<()> {
    if keep > 0.0 && keep <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("keep fraction must lie in (0,1], got {keep}")))
    }
}

/// `Θₜ − Θ₀` over backbone entries.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector(pub ParamSet);

pub fn task_vector(pretrained: &ParamSet, expert: &ParamSet) -> Result<TaskVector> {
    let base = pretrained.backbone();
    base.require_compatible(&expert.backbone())?;
    let mut out = ParamSet::new();
    for (name, b) in base.iter() {
        let e = expert.require(name)?;
        out.set(name, e.zip_map(b, |x, y| (x as f64 - y as f64) as f32)?);
    }
    Ok(TaskVector(out))
}

fn check_experts(pretrained: Option<&ParamSet>, experts: &[&ParamSet]) -> Result<ParamSet> {
    let first = experts.first().ok_or_else(|| invalid("at least one expert is required"))?;
    let reference = match pretrained {
        Some(p) => p.backbone(),
        None => first.backbone(),
    };
    if reference.is_empty() {
        return Err(invalid("no backbone parameters to merge"));
    }
    for e in experts {
        if !reference.shape_compatible(&e.backbone()) {
            return Err(shape_err("expert backbone is not shape-compatible"));
        }
    }
    Ok(reference)
}

/// Builds `out[name][i] = f(name, i)` over the reference layout.
fn build(reference: &ParamSet, mut f: impl FnMut(&str, usize) -> f64) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in reference.iter() {
        let data: Vec<f32> = (0..t.len()).map(|i| f(name, i) as f32).collect();
        out.set(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

fn value(p: &ParamSet, name: &str, i: usize) -> f64 {
    p.get(name).expect("checked compatible").data()[i] as f64
}

/// `(1/T) Σₜ Θₜ` over backbone entries.
pub fn weight_average(experts: &[&ParamSet]) -> Result<ParamSet> {
    let reference = check_experts(None, experts)?;
    let t = experts.len() as f64;
    build(&reference, |name, i| experts.iter().map(|e| value(e, name, i)).sum::<f64>() / t)
}

/// `Θ₀ + λ Σₜ (Θₜ − Θ₀)` over backbone entries.
pub fn task_arithmetic(pretrained: &ParamSet, experts: &[&ParamSet], lambda: f64) -> Result<ParamSet> {
    let reference = check_experts(Some(pretrained), experts)?;
    build(&reference, |name, i| {
        let base = value(pretrained, name, i);
        base + lambda * experts.iter().map(|e| value(e, name, i) - base).sum::<f64>()
    })
}

/// Number of entries kept out of `n` for a keep fraction.
pub fn trim_count(n: usize, keep: f64) -> usize {
    ((keep * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Keeps the `k` largest-magnitude entries; equal magnitudes go to the lower index.
fn trim(values: &[f64], keep: f64) -> Vec<f64> {
    let k = trim_count(values.len(), keep);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; values.len()];
    for &i in &order[..k.min(values.len())] {
        out[i] = values[i];
    }
    out
}

/// Ties-Merging: trim each task vector, elect a sign per coordinate from the
/// sum of trimmed values, then average the trimmed values that agree with it.
pub fn ties_merge(pretrained: &ParamSet, experts: &[&ParamSet], lambda: f64, keep: f64) -> Result<ParamSet> {
    ties_merge_scoped(pretrained, experts, lambda, keep, TrimScope::Global)
}

pub fn ties_merge_scoped(
    pretrained: &ParamSet,
    experts: &[&ParamSet],
    lambda: f64,
    keep: f64,
    scope: TrimScope,
) -> Result<ParamSet> {
    check_keep(keep)?;
    let reference = check_experts(Some(pretrained), experts)?;
    let spans: Vec<(String, usize)> = reference.iter().map(|(n, t)| (n.to_string(), t.len())).collect();
    let base: Vec<f64> = spans
        .iter()
        .flat_map(|(n, len)| (0..*len).map(move |i| (n.clone(), i)))
        .map(|(n, i)| value(pretrained, &n, i))
        .collect();

    let trimmed: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| {
            let mut delta = Vec::with_capacity(base.len());
            for (n, len) in &spans {
                let t = e.require(n)?;
                let b = pretrained.require(n)?;
                delta.extend((0..*len).map(|i| t.data()[i] as f64 - b.data()[i] as f64));
            }
            Ok(match scope {
                TrimScope::Global => trim(&delta, keep),
                TrimScope::PerTensor => {
                    let mut out = Vec::with_capacity(delta.len());
                    let mut start = 0;
                    for (_, len) in &spans {
                        out.extend(trim(&delta[start..start + len], keep));
                        start += len;
                    }
                    out
                }
            })
        })
        .collect::<Result<_>>()?;

    let merged: Vec<f64> = (0..base.len())
        .map(|i| {
            let total: f64 = trimmed.iter().map(|tv| tv[i]).sum();
            if total == 0.0 {
                return base[i];
            }
            let sign = total.signum();
            let agreeing: Vec<f64> =
                trimmed.iter().map(|tv| tv[i]).filter(|v| v.signum() == sign && *v != 0.0).collect();
            let mean = agreeing.iter().sum::<f64>() / agreeing.len() as f64;
            base[i] + lambda * mean
        })
        .collect();

    let mut out = ParamSet::new();
    let mut start = 0;
    for (n, len) in &spans {
        let shape = reference.require(n)?.shape().to_vec();
        let data = merged[start..start + len].iter().map(|&v| v as f32).collect();
        out.set(n, Tensor::new(shape, data)?);
        start += len;
    }
    Ok(out)
}

/// Collects the `head.*` entries of every expert into one set.
pub fn collect_heads(experts: &[&ParamSet]) -> ParamSet {
    let mut heads = ParamSet::new();
    for e in experts {
        heads.extend_from(&e.filter(|n| n.starts_with("head.")));
    }
    heads
}

/// Backbone + every head, the shape evaluation and the CLI work with.
pub fn with_heads(backbone: &ParamSet, heads: &ParamSet) -> ParamSet {
    let mut p = backbone.clone();
    p.extend_from(heads);
    p
}

#[derive(Clone, Debug)]
pub struct GridSearchResult {
    pub best: f64,
    /// `(λ, mean validation accuracy)` for every candidate, in input order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the task-arithmetic λ with the best mean validation accuracy; ties go
/// to the smaller λ.
pub fn grid_search_lambda(
    pretrained: &ParamSet,
    experts: &[&ParamSet],
    spec: &ModelSpec,
    candidates: &[f64],
    val_sets: &[&Dataset],
) -> Result<GridSearchResult> {
    grid_search_with(experts, spec, candidates, val_sets, |lambda| task_arithmetic(pretrained, experts, lambda))
}

/// Same selection rule over any λ-parameterized merge.
pub fn grid_search_with(
    experts: &[&ParamSet],
    spec: &ModelSpec,
    candidates: &[f64],
    val_sets: &[&Dataset],
    mut merge: impl FnMut(f64) -> Result<ParamSet>,
) -> Result<GridSearchResult> {
    if candidates.is_empty() {
        return Err(invalid("no lambda candidates"));
    }
    let heads = collect_heads(experts);
    let mut scores = Vec::with_capacity(candidates.len());
    for &lambda in candidates {
        let merged = merge(lambda)?;
        let acc = mean_accuracy(&with_heads(&merged, &heads), spec, None, val_sets)?;
        scores.push((lambda, acc));
    }
    let mut best = scores[0];
    for &(l, a) in &scores[1..] {
        if a > best.1 || (a == best.1 && l < best.0) {
            best = (l, a);
        }
    }
    Ok(GridSearchResult { best: best.0, scores })
}

#[derive(Clone, Debug)]
pub struct AdaMergeConfig {
    pub train: TrainConfig,
    pub init: f64,
}

impl Default for AdaMergeConfig {
    fn default() -> Self {
        Self { train: TrainConfig { iterations: 200, ..TrainConfig::default() }, init: 0.3 }
    }
}

#[derive(Clone, Debug)]
pub struct AdaMergeOutcome {
    pub merged: ParamSet,
    /// `[layer - 1][task]`.
    pub coefficients: Vec<Vec<f64>>,
    /// Mean mini-batch entropy at each step, before the update.
    pub losses: Vec<f64>,
}

/// Layer-wise task vectors, laid out for fast coefficient merging.
#[derive(Clone, Debug)]
pub struct LayerwiseVectors {
    base: ParamSet,
    /// `vectors[t]` is task `t`'s backbone delta.
    vectors: Vec<TaskVector>,
    layers: usize,
}

impl LayerwiseVectors {
    pub fn new(pretrained: &ParamSet, experts: &[&ParamSet], spec: &ModelSpec) -> Result<Self> {
        check_experts(Some(pretrained), experts)?;
        spec.validate_backbone(pretrained)?;
        let vectors = experts.iter().map(|e| task_vector(pretrained, e)).collect::<Result<_>>()?;
        Ok(Self { base: pretrained.backbone(), vectors, layers: spec.num_layers() })
    }

    pub fn num_tasks(&self) -> usize {
        self.vectors.len()
    }

    /// `Θ₀,l + Σₜ λ_l⁽ᵗ⁾ τ_l⁽ᵗ⁾` per layer.
    pub fn merge(&self, coeffs: &[Vec<f64>]) -> Result<ParamSet> {
        if coeffs.len() != self.layers || coeffs.iter().any(|r| r.len() != self.vectors.len()) {
            return Err(shape_err("coefficient matrix must be layers × tasks"));
        }
        let mut out = ParamSet::new();
        for (name, b) in self.base.iter() {
            let l = layer_of(name)?;
            let row = &coeffs[l - 1];
            let data = (0..b.len())
                .map(|i| {
                    let mut v = b.data()[i] as f64;
                    for (t, tv) in self.vectors.iter().enumerate() {
                        v += row[t] * tv.0.get(name).unwrap().data()[i] as f64;
                    }
                    v as f32
                })
                .collect();
            out.set(name, Tensor::new(b.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    /// `⟨G_l, τ_l⁽ᵗ⁾⟩` for backbone gradients `G`.
    pub fn project(&self, grads: &ParamSet) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; self.vectors.len()]; self.layers];
        for l in 1..=self.layers {
            for name in [block_weight(l), block_bias(l)] {
                let g = grads.require(&name)?;
                for (t, tv) in self.vectors.iter().enumerate() {
                    let v = tv.0.require(&name)?;
                    out[l - 1][t] += g.data().iter().zip(v.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
                }
            }
        }
        Ok(out)
    }
}

fn layer_of(name: &str) -> Result<usize> {
    name.strip_prefix("block")
        .and_then(|rest| rest.split('.').next())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| invalid(format!("{name} is not a block parameter")))
}

/// Mean over tasks of the softmax entropy through each task's head, and its
/// gradient with respect to the coefficient matrix.
pub fn ada_objective(
    vectors: &LayerwiseVectors,
    coeffs: &[Vec<f64>],
    spec: &ModelSpec,
    heads: &ParamSet,
    batches: &[Tensor],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batches.len() != vectors.num_tasks() {
        return Err(shape_err("one unlabeled batch per task is required"));
    }
    let merged = with_heads(&vectors.merge(coeffs)?, heads);
    let t_count = batches.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<ParamSet> = None;
    for (t, x) in batches.iter().enumerate() {
        let key = t.to_string();
        if spec.validate_head(heads, &key).is_err() {
            return Err(Error::MissingHead(t));
        }
        let g = backprop_grads(&merged, spec, x, LossSignal::Entropy { task: &key })?;
        loss += g.loss / t_count;
        let bb = g.grads.filter(is_backbone_name);
        total = Some(match total {
            None => bb,
            Some(acc) => {
                let mut next = ParamSet::new();
                for (n, a) in acc.iter() {
                    next.set(n, a.zip_map(bb.require(n)?, |x, y| x + y)?);
                }
                next
            }
        });
    }
    let mut grad = vectors.project(&total.expect("at least one task"))?;
    grad.iter_mut().flatten().for_each(|g| *g /= t_count);
    Ok((loss, grad))
}

/// Mean entropy over full unlabeled sets, for reporting.
pub fn mean_entropy(params: &ParamSet, spec: &ModelSpec, inputs: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for (t, x) in inputs.iter().enumerate() {
        let trace = crate::nn::forward_with_trace(params, spec, x)?;
        let logits = crate::nn::head_logits(params, &t.to_string(), trace.last())?;
        total += crate::nn::softmax_entropy(&logits);
    }
    Ok(total / inputs.len() as f64)
}

/// Layer-wise AdaMerging: coefficients start at `cfg.init` and follow Adam on
/// the mean prediction entropy over each task's unlabeled inputs (`d × N`).
pub fn ada_merge(
    pretrained: &ParamSet,
    experts: &[&ParamSet],
    spec: &ModelSpec,
    unlabeled: &[Tensor],
    cfg: &AdaMergeConfig,
) -> Result<AdaMergeOutcome> {
    cfg.train.validate()?;
    if unlabeled.len() != experts.len() {
        return Err(invalid("one unlabeled set per expert is required"));
    }
    if unlabeled.iter().any(|x| x.cols() == 0) {
        return Err(Error::EmptyDataset);
    }
    let vectors = LayerwiseVectors::new(pretrained, experts, spec)?;
    let heads = collect_heads(experts);
    let mut coeffs = vec![vec![cfg.init; experts.len()]; spec.num_layers()];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, "ada-batches"));
    let mut cursors: Vec<ShuffledBatches> =
        unlabeled.iter().map(|x| ShuffledBatches::new(x.cols(), cfg.train.batch)).collect();
    let mut adam = crate::nn::Adam::new(cfg.train.adam);
    let mut losses = Vec::with_capacity(cfg.train.iterations);

    for step in 0..cfg.train.iterations {
        let batches: Vec<Tensor> =
            cursors.iter_mut().zip(unlabeled).map(|(c, x)| x.select_columns(c.next_batch(&mut rng))).collect();
        let (loss, grad) = ada_objective(&vectors, &coeffs, spec, &heads, &batches)?;
        if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(format!("AdaMerging step {}", step + 1)));
        }
        losses.push(loss);
        let mut flat: Vec<f64> = coeffs.iter().flatten().copied().collect();
        let g: Vec<f64> = grad.into_iter().flatten().collect();
        adam.tick();
        adam.update_f64(0, &mut flat, &g)?;
        for (row, chunk) in coeffs.iter_mut().zip(flat.chunks(experts.len())) {
            row.copy_from_slice(chunk);
        }
    }
    Ok(AdaMergeOutcome { merged: vectors.merge(&coeffs)?, coefficients: coeffs, losses })
}
