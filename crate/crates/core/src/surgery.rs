//! Task-private adapter stacks that subtract a learned correction from the
//! merged model's representations, `Ẑ_l = Z_l − W_up·ReLU(W_down·Z_l)`.
//!
//! Corrections sit in the forward path: the corrected `Ẑ_l` is what block
//! `l+1` (or the task head) consumes. Adapters are fitted without labels by
//! pulling each corrected layer towards the expert's representation of the
//! same inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bias::LossKind;
use crate::data::SequentialBatches;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{block_forward, forward_with_trace, Adam, ModelSpec, RepTrace, TrainConfig};
use crate::seed::derive_seed;
use crate::summary::Summary;
use crate::tensor::{block_weight, ParamSet, Tensor};

pub const DEFAULT_RANK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `r × d_l`
    pub down: Tensor,
    /// `d_l × r`
    pub up: Tensor,
}

impl AdapterParams {
    pub fn new(down: Tensor, up: Tensor) -> Result<Self> {
        if down.shape().len() != 2 || up.shape().len() != 2 {
            return Err(shape_err("adapter weights must be matrices"));
        }
        if down.rows() != up.cols() || down.cols() != up.rows() {
            return Err(shape_err(format!("adapter down {:?} / up {:?}", down.shape(), up.shape())));
        }
        Ok(Self { down, up })
    }

    /// `W_down ~ U(±1/√d)`, `W_up = 0`, so the correction starts at exactly zero.
    pub fn init(width: usize, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / width as f64).sqrt() as f32;
        let down = Tensor::from_fn(rank, width, |_, _| rng.random_range(-bound..bound));
        Self { down, up: Tensor::zeros(&[width, rank]) }
    }

    pub fn zeros(width: usize, rank: usize) -> Self {
        Self { down: Tensor::zeros(&[rank, width]), up: Tensor::zeros(&[width, rank]) }
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn width(&self) -> usize {
        self.down.cols()
    }

    /// `W_up · ReLU(W_down · z)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if z.rows() != self.width() {
            return Err(shape_err(format!("adapter of width {} applied to {} rows", self.width(), z.rows())));
        }
        self.up.matmul(&self.down.matmul(z)?.relu())
    }
}

pub fn adapter_forward(adapter: &AdapterParams, z: &Tensor) -> Result<Tensor> {
    adapter.forward(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurgeryMode {
    /// Correct only the final representation.
    LastLayerOnly,
    /// Correct every layer.
    AllLayers,
    /// Correct only block `l` (1-based).
    SingleBlock(usize),
}

impl SurgeryMode {
    pub fn layers(self, num_layers: usize) -> Vec<usize> {
        match self {
            SurgeryMode::LastLayerOnly => vec![num_layers],
            SurgeryMode::AllLayers => (1..=num_layers).collect(),
            SurgeryMode::SingleBlock(l) => vec![l],
        }
    }

    pub fn validate(self, num_layers: usize) -> Result<()> {
        match self {
            SurgeryMode::SingleBlock(l) if l == 0 || l > num_layers => {
                Err(invalid(format!("block {l} outside 1..={num_layers}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SurgeryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurgeryMode::LastLayerOnly => f.write_str("v1"),
            SurgeryMode::AllLayers => f.write_str("v2"),
            SurgeryMode::SingleBlock(l) => write!(f, "block:{l}"),
        }
    }
}

impl FromStr for SurgeryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(SurgeryMode::LastLayerOnly),
            "v2" => Ok(SurgeryMode::AllLayers),
            other => other
                .strip_prefix("block:")
                .and_then(|l| l.parse().ok())
                .map(SurgeryMode::SingleBlock)
                .ok_or_else(|| invalid(format!("unknown surgery mode {other:?}"))),
        }
    }
}

/// How adapter gradients are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientMode {
    /// Each adapter follows the gradient of its own layer's loss, with the
    /// representation entering it held fixed.
    #[default]
    BlockCoordinate,
    /// Gradients of the summed loss flow back through downstream blocks.
    FullBackprop,
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientMode::BlockCoordinate => f.write_str("block"),
            GradientMode::FullBackprop => f.write_str("full"),
        }
    }
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(GradientMode::BlockCoordinate),
            "full" => Ok(GradientMode::FullBackprop),
            other => Err(invalid(format!("unknown gradient mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryStack {
    pub mode: SurgeryMode,
    pub psi: LossKind,
    /// Keyed by `(task, layer)`.
    pub adapters: BTreeMap<(usize, usize), AdapterParams>,
}

impl SurgeryStack {
    pub fn empty(mode: SurgeryMode, psi: LossKind) -> Self {
        Self { mode, psi, adapters: BTreeMap::new() }
    }

    pub fn init(
        spec: &ModelSpec,
        tasks: usize,
        mode: SurgeryMode,
        psi: LossKind,
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        mode.validate(spec.num_layers())?;
        if rank == 0 {
            return Err(invalid("rank must be at least 1"));
        }
        let mut adapters = BTreeMap::new();
        for t in 0..tasks {
            for l in mode.layers(spec.num_layers()) {
                let s = derive_seed(seed, &format!("adapter.{t}.{l}"));
                adapters.insert((t, l), AdapterParams::init(spec.width(l), rank, s));
            }
        }
        Ok(Self { mode, psi, adapters })
    }

    pub fn get(&self, task: usize, layer: usize) -> Option<&AdapterParams> {
        self.adapters.get(&(task, layer))
    }

    pub fn tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.adapters.keys().map(|&(t, _)| t).collect();
        t.dedup();
        t
    }

    pub fn rank(&self) -> Option<usize> {
        self.adapters.values().next().map(AdapterParams::rank)
    }

    /// Checks that the adapters match the mode contract and layer widths.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let layers = spec.num_layers();
        self.mode.validate(layers)?;
        let allowed = self.mode.layers(layers);
        for (&(task, layer), a) in &self.adapters {
            if !allowed.contains(&layer) {
                return Err(invalid(format!("adapter ({task}, {layer}) not allowed in mode {}", self.mode)));
            }
            if a.width() != spec.width(layer) {
                return Err(shape_err(format!(
                    "adapter ({task}, {layer}) width {} vs {}",
                    a.width(),
                    spec.width(layer)
                )));
            }
        }
        for task in self.tasks() {
            for &layer in &allowed {
                if !self.adapters.contains_key(&(task, layer)) {
                    return Err(Error::MissingAdapter { task, layer });
                }
            }
        }
        Ok(())
    }

    /// Tensors named `surgery.{t}.{l}.{up|down}`.
    pub fn to_paramset(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (&(t, l), a) in &self.adapters {
            p.set(&format!("surgery.{t}.{l}.up"), a.up.clone());
            p.set(&format!("surgery.{t}.{l}.down"), a.down.clone());
        }
        p
    }

    /// Rebuilds a stack from checkpoint tensors; the mode is inferred from
    /// which layers carry adapters.
    pub fn from_paramset(p: &ParamSet, num_layers: usize, psi: LossKind) -> Result<Self> {
        let mut ups = BTreeMap::new();
        let mut downs = BTreeMap::new();
        for (name, t) in p.iter() {
            let parts: Vec<&str> = name.split('.').collect();
            let ["surgery", task, layer, kind] = parts[..] else {
                return Err(invalid(format!("unexpected tensor {name} in surgery stack")));
            };
            let key: (usize, usize) = (
                task.parse().map_err(|_| invalid(format!("bad task in {name}")))?,
                layer.parse().map_err(|_| invalid(format!("bad layer in {name}")))?,
            );
            match kind {
                "up" => ups.insert(key, t.clone()),
                "down" => downs.insert(key, t.clone()),
                _ => return Err(invalid(format!("bad adapter tensor {name}"))),
            };
        }
        let mut adapters = BTreeMap::new();
        for (key, up) in ups {
            let down = downs.remove(&key).ok_or(Error::MissingAdapter { task: key.0, layer: key.1 })?;
            adapters.insert(key, AdapterParams::new(down, up)?);
        }
        if let Some((&(task, layer), _)) = downs.iter().next() {
            return Err(Error::MissingAdapter { task, layer });
        }
        let mut layers: Vec<usize> = adapters.keys().map(|&(_, l)| l).collect();
        layers.sort_unstable();
        layers.dedup();
        let mode = if layers == (1..=num_layers).collect::<Vec<_>>() {
            SurgeryMode::AllLayers
        } else if layers == [num_layers] {
            SurgeryMode::LastLayerOnly
        } else if let [l] = layers[..] {
            SurgeryMode::SingleBlock(l)
        } else if layers.is_empty() {
            SurgeryMode::AllLayers
        } else {
            return Err(invalid(format!("adapter layers {layers:?} match no surgery mode")));
        };
        Ok(Self { mode, psi, adapters })
    }

    pub fn to_summary(&self) -> Summary {
        let mut s = Summary::new();
        s.push("mode", self.mode);
        s.push("psi", self.psi);
        s.push("rank", self.rank().unwrap_or(0));
        s.push("adapters", self.adapters.len());
        s
    }
}

/// Merged-model trace for `task` with that task's corrections applied in path.
/// Layers without an adapter pass through unchanged.
pub fn corrected_forward(
    merged: &ParamSet,
    spec: &ModelSpec,
    stack: &SurgeryStack,
    x: &Tensor,
    task: usize,
) -> Result<RepTrace> {
    spec.validate_backbone(merged)?;
    if x.rows() != spec.input_dim {
        return Err(shape_err(format!("input {:?} for input_dim {}", x.shape(), spec.input_dim)));
    }
    let has_task = stack.adapters.keys().any(|&(t, _)| t == task);
    let mut layers = Vec::with_capacity(spec.num_layers());
    let mut z = x.clone();
    for l in 1..=spec.num_layers() {
        z = block_forward(merged, spec, l, &z)?;
        match stack.get(task, l) {
            Some(a) => z = z.sub(&a.forward(&z)?)?,
            None if has_task && stack.mode.layers(spec.num_layers()).contains(&l) => {
                return Err(Error::MissingAdapter { task, layer: l });
            }
            None => {}
        }
        layers.push(z.clone());
    }
    RepTrace::new(layers)
}

/// Plain trace when `stack` is `None`, corrected trace otherwise.
pub fn trace_for(
    merged: &ParamSet,
    spec: &ModelSpec,
    stack: Option<&SurgeryStack>,
    x: &Tensor,
    task: usize,
) -> Result<RepTrace> {
    match stack {
        Some(s) => corrected_forward(merged, spec, s, x, task),
        None => forward_with_trace(merged, spec, x),
    }
}

/// Training loss of one layer and its gradient with respect to `Ẑ`.
///
/// L1 and MSE are normalized by `batch × d`, matching the bias metric. The
/// cosine objective is the raw `−mean cos`; pairs where either column has
/// (near) zero norm contribute nothing.
pub fn layer_loss(psi: LossKind, corrected: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    corrected.same_shape(target)?;
    let (d, n) = (corrected.rows(), corrected.cols());
    let scale = 1.0 / (n * d) as f64;
    match psi {
        LossKind::L1 => {
            let mut loss = 0.0;
            let grad = corrected.zip_map(target, |a, b| {
                let diff = a as f64 - b as f64;
                (diff.signum() * scale * f64::from(u8::from(diff != 0.0))) as f32
            })?;
            for (&a, &b) in corrected.data().iter().zip(target.data()) {
                loss += (a as f64 - b as f64).abs();
            }
            Ok((loss * scale, grad))
        }
        LossKind::Mse => {
            let mut loss = 0.0;
            for (&a, &b) in corrected.data().iter().zip(target.data()) {
                loss += (a as f64 - b as f64).powi(2);
            }
            let grad = corrected.zip_map(target, |a, b| (2.0 * (a as f64 - b as f64) * scale) as f32)?;
            Ok((loss * scale, grad))
        }
        LossKind::NegCosine => {
            const EPS: f64 = 1e-8;
            let mut grad = Tensor::zeros(&[d, n]);
            let mut loss = 0.0;
            for j in 0..n {
                let a: Vec<f64> = (0..d).map(|i| corrected.at(i, j) as f64).collect();
                let b: Vec<f64> = (0..d).map(|i| target.at(i, j) as f64).collect();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na * nb < EPS {
                    continue;
                }
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let cos = dot / (na * nb);
                loss -= cos / n as f64;
                for i in 0..d {
                    let dcos = b[i] / (na * nb) - cos * a[i] / (na * na);
                    grad.data_mut()[i * n + j] = (-dcos / n as f64) as f32;
                }
            }
            Ok((loss, grad))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SurgeryConfig {
    pub train: TrainConfig,
    pub mode: SurgeryMode,
    pub psi: LossKind,
    pub rank: usize,
    pub gradient: GradientMode,
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            mode: SurgeryMode::AllLayers,
            psi: LossKind::L1,
            rank: DEFAULT_RANK,
            gradient: GradientMode::BlockCoordinate,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SurgeryOutcome {
    pub stack: SurgeryStack,
    /// Summed loss over tasks and corrected layers, per iteration, measured
    /// before that iteration's update.
    pub losses: Vec<f64>,
}

/// Per-adapter gradients, keyed by layer: `(d W_down, d W_up)`.
type AdapterGrads = BTreeMap<usize, (Tensor, Tensor)>;

struct LayerCache {
    layer: usize,
    input: Tensor,
    hidden: Tensor,
    act: Tensor,
}

/// Runs the corrected forward on one batch, returning per-layer losses and
/// adapter gradients under `mode`.
fn step_gradients(
    merged: &ParamSet,
    spec: &ModelSpec,
    adapters: &BTreeMap<usize, AdapterParams>,
    target: &RepTrace,
    x: &Tensor,
    psi: LossKind,
    mode: GradientMode,
) -> Result<(BTreeMap<usize, f64>, AdapterGrads)> {
    let layers = spec.num_layers();
    let mut caches: Vec<LayerCache> = Vec::new();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(layers);
    let mut loss_grads: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut losses = BTreeMap::new();
    let mut z = x.clone();
    for l in 1..=layers {
        z = block_forward(merged, spec, l, &z)?;
        if let Some(a) = adapters.get(&l) {
            let hidden = a.down.matmul(&z)?;
            let act = hidden.relu();
            let corrected = z.sub(&a.up.matmul(&act)?)?;
            let (loss, grad) = layer_loss(psi, &corrected, target.layer(l))?;
            losses.insert(l, loss);
            loss_grads.insert(l, grad);
            caches.push(LayerCache { layer: l, input: z, hidden, act });
            z = corrected;
        }
        outputs.push(z.clone());
    }

    let adapter_grads = |a: &AdapterParams, c: &LayerCache, d_corrected: &Tensor| -> Result<(Tensor, Tensor, Tensor)> {
        // Ẑ = Z − W_up·ReLU(W_down·Z)
        let d_omega = d_corrected.map(|v| -v);
        let d_up = d_omega.matmul_t(&c.act)?;
        let d_act = a.up.t_matmul(&d_omega)?;
        let d_hidden = d_act.zip_map(&c.hidden, |g, h| if h > 0.0 { g } else { 0.0 })?;
        let d_down = d_hidden.matmul_t(&c.input)?;
        // ∂/∂Z through the correction path (identity term added by caller).
        let d_input_extra = a.down.t_matmul(&d_hidden)?;
        Ok((d_down, d_up, d_input_extra))
    };

    let mut grads = AdapterGrads::new();
    match mode {
        GradientMode::BlockCoordinate => {
            for c in &caches {
                let a = &adapters[&c.layer];
                let (d_down, d_up, _) = adapter_grads(a, c, &loss_grads[&c.layer])?;
                grads.insert(c.layer, (d_down, d_up));
            }
        }
        GradientMode::FullBackprop => {
            let first = caches.first().map(|c| c.layer).unwrap_or(layers + 1);
            let mut d_out: Option<Tensor> = None;
            for l in (first..=layers).rev() {
                // d_out is ∂loss/∂(output of layer l) coming from above.
                let mut d = match (d_out.take(), loss_grads.get(&l)) {
                    (Some(a), Some(b)) => a.zip_map(b, |x, y| x + y)?,
                    (Some(a), None) => a,
                    (None, Some(b)) => b.clone(),
                    (None, None) => Tensor::zeros(&[spec.width(l), x.cols()]),
                };
                if let Some(c) = caches.iter().find(|c| c.layer == l) {
                    let (d_down, d_up, extra) = adapter_grads(&adapters[&l], c, &d)?;
                    grads.insert(l, (d_down, d_up));
                    d = d.zip_map(&extra, |a, b| a + b)?;
                }
                if l > first {
                    // Back through block l to the output of layer l − 1.
                    let pre_mask = if l < layers {
                        let block_out = match caches.iter().find(|c| c.layer == l) {
                            Some(c) => &c.input,
                            None => &outputs[l - 1],
                        };
                        d.zip_map(block_out, |g, a| if a > 0.0 { g } else { 0.0 })?
                    } else {
                        d
                    };
                    d_out = Some(merged.require(&block_weight(l))?.t_matmul(&pre_mask)?);
                }
            }
        }
    }
    Ok((losses, grads))
}

/// Training losses of every corrected layer of `task` on one batch.
pub fn surgery_layer_losses(
    merged: &ParamSet,
    expert: &ParamSet,
    spec: &ModelSpec,
    stack: &SurgeryStack,
    x: &Tensor,
    task: usize,
) -> Result<BTreeMap<usize, f64>> {
    let adapters = task_adapters(stack, task);
    let target = forward_with_trace(expert, spec, x)?;
    Ok(step_gradients(merged, spec, &adapters, &target, x, stack.psi, GradientMode::BlockCoordinate)?.0)
}

/// Adapter gradients of `task` on one batch, for inspection and testing.
pub fn surgery_gradients(
    merged: &ParamSet,
    expert: &ParamSet,
    spec: &ModelSpec,
    stack: &SurgeryStack,
    x: &Tensor,
    task: usize,
    mode: GradientMode,
) -> Result<BTreeMap<usize, (Tensor, Tensor)>> {
    let adapters = task_adapters(stack, task);
    let target = forward_with_trace(expert, spec, x)?;
    Ok(step_gradients(merged, spec, &adapters, &target, x, stack.psi, mode)?.1)
}

/// `‖g_full − g_block‖ / ‖g_full‖` over every adapter of every task, each
/// task's gradients taken on its whole input set. Zero for a single adapter
/// per task.
pub fn gradient_divergence(
    merged: &ParamSet,
    experts: &[&ParamSet],
    spec: &ModelSpec,
    stack: &SurgeryStack,
    inputs: &[Tensor],
) -> Result<f64> {
    check_inputs(spec, experts, inputs)?;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (task, (expert, x)) in experts.iter().zip(inputs).enumerate() {
        let block = surgery_gradients(merged, expert, spec, stack, x, task, GradientMode::BlockCoordinate)?;
        let full = surgery_gradients(merged, expert, spec, stack, x, task, GradientMode::FullBackprop)?;
        for (l, (fd, fu)) in &full {
            let (bd, bu) = &block[l];
            for (f, b) in fd.data().iter().zip(bd.data()).chain(fu.data().iter().zip(bu.data())) {
                diff += (*f as f64 - *b as f64).powi(2);
                norm += (*f as f64).powi(2);
            }
        }
    }
    Ok(if norm > 0.0 { (diff / norm).sqrt() } else { 0.0 })
}

fn task_adapters(stack: &SurgeryStack, task: usize) -> BTreeMap<usize, AdapterParams> {
    stack.adapters.iter().filter(|((t, _), _)| *t == task).map(|(&(_, l), a)| (l, a.clone())).collect()
}

fn train_task(
    merged: &ParamSet,
    expert: &ParamSet,
    spec: &ModelSpec,
    inputs: &Tensor,
    task: usize,
    mut adapters: BTreeMap<usize, AdapterParams>,
    cfg: &SurgeryConfig,
    iterations: usize,
) -> Result<(BTreeMap<usize, AdapterParams>, Vec<f64>)> {
    let mut adam = Adam::new(cfg.train.adam);
    let mut batches = SequentialBatches::new(inputs.cols(), cfg.train.batch);
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let range = batches.next().ok_or(Error::EmptyDataset)?;
        let x = inputs.columns(range.start, range.end);
        let target = forward_with_trace(expert, spec, &x)?;
        let (layer_losses, grads) = step_gradients(merged, spec, &adapters, &target, &x, cfg.psi, cfg.gradient)?;
        if let Some((&layer, _)) = layer_losses.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss(format!("iteration {}, task {task}, layer {layer}", it + 1)));
        }
        losses.push(layer_losses.values().sum());
        adam.tick();
        for (slot, (l, (d_down, d_up))) in grads.iter().enumerate() {
            let a = adapters.get_mut(l).expect("adapter present");
            adam.update_f32(2 * slot, a.down.data_mut(), d_down.data())?;
            adam.update_f32(2 * slot + 1, a.up.data_mut(), d_up.data())?;
        }
    }
    Ok((adapters, losses))
}

fn check_inputs(spec: &ModelSpec, experts: &[&ParamSet], inputs: &[Tensor]) -> Result<()> {
    if experts.len() != inputs.len() {
        return Err(invalid(format!("{} experts but {} input sets", experts.len(), inputs.len())));
    }
    for x in inputs {
        if x.rows() != spec.input_dim {
            return Err(shape_err(format!("surgery inputs have {} rows, expected {}", x.rows(), spec.input_dim)));
        }
    }
    Ok(())
}

fn run_surgery(
    merged: &ParamSet,
    experts: &[&ParamSet],
    spec: &ModelSpec,
    inputs: &[Tensor],
    cfg: &SurgeryConfig,
    iterations: usize,
) -> Result<SurgeryOutcome> {
    cfg.train.validate()?;
    check_inputs(spec, experts, inputs)?;
    spec.validate_backbone(merged)?;
    for e in experts {
        spec.validate_backbone(e)?;
    }
    let init = SurgeryStack::init(spec, experts.len(), cfg.mode, cfg.psi, cfg.rank, cfg.train.seed)?;
    let per_task: Vec<_> = (0..experts.len())
        .into_par_iter()
        .map(|t| train_task(merged, experts[t], spec, &inputs[t], t, task_adapters(&init, t), cfg, iterations))
        .collect::<Result<_>>()?;

    let mut stack = SurgeryStack::empty(cfg.mode, cfg.psi);
    let mut losses = vec![0.0; iterations];
    for (t, (adapters, task_losses)) in per_task.into_iter().enumerate() {
        for (l, a) in adapters {
            stack.adapters.insert((t, l), a);
        }
        for (acc, v) in losses.iter_mut().zip(task_losses) {
            *acc += v;
        }
    }
    Ok(SurgeryOutcome { stack, losses })
}

/// Fits adapters on unlabeled per-task inputs (`d × N` each), cycling through
/// each task's inputs in order for `cfg.train.iterations` steps.
pub fn train_surgery(
    merged: &ParamSet,
    experts: &[&ParamSet],
    spec: &ModelSpec,
    inputs: &[Tensor],
    cfg: &SurgeryConfig,
) -> Result<SurgeryOutcome> {
    run_surgery(merged, experts, spec, inputs, cfg, cfg.train.iterations)
}

/// Online variant: the first `⌈fraction·N⌉` inputs of each task are seen
/// exactly once, in order, in batches of `cfg.train.batch`.
pub fn stream_train_surgery(
    merged: &ParamSet,
    experts: &[&ParamSet],
    spec: &ModelSpec,
    inputs: &[Tensor],
    fraction: f64,
    cfg: &SurgeryConfig,
) -> Result<SurgeryOutcome> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("stream fraction must lie in (0,1], got {fraction}")));
    }
    check_inputs(spec, experts, inputs)?;
    let visible: Vec<Tensor> = inputs
        .iter()
        .map(|x| {
            let m = ((fraction * x.cols() as f64).ceil() as usize).clamp(1, x.cols());
            x.columns(0, m)
        })
        .collect();
    let passes: Vec<usize> =
        visible.iter().map(|x| SequentialBatches::new(x.cols(), cfg.train.batch).batches_per_pass()).collect();
    let iterations = *passes.iter().max().unwrap_or(&0);
    if passes.iter().any(|&p| p != iterations) {
        // Tasks of unequal size: train each on its own single pass.
        let mut stack = SurgeryStack::empty(cfg.mode, cfg.psi);
        let mut losses = vec![0.0; iterations];
        for (t, x) in visible.iter().enumerate() {
            let out = run_surgery(merged, &[experts[t]], spec, std::slice::from_ref(x), cfg, passes[t])?;
            for ((_, l), a) in out.stack.adapters {
                stack.adapters.insert((t, l), a);
            }
            for (acc, v) in losses.iter_mut().zip(out.losses) {
                *acc += v;
            }
        }
        return Ok(SurgeryOutcome { stack, losses });
    }
    run_surgery(merged, experts, spec, &visible, cfg, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ModelSpec {
        ModelSpec::new(3, vec![4, 5, 3]).unwrap()
    }

    #[test]
    fn zero_down_gives_zero_output() {
        let mut a = AdapterParams::init(4, 2, 1);
        a.up = Tensor::from_fn(4, 2, |i, j| (i + j) as f32);
        a.down = Tensor::zeros(&[2, 4]);
        let z = Tensor::from_fn(4, 3, |i, j| i as f32 - j as f32);
        assert!(a.forward(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_adapter_reproduces_nonnegative_input() {
        let eye = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let a = AdapterParams::new(eye.clone(), eye).unwrap();
        let z = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f32);
        assert_eq!(a.forward(&z).unwrap(), z);
    }

    #[test]
    fn hand_computed_adapter() {
        // down = [[1, -1, 0.5]] (r=1, d=3), up = [[2], [0], [-1]]
        // z = [1, 2, 3]ᵀ: h = 1 - 2 + 1.5 = 0.5 → ω = [1, 0, -0.5]
        // z' = [3, 0, 1]ᵀ: h = 3 + 0.5 = 3.5 → ω = [7, 0, -3.5]
        // z'' = [0, 1, 0]ᵀ: h = -1 → ReLU 0 → ω = 0
        let down = Tensor::new(vec![1, 3], vec![1.0, -1.0, 0.5]).unwrap();
        let up = Tensor::new(vec![3, 1], vec![2.0, 0.0, -1.0]).unwrap();
        let a = AdapterParams::new(down, up).unwrap();
        let z = Tensor::new(vec![3, 3], vec![1.0, 3.0, 0.0, 2.0, 0.0, 1.0, 3.0, 1.0, 0.0]).unwrap();
        let out = a.forward(&z).unwrap();
        let expect = [1.0, 7.0, 0.0, 0.0, 0.0, 0.0, -0.5, -3.5, 0.0];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn adapter_shape_errors() {
        assert!(AdapterParams::new(Tensor::zeros(&[2, 4]), Tensor::zeros(&[3, 2])).is_err());
        let a = AdapterParams::zeros(4, 2);
        assert!(a.forward(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn mode_parsing_and_layers() {
        assert_eq!("v1".parse::<SurgeryMode>().unwrap(), SurgeryMode::LastLayerOnly);
        assert_eq!("block:3".parse::<SurgeryMode>().unwrap(), SurgeryMode::SingleBlock(3));
        assert!("block:x".parse::<SurgeryMode>().is_err());
        assert_eq!(SurgeryMode::AllLayers.layers(3), vec![1, 2, 3]);
        assert_eq!(SurgeryMode::LastLayerOnly.layers(3), vec![3]);
        assert!(SurgeryMode::SingleBlock(4).validate(3).is_err());
    }

    #[test]
    fn zero_adapters_leave_trace_unchanged() {
        let spec = toy_spec();
        let p = spec.init_backbone(2);
        let x = Tensor::from_fn(3, 6, |i, j| (i as f32 - j as f32) * 0.3);
        let mut stack = SurgeryStack::init(&spec, 2, SurgeryMode::AllLayers, LossKind::L1, 2, 0).unwrap();
        for a in stack.adapters.values_mut() {
            *a = AdapterParams::zeros(a.width(), 2);
        }
        let plain = forward_with_trace(&p, &spec, &x).unwrap();
        assert_eq!(corrected_forward(&p, &spec, &stack, &x, 1).unwrap(), plain);
        let empty = SurgeryStack::empty(SurgeryMode::AllLayers, LossKind::L1);
        assert_eq!(corrected_forward(&p, &spec, &empty, &x, 0).unwrap(), plain);
    }

    #[test]
    fn last_layer_mode_changes_only_last_layer() {
        let spec = toy_spec();
        let p = spec.init_backbone(2);
        let x = Tensor::from_fn(3, 6, |i, j| (i as f32 + j as f32) * 0.3 - 1.0);
        let mut stack = SurgeryStack::init(&spec, 1, SurgeryMode::LastLayerOnly, LossKind::L1, 3, 4).unwrap();
        stack.adapters.get_mut(&(0, 3)).unwrap().up = Tensor::filled(&[3, 3], 0.5);
        stack.adapters.get_mut(&(0, 3)).unwrap().down = Tensor::filled(&[3, 3], 0.5);
        let plain = forward_with_trace(&p, &spec, &x).unwrap();
        let corr = corrected_forward(&p, &spec, &stack, &x, 0).unwrap();
        assert_eq!(corr.layer(1), plain.layer(1));
        assert_eq!(corr.layer(2), plain.layer(2));
        assert_ne!(corr.layer(3), plain.layer(3));
    }

    #[test]
    fn missing_adapter_detected() {
        let spec = toy_spec();
        let p = spec.init_backbone(2);
        let mut stack = SurgeryStack::init(&spec, 1, SurgeryMode::AllLayers, LossKind::L1, 2, 0).unwrap();
        stack.adapters.remove(&(0, 2));
        assert!(matches!(stack.validate(&spec), Err(Error::MissingAdapter { task: 0, layer: 2 })));
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(corrected_forward(&p, &spec, &stack, &x, 0), Err(Error::MissingAdapter { .. })));
    }

    #[test]
    fn paramset_roundtrip_infers_mode() {
        let spec = toy_spec();
        for mode in [SurgeryMode::AllLayers, SurgeryMode::LastLayerOnly, SurgeryMode::SingleBlock(2)] {
            let stack = SurgeryStack::init(&spec, 2, mode, LossKind::Mse, 2, 1).unwrap();
            let p = stack.to_paramset();
            assert!(p.contains("surgery.1.3.up") || mode == SurgeryMode::SingleBlock(2));
            let back = SurgeryStack::from_paramset(&p, 3, LossKind::Mse).unwrap();
            assert_eq!(back, stack);
        }
    }

    #[test]
    fn identical_models_give_zero_loss_and_no_movement() {
        let spec = toy_spec();
        let p = spec.init_backbone(5);
        let x = Tensor::from_fn(3, 20, |i, j| ((i * 7 + j * 3) % 11) as f32 * 0.2 - 1.0);
        let cfg = SurgeryConfig {
            train: TrainConfig { iterations: 5, batch: 4, ..Default::default() },
            rank: 2,
            ..Default::default()
        };
        let out = train_surgery(&p, &[&p], &spec, &[x], &cfg).unwrap();
        assert!(out.losses.iter().all(|&l| l == 0.0));
        let init = SurgeryStack::init(&spec, 1, cfg.mode, cfg.psi, 2, cfg.train.seed).unwrap();
        assert_eq!(out.stack, init);
    }

    #[test]
    fn stream_rejects_bad_fraction() {
        let spec = toy_spec();
        let p = spec.init_backbone(5);
        let x = Tensor::zeros(&[3, 10]);
        let cfg = SurgeryConfig::default();
        assert!(stream_train_surgery(&p, &[&p], &spec, std::slice::from_ref(&x), 0.0, &cfg).is_err());
        assert!(stream_train_surgery(&p, &[&p], &spec, &[x], 1.5, &cfg).is_err());
    }

    #[test]
    fn neg_cosine_loss_of_aligned_columns() {
        let a = Tensor::from_fn(3, 2, |i, j| (i + j + 1) as f32);
        let b = a.map(|v| 2.0 * v);
        let (loss, _) = layer_loss(LossKind::NegCosine, &a, &b).unwrap();
        assert!((loss + 1.0).abs() < 1e-9);
    }
}
