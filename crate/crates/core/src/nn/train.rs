use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ShuffledBatches};
use crate::error::{invalid, Error, Result};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::backprop::{backprop_grads, LossSignal};
use crate::nn::spec::PRETRAIN_HEAD;
use crate::nn::ModelSpec;
use crate::seed::derive_seed;
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch: 16, iterations: 1000, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// Mini-batch loss at each iteration (before that iteration's update).
    pub losses: Vec<f64>,
}

/// Cross-entropy training of backbone + `head.{task}` on a labeled dataset.
pub fn train_classifier(
    mut params: ParamSet,
    spec: &ModelSpec,
    task: &str,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate_backbone(&params)?;
    spec.validate_head(&params, task)?;
    let inputs = data.inputs();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut batches = ShuffledBatches::new(data.len(), cfg.batch);
    let mut adam = Adam::new(cfg.adam);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = batches.next_batch(&mut rng);
        let x = inputs.select_columns(idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let g = backprop_grads(&params, spec, &x, LossSignal::CrossEntropy { task, labels: &y })?;
        if !g.loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("training {task}, iteration {}", it + 1)));
        }
        losses.push(g.loss);
        adam.step_paramset(&mut params, &g.grads)?;
    }
    Ok(TrainOutcome { params, losses })
}

/// Trains the shared backbone from scratch on the task-agnostic mixture.
/// The result carries `head.pretrain`.
pub fn pretrain(spec: &ModelSpec, mixture: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut params = spec.init_backbone(derive_seed(cfg.seed, "backbone"));
    params.extend_from(&spec.init_head(PRETRAIN_HEAD, mixture.num_classes, derive_seed(cfg.seed, "head")));
    train_classifier(params, spec, PRETRAIN_HEAD, mixture, cfg)
}

/// Fine-tunes the pretrained backbone with a fresh head for `task`.
/// Returns backbone + `head.{task}` only.
pub fn train_expert(
    pretrained: &ParamSet,
    spec: &ModelSpec,
    task: usize,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let key = task.to_string();
    let mut params = pretrained.backbone();
    let head_seed = derive_seed(cfg.seed, &format!("head.{task}"));
    params.extend_from(&spec.init_head(&key, data.num_classes, head_seed));
    train_classifier(params, spec, &key, data, cfg)
}
