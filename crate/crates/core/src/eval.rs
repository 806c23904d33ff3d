//! Accuracy of a backbone (+ optional surgery stack) through per-task heads.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_columns, head_logits, ModelSpec};
use crate::surgery::{trace_for, SurgeryStack};
use crate::tensor::{head_weight, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub model: String,
    pub stack: Option<String>,
    pub per_task: Vec<f64>,
    pub average: f64,
}

impl EvalResult {
    pub fn new(model: impl Into<String>, stack: Option<String>, per_task: Vec<f64>) -> Self {
        let average = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
        Self { model: model.into(), stack, per_task, average }
    }

    /// Row label used in result tables.
    pub fn label(&self) -> String {
        match &self.stack {
            Some(s) => format!("{}+{s}", self.model),
            None => self.model.clone(),
        }
    }
}

/// Class predictions for `task` on inputs `x` (`d × N`).
pub fn predict(
    params: &ParamSet,
    spec: &ModelSpec,
    stack: Option<&SurgeryStack>,
    x: &Tensor,
    task: usize,
) -> Result<Vec<usize>> {
    let key = task.to_string();
    if !params.contains(&head_weight(&key)) {
        return Err(Error::MissingHead(task));
    }
    spec.validate_head(params, &key)?;
    let trace = trace_for(params, spec, stack, x, task)?;
    Ok(argmax_columns(&head_logits(params, &key, trace.last())?))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Per-task accuracies; `params` holds the backbone and `head.{t}` for every task.
pub fn per_task_accuracy(
    params: &ParamSet,
    spec: &ModelSpec,
    stack: Option<&SurgeryStack>,
    sets: &[&Dataset],
) -> Result<Vec<f64>> {
    (0..sets.len())
        .into_par_iter()
        .map(|t| Ok(accuracy(&predict(params, spec, stack, &sets[t].inputs(), t)?, &sets[t].labels)))
        .collect()
}

pub fn mean_accuracy(
    params: &ParamSet,
    spec: &ModelSpec,
    stack: Option<&SurgeryStack>,
    sets: &[&Dataset],
) -> Result<f64> {
    let acc = per_task_accuracy(params, spec, stack, sets)?;
    Ok(acc.iter().sum::<f64>() / acc.len().max(1) as f64)
}

pub fn evaluate(
    model: &str,
    params: &ParamSet,
    spec: &ModelSpec,
    stack: Option<(&str, &SurgeryStack)>,
    sets: &[&Dataset],
) -> Result<EvalResult> {
    let per_task = per_task_accuracy(params, spec, stack.map(|s| s.1), sets)?;
    Ok(EvalResult::new(model, stack.map(|s| s.0.to_string()), per_task))
}
