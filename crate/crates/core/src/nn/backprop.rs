//! Reverse-mode gradients for the affine+ReLU block family.
//!
//! ReLU's derivative at exactly 0 is taken as 0.

use crate::error::{shape_err, Result};
use crate::nn::forward::{cross_entropy_with_grad, entropy_with_grad, forward_with_trace, head_logits, RepTrace};
use crate::nn::ModelSpec;
use crate::tensor::{block_bias, block_weight, head_bias, head_weight, ParamSet, Tensor};

/// What the scalar loss is.
#[derive(Clone, Copy, Debug)]
pub enum LossSignal<'a> {
    /// Mean cross-entropy of `head.{task}` against labels.
    CrossEntropy { task: &'a str, labels: &'a [usize] },
    /// Mean softmax entropy of `head.{task}` predictions.
    Entropy { task: &'a str },
    /// Caller-supplied `∂loss/∂Z_L`; the reported loss is 0.
    Adjoint(&'a Tensor),
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Same names as the parameters that influenced the loss (backbone, plus
    /// the head when a head-based signal is used).
    pub grads: ParamSet,
}

pub fn backprop_grads(params: &ParamSet, spec: &ModelSpec, x: &Tensor, signal: LossSignal<'_>) -> Result<Gradients> {
    let trace = forward_with_trace(params, spec, x)?;
    let z_last = trace.last();

    let (loss, d_top, head) = match signal {
        LossSignal::CrossEntropy { task, labels } => {
            spec.validate_head(params, task)?;
            let logits = head_logits(params, task, z_last)?;
            let (loss, d_logits) = cross_entropy_with_grad(&logits, labels)?;
            let (d_z, hg) = head_backward(params, task, z_last, &d_logits)?;
            (loss, d_z, Some(hg))
        }
        LossSignal::Entropy { task } => {
            spec.validate_head(params, task)?;
            let logits = head_logits(params, task, z_last)?;
            let (loss, d_logits) = entropy_with_grad(&logits);
            let (d_z, hg) = head_backward(params, task, z_last, &d_logits)?;
            (loss, d_z, Some(hg))
        }
        LossSignal::Adjoint(adj) => {
            adj.same_shape(z_last)?;
            (0.0, adj.clone(), None)
        }
    };

    let mut grads = backbone_backward(params, spec, x, &trace, d_top)?;
    if let Some(hg) = head {
        grads.extend_from(&hg);
    }
    Ok(Gradients { loss, grads })
}

fn head_backward(params: &ParamSet, task: &str, z_last: &Tensor, d_logits: &Tensor) -> Result<(Tensor, ParamSet)> {
    let w = params.require(&head_weight(task))?;
    let mut g = ParamSet::new();
    g.set(&head_weight(task), d_logits.matmul_t(z_last)?);
    g.set(&head_bias(task), d_logits.row_sums());
    Ok((w.t_matmul(d_logits)?, g))
}

/// Propagates `∂loss/∂Z_L` down through every block, returning block grads in
/// the same order as the backbone parameters.
pub fn backbone_backward(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    trace: &RepTrace,
    d_top: Tensor,
) -> Result<ParamSet> {
    let layers = spec.num_layers();
    if trace.num_layers() != layers {
        return Err(shape_err("trace depth does not match spec"));
    }
    let mut per_layer: Vec<(Tensor, Tensor)> = Vec::with_capacity(layers);
    let mut d_z = d_top;
    for l in (1..=layers).rev() {
        let z = trace.layer(l);
        let d_pre = if l < layers { d_z.zip_map(z, |g, a| if a > 0.0 { g } else { 0.0 })? } else { d_z };
        let input = if l > 1 { trace.layer(l - 1) } else { x };
        per_layer.push((d_pre.matmul_t(input)?, d_pre.row_sums()));
        if l > 1 {
            d_z = params.require(&block_weight(l))?.t_matmul(&d_pre)?;
        } else {
            d_z = d_pre;
        }
    }
    let mut g = ParamSet::new();
    for (l, (dw, db)) in (1..=layers).zip(per_layer.into_iter().rev()) {
        g.set(&block_weight(l), dw);
        g.set(&block_bias(l), db);
    }
    Ok(g)
}
