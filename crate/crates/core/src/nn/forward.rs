use crate::error::{shape_err, Error, Result};
use crate::nn::ModelSpec;
use crate::tensor::{block_bias, block_weight, head_bias, head_weight, ParamSet, Tensor};

/// Per-layer representations `Z_1..Z_L`, each `d_l × batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepTrace {
    layers: Vec<Tensor>,
}

impl RepTrace {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("empty trace"));
        }
        let n = layers[0].cols();
        if layers.iter().any(|z| z.cols() != n) {
            return Err(shape_err("trace layers disagree on batch size"));
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Representation of layer `l` (1-based).
    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l - 1]
    }

    pub fn last(&self) -> &Tensor {
        self.layers.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }
}

/// One block: `W_l · input + b_l`, followed by ReLU unless `l` is the last block.
pub fn block_forward(params: &ParamSet, spec: &ModelSpec, l: usize, input: &Tensor) -> Result<Tensor> {
    let w = params.require(&block_weight(l))?;
    let b = params.require(&block_bias(l))?;
    if input.rows() != w.cols() {
        return Err(shape_err(format!("block{l} expects {} inputs, got {}", w.cols(), input.rows())));
    }
    let pre = w.matmul(input)?.add_column(b)?;
    Ok(if l < spec.num_layers() { pre.relu() } else { pre })
}

pub fn forward_with_trace(params: &ParamSet, spec: &ModelSpec, x: &Tensor) -> Result<RepTrace> {
    spec.validate_backbone(params)?;
    if x.shape().len() != 2 || x.rows() != spec.input_dim {
        return Err(shape_err(format!("input {:?} for input_dim {}", x.shape(), spec.input_dim)));
    }
    let mut layers = Vec::with_capacity(spec.num_layers());
    let mut z = x.clone();
    for l in 1..=spec.num_layers() {
        z = block_forward(params, spec, l, &z)?;
        layers.push(z.clone());
    }
    RepTrace::new(layers)
}

/// `W_head · Z_L + b_head`, giving `C × batch` logits.
pub fn head_logits(params: &ParamSet, task: &str, z_last: &Tensor) -> Result<Tensor> {
    let w = params.get(&head_weight(task)).ok_or_else(|| missing_head(task))?;
    let b = params.get(&head_bias(task)).ok_or_else(|| missing_head(task))?;
    w.matmul(z_last)?.add_column(b)
}

fn missing_head(task: &str) -> Error {
    match task.parse::<usize>() {
        Ok(t) => Error::MissingHead(t),
        Err(_) => Error::MissingParam(head_weight(task)),
    }
}

/// Column-wise softmax in `f64`.
pub fn softmax_columns(logits: &Tensor) -> Vec<Vec<f64>> {
    let (c, n) = (logits.rows(), logits.cols());
    (0..n)
        .map(|j| {
            let max = (0..c).map(|i| logits.at(i, j) as f64).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..c).map(|i| (logits.at(i, j) as f64 - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn column_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Mean over columns of the Shannon entropy of `softmax(column)`.
pub fn softmax_entropy(logits: &Tensor) -> f64 {
    let probs = softmax_columns(logits);
    probs.iter().map(|p| column_entropy(p)).sum::<f64>() / probs.len() as f64
}

/// Mean entropy and its gradient with respect to the logits.
pub fn entropy_with_grad(logits: &Tensor) -> (f64, Tensor) {
    let (c, n) = (logits.rows(), logits.cols());
    let probs = softmax_columns(logits);
    let mut grad = Tensor::zeros(&[c, n]);
    let mut total = 0.0;
    for (j, p) in probs.iter().enumerate() {
        let h = column_entropy(p);
        total += h;
        for i in 0..c {
            let lp = if p[i] > 0.0 { p[i].ln() } else { 0.0 };
            grad.data_mut()[i * n + j] = (-p[i] * (lp + h) / n as f64) as f32;
        }
    }
    (total / n as f64, grad)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (c, n) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for batch {n}", labels.len())));
    }
    let probs = softmax_columns(logits);
    let mut grad = Tensor::zeros(&[c, n]);
    let mut total = 0.0;
    for (j, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= c {
            return Err(shape_err(format!("label {y} for {c} classes")));
        }
        total -= p[y].max(1e-300).ln();
        for i in 0..c {
            let target = if i == y { 1.0 } else { 0.0 };
            grad.data_mut()[i * n + j] = ((p[i] - target) / n as f64) as f32;
        }
    }
    Ok((total / n as f64, grad))
}

/// Index of the largest logit per column; ties go to the lowest class index.
pub fn argmax_columns(logits: &Tensor) -> Vec<usize> {
    let (c, n) = (logits.rows(), logits.cols());
    (0..n)
        .map(|j| {
            let mut best = 0;
            for i in 1..c {
                if logits.at(i, j) > logits.at(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    fn identity(n: usize) -> Tensor {
        Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_params_give_zero_trace() {
        let spec = ModelSpec::new(3, vec![4, 2]).unwrap();
        let mut p = ParamSet::new();
        for l in 1..=2 {
            p.set(&block_weight(l), Tensor::zeros(&[spec.width(l), spec.width(l - 1)]));
            p.set(&block_bias(l), Tensor::zeros(&[spec.width(l)]));
        }
        let x = Tensor::from_fn(3, 5, |i, j| (i + j) as f32 - 2.0);
        let trace = forward_with_trace(&p, &spec, &x).unwrap();
        assert!(trace.layers().iter().all(|z| z.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_blocks_pass_nonnegative_input() {
        let spec = ModelSpec::new(3, vec![3, 3]).unwrap();
        let mut p = ParamSet::new();
        for l in 1..=2 {
            p.set(&block_weight(l), identity(3));
            p.set(&block_bias(l), Tensor::zeros(&[3]));
        }
        let x = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f32 * 0.5);
        let trace = forward_with_trace(&p, &spec, &x).unwrap();
        assert_eq!(trace.layer(1), &x);
        assert_eq!(trace.layer(2), &x);
    }

    #[test]
    fn matches_hand_computed_chain() {
        // Block 1: W1 = [[1,-2],[0.5,3]], b1 = [0.1,-4]; block 2: W2 = [[2,1],[-1,1]], b2 = [0,0.5]
        // x = [1, 2]ᵀ: a1 = [1-4+0.1, 0.5+6-4] = [-2.9, 2.5] → z1 = [0, 2.5]
        // z2 = [2*0 + 2.5, 0 + 2.5 + 0.5] = [2.5, 3.0] (no ReLU on last block)
        let spec = ModelSpec::new(2, vec![2, 2]).unwrap();
        let mut p = ParamSet::new();
        p.set("block1.weight", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        p.set("block1.bias", Tensor::new(vec![2], vec![0.1, -4.0]).unwrap());
        p.set("block2.weight", Tensor::new(vec![2, 2], vec![2.0, 1.0, -1.0, 1.0]).unwrap());
        p.set("block2.bias", Tensor::new(vec![2], vec![0.0, 0.5]).unwrap());
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let trace = forward_with_trace(&p, &spec, &x).unwrap();
        let expect1 = [0.0, 2.5];
        let expect2 = [2.5, 3.0];
        for (a, b) in trace.layer(1).data().iter().zip(expect1) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in trace.layer(2).data().iter().zip(expect2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let spec = ModelSpec::new(3, vec![4, 2]).unwrap();
        let p = spec.init_backbone(0);
        assert!(forward_with_trace(&p, &spec, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn entropy_of_uniform_is_ln_c() {
        let logits = Tensor::filled(&[7, 3], 1.5);
        assert!((softmax_entropy(&logits) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_near_one_hot() {
        let mut logits = Tensor::zeros(&[4, 1]);
        logits.data_mut()[2] = 1e4;
        assert!(softmax_entropy(&logits) < 1e-6);
    }

    #[test]
    fn entropy_two_class() {
        // p = (0.25, 0.75): -(0.25 ln 0.25 + 0.75 ln 0.75) = 0.5623351446188083
        let logits = Tensor::new(vec![2, 1], vec![0.0, 3f32.ln()]).unwrap();
        assert!((softmax_entropy(&logits) - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn entropy_grad_matches_finite_differences() {
        let logits = Tensor::new(vec![3, 2], vec![0.3, -1.2, 2.0, 0.1, -0.5, 0.7]).unwrap();
        let (_, g) = entropy_with_grad(&logits);
        let eps = 1e-3;
        for k in 0..logits.len() {
            let mut up = logits.clone();
            up.data_mut()[k] += eps;
            let mut dn = logits.clone();
            dn.data_mut()[k] -= eps;
            let fd = (softmax_entropy(&up) - softmax_entropy(&dn)) / (2.0 * eps as f64);
            assert!((fd - g.data()[k] as f64).abs() < 1e-4, "k={k} fd={fd} g={}", g.data()[k]);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.0]).unwrap();
        assert_eq!(argmax_columns(&logits), vec![0, 0]);
    }
}
