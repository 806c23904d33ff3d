//! Representation bias between a merged model and the experts, layer by layer,
//! plus a deterministic PCA projection for looking at representation clouds.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{forward_with_trace, ModelSpec};
use crate::surgery::{trace_for, SurgeryStack};
use crate::tensor::{ParamSet, Tensor};

/// Distance used to compare two representation matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossKind {
    #[default]
    L1,
    Mse,
    NegCosine,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
            LossKind::NegCosine => "cos",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            "cos" => Ok(LossKind::NegCosine),
            other => Err(invalid(format!("unknown distance {other:?} (expected l1, mse or cos)"))),
        }
    }
}

/// Bias between two `d × N` representation matrices.
///
/// L1 and MSE average over all `N·d` entries. NegCosine averages `1 − cos`
/// over sample columns, so 0 always means aligned.
pub fn representation_bias(z_mtl: &Tensor, z_ind: &Tensor, psi: LossKind) -> Result<f64> {
    z_mtl.same_shape(z_ind)?;
    if z_mtl.shape().len() != 2 {
        return Err(shape_err("representations must be matrices"));
    }
    let (d, n) = (z_mtl.rows(), z_mtl.cols());
    let count = (n * d) as f64;
    let pairs = z_mtl.data().iter().zip(z_ind.data()).map(|(&a, &b)| a as f64 - b as f64);
    match psi {
        LossKind::L1 => Ok(pairs.map(f64::abs).sum::<f64>() / count),
        LossKind::Mse => Ok(pairs.map(|v| v * v).sum::<f64>() / count),
        LossKind::NegCosine => {
            let mut total = 0.0;
            for j in 0..n {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for i in 0..d {
                    let (a, b) = (z_mtl.at(i, j) as f64, z_ind.at(i, j) as f64);
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                if na == 0.0 || nb == 0.0 {
                    return Err(invalid(format!("zero column {j} in cosine bias")));
                }
                total += 1.0 - dot / (na.sqrt() * nb.sqrt());
            }
            Ok((total / n as f64).max(0.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    /// `values[layer - 1][task]`.
    pub values: Vec<Vec<f64>>,
    pub psi: LossKind,
    pub split: String,
    pub model: String,
}

impl BiasReport {
    pub fn num_layers(&self) -> usize {
        self.values.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, task: usize, layer: usize) -> f64 {
        self.values[layer - 1][task]
    }

    /// Mean over tasks at every layer.
    pub fn layer_means(&self) -> Vec<f64> {
        self.values.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
    }

    /// `task,layer,value` rows, tasks outer, layers 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,layer,value\n");
        for t in 0..self.num_tasks() {
            for l in 1..=self.num_layers() {
                out.push_str(&format!("{t},{l},{:.9}\n", self.get(t, l)));
            }
        }
        out
    }

    /// Layer-mean chart data: `layer,mean_bias`.
    pub fn layer_means_csv(&self) -> String {
        let mut out = String::from("layer,mean_bias\n");
        for (l, m) in self.layer_means().iter().enumerate() {
            out.push_str(&format!("{},{m:.9}\n", l + 1));
        }
        out
    }
}

/// Per-layer, per-task bias of `merged` (optionally with its surgery stack)
/// against each expert, over each task's inputs (`d × N`).
pub fn layerwise_bias_report(
    merged: &ParamSet,
    experts: &[&ParamSet],
    spec: &ModelSpec,
    inputs: &[Tensor],
    psi: LossKind,
    stack: Option<&SurgeryStack>,
) -> Result<BiasReport> {
    if experts.len() != inputs.len() {
        return Err(invalid(format!("{} experts but {} input sets", experts.len(), inputs.len())));
    }
    let columns: Vec<Vec<f64>> = (0..experts.len())
        .into_par_iter()
        .map(|t| {
            let merged_trace = trace_for(merged, spec, stack, &inputs[t], t)?;
            let expert_trace = forward_with_trace(experts[t], spec, &inputs[t])?;
            (1..=spec.num_layers())
                .map(|l| representation_bias(merged_trace.layer(l), expert_trace.layer(l), psi))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let values = (0..spec.num_layers()).map(|l| columns.iter().map(|c| c[l]).collect()).collect();
    Ok(BiasReport { values, psi, split: "test".into(), model: "merged".into() })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major `n × n`).
/// Returns eigenvalues and eigenvectors as columns of a row-major matrix.
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Top-2 principal directions of `reps` (`d × N`, one sample per column), as
/// `2 × d` loadings. Each direction's largest-magnitude loading is positive.
pub fn principal_axes(reps: &Tensor) -> Result<Tensor> {
    let (d, n) = (reps.rows(), reps.cols());
    if d < 2 {
        return Err(invalid("PCA needs at least 2 dimensions"));
    }
    if n < 2 {
        return Err(invalid("PCA needs at least 2 samples"));
    }
    let means: Vec<f64> = (0..d).map(|i| (0..n).map(|j| reps.at(i, j) as f64).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for k in i..d {
            let s: f64 = (0..n).map(|j| (reps.at(i, j) as f64 - means[i]) * (reps.at(k, j) as f64 - means[k])).sum();
            let c = s / (n - 1) as f64;
            cov[i * d + k] = c;
            cov[k * d + i] = c;
        }
    }
    let (vals, vecs) = symmetric_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2 * d);
    for &k in &order[..2] {
        let mut col: Vec<f64> = (0..d).map(|i| vecs[i * d + k]).collect();
        let lead = col.iter().enumerate().fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        axes.extend(col.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![2, d], axes)
}

/// Centers the columns of `reps` (`d × N`) and projects them on the top two
/// principal directions, giving `2 × N` coordinates.
pub fn pca_project(reps: &Tensor) -> Result<Tensor> {
    let axes = principal_axes(reps)?;
    let (d, n) = (reps.rows(), reps.cols());
    let means: Vec<f64> = (0..d).map(|i| (0..n).map(|j| reps.at(i, j) as f64).sum::<f64>() / n as f64).collect();
    Ok(Tensor::from_fn(2, n, |k, j| {
        (0..d).map(|i| axes.at(k, i) as f64 * (reps.at(i, j) as f64 - means[i])).sum::<f64>() as f32
    }))
}

/// `sample,group,pc1,pc2` rows for a projection.
pub fn projection_csv(coords: &Tensor, groups: &[&str]) -> String {
    let mut out = String::from("sample,group,pc1,pc2\n");
    for j in 0..coords.cols() {
        let g = groups.get(j).copied().unwrap_or("");
        out.push_str(&format!("{j},{g},{:.6},{:.6}\n", coords.at(0, j), coords.at(1, j)));
    }
    out
}
