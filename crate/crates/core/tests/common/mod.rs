//! Independent reference implementations in plain `f64`, written without the
//! crate's tensor kernels. Used as oracles by the integration and acceptance
//! tests.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use merge_surgeon::bias::LossKind;
use merge_surgeon::{ParamSet, Tensor};

/// Name → (shape, values) in f64.
pub type P64 = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn to_p64(p: &ParamSet) -> P64 {
    p.iter().map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()))).collect()
}

/// Columns of a `d × N` tensor as vectors.
pub fn columns(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.cols()).map(|j| (0..x.rows()).map(|i| x.at(i, j) as f64).collect()).collect()
}

/// `W z + b` for a row-major `rows × cols` weight.
pub fn affine(w: &(Vec<usize>, Vec<f64>), b: &(Vec<usize>, Vec<f64>), z: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.0[0], w.0[1]);
    assert_eq!(cols, z.len());
    (0..rows).map(|i| b.1[i] + (0..cols).map(|k| w.1[i * cols + k] * z[k]).sum::<f64>()).collect()
}

pub fn matvec(w: &(Vec<usize>, Vec<f64>), z: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.0[0], w.0[1]);
    (0..rows).map(|i| (0..cols).map(|k| w.1[i * cols + k] * z[k]).sum::<f64>()).collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Pre-activations of every block for one sample, and the layer outputs.
pub fn mlp_trace(p: &P64, layers: usize, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pre = Vec::new();
    let mut out = Vec::new();
    let mut z = x.to_vec();
    for l in 1..=layers {
        let a = affine(&p[&format!("block{l}.weight")], &p[&format!("block{l}.bias")], &z);
        pre.push(a.clone());
        z = if l < layers { relu(a) } else { a };
        out.push(z.clone());
    }
    (pre, out)
}

pub fn logits(p: &P64, task: &str, z: &[f64]) -> Vec<f64> {
    affine(&p[&format!("head.{task}.weight")], &p[&format!("head.{task}.bias")], z)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn entropy(v: &[f64]) -> f64 {
    softmax(v).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

pub fn cross_entropy(v: &[f64], label: usize) -> f64 {
    -softmax(v)[label].ln()
}

/// Mean cross-entropy of backbone + `head.{task}` over the columns of `x`.
pub fn mean_ce(p: &P64, layers: usize, task: &str, x: &[Vec<f64>], labels: &[usize]) -> f64 {
    x.iter()
        .zip(labels)
        .map(|(xi, &y)| cross_entropy(&logits(p, task, mlp_trace(p, layers, xi).1.last().unwrap()), y))
        .sum::<f64>()
        / x.len() as f64
}

pub fn mean_entropy(p: &P64, layers: usize, task: &str, x: &[Vec<f64>]) -> f64 {
    x.iter().map(|xi| entropy(&logits(p, task, mlp_trace(p, layers, xi).1.last().unwrap()))).sum::<f64>()
        / x.len() as f64
}

/// `Θ₀ + Σ_t λ[l][t]·(Θ_t − Θ₀)` per block, in f64.
pub fn layerwise_merge(pre: &P64, experts: &[P64], coeffs: &[Vec<f64>]) -> P64 {
    let mut out = P64::new();
    for (name, (shape, base)) in pre.iter().filter(|(n, _)| n.starts_with("block")) {
        let l: usize = name["block".len()..].split('.').next().unwrap().parse().unwrap();
        let vals = (0..base.len())
            .map(|i| {
                base[i]
                    + experts.iter().enumerate().map(|(t, e)| coeffs[l - 1][t] * (e[name].1[i] - base[i])).sum::<f64>()
            })
            .collect();
        out.insert(name.clone(), (shape.clone(), vals));
    }
    out
}

/// Adapter weights in f64: `(down r × d, up d × r)`.
pub type Adapter64 = ((Vec<usize>, Vec<f64>), (Vec<usize>, Vec<f64>));

pub fn adapter_apply(a: &Adapter64, z: &[f64]) -> Vec<f64> {
    let h = relu(matvec(&a.0, z));
    matvec(&a.1, &h)
}

/// Per-layer surgery loss with corrections applied in the forward path,
/// normalized like the bias metric (`N·d` for L1/MSE, raw `−mean cos`).
pub fn surgery_losses(
    merged: &P64,
    expert: &P64,
    layers: usize,
    adapters: &BTreeMap<usize, Adapter64>,
    x: &[Vec<f64>],
    psi: LossKind,
) -> BTreeMap<usize, f64> {
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    for xi in x {
        let target = mlp_trace(expert, layers, xi).1;
        let mut z = xi.clone();
        for l in 1..=layers {
            let a = affine(&merged[&format!("block{l}.weight")], &merged[&format!("block{l}.bias")], &z);
            z = if l < layers { relu(a) } else { a };
            if let Some(ad) = adapters.get(&l) {
                let omega = adapter_apply(ad, &z);
                z = z.iter().zip(&omega).map(|(a, b)| a - b).collect();
                let t = &target[l - 1];
                let d = z.len() as f64;
                let v = match psi {
                    LossKind::L1 => z.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / d,
                    LossKind::Mse => z.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d,
                    LossKind::NegCosine => {
                        let dot: f64 = z.iter().zip(t).map(|(a, b)| a * b).sum();
                        let na = z.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let nb = t.iter().map(|b| b * b).sum::<f64>().sqrt();
                        -dot / (na * nb)
                    }
                };
                *totals.entry(l).or_default() += v;
            }
        }
    }
    totals.values_mut().for_each(|v| *v /= x.len() as f64);
    totals
}

/// Bias between two `d × N` traces, per the documented normalizations.
pub fn bias(a: &[Vec<f64>], b: &[Vec<f64>], psi: LossKind) -> f64 {
    let n = a.len() as f64;
    let d = a[0].len() as f64;
    match psi {
        LossKind::L1 => {
            a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).sum::<f64>() / (n * d)
        }
        LossKind::Mse => {
            a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2))).sum::<f64>() / (n * d)
        }
        LossKind::NegCosine => {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                    1.0 - dot / (nx * ny)
                })
                .sum::<f64>()
                / n
        }
    }
}

/// Ties-Merging by brute force over flat vectors: threshold trim, sign
/// election, disjoint mean. `base` and `experts` are the flat backbone.
pub fn ties_oracle(base: &[f32], experts: &[Vec<f32>], lambda: f64, keep: f64) -> Vec<f32> {
    let n = base.len();
    let k = ((keep * n as f64).ceil() as usize).clamp(1, n);
    let trimmed: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| {
            let tau: Vec<f64> = e.iter().zip(base).map(|(&x, &b)| x as f64 - b as f64).collect();
            let mut mags: Vec<f64> = tau.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let threshold = mags[k - 1];
            let above = tau.iter().filter(|v| v.abs() > threshold).count();
            let mut at_threshold_left = k - above;
            tau.iter()
                .map(|&v| {
                    if v.abs() > threshold {
                        v
                    } else if v.abs() == threshold && at_threshold_left > 0 {
                        at_threshold_left -= 1;
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            for tv in &trimmed {
                total += tv[i];
            }
            if total == 0.0 {
                return base[i];
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for tv in &trimmed {
                if tv[i] != 0.0 && (tv[i] > 0.0) == (total > 0.0) {
                    sum += tv[i];
                    count += 1;
                }
            }
            (base[i] as f64 + lambda * (sum / count as f64)) as f32
        })
        .collect()
}

/// Relative error `max|a − b| / max|b|` between an analytic gradient and its
/// finite-difference estimate.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central difference of `f` at every coordinate of `x`.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
