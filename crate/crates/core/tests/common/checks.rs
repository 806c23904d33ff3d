//! Finite-difference gradient checks on small random instances. Each check
//! returns the worst relative error over all parameters it covers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use merge_surgeon::bias::LossKind;
use merge_surgeon::merge::{ada_objective, collect_heads, LayerwiseVectors};
use merge_surgeon::nn::{backprop_grads, LossSignal, ModelSpec};
use merge_surgeon::surgery::{surgery_gradients, AdapterParams, GradientMode, SurgeryMode, SurgeryStack};
use merge_surgeon::{ParamSet, Tensor};

use super::*;

const H: f64 = 1e-6;
/// Minimum distance of any ReLU input (or L1 residual) from zero.
const MARGIN: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn perturbed(p: &ParamSet, rng: &mut ChaCha8Rng, scale: f32) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in p.iter() {
        let data: Vec<f32> = t.data().iter().map(|&v| v + rng.random_range(-scale..scale)).collect();
        out.set(n, Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    out
}

fn small_spec() -> ModelSpec {
    ModelSpec::new(3, vec![4, 5, 3]).unwrap()
}

fn min_pre_activation(p: &P64, layers: usize, x: &[Vec<f64>]) -> f64 {
    x.iter()
        .flat_map(|xi| {
            let (pre, _) = mlp_trace(p, layers, xi);
            pre[..layers - 1].iter().flatten().map(|v| v.abs()).collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Flattens a P64 restricted to `names` into one vector, and writes it back.
fn flatten(p: &P64, names: &[String]) -> Vec<f64> {
    names.iter().flat_map(|n| p[n].1.iter().copied()).collect()
}

fn unflatten(p: &mut P64, names: &[String], flat: &[f64]) {
    let mut at = 0;
    for n in names {
        let len = p[n].1.len();
        p.get_mut(n).unwrap().1.copy_from_slice(&flat[at..at + len]);
        at += len;
    }
}

/// Backbone + head cross-entropy gradients against central differences.
pub fn backbone_ce(seed: u64) -> f64 {
    let spec = small_spec();
    let layers = spec.num_layers();
    let mut attempt = 0;
    loop {
        let s = seed.wrapping_mul(1000).wrapping_add(attempt);
        attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut params = spec.init_backbone(s);
        params.extend_from(&spec.init_head("0", 3, s + 1));
        let params = perturbed(&params, &mut rng, 0.1);
        let x = uniform(&mut rng, 3, 6, 1.5);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let p64 = to_p64(&params);
        let cols = columns(&x);
        if min_pre_activation(&p64, layers, &cols) < MARGIN {
            continue;
        }
        let g = backprop_grads(&params, &spec, &x, LossSignal::CrossEntropy { task: "0", labels: &labels }).unwrap();
        let mut worst: f64 = 0.0;
        for name in params.names() {
            let analytic: Vec<f64> = g.grads.require(name).unwrap().data().iter().map(|&v| v as f64).collect();
            let names = vec![name.to_string()];
            let mut work = p64.clone();
            let mut flat = flatten(&work, &names);
            let numeric = central_diff(&mut flat, H, |v| {
                unflatten(&mut work, &names, v);
                mean_ce(&work, layers, "0", &cols, &labels)
            });
            worst = worst.max(rel_error(&analytic, &numeric));
        }
        return worst;
    }
}

/// AdaMerging coefficient gradients (`⟨G_l, τ_l⟩`) against central
/// differences of the f64 mean-entropy objective.
pub fn ada_coefficients(seed: u64) -> f64 {
    let spec = small_spec();
    let layers = spec.num_layers();
    let mut attempt = 0;
    loop {
        let s = seed.wrapping_mul(1000).wrapping_add(attempt);
        attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let pre = perturbed(&spec.init_backbone(s), &mut rng, 0.05);
        let experts: Vec<ParamSet> = (0..2)
            .map(|t| {
                let mut e = perturbed(&pre, &mut rng, 0.3);
                e.extend_from(&spec.init_head(&t.to_string(), 3, s + 10 + t as u64));
                e
            })
            .collect();
        let refs: Vec<&ParamSet> = experts.iter().collect();
        let coeffs: Vec<Vec<f64>> = (0..layers).map(|_| (0..2).map(|_| rng.random_range(0.2..0.8)).collect()).collect();
        let batches: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, 3, 5, 1.5)).collect();

        let pre64 = to_p64(&pre);
        let exp64: Vec<P64> = experts.iter().map(to_p64).collect();
        let heads64 = to_p64(&collect_heads(&refs));
        let cols: Vec<Vec<Vec<f64>>> = batches.iter().map(columns).collect();
        let objective = |c: &[Vec<f64>]| {
            let mut m = layerwise_merge(&pre64, &exp64, c);
            m.extend(heads64.clone());
            (0..2).map(|t| mean_entropy(&m, layers, &t.to_string(), &cols[t])).sum::<f64>() / 2.0
        };
        let merged0 = layerwise_merge(&pre64, &exp64, &coeffs);
        if cols.iter().any(|c| min_pre_activation(&merged0, layers, c) < MARGIN) {
            continue;
        }

        let vectors = LayerwiseVectors::new(&pre, &refs, &spec).unwrap();
        let (_, grad) = ada_objective(&vectors, &coeffs, &spec, &collect_heads(&refs), &batches).unwrap();
        let analytic: Vec<f64> = grad.into_iter().flatten().collect();
        let mut flat: Vec<f64> = coeffs.iter().flatten().copied().collect();
        let numeric = central_diff(&mut flat, H, |v| {
            let c: Vec<Vec<f64>> = v.chunks(2).map(|r| r.to_vec()).collect();
            objective(&c)
        });
        return rel_error(&analytic, &numeric);
    }
}

fn adapter64(a: &AdapterParams) -> Adapter64 {
    let t = |t: &Tensor| (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>());
    (t(&a.down), t(&a.up))
}

/// Smallest |value| among corrected-path ReLU inputs, adapter hidden units
/// and (for L1) residuals.
fn surgery_margin(
    merged: &P64,
    expert: &P64,
    layers: usize,
    adapters: &BTreeMap<usize, Adapter64>,
    x: &[Vec<f64>],
    psi: LossKind,
) -> f64 {
    let mut m = f64::INFINITY;
    for xi in x {
        let target = mlp_trace(expert, layers, xi).1;
        let mut z = xi.clone();
        for l in 1..=layers {
            let a = affine(&merged[&format!("block{l}.weight")], &merged[&format!("block{l}.bias")], &z);
            if l < layers {
                m = a.iter().fold(m, |m, v| m.min(v.abs()));
                z = relu(a);
            } else {
                z = a;
            }
            if let Some(ad) = adapters.get(&l) {
                m = matvec(&ad.0, &z).iter().fold(m, |m, v| m.min(v.abs()));
                let omega = adapter_apply(ad, &z);
                z = z.iter().zip(&omega).map(|(a, b)| a - b).collect();
                if psi == LossKind::L1 {
                    m = z.iter().zip(&target[l - 1]).fold(m, |m, (a, b)| m.min((a - b).abs()));
                }
            }
        }
    }
    m
}

/// Adapter gradients of every layer against central differences: of that
/// layer's own loss under `BlockCoordinate`, of the summed loss under
/// `FullBackprop`.
pub fn adapters(seed: u64, psi: LossKind, mode: GradientMode) -> f64 {
    let spec = small_spec();
    let layers = spec.num_layers();
    let mut attempt = 0;
    loop {
        let s = seed.wrapping_mul(1000).wrapping_add(attempt);
        attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let merged = perturbed(&spec.init_backbone(s), &mut rng, 0.1);
        let expert = perturbed(&merged, &mut rng, 0.3);
        let mut stack = SurgeryStack::init(&spec, 1, SurgeryMode::AllLayers, psi, 2, s).unwrap();
        for a in stack.adapters.values_mut() {
            a.up = uniform(&mut rng, a.up.rows(), a.up.cols(), 0.5);
        }
        let x = uniform(&mut rng, 3, 5, 1.5);
        let cols = columns(&x);
        let m64 = to_p64(&merged);
        let e64 = to_p64(&expert);
        let ad64: BTreeMap<usize, Adapter64> = stack.adapters.iter().map(|(&(_, l), a)| (l, adapter64(a))).collect();
        if surgery_margin(&m64, &e64, layers, &ad64, &cols, psi) < MARGIN {
            continue;
        }
        let grads = surgery_gradients(&merged, &expert, &spec, &stack, &x, 0, mode).unwrap();
        let mut worst: f64 = 0.0;
        for (&l, (g_down, g_up)) in &grads {
            for (which, g) in [(0, g_down), (1, g_up)] {
                let analytic: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
                let mut work = ad64.clone();
                let mut flat = if which == 0 { work[&l].0 .1.clone() } else { work[&l].1 .1.clone() };
                let numeric = central_diff(&mut flat, H, |v| {
                    let entry = work.get_mut(&l).unwrap();
                    if which == 0 {
                        entry.0 .1.copy_from_slice(v);
                    } else {
                        entry.1 .1.copy_from_slice(v);
                    }
                    let losses = surgery_losses(&m64, &e64, layers, &work, &cols, psi);
                    match mode {
                        GradientMode::BlockCoordinate => losses[&l],
                        GradientMode::FullBackprop => losses.values().sum(),
                    }
                });
                worst = worst.max(rel_error(&analytic, &numeric));
            }
        }
        return worst;
    }
}
