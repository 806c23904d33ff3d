use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::summary::Summary;
use crate::tensor::{block_bias, block_weight, head_bias, head_weight, ParamSet, Tensor};

/// Head key of the pretraining classifier.
pub const PRETRAIN_HEAD: &str = "pretrain";

/// L affine blocks `d_{l-1} → d_l`, ReLU after every block but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        if hidden.len() < 2 {
            return Err(invalid("a model needs at least 2 blocks"));
        }
        if input_dim == 0 || hidden.contains(&0) {
            return Err(invalid("all layer widths must be positive"));
        }
        Ok(Self { input_dim, hidden })
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Output width of block `layer` (1-based); `width(0)` is the input width.
    pub fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden[layer - 1]
        }
    }

    pub fn rep_dim(&self) -> usize {
        *self.hidden.last().unwrap()
    }

    pub fn validate_backbone(&self, params: &ParamSet) -> Result<()> {
        for l in 1..=self.num_layers() {
            let w = params.require(&block_weight(l))?;
            let b = params.require(&block_bias(l))?;
            if w.shape() != [self.width(l), self.width(l - 1)] || b.shape() != [self.width(l)] {
                return Err(shape_err(format!(
                    "block{l}: weight {:?}, bias {:?} for widths {}→{}",
                    w.shape(),
                    b.shape(),
                    self.width(l - 1),
                    self.width(l)
                )));
            }
        }
        Ok(())
    }

    /// Checks a head and returns its class count.
    pub fn validate_head(&self, params: &ParamSet, task: &str) -> Result<usize> {
        let w = params.require(&head_weight(task))?;
        let b = params.require(&head_bias(task))?;
        if w.shape().len() != 2 || w.cols() != self.rep_dim() || b.shape() != [w.rows()] {
            return Err(shape_err(format!("head.{task}: weight {:?}, bias {:?}", w.shape(), b.shape())));
        }
        Ok(w.rows())
    }

    /// He-uniform block weights, zero biases.
    pub fn init_backbone(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for l in 1..=self.num_layers() {
            let (rows, cols) = (self.width(l), self.width(l - 1));
            let bound = (6.0 / cols as f64).sqrt() as f32;
            let w = Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
            p.set(&block_weight(l), w);
            p.set(&block_bias(l), Tensor::zeros(&[rows]));
        }
        p
    }

    pub fn init_head(&self, task: &str, classes: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / self.rep_dim() as f64).sqrt() as f32;
        let mut p = ParamSet::new();
        p.set(&head_weight(task), Tensor::from_fn(classes, self.rep_dim(), |_, _| rng.random_range(-bound..bound)));
        p.set(&head_bias(task), Tensor::zeros(&[classes]));
        p
    }

    pub fn to_summary(&self) -> Summary {
        let mut s = Summary::new();
        s.push("input_dim", self.input_dim);
        s.push("hidden", join_dims(&self.hidden));
        s
    }

    pub fn from_summary(s: &Summary) -> Result<Self> {
        Self::new(s.parse("input_dim")?, parse_dims(s.require("hidden")?)?)
    }
}

pub fn join_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_dims(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|_| invalid(format!("bad dimension list {text:?}"))))
        .collect()
}
