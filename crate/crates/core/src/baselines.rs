//! Reference optimizers: dense SGD with momentum and per-step magnitude pruning.

use crate::error::{Error, Result};
use crate::init::{ParamId, ParamLayout, Seed};
use crate::nn::{DenseParams, GradientBuffer, ParamView};
use std::borrow::Cow;

/// Full weight and velocity arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOptState {
    pub weights: DenseParams<f32>,
    pub velocity: Vec<Vec<f32>>,
}

fn check_hyper(lr: f32, momentum: f32) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "need lr > 0 and 0 <= momentum < 1, got lr={lr} momentum={momentum}"
        )));
    }
    Ok(())
}

impl DenseOptState {
    /// Starts from the regenerated `W(0)` of `seed`, zero velocity.
    pub fn new(seed: Seed, layout: &ParamLayout) -> Self {
        Self {
            weights: DenseParams::initial(seed, layout),
            velocity: layout.tensors().iter().map(|s| vec![0.0; s.len]).collect(),
        }
    }

    /// `v <- mu v + g; w <- w - lr v` over every parameter.
    pub fn sgd_momentum_step(&mut self, grads: &GradientBuffer<f32>, lr: f32, momentum: f32) -> Result<()> {
        check_hyper(lr, momentum)?;
        grads.check_finite()?;
        for ((w, v), g) in self
            .weights
            .tensors
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&grads.tensors)
        {
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

impl ParamView<f32> for DenseOptState {
    fn value(&self, id: ParamId) -> f32 {
        self.weights.value(id)
    }

    fn tensor(&self, tensor_index: usize) -> Cow<'_, [f32]> {
        self.weights.tensor(tensor_index)
    }
}

/// Dense SGD that keeps only the `keep` largest-magnitude weights after each step.
/// Pruned weights keep their velocity and may re-enter the support.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudePruneState {
    pub dense: DenseOptState,
    keep: usize,
}

impl MagnitudePruneState {
    pub fn new(seed: Seed, layout: &ParamLayout, keep: usize) -> Result<Self> {
        if keep == 0 || keep > layout.total() {
            return Err(Error::Config(format!(
                "magnitude keep count {keep} must be in 1..={}",
                layout.total()
            )));
        }
        Ok(Self {
            dense: DenseOptState::new(seed, layout),
            keep,
        })
    }

    pub fn from_dense(dense: DenseOptState, keep: usize) -> Self {
        Self { dense, keep }
    }

    pub fn keep(&self) -> usize {
        self.keep
    }

    pub fn step(&mut self, grads: &GradientBuffer<f32>, lr: f32, momentum: f32) -> Result<()> {
        self.dense.sgd_momentum_step(grads, lr, momentum)?;
        let total: usize = self.dense.weights.tensors.iter().map(Vec::len).sum();
        if self.keep >= total {
            return Ok(());
        }
        // (|w|, global index); larger magnitude first, ties to the lower index
        let mut ranked: Vec<(f32, usize)> = self
            .dense
            .weights
            .tensors
            .iter()
            .flatten()
            .enumerate()
            .map(|(g, w)| (w.abs(), g))
            .collect();
        let by_rank = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        ranked.select_nth_unstable_by(self.keep - 1, by_rank);
        let mut survives = vec![false; total];
        for &(_, g) in &ranked[..self.keep] {
            survives[g] = true;
        }
        for (w, keep) in self
            .dense
            .weights
            .tensors
            .iter_mut()
            .flatten()
            .zip(&survives)
        {
            if !keep {
                *w = 0.0;
            }
        }
        Ok(())
    }

    /// Number of nonzero weights.
    pub fn support(&self) -> usize {
        self.dense
            .weights
            .tensors
            .iter()
            .flatten()
            .filter(|&&w| w != 0.0)
            .count()
    }
}

impl ParamView<f32> for MagnitudePruneState {
    fn value(&self, id: ParamId) -> f32 {
        self.dense.value(id)
    }

    fn tensor(&self, tensor_index: usize) -> Cow<'_, [f32]> {
        self.dense.tensor(tensor_index)
    }
}
