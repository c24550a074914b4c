use crate::baselines::{DenseOptState, MagnitudePruneState};
use crate::dropback::{StepStats, TrackedSet};
use crate::error::Result;
use crate::init::{ParamId, Seed};
use crate::metrics;
use crate::nn::{GradientBuffer, NetworkSpec, ParamView};
use std::borrow::Cow;

/// Any of the supported optimizer states.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Dropback(TrackedSet),
    Sgd(DenseOptState),
    Magnitude(MagnitudePruneState),
}

impl Optimizer {
    pub fn kind(&self) -> &'static str {
        match self {
            Optimizer::Dropback(_) => "dropback",
            Optimizer::Sgd(_) => "sgd",
            Optimizer::Magnitude(_) => "magnitude",
        }
    }

    /// Applies one step. Dense optimizers report no churn.
    pub fn step(&mut self, grads: &GradientBuffer<f32>, lr: f32, momentum: f32) -> Result<Option<StepStats>> {
        match self {
            Optimizer::Dropback(set) => set.step(grads, lr, momentum).map(Some),
            Optimizer::Sgd(s) => s.sgd_momentum_step(grads, lr, momentum).map(|_| None),
            Optimizer::Magnitude(s) => s.step(grads, lr, momentum).map(|_| None),
        }
    }

    /// Trainable scalars that must be stored to reproduce the weights
    /// (the weight budget; velocities are not counted).
    pub fn stored_weights(&self) -> usize {
        match self {
            Optimizer::Dropback(set) => set.capacity(),
            Optimizer::Sgd(s) => s.weights.tensors.iter().map(Vec::len).sum(),
            Optimizer::Magnitude(s) => s.keep(),
        }
    }

    pub fn tracked_count(&self) -> usize {
        match self {
            Optimizer::Dropback(set) => set.len(),
            Optimizer::Sgd(s) => s.weights.tensors.iter().map(Vec::len).sum(),
            Optimizer::Magnitude(s) => s.support(),
        }
    }

    pub fn freeze(&mut self) {
        if let Optimizer::Dropback(set) = self {
            set.freeze();
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, Optimizer::Dropback(set) if set.is_frozen())
    }

    /// `||w - w0||`; Dropback uses the tracked-entry shortcut.
    pub fn diffusion(&self, spec: &NetworkSpec, seed: Seed) -> f64 {
        match self {
            Optimizer::Dropback(set) => set.diffusion_l2(),
            other => metrics::diffusion_full(other, &spec.layout, seed),
        }
    }

    /// Signed displacement `w - w0` of every parameter in global order.
    pub fn accumulated_deltas(&self, spec: &NetworkSpec, seed: Seed) -> Vec<f32> {
        match self {
            Optimizer::Dropback(set) => set.accumulated_deltas(),
            other => {
                let mut out = Vec::with_capacity(spec.num_params());
                for t in 0..spec.layout.num_tensors() {
                    let w0 = crate::init::regen_tensor(seed, &spec.layout, t);
                    out.extend(other.tensor(t).iter().zip(&w0).map(|(w, w0)| w - w0));
                }
                out
            }
        }
    }

    /// Stored weights per tensor (tracked entries, or nonzero weights for dense states).
    pub fn layer_retention(&self) -> Vec<usize> {
        match self {
            Optimizer::Dropback(set) => set.layer_retention(),
            Optimizer::Sgd(s) => s.weights.tensors.iter().map(Vec::len).collect(),
            Optimizer::Magnitude(s) => s
                .dense
                .weights
                .tensors
                .iter()
                .map(|t| t.iter().filter(|&&w| w != 0.0).count())
                .collect(),
        }
    }
}

impl ParamView<f32> for Optimizer {
    fn value(&self, id: ParamId) -> f32 {
        match self {
            Optimizer::Dropback(s) => ParamView::value(s, id),
            Optimizer::Sgd(s) => s.value(id),
            Optimizer::Magnitude(s) => s.value(id),
        }
    }

    fn tensor(&self, tensor_index: usize) -> Cow<'_, [f32]> {
        match self {
            Optimizer::Dropback(s) => ParamView::tensor(s, tensor_index),
            Optimizer::Sgd(s) => s.tensor(tensor_index),
            Optimizer::Magnitude(s) => s.tensor(tensor_index),
        }
    }
}
