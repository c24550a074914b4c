//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here calls the code paths it is checking.

#![allow(dead_code)]

use dropback::baselines::DenseOptState;
use dropback::data::{self, BatchPlan, Dataset};
use dropback::init::{self, XorShift32};
use dropback::nn::{self, DenseParams, GradientBuffer, Matrix, NetworkSpec, ParamView};
use dropback::{Seed, TrackedSet};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Gradient check

/// Per-sample forward pass written out longhand. Returns the mean
/// cross-entropy and every hidden pre-activation in evaluation order.
pub fn oracle_loss(spec: &NetworkSpec, params: &[Vec<f64>], x: &[Vec<f64>], y: &[u8]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut pre = Vec::new();
    for (xs, &label) in x.iter().zip(y) {
        let mut h = xs.clone();
        for (l, layer) in spec.layers.iter().enumerate() {
            let w = &params[2 * l];
            let b = &params[2 * l + 1];
            let mut z = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                let mut s = b[o];
                for i in 0..layer.in_dim {
                    s += w[o * layer.in_dim + i] * h[i];
                }
                z[o] = s;
            }
            if l + 1 < spec.layers.len() {
                pre.extend_from_slice(&z);
                h = z.iter().map(|&v| v.max(0.0)).collect();
            } else {
                h = z;
            }
        }
        let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - h[label as usize];
    }
    (total / x.len() as f64, pre)
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub params: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Random MLP of at most 1000 parameters with random biases and a random batch.
pub fn random_case(case: u64) -> (NetworkSpec, DenseParams<f64>, Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = XorShift32::keyed(Seed(0xC0FFEE), case + 1);
    loop {
        let depth = 1 + rng.below(3) as usize;
        let mut dims = vec![2 + rng.below(30) as usize];
        for _ in 0..depth - 1 {
            dims.push(2 + rng.below(30) as usize);
        }
        dims.push(2 + rng.below(4) as usize);
        let spec = NetworkSpec::mlp(&dims).unwrap();
        if spec.num_params() > 1000 {
            continue;
        }
        let mut params = DenseParams::<f64>::zeros(&spec.layout);
        for t in &mut params.tensors {
            for v in t.iter_mut() {
                *v = 0.6 * rng.next_normal();
            }
        }
        let rows = 1 + rng.below(6) as usize;
        let x: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..dims[0]).map(|_| 2.0 * rng.next_unit() - 1.0).collect())
            .collect();
        let classes = *dims.last().unwrap() as u32;
        let y = (0..rows).map(|_| rng.below(classes) as u8).collect();
        return (spec, params, x, y);
    }
}

/// Central differences against `nn::backward` at f64, skipping any parameter
/// whose perturbation moves a ReLU pre-activation across zero.
pub fn gradcheck(spec: &NetworkSpec, params: &DenseParams<f64>, x: &[Vec<f64>], y: &[u8]) -> GradReport {
    let batch = Matrix::from_vec(x.len(), spec.input_dim(), x.iter().flatten().copied().collect());
    let (logits, cache) = nn::forward(spec, params, &batch).unwrap();
    let (loss, dlogits) = nn::loss_softmax_ce(&logits, y);
    let grads = nn::backward(spec, &cache, &dlogits);

    let (oracle, base_pre) = oracle_loss(spec, &params.tensors, x, y);
    assert!((oracle - loss).abs() < 1e-12 * (1.0 + loss.abs()), "forward passes disagree");

    let mut report = GradReport {
        params: spec.num_params(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
    };
    let mut p = params.tensors.clone();
    for t in 0..p.len() {
        for o in 0..p[t].len() {
            let orig = p[t][o];
            p[t][o] = orig + FD_STEP;
            let (lp, pre_p) = oracle_loss(spec, &p, x, y);
            p[t][o] = orig - FD_STEP;
            let (lm, pre_m) = oracle_loss(spec, &p, x, y);
            p[t][o] = orig;
            let crosses = base_pre
                .iter()
                .zip(&pre_p)
                .zip(&pre_m)
                .any(|((&b, &a), &c)| (b > 0.0) != (a > 0.0) || (b > 0.0) != (c > 0.0) || b == 0.0);
            if crosses {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let analytic = grads.tensors[t][o];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Training helpers

pub fn grads_for(spec: &NetworkSpec, view: &impl ParamView<f32>, x: &Matrix<f32>, y: &[u8]) -> GradientBuffer<f32> {
    let (logits, cache) = nn::forward(spec, view, x).unwrap();
    let (_, dl) = nn::loss_softmax_ce(&logits, y);
    nn::backward(spec, &cache, &dl)
}

pub fn blobs(seed: u32, classes: usize, dims: usize, per_class: usize) -> Dataset {
    data::synth_blobs(Seed(seed), classes, dims, per_class, 0.1)
}

/// Mini-batches for `steps` steps, cycling epochs.
pub fn batches(ds: &Dataset, batch: usize, steps: usize, seed: u32) -> Vec<(Matrix<f32>, Vec<u8>)> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0;
    while out.len() < steps {
        let plan = BatchPlan::new(ds.len(), batch, Seed(seed), epoch);
        for rows in plan.index_batches() {
            if out.len() == steps {
                break;
            }
            out.push(ds.gather(rows));
        }
        epoch += 1;
    }
    out
}

/// Steps Dropback at `k = |W|` and dense SGD side by side; returns the first
/// step at which any weight differs in bits, if any.
pub fn full_capacity_divergence(spec: &NetworkSpec, seed: Seed, steps: usize, lr: f32, mu: f32) -> Option<usize> {
    let ds = blobs(seed.0, spec.output_dim(), spec.input_dim(), 40);
    let mut db = TrackedSet::new(spec.num_params(), seed, spec.layout.clone()).unwrap();
    let mut sgd = DenseOptState::new(seed, &spec.layout);
    for (s, (x, y)) in batches(&ds, 16, steps, 99).iter().enumerate() {
        let g_db = grads_for(spec, &db, x, y);
        let g_sgd = grads_for(spec, &sgd, x, y);
        db.step(&g_db, lr, mu).unwrap();
        sgd.sgd_momentum_step(&g_sgd, lr, mu).unwrap();
        for t in 0..spec.layout.num_tensors() {
            let a = ParamView::tensor(&db, t);
            let b = sgd.tensor(t);
            if a.iter().zip(b.iter()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Some(s + 1);
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Top-k selection

/// Straightforward re-implementation of the tracked-set rule: keep a map of
/// stored weights, score everything, sort, cut at `k`.
pub struct BruteForceDropback {
    pub k: usize,
    pub seed: Seed,
    pub init: Vec<f32>,
    /// global index -> (value, velocity)
    pub stored: BTreeMap<usize, (f32, f32)>,
}

impl BruteForceDropback {
    pub fn new(spec: &NetworkSpec, seed: Seed, k: usize) -> Self {
        let init = (0..spec.layout.num_tensors())
            .flat_map(|t| init::regen_tensor(seed, &spec.layout, t))
            .collect();
        Self {
            k,
            seed,
            init,
            stored: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, flat_grads: &[f32], lr: f32, mu: f32) {
        let mut updated = BTreeMap::new();
        for (&i, &(value, velocity)) in &self.stored {
            let v = mu * velocity + flat_grads[i];
            updated.insert(i, (value - lr * v, v));
        }
        // (key, global index)
        let mut scored: Vec<(f32, usize)> = Vec::new();
        for (i, &g) in flat_grads.iter().enumerate() {
            match updated.get(&i) {
                Some(&(value, _)) => scored.push(((value - self.init[i]).abs(), i)),
                None => {
                    let key = (lr * g).abs();
                    if key > 0.0 {
                        scored.push((key, i));
                    }
                }
            }
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.truncate(self.k);
        self.stored = scored
            .into_iter()
            .map(|(_, i)| {
                let e = updated
                    .get(&i)
                    .copied()
                    .unwrap_or((self.init[i] - lr * flat_grads[i], flat_grads[i]));
                (i, e)
            })
            .collect();
    }

    pub fn ids(&self) -> Vec<usize> {
        self.stored.keys().copied().collect()
    }
}

/// Trains Dropback and the brute-force reference in lockstep; returns the
/// first step at which the tracked sets differ, if any.
pub fn topk_mismatch(spec: &NetworkSpec, seed: Seed, k: usize, steps: usize, lr: f32, mu: f32) -> Option<usize> {
    let ds = blobs(seed.0 ^ 0x5A5A, spec.output_dim(), spec.input_dim(), 40);
    let mut db = TrackedSet::new(k, seed, spec.layout.clone()).unwrap();
    let mut oracle = BruteForceDropback::new(spec, seed, k);
    for (s, (x, y)) in batches(&ds, 16, steps, 7).iter().enumerate() {
        let g = grads_for(spec, &db, x, y);
        let flat: Vec<f32> = g.tensors.iter().flatten().copied().collect();
        db.step(&g, lr, mu).unwrap();
        oracle.step(&flat, lr, mu);
        let ours: Vec<usize> = db
            .entries()
            .iter()
            .map(|e| spec.layout.global_index(e.id) as usize)
            .collect();
        if ours != oracle.ids() {
            return Some(s + 1);
        }
        let values_match = db.entries().iter().all(|e| {
            let gi = spec.layout.global_index(e.id) as usize;
            let (v, vel) = oracle.stored[&gi];
            v.to_bits() == e.value.to_bits() && vel.to_bits() == e.velocity.to_bits()
        });
        if !values_match {
            return Some(s + 1);
        }
    }
    None
}
