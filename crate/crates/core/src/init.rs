//! Stateless regeneration of initial weight values.
//!
//! Every initial value is a pure function of `(seed, global parameter index)`.
//! Nothing is cached: callers recompute a value each time they need it, so
//! untracked weights never occupy memory.
//!
//! The keying scheme is fixed and must not change once runs are recorded:
//!
//! ```text
//! s0 = seed ^ (0x9E3779B9 * (g + 1))        (mod 2^32, g = global flat index)
//! s0 = 0x9E3779B9 if s0 == 0
//! b1 = xorshift(xorshift(xorshift(s0)))
//! b2 = xorshift(b1)
//! u  = (b + 0.5) / 2^32                      (strictly inside (0, 1))
//! z  = sqrt(-2 ln u1) * cos(2 pi u2)
//! ```

use serde::{Deserialize, Serialize};
use std::fmt;

/// Golden-ratio increment used to spread consecutive indices over the state space.
pub const GOLDEN: u32 = 0x9E37_79B9;

const TWO_POW_32: f64 = 4_294_967_296.0;

/// Global seed of a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u32);

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifies one scalar parameter: a tensor and a row-major offset inside it.
///
/// Ordering is lexicographic, which coincides with the global flat order
/// because tensors are laid out back to back in `tensor_index` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub tensor_index: u32,
    pub flat_offset: u32,
}

impl ParamId {
    pub const fn new(tensor_index: u32, flat_offset: u32) -> Self {
        Self {
            tensor_index,
            flat_offset,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}[{}]", self.tensor_index, self.flat_offset)
    }
}

/// How a tensor's initial values are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    /// `N(0, sigma^2)` with `sigma = 1 / sqrt(fan_in)`.
    ScaledNormal { sigma: f32, fan_in: u32 },
    /// Every element equals `value`; the PRNG is not consulted.
    Constant { value: f32 },
}

impl InitSpec {
    /// LeCun-style scaled normal for a layer with `fan_in` inputs.
    pub fn scaled_normal(fan_in: u32) -> Self {
        assert!(fan_in > 0, "fan_in must be positive");
        InitSpec::ScaledNormal {
            sigma: (1.0 / (fan_in as f64).sqrt()) as f32,
            fan_in,
        }
    }

    pub fn constant(value: f32) -> Self {
        InitSpec::Constant { value }
    }
}

/// One Marsaglia 13/17/5 xorshift step. Bijective on nonzero inputs; 0 is a fixed point.
#[inline]
pub fn xorshift32_step(state: u32) -> u32 {
    debug_assert!(state != 0, "xorshift32 state must be nonzero");
    let mut x = state;
    x ^= x << 13;
    x ^= x >> 17;
    x ^= x << 5;
    x
}

/// Pre-whitening state for global index `g`.
#[inline]
pub fn derive_state_global(seed: Seed, g: u64) -> u32 {
    let counter = (g as u32).wrapping_add(1);
    let s0 = seed.0 ^ GOLDEN.wrapping_mul(counter);
    if s0 == 0 {
        GOLDEN
    } else {
        s0
    }
}

/// Maps 32 random bits to a uniform strictly inside `(0, 1)`.
#[inline]
pub fn bits_to_unit(bits: u32) -> f64 {
    (bits as f64 + 0.5) / TWO_POW_32
}

/// Standard normal variate for global index `g` (first Box–Muller output).
#[inline]
pub fn standard_normal_global(seed: Seed, g: u64) -> f64 {
    let s0 = derive_state_global(seed, g);
    let b1 = xorshift32_step(xorshift32_step(xorshift32_step(s0)));
    let b2 = xorshift32_step(b1);
    let u1 = bits_to_unit(b1);
    let u2 = bits_to_unit(b2);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Initial value of the parameter at global index `g` under `spec`.
#[inline]
pub fn init_value_global(seed: Seed, g: u64, spec: InitSpec) -> f32 {
    match spec {
        InitSpec::Constant { value } => value,
        InitSpec::ScaledNormal { sigma, .. } => {
            if sigma == 0.0 {
                0.0
            } else {
                (sigma as f64 * standard_normal_global(seed, g)) as f32
            }
        }
    }
}

/// A network's tensor table: where each tensor starts in the global flat order
/// and how it is initialized. This is all that is needed to regenerate `W(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    tensors: Vec<TensorSlot>,
    total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub shape: Vec<usize>,
    pub init: InitSpec,
    pub offset: u64,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(tensors: impl IntoIterator<Item = (Vec<usize>, InitSpec)>) -> Self {
        let mut total = 0u64;
        let tensors = tensors
            .into_iter()
            .map(|(shape, init)| {
                let len = shape.iter().product::<usize>();
                let slot = TensorSlot {
                    shape,
                    init,
                    offset: total,
                    len,
                };
                total += len as u64;
                slot
            })
            .collect();
        Self { tensors, total }
    }

    pub fn total(&self) -> usize {
        self.total as usize
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, tensor_index: usize) -> &TensorSlot {
        &self.tensors[tensor_index]
    }

    pub fn tensors(&self) -> &[TensorSlot] {
        &self.tensors
    }

    pub fn global_index(&self, id: ParamId) -> u64 {
        self.tensors[id.tensor_index as usize].offset + id.flat_offset as u64
    }

    /// Inverse of [`global_index`](Self::global_index).
    pub fn param_id(&self, g: u64) -> ParamId {
        debug_assert!(g < self.total);
        let t = self.tensors.partition_point(|s| s.offset + s.len as u64 <= g);
        ParamId::new(t as u32, (g - self.tensors[t].offset) as u32)
    }

    /// Iterates every parameter id in global order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.tensors
            .iter()
            .enumerate()
            .flat_map(|(t, s)| (0..s.len as u32).map(move |o| ParamId::new(t as u32, o)))
    }
}

/// Derives the pre-whitening state of `id`.
pub fn derive_state(seed: Seed, layout: &ParamLayout, id: ParamId) -> u32 {
    derive_state_global(seed, layout.global_index(id))
}

/// Initial value of parameter `id`, recomputed from scratch.
pub fn init_value(seed: Seed, layout: &ParamLayout, id: ParamId) -> f32 {
    let slot = layout.tensor(id.tensor_index as usize);
    init_value_global(seed, slot.offset + id.flat_offset as u64, slot.init)
}

/// Bulk regeneration of one tensor into `out` (row-major).
pub fn regen_tensor_into(seed: Seed, layout: &ParamLayout, tensor_index: usize, out: &mut [f32]) {
    let slot = layout.tensor(tensor_index);
    assert_eq!(out.len(), slot.len, "output length does not match tensor size");
    match slot.init {
        InitSpec::Constant { value } => out.fill(value),
        spec => {
            for (o, v) in out.iter_mut().enumerate() {
                *v = init_value_global(seed, slot.offset + o as u64, spec);
            }
        }
    }
}

pub fn regen_tensor(seed: Seed, layout: &ParamLayout, tensor_index: usize) -> Vec<f32> {
    let mut out = vec![0.0; layout.tensor(tensor_index).len];
    regen_tensor_into(seed, layout, tensor_index, &mut out);
    out
}

/// Sequential xorshift stream used for shuffling and synthetic data.
#[derive(Clone, Debug)]
pub struct XorShift32 {
    state: u32,
}

impl XorShift32 {
    /// Stream number `stream` for `seed`, keyed the same way as parameters.
    pub fn keyed(seed: Seed, stream: u64) -> Self {
        let mut rng = Self {
            state: derive_state_global(seed, stream),
        };
        // discard the weakly mixed first outputs
        for _ in 0..3 {
            rng.next_u32();
        }
        rng
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        self.state = xorshift32_step(self.state);
        self.state
    }

    /// Uniform in `(0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        bits_to_unit(self.next_u32())
    }

    /// Uniform integer in `0..bound` by multiply-shift.
    pub fn below(&mut self, bound: u32) -> u32 {
        ((self.next_u32() as u64 * bound as u64) >> 32) as u32
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
