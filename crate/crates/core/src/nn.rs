//! Multilayer perceptron: forward pass, softmax cross-entropy, and exact
//! reverse-mode gradients over an abstract [`ParamView`].
//!
//! All loops run in a fixed order so results are bitwise reproducible. Inner
//! loops are lane-independent (axpy form), which lets the compiler vectorize
//! them without reassociating any sum.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::{self, InitSpec, ParamId, ParamLayout, Seed};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::fmt::Debug;

/// Floating-point width the network can be evaluated at.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn from_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Architecture plus the parameter table. Per layer the weight matrix
/// (out x in, row-major) comes first, then the bias; layers in order.
/// Layer `l` therefore owns tensors `2l` and `2l + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub layout: ParamLayout,
}

impl NetworkSpec {
    /// Fully connected net with ReLU hidden layers and an identity output layer.
    /// Weights are scaled-normal (`1/sqrt(fan_in)`), biases zero.
    pub fn mlp(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "an MLP needs at least two positive layer widths, got {dims:?}"
            )));
        }
        let n = dims.len() - 1;
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Ok(Self::from_layers(layers))
    }

    pub fn from_layers(layers: Vec<LayerSpec>) -> Self {
        let layout = ParamLayout::new(layers.iter().flat_map(|l| {
            [
                (
                    vec![l.out_dim, l.in_dim],
                    InitSpec::scaled_normal(l.in_dim as u32),
                ),
                (vec![l.out_dim], InitSpec::constant(0.0)),
            ]
        }));
        Self { layers, layout }
    }

    /// 784-100-100-10, 89,610 parameters.
    pub fn mnist_100_100() -> Self {
        Self::mlp(&[784, 100, 100, 10]).expect("static dims")
    }

    /// LeNet-300-100: 784-300-100-10, 266,610 parameters.
    pub fn lenet_300_100() -> Self {
        Self::mlp(&[784, 300, 100, 10]).expect("static dims")
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Config(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        if self.layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Config("final layer must use the identity activation".into()));
        }
        if self.layout.num_tensors() != 2 * self.layers.len() {
            return Err(Error::Config("tensor table does not match layers".into()));
        }
        Ok(())
    }

    /// SHA-256 over a canonical description of layers and initializers.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = serde_json::to_string(self).expect("network spec serializes");
        let hash = Sha256::digest(canon.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Human-readable tensor name, e.g. `fc2.weight`.
    pub fn tensor_name(&self, tensor_index: usize) -> String {
        let layer = tensor_index / 2 + 1;
        let part = if tensor_index.is_multiple_of(2) { "weight" } else { "bias" };
        format!("fc{layer}.{part}")
    }
}

/// Read access to the current parameter values, wherever they live.
pub trait ParamView<T: Scalar> {
    fn value(&self, id: ParamId) -> T;
    /// Whole tensor in row-major order.
    fn tensor(&self, tensor_index: usize) -> Cow<'_, [T]>;
}

/// Parameters held in full, one dense array per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            tensors: layout
                .tensors()
                .iter()
                .map(|s| vec![T::zero(); s.len])
                .collect(),
        }
    }

    /// Regenerated initial values `W(0)`.
    pub fn initial(seed: Seed, layout: &ParamLayout) -> Self {
        Self {
            tensors: (0..layout.num_tensors())
                .map(|t| {
                    init::regen_tensor(seed, layout, t)
                        .into_iter()
                        .map(T::from_f32)
                        .collect()
                })
                .collect(),
        }
    }

    /// Snapshot of any view.
    pub fn from_view(view: &impl ParamView<T>, layout: &ParamLayout) -> Self {
        Self {
            tensors: (0..layout.num_tensors())
                .map(|t| view.tensor(t).into_owned())
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flatten().copied().collect()
    }
}

impl<T: Scalar> ParamView<T> for DenseParams<T> {
    fn value(&self, id: ParamId) -> T {
        self.tensors[id.tensor_index as usize][id.flat_offset as usize]
    }

    fn tensor(&self, tensor_index: usize) -> Cow<'_, [T]> {
        Cow::Borrowed(&self.tensors[tensor_index])
    }
}

/// Per-tensor gradients for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> GradientBuffer<T> {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            tensors: layout
                .tensors()
                .iter()
                .map(|s| vec![T::zero(); s.len])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> T {
        self.tensors[id.tensor_index as usize][id.flat_offset as usize]
    }

    /// First non-finite entry, reported as an error naming its tensor.
    pub fn check_finite(&self) -> Result<()> {
        for (t, g) in self.tensors.iter().enumerate() {
            if let Some(o) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor_index: t,
                    flat_offset: o,
                });
            }
        }
        Ok(())
    }
}

struct LayerCache<'a, T: Clone + 'static> {
    input: Matrix<T>,
    weight: Cow<'a, [T]>,
    /// Post-activation output of this layer (only kept for ReLU layers).
    output: Option<Matrix<T>>,
}

/// Activations and materialized weights saved by [`forward`] for [`backward`].
pub struct ForwardCache<'a, T: Clone + 'static> {
    layers: Vec<LayerCache<'a, T>>,
}

/// Computes logits for `batch` (rows = samples).
pub fn forward<'a, T: Scalar>(
    spec: &NetworkSpec,
    params: &'a impl ParamView<T>,
    batch: &Matrix<T>,
) -> Result<(Matrix<T>, ForwardCache<'a, T>)> {
    if batch.cols != spec.input_dim() {
        return Err(Error::Dimension {
            expected: spec.input_dim(),
            actual: batch.cols,
        });
    }
    let rows = batch.rows;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut x = batch.clone();
    for (l, layer) in spec.layers.iter().enumerate() {
        let weight = params.tensor(2 * l);
        let bias = params.tensor(2 * l + 1);
        let wt = transpose(&weight, layer.out_dim, layer.in_dim);
        let mut z = Matrix::zeros(rows, layer.out_dim);
        for b in 0..rows {
            let zr = z.row_mut(b);
            zr.copy_from_slice(&bias);
            for (i, &xi) in x.row(b).iter().enumerate() {
                if xi != T::zero() {
                    axpy(zr, xi, &wt[i * layer.out_dim..(i + 1) * layer.out_dim]);
                }
            }
        }
        let output = match layer.activation {
            Activation::Relu => {
                for v in z.data.iter_mut() {
                    if !(*v > T::zero()) {
                        *v = T::zero();
                    }
                }
                Some(z.clone())
            }
            Activation::Identity => None,
        };
        layers.push(LayerCache {
            input: std::mem::replace(&mut x, z),
            weight,
            output,
        });
    }
    Ok((x, ForwardCache { layers }))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn loss_softmax_ce<T: Scalar>(logits: &Matrix<T>, labels: &[u8]) -> (T, Matrix<T>) {
    assert_eq!(logits.rows, labels.len(), "one label per logit row");
    let n = T::from(logits.rows).expect("batch size fits");
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = grad.row_mut(b);
        let mut sum = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            sum = sum + *gi;
        }
        let label = label as usize;
        total = total + (sum.ln() - (row[label] - max));
        for gi in g.iter_mut() {
            *gi = *gi / sum / n;
        }
        g[label] = g[label] - T::one() / n;
    }
    (total / n, grad)
}

/// Exact gradients of the loss whose logit gradient is `dlogits`.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    cache: &ForwardCache<'_, T>,
    dlogits: &Matrix<T>,
) -> GradientBuffer<T> {
    let mut grads = GradientBuffer::zeros(&spec.layout);
    let mut dz = dlogits.clone();
    for (l, layer) in spec.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
        if let Some(out) = &lc.output {
            for (d, &a) in dz.data.iter_mut().zip(&out.data) {
                if !(a > T::zero()) {
                    *d = T::zero();
                }
            }
        }

        let mut dwt = vec![T::zero(); in_dim * out_dim];
        let db = &mut grads.tensors[2 * l + 1];
        for b in 0..dz.rows {
            let dzr = dz.row(b);
            axpy(db, T::one(), dzr);
            for (i, &xi) in lc.input.row(b).iter().enumerate() {
                if xi != T::zero() {
                    axpy(&mut dwt[i * out_dim..(i + 1) * out_dim], xi, dzr);
                }
            }
        }
        grads.tensors[2 * l] = transpose(&dwt, in_dim, out_dim);

        if l > 0 {
            let mut dx = Matrix::zeros(dz.rows, in_dim);
            for b in 0..dz.rows {
                let dxr = dx.row_mut(b);
                for (o, &d) in dz.row(b).iter().enumerate() {
                    if d != T::zero() {
                        axpy(dxr, d, &lc.weight[o * in_dim..(o + 1) * in_dim]);
                    }
                }
            }
            dz = dx;
        }
    }
    grads
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1000;

/// Fraction of misclassified samples.
pub fn evaluate(spec: &NetworkSpec, params: &impl ParamView<f32>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let dense = DenseParams::from_view(params, &spec.layout);
    let mut wrong = 0usize;
    let rows: Vec<usize> = (0..dataset.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.gather(chunk);
        let (logits, _) = forward(spec, &dense, &x)?;
        wrong += y
            .iter()
            .enumerate()
            .filter(|&(b, &label)| argmax(logits.row(b)) != label as usize)
            .count();
    }
    Ok(wrong as f64 / dataset.len() as f64)
}
