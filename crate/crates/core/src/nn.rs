//! Dense-network training core.
//!
//! Parameters of a [`DenseNet`] live in one flat [`ParamVector`]. The layout is
//! layer-major: for linear layer `l` (0-based) the `n_out x n_in` weight matrix
//! is stored row-major, immediately followed by its `n_out` biases. The same
//! layout is used for model updates, so a mask or an update can be addressed
//! with [`Shape::weight_index`] / [`Shape::bias_index`].
//!
//! Updates follow the `old - new` convention everywhere: training from `g` to
//! `g'` yields `delta = g - g'`, and the server applies `g <- g - delta`.

use std::fmt;
use std::ops::{Add, Mul, Range, Sub};
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has {got} features, network expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("parameter vector has length {got}, layout needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("invalid layer dims {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{features} feature rows but {labels} labels")]
    LabelCount { features: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training data")]
    EmptyData,
    #[error("invalid training options: {0}")]
    InvalidOptions(&'static str),
}

/// Layer-shape descriptor shared by every vector of one model.
///
/// A shape built with [`Shape::flat`] carries no layer structure and is used
/// for plain vectors (aggregation tests, scalar examples).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Arc<[usize]>,
    len: usize,
}

impl Shape {
    pub fn layered(dims: &[usize]) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::InvalidDims(dims.to_vec()));
        }
        let len = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Shape {
            dims: dims.into(),
            len,
        })
    }

    pub fn flat(len: usize) -> Self {
        Shape {
            dims: Arc::from(Vec::new()),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `[n_in, n_1, ..., n_L]`; empty for flat shapes.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of linear layers (`L`).
    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn fan_in(&self, layer: usize) -> usize {
        self.dims[layer]
    }

    pub fn fan_out(&self, layer: usize) -> usize {
        self.dims[layer + 1]
    }

    fn layer_offset(&self, layer: usize) -> usize {
        assert!(layer < self.num_layers(), "layer {layer} out of range");
        self.dims[..=layer]
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let start = self.layer_offset(layer);
        start..start + self.fan_in(layer) * self.fan_out(layer)
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let start = self.weight_range(layer).end;
        start..start + self.fan_out(layer)
    }

    /// Flat index of `W_layer[row, col]` (row = output unit, col = input unit).
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        assert!(row < self.fan_out(layer) && col < self.fan_in(layer));
        self.weight_range(layer).start + row * self.fan_in(layer) + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        assert!(row < self.fan_out(layer));
        self.bias_range(layer).start + row
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dims.is_empty() {
            write!(f, "Flat({})", self.len)
        } else {
            write!(f, "Layers{:?}", &self.dims[..])
        }
    }
}

/// Flat parameter (or update) vector tagged with its layer shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shape: Shape,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, shape: Shape) -> Result<Self, NnError> {
        if values.len() != shape.len() {
            return Err(NnError::ParamLength {
                expected: shape.len(),
                got: values.len(),
            });
        }
        Ok(ParamVector { values, shape })
    }

    /// Unstructured vector, mostly for aggregation rules and tests.
    pub fn from_vec(values: Vec<f64>) -> Self {
        let shape = Shape::flat(values.len());
        ParamVector { values, shape }
    }

    pub fn zeros(shape: &Shape) -> Self {
        ParamVector {
            values: vec![0.0; shape.len()],
            shape: shape.clone(),
        }
    }

    pub fn filled(shape: &Shape, value: f64) -> Self {
        ParamVector {
            values: vec![value; shape.len()],
            shape: shape.clone(),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    fn check(&self, other: &ParamVector) {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes"
        );
    }

    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> ParamVector {
        self.check(other);
        ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        self.map(|v| v * s)
    }

    /// Elementwise product, used for masking (`M ⊙ v`).
    pub fn hadamard(&self, other: &ParamVector) -> ParamVector {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &ParamVector) {
        self.check(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.check(other);
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sq_dist(&self, other: &ParamVector) -> f64 {
        self.check(other);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn dist(&self, other: &ParamVector) -> f64 {
        self.sq_dist(other).sqrt()
    }

    /// Cosine similarity; defined as 0 when either operand is the zero vector.
    pub fn cosine(&self, other: &ParamVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            (self.dot(other) / denom).clamp(-1.0, 1.0)
        }
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Number of non-zero entries (the support size of a mask).
    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Coordinate-wise mean of a non-empty set of equally shaped vectors.
    pub fn mean_of(vectors: &[ParamVector]) -> ParamVector {
        assert!(!vectors.is_empty(), "mean of zero vectors");
        let mut out = ParamVector::zeros(vectors[0].shape());
        for v in vectors {
            out.axpy(1.0, v);
        }
        let n = vectors.len() as f64;
        out.map(|v| v / n)
    }
}

impl Add for &ParamVector {
    type Output = ParamVector;
    fn add(self, rhs: &ParamVector) -> ParamVector {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &ParamVector {
    type Output = ParamVector;
    fn sub(self, rhs: &ParamVector) -> ParamVector {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &ParamVector {
    type Output = ParamVector;
    fn mul(self, rhs: f64) -> ParamVector {
        self.scale(rhs)
    }
}

/// Fully-connected classifier: ReLU on hidden layers, raw logits at the output.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    params: ParamVector,
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, NnError> {
        let shape = Shape::layered(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(&shape);
        for layer in 0..shape.num_layers() {
            let bound = (6.0 / (shape.fan_in(layer) + shape.fan_out(layer)) as f64).sqrt();
            for w in &mut params.values[shape.weight_range(layer)] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(DenseNet { params })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        let shape = Shape::layered(dims)?;
        Ok(DenseNet {
            params: ParamVector::zeros(&shape),
        })
    }

    pub fn shape(&self) -> &Shape {
        self.params.shape()
    }

    pub fn layer_dims(&self) -> &[usize] {
        self.params.shape().dims()
    }

    pub fn num_layers(&self) -> usize {
        self.shape().num_layers()
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims().last().unwrap()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn flatten(&self) -> ParamVector {
        self.params.clone()
    }

    pub fn unflatten(vec: ParamVector, dims: &[usize]) -> Result<Self, NnError> {
        let shape = Shape::layered(dims)?;
        if vec.len() != shape.len() {
            return Err(NnError::ParamLength {
                expected: shape.len(),
                got: vec.len(),
            });
        }
        Ok(DenseNet {
            params: ParamVector {
                values: vec.values,
                shape,
            },
        })
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let shape = self.shape();
        ArrayView2::from_shape(
            (shape.fan_out(layer), shape.fan_in(layer)),
            &self.params.values[shape.weight_range(layer)],
        )
        .expect("weight layout")
    }

    pub fn biases(&self, layer: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.values[self.shape().bias_range(layer)])
    }

    /// `g <- g - update`
    pub fn apply_update(&mut self, update: &ParamVector) {
        self.params.axpy(-1.0, update);
    }

    fn affine(&self, layer: usize, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let w = self.weights(layer);
        let mut z = Array2::zeros((input.nrows(), w.nrows()));
        general_mat_mul(1.0, &input, &w.t(), 0.0, &mut z);
        z += &self.biases(layer);
        z
    }

    /// Pre-activations of every layer for `x`: entry `l` is `W_l a_{l-1} + b_l`.
    pub fn pre_activations(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>, NnError> {
        self.check_input(x)?;
        let mut out: Vec<Array2<f64>> = Vec::with_capacity(self.num_layers());
        for layer in 0..self.num_layers() {
            let z = match out.last() {
                None => self.affine(layer, x),
                Some(prev) => self.affine(layer, prev.mapv(relu).view()),
            };
            out.push(z);
        }
        Ok(out)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<(), NnError> {
        if x.ncols() != self.layer_dims()[0] {
            return Err(NnError::InputShape {
                expected: self.layer_dims()[0],
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Post-ReLU hidden activations followed by the output logits.
    fn trace(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let last = self.num_layers() - 1;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.num_layers());
        for layer in 0..=last {
            let mut z = match acts.last() {
                None => self.affine(layer, x),
                Some(prev) => self.affine(layer, prev.view()),
            };
            if layer != last {
                z.mapv_inplace(relu);
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        Ok(self.trace(x).pop().unwrap())
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>, NnError> {
        let logits = self.forward(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| argmax(row.as_slice().unwrap()))
            .collect())
    }

    fn check_labels(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(), NnError> {
        self.check_input(x)?;
        if x.nrows() != labels.len() {
            return Err(NnError::LabelCount {
                features: x.nrows(),
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let classes = self.num_classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    /// Mean cross-entropy of the softmax of the logits.
    pub fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64, NnError> {
        self.check_labels(x, labels)?;
        let logits = self.trace(x).pop().unwrap();
        let total: f64 = logits
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum();
        Ok(total / labels.len() as f64)
    }

    /// Gradient of [`DenseNet::loss`] with respect to all parameters.
    pub fn grad(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<ParamVector, NnError> {
        self.check_labels(x, labels)?;
        let mut out = ParamVector::zeros(self.shape());
        self.grad_into(x, labels, &mut out.values);
        Ok(out)
    }

    fn grad_into(&self, x: ArrayView2<'_, f64>, labels: &[usize], out: &mut [f64]) {
        let shape = self.shape().clone();
        let n = labels.len() as f64;
        let mut acts = self.trace(x);
        let logits = acts.pop().unwrap();

        // dL/dz at the output: (softmax - onehot) / n
        let mut delta = logits;
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            row[y] -= 1.0;
            row.mapv_inplace(|v| v / n);
        }

        for layer in (0..shape.num_layers()).rev() {
            let input = if layer == 0 { x } else { acts[layer - 1].view() };
            let (fan_in, fan_out) = (shape.fan_in(layer), shape.fan_out(layer));
            let mut gw = ArrayViewMut2::from_shape(
                (fan_out, fan_in),
                &mut out[shape.weight_range(layer)],
            )
            .expect("weight layout");
            general_mat_mul(1.0, &delta.t(), &input, 0.0, &mut gw);
            let gb = delta.sum_axis(Axis(0));
            out[shape.bias_range(layer)].copy_from_slice(gb.as_slice().unwrap());

            if layer > 0 {
                let mut next = Array2::zeros((delta.nrows(), fan_in));
                general_mat_mul(1.0, &delta, &self.weights(layer), 0.0, &mut next);
                next.zip_mut_with(&input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
        }
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Index of the largest entry; lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    /// `0` (or anything `>= n`) means full-batch gradient descent.
    pub batch_size: usize,
}

/// Plain mini-batch SGD. Returns the trained network and the update
/// `old_params - new_params`.
///
/// The sample order is reshuffled every epoch from `seed`; full-batch training
/// keeps the data order so a single epoch is exactly one gradient step.
pub fn sgd_train(
    net: &DenseNet,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    opts: TrainOptions,
    seed: u64,
) -> Result<(DenseNet, ParamVector), NnError> {
    if opts.epochs == 0 {
        return Err(NnError::InvalidOptions("epochs must be >= 1"));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(NnError::InvalidOptions("lr must be finite and >= 0"));
    }
    if labels.is_empty() {
        return Err(NnError::EmptyData);
    }
    net.check_labels(x, labels)?;

    let n = labels.len();
    let batch = if opts.batch_size == 0 || opts.batch_size >= n {
        n
    } else {
        opts.batch_size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trained = net.clone();
    let mut grad = vec![0.0; net.shape().len()];

    for _ in 0..opts.epochs {
        if batch == n {
            trained.grad_into(x, labels, &mut grad);
            step(&mut trained, &grad, opts.lr);
            continue;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            trained.grad_into(bx.view(), &by, &mut grad);
            step(&mut trained, &grad, opts.lr);
        }
    }
    let update = &net.params - &trained.params;
    Ok((trained, update))
}

fn step(net: &mut DenseNet, grad: &[f64], lr: f64) {
    for (p, g) in net.params.values.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Row-major feature matrix helper for tests and small examples.
pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), values).expect("matrix shape")
}

/// One-row input helper.
pub fn row(values: &[f64]) -> Array2<f64> {
    Array1::from(values.to_vec()).insert_axis(Axis(0))
}
