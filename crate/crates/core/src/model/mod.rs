//! Small ReLU MLP classifier with softmax cross-entropy.
//!
//! Parameters live in one flat vector. Layer `l` with `fan_in → fan_out`
//! stores its weights row-major (`fan_out` rows of `fan_in`) followed by
//! `fan_out` biases.
//!
//! Quantized models hold one [`QuantizedTensor`] per weight matrix and per
//! bias vector, each with its own scale.

pub mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::quant::{self, QuantSpec, QuantizedTensor, quantize_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    layer_dims: Vec<usize>,
    activation: Activation,
}

/// Offsets of one dense layer inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub biases: usize,
}

impl LayerSlot {
    fn end(&self) -> usize {
        self.biases + self.fan_out
    }
}

impl Architecture {
    /// `layer_dims` = `[input, hidden.., classes]`.
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs an input and an output layer, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {layer_dims:?}")));
        }
        Ok(Self {
            layer_dims,
            activation: Activation::Relu,
        })
    }

    /// `[input, 64, 32, classes]`.
    pub fn default_for(input: usize, classes: usize) -> Result<Self> {
        Self::new(vec![input, 64, 32, classes])
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset = slot.end();
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    flat: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Architecture, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::Dimension {
                expected: arch.param_count(),
                actual: flat.len(),
            });
        }
        Ok(Self { arch, flat })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let flat = vec![0.0; arch.param_count()];
        Self { arch, flat }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }
}

/// A model quantized tensor by tensor, in layer order `[W0, b0, W1, b1, ..]`.
/// Weight tensors have shape `[fan_out, fan_in]`, bias tensors `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParams {
    arch: Architecture,
    tensors: Vec<QuantizedTensor>,
}

impl QuantizedParams {
    pub fn quantize(p: &ModelParams, spec: &QuantSpec) -> Result<Self> {
        Self::from_flat(&p.arch, &p.flat, spec)
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64], spec: &QuantSpec) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::Dimension {
                expected: arch.param_count(),
                actual: flat.len(),
            });
        }
        let mut tensors = Vec::with_capacity(2 * arch.layer_dims.len());
        for slot in arch.layers() {
            let w = quantize_tensor(&flat[slot.weights..slot.biases], spec)?;
            tensors.push(w.reshape(vec![slot.fan_out, slot.fan_in])?);
            tensors.push(quantize_tensor(&flat[slot.biases..slot.end()], spec)?);
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Checks tensor count, shapes and that every tensor shares one spec.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<QuantizedTensor>) -> Result<Self> {
        let slots = arch.layers();
        if tensors.len() != 2 * slots.len() {
            return Err(Error::Dimension {
                expected: 2 * slots.len(),
                actual: tensors.len(),
            });
        }
        for (slot, pair) in slots.iter().zip(tensors.chunks(2)) {
            if pair[0].shape() != [slot.fan_out, slot.fan_in] || pair[1].shape() != [slot.fan_out] {
                return Err(Error::Validation(format!(
                    "tensor shapes {:?} and {:?} do not fit layer {} -> {}",
                    pair[0].shape(),
                    pair[1].shape(),
                    slot.fan_in,
                    slot.fan_out
                )));
            }
        }
        let spec = tensors[0].spec();
        if tensors.iter().any(|t| t.spec() != spec) {
            return Err(Error::Validation("tensors of one model must share a spec".into()));
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[QuantizedTensor] {
        &self.tensors
    }

    pub fn spec(&self) -> &QuantSpec {
        self.tensors[0].spec()
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn is_valid(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.codes().iter().all(|&c| t.spec().is_valid_code(c)))
    }

    /// Flat real values in [`ModelParams`] layout.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(quant::dequantize).collect()
    }

    pub fn dequantize(&self) -> ModelParams {
        ModelParams {
            arch: self.arch.clone(),
            flat: self.to_flat(),
        }
    }

    pub fn requantize(&self, target: &QuantSpec) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| quant::requantize(t, target))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: self.arch.clone(),
            tensors,
        })
    }
}

/// Loss gradient with respect to every parameter, same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVec(pub Vec<f64>);

/// Glorot-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> ModelParams {
    let mut flat = vec![0.0; arch.param_count()];
    for slot in arch.layers() {
        let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in &mut flat[slot.weights..slot.biases] {
            *w = dist.sample(rng);
        }
    }
    ModelParams {
        arch: arch.clone(),
        flat,
    }
}

fn rows_of(arch: &Architecture, features: &[f64]) -> Result<usize> {
    let dim = arch.input_dim();
    if !features.len().is_multiple_of(dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: features.len(),
        });
    }
    Ok(features.len() / dim)
}

/// Per-layer activations for one sample. `acts[0]` is the input; the last
/// entry holds the logits.
fn forward_sample(p: &ModelParams, x: &[f64], acts: &mut Vec<Vec<f64>>) {
    let layers = p.arch.layers();
    acts.truncate(1);
    acts[0].clear();
    acts[0].extend_from_slice(x);
    for (l, slot) in layers.iter().enumerate() {
        let input = &acts[l];
        let w = &p.flat[slot.weights..slot.biases];
        let b = &p.flat[slot.biases..slot.end()];
        let last = l + 1 == layers.len();
        let out: Vec<f64> = (0..slot.fan_out)
            .map(|o| {
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                let z = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                if last { z } else { z.max(0.0) }
            })
            .collect();
        acts.push(out);
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Class probabilities, row-major `rows × classes`.
pub fn forward(p: &ModelParams, features: &[f64]) -> Result<Vec<f64>> {
    let rows = rows_of(&p.arch, features)?;
    let dim = p.arch.input_dim();
    let mut acts = vec![Vec::new()];
    let mut out = Vec::with_capacity(rows * p.arch.classes());
    for r in 0..rows {
        forward_sample(p, &features[r * dim..(r + 1) * dim], &mut acts);
        let mut z = acts.pop().unwrap();
        softmax_in_place(&mut z);
        out.extend_from_slice(&z);
    }
    Ok(out)
}

fn check_labels(p: &ModelParams, rows: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension {
            expected: rows,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= p.arch.classes()) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {} classes",
            p.arch.classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the batch.
pub fn loss(p: &ModelParams, features: &[f64], labels: &[usize]) -> Result<f64> {
    let probs = forward(p, features)?;
    let rows = rows_of(&p.arch, features)?;
    check_labels(p, rows, labels)?;
    let k = p.arch.classes();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs[r * k + y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / rows as f64)
}

/// Mean cross-entropy and its gradient by backpropagation.
pub fn loss_and_gradient(
    p: &ModelParams,
    features: &[f64],
    labels: &[usize],
) -> Result<(f64, GradientVec)> {
    let rows = rows_of(&p.arch, features)?;
    check_labels(p, rows, labels)?;
    if rows == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let dim = p.arch.input_dim();
    let layers = p.arch.layers();
    let mut grad = vec![0.0; p.flat.len()];
    let mut acts = vec![Vec::new()];
    let mut total = 0.0;
    let inv_rows = 1.0 / rows as f64;

    for (r, &y) in labels.iter().enumerate() {
        forward_sample(p, &features[r * dim..(r + 1) * dim], &mut acts);
        let mut delta = acts.last().unwrap().clone();
        softmax_in_place(&mut delta);
        total -= delta[y].max(f64::MIN_POSITIVE).ln();
        delta[y] -= 1.0;
        for d in &mut delta {
            *d *= inv_rows;
        }
        for (l, slot) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[slot.biases + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &p.flat[slot.weights..slot.biases];
            let mut prev = vec![0.0; slot.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                for (pv, wv) in prev.iter_mut().zip(row) {
                    *pv += d * wv;
                }
            }
            // ReLU derivative on the hidden activation feeding this layer.
            for (pv, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *pv = 0.0;
                }
            }
            delta = prev;
        }
    }
    Ok((total * inv_rows, GradientVec(grad)))
}

/// One SGD step at full precision, then re-quantization of the updated
/// weights to `spec`. Activations and gradients stay full precision.
pub fn train_step(
    p: &ModelParams,
    features: &[f64],
    labels: &[usize],
    lr: f64,
    spec: &QuantSpec,
) -> Result<QuantizedParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    let (l, GradientVec(grad)) = loss_and_gradient(p, features, labels)?;
    if !l.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let updated: Vec<f64> = p.flat.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
    QuantizedParams::from_flat(&p.arch, &updated, spec).map_err(|e| match e {
        Error::NumericInput { .. } => Error::NonFinite("weights"),
        other => other,
    })
}

/// Predicted class per row (first index on ties).
pub fn predict(p: &ModelParams, features: &[f64]) -> Result<Vec<usize>> {
    let k = p.arch.classes();
    let probs = forward(p, features)?;
    Ok(probs
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(p: &ModelParams, features: &[f64], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(p, features)?;
    check_labels(p, preds.len(), labels)?;
    let correct = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}
