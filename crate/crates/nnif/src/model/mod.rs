//! Small feed-forward ReLU classifier with analytic derivatives.
//!
//! The network is deliberately tiny: dense layers, f64 arithmetic, softmax
//! cross-entropy loss. Everything downstream differentiates through this
//! module, so besides `forward`/`loss` it exposes parameter gradients, input
//! gradients, and a matrix-free Hessian-vector product (Pearlmutter's R-op).
//!
//! Parameter flattening is canonical and frozen: layers in order, each
//! layer's weight matrix row-major (one row per output unit), then its bias.
//! Gradients, HVPs, influence vectors and serialized checkpoints all use
//! this layout.
//!
//! ReLU is non-differentiable at 0; we take the subgradient phi'(0) = 0
//! everywhere, including second derivatives (identically zero almost
//! everywhere), so the HVP is exact off the kink set.

mod serialize;
mod train;

pub use serialize::{load_model, save_model};
pub use train::{accuracy, train, TrainConfig};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::Rng;

/// Element-wise activation applied to a dense layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One dense layer: `z = W x + b`, `a = act(z)`, with `W` of shape out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Flat parameter count: weights plus bias.
    fn param_count(&self) -> usize {
        self.out_dim() * (self.in_dim() + 1)
    }
}

/// Trainable weights plus architecture metadata.
///
/// Hidden layers are ReLU; the final layer is identity and its width is the
/// class count. Constructed via [`init_model`], [`load_model`], or
/// [`ModelParams::new`] (which validates the invariants).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
    input_dim: usize,
    class_count: usize,
}

/// Per-layer activations recorded during one forward pass.
///
/// `hidden[l]` is the post-activation output of hidden layer `l`; `logits`
/// is the final linear output. The embedding (the vector nearest-neighbor
/// features are computed on) is the input to the final linear layer: the
/// last hidden activation, or the raw input when there are no hidden layers.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub input: Array1<f64>,
    pub hidden: Vec<Array1<f64>>,
    pub logits: Array1<f64>,
}

impl ActivationTrace {
    /// The input to the final linear layer.
    pub fn embedding(&self) -> ArrayView1<'_, f64> {
        match self.hidden.last() {
            Some(h) => h.view(),
            None => self.input.view(),
        }
    }
}

/// Both halves of one backward pass from a seed vector at the logits.
pub struct BackpropGrads {
    /// Gradient with respect to all parameters, canonical flat layout.
    pub params: Array1<f64>,
    /// Gradient with respect to the input vector.
    pub input: Array1<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > best_val {
            best_val = x;
            best = i;
        }
    }
    best
}

fn relu_mask(post_activation: &Array1<f64>) -> Array1<f64> {
    post_activation.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 })
}

impl ModelParams {
    /// Builds a model from explicit layers, validating the invariants:
    /// chained dimensions, identity final layer of width >= 2, ReLU hidden
    /// layers, finite weights.
    pub fn new(layers: Vec<Layer>, input_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        let mut expect_in = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_dim() != expect_in {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {l} expects input width {expect_in}, has {}",
                    layer.in_dim()
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {l} bias length {} != output width {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            let last = l == layers.len() - 1;
            match (last, layer.activation) {
                (true, Activation::Identity) | (false, Activation::Relu) => {}
                (true, _) => {
                    return Err(Error::InvalidArchitecture(
                        "final layer must be identity".into(),
                    ))
                }
                (false, _) => {
                    return Err(Error::InvalidArchitecture(
                        "hidden layers must be ReLU".into(),
                    ))
                }
            }
            if layer.weight.iter().any(|v| !v.is_finite())
                || layer.bias.iter().any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite("model weights"));
            }
            expect_in = layer.out_dim();
        }
        let class_count = expect_in;
        if class_count < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "final width {class_count} < 2 classes"
            )));
        }
        Ok(ModelParams {
            layers,
            input_dim,
            class_count,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn hidden_layer_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Width of the embedding vector (input to the final linear layer).
    pub fn embedding_dim(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[self.layers.len() - 2].out_dim()
        } else {
            self.input_dim
        }
    }

    /// Layer widths, `[input_dim, hidden..., class_count]`.
    pub fn arch(&self) -> Vec<usize> {
        let mut widths = vec![self.input_dim];
        widths.extend(self.layers.iter().map(Layer::out_dim));
        widths
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat offset of each layer's parameter block.
    fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.param_count();
        }
        offsets
    }

    /// Serializes all parameters into the canonical flat layout.
    pub fn flatten(&self) -> Array1<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend(layer.weight.iter().copied());
            flat.extend(layer.bias.iter().copied());
        }
        Array1::from(flat)
    }

    /// Overwrites all parameters from a canonical flat vector.
    pub fn set_from_flat(&mut self, flat: ArrayView1<f64>) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flat parameters"));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            let (out, inp) = (layer.weight.nrows(), layer.weight.ncols());
            for i in 0..out {
                for j in 0..inp {
                    layer.weight[[i, j]] = flat[pos];
                    pos += 1;
                }
            }
            for i in 0..out {
                layer.bias[i] = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.class_count {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.class_count,
            });
        }
        Ok(())
    }

    /// Runs the network, recording every post-activation.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ActivationTrace> {
        self.check_input(x)?;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut current = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.dot(&current) + &layer.bias;
            if l + 1 == self.layers.len() {
                return Ok(ActivationTrace {
                    input: x.to_owned(),
                    hidden,
                    logits: z,
                });
            }
            z.mapv_inplace(|v| v.max(0.0));
            hidden.push(z.clone());
            current = z;
        }
        unreachable!("constructor guarantees at least one layer")
    }

    /// Predicted class: argmax of the logits, lowest index on ties.
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(argmax(self.forward(x)?.logits.view()))
    }

    /// Embedding vector for one input (see [`ActivationTrace::embedding`]).
    pub fn embedding(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.embedding().to_owned())
    }

    /// Softmax cross-entropy loss, computed via log-sum-exp.
    pub fn loss(&self, x: ArrayView1<f64>, y: usize) -> Result<f64> {
        self.check_label(y)?;
        let trace = self.forward(x)?;
        let logits = &trace.logits;
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
        Ok(lse - logits[y])
    }

    /// Backpropagates an arbitrary seed vector sitting at the logits,
    /// returning gradients with respect to all parameters and to the input.
    ///
    /// The cross-entropy gradient is the special case `seed = p - onehot(y)`;
    /// attacks reuse this with per-class seeds to get Jacobian rows.
    pub fn backprop_from_logits(
        &self,
        trace: &ActivationTrace,
        seed: ArrayView1<f64>,
    ) -> Result<BackpropGrads> {
        if seed.len() != self.class_count {
            return Err(Error::DimensionMismatch {
                expected: self.class_count,
                got: seed.len(),
            });
        }
        let offsets = self.offsets();
        let mut params = Array1::zeros(self.param_count());
        let mut delta = seed.to_owned();
        let mut input = Array1::zeros(self.input_dim);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let prev = if l == 0 {
                trace.input.view()
            } else {
                trace.hidden[l - 1].view()
            };
            let (out, inp) = (layer.out_dim(), layer.in_dim());
            let base = offsets[l];
            for i in 0..out {
                let di = delta[i];
                for j in 0..inp {
                    params[base + i * inp + j] = di * prev[j];
                }
                params[base + out * inp + i] = di;
            }
            let back = layer.weight.t().dot(&delta);
            if l == 0 {
                input = back;
            } else {
                delta = back * relu_mask(&trace.hidden[l - 1]);
            }
        }
        Ok(BackpropGrads { params, input })
    }

    /// Backpropagates a seed vector sitting at the embedding down to the
    /// input. Used by the white-box attack to differentiate feature-space
    /// penalties through the network body.
    pub fn input_grad_from_embedding(
        &self,
        trace: &ActivationTrace,
        seed: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        if seed.len() != self.embedding_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.embedding_dim(),
                got: seed.len(),
            });
        }
        if self.layers.len() == 1 {
            // embedding is the input itself
            return Ok(seed.to_owned());
        }
        // seed sits after the last hidden activation; apply that layer's
        // ReLU mask first, then walk the remaining layers down to the input.
        let last_hidden = self.layers.len() - 2;
        let mut delta = seed.to_owned() * relu_mask(&trace.hidden[last_hidden]);
        for l in (0..=last_hidden).rev() {
            let back = self.layers[l].weight.t().dot(&delta);
            if l == 0 {
                return Ok(back);
            }
            delta = back * relu_mask(&trace.hidden[l - 1]);
        }
        unreachable!()
    }

    fn ce_seed(&self, trace: &ActivationTrace, y: usize) -> Array1<f64> {
        let mut seed = softmax(trace.logits.view());
        seed[y] -= 1.0;
        seed
    }

    /// Gradient of the cross-entropy loss with respect to all parameters,
    /// canonical flat layout.
    pub fn grad_params(&self, x: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
        self.check_label(y)?;
        let trace = self.forward(x)?;
        let seed = self.ce_seed(&trace, y);
        Ok(self.backprop_from_logits(&trace, seed.view())?.params)
    }

    /// Gradient of the cross-entropy loss with respect to the input.
    pub fn grad_input(&self, x: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
        self.check_label(y)?;
        let trace = self.forward(x)?;
        let seed = self.ce_seed(&trace, y);
        Ok(self.backprop_from_logits(&trace, seed.view())?.input)
    }

    /// Hessian-vector product of the single-example loss via the R-operator:
    /// one extended forward pass propagating directional derivatives, one
    /// extended backward pass. Never materializes the Hessian.
    pub fn hvp_single(
        &self,
        x: ArrayView1<f64>,
        y: usize,
        v: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_label(y)?;
        if v.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: v.len(),
            });
        }
        let trace = self.forward(x)?;
        let offsets = self.offsets();
        let n_layers = self.layers.len();

        // R-forward: r_act[l] = R{a_l} for hidden layers, r_logits at the top.
        // R{x} = 0 since v perturbs parameters, not the input.
        let mut r_act: Vec<Array1<f64>> = Vec::with_capacity(n_layers - 1);
        let mut r_prev = Array1::zeros(self.input_dim);
        let mut r_logits = Array1::zeros(self.class_count);
        for (l, layer) in self.layers.iter().enumerate() {
            let (out, inp) = (layer.out_dim(), layer.in_dim());
            let base = offsets[l];
            let vw = v
                .slice(s![base..base + out * inp])
                .into_shape_with_order((out, inp))
                .expect("slice len matches shape");
            let vb = v.slice(s![base + out * inp..base + out * inp + out]);
            let prev = if l == 0 {
                trace.input.view()
            } else {
                trace.hidden[l - 1].view()
            };
            let rz = vw.dot(&prev) + layer.weight.dot(&r_prev) + vb;
            if l + 1 == n_layers {
                r_logits = rz;
            } else {
                let ra = rz * relu_mask(&trace.hidden[l]);
                r_act.push(ra.clone());
                r_prev = ra;
            }
        }

        // R-backward. At the logits: delta = p - onehot(y) and
        // R{delta} = (diag(p) - p p^T) R{z}, the softmax Jacobian applied to
        // the R-forward logits. ReLU second derivatives vanish, so hidden
        // R{delta} only picks up the two product-rule terms.
        let p = softmax(trace.logits.view());
        let mut delta = p.clone();
        delta[y] -= 1.0;
        let pr = p.dot(&r_logits);
        let mut r_delta = &p * &r_logits - &p * pr;

        let mut hv = Array1::zeros(self.param_count());
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let (out, inp) = (layer.out_dim(), layer.in_dim());
            let base = offsets[l];
            let prev = if l == 0 {
                trace.input.view()
            } else {
                trace.hidden[l - 1].view()
            };
            let r_prev_l: Option<&Array1<f64>> = if l == 0 { None } else { Some(&r_act[l - 1]) };
            for i in 0..out {
                let rdi = r_delta[i];
                let di = delta[i];
                for j in 0..inp {
                    let mut g = rdi * prev[j];
                    if let Some(rp) = r_prev_l {
                        g += di * rp[j];
                    }
                    hv[base + i * inp + j] = g;
                }
                hv[base + out * inp + i] = rdi;
            }
            if l > 0 {
                let vw = v
                    .slice(s![base..base + out * inp])
                    .into_shape_with_order((out, inp))
                    .expect("slice len matches shape");
                let mask = relu_mask(&trace.hidden[l - 1]);
                let back_r = vw.t().dot(&delta) + layer.weight.t().dot(&r_delta);
                r_delta = back_r * &mask;
                delta = layer.weight.t().dot(&delta) * mask;
            }
        }
        Ok(hv)
    }

    /// Mean Hessian-vector product over a batch.
    pub fn hvp(
        &self,
        xs: ArrayView2<f64>,
        ys: &[usize],
        v: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        if xs.nrows() == 0 {
            return Err(Error::Empty("hvp batch"));
        }
        if xs.nrows() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.nrows(),
                got: ys.len(),
            });
        }
        let mut acc = Array1::zeros(self.param_count());
        for (row, &y) in xs.outer_iter().zip(ys) {
            acc += &self.hvp_single(row, y, v)?;
        }
        acc /= xs.nrows() as f64;
        Ok(acc)
    }
}

/// Initializes a model from layer widths `[input, hidden..., classes]`.
///
/// Weights are scaled-uniform `U(-sqrt(6/(fan_in+fan_out)), +...)`,
/// biases zero. Identical `(arch, seed)` yields identical weights.
pub fn init_model(arch: &[usize], seed: u64) -> Result<ModelParams> {
    if arch.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least input and output widths, got {arch:?}"
        )));
    }
    if arch.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArchitecture(format!(
            "zero-width layer in {arch:?}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut layers = Vec::with_capacity(arch.len() - 1);
    for l in 0..arch.len() - 1 {
        let (fan_in, fan_out) = (arch[l], arch[l + 1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
        layers.push(Layer {
            weight,
            bias: Array1::zeros(fan_out),
            activation: if l + 2 == arch.len() {
                Activation::Identity
            } else {
                Activation::Relu
            },
        });
    }
    ModelParams::new(layers, arch[0])
}
