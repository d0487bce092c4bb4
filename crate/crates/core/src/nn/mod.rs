//! Dense networks with hand-written reverse-mode gradients.
//!
//! Parameters of one network live in a single flat `Vec<f64>`: for every
//! layer the weight matrix (row-major, `fan_out x fan_in`) followed by its
//! bias. Optimizers, soft updates and checkpoints all operate on that flat
//! buffer, and gradients share the same layout.
//!
//! Batched calls take row-major `(batch, dim)` matrices.

mod checkpoint;
mod embedding;
mod optim;

pub use checkpoint::Checkpoint;
pub use embedding::{FourierFeatures, TimeEmbedding, TimeEmbeddingCache};
pub use optim::{Adam, AdamConfig, LrSchedule};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Relu,
            output_activation: OutputActivation::None,
        }
    }

    pub fn with_output(mut self, act: OutputActivation) -> Self {
        self.output_activation = act;
        self
    }

    /// An empty `hidden_dims` describes a single affine layer.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::shape(format!("all network dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

fn layout(spec: &MlpSpec) -> Vec<LayerSlot> {
    let mut off = 0;
    spec.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            };
            off += fan_in * fan_out + fan_out;
            slot
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    layers: Vec<LayerSlot>,
}

/// Intermediates of a batched forward pass, needed by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    // inputs[k] is the (post-activation) input of layer k.
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

impl Mlp {
    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` init for weights and biases,
    /// one random stream per layer.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for (k, slot) in net.layers.clone().iter().enumerate() {
            let mut rng = rng_from(seed, &format!("layer{k}"));
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            let end = slot.b + slot.fan_out;
            for p in &mut net.params[slot.w..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.param_count()];
        let layers = layout(&spec);
        Ok(Self {
            spec,
            params,
            layers,
        })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters for {:?}, got {}",
                spec.param_count(),
                spec,
                params.len()
            )));
        }
        let layers = layout(&spec);
        Ok(Self {
            spec,
            params,
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let s = self.layers[layer];
        ArrayView2::from_shape((s.fan_out, s.fan_in), &self.params[s.w..s.b]).unwrap()
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let s = self.layers[layer];
        ArrayView1::from(&self.params[s.b..s.b + s.fan_out])
    }

    pub fn weight_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, f64> {
        let s = self.layers[layer];
        ArrayViewMut2::from_shape((s.fan_out, s.fan_in), &mut self.params[s.w..s.b]).unwrap()
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.layers[layer];
        &mut self.params[s.b..s.b + s.fan_out]
    }

    /// Sets the last layer's weights and bias to zero.
    pub fn zero_output_layer(&mut self) {
        let s = *self.layers.last().unwrap();
        self.params[s.w..s.b + s.fan_out].fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim {
            return Err(Error::shape(format!(
                "network expects input dim {}, got {cols}",
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let x = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = self.affine(0, x);
        self.activate(&mut h, last == 0);
        for k in 1..=last {
            h = self.affine(k, h.view());
            self.activate(&mut h, k == last);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        for k in 0..last {
            let mut h = self.affine(k, inputs[k].view());
            self.activate(&mut h, false);
            inputs.push(h);
        }
        let mut output = self.affine(last, inputs[last].view());
        self.activate(&mut output, true);
        Ok(ForwardCache { inputs, output })
    }

    fn affine(&self, k: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight(k).t());
        z += &self.bias(k);
        z
    }

    fn activate(&self, h: &mut Array2<f64>, is_output: bool) {
        if is_output {
            match self.spec.output_activation {
                OutputActivation::None => {}
                OutputActivation::Tanh => h.mapv_inplace(f64::tanh),
                OutputActivation::Relu => h.mapv_inplace(|v| v.max(0.0)),
            }
        } else {
            match self.spec.activation {
                Activation::Relu => h.mapv_inplace(|v| v.max(0.0)),
            }
        }
    }

    fn output_delta(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::shape(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let mut delta = upstream.to_owned();
        match self.spec.output_activation {
            OutputActivation::None => {}
            OutputActivation::Tanh => {
                delta.zip_mut_with(&cache.output, |d, &y| *d *= 1.0 - y * y);
            }
            OutputActivation::Relu => {
                delta.zip_mut_with(&cache.output, |d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
            }
        }
        Ok(delta)
    }

    /// Reverse pass for `sum(output * upstream)`.
    ///
    /// Parameter gradients are summed over the batch; callers wanting a mean
    /// loss scale `upstream` by `1/batch`. Returns the flat parameter gradient
    /// and the gradient with respect to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let dx = self.backward_into(cache, upstream, Some(&mut grads))?;
        Ok((grads, dx))
    }

    /// Input gradient only; skips the parameter-gradient products.
    pub fn backward_input(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.backward_into(cache, upstream, None)
    }

    fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        mut grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>> {
        let mut delta = self.output_delta(cache, upstream)?;
        for k in (0..self.layers.len()).rev() {
            let s = self.layers[k];
            let input = &cache.inputs[k];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g[s.w..s.b + s.fan_out].split_at_mut(s.fan_in * s.fan_out);
                let mut gw = ArrayViewMut2::from_shape((s.fan_out, s.fan_in), gw).unwrap();
                general_mat_mul(1.0, &delta.t(), input, 0.0, &mut gw);
                for (b, col) in gb.iter_mut().zip(delta.axis_iter(Axis(1))) {
                    *b = col.sum();
                }
            }
            let mut prev = delta.dot(&self.weight(k));
            if k > 0 {
                prev.zip_mut_with(input, |d, &h| {
                    if h <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Single-sample reverse pass: gradients of `output . upstream` with
    /// respect to every parameter and to `x`.
    pub fn grad_single(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x.len())?;
        if upstream.len() != self.spec.output_dim {
            return Err(Error::shape(format!(
                "upstream length {} does not match output dim {}",
                upstream.len(),
                self.spec.output_dim
            )));
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let uv = ArrayView2::from_shape((1, upstream.len()), upstream).unwrap();
        let cache = self.forward_cached(xv)?;
        let (g, dx) = self.backward(&cache, uv)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if target.spec != online.spec {
        return Err(Error::shape("soft update between networks of different shapes"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config(format!("soft update rate {tau} outside [0, 1]")));
    }
    for (t, &o) in target.params.iter_mut().zip(&online.params) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}
