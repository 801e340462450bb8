//! Small CPU classifier backend: plain CHW convolutions in f64 with exact
//! hand-written backprop.
//!
//! The defenses need more than inference, so the backward pass supports
//! gradient taps: it can report the gradient at any named layer output and
//! accept extra gradient terms injected at a layer output (used by the
//! attention-distillation loss).

pub mod tensor;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::atomic_write;
use tensor::{argmax, Tensor3};

/// Read-only inference contract shared by the real backend and test mocks.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Tensor3) -> Vec<f64>;

    /// Argmax of logits; ties resolve to the lowest class index.
    fn predict(&self, x: &Tensor3) -> usize {
        argmax(&self.logits(x))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        name: String,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        relu: bool,
        /// [out_c][in_c][k][k] flattened.
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    GlobalAvgPool {
        name: String,
    },
    Dense {
        name: String,
        in_dim: usize,
        out_dim: usize,
        relu: bool,
        /// [out_dim][in_dim] flattened.
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv { name, .. } => name,
            Layer::GlobalAvgPool { name } => name,
            Layer::Dense { name, .. } => name,
        }
    }

    fn out_shape(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        match self {
            Layer::Conv {
                out_c,
                k,
                stride,
                pad,
                ..
            } => {
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                (*out_c, oh, ow)
            }
            Layer::GlobalAvgPool { .. } => (c, 1, 1),
            Layer::Dense { out_dim, .. } => (*out_dim, 1, 1),
        }
    }

    fn forward(&self, input: &Tensor3) -> Tensor3 {
        match self {
            Layer::Conv {
                in_c,
                out_c,
                k,
                stride,
                pad,
                relu,
                weight,
                bias,
                ..
            } => {
                let (oc_n, oh, ow) = self.out_shape(input.c, input.h, input.w);
                let mut out = Tensor3::zeros(oc_n, oh, ow);
                for (plane, b) in out.data.chunks_exact_mut(oh * ow).zip(bias) {
                    plane.fill(*b);
                }
                for oc in 0..*out_c {
                    for ic in 0..*in_c {
                        let in_plane = input.channel(ic);
                        for ky in 0..*k {
                            for kx in 0..*k {
                                let w_val =
                                    weight[((oc * in_c + ic) * k + ky) * k + kx];
                                if w_val == 0.0 {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = oy * stride + ky;
                                    if iy < *pad || iy - pad >= input.h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    let out_row = oc * oh * ow + oy * ow;
                                    let in_row = iy * input.w;
                                    for ox in 0..ow {
                                        let ix = ox * stride + kx;
                                        if ix < *pad || ix - pad >= input.w {
                                            continue;
                                        }
                                        out.data[out_row + ox] +=
                                            w_val * in_plane[in_row + ix - pad];
                                    }
                                }
                            }
                        }
                    }
                }
                if *relu {
                    for v in &mut out.data {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                out
            }
            Layer::GlobalAvgPool { .. } => {
                let mut out = Tensor3::zeros(input.c, 1, 1);
                let plane = (input.h * input.w) as f64;
                for c in 0..input.c {
                    out.data[c] = input.channel(c).iter().sum::<f64>() / plane;
                }
                out
            }
            Layer::Dense {
                in_dim,
                out_dim,
                relu,
                weight,
                bias,
                ..
            } => {
                debug_assert_eq!(input.len(), *in_dim);
                let mut out = Tensor3::zeros(*out_dim, 1, 1);
                for o in 0..*out_dim {
                    let row = &weight[o * in_dim..(o + 1) * in_dim];
                    let mut acc = bias[o];
                    for (w_val, x) in row.iter().zip(&input.data) {
                        acc += w_val * x;
                    }
                    out.data[o] = if *relu { acc.max(0.0) } else { acc };
                }
                out
            }
        }
    }

    /// Backward through this layer. `input`/`output` come from the forward
    /// trace; `grad_out` is dL/d(output). Returns dL/d(input) and, when
    /// `want_params`, the parameter gradients.
    fn backward(
        &self,
        input: &Tensor3,
        output: &Tensor3,
        grad_out: &Tensor3,
        want_params: bool,
    ) -> (Tensor3, Option<LayerGrad>) {
        match self {
            Layer::Conv {
                in_c,
                out_c,
                k,
                stride,
                pad,
                relu,
                weight,
                ..
            } => {
                // ReLU mask folds into the outgoing gradient.
                let mut g = grad_out.clone();
                if *relu {
                    for (gv, ov) in g.data.iter_mut().zip(&output.data) {
                        if *ov <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                let (oh, ow) = (g.h, g.w);
                let mut grad_in = Tensor3::zeros(input.c, input.h, input.w);
                let mut grad = want_params.then(|| LayerGrad {
                    weight: vec![0.0; weight.len()],
                    bias: vec![0.0; *out_c],
                });
                if let Some(lg) = grad.as_mut() {
                    for oc in 0..*out_c {
                        lg.bias[oc] = g.channel(oc).iter().sum();
                    }
                }
                for oc in 0..*out_c {
                    let g_plane = g.channel(oc);
                    for ic in 0..*in_c {
                        let in_plane = input.channel(ic);
                        let gi_plane = grad_in.channel_mut(ic);
                        for ky in 0..*k {
                            for kx in 0..*k {
                                let wi = ((oc * in_c + ic) * k + ky) * k + kx;
                                let w_val = weight[wi];
                                let mut w_grad = 0.0;
                                for oy in 0..oh {
                                    let iy = oy * stride + ky;
                                    if iy < *pad || iy - pad >= input.h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    let g_row = oy * ow;
                                    let in_row = iy * input.w;
                                    for ox in 0..ow {
                                        let ix = ox * stride + kx;
                                        if ix < *pad || ix - pad >= input.w {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        let gv = g_plane[g_row + ox];
                                        w_grad += gv * in_plane[in_row + ix];
                                        gi_plane[in_row + ix] += gv * w_val;
                                    }
                                }
                                if let Some(lg) = grad.as_mut() {
                                    lg.weight[wi] = w_grad;
                                }
                            }
                        }
                    }
                }
                (grad_in, grad)
            }
            Layer::GlobalAvgPool { .. } => {
                let mut grad_in = Tensor3::zeros(input.c, input.h, input.w);
                let plane = (input.h * input.w) as f64;
                for c in 0..input.c {
                    let gv = grad_out.data[c] / plane;
                    for v in grad_in.channel_mut(c) {
                        *v = gv;
                    }
                }
                (grad_in, None)
            }
            Layer::Dense {
                in_dim,
                out_dim,
                relu,
                weight,
                ..
            } => {
                let mut g = grad_out.data.clone();
                if *relu {
                    for (gv, ov) in g.iter_mut().zip(&output.data) {
                        if *ov <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                let mut grad_in = Tensor3::zeros(input.c, input.h, input.w);
                let mut grad = want_params.then(|| LayerGrad {
                    weight: vec![0.0; weight.len()],
                    bias: g.clone(),
                });
                for o in 0..*out_dim {
                    let gv = g[o];
                    let row = &weight[o * in_dim..(o + 1) * in_dim];
                    if let Some(lg) = grad.as_mut() {
                        let w_row = &mut lg.weight[o * in_dim..(o + 1) * in_dim];
                        for (wg, x) in w_row.iter_mut().zip(&input.data) {
                            *wg = gv * x;
                        }
                    }
                    for (gi, w_val) in grad_in.data.iter_mut().zip(row) {
                        *gi += gv * w_val;
                    }
                }
                (grad_in, grad)
            }
        }
    }
}

/// Gradients for one parameterized layer.
#[derive(Debug, Clone, Default)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// What `NeuralNet::backward` should compute besides propagating.
#[derive(Debug, Clone, Default)]
pub struct BackwardWants {
    pub param_grads: bool,
    pub input_grad: bool,
    /// Record dL/d(output) of these layers.
    pub record_layers: Vec<String>,
    /// Extra gradient terms added at a layer's output during the sweep.
    pub inject: Vec<(String, Tensor3)>,
}

#[derive(Debug, Clone, Default)]
pub struct BackwardPass {
    /// One entry per layer; empty grads for parameterless layers.
    pub param_grads: Vec<LayerGrad>,
    pub input_grad: Option<Tensor3>,
    pub layer_grads: BTreeMap<String, Tensor3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralNet {
    pub arch: String,
    pub input_c: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub num_classes: usize,
    layers: Vec<Layer>,
}

impl NeuralNet {
    /// Build a freshly initialized network.
    ///
    /// Known architectures: `linear` (flatten + classifier head), `micro`
    /// (one tiny conv block, useful for finite-difference checks) and
    /// `smallcnn` (three stride-2 conv blocks).
    pub fn build(arch: &str, input_size: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (3usize, input_size, input_size);
        let layers = match arch {
            "linear" => vec![dense(&mut rng, "fc", c * h * w, num_classes, false)],
            "micro" => {
                let conv = conv(&mut rng, "conv1", 3, 2, 3, 2, 1, true);
                vec![
                    conv,
                    Layer::GlobalAvgPool {
                        name: "gap".into(),
                    },
                    dense(&mut rng, "fc", 2, num_classes, false),
                ]
            }
            "smallcnn" => vec![
                conv(&mut rng, "conv1", 3, 8, 3, 2, 1, true),
                conv(&mut rng, "conv2", 8, 16, 3, 2, 1, true),
                conv(&mut rng, "conv3", 16, 32, 3, 2, 1, true),
                Layer::GlobalAvgPool {
                    name: "gap".into(),
                },
                dense(&mut rng, "fc", 32, num_classes, false),
            ],
            other => return Err(Error::UnknownArch(other.to_string())),
        };
        // sanity: dense input dims must match the spatial pipeline
        let net = NeuralNet {
            arch: arch.to_string(),
            input_c: c,
            input_h: h,
            input_w: w,
            num_classes,
            layers,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let (mut c, mut h, mut w) = (self.input_c, self.input_h, self.input_w);
        for layer in &self.layers {
            if let Layer::Dense { in_dim, .. } = layer {
                if *in_dim != c * h * w {
                    return Err(Error::ShapeMismatch(format!(
                        "dense `{}` expects {} inputs, pipeline provides {}",
                        layer.name(),
                        in_dim,
                        c * h * w
                    )));
                }
            }
            let (nc, nh, nw) = layer.out_shape(c, h, w);
            c = nc;
            h = nh;
            w = nw;
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name().to_string()).collect()
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .map(|l| l.name().to_string())
            .collect()
    }

    pub fn last_conv_layer(&self) -> Option<String> {
        self.conv_layer_names().last().cloned()
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name() == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Number of output channels of a conv layer.
    pub fn layer_channels(&self, name: &str) -> Result<usize> {
        match &self.layers[self.layer_index(name)?] {
            Layer::Conv { out_c, .. } => Ok(*out_c),
            other => Err(Error::UnknownLayer(format!(
                "{} is not a convolutional layer",
                other.name()
            ))),
        }
    }

    /// Forward pass keeping every intermediate output. `trace[0]` is the
    /// input; `trace[i + 1]` is the output of layer `i`.
    pub fn trace(&self, x: &Tensor3) -> Vec<Tensor3> {
        let mut outs = Vec::with_capacity(self.layers.len() + 1);
        outs.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(outs.last().unwrap());
            outs.push(next);
        }
        outs
    }

    pub fn activations(&self, layer: &str, x: &Tensor3) -> Result<Tensor3> {
        let idx = self.layer_index(layer)?;
        let mut cur = x.clone();
        for layer in &self.layers[..=idx] {
            cur = layer.forward(&cur);
        }
        Ok(cur)
    }

    pub fn backward(
        &self,
        trace: &[Tensor3],
        grad_logits: &[f64],
        wants: &BackwardWants,
    ) -> Result<BackwardPass> {
        debug_assert_eq!(trace.len(), self.layers.len() + 1);
        let last = trace.last().unwrap();
        if grad_logits.len() != last.len() {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient has {} entries, network outputs {}",
                grad_logits.len(),
                last.len()
            )));
        }
        for (name, _) in &wants.inject {
            self.layer_index(name)?;
        }
        for name in &wants.record_layers {
            self.layer_index(name)?;
        }

        let mut pass = BackwardPass {
            param_grads: vec![LayerGrad::default(); self.layers.len()],
            ..Default::default()
        };
        let mut grad = Tensor3::from_vec(last.c, last.h, last.w, grad_logits.to_vec());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            // taps apply to this layer's output
            for (name, extra) in &wants.inject {
                if name == layer.name() {
                    if !extra.same_shape(&grad) {
                        return Err(Error::ShapeMismatch(format!(
                            "injected gradient shape mismatch at `{name}`"
                        )));
                    }
                    grad.add_scaled(extra, 1.0);
                }
            }
            if wants.record_layers.iter().any(|n| n == layer.name()) {
                pass.layer_grads
                    .insert(layer.name().to_string(), grad.clone());
            }
            let (grad_in, lg) =
                layer.backward(&trace[i], &trace[i + 1], &grad, wants.param_grads);
            if let Some(lg) = lg {
                pass.param_grads[i] = lg;
            }
            grad = grad_in;
        }
        if wants.input_grad {
            pass.input_grad = Some(grad);
        }
        Ok(pass)
    }

    /// (weight, bias) mutable views for every parameterized layer, aligned
    /// with `BackwardPass::param_grads` indices.
    pub fn params_mut(&mut self) -> Vec<(usize, &mut Vec<f64>, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, layer)| match layer {
                Layer::Conv { weight, bias, .. } => Some((i, weight, bias)),
                Layer::Dense { weight, bias, .. } => Some((i, weight, bias)),
                Layer::GlobalAvgPool { .. } => None,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias, .. } => weight.len() + bias.len(),
                Layer::Dense { weight, bias, .. } => weight.len() + bias.len(),
                Layer::GlobalAvgPool { .. } => 0,
            })
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                    out.extend_from_slice(weight);
                    out.extend_from_slice(bias);
                }
                Layer::GlobalAvgPool { .. } => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                    let wn = weight.len();
                    weight.copy_from_slice(&params[offset..offset + wn]);
                    offset += wn;
                    let bn = bias.len();
                    bias.copy_from_slice(&params[offset..offset + bn]);
                    offset += bn;
                }
                Layer::GlobalAvgPool { .. } => {}
            }
        }
        debug_assert_eq!(offset, params.len());
    }

    pub fn grads_flat(pass: &BackwardPass) -> Vec<f64> {
        let mut out = Vec::new();
        for lg in &pass.param_grads {
            out.extend_from_slice(&lg.weight);
            out.extend_from_slice(&lg.bias);
        }
        out
    }

    /// Zero the given output channels of a conv layer (filter weights and bias).
    pub fn prune_channels(&mut self, layer: &str, channels: &[usize]) -> Result<()> {
        let idx = self.layer_index(layer)?;
        match &mut self.layers[idx] {
            Layer::Conv {
                in_c,
                out_c,
                k,
                weight,
                bias,
                ..
            } => {
                for &ch in channels {
                    if ch >= *out_c {
                        return Err(Error::OutOfRange {
                            what: "channel index",
                            value: ch as f64,
                        });
                    }
                    let span = *in_c * *k * *k;
                    for v in &mut weight[ch * span..(ch + 1) * span] {
                        *v = 0.0;
                    }
                    bias[ch] = 0.0;
                }
                Ok(())
            }
            other => Err(Error::UnknownLayer(format!(
                "{} is not a convolutional layer",
                other.name()
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

impl Classifier for NeuralNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &Tensor3) -> Vec<f64> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur.data
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[allow(clippy::too_many_arguments)]
fn conv(
    rng: &mut ChaCha8Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Layer {
    Layer::Conv {
        name: name.to_string(),
        in_c,
        out_c,
        k,
        stride,
        pad,
        relu,
        weight: kaiming_uniform(rng, out_c * in_c * k * k, in_c * k * k),
        bias: vec![0.0; out_c],
    }
}

fn dense(rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize, relu: bool) -> Layer {
    Layer::Dense {
        name: name.to_string(),
        in_dim,
        out_dim,
        relu,
        weight: kaiming_uniform(rng, out_dim * in_dim, in_dim),
        bias: vec![0.0; out_dim],
    }
}
