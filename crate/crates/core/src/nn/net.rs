//! Network parameters, forward pass and backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Head, LayerSpec, NetForm, NetSpec};
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Dense `(channels, height, width)` activation, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn from_image(img: &GrayImage) -> Self {
        Self::new(1, img.height(), img.width(), img.pixels().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub spec: NetSpec,
    /// One entry per layer; empty for layers without parameters.
    pub params: Vec<LayerParams>,
    pub seed: u64,
    pub metadata: serde_json::Value,
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Tensor>,
    /// Pre-activation of the head layer.
    head_pre: Vec<f64>,
    dropout: Vec<Option<Vec<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.acts.last().unwrap().data
    }
}

impl NetworkWeights {
    /// Zero weights, shaped for `spec`.
    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        let input = spec
            .input_shape()
            .unwrap_or((1, spec.min_side(), spec.min_side()));
        let params = spec
            .param_shapes(input)?
            .into_iter()
            .map(|p| LayerParams {
                weight: vec![0.0; p.weight],
                bias: vec![0.0; p.bias],
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            seed: 0,
            metadata: serde_json::Value::Null,
        })
    }

    /// Seeded He-style uniform initialization, zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(spec)?;
        w.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in w.params.iter_mut() {
            if p.bias.is_empty() {
                continue;
            }
            let fan_in = p.weight.len() / p.bias.len();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in p.weight.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(w)
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.weight.iter().chain(&p.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != 1 {
            return Err(Error::Shape(format!(
                "expected a single-channel input, got {c}"
            )));
        }
        match self.spec.form {
            NetForm::Patch { input_side } if h != input_side || w != input_side => {
                Err(Error::Shape(format!(
                    "network expects {input_side}x{input_side} input, got {w}x{h}"
                )))
            }
            _ => {
                let need = self.spec.min_side();
                if h < need || w < need {
                    return Err(Error::Shape(format!(
                        "input {w}x{h} smaller than receptive field {need}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Inference on any admissible input.
    pub fn run(&self, input: Tensor) -> Result<Tensor> {
        self.infer(&input.data, input.h, input.w)
    }

    /// Inference straight from image pixels, without copying them.
    pub fn run_image(&self, img: &GrayImage) -> Result<Tensor> {
        self.infer(img.pixels(), img.height(), img.width())
    }

    /// Forward pass that keeps only the current activation.
    fn infer(&self, input: &[f64], h: usize, w: usize) -> Result<Tensor> {
        self.check_input(1, h, w)?;
        // Standardizing is affine, so it is applied to the first layer's
        // output instead of materializing a scaled copy of the input.
        let moments = self.spec.standardize.then(|| moments(input));
        let last = self.spec.last_param_layer();
        let mut cur: Option<Tensor> = None;
        for (i, (layer, p)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            let (x, xc, xh, xw) = match &cur {
                Some(t) => (&t.data[..], t.c, t.h, t.w),
                None => (input, 1, h, w),
            };
            let mut out = match *layer {
                LayerSpec::Conv {
                    filters,
                    filter_size,
                    stride,
                    dilation,
                } => conv_planes(
                    x,
                    (xc, xh, xw),
                    &p.weight,
                    &p.bias,
                    filters,
                    filter_size,
                    stride,
                    dilation,
                ),
                LayerSpec::FullyConnected { out_dim } => {
                    Tensor::new(out_dim, 1, 1, fc_forward(x, &p.weight, &p.bias, out_dim))
                }
                LayerSpec::Flatten => Tensor::new(x.len(), 1, 1, x.to_vec()),
                LayerSpec::Dropout { .. } => Tensor::new(xc, xh, xw, x.to_vec()),
            };
            if let (0, Some((mean, inv))) = (i, moments) {
                let per_out = out.data.len() / p.bias.len();
                let per_weight = p.weight.len() / p.bias.len();
                for ((plane, ws), &b) in out
                    .data
                    .chunks_mut(per_out)
                    .zip(p.weight.chunks(per_weight))
                    .zip(&p.bias)
                {
                    let shift = b + mean * ws.iter().sum::<f64>();
                    plane.iter_mut().for_each(|v| *v = (*v - shift) * inv + b);
                }
            }
            if layer.has_params() {
                let head = self.spec.head;
                if i == last {
                    out.data.iter_mut().for_each(|v| *v = head.apply(*v));
                } else {
                    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            cur = Some(out);
        }
        Ok(cur.unwrap_or_else(|| Tensor::new(1, h, w, input.to_vec())))
    }

    /// Forward pass keeping intermediate activations. With an RNG, dropout
    /// layers are active (inverted scaling); without, they pass through.
    pub fn run_traced(&self, mut input: Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Trace> {
        self.check_input(input.c, input.h, input.w)?;
        if self.spec.standardize {
            input.data = standardized(&input.data);
        }
        let last = self.spec.last_param_layer();
        let head = self.spec.head;
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut dropout = Vec::with_capacity(self.spec.layers.len());
        let mut head_pre = Vec::new();
        acts.push(input);
        for (i, (layer, p)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            let x = acts.last().unwrap();
            let mut mask = None;
            let mut out = match *layer {
                LayerSpec::Conv {
                    filters,
                    filter_size,
                    stride,
                    dilation,
                } => conv_forward(
                    x,
                    &p.weight,
                    &p.bias,
                    filters,
                    filter_size,
                    stride,
                    dilation,
                ),
                LayerSpec::FullyConnected { out_dim } => Tensor::new(
                    out_dim,
                    1,
                    1,
                    fc_forward(&x.data, &p.weight, &p.bias, out_dim),
                ),
                LayerSpec::Flatten => Tensor::new(x.data.len(), 1, 1, x.data.clone()),
                LayerSpec::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) if rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let m: Vec<f64> = (0..x.data.len())
                            .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
                            .collect();
                        let data = x.data.iter().zip(&m).map(|(a, b)| a * b).collect();
                        mask = Some(m);
                        Tensor::new(x.c, x.h, x.w, data)
                    }
                    _ => x.clone(),
                },
            };
            if layer.has_params() {
                if i == last {
                    head_pre = out.data.clone();
                    out.data.iter_mut().for_each(|v| *v = head.apply(*v));
                } else {
                    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            dropout.push(mask);
            acts.push(out);
        }
        Ok(Trace {
            acts,
            head_pre,
            dropout,
        })
    }

    /// Scalar output for a single patch.
    pub fn forward(&self, patch: &GrayImage) -> Result<f64> {
        if !matches!(self.spec.form, NetForm::Patch { .. }) {
            return Err(Error::Shape("patch forward needs a patch network".into()));
        }
        Ok(self.run_image(patch)?.data[0])
    }

    /// Accumulates parameter gradients of a loss whose derivative with
    /// respect to the network output is `d_out`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grads: &mut [LayerParams]) {
        let last = self.spec.last_param_layer();
        let head = self.spec.head;
        let mut g = d_out.to_vec();
        for i in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[i];
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            if layer.has_params() {
                if i == last {
                    for ((gv, &pre), &out) in g.iter_mut().zip(&trace.head_pre).zip(&y.data) {
                        *gv *= match head {
                            Head::Abs => {
                                if pre >= 0.0 {
                                    1.0
                                } else {
                                    -1.0
                                }
                            }
                            Head::Sigmoid => out * (1.0 - out),
                        };
                    }
                } else {
                    for (gv, &out) in g.iter_mut().zip(&y.data) {
                        if out <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
            let need_input_grad = i > 0;
            let p = &self.params[i];
            let gp = &mut grads[i];
            g = match *layer {
                LayerSpec::Conv {
                    filters,
                    filter_size,
                    stride,
                    dilation,
                } => {
                    let mut din = if need_input_grad {
                        vec![0.0; x.data.len()]
                    } else {
                        Vec::new()
                    };
                    conv_backward(
                        x,
                        &p.weight,
                        &g,
                        (filters, y.h, y.w),
                        (filter_size, stride, dilation),
                        gp,
                        need_input_grad.then_some(&mut din[..]),
                    );
                    din
                }
                LayerSpec::FullyConnected { out_dim } => {
                    let n = x.data.len();
                    let mut din = vec![0.0; if need_input_grad { n } else { 0 }];
                    for j in 0..out_dim {
                        let gj = g[j];
                        gp.bias[j] += gj;
                        if gj == 0.0 {
                            continue;
                        }
                        let wrow = &p.weight[j * n..(j + 1) * n];
                        let grow = &mut gp.weight[j * n..(j + 1) * n];
                        for (gw, &xv) in grow.iter_mut().zip(&x.data) {
                            *gw += gj * xv;
                        }
                        if need_input_grad {
                            for (d, &wv) in din.iter_mut().zip(wrow) {
                                *d += gj * wv;
                            }
                        }
                    }
                    din
                }
                LayerSpec::Flatten => g,
                LayerSpec::Dropout { .. } => match &trace.dropout[i] {
                    Some(m) => g.iter().zip(m).map(|(a, b)| a * b).collect(),
                    None => g,
                },
            };
        }
    }

    pub fn zero_grads(&self) -> Vec<LayerParams> {
        self.params
            .iter()
            .map(|p| LayerParams {
                weight: vec![0.0; p.weight.len()],
                bias: vec![0.0; p.bias.len()],
            })
            .collect()
    }
}

/// Mean and inverse standard deviation; a flat input keeps unit scale.
fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let mean = lane_sum(x, |v| v) / n;
    let var = lane_sum(x, |v| (v - mean) * (v - mean)) / n;
    (mean, if var > 1e-18 { 1.0 / var.sqrt() } else { 1.0 })
}

fn lane_sum(x: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let chunks = x.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v)).sum();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += f(c[l]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Zero mean, unit variance.
fn standardized(x: &[f64]) -> Vec<f64> {
    let (mean, inv) = moments(x);
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn fc_forward(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let n = x.len();
    (0..out_dim)
        .map(|j| b[j] + dot(&w[j * n..(j + 1) * n], x))
        .collect()
}

/// Dot product with independent partial sums, so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Valid convolution (cross-correlation) with stride and dilation.
/// Weights are laid out `(filters, in_channels, k, k)`.
pub(crate) fn conv_forward(
    x: &Tensor,
    w: &[f64],
    b: &[f64],
    filters: usize,
    k: usize,
    s: usize,
    d: usize,
) -> Tensor {
    conv_planes(&x.data, (x.c, x.h, x.w), w, b, filters, k, s, d)
}

#[allow(clippy::too_many_arguments)]
fn conv_planes(
    x: &[f64],
    (ic, ih, iw): (usize, usize, usize),
    w: &[f64],
    b: &[f64],
    filters: usize,
    k: usize,
    s: usize,
    d: usize,
) -> Tensor {
    let reach = d * (k - 1) + 1;
    let oh = (ih - reach) / s + 1;
    let ow = (iw - reach) / s + 1;
    let mut out = vec![0.0; filters * oh * ow];
    if s == k && d == 1 {
        tile_conv(x, (ic, ih, iw), w, b, filters, k, (oh, ow), &mut out);
        return Tensor::new(filters, oh, ow, out);
    }
    for o in 0..filters {
        let oplane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        oplane.fill(b[o]);
        for c in 0..ic {
            let iplane = &x[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * ic + c) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let start = (oy * s + ky * d) * iw + kx * d;
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            for (ov, &iv) in orow.iter_mut().zip(&iplane[start..start + ow]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * iplane[start + ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(filters, oh, ow, out)
}

/// Non-overlapping windows (stride equal to filter size): every input row
/// segment is read once and applied to all filters.
#[allow(clippy::too_many_arguments)]
fn tile_conv(
    x: &[f64],
    (ic, ih, iw): (usize, usize, usize),
    w: &[f64],
    b: &[f64],
    filters: usize,
    k: usize,
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    for o in 0..filters {
        out[o * oh * ow..(o + 1) * oh * ow].fill(b[o]);
    }
    // Products are summed elementwise over the k rows of a window band
    // and reduced once per output, which keeps the inner loop free of
    // a serial dependency. Each input row is read once for all filters.
    let band_len = ow * k;
    let mut bands = vec![0.0; filters * band_len];
    for c in 0..ic {
        let plane = &x[c * ih * iw..(c + 1) * ih * iw];
        for oy in 0..oh {
            bands.fill(0.0);
            for ky in 0..k {
                let row = &plane[(oy * k + ky) * iw..][..band_len];
                for (o, band) in bands.chunks_exact_mut(band_len).enumerate() {
                    let wrow = &w[((o * ic + c) * k + ky) * k..][..k];
                    for (acc, seg) in band.chunks_exact_mut(k).zip(row.chunks_exact(k)) {
                        for ((a, &xv), &wv) in acc.iter_mut().zip(seg).zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
            for (o, band) in bands.chunks_exact(band_len).enumerate() {
                let orow = &mut out[o * oh * ow + oy * ow..][..ow];
                for (ov, acc) in orow.iter_mut().zip(band.chunks_exact(k)) {
                    *ov += acc.iter().sum::<f64>();
                }
            }
        }
    }
}

fn conv_backward(
    x: &Tensor,
    w: &[f64],
    g: &[f64],
    (filters, oh, ow): (usize, usize, usize),
    (k, s, d): (usize, usize, usize),
    gp: &mut LayerParams,
    din: Option<&mut [f64]>,
) {
    if s == k && d == 1 {
        tile_conv_backward(x, w, g, (filters, oh, ow), k, gp, din);
    } else {
        strided_conv_backward(x, w, g, (filters, oh, ow), (k, s, d), gp, din);
    }
}

fn strided_conv_backward(
    x: &Tensor,
    w: &[f64],
    g: &[f64],
    (filters, oh, ow): (usize, usize, usize),
    (k, s, d): (usize, usize, usize),
    gp: &mut LayerParams,
    mut din: Option<&mut [f64]>,
) {
    let (ic, ih, iw) = (x.c, x.h, x.w);
    for o in 0..filters {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        gp.bias[o] += gplane.iter().sum::<f64>();
        for c in 0..ic {
            let iplane = &x.data[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * ic + c) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let start = (oy * s + ky * d) * iw + kx * d;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for (ox, &gv) in grow.iter().enumerate() {
                            acc += gv * iplane[start + ox * s];
                        }
                        if let Some(din) = din.as_deref_mut() {
                            let dplane = &mut din[c * ih * iw..(c + 1) * ih * iw];
                            for (ox, &gv) in grow.iter().enumerate() {
                                dplane[start + ox * s] += wv * gv;
                            }
                        }
                    }
                    gp.weight[widx] += acc;
                }
            }
        }
    }
}

/// Backward counterpart of `tile_conv`, walking input rows contiguously.
fn tile_conv_backward(
    x: &Tensor,
    w: &[f64],
    g: &[f64],
    (filters, oh, ow): (usize, usize, usize),
    k: usize,
    gp: &mut LayerParams,
    mut din: Option<&mut [f64]>,
) {
    let (ic, ih, iw) = (x.c, x.h, x.w);
    for o in 0..filters {
        gp.bias[o] += g[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
    }
    for c in 0..ic {
        let plane = &x.data[c * ih * iw..(c + 1) * ih * iw];
        for o in 0..filters {
            let grad_rows = &g[o * oh * ow..(o + 1) * oh * ow];
            let base = (o * ic + c) * k * k;
            for oy in 0..oh {
                let grow = &grad_rows[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let off = (oy * k + ky) * iw;
                    let row = &plane[off..][..ow * k];
                    let wgrad = &mut gp.weight[base + ky * k..][..k];
                    for (&gv, seg) in grow.iter().zip(row.chunks_exact(k)) {
                        for (a, &xv) in wgrad.iter_mut().zip(seg) {
                            *a += gv * xv;
                        }
                    }
                    if let Some(din) = din.as_deref_mut() {
                        let wrow = &w[base + ky * k..][..k];
                        let drow = &mut din[c * ih * iw + off..][..ow * k];
                        for (&gv, seg) in grow.iter().zip(drow.chunks_exact_mut(k)) {
                            for (dv, &wv) in seg.iter_mut().zip(wrow) {
                                *dv += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}
