//! The victim: a small convolutional segmentation network with hand-written
//! backward passes.
//!
//! A model is a chain of same-padded convolutions with ReLU between them (no
//! activation after the last layer). The reference architecture is
//! `conv3x3(C->16) relu conv3x3(16->16) relu conv1x1(16->K)`.
//!
//! Parameters are stored in `f32`; every forward and backward pass runs in
//! `f64`.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::{LabelMap, Rng, Tensor};
use crate::tseg::{self, Reader, MAGIC};

/// Hidden width of the reference architecture.
pub const HIDDEN: usize = 16;
pub const DEFAULT_CLASSES: usize = 5;

/// One same-padded square convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    w64: Vec<f64>,
    b64: Vec<f64>,
}

impl Conv2d {
    /// `weight` is `[out, in, k, k]` with odd `k`; `bias` is `[out]`.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let d = weight.dims();
        ensure!(
            d.len() == 4 && d[2] == d[3] && d[2] % 2 == 1,
            Shape,
            "conv weight must be [out, in, k, k] with odd k, got {d:?}"
        );
        ensure!(
            bias.dims() == [d[0]],
            Shape,
            "conv bias must be [{}], got {:?}",
            d[0],
            bias.dims()
        );
        let w64 = weight.to_f64();
        let b64 = bias.to_f64();
        Ok(Self {
            weight,
            bias,
            w64,
            b64,
        })
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(rng: &mut Rng, in_ch: usize, out_ch: usize, ksize: usize) -> Result<Self> {
        let fan_in = (in_ch * ksize * ksize) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_ch * in_ch * ksize * ksize;
        let w: Vec<f32> = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
        Self::new(
            Tensor::new(vec![out_ch, in_ch, ksize, ksize], w)?,
            Tensor::zeros(vec![out_ch])?,
        )
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    fn geometry(&self) -> ConvGeom {
        ConvGeom {
            out_ch: self.out_channels(),
            in_ch: self.in_channels(),
            k: self.kernel(),
        }
    }

    fn sgd_step(&mut self, grad: &LayerGrad, lr: f64) -> Result<()> {
        let w: Vec<f64> = self
            .w64
            .iter()
            .zip(&grad.weight)
            .map(|(p, g)| p - lr * g)
            .collect();
        let b: Vec<f64> = self
            .b64
            .iter()
            .zip(&grad.bias)
            .map(|(p, g)| p - lr * g)
            .collect();
        *self = Conv2d::new(
            Tensor::from_f64(self.weight.dims().to_vec(), &w)?,
            Tensor::from_f64(self.bias.dims().to_vec(), &b)?,
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    out_ch: usize,
    in_ch: usize,
    k: usize,
}

/// Output and input column ranges for a horizontal tap offset `d`.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(g: ConvGeom, w: &[f64], b: &[f64], input: &[f64], h: usize, wd: usize) -> Vec<f64> {
    let plane = h * wd;
    let pad = (g.k / 2) as isize;
    let mut out = vec![0.0; g.out_ch * plane];
    for oc in 0..g.out_ch {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.fill(b[oc]);
        for ic in 0..g.in_ch {
            let src = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..g.k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..g.k {
                    let dx = kx as isize - pad;
                    let wv = w[((oc * g.in_ch + ic) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(wd, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + (x0 as isize + dx) as usize
                            ..sy * wd + (x1 as isize + dx) as usize];
                        for (ov, sv) in orow.iter_mut().zip(srow) {
                            *ov += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: ConvGeom, w: &[f64], grad_out: &[f64], h: usize, wd: usize) -> Vec<f64> {
    let plane = h * wd;
    let pad = (g.k / 2) as isize;
    let mut grad_in = vec![0.0; g.in_ch * plane];
    for ic in 0..g.in_ch {
        let gi = &mut grad_in[ic * plane..(ic + 1) * plane];
        for oc in 0..g.out_ch {
            let go = &grad_out[oc * plane..(oc + 1) * plane];
            for ky in 0..g.k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..g.k {
                    let dx = kx as isize - pad;
                    let wv = w[((oc * g.in_ch + ic) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(wd, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &go[y * wd + x0..y * wd + x1];
                        let irow = &mut gi[sy * wd + (x0 as isize + dx) as usize
                            ..sy * wd + (x1 as isize + dx) as usize];
                        for (iv, gv) in irow.iter_mut().zip(grow) {
                            *iv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn conv_backward_params(
    g: ConvGeom,
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    wd: usize,
) -> LayerGrad {
    let plane = h * wd;
    let pad = (g.k / 2) as isize;
    let mut dw = vec![0.0; g.out_ch * g.in_ch * g.k * g.k];
    let mut db = vec![0.0; g.out_ch];
    for oc in 0..g.out_ch {
        let go = &grad_out[oc * plane..(oc + 1) * plane];
        db[oc] = go.iter().sum();
        for ic in 0..g.in_ch {
            let src = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..g.k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..g.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = tap_range(wd, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &go[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + (x0 as isize + dx) as usize
                            ..sy * wd + (x1 as isize + dx) as usize];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[((oc * g.in_ch + ic) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    LayerGrad {
        weight: dw,
        bias: db,
    }
}

/// Gradient of a scalar with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn add_scaled(&mut self, other: &LayerGrad, s: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += s * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += s * b;
        }
    }
}

/// Cached activations of one forward pass, ready for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    height: usize,
    width: usize,
    /// Input of every layer; `inputs[0]` is the image.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ForwardTrace {
    /// `[K, H, W]` logits, row-major.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Parameters of a conv chain. Immutable once built; training produces new
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    classes: usize,
    layers: Vec<Conv2d>,
}

impl ModelParams {
    pub fn from_layers(layers: Vec<Conv2d>) -> Result<Self> {
        ensure!(!layers.is_empty(), InvalidArgument, "model needs at least one layer");
        for (i, pair) in layers.windows(2).enumerate() {
            ensure!(
                pair[0].out_channels() == pair[1].in_channels(),
                Shape,
                "layer {i} emits {} channels but layer {} expects {}",
                pair[0].out_channels(),
                i + 1,
                pair[1].in_channels()
            );
        }
        let classes = layers.last().map(Conv2d::out_channels).unwrap_or(0);
        Ok(Self { classes, layers })
    }

    /// The reference architecture with seeded fan-in uniform initialisation.
    pub fn reference(in_channels: usize, classes: usize, seed: u64) -> Result<Self> {
        ensure!(classes >= 2, InvalidArgument, "need K >= 2, got {classes}");
        let mut rng = Rng::new(seed);
        Self::from_layers(vec![
            Conv2d::init(&mut rng, in_channels, HIDDEN, 3)?,
            Conv2d::init(&mut rng, HIDDEN, HIDDEN, 3)?,
            Conv2d::init(&mut rng, HIDDEN, classes, 1)?,
        ])
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = image.chw()?;
        ensure!(
            c == self.in_channels(),
            Shape,
            "image has {c} channels, model expects {}",
            self.in_channels()
        );
        ensure!(h > 0 && w > 0, Shape, "empty image {h}x{w}");
        Ok((h, w))
    }

    /// Forward pass on an `f64` image laid out `[C, H, W]`.
    pub fn trace_f64(&self, image: &[f64], height: usize, width: usize) -> Result<ForwardTrace> {
        ensure!(
            image.len() == self.in_channels() * height * width,
            Shape,
            "image buffer has {} values, expected {}x{height}x{width}",
            image.len(),
            self.in_channels()
        );
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = image.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = conv_forward(layer.geometry(), &layer.w64, &layer.b64, &current, height, width);
            if i < last {
                for v in out.iter_mut() {
                    // Subgradient at 0 is 0: strictly positive passes.
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            inputs.push(std::mem::replace(&mut current, out));
        }
        if let Some(i) = current.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i} is {}", current[i])));
        }
        Ok(ForwardTrace {
            height,
            width,
            inputs,
            logits: current,
        })
    }

    pub fn trace(&self, image: &Tensor) -> Result<ForwardTrace> {
        let (h, w) = self.check_image(image)?;
        self.trace_f64(&image.to_f64(), h, w)
    }

    /// `[K, H, W]` logits.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let tr = self.trace(image)?;
        Tensor::from_f64(vec![self.classes, tr.height, tr.width], &tr.logits)
    }

    fn check_upstream(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<()> {
        ensure!(
            grad_logits.len() == trace.logits.len(),
            Shape,
            "upstream gradient has {} values, logits have {}",
            grad_logits.len(),
            trace.logits.len()
        );
        if let Some(i) = grad_logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("upstream gradient {i} is {}", grad_logits[i])));
        }
        Ok(())
    }

    /// Backpropagates `grad_logits` to the image only.
    pub fn backward_input(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<Vec<f64>> {
        self.check_upstream(trace, grad_logits)?;
        Ok(self.backward(trace, grad_logits, false).0)
    }

    /// Backpropagates `grad_logits` to the image and to every parameter.
    pub fn backward_full(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
    ) -> Result<(Vec<f64>, Vec<LayerGrad>)> {
        self.check_upstream(trace, grad_logits)?;
        Ok(self.backward(trace, grad_logits, true))
    }

    fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        with_params: bool,
    ) -> (Vec<f64>, Vec<LayerGrad>) {
        let (h, w) = (trace.height, trace.width);
        let mut grad = grad_logits.to_vec();
        let mut param_grads = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            if with_params {
                param_grads.push(conv_backward_params(layer.geometry(), input, &grad, h, w));
            }
            let mut gi = conv_backward_input(layer.geometry(), &layer.w64, &grad, h, w);
            if i > 0 {
                // `input` is the ReLU output of layer i-1; zero exactly where it was clipped.
                for (g, &a) in gi.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            grad = gi;
        }
        param_grads.reverse();
        (grad, param_grads)
    }

    /// Gradient of `sum(grad_logits * logits)` with respect to the image.
    pub fn input_gradient(&self, image: &Tensor, grad_logits: &Tensor) -> Result<Tensor> {
        let tr = self.trace(image)?;
        ensure!(
            grad_logits.dims() == [self.classes, tr.height, tr.width],
            Shape,
            "upstream gradient dims {:?}, logits are [{}, {}, {}]",
            grad_logits.dims(),
            self.classes,
            tr.height,
            tr.width
        );
        let g = self.backward_input(&tr, &grad_logits.to_f64())?;
        Tensor::from_f64(image.dims().to_vec(), &g)
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        let tr = self.trace(image)?;
        Ok(argmax_labels(&tr.logits, self.classes, tr.height, tr.width))
    }

    /// Applies `params -= lr * grads` and returns the updated model.
    pub fn sgd_step(&self, grads: &[LayerGrad], lr: f64) -> Result<Self> {
        ensure!(
            grads.len() == self.layers.len(),
            Shape,
            "{} layer gradients for {} layers",
            grads.len(),
            self.layers.len()
        );
        let mut next = self.clone();
        for (layer, g) in next.layers.iter_mut().zip(grads) {
            layer.sgd_step(g, lr)?;
        }
        Ok(next)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            tseg::encode_f32_into(&mut out, &layer.weight);
            tseg::encode_f32_into(&mut out, &layer.bias);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic()?;
        let classes = r.u32()? as usize;
        let count = r.u32()? as usize;
        ensure!(count >= 1, Decode, "model file declares no layers");
        // Each layer needs at least two minimal tensor headers.
        ensure!(
            count <= r.remaining() / 22,
            Decode,
            "model file declares {count} layers but has {} bytes left",
            r.remaining()
        );
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let weight = r.tensor()?.into_f32()?;
            let bias = r.tensor()?.into_f32()?;
            layers.push(Conv2d::new(weight, bias).map_err(|e| Error::Decode(format!("layer {i}: {e}")))?);
        }
        ensure!(r.remaining() == 0, Decode, "{} trailing bytes after model", r.remaining());
        let model = Self::from_layers(layers).map_err(|e| Error::Decode(e.to_string()))?;
        ensure!(
            model.classes == classes,
            Decode,
            "header K = {classes} but last layer emits {}",
            model.classes
        );
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Per-pixel argmax of a `[K, H, W]` field; ties go to the lowest index.
pub fn argmax_labels(logits: &[f64], classes: usize, height: usize, width: usize) -> LabelMap {
    let plane = height * width;
    let data = (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if logits[k * plane + i] > logits[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(height, width, data).expect("plane size matches")
}

/// Accumulates `scale * layer grads` into `acc`.
pub(crate) fn accumulate(acc: &mut [LayerGrad], grads: &[LayerGrad], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_scaled(g, scale);
    }
}

pub(crate) fn zero_grads(model: &ModelParams) -> Vec<LayerGrad> {
    model
        .layers
        .iter()
        .map(|l| LayerGrad {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        })
        .collect()
}
