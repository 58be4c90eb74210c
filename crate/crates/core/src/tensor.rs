//! Dense tensors, label maps, stable softmax and the seeded generator.
//!
//! Storage is `f32`. Anything that sums many terms (losses, norms, conv
//! accumulators) works in `f64` and converts back at the end.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{ensure, Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Row-major dense tensor of rank 1 to 4.
///
/// Images are `[C, H, W]` in `[0, 1]`; logit fields are `[K, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor element {i} is {}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    /// Builds a tensor from `f64` values, rounding to storage precision.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// `[C, H, W]` view of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        ensure!(
            self.dims.len() == 3,
            Shape,
            "expected a rank-3 [C, H, W] tensor, got dims {:?}",
            self.dims
        );
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    /// Largest absolute elementwise difference, accumulated in `f64`.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        ensure!(
            self.dims == other.dims,
            Shape,
            "dims {:?} vs {:?}",
            self.dims,
            other.dims
        );
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    ensure!(
        (1..=4).contains(&dims.len()),
        Shape,
        "rank must be 1..=4, got {}",
        dims.len()
    );
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
    ensure!(
        n == len,
        Shape,
        "dims {dims:?} need {n} elements, got {len}"
    );
    Ok(())
}

/// `H x W` class map. [`IGNORE_INDEX`] marks pixels outside every metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            height * width == data.len(),
            Shape,
            "label map {height}x{width} needs {} entries, got {}",
            height * width,
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }

    /// Rejects labels that are neither `< classes` nor the ignore index.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some((i, &c)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, &c)| c != IGNORE_INDEX && c as usize >= classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {c} at pixel {i} is not below K = {classes}"
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        logits.len() >= 2,
        InvalidArgument,
        "softmax needs K >= 2, got {}",
        logits.len()
    );
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Unchecked softmax for hot loops; `out.len()` must equal `logits.len()`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &u) in out.iter_mut().zip(logits) {
        *o = (u - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn one_hot(class: usize, classes: usize) -> Result<Vec<f64>> {
    ensure!(
        class < classes,
        InvalidArgument,
        "class {class} out of range for K = {classes}"
    );
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    Ok(v)
}

/// Seeded ChaCha20 stream.
///
/// Work items derive their own stream from `(seed, index)` through the
/// ChaCha stream counter, so no generator state is shared between items.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for work item `index` under `seed`.
    pub fn for_item(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(index);
        Self { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (lo + (hi - lo) * self.next_f64()).clamp(lo, hi)
    }

    /// Uniform integer in `lo..=hi`. Sampled as `u64` so streams match across
    /// pointer widths.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo as u64..=hi as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i as u64) as usize;
            items.swap(i, j);
        }
    }
}

/// Tensor of independent uniform draws in `[lo, hi]`.
pub fn uniform_noise(rng: &mut Rng, dims: Vec<usize>, lo: f32, hi: f32) -> Result<Tensor> {
    ensure!(
        lo.is_finite() && hi.is_finite(),
        NonFinite,
        "noise bounds must be finite, got [{lo}, {hi}]"
    );
    ensure!(lo <= hi, InvalidArgument, "noise range lo = {lo} > hi = {hi}");
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| (rng.uniform(lo as f64, hi as f64) as f32).clamp(lo, hi))
        .collect();
    Tensor::new(dims, data)
}
