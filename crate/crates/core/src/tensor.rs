//! Dense row-major `f64` tensors and the handful of reductions the CAPE
//! pipeline needs.
//!
//! 3-D tensors use `(row, column, channel)` index order everywhere, so an
//! activation map `M` of shape `[H, W, C]` stores `M[i][j][c]` at
//! `(i * W + j) * C + c`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::arg(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::arg(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a 1-D tensor. Panics on an empty slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Tensor::new(vec![values.len()], values.to_vec()).expect("non-empty vector")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, &self.shape));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index of the first maximal element.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Slice `[.., .., channel]` of a 3-D tensor as an `[H, W]` tensor.
    pub fn channel(&self, channel: usize) -> Result<Tensor> {
        let [h, w, c] = self.dims3()?;
        if channel >= c {
            return Err(Error::arg(format!("channel {channel} out of range for {c} channels")));
        }
        let data = (0..h * w).map(|p| self.data[p * c + channel]).collect();
        Tensor::new(vec![h, w], data)
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [h, w] => Ok([h, w]),
            _ => Err(Error::arg(format!("expected a 2-D tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok([h, w, c]),
            _ => Err(Error::arg(format!("expected a 3-D tensor, got shape {:?}", self.shape))),
        }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `t / temperature` normalized jointly over `axes`; every slice
/// over the remaining axes sums to one.
pub fn softmax_axis(t: &Tensor, axes: &[usize], temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
    }
    if axes.is_empty() {
        return Err(Error::arg("softmax needs at least one axis"));
    }
    let rank = t.rank();
    let mut normalized = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::arg(format!("axis {a} out of range for rank {rank}")));
        }
        if normalized[a] {
            return Err(Error::arg(format!("axis {a} listed twice")));
        }
        normalized[a] = true;
    }

    // Group id of each element = its mixed-radix index over the kept axes.
    let groups: usize = (0..rank)
        .filter(|&a| !normalized[a])
        .map(|a| t.shape[a])
        .product();
    let mut group_of = vec![0usize; t.len()];
    let mut idx = vec![0usize; rank];
    for g in group_of.iter_mut() {
        let mut id = 0;
        for a in 0..rank {
            if !normalized[a] {
                id = id * t.shape[a] + idx[a];
            }
        }
        *g = id;
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < t.shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }

    let mut max = vec![f64::NEG_INFINITY; groups];
    for (&x, &g) in t.data.iter().zip(&group_of) {
        max[g] = max[g].max(x);
    }
    let mut out: Vec<f64> = t
        .data
        .iter()
        .zip(&group_of)
        .map(|(&x, &g)| ((x - max[g]) / temperature).exp())
        .collect();
    let mut total = vec![0.0; groups];
    for (&e, &g) in out.iter().zip(&group_of) {
        total[g] += e;
    }
    for (e, &g) in out.iter_mut().zip(&group_of) {
        *e /= total[g];
    }
    Tensor::new(t.shape.clone(), out)
}

/// Softmax of a plain slice at unit temperature.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|e| *e /= total);
    out
}

/// Affine rescale to `[0, 1]`. A constant input maps to all zeros.
pub fn minmax_normalize(t: &Tensor) -> Tensor {
    let lo = t.min();
    let hi = t.max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Tensor::zeros(t.shape());
    }
    t.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
}

/// Align-corners bilinear resampling of an `[H, W]` map to `[H', W']`.
pub fn bilinear_upsample(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let [h, w] = map.dims2()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::arg(format!(
            "upsampling target {th}x{tw} is smaller than source {h}x{w}"
        )));
    }
    let src = |i: usize, j: usize| map.data[i * w + j];
    // Source coordinate of output index `o` on an axis of `n` -> `m` samples.
    let coord = |o: usize, n: usize, m: usize| -> (usize, usize, f64) {
        if n == 1 || m == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (n - 1) as f64 / (m - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for oi in 0..th {
        let (i0, i1, fy) = coord(oi, h, th);
        for oj in 0..tw {
            let (j0, j1, fx) = coord(oj, w, tw);
            let top = src(i0, j0) * (1.0 - fx) + src(i0, j1) * fx;
            let bottom = src(i1, j0) * (1.0 - fx) + src(i1, j1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![th, tw], out)
}

pub fn rectify(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

/// Sample Pearson correlation. Zero-variance inputs give 0.
pub fn pearson_corr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape())?;
    if a.len() < 2 {
        return Err(Error::arg("correlation needs at least two elements"));
    }
    let ma = a.mean();
    let mb = b.mean();
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}
