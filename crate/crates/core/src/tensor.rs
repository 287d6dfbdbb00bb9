//! Dense row-major tensors and the scalar kernels built on them.
//!
//! `Tensor` is the universal numeric carrier: a shape plus 64-bit float
//! data. Values are expected to stay finite at module boundaries;
//! [`Tensor::validate_finite`] enforces that where it matters.

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f64`, row-major. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::usage(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a scalar or 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    /// Number of rows / columns for 2-D tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::usage(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn random_normal(shape: &[usize], std: f64, rng: &mut crate::rng::SeededRng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.normal(0.0, std)).collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

/// Two-way exp-normalization of a pair of scores, max-subtracted for
/// stability. Returns `(e^a, e^b) / (e^a + e^b)`.
pub fn softmax_pair(a: f64, b: f64) -> Result<(f64, f64)> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::domain(format!("softmax_pair on non-finite input ({a}, {b})")));
    }
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    Ok((ea / z, eb / z))
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.is_empty() || u.len() != v.len() {
        return Err(Error::usage(format!(
            "cosine_similarity needs equal nonempty lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::domain("cosine_similarity on zero-norm vector".to_string()));
    }
    // Identical and negated inputs produce these sums exactly; short-cut
    // past the sqrt rounding so self-similarity is exactly +/-1.
    if nu == nv && dot == nu {
        return Ok(1.0);
    }
    if nu == nv && dot == -nu {
        return Ok(-1.0);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Sampling positions for corner-aligned interpolation: output index `i`
/// of `out` samples reads input coordinate `i * (in-1)/(out-1)`.
pub(crate) fn resize_coords(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = if out_len == 1 {
                0.0
            } else {
                i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Corner-aligned bilinear interpolation of a 2-D grid to a new size.
pub fn bilinear_resize(grid: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if grid.shape().len() != 2 {
        return Err(Error::usage(format!("bilinear_resize expects 2-D grid, got {:?}", grid.shape())));
    }
    let (in_h, in_w) = (grid.rows(), grid.cols());
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::domain("bilinear_resize with zero extent".to_string()));
    }
    let ys = resize_coords(in_h, out_h);
    let xs = resize_coords(in_w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = grid.at(y0, x0) * (1.0 - fx) + grid.at(y0, x1) * fx;
            let bot = grid.at(y1, x0) * (1.0 - fx) + grid.at(y1, x1) * fx;
            out[i * out_w + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
