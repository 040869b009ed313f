use crate::error::{Error, Result};

/// Dense row-major `f64` tensor of rank 1 or 2.
///
/// Rank-1 tensors behave as a single row wherever a matrix is expected.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!("unsupported rank {}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::new(&self.data, k, 1),
            View::new(&other.data, n, 1),
            &mut out,
            0.0,
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }
}

/// Strided read-only view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        View {
            data,
            rs: rs as isize,
            cs: cs as isize,
        }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c` row-major `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let a_need = (m as isize - 1) * a.rs + (k as isize - 1) * a.cs;
    let b_need = (k as isize - 1) * b.rs + (n as isize - 1) * b.cs;
    assert!((a_need as usize) < a.data.len() && (b_need as usize) < b.data.len());
    // SAFETY: the asserts above bound every strided access into `a`, `b`, and
    // `c`; strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax restricted to entries whose mask value is non-zero.
///
/// Masked entries come out as exactly `0.0`, and their logits never enter the
/// computation, so the result does not depend on them at all. Rows with no
/// unmasked entry return all zeros.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if logits.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs logits {:?}",
            mask.shape(),
            logits.shape()
        )));
    }
    let keep: Vec<bool> = mask.data().iter().map(|&m| m != 0.0).collect();
    let mut out = vec![0.0; logits.len()];
    softmax_rows_into(logits.data(), Some(&keep), logits.cols(), &mut out);
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

pub(crate) fn softmax_rows_into(x: &[f64], keep: Option<&[bool]>, cols: usize, out: &mut [f64]) {
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let kr = keep.map(|k| &k[r * cols..(r + 1) * cols]);
        let allowed = |j: usize| kr.map_or(true, |k| k[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            or.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
            if allowed(j) {
                *o = (v - max).exp();
                sum += *o;
            } else {
                *o = 0.0;
            }
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
}

/// Numerically stable `ln Σ exp(x)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
