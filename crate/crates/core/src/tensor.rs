//! Dense row-major f64 tensors.
//!
//! Everything in this crate computes in 64-bit floats so that gradient-check
//! tolerances stay unambiguous. Tensors are immutable values after
//! construction; operations hand back fresh tensors.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, checking that the element count matches the shape and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor value {bad}")));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Like [`Tensor::new`] but without the finiteness scan; used internally
    /// where the inputs are already known finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Row-major matrix from a flat buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    /// Number of rows when viewed as a matrix (`[n]` counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Row length when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.data.len() / self.shape[0],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Copy out one row as a rank-1 tensor.
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![self.cols()], self.row(i).to_vec())
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().enumerate() {
            debug_assert!(d < self.shape[i]);
            flat = flat * self.shape[i] + d;
        }
        self.data[flat]
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Stack rank-1 tensors of equal length into a matrix.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("cannot stack zero rows".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row lengths disagree: {} vs {}",
                    cols,
                    r.len()
                )));
            }
            data.extend_from_slice(r.data());
        }
        Ok(Tensor::from_parts(vec![rows.len(), cols], data))
    }

    pub(crate) fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Normalize a rank-1 tensor to unit Euclidean norm.
///
/// Fails with [`Error::ZeroNorm`] when the norm is at or below 1e-12.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 || v.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "l2_normalize expects a non-empty rank-1 tensor, got {:?}",
            v.shape()
        )));
    }
    let n = norm(v.data());
    if n <= 1e-12 {
        return Err(Error::ZeroNorm);
    }
    let data = v.data().iter().map(|x| x / n).collect();
    Ok(Tensor::from_parts(v.shape().to_vec(), data))
}

/// Pairwise cosine similarities between the rows of `a` (`[n,d]`) and the rows
/// of `b` (`[m,d]`); entry (i,j) = cos(a_i, b_j).
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() || a.cols() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cosine similarity wants [n,d] and [m,d], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let norms = |t: &Tensor| -> Result<Vec<f64>> {
        (0..t.rows())
            .map(|i| {
                let n = norm(t.row(i));
                if n <= 1e-12 {
                    Err(Error::ZeroNorm)
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = norms(a)?;
    let nb = norms(b)?;
    let mut out = vec![0.0; a.rows() * b.rows()];
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out[i * b.rows() + j] = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
        }
    }
    Ok(Tensor::from_parts(vec![a.rows(), b.rows()], out))
}
