use super::{Result, Scalar, TensorError};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// One side holds a single element.
    LhsScalar,
    RhsScalar,
    /// One side is a row vector of length `n` stretched over an `[m, n]` matrix.
    LhsRow,
    RhsRow,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(TensorError::Layout {
                shape,
                len: data.len(),
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Layout {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Builds an `[rows, cols]` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lift(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub(crate) fn broadcast_kind(&self, other: &Self) -> Option<Broadcast> {
        if self.shape == other.shape {
            return Some(Broadcast::Same);
        }
        if other.len() == 1 {
            return Some(Broadcast::RhsScalar);
        }
        if self.len() == 1 {
            return Some(Broadcast::LhsScalar);
        }
        let row_of = |row: &Self, mat: &Self| {
            mat.rank() == 2
                && row.len() == mat.shape[1]
                && (row.rank() == 1 || (row.rank() == 2 && row.shape[0] == 1))
        };
        if row_of(other, self) {
            return Some(Broadcast::RhsRow);
        }
        if row_of(self, other) {
            return Some(Broadcast::LhsRow);
        }
        None
    }

    /// Elementwise combination under the scalar / row-vector broadcasting rules.
    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let kind = self
            .broadcast_kind(other)
            .ok_or_else(|| TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })?;
        let (shape, data) = match kind {
            Broadcast::Same => (
                self.shape.clone(),
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
            Broadcast::RhsScalar => {
                let b = other.data[0];
                (
                    self.shape.clone(),
                    self.data.iter().map(|&a| f(a, b)).collect(),
                )
            }
            Broadcast::LhsScalar => {
                let a = self.data[0];
                (
                    other.shape.clone(),
                    other.data.iter().map(|&b| f(a, b)).collect(),
                )
            }
            Broadcast::RhsRow => {
                let n = other.len();
                (
                    self.shape.clone(),
                    self.data
                        .iter()
                        .enumerate()
                        .map(|(i, &a)| f(a, other.data[i % n]))
                        .collect(),
                )
            }
            Broadcast::LhsRow => {
                let n = self.len();
                (
                    other.shape.clone(),
                    other
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &b)| f(self.data[i % n], b))
                        .collect(),
                )
            }
        };
        Ok(Self { shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    /// Matrix product of `[m, k]` and `[k, n]`. Vectors are treated as single rows.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() > 2 || other.rank() != 2 {
            return Err(err());
        }
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose of rank-{} tensor",
                self.rank()
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Sums a gradient that was broadcast up to `self`'s shape back down to `target`.
    pub(crate) fn reduce_to(&self, target: &[usize], kind: Broadcast, lhs_side: bool) -> Self {
        let collapse = match (kind, lhs_side) {
            (Broadcast::Same, _) => return self.clone(),
            (Broadcast::LhsScalar, true) | (Broadcast::RhsScalar, false) => Some(true),
            (Broadcast::LhsRow, true) | (Broadcast::RhsRow, false) => Some(false),
            _ => None,
        };
        match collapse {
            None => self.clone(),
            Some(true) => Tensor {
                shape: target.to_vec(),
                data: vec![self.sum()],
            },
            Some(false) => {
                let n = self.cols();
                let mut data = vec![T::zero(); n];
                for chunk in self.data.chunks(n) {
                    for (d, &v) in data.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                Tensor {
                    shape: target.to_vec(),
                    data,
                }
            }
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}
