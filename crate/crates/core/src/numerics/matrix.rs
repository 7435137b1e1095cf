use super::Scalar;
use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

fn check_inner(what: &str, lhs: (usize, usize), rhs: (usize, usize), ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {}x{} with {}x{}",
            lhs.0, lhs.1, rhs.0, rhs.1
        )))
    }
}

/// `c += a · b`.
///
/// Each output element is accumulated over the inner dimension in index
/// order, so results do not depend on how the inner loop is vectorized.
pub fn matmul_acc<T: Scalar>(c: &mut Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    check_inner("matmul", a.shape(), b.shape(), a.cols == b.rows)?;
    check_inner(
        "matmul output",
        c.shape(),
        (a.rows, b.cols),
        c.shape() == (a.rows, b.cols),
    )?;
    let (n, k) = (b.cols, a.cols);
    for i in 0..a.rows {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut c.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    Ok(())
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    matmul_acc(&mut c, a, b)?;
    Ok(c)
}

/// `c += aᵀ · b` without materializing the transpose.
pub fn matmul_tn_acc<T: Scalar>(c: &mut Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    check_inner("matmul_tn", a.shape(), b.shape(), a.rows == b.rows)?;
    check_inner(
        "matmul_tn output",
        c.shape(),
        (a.cols, b.cols),
        c.shape() == (a.cols, b.cols),
    )?;
    let (m, n) = (a.cols, b.cols);
    for p in 0..a.rows {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c.data[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    Ok(())
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_inner("matmul_nt", a.shape(), b.shape(), a.cols == b.cols)?;
    matmul(a, &b.transpose())
}

/// Gradients of `c = a · b` given `dc`: returns `(da, db)`.
pub fn matmul_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    dc: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_inner(
        "matmul_backward",
        (a.rows, b.cols),
        dc.shape(),
        dc.shape() == (a.rows, b.cols),
    )?;
    let da = matmul_nt(dc, b)?;
    let mut db = Matrix::zeros(b.rows, b.cols);
    matmul_tn_acc(&mut db, a, dc)?;
    Ok((da, db))
}
