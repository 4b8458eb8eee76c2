//! Dense Cholesky factorization and solves on nalgebra storage, computed
//! with faer on one thread so results are bitwise reproducible.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt;
use faer::linalg::triangular_solve;
use faer::{MatMut, MatRef, Par};
use nalgebra::{DMatrix, DVector};

fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn view_mut(m: &mut DMatrix<f64>) -> MatMut<'_, f64> {
    let (r, c) = m.shape();
    MatMut::from_column_major_slice_mut(m.as_mut_slice(), r, c)
}

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub(crate) struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// `None` unless `a` is square and numerically positive definite. Only
    /// the lower triangle of `a` is read.
    pub fn new(mut a: DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        if n != a.ncols() || !a.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut buf = MemBuffer::new(llt::factor::cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default()));
        llt::factor::cholesky_in_place(
            view_mut(&mut a),
            Default::default(),
            Par::Seq,
            MemStack::new(&mut buf),
            Default::default(),
        )
        .ok()?;
        a.fill_upper_triangle(0.0, 1);
        Some(Cholesky { l: a })
    }

    #[cfg(test)]
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn unpack(self) -> DMatrix<f64> {
        self.l
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        llt::solve::solve_in_place(view(&self.l), view_mut(&mut x), Par::Seq, MemStack::new(&mut []));
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = b.len();
        let x = self.solve(&DMatrix::from_column_slice(n, 1, b.as_slice()));
        DVector::from_vec(x.data.into())
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        triangular_solve::solve_lower_triangular_in_place(view(&self.l), view_mut(&mut x), Par::Seq);
        x
    }

    /// `A⁻¹`, symmetric.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut out = DMatrix::zeros(n, n);
        let mut buf = MemBuffer::new(llt::inverse::inverse_scratch::<f64>(n, Par::Seq));
        llt::inverse::inverse(view_mut(&mut out), view(&self.l), Par::Seq, MemStack::new(&mut buf));
        for j in 0..n {
            for i in 0..j {
                out[(i, j)] = out[(j, i)];
            }
        }
        out
    }
}
