//! Orthogonal projection onto the null space of the class proxies.

use crate::dataset::{ClassProxyMatrix, FeatureDataset};
use crate::error::{Error, Result};
use crate::linalg::{matmul, norm2, pseudo_inverse_with_rank, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOperator<T> {
    pi: Matrix<T>,
    source_rank: usize,
}

impl<T: Scalar> ProjectionOperator<T> {
    /// `Π = I − Zᵀ(ZZᵀ)⁺Z` for proxy rows `z` (rows are L2-normalized first).
    /// A matrix with no rows yields the identity.
    pub fn from_proxies(z: &Matrix<T>, tol: T) -> Self {
        let d = z.cols();
        if z.rows() == 0 {
            return Self {
                pi: Matrix::identity(d),
                source_rank: 0,
            };
        }
        let mut zn = z.clone();
        for i in 0..zn.rows() {
            let row = zn.row_mut(i);
            let n = norm2(row);
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let zt = zn.transpose();
        let gram = matmul(&zn, &zt).expect("K×d by d×K");
        let (gram_pinv, source_rank) = pseudo_inverse_with_rank(&gram, tol);
        let hat = matmul(&matmul(&zt, &gram_pinv).expect("d×K by K×K"), &zn).expect("d×K by K×d");
        let pi = Matrix::identity(d).sub(&hat).expect("d×d");
        Self { pi, source_rank }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.pi
    }

    pub fn dim(&self) -> usize {
        self.pi.rows()
    }

    /// Effective rank of the proxy matrix the operator was built from.
    pub fn source_rank(&self) -> usize {
        self.source_rank
    }

    /// `Πx`.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        self.pi.matvec(x)
    }

    /// Row-wise `Πx` for every row of `x`, i.e. `X Πᵀ`.
    pub fn project_rows(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "projection is {}-dimensional, features have {} columns",
                self.dim(),
                x.cols()
            )));
        }
        matmul(x, &self.pi.transpose())
    }

    /// `max` over the three operator invariants: asymmetry, non-idempotence,
    /// and how far `ZΠ` is from zero.
    pub fn invariant_errors(&self, z: &Matrix<T>) -> (T, T, T) {
        let sym = self.pi.max_abs_diff(&self.pi.transpose()).expect("square");
        let idem = matmul(&self.pi, &self.pi)
            .and_then(|pp| pp.max_abs_diff(&self.pi))
            .expect("square");
        let ann = if z.rows() == 0 {
            T::zero()
        } else {
            matmul(z, &self.pi).expect("K×d by d×d").max_abs()
        };
        (sym, idem, ann)
    }
}

pub fn build_projection(z: &ClassProxyMatrix, tol: f64) -> ProjectionOperator<f64> {
    ProjectionOperator::from_proxies(z.matrix(), tol)
}

pub fn project_features(op: &ProjectionOperator<f64>, ds: &FeatureDataset) -> Result<Matrix<f64>> {
    op.project_rows(ds.features())
}
