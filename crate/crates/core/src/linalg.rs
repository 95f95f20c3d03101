//! Thin SVD through faer. nalgebra's SVD can return wrong factors for inputs
//! that are exactly rank deficient, which low-rank fits produce routinely.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) struct ThinSvd {
    pub u: DMatrix<f64>,
    /// Nonincreasing.
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub(crate) fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    let (n, t) = m.shape();
    let k = n.min(t);
    if k == 0 {
        return Ok(ThinSvd { u: DMatrix::zeros(n, 0), s: DVector::zeros(0), v_t: DMatrix::zeros(0, t) });
    }
    let a = faer::Mat::<f64>::from_fn(n, t, |i, j| m[(i, j)]);
    let svd = a.thin_svd().map_err(|_| Error::Convergence { iterations: 0, gap: f64::NAN, tol: 0.0 })?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    Ok(ThinSvd {
        u: DMatrix::from_fn(n, k, |i, j| u[(i, j)]),
        s: DVector::from_fn(k, |j, _| s[j]),
        v_t: DMatrix::from_fn(k, t, |j, c| v[(c, j)]),
    })
}
