use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Cholesky factor of a symmetric PSD matrix. When the plain factorisation
/// fails, a ridge of `1e-10 * trace / p` is added to the diagonal (with an
/// absolute floor so an all-zero matrix still factors).
pub(crate) fn cholesky_ridged(mut g: DMatrix<f64>) -> (Cholesky<f64, Dyn>, f64) {
    if let Some(ch) = Cholesky::new(g.clone()) {
        if ch.l().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
            return (ch, 0.0);
        }
    }
    let p = g.nrows().max(1) as f64;
    let base = (g.trace() / p).abs();
    let mut ridge = if base > 0.0 { 1e-10 * base } else { 1e-10 };
    loop {
        for i in 0..g.nrows() {
            g[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(g.clone()) {
            return (ch, ridge);
        }
        ridge *= 10.0;
    }
}

/// Ordinary least squares on a row-major design.
pub(crate) struct OlsFit {
    pub coef: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub ridge: f64,
}

#[cfg(test)]
pub(crate) fn design_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

pub(crate) fn ols(x: &DMatrix<f64>, y: &[f64]) -> OlsFit {
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * x;
    let xty = x.transpose() * &yv;
    let (ch, ridge) = cholesky_ridged(xtx);
    let coef = ch.solve(&xty);
    let xtx_inv = ch.inverse();
    let fitted = x * &coef;
    let residuals = yv.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    OlsFit {
        coef,
        xtx_inv,
        residuals,
        ridge,
    }
}

/// Columns of `x` (in order) whose component orthogonal to all earlier columns
/// is negligible relative to the column's own norm.
pub(crate) fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for q in &basis {
            let c = q.dot(&r);
            r -= q * c;
        }
        // second pass for numerical orthogonality
        for q in &basis {
            let c = q.dot(&r);
            r -= q * c;
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-9 * norm {
            out.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    out
}
