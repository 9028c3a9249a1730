//! Ridge-penalised generalised linear models: logistic regression by IRLS and
//! linear regression by the normal equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Design, Target};
use crate::linalg::cholesky_ridged;

/// Covariate expansion used by the GLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmBasis {
    /// Intercept only.
    Intercept,
    /// Intercept and raw covariates.
    #[default]
    Raw,
    /// Raw covariates plus all pairwise products `x_i x_j` (`i <= j`).
    Pairwise,
}

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GlmModel {
    basis: GlmBasis,
    target: Target,
    center: Vec<f64>,
    scale: Vec<f64>,
    coef: Vec<f64>,
}

fn expand(basis: GlmBasis, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    match basis {
        GlmBasis::Intercept => {}
        GlmBasis::Raw => out.extend_from_slice(x),
        GlmBasis::Pairwise => {
            out.extend_from_slice(x);
            for i in 0..x.len() {
                for j in i..x.len() {
                    out.push(x[i] * x[j]);
                }
            }
        }
    }
}

pub(crate) fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GlmModel {
    pub fn fit(design: &Design, y: &[f64], target: Target, basis: GlmBasis, lambda: f64) -> Self {
        let n = design.rows();
        let mut buf = Vec::new();
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                expand(basis, design.row(i), &mut buf);
                buf.clone()
            })
            .collect();
        let p = raw.first().map_or(0, Vec::len);
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for j in 0..p {
            let m = raw.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let v = raw.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            center[j] = m;
            scale[j] = if v > 1e-24 { v.sqrt() } else { 1.0 };
        }
        let x = DMatrix::from_fn(n, p + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (raw[i][j - 1] - center[j - 1]) / scale[j - 1]
            }
        });
        let penalty = lambda * n as f64;
        let coef = match target {
            Target::Continuous => Self::fit_linear(&x, y, penalty),
            Target::Probability => Self::fit_logistic(&x, y, penalty),
        };
        Self {
            basis,
            target,
            center,
            scale,
            coef,
        }
    }

    fn penalised(mut xtwx: DMatrix<f64>, penalty: f64) -> DMatrix<f64> {
        for j in 1..xtwx.nrows() {
            xtwx[(j, j)] += penalty;
        }
        xtwx
    }

    fn fit_linear(x: &DMatrix<f64>, y: &[f64], penalty: f64) -> Vec<f64> {
        let yv = DVector::from_column_slice(y);
        let (ch, _) = cholesky_ridged(Self::penalised(x.transpose() * x, penalty));
        ch.solve(&(x.transpose() * yv)).iter().copied().collect()
    }

    fn fit_logistic(x: &DMatrix<f64>, y: &[f64], penalty: f64) -> Vec<f64> {
        let (n, p) = x.shape();
        let mean = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
        let mut beta = DVector::zeros(p);
        beta[0] = logit(mean);
        for _ in 0..MAX_ITER {
            let eta = x * &beta;
            let mut xtwx = DMatrix::zeros(p, p);
            let mut xtwz = DVector::zeros(p);
            for i in 0..n {
                let mu = expit(eta[i]);
                let w = (mu * (1.0 - mu)).max(1e-10);
                let zi = eta[i] + (y[i] - mu) / w;
                let row = x.row(i);
                for a in 0..p {
                    let wa = w * row[a];
                    xtwz[a] += wa * zi;
                    for b in a..p {
                        xtwx[(a, b)] += wa * row[b];
                    }
                }
            }
            for a in 0..p {
                for b in 0..a {
                    xtwx[(a, b)] = xtwx[(b, a)];
                }
            }
            let (ch, _) = cholesky_ridged(Self::penalised(xtwx, penalty));
            let next = ch.solve(&xtwz);
            let change = (&next - &beta).amax();
            beta = next;
            if !change.is_finite() || change < TOL {
                break;
            }
        }
        beta.iter().copied().collect()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    /// Coefficients mapped back to the unstandardised covariate scale
    /// (intercept first).
    pub fn raw_coefficients(&self) -> Vec<f64> {
        let mut out = vec![self.coef[0]];
        for j in 0..self.center.len() {
            let b = self.coef[j + 1] / self.scale[j];
            out[0] -= b * self.center[j];
            out.push(b);
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.center.len());
        expand(self.basis, x, &mut buf);
        let eta = self.coef[0]
            + buf
                .iter()
                .enumerate()
                .map(|(j, v)| self.coef[j + 1] * (v - self.center[j]) / self.scale[j])
                .sum::<f64>();
        match self.target {
            Target::Continuous => eta,
            Target::Probability => expit(eta),
        }
    }
}
