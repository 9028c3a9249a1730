//! Comparison estimators: single-arm Wald plug-in, substitution EIF and
//! two-stage least squares.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MivError, Result};
use crate::estimator::{estimate_suite, z_quantile, EstimateReport, EstimatorKind, RunConfig};
use crate::linalg::{cholesky_ridged, dependent_columns};
use crate::rng;

/// `ψ̂^{Wald} = mean[A/P(A) · {Y + (ê₁ − ê₀)/(p̂₁ − p̂₀)}]` with cross-fitted
/// nuisances (fit on each fold complement) and a multiplier-bootstrap
/// interval.
pub fn wald_estimate(data: &Dataset, cfg: &RunConfig) -> Result<EstimateReport> {
    Ok(estimate_suite(data, cfg, &[EstimatorKind::Wald])?.remove(0))
}

/// Cross-fitted EIF estimator with `δ̃`, `Ω̃` substituted from the nuisance
/// ratios instead of the FW learner.
pub fn eif_substitution_estimate(data: &Dataset, cfg: &RunConfig) -> Result<EstimateReport> {
    Ok(estimate_suite(data, cfg, &[EstimatorKind::Eif])?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    /// Standard deviation of the bootstrap means.
    pub se: f64,
    pub draws: usize,
}

/// Multiplier bootstrap of a sample mean with standard-exponential weights:
/// each draw is `mean + (1/n) Σ (ξᵢ − 1)(sᵢ − mean)`.
pub fn multiplier_bootstrap(summands: &[f64], draws: usize, seed: u64) -> BootstrapResult {
    let n = summands.len();
    let mean = summands.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = summands.iter().map(|s| s - mean).collect();
    let stats: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, &[b as u64]);
            let mut acc = 0.0;
            for c in &centered {
                let xi: f64 = r.sample(Exp1);
                acc += (xi - 1.0) * c;
            }
            mean + acc / n as f64
        })
        .collect();
    let m = stats.iter().sum::<f64>() / draws as f64;
    let var = stats.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (draws.max(2) - 1) as f64;
    BootstrapResult {
        mean,
        se: var.sqrt(),
        draws,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TslsResult {
    pub estimate: f64,
    /// Heteroskedasticity-robust (HC0) standard error.
    pub se: f64,
    pub ci: (f64, f64),
    pub first_stage_f: f64,
    pub coefficients: Vec<f64>,
}

fn column_names(data: &Dataset, leading: &str) -> Vec<String> {
    let mut v = vec!["intercept".to_string(), leading.to_string()];
    v.extend(data.covariate_names().iter().cloned());
    v
}

fn design(data: &Dataset, second: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let d = data.d();
    DMatrix::from_fn(data.n(), d + 2, |i, c| match c {
        0 => 1.0,
        1 => second(i),
        c => data.x(i)[c - 2],
    })
}

fn collinear(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let dep = dependent_columns(x);
    if dep.is_empty() {
        return Ok(());
    }
    let cols: Vec<&str> = dep.iter().map(|&j| names[j].as_str()).collect();
    Err(MivError::Collinear(cols.join(", ")))
}

/// Two-stage least squares of `Y` on `(1, Â, X)`, first stage `A` on
/// `(1, Z, X)`, with an HC0 sandwich interval.
pub fn tsls_estimate(data: &Dataset, alpha: f64) -> Result<TslsResult> {
    let n = data.n();
    let first = design(data, |i| data.z()[i]);
    collinear(&first, &column_names(data, "z"))?;
    let p = first.ncols();
    if n <= p {
        return Err(MivError::InvalidData(format!("{n} rows for {p} regressors")));
    }
    let a = DVector::from_column_slice(data.a());
    let (ch, _) = cholesky_ridged(first.transpose() * &first);
    let gamma = ch.solve(&(first.transpose() * &a));
    let fitted = &first * &gamma;
    let resid = &a - &fitted;
    // Classical first-stage F for the single excluded instrument.
    let s2 = resid.norm_squared() / (n - p) as f64;
    let inv = ch.inverse();
    let f_stat = gamma[1] * gamma[1] / (s2 * inv[(1, 1)]);
    if !(f_stat >= 1.0) {
        return Err(MivError::IrrelevantInstrument(if f_stat.is_finite() { f_stat } else { 0.0 }));
    }

    let second = design(data, |i| fitted[i]);
    collinear(&second, &column_names(data, "a_hat"))?;
    let (ch2, _) = cholesky_ridged(second.transpose() * &second);
    let y = DVector::from_column_slice(data.y());
    let beta = ch2.solve(&(second.transpose() * &y));
    // Structural residuals use the observed treatment.
    let structural = design(data, |i| data.a()[i]);
    let u = &y - &structural * &beta;
    let bread = ch2.inverse();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let row = second.row(i).transpose();
        meat.ger(u[i] * u[i], &row, &row, 1.0);
    }
    let cov = &bread * meat * &bread;
    let se = cov[(1, 1)].max(0.0).sqrt();
    let half = z_quantile(alpha) * se;
    Ok(TslsResult {
        estimate: beta[1],
        se,
        ci: (beta[1] - half, beta[1] + half),
        first_stage_f: f_stat,
        coefficients: beta.iter().copied().collect(),
    })
}
