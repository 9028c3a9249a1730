use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MivError, Result};
use crate::estimator::McMean;
use crate::learners::glm::expit;
use crate::rng;

/// How the latent propensity `exp{α₁(Z,X) + α₂(U,X)}` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityForm {
    /// `exp{Z(0.5 + (x₁+x₂)/2) − x₁ − x₂ − U/4}`: the two factors
    /// `exp{0.5 + (x₁+x₂)/2}` and `exp(−x₁−x₂−U/4)` multiply, the first only
    /// when `Z = 1`.
    #[default]
    LogLinear,
    /// `exp{Z·exp(0.5 + (x₁+x₂)/2) + exp(−x₁−x₂−U/4)}` with both factors
    /// exponentiated again. This exceeds one for every draw, so generation fails
    /// on the first row.
    NestedExp,
}

fn d_u_mean() -> f64 {
    4.0
}
fn d_u_sd() -> f64 {
    0.5
}
fn d_noise() -> f64 {
    0.5
}

/// Two uniform covariates, a normal confounder `U`, and a multiplicative
/// latent propensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dgp4Params {
    #[serde(default = "d_u_mean")]
    pub u_mean: f64,
    #[serde(default = "d_u_sd")]
    pub u_sd: f64,
    /// Standard deviation of the additive outcome noise.
    #[serde(default = "d_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub propensity_form: PropensityForm,
}

impl Default for Dgp4Params {
    fn default() -> Self {
        Self {
            u_mean: d_u_mean(),
            u_sd: d_u_sd(),
            noise_sd: d_noise(),
            propensity_form: PropensityForm::LogLinear,
        }
    }
}

impl Dgp4Params {
    pub fn check(&self) -> Result<()> {
        if !(self.u_sd > 0.0) || !(self.noise_sd >= 0.0) || !self.u_mean.is_finite() {
            return Err(MivError::Config("dgp4 needs u_sd > 0, noise_sd >= 0 and finite u_mean".into()));
        }
        Ok(())
    }

    pub fn instrument_probability(&self, x: &[f64]) -> f64 {
        expit(-1.0 + x[0] + x[1])
    }

    pub fn propensity(&self, z: f64, x: &[f64], u: f64) -> f64 {
        let s = x[0] + x[1];
        match self.propensity_form {
            PropensityForm::LogLinear => (z * (0.5 + s / 2.0) - s - u / 4.0).exp(),
            PropensityForm::NestedExp => (z * (0.5 + s / 2.0).exp() + (-s - u / 4.0).exp()).exp(),
        }
    }

    pub fn mean_y0(&self, x: &[f64], u: f64) -> f64 {
        (x[0] + x[1]) * (u / 6.0).exp()
    }

    pub fn mean_y1(&self, z: f64, x: &[f64], u: f64) -> f64 {
        (x[0] + x[1] + x[0] * x[1] + z) * (u / 4.0).exp()
    }
}

/// Unobserved draws kept alongside the observed data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Latent {
    pub u: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dgp4Sample {
    pub data: Dataset,
    pub latent: Latent,
}

/// Draw `n` observations. Fails with the offending draw when the propensity
/// leaves `(0, 1)`.
pub fn generate_dgp4(params: &Dgp4Params, n: usize, seed: u64) -> Result<Dgp4Sample> {
    params.check()?;
    if n == 0 {
        return Err(MivError::Config("n must be >= 1".into()));
    }
    let mut r = rng::stream(seed, &[0xD694]);
    let u_law = Normal::new(params.u_mean, params.u_sd).expect("valid normal");
    let noise = Normal::new(0.0, params.noise_sd.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut latent = Latent {
        u: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
    };
    for row in 0..n {
        let x = vec![r.random::<f64>(), r.random::<f64>()];
        let u = u_law.sample(&mut r);
        let zi = f64::from(r.random::<f64>() < params.instrument_probability(&x));
        let p = params.propensity(zi, &x, u);
        if !(p > 0.0 && p < 1.0) {
            return Err(MivError::PropensityOutOfRange {
                row,
                value: p,
                z: zi as u8,
                x,
                u,
            });
        }
        let ai = f64::from(r.random::<f64>() < p);
        let (e0, e1) = (noise.sample(&mut r), noise.sample(&mut r));
        let (e0, e1) = if params.noise_sd > 0.0 { (e0, e1) } else { (0.0, 0.0) };
        let y0 = params.mean_y0(&x, u) + e0;
        let y1 = params.mean_y1(zi, &x, u) + e1;
        y.push(if ai == 1.0 { y1 } else { y0 });
        a.push(ai);
        z.push(zi);
        xs.push(x);
        latent.u.push(u);
        latent.y0.push(y0);
        latent.y1.push(y1);
    }
    Ok(Dgp4Sample {
        data: Dataset::new(y, a, z, xs)?,
        latent,
    })
}

/// Monte-Carlo ATT: mean of `Y¹ − Y⁰` over treated draws.
pub fn oracle_att(params: &Dgp4Params, n_mc: usize, seed: u64) -> Result<McMean> {
    if n_mc < 100_000 {
        return Err(MivError::Config(format!("oracle_att needs n_mc >= 100000, got {n_mc}")));
    }
    let s = generate_dgp4(params, n_mc, seed)?;
    let diffs: Vec<f64> = (0..n_mc)
        .filter(|&i| s.data.a()[i] == 1.0)
        .map(|i| s.latent.y1[i] - s.latent.y0[i])
        .collect();
    Ok(McMean::from_values(&diffs))
}
