use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MivError, Result};
use crate::learners::glm::{expit, logit};
use crate::rng;

/// Treatment-selection mechanism `A^z = 1{h(z, U) ≥ ε_z}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlimVariant {
    /// `h = g(z)·U`, `ε_z ~ Uniform(0,1)` independent.
    Multiplicative,
    /// `h = g(z) + U`, `ε_z ~ Uniform(0,1)` independent.
    Additive,
    /// `h = g(z) + U` with `U ~ Uniform(0,1)` and `ε_z ≡ 1`.
    Monotone,
    /// `h = g(z) + U`, `ε_z ~ Logistic(0,1)` independent. Data generation only.
    Logistic,
}

/// Generalized latent index model. Covariates are two uniforms and outcomes
/// follow the same equations as the log-linear DGP with this model's `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlimParams {
    pub variant: GlimVariant,
    /// `[g(0), g(1)]`.
    pub g: [f64; 2],
    /// `U ~ Uniform(u_range[0], u_range[1])`; the monotone variant requires
    /// `[0, 1]`.
    pub u_range: [f64; 2],
    /// `pr(Z = 1)`; `None` uses `expit(−1 + x₁ + x₂)`.
    #[serde(default)]
    pub z_prob: Option<f64>,
    #[serde(default = "GlimParams::default_noise")]
    pub noise_sd: f64,
}

impl Default for GlimParams {
    fn default() -> Self {
        Self::multiplicative()
    }
}

impl GlimParams {
    fn default_noise() -> f64 {
        0.5
    }

    pub fn multiplicative() -> Self {
        Self {
            variant: GlimVariant::Multiplicative,
            g: [0.5, 1.0],
            u_range: [0.25, 1.0],
            z_prob: None,
            noise_sd: 0.5,
        }
    }

    pub fn additive() -> Self {
        Self {
            variant: GlimVariant::Additive,
            g: [0.0, 0.3],
            u_range: [0.05, 0.65],
            ..Self::multiplicative()
        }
    }

    pub fn monotone() -> Self {
        Self {
            variant: GlimVariant::Monotone,
            g: [0.3, 0.6],
            u_range: [0.0, 1.0],
            ..Self::multiplicative()
        }
    }

    pub fn logistic() -> Self {
        Self {
            variant: GlimVariant::Logistic,
            g: [-1.0, 0.5],
            u_range: [-1.0, 1.0],
            ..Self::multiplicative()
        }
    }

    pub fn check(&self) -> Result<()> {
        let [lo, hi] = self.u_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(MivError::Config(format!("u_range must be increasing, got {:?}", self.u_range)));
        }
        if self.variant == GlimVariant::Monotone {
            if self.u_range != [0.0, 1.0] {
                return Err(MivError::Config("monotone GLIM requires u_range [0, 1]".into()));
            }
            if self.g.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(MivError::Config("monotone GLIM requires g(z) in [0, 1]".into()));
            }
        }
        if let Some(p) = self.z_prob {
            if !(p > 0.0 && p < 1.0) {
                return Err(MivError::Config(format!("z_prob must be in (0, 1), got {p}")));
            }
        }
        if !(self.noise_sd >= 0.0) {
            return Err(MivError::Config("noise_sd must be >= 0".into()));
        }
        Ok(())
    }

    pub fn index(&self, z: usize, u: f64) -> f64 {
        match self.variant {
            GlimVariant::Multiplicative => self.g[z] * u,
            _ => self.g[z] + u,
        }
    }

    /// `pr(A^z = 1 | U = u)`.
    pub fn uptake(&self, z: usize, u: f64) -> f64 {
        let h = self.index(z, u);
        match self.variant {
            GlimVariant::Multiplicative | GlimVariant::Additive => h.clamp(0.0, 1.0),
            GlimVariant::Monotone => f64::from(h >= 1.0),
            GlimVariant::Logistic => expit(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlimLatent {
    pub u: Vec<f64>,
    /// Potential treatments `A⁰`, `A¹`.
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlimSample {
    pub data: Dataset,
    pub latent: GlimLatent,
}

/// Draw `n` rows. For the multiplicative and additive variants every index
/// `h(z, U)` must lie in `(0, 1)`; the first violation is reported.
pub fn generate_glim(params: &GlimParams, n: usize, seed: u64) -> Result<GlimSample> {
    params.check()?;
    if n == 0 {
        return Err(MivError::Config("n must be >= 1".into()));
    }
    let mut r = rng::stream(seed, &[0x611D]);
    let noise = Normal::new(0.0, params.noise_sd.max(f64::MIN_POSITIVE)).expect("valid normal");
    let [lo, hi] = params.u_range;
    let mut out = GlimLatent::default();
    let (mut y, mut a, mut z, mut xs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for row in 0..n {
        let x = vec![r.random::<f64>(), r.random::<f64>()];
        let u = lo + (hi - lo) * r.random::<f64>();
        let pz = params.z_prob.unwrap_or_else(|| expit(-1.0 + x[0] + x[1]));
        let zi = usize::from(r.random::<f64>() < pz);
        let mut pot = [0.0; 2];
        for (arm, slot) in pot.iter_mut().enumerate() {
            let h = params.index(arm, u);
            let eps = match params.variant {
                GlimVariant::Multiplicative | GlimVariant::Additive => {
                    if !(h > 0.0 && h < 1.0) {
                        return Err(MivError::IndexOutOfRange {
                            row,
                            value: h,
                            z: arm as u8,
                            u,
                        });
                    }
                    r.random::<f64>()
                }
                GlimVariant::Monotone => 1.0,
                GlimVariant::Logistic => logit(r.random::<f64>().clamp(1e-300, 1.0 - 1e-16)),
            };
            *slot = f64::from(h >= eps);
        }
        let (n0, n1): (f64, f64) = (noise.sample(&mut r), noise.sample(&mut r));
        let (n0, n1) = if params.noise_sd > 0.0 { (n0, n1) } else { (0.0, 0.0) };
        let s = x[0] + x[1];
        let y0 = s * (u / 6.0).exp() + n0;
        let y1 = (s + x[0] * x[1] + zi as f64) * (u / 4.0).exp() + n1;
        let ai = pot[zi];
        y.push(if ai == 1.0 { y1 } else { y0 });
        a.push(ai);
        z.push(zi as f64);
        xs.push(x);
        out.u.push(u);
        out.a0.push(pot[0]);
        out.a1.push(pot[1]);
        out.y0.push(y0);
        out.y1.push(y1);
    }
    Ok(GlimSample {
        data: Dataset::new(y, a, z, xs)?,
        latent: out,
    })
}
