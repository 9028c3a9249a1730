use crate::error::{MivError, Result};
use crate::estimator::{ReparamNuisance, SurfaceProvider};
use crate::learners::PointNuisance;
use crate::quadrature::{gauss_legendre, normal_rule};

use super::dgp::{Dgp4Params, PropensityForm};

const HERMITE_NODES: usize = 64;
const LEGENDRE_NODES: usize = 64;

/// True nuisance surfaces of the log-linear DGP, integrated over `U` by
/// Gauss–Hermite quadrature.
///
/// With `c_z(x) = exp{z(0.5 + s/2) − s}` and `s = x₁ + x₂`:
/// `p_z = c_z E[e^{−U/4}]`, `e_z = s (E[e^{U/6}] − c_z E[e^{−U/12}])` and
/// `δ = −s E[e^{−U/12}] / E[e^{−U/4}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSurfaces {
    params: Dgp4Params,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    m_neg_quarter: f64,
    m_sixth: f64,
    m_neg_twelfth: f64,
    att: f64,
    p_treated: f64,
    treated_delta: f64,
}

impl OracleSurfaces {
    pub fn new(params: &Dgp4Params) -> Result<Self> {
        params.check()?;
        if params.propensity_form != PropensityForm::LogLinear {
            return Err(MivError::Config("oracle surfaces exist only for the log-linear propensity".into()));
        }
        let (nodes, weights) = normal_rule(HERMITE_NODES, params.u_mean, params.u_sd);
        let mgf = |t: f64| nodes.iter().zip(&weights).map(|(u, w)| w * (t * u).exp()).sum::<f64>();
        let mut o = Self {
            params: *params,
            m_neg_quarter: mgf(-0.25),
            m_sixth: mgf(1.0 / 6.0),
            m_neg_twelfth: mgf(-1.0 / 12.0),
            nodes,
            weights,
            att: 0.0,
            p_treated: 0.0,
            treated_delta: 0.0,
        };
        o.integrate_truth();
        Ok(o)
    }

    fn c(&self, z: usize, x: &[f64]) -> f64 {
        let s = x[0] + x[1];
        (z as f64 * (0.5 + s / 2.0) - s).exp()
    }

    /// `E[A(Y¹ − Y⁰)]`, `E[A]` and `E[ρδ]` by Gauss–Legendre over the unit
    /// square. `U` integrals are exact in closed form through the moments.
    fn integrate_truth(&mut self) {
        let (g, w) = gauss_legendre(LEGENDRE_NODES, 0.0, 1.0);
        let (mut ay1, mut ay0, mut pa, mut rd) = (0.0, 0.0, 0.0, 0.0);
        for (x1, w1) in g.iter().zip(&w) {
            for (x2, w2) in g.iter().zip(&w) {
                let x = [*x1, *x2];
                let s = x1 + x2;
                let wt = w1 * w2;
                let pi1 = self.params.instrument_probability(&x);
                for z in 0..2 {
                    let pz = if z == 1 { pi1 } else { 1.0 - pi1 };
                    let c = self.c(z, &x);
                    // E[e^{-U/4} e^{U/4}] = 1
                    ay1 += wt * pz * c * (s + x1 * x2 + z as f64);
                    ay0 += wt * pz * c * s * self.m_neg_twelfth;
                    pa += wt * pz * c * self.m_neg_quarter;
                }
                rd += wt * self.rho(&x) * self.delta(&x);
            }
        }
        self.p_treated = pa;
        self.att = (ay1 - ay0) / pa;
        self.treated_delta = rd / pa;
    }

    /// True ATT `E[Y¹ − Y⁰ | A = 1]`.
    pub fn att(&self) -> f64 {
        self.att
    }

    /// `pr(A = 1)`.
    pub fn p_treated(&self) -> f64 {
        self.p_treated
    }

    /// `E[δ(X) | A = 1]`, which identifies `−E[Y⁰ | A = 1]`.
    pub fn treated_mean_delta(&self) -> f64 {
        self.treated_delta
    }

    pub fn p(&self, z: usize, x: &[f64]) -> f64 {
        self.c(z, x) * self.m_neg_quarter
    }

    pub fn pi1(&self, x: &[f64]) -> f64 {
        self.params.instrument_probability(x)
    }

    pub fn e(&self, z: usize, x: &[f64]) -> f64 {
        (x[0] + x[1]) * (self.m_sixth - self.c(z, x) * self.m_neg_twelfth)
    }

    pub fn delta(&self, x: &[f64]) -> f64 {
        -(x[0] + x[1]) * self.m_neg_twelfth / self.m_neg_quarter
    }

    pub fn omega(&self, x: &[f64]) -> f64 {
        1.0 / (self.p(1, x) - self.p(0, x))
    }

    pub fn rho(&self, x: &[f64]) -> f64 {
        let pi1 = self.pi1(x);
        self.p(1, x) * pi1 + self.p(0, x) * (1.0 - pi1)
    }

    pub fn at(&self, x: &[f64]) -> PointNuisance {
        PointNuisance {
            p: [self.p(0, x), self.p(1, x)],
            pi1: self.pi1(x),
            e: [self.e(0, x), self.e(1, x)],
        }
    }

    pub fn reparam(&self, x: &[f64]) -> ReparamNuisance {
        ReparamNuisance {
            p: [self.p(0, x), self.p(1, x)],
            pi1: self.pi1(x),
            e0: self.e(0, x),
            delta: self.delta(x),
        }
    }

    /// `E[Y(1−A) | Z=z, X=x]` by direct node-wise quadrature (no moment
    /// shortcut), for cross-checks.
    pub fn e_by_nodes(&self, z: usize, x: &[f64]) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(u, w)| {
                let p = self.params.propensity(z as f64, x, *u);
                w * self.params.mean_y0(x, *u) * (1.0 - p)
            })
            .sum()
    }
}

impl SurfaceProvider for OracleSurfaces {
    fn nuisance(&self, x: &[f64]) -> PointNuisance {
        self.at(x)
    }

    fn delta(&self, x: &[f64]) -> f64 {
        OracleSurfaces::delta(self, x)
    }

    fn omega(&self, x: &[f64]) -> f64 {
        OracleSurfaces::omega(self, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn truth_values() {
        let o = OracleSurfaces::new(&Dgp4Params::default()).unwrap();
        assert!((o.att() - 3.164).abs() < 0.002, "{}", o.att());
        assert!(o.p_treated() > 0.2 && o.p_treated() < 0.35);
    }

    #[test]
    fn closed_form_moments() {
        let p = Dgp4Params::default();
        let o = OracleSurfaces::new(&p).unwrap();
        let mgf = |t: f64| (t * p.u_mean + 0.5 * t * t * p.u_sd * p.u_sd).exp();
        assert!((o.m_neg_quarter - mgf(-0.25)).abs() < 1e-12);
        assert!((o.m_sixth - mgf(1.0 / 6.0)).abs() < 1e-12);
        for x in [[0.1, 0.2], [0.9, 0.7], [0.5, 0.5]] {
            for z in 0..2 {
                assert!((o.e(z, &x) - o.e_by_nodes(z, &x)).abs() < 1e-10);
            }
            let n = o.at(&x);
            assert!(((n.e[1] - n.e[0]) / (n.p[1] - n.p[0]) - o.delta(&x)).abs() < 1e-10);
        }
    }

    #[test]
    fn quadrature_matches_conditional_monte_carlo() {
        let p = Dgp4Params::default();
        let o = OracleSurfaces::new(&p).unwrap();
        let u_law = Normal::new(p.u_mean, p.u_sd).unwrap();
        let mut r = rng::stream(77, &[]);
        let n = 1_000_000;
        let us: Vec<f64> = (0..n).map(|_| u_law.sample(&mut r)).collect();
        for k in 0..10 {
            let x = [0.05 + 0.1 * k as f64, 0.95 - 0.09 * k as f64];
            for z in 0..2 {
                let (mut pz, mut ez) = (0.0, 0.0);
                for &u in &us {
                    let pr = p.propensity(z as f64, &x, u);
                    pz += pr;
                    ez += p.mean_y0(&x, u) * (1.0 - pr);
                }
                let (pz, ez) = (pz / n as f64, ez / n as f64);
                assert!((pz - o.p(z, &x)).abs() < 1e-3, "p{z} at {x:?}: {pz} vs {}", o.p(z, &x));
                assert!((ez - o.e(z, &x)).abs() < 1e-3, "e{z} at {x:?}: {ez} vs {}", o.e(z, &x));
            }
        }
    }

    #[test]
    fn nested_exp_form_has_no_oracle() {
        let p = Dgp4Params {
            propensity_form: PropensityForm::NestedExp,
            ..Dgp4Params::default()
        };
        assert!(OracleSurfaces::new(&p).is_err());
    }
}
