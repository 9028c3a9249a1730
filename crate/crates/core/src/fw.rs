//! Forster–Warmuth counterfactual regression for `δ(X)` and `Ω(X)`.
//!
//! Pseudo-outcomes are built from Step-1 nuisances, then regressed on a
//! polynomial basis with the leverage-shrunk rule
//!
//! ```text
//! m̂(x) = (1 - h(x)) φ(x)ᵀ [G + φ(x)φ(x)ᵀ]⁻¹ b,   h(x) = φ(x)ᵀ [G + φ(x)φ(x)ᵀ]⁻¹ φ(x)
//! ```
//!
//! with `G = Σ φ(Xᵢ)φ(Xᵢ)ᵀ` and `b = Σ φ(Xᵢ) f̂(Oᵢ)`. With `q = φᵀG⁻¹φ` the
//! Sherman–Morrison identity gives `h = q / (1 + q)` and
//! `m̂ = (1 - h)² φᵀG⁻¹b`, so a single cached Cholesky factor of `G` serves
//! every prediction point.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MivError, Result};
use crate::learners::{ClipPolicy, Design, PointNuisance};
use crate::linalg::cholesky_ridged;

fn default_grid() -> Vec<usize> {
    vec![0, 1, 2, 3]
}
fn default_true() -> bool {
    true
}
fn default_cv() -> usize {
    5
}

/// Total-degree polynomial basis with CV-selected degree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    #[serde(default = "default_grid")]
    pub degree_grid: Vec<usize>,
    /// Center and scale covariates with training statistics before expansion.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_cv")]
    pub cv_folds: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree_grid: default_grid(),
            standardize: true,
            cv_folds: default_cv(),
        }
    }
}

impl BasisSpec {
    pub fn fixed(degree: usize) -> Self {
        Self {
            degree_grid: vec![degree],
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.degree_grid.is_empty() {
            return Err(MivError::Config("basis degree_grid is empty".into()));
        }
        if self.degree_grid.iter().any(|&g| g > 12) {
            return Err(MivError::Config("basis degrees above 12 are not supported".into()));
        }
        if self.cv_folds < 2 {
            return Err(MivError::Config("basis cv_folds must be >= 2".into()));
        }
        Ok(())
    }
}

/// Exponent tuples of all monomials in `d` variables with total degree
/// `<= degree`, graded (degree 0 first), so lower-degree bases are prefixes.
pub fn monomial_exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d - 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for e in (0..=left).rev() {
            cur.push(e);
            rec(d, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for t in 0..=degree {
        if d == 0 {
            if t == 0 {
                out.push(Vec::new());
            }
            continue;
        }
        rec(d, t, &mut Vec::with_capacity(d), &mut out);
    }
    out
}

/// Number of basis functions `J + 1` for `d` covariates at total degree `g`.
pub fn basis_size(d: usize, degree: usize) -> usize {
    monomial_exponents(d, degree).len()
}

#[derive(Debug, Clone, PartialEq)]
struct PolyBasis {
    exponents: Vec<Vec<usize>>,
    degree: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl PolyBasis {
    fn new(design: &Design, degree: usize, standardize: bool) -> Self {
        let (n, d) = (design.rows(), design.cols());
        let mut center = vec![0.0; d];
        let mut scale = vec![1.0; d];
        if standardize && n > 0 {
            for j in 0..d {
                let m = (0..n).map(|i| design.get(i, j)).sum::<f64>() / n as f64;
                let v = (0..n).map(|i| (design.get(i, j) - m).powi(2)).sum::<f64>() / n as f64;
                center[j] = m;
                if v > 1e-24 {
                    scale[j] = v.sqrt();
                }
            }
        }
        Self {
            exponents: monomial_exponents(d, degree),
            degree,
            center,
            scale,
        }
    }

    fn len(&self) -> usize {
        self.exponents.len()
    }

    fn eval(&self, x: &[f64]) -> DVector<f64> {
        let d = x.len();
        let mut powers = vec![vec![1.0; self.degree + 1]; d];
        for j in 0..d {
            let u = (x[j] - self.center[j]) / self.scale[j];
            for k in 1..=self.degree {
                powers[j][k] = powers[j][k - 1] * u;
            }
        }
        DVector::from_iterator(
            self.len(),
            self.exponents
                .iter()
                .map(|e| e.iter().enumerate().map(|(j, &k)| powers[j][k]).product::<f64>()),
        )
    }

    fn truncated(&self, size: usize, degree: usize) -> Self {
        Self {
            exponents: self.exponents[..size].to_vec(),
            degree,
            center: self.center.clone(),
            scale: self.scale.clone(),
        }
    }
}

/// Fitted Forster–Warmuth learner.
#[derive(Debug, Clone)]
pub struct FwModel {
    basis: PolyBasis,
    gram: DMatrix<f64>,
    moment: DVector<f64>,
    n: usize,
    cap: f64,
    chol: Cholesky<f64, Dyn>,
    coef: DVector<f64>,
    ridge: f64,
    cv_losses: Vec<(usize, f64)>,
}

impl FwModel {
    fn from_accumulators(basis: PolyBasis, gram: DMatrix<f64>, moment: DVector<f64>, n: usize, cap: f64) -> Self {
        let (chol, ridge) = cholesky_ridged(gram.clone());
        let coef = chol.solve(&moment);
        Self {
            basis,
            gram,
            moment,
            n,
            cap,
            chol,
            coef,
            ridge,
            cv_losses: Vec::new(),
        }
    }

    pub fn degree(&self) -> usize {
        self.basis.degree
    }

    /// `J + 1`.
    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn n_train(&self) -> usize {
        self.n
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn moment(&self) -> &DVector<f64> {
        &self.moment
    }

    /// Ridge added to the gram diagonal (zero unless it was singular).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// CV loss per candidate degree, in grid order.
    pub fn cv_losses(&self) -> &[(usize, f64)] {
        &self.cv_losses
    }

    /// Basis vector `φ̄_J(x)` (after standardisation).
    pub fn features(&self, x: &[f64]) -> DVector<f64> {
        self.basis.eval(x)
    }

    fn leverage_parts(&self, x: &[f64]) -> (DVector<f64>, f64) {
        let phi = self.basis.eval(x);
        let v = self.chol.l().solve_lower_triangular(&phi).expect("cholesky factor is nonsingular");
        (phi, v.norm_squared())
    }

    /// Leverage `h_n(x) ∈ [0, 1]`.
    pub fn leverage(&self, x: &[f64]) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        let (_, q) = self.leverage_parts(x);
        let h = if q.is_finite() { q / (1.0 + q) } else { 1.0 };
        assert!((0.0..=1.0 + 1e-9).contains(&h), "leverage {h} outside [0, 1]");
        h
    }

    /// Unclipped shrunk prediction.
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let (phi, q) = self.leverage_parts(x);
        if !q.is_finite() {
            return 0.0;
        }
        let h = q / (1.0 + q);
        assert!((0.0..=1.0 + 1e-9).contains(&h), "leverage {h} outside [0, 1]");
        let shrink = 1.0 - h;
        shrink * shrink * phi.dot(&self.coef)
    }

    /// Prediction clipped to `[-c2, c2]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_raw(x).clamp(-self.cap, self.cap)
    }
}

/// Fit the FW learner on `(design rows, pseudo-outcomes)`, choosing the degree
/// from `basis.degree_grid` by V-fold CV on squared error (ties to the
/// smaller degree). `cap` is the output clip bound.
pub fn fw_fit(design: &Design, f: &[f64], basis: &BasisSpec, cap: f64) -> Result<FwModel> {
    assert_eq!(design.rows(), f.len());
    if f.iter().any(|v| !v.is_finite()) {
        return Err(MivError::PseudoOutcomeOverflow);
    }
    let mut grid = basis.degree_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let max_degree = *grid.last().expect("non-empty degree grid");
    let full = PolyBasis::new(design, max_degree, basis.standardize);
    let n = design.rows();
    let p = full.len();
    let phis: Vec<DVector<f64>> = (0..n).map(|i| full.eval(design.row(i))).collect();

    let v = basis.cv_folds.min(n);
    let mut fold_gram = vec![DMatrix::<f64>::zeros(p, p); v.max(1)];
    let mut fold_moment = vec![DVector::<f64>::zeros(p); v.max(1)];
    for (i, phi) in phis.iter().enumerate() {
        let k = if v > 0 { i % v } else { 0 };
        fold_gram[k].ger(1.0, phi, phi, 1.0);
        fold_moment[k].axpy(f[i], phi, 1.0);
    }
    let gram: DMatrix<f64> = fold_gram.iter().fold(DMatrix::zeros(p, p), |acc, g| acc + g);
    let moment: DVector<f64> = fold_moment.iter().fold(DVector::zeros(p), |acc, b| acc + b);
    let gram = symmetrise(gram);

    let mut chosen = grid[0];
    let mut cv_losses = Vec::new();
    if grid.len() > 1 && v >= 2 {
        let mut best = f64::INFINITY;
        for &g in &grid {
            let size = basis_size(design.cols(), g);
            let sub = full.truncated(size, g);
            let mut sse = 0.0;
            for k in 0..v {
                let gk = symmetrise((&gram - &fold_gram[k]).view((0, 0), (size, size)).into_owned());
                let bk = (&moment - &fold_moment[k]).rows(0, size).into_owned();
                let n_train = (0..n).filter(|i| i % v != k).count();
                let m = FwModel::from_accumulators(sub.clone(), gk, bk, n_train, cap);
                for i in (k..n).step_by(v) {
                    sse += (m.predict(design.row(i)) - f[i]).powi(2);
                }
            }
            let loss = sse / n as f64;
            cv_losses.push((g, loss));
            if loss < best {
                best = loss;
                chosen = g;
            }
        }
    }
    let size = basis_size(design.cols(), chosen);
    let mut model = FwModel::from_accumulators(
        full.truncated(size, chosen),
        gram.view((0, 0), (size, size)).into_owned(),
        moment.rows(0, size).into_owned(),
        n,
        cap,
    );
    model.cv_losses = cv_losses;
    Ok(model)
}

fn symmetrise(mut g: DMatrix<f64>) -> DMatrix<f64> {
    let p = g.nrows();
    for a in 0..p {
        for b in 0..a {
            let m = 0.5 * (g[(a, b)] + g[(b, a)]);
            g[(a, b)] = m;
            g[(b, a)] = m;
        }
    }
    g
}

/// `m̂_J(x)` clipped to `[-c2, c2]`.
pub fn fw_predict(model: &FwModel, x: &[f64]) -> f64 {
    model.predict(x)
}

/// Which pseudo-outcome formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoOutcomeVariant {
    /// Conditional mean given `X` equals the target function exactly when the
    /// nuisances are correct.
    #[default]
    Calibrated,
    /// Unnormalised form with the `A / pr(A=1)` weighting and `ρ(X)` factor.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoTarget {
    Delta,
    Omega,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcome {
    pub target: PseudoTarget,
    pub variant: PseudoOutcomeVariant,
    pub values: Vec<f64>,
}

/// Plug-in `(δ̃, Ω̃)` with the gap `p̂₁ - p̂₀` floored at `τ`.
pub fn plugin_delta_omega(n: &PointNuisance, clip: &ClipPolicy) -> (f64, f64) {
    let gap = clip.floor_gap(n.gap());
    ((n.e[1] - n.e[0]) / gap, 1.0 / gap)
}

/// Calibrated δ pseudo-outcome for a single observation.
pub fn pseudo_delta_row(y: f64, a: f64, z: usize, n: &PointNuisance, clip: &ClipPolicy) -> f64 {
    let (delta, omega) = plugin_delta_omega(n, clip);
    let sign = if z == 1 { 1.0 } else { -1.0 };
    delta + sign / n.pi(z) * omega * (y * (1.0 - a) - n.e[z] - (a - n.p[z]) * delta)
}

/// Calibrated Ω pseudo-outcome for a single observation.
pub fn pseudo_omega_row(a: f64, z: usize, n: &PointNuisance, clip: &ClipPolicy) -> f64 {
    let (_, omega) = plugin_delta_omega(n, clip);
    let sign = if z == 1 { 1.0 } else { -1.0 };
    omega - sign / n.pi(z) * (a - n.p[z]) * omega * omega
}

fn check_relevance(nuis: &[PointNuisance], clip: &ClipPolicy) -> Result<()> {
    if !nuis.is_empty() && nuis.iter().all(|v| v.gap().abs() < clip.tau) {
        return Err(MivError::WeakInstrument {
            repeat: None,
            fold: None,
        });
    }
    Ok(())
}

fn build(
    data: &Dataset,
    rows: &[usize],
    nuis: &[PointNuisance],
    clip: &ClipPolicy,
    variant: PseudoOutcomeVariant,
    target: PseudoTarget,
) -> Result<PseudoOutcome> {
    assert_eq!(rows.len(), nuis.len());
    check_relevance(nuis, clip)?;
    let p_a = rows.iter().map(|&i| data.a()[i]).sum::<f64>() / rows.len().max(1) as f64;
    let values: Vec<f64> = rows
        .iter()
        .zip(nuis)
        .map(|(&i, n)| {
            let (y, a, z) = (data.y()[i], data.a()[i], data.arm(i));
            match (variant, target) {
                (PseudoOutcomeVariant::Calibrated, PseudoTarget::Delta) => pseudo_delta_row(y, a, z, n, clip),
                (PseudoOutcomeVariant::Calibrated, PseudoTarget::Omega) => pseudo_omega_row(a, z, n, clip),
                (PseudoOutcomeVariant::Weighted, _) => {
                    let (delta, omega) = plugin_delta_omega(n, clip);
                    let sign = if z == 1 { 1.0 } else { -1.0 };
                    let weight = n.rho() * sign / n.pi(z);
                    let inner = match target {
                        PseudoTarget::Delta => {
                            a * delta + weight * (y * (1.0 - a) - n.e[z] - (a - n.p[z]) * delta) * omega
                        }
                        PseudoTarget::Omega => a * omega + weight * (a - n.p[z]) * omega * omega,
                    };
                    inner / p_a
                }
            }
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MivError::PseudoOutcomeOverflow);
    }
    Ok(PseudoOutcome {
        target,
        variant,
        values,
    })
}

/// Pseudo-outcomes for `δ(X)` on `rows`; `nuis[j]` are the Step-1 nuisances
/// at `rows[j]`.
pub fn pseudo_outcome_delta(
    data: &Dataset,
    rows: &[usize],
    nuis: &[PointNuisance],
    clip: &ClipPolicy,
    variant: PseudoOutcomeVariant,
) -> Result<PseudoOutcome> {
    build(data, rows, nuis, clip, variant, PseudoTarget::Delta)
}

/// Pseudo-outcomes for `Ω(X)`.
pub fn pseudo_outcome_omega(
    data: &Dataset,
    rows: &[usize],
    nuis: &[PointNuisance],
    clip: &ClipPolicy,
    variant: PseudoOutcomeVariant,
) -> Result<PseudoOutcome> {
    build(data, rows, nuis, clip, variant, PseudoTarget::Omega)
}
