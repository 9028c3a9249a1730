//! Cross-fitted influence-function estimator of the ATT.
//!
//! One repeat of [`cross_fit`] does, for every evaluation fold `I_k`:
//!
//! 1. fit the nuisances `p̂_z, π̂_z, ê_z` on each half `c1`, `c2` of the fold
//!    complement;
//! 2. build pseudo-outcomes on the opposite half and fit `δ̂`, `Ω̂` with the
//!    FW learner, then average the two swapped fits pointwise;
//! 3. average the per-row contributions `γ̂(O)` over `I_k`.
//!
//! The fold estimates are averaged, and `repeats` independent fold plans are
//! combined by median adjustment. The comparison estimators in
//! [`crate::baselines`] share the same fold plans and seeds so that a single
//! call to [`estimate_suite`] can produce paired estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::baselines::{multiplier_bootstrap, tsls_estimate};
use crate::data::{make_fold_plan, make_stratified_fold_plan, validate, Dataset, FoldPlan, Observation};
use crate::error::{MivError, Result};
use crate::fw::{fw_fit, plugin_delta_omega, pseudo_outcome_delta, pseudo_outcome_omega, BasisSpec, FwModel, PseudoOutcomeVariant};
use crate::learners::{ClipCounts, ClipPolicy, Design, NuisanceFit, NuisanceLearners, PointNuisance};
use crate::linalg::{dependent_columns, ols};
use crate::rng;

fn default_k() -> usize {
    3
}
fn default_repeats() -> usize {
    7
}
fn default_alpha() -> f64 {
    0.05
}
fn default_draws() -> usize {
    1000
}

/// Settings shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Independent fold plans combined by median adjustment.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Stratify folds and halves by the `(A, Z)` cells.
    #[serde(default)]
    pub stratified: bool,
    #[serde(default)]
    pub learners: NuisanceLearners,
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default)]
    pub clip: ClipPolicy,
    #[serde(default)]
    pub pseudo_outcome: PseudoOutcomeVariant,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier-bootstrap draws for the Wald interval.
    #[serde(default = "default_draws")]
    pub bootstrap_draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            repeats: default_repeats(),
            alpha: default_alpha(),
            stratified: false,
            learners: NuisanceLearners::default(),
            basis: BasisSpec::default(),
            clip: ClipPolicy::default(),
            pseudo_outcome: PseudoOutcomeVariant::default(),
            seed: 0,
            bootstrap_draws: default_draws(),
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if self.k < 2 {
            return Err(MivError::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.repeats < 1 {
            return Err(MivError::Config("repeats must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(MivError::Config(format!("alpha must be in (0, 0.5), got {}", self.alpha)));
        }
        if self.bootstrap_draws < 2 {
            return Err(MivError::Config("bootstrap_draws must be >= 2".into()));
        }
        self.learners.check()?;
        self.basis.check()?;
        self.clip.check()
    }
}

pub(crate) fn z_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// Estimators that can be run on a shared set of fold plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Cross-fitted EIF estimator with FW-learned `δ̂`, `Ω̂`.
    EifFw,
    /// Same evaluation with the plug-in ratios `δ̃`, `Ω̃`.
    Eif,
    /// Single-arm Wald plug-in with a multiplier-bootstrap interval.
    Wald,
    /// Linear two-stage least squares.
    Tsls,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [Self::EifFw, Self::Eif, Self::Wald, Self::Tsls];

    pub fn name(self) -> &'static str {
        match self {
            Self::EifFw => "eif_fw",
            Self::Eif => "eif",
            Self::Wald => "wald",
            Self::Tsls => "tsls",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-row quantities entering `γ̂(O)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EifTerms {
    pub delta: f64,
    pub omega: f64,
    pub rho: f64,
    pub p_z: f64,
    pub pi_z: f64,
    pub e_z: f64,
    pub gamma: f64,
}

/// Surfaces at one covariate point needed to evaluate the EIF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EifInputs {
    pub nuisance: PointNuisance,
    pub delta: f64,
    pub omega: f64,
}

impl EifInputs {
    /// Plug-in `δ̃`, `Ω̃` computed from the nuisances themselves.
    pub fn plugin(nuisance: PointNuisance, clip: &ClipPolicy) -> Self {
        let (delta, omega) = plugin_delta_omega(&nuisance, clip);
        Self { nuisance, delta, omega }
    }
}

/// `θ(O) = ρ (2Z−1)/π_Z Ω [Y(1−A) − e_Z − (A − p_Z) δ]`.
pub fn theta(y: f64, a: f64, z: usize, s: &EifInputs) -> f64 {
    let n = &s.nuisance;
    let sign = if z == 1 { 1.0 } else { -1.0 };
    n.rho() * sign / n.pi(z) * s.omega * (y * (1.0 - a) - n.e[z] - (a - n.p[z]) * s.delta)
}

/// `(1/p_a1)[A(Y + δ − ψ) + θ(O)]` for raw row values.
pub fn eif_value(y: f64, a: f64, z: usize, s: &EifInputs, psi: f64, p_a1: f64) -> f64 {
    (a * (y + s.delta - psi) + theta(y, a, z, s)) / p_a1
}

/// Efficient influence function at one observation.
pub fn eif_evaluate(row: &Observation, s: &EifInputs, psi: f64, p_a1: f64) -> f64 {
    eif_value(row.y, row.a, usize::from(row.z >= 0.5), s, psi, p_a1)
}

fn eif_terms(y: f64, a: f64, z: usize, s: &EifInputs, p_a1: f64) -> EifTerms {
    let n = &s.nuisance;
    EifTerms {
        delta: s.delta,
        omega: s.omega,
        rho: n.rho(),
        p_z: n.p[z],
        pi_z: n.pi(z),
        e_z: n.e[z],
        gamma: eif_value(y, a, z, s, 0.0, p_a1),
    }
}

/// `σ̂² = (1/K) Σ_k mean_{I_k} (γ̂ − ψ̂)²` and the normal interval
/// `ψ̂ ± z σ̂ / √n`. `gamma` is grouped by fold. The cross-fit callers pass
/// values whose deviation from `ψ̂` is the influence value
/// `(A(Y + δ̂ − ψ̂) + θ̂) / P̂(A)`, not the `ψ = 0` summand itself.
pub fn variance_and_ci(gamma: &[Vec<f64>], psi_hat: f64, alpha: f64, n: usize) -> Result<(f64, (f64, f64))> {
    if n < 2 {
        return Err(MivError::InvalidData(format!("variance needs n >= 2, got {n}")));
    }
    let groups: Vec<&Vec<f64>> = gamma.iter().filter(|g| !g.is_empty()).collect();
    if groups.is_empty() {
        return Err(MivError::InvalidData("no influence values".into()));
    }
    let sigma2 = groups
        .iter()
        .map(|g| g.iter().map(|v| (v - psi_hat).powi(2)).sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / groups.len() as f64;
    Ok((sigma2, normal_ci(psi_hat, sigma2, alpha, n)))
}

pub(crate) fn normal_ci(psi: f64, sigma2: f64, alpha: f64, n: usize) -> (f64, f64) {
    let half = z_quantile(alpha) * (sigma2 / n as f64).sqrt();
    (psi - half, psi + half)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median adjustment over repeated splits:
/// `ψ_med = median ψ_s`, `σ²_med = median {σ²_s + (ψ_s − ψ_med)²}`.
pub fn median_adjust(estimates: &[f64], variances: &[f64]) -> (f64, f64) {
    assert!(!estimates.is_empty() && estimates.len() == variances.len());
    let psi = median(estimates);
    let spread: Vec<f64> = estimates
        .iter()
        .zip(variances)
        .map(|(e, v)| v + (e - psi).powi(2))
        .collect();
    (psi, median(&spread))
}

/// One repeat (fold plan) of an estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatEstimate {
    pub psi: f64,
    pub sigma2: f64,
    pub per_fold: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Share of evaluation rows whose `|p̂₁ − p̂₀|` was floored at `τ`.
    pub weak_instrument_share: f64,
    /// Share of evaluation rows where a probability bound was active.
    pub probability_clip_rate: f64,
    /// Share of evaluation rows where the outcome-surface cap was active.
    pub outcome_clip_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mivhr_p_value: Option<f64>,
    /// Selected FW degrees `[δ, Ω]` per (repeat, fold, half).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fw_degrees: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Row of the comparison table: estimator, point estimate and interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub estimator: String,
    pub estimate: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub n: usize,
    pub psi_hat: f64,
    pub sigma2_hat: f64,
    /// `σ̂ / √n`.
    pub se: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub repeats: Vec<RepeatEstimate>,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<BaselineRow>,
}

impl EstimateReport {
    fn assemble(kind: EstimatorKind, n: usize, alpha: f64, repeats: Vec<RepeatEstimate>, diagnostics: Diagnostics) -> Self {
        let psis: Vec<f64> = repeats.iter().map(|r| r.psi).collect();
        let vars: Vec<f64> = repeats.iter().map(|r| r.sigma2).collect();
        let (psi_hat, sigma2_hat) = median_adjust(&psis, &vars);
        let sigma2_hat = sigma2_hat.max(0.0);
        Self {
            estimator: kind.name().to_string(),
            n,
            psi_hat,
            sigma2_hat,
            se: (sigma2_hat / n as f64).sqrt(),
            ci: normal_ci(psi_hat, sigma2_hat, alpha, n),
            alpha,
            repeats,
            diagnostics,
            baselines: Vec::new(),
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }

    pub fn baseline_row(&self) -> BaselineRow {
        BaselineRow {
            estimator: self.estimator.clone(),
            estimate: self.psi_hat,
            ci: self.ci,
        }
    }
}

/// Surfaces supplied directly instead of being learned (used for oracle
/// checks).
pub trait SurfaceProvider: Sync {
    fn nuisance(&self, x: &[f64]) -> PointNuisance;
    fn delta(&self, x: &[f64]) -> f64;
    fn omega(&self, x: &[f64]) -> f64;
}

/// Evaluate an estimator with known surfaces on the whole sample, no folds.
/// Only [`EstimatorKind::EifFw`] (true `δ`, `Ω`) and [`EstimatorKind::Wald`]
/// (plug-in functional) are meaningful here.
pub fn oracle_estimate(data: &Dataset, surfaces: &dyn SurfaceProvider, kind: EstimatorKind, alpha: f64) -> Result<EstimateReport> {
    let p_a = data.mean_a();
    if !(p_a > 0.0 && p_a < 1.0) {
        return Err(MivError::InvalidData("treatment has no variation".into()));
    }
    let gamma: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let x = data.x(i);
            let s = EifInputs {
                nuisance: surfaces.nuisance(x),
                delta: surfaces.delta(x),
                omega: surfaces.omega(x),
            };
            let (y, a) = (data.y()[i], data.a()[i]);
            match kind {
                EstimatorKind::Wald => a * (y + s.delta) / p_a,
                _ => eif_value(y, a, data.arm(i), &s, 0.0, p_a),
            }
        })
        .collect();
    let psi = gamma.iter().sum::<f64>() / gamma.len() as f64;
    let groups = influence_shift(&[gamma], &[data.a().to_vec()], psi, p_a);
    let (sigma2, _) = variance_and_ci(&groups, psi, alpha, data.n())?;
    let rep = RepeatEstimate {
        psi,
        sigma2,
        per_fold: vec![psi],
    };
    Ok(EstimateReport::assemble(kind, data.n(), alpha, vec![rep], Diagnostics::default()))
}

struct HalfFits {
    nuis: [NuisanceFit; 2],
    delta: [FwModel; 2],
    omega: [FwModel; 2],
    /// Plug-in envelopes `[delta, omega]` per side; FW predictions are clamped into them.
    bounds: [[(f64, f64); 2]; 2],
}

impl HalfFits {
    fn side(&self, h: usize, x: &[f64]) -> (f64, f64) {
        let [bd, bo] = self.bounds[h];
        (
            self.delta[h].predict(x).clamp(bd.0, bd.1),
            self.omega[h].predict(x).clamp(bo.0, bo.1),
        )
    }

    fn inputs(&self, x: &[f64]) -> (EifInputs, ClipCounts) {
        let (a, ca) = self.nuis[0].at_flagged(x);
        let (b, cb) = self.nuis[1].at_flagged(x);
        let mut counts = ca;
        counts.merge(&cb);
        let (d0, o0) = self.side(0, x);
        let (d1, o1) = self.side(1, x);
        let inputs = EifInputs {
            nuisance: a.average(&b),
            delta: 0.5 * (d0 + d1),
            omega: 0.5 * (o0 + o1),
        };
        (inputs, counts)
    }
}

#[derive(Default)]
struct FoldOutcome {
    /// Per estimator kind, summands over `I_k` in row order.
    summands: Vec<(EstimatorKind, Vec<f64>)>,
    clip: ClipCounts,
    weak: usize,
    degrees: Vec<[usize; 2]>,
}

fn fit_halves(data: &Dataset, rows: [&[usize]; 2], cfg: &RunConfig, clip: &ClipPolicy, seed: u64) -> Result<HalfFits> {
    let nuis = [
        NuisanceFit::fit(data, rows[0], &cfg.learners, clip, rng::derive_seed(seed, &[0]))?,
        NuisanceFit::fit(data, rows[1], &cfg.learners, clip, rng::derive_seed(seed, &[1]))?,
    ];
    let fit_side = |h: usize| -> Result<(FwModel, FwModel, [(f64, f64); 2])> {
        let train = rows[1 - h];
        let points: Vec<PointNuisance> = train.iter().map(|&i| nuis[h].at(data.x(i))).collect();
        let mut env = [(f64::INFINITY, f64::NEG_INFINITY); 2];
        for pt in &points {
            let (d, o) = plugin_delta_omega(pt, clip);
            env[0] = (env[0].0.min(d), env[0].1.max(d));
            env[1] = (env[1].0.min(o), env[1].1.max(o));
        }
        let design = Design::from_dataset(data, train);
        let cap = clip.cap();
        let bound = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|f| f.clamp(-cap, cap)).collect() };
        let fd = bound(pseudo_outcome_delta(data, train, &points, clip, cfg.pseudo_outcome)?.values);
        let fo = bound(pseudo_outcome_omega(data, train, &points, clip, cfg.pseudo_outcome)?.values);
        Ok((
            fw_fit(&design, &fd, &cfg.basis, cap)?,
            fw_fit(&design, &fo, &cfg.basis, cap)?,
            env,
        ))
    };
    let (d0, o0, b0) = fit_side(0)?;
    let (d1, o1, b1) = fit_side(1)?;
    Ok(HalfFits {
        nuis,
        delta: [d0, d1],
        omega: [o0, o1],
        bounds: [b0, b1],
    })
}

fn run_fold(
    data: &Dataset,
    plan: &FoldPlan,
    k: usize,
    kinds: &[EstimatorKind],
    cfg: &RunConfig,
    clip: &ClipPolicy,
    p_a: f64,
    seed: u64,
) -> Result<FoldOutcome> {
    let eval = plan.fold(k);
    let (c1, c2) = &plan.nested_halves[k];
    let mut out = FoldOutcome::default();

    if kinds.contains(&EstimatorKind::EifFw) {
        let fits = fit_halves(data, [c1, c2], cfg, clip, rng::derive_seed(seed, &[0]))?;
        out.degrees = vec![
            [fits.delta[0].degree(), fits.omega[0].degree()],
            [fits.delta[1].degree(), fits.omega[1].degree()],
        ];
        let mut gamma = Vec::with_capacity(eval.len());
        for &i in &eval {
            let (s, counts) = fits.inputs(data.x(i));
            out.clip.merge(&counts);
            if s.nuisance.gap().abs() < clip.tau {
                out.weak += 1;
            }
            gamma.push(eif_terms(data.y()[i], data.a()[i], data.arm(i), &s, p_a).gamma);
        }
        out.summands.push((EstimatorKind::EifFw, gamma));
    }

    let merged_kinds: Vec<EstimatorKind> = kinds
        .iter()
        .copied()
        .filter(|k| matches!(k, EstimatorKind::Eif | EstimatorKind::Wald))
        .collect();
    if !merged_kinds.is_empty() {
        let complement: Vec<usize> = {
            let mut v: Vec<usize> = c1.iter().chain(c2.iter()).copied().collect();
            v.sort_unstable();
            v
        };
        let fit = NuisanceFit::fit(data, &complement, &cfg.learners, clip, rng::derive_seed(seed, &[1]))?;
        let mut eif = Vec::with_capacity(eval.len());
        let mut wald = Vec::with_capacity(eval.len());
        let mut counts = ClipCounts::default();
        let mut weak = 0;
        for &i in &eval {
            let (pn, c) = fit.at_flagged(data.x(i));
            counts.merge(&c);
            if pn.gap().abs() < clip.tau {
                weak += 1;
            }
            let s = EifInputs::plugin(pn, clip);
            let (y, a) = (data.y()[i], data.a()[i]);
            eif.push(eif_value(y, a, data.arm(i), &s, 0.0, p_a));
            wald.push(a * (y + s.delta) / p_a);
        }
        if out.summands.is_empty() {
            out.clip = counts;
            out.weak = weak;
        }
        for kind in merged_kinds {
            let v = if kind == EstimatorKind::Eif { eif.clone() } else { wald.clone() };
            out.summands.push((kind, v));
        }
    }
    Ok(out)
}

/// Fold plan for repeat `r`.
pub fn repeat_plan(data: &Dataset, cfg: &RunConfig, r: usize) -> Result<FoldPlan> {
    let seed = rng::derive_seed(cfg.seed, &[r as u64]);
    if cfg.stratified {
        make_stratified_fold_plan(data, cfg.k, seed)
    } else {
        make_fold_plan(data.n(), cfg.k, seed)
    }
}

fn check_data(data: &Dataset) -> Result<()> {
    let issues = validate(data);
    if issues.is_empty() {
        Ok(())
    } else {
        let msg: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
        Err(MivError::InvalidData(msg.join("; ")))
    }
}

/// Run several estimators on shared fold plans. Reports come back in the
/// order of `kinds`.
pub fn estimate_suite(data: &Dataset, cfg: &RunConfig, kinds: &[EstimatorKind]) -> Result<Vec<EstimateReport>> {
    cfg.check()?;
    check_data(data)?;
    let n = data.n();
    let clip = cfg.clip.resolve(data);
    let p_a = data.mean_a();
    let fold_kinds: Vec<EstimatorKind> = kinds.iter().copied().filter(|k| *k != EstimatorKind::Tsls).collect();

    let mut per_kind: Vec<Vec<RepeatEstimate>> = vec![Vec::new(); fold_kinds.len()];
    let mut counts = ClipCounts::default();
    let mut weak = 0usize;
    let mut degrees = Vec::new();
    if !fold_kinds.is_empty() {
        let repeats: Vec<Result<(Vec<FoldOutcome>, FoldPlan)>> = (0..cfg.repeats)
            .into_par_iter()
            .map(|r| {
                let plan = repeat_plan(data, cfg, r)?;
                let folds: Result<Vec<FoldOutcome>> = (0..cfg.k)
                    .into_par_iter()
                    .map(|k| {
                        let seed = rng::derive_seed(cfg.seed, &[r as u64, k as u64 + 1]);
                        run_fold(data, &plan, k, &fold_kinds, cfg, &clip, p_a, seed).map_err(|e| e.at_fold(r, k))
                    })
                    .collect();
                Ok((folds?, plan))
            })
            .collect();
        for (r, res) in repeats.into_iter().enumerate() {
            let (folds, plan) = res?;
            let treated: Vec<Vec<f64>> = (0..cfg.k).map(|k| plan.fold(k).iter().map(|&i| data.a()[i]).collect()).collect();
            for f in &folds {
                counts.merge(&f.clip);
                weak += f.weak;
                degrees.extend_from_slice(&f.degrees);
            }
            for (j, kind) in fold_kinds.iter().enumerate() {
                let groups: Vec<Vec<f64>> = folds
                    .iter()
                    .map(|f| f.summands.iter().find(|(k, _)| k == kind).map(|(_, v)| v.clone()).unwrap_or_default())
                    .collect();
                per_kind[j].push(summarise_repeat(*kind, &groups, &treated, p_a, cfg, r)?);
            }
        }
    }

    let evaluations = counts.evaluations.max(1) as f64;
    let rows_seen = (n * cfg.repeats).max(1) as f64;
    let diagnostics = Diagnostics {
        weak_instrument_share: weak as f64 / rows_seen,
        probability_clip_rate: counts.probability as f64 / evaluations,
        outcome_clip_rate: counts.outcome as f64 / evaluations,
        mivhr_p_value: mivhr_diagnostic(data).ok().map(|m| m.p_value),
        fw_degrees: degrees,
        notes: Vec::new(),
    };

    let mut reports = Vec::with_capacity(kinds.len());
    for kind in kinds {
        if *kind == EstimatorKind::Tsls {
            let t = tsls_estimate(data, cfg.alpha)?;
            let rep = RepeatEstimate {
                psi: t.estimate,
                sigma2: t.se * t.se * n as f64,
                per_fold: Vec::new(),
            };
            let mut report = EstimateReport::assemble(*kind, n, cfg.alpha, vec![rep], Diagnostics::default());
            report.ci = t.ci;
            reports.push(report);
            continue;
        }
        let j = fold_kinds.iter().position(|k| k == kind).expect("fold estimator");
        let mut diag = diagnostics.clone();
        if *kind != EstimatorKind::EifFw {
            diag.fw_degrees.clear();
        }
        reports.push(EstimateReport::assemble(*kind, n, cfg.alpha, per_kind[j].clone(), diag));
    }
    Ok(reports)
}

/// Shift the ψ-free summands `γ̂` so that their deviations from `ψ̂` are the
/// influence values `γ̂ − ψ̂·A/P̂(A)`.
fn influence_shift(groups: &[Vec<f64>], treated: &[Vec<f64>], psi: f64, p_a: f64) -> Vec<Vec<f64>> {
    groups
        .iter()
        .zip(treated)
        .map(|(g, a)| g.iter().zip(a).map(|(g, a)| g - psi * a / p_a + psi).collect())
        .collect()
}

fn summarise_repeat(
    kind: EstimatorKind,
    groups: &[Vec<f64>],
    treated: &[Vec<f64>],
    p_a: f64,
    cfg: &RunConfig,
    r: usize,
) -> Result<RepeatEstimate> {
    let n = groups.iter().map(Vec::len).sum();
    let per_fold: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let psi = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
    let shifted = influence_shift(groups, treated, psi, p_a);
    let groups = &shifted;
    let sigma2 = match kind {
        EstimatorKind::Wald => {
            let summands: Vec<f64> = groups.iter().flatten().copied().collect();
            let seed = rng::derive_seed(cfg.seed, &[r as u64, 0xB007]);
            let boot = multiplier_bootstrap(&summands, cfg.bootstrap_draws, seed);
            boot.se * boot.se * n as f64
        }
        _ => variance_and_ci(groups, psi, cfg.alpha, n)?.0,
    };
    Ok(RepeatEstimate { psi, sigma2, per_fold })
}

/// `ψ̂^{EIF-FW}` with median adjustment over `cfg.repeats` fold plans.
pub fn cross_fit(data: &Dataset, cfg: &RunConfig) -> Result<EstimateReport> {
    Ok(estimate_suite(data, cfg, &[EstimatorKind::EifFw])?.remove(0))
}

/// Result of the linear conditional-independence check among the treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MivhrResult {
    pub p_value: f64,
    pub statistic: f64,
    pub z_coefficient: f64,
    pub n_treated: usize,
    /// A small ridge was needed to solve the normal equations.
    pub ridge_added: bool,
}

/// Among `A = 1`, regress `Y` on `(1, X, Z)` by least squares and test the `Z`
/// coefficient with a two-sided t-test. A linear-in-`X` approximation of the
/// conditional independence `Y ⊥ Z | A = 1, X`.
pub fn mivhr_diagnostic(data: &Dataset) -> Result<MivhrResult> {
    let treated: Vec<usize> = (0..data.n()).filter(|&i| data.a()[i] >= 0.5).collect();
    for z in 0..2u8 {
        if !treated.iter().any(|&i| data.arm(i) == z as usize) {
            return Err(MivError::DegenerateFold {
                repeat: None,
                fold: None,
                detail: format!("no treated rows with Z = {z}"),
            });
        }
    }
    let d = data.d();
    let p = d + 2;
    let m = treated.len();
    if m <= p {
        return Err(MivError::InvalidData(format!("{m} treated rows for {p} regressors")));
    }
    let x = nalgebra::DMatrix::from_fn(m, p, |r, c| {
        let i = treated[r];
        match c {
            0 => 1.0,
            c if c <= d => data.x(i)[c - 1],
            _ => data.z()[i],
        }
    });
    let y: Vec<f64> = treated.iter().map(|&i| data.y()[i]).collect();
    let fit = ols(&x, &y);
    let df = (m - p) as f64;
    let s2 = fit.residuals.iter().map(|r| r * r).sum::<f64>() / df;
    let se = (s2 * fit.xtx_inv[(p - 1, p - 1)]).sqrt();
    let coef = fit.coef[p - 1];
    let t = coef / se;
    let p_value = if t.is_finite() {
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * (1.0 - dist.cdf(t.abs()))
    } else if coef == 0.0 {
        1.0
    } else {
        0.0
    };
    let ridge_added = fit.ridge > 0.0 || !dependent_columns(&x).is_empty();
    Ok(MivhrResult {
        p_value,
        statistic: t,
        z_coefficient: coef,
        n_treated: m,
        ridge_added,
    })
}

/// Misspecification pattern for [`robustness_moment_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecification {
    /// Everything at the truth.
    None,
    /// `p₀`, `e₀`, `δ` true; `π_z`, `p₁` distorted.
    M1,
    /// `p_z`, `π_z` true; `e₀`, `δ` distorted.
    M2,
    /// `δ`, `π_z` true; `e₀`, `p₀`, `p₁` distorted.
    M3,
    /// Every nuisance distorted.
    All,
}

/// Variation-independent nuisance coordinates: `e₁` is implied by
/// `e₁ = e₀ + δ (p₁ − p₀)` and `Ω`, `ρ` by the probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReparamNuisance {
    pub p: [f64; 2],
    pub pi1: f64,
    pub e0: f64,
    pub delta: f64,
}

impl ReparamNuisance {
    pub fn inputs(&self, clip: &ClipPolicy) -> EifInputs {
        let gap = clip.floor_gap(self.p[1] - self.p[0]);
        EifInputs {
            nuisance: PointNuisance {
                p: self.p,
                pi1: self.pi1,
                e: [self.e0, self.e0 + self.delta * gap],
            },
            delta: self.delta,
            omega: 1.0 / gap,
        }
    }

    /// Apply the distortion pattern: probabilities scaled by 1.3 and
    /// re-clipped into `[c1, 1 − c1]`, regression surfaces shifted by 0.3.
    pub fn distort(&self, pattern: Misspecification, c1: f64) -> Self {
        let prob = |v: f64| (1.3 * v).clamp(c1, 1.0 - c1);
        let shift = |v: f64| v + 0.3;
        let mut out = *self;
        let (p0, p1, pi, e0, delta) = match pattern {
            Misspecification::None => (false, false, false, false, false),
            Misspecification::M1 => (false, true, true, false, false),
            Misspecification::M2 => (false, false, false, true, true),
            Misspecification::M3 => (true, true, false, true, false),
            Misspecification::All => (true, true, true, true, true),
        };
        if p0 {
            out.p[0] = prob(out.p[0]);
        }
        if p1 {
            out.p[1] = prob(out.p[1]);
        }
        if pi {
            out.pi1 = prob(out.pi1);
        }
        if e0 {
            out.e0 = shift(out.e0);
        }
        if delta {
            out.delta = shift(out.delta);
        }
        out
    }
}

/// Monte-Carlo mean of a sample of values and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMean {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McMean {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }

    /// `|mean − target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.se
    }
}

/// Draw `n_mc` observations from the simulation DGP and average the EIF
/// evaluated at the true `ψ` with the nuisances distorted per `pattern`.
pub fn robustness_moment_check(pattern: Misspecification, n_mc: usize, seed: u64) -> Result<McMean> {
    use crate::simulation::{generate_dgp4, Dgp4Params, OracleSurfaces};
    let params = Dgp4Params::default();
    let oracle = OracleSurfaces::new(&params)?;
    let sample = generate_dgp4(&params, n_mc, seed)?;
    let data = &sample.data;
    let clip = ClipPolicy {
        c2: Some(f64::INFINITY),
        ..ClipPolicy::default()
    };
    let psi = oracle.att();
    let p_a = oracle.p_treated();
    let values: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let x = data.x(i);
            let truth = oracle.reparam(x);
            let s = truth.distort(pattern, clip.c1).inputs(&clip);
            eif_value(data.y()[i], data.a()[i], data.arm(i), &s, psi, p_a)
        })
        .collect();
    Ok(McMean::from_values(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{GlmBasis, LearnerSpec};
    use crate::simulation::{generate_dgp4, Dgp4Params};
    use proptest::prelude::*;
    use rand::Rng;

    fn point(p0: f64, p1: f64, pi1: f64, e0: f64, e1: f64) -> PointNuisance {
        PointNuisance {
            p: [p0, p1],
            pi1,
            e: [e0, e1],
        }
    }

    #[test]
    fn eif_hand_example() {
        let s = EifInputs {
            nuisance: point(0.4, 0.6, 0.5, 0.0, 0.8),
            delta: 2.0,
            omega: 5.0,
        };
        assert!((s.nuisance.rho() - 0.5).abs() < 1e-15);
        let obs = Observation {
            y: 1.0,
            a: 0.0,
            z: 1.0,
            x: vec![0.0],
        };
        assert!((eif_evaluate(&obs, &s, 3.0, 0.5) - 14.0).abs() < 1e-12);
    }

    #[test]
    fn eif_exact_cancellation() {
        // A = 1, Z = 1: bracket = -e1 - (1 - p1) δ; make it zero.
        let delta = -2.0;
        let p1 = 0.6;
        let s = EifInputs {
            nuisance: point(0.3, p1, 0.4, 0.1, -(1.0 - p1) * delta),
            delta,
            omega: 3.0,
        };
        let y = 5.0;
        let obs = Observation {
            y,
            a: 1.0,
            z: 1.0,
            x: vec![],
        };
        assert!(eif_evaluate(&obs, &s, y + delta, 0.3).abs() < 1e-12);
    }

    #[test]
    fn variance_examples() {
        let (s2, ci) = variance_and_ci(&[vec![2.0; 4]], 2.0, 0.05, 4).unwrap();
        assert_eq!(s2, 0.0);
        assert_eq!(ci, (2.0, 2.0));
        let (s2, ci) = variance_and_ci(&[vec![1.0, 3.0], vec![3.0, 1.0]], 2.0, 0.05, 4).unwrap();
        assert!((s2 - 1.0).abs() < 1e-15);
        assert!((ci.1 - 2.0 - 1.959963984540054 / 2.0).abs() < 1e-9);
        assert!(variance_and_ci(&[vec![1.0]], 1.0, 0.05, 1).is_err());
    }

    #[test]
    fn median_adjust_examples() {
        assert_eq!(median_adjust(&[1.5], &[0.3]), (1.5, 0.3));
        assert_eq!(median_adjust(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), (2.0, 2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn reparameterization_identity(
            e0 in -5.0..5.0f64, e1 in -5.0..5.0f64, p0 in 0.01..0.99f64, p1 in 0.01..0.99f64,
            y in -10.0..10.0f64, a in 0usize..2, z in 0usize..2,
        ) {
            prop_assume!((p1 - p0).abs() > 1e-3);
            let delta = (e1 - e0) / (p1 - p0);
            let (e, p) = ([e0, e1], [p0, p1]);
            let a = a as f64;
            let lhs = y * (1.0 - a) - e[z] - (a - p[z]) * delta;
            let rhs = y * (1.0 - a) - e0 - (a - p0) * delta;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs()) + delta.abs()));
        }
    }

    #[test]
    fn robustness_patterns() {
        for pattern in [Misspecification::None, Misspecification::M1, Misspecification::M2, Misspecification::M3] {
            let m = robustness_moment_check(pattern, 200_000, 5).unwrap();
            assert!(m.z_score(0.0) < 3.0, "{pattern:?}: {m:?}");
        }
        let control = robustness_moment_check(Misspecification::All, 200_000, 5).unwrap();
        assert!(control.z_score(0.0) > 3.0, "{control:?}");
    }

    #[test]
    fn zero_untreated_outcome_gives_treated_mean() {
        // Y(1-A) ≡ 0 makes ê ≡ 0 so δ̃ ≡ 0 and θ ≡ 0.
        let mut r = rng::stream(3, &[]);
        let n = 240;
        let mut y = Vec::new();
        let mut a = Vec::new();
        let mut z = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let zi = f64::from(r.random::<bool>());
            let ai = f64::from(r.random::<f64>() < 0.3 + 0.4 * zi);
            y.push(if ai == 1.0 { 1.0 + r.random::<f64>() } else { 0.0 });
            a.push(ai);
            z.push(zi);
            x.push(vec![r.random::<f64>()]);
        }
        let data = Dataset::new(y.clone(), a.clone(), z, x).unwrap();
        let treated_mean = y.iter().zip(&a).filter(|(_, a)| **a == 1.0).map(|(y, _)| y).sum::<f64>()
            / a.iter().sum::<f64>();
        let cfg = RunConfig {
            repeats: 1,
            learners: NuisanceLearners::uniform(LearnerSpec::glm()),
            ..RunConfig::default()
        };
        let reports = estimate_suite(&data, &cfg, &[EstimatorKind::Eif, EstimatorKind::Wald]).unwrap();
        for rep in &reports {
            assert!((rep.psi_hat - treated_mean).abs() < 1e-9, "{} {}", rep.estimator, rep.psi_hat);
            assert!(rep.ci.0 <= rep.psi_hat && rep.psi_hat <= rep.ci.1);
        }
    }

    fn small_config() -> RunConfig {
        RunConfig {
            repeats: 2,
            learners: NuisanceLearners::uniform(LearnerSpec::Glm {
                lambda: 1e-4,
                basis: GlmBasis::Raw,
            }),
            seed: 17,
            ..RunConfig::default()
        }
    }

    #[test]
    fn cross_fit_runs_and_is_deterministic() {
        let data = generate_dgp4(&Dgp4Params::default(), 600, 4).unwrap().data;
        let cfg = small_config();
        let a = cross_fit(&data, &cfg).unwrap();
        let b = cross_fit(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.repeats.len(), 2);
        assert_eq!(a.repeats[0].per_fold.len(), 3);
        assert!(a.ci.0 <= a.psi_hat && a.psi_hat <= a.ci.1);
        assert!(a.sigma2_hat >= 0.0);
        assert!(a.psi_hat.is_finite());
        assert_eq!(a.diagnostics.fw_degrees.len(), 2 * 3 * 2);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data = generate_dgp4(&Dgp4Params::default(), 400, 8).unwrap().data;
        let cfg = small_config();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| estimate_suite(&data, &cfg, &[EstimatorKind::EifFw, EstimatorKind::Wald]).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn eif_minus_wald_is_mean_theta() {
        let data = generate_dgp4(&Dgp4Params::default(), 500, 9).unwrap().data;
        let cfg = RunConfig {
            repeats: 1,
            ..small_config()
        };
        let r = estimate_suite(&data, &cfg, &[EstimatorKind::Eif, EstimatorKind::Wald]).unwrap();
        // Per fold the difference is mean θ̂ / P(A); recompute θ̂ from the
        // same merged fits.
        let plan = repeat_plan(&data, &cfg, 0).unwrap();
        let clip = cfg.clip.resolve(&data);
        let p_a = data.mean_a();
        let mut diffs = Vec::new();
        for k in 0..cfg.k {
            let (c1, c2) = &plan.nested_halves[k];
            let mut comp: Vec<usize> = c1.iter().chain(c2).copied().collect();
            comp.sort_unstable();
            let seed = rng::derive_seed(rng::derive_seed(cfg.seed, &[0, k as u64 + 1]), &[1]);
            let fit = NuisanceFit::fit(&data, &comp, &cfg.learners, &clip, seed).unwrap();
            let rows = plan.fold(k);
            let t: f64 = rows
                .iter()
                .map(|&i| theta(data.y()[i], data.a()[i], data.arm(i), &EifInputs::plugin(fit.at(data.x(i)), &clip)))
                .sum::<f64>()
                / rows.len() as f64;
            diffs.push(t / p_a);
        }
        let expected = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!((r[0].psi_hat - r[1].psi_hat - expected).abs() < 1e-10);
    }

    #[test]
    fn weak_instrument_is_reported_with_fold() {
        let mut r = rng::stream(12, &[]);
        let n = 300;
        let z: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
        let a: Vec<f64> = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random::<f64>()]).collect();
        let data = Dataset::new(y, a, z, x).unwrap();
        let cfg = RunConfig {
            repeats: 1,
            learners: NuisanceLearners::uniform(LearnerSpec::Glm {
                lambda: 1e-4,
                basis: GlmBasis::Intercept,
            }),
            clip: ClipPolicy {
                tau: 0.2,
                ..ClipPolicy::default()
            },
            ..RunConfig::default()
        };
        let err = cross_fit(&data, &cfg).unwrap_err();
        assert!(matches!(err, MivError::WeakInstrument { fold: Some(_), .. }), "{err}");
    }

    #[test]
    fn mivhr_size_and_power_smoke() {
        let mut r = rng::stream(13, &[]);
        let n = 2000;
        let gen = |r: &mut rng::StreamRng, shift: f64| {
            let mut y = Vec::new();
            let mut a = Vec::new();
            let mut z = Vec::new();
            let mut x = Vec::new();
            for _ in 0..n {
                let x1: f64 = r.random();
                let zi = f64::from(r.random::<f64>() < 0.5);
                let ai = f64::from(r.random::<f64>() < 0.3 + 0.3 * zi);
                let noise: f64 = r.sample(rand_distr::StandardNormal);
                y.push(1.0 + 2.0 * x1 + shift * zi + noise);
                a.push(ai);
                z.push(zi);
                x.push(vec![x1]);
            }
            Dataset::new(y, a, z, x).unwrap()
        };
        let alt = mivhr_diagnostic(&gen(&mut r, 1.0)).unwrap();
        assert!(alt.p_value < 0.01);
        let null = mivhr_diagnostic(&gen(&mut r, 0.0)).unwrap();
        assert!(null.p_value > 0.0 && null.p_value <= 1.0);
        assert!(!null.ridge_added);
    }

    #[test]
    fn mivhr_requires_treated_in_both_arms() {
        let data = Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![1.0, 1.0, 0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0, 0.0, 1.0],
            vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4], vec![0.5]],
        )
        .unwrap();
        assert!(mivhr_diagnostic(&data).is_err());
    }

    #[test]
    fn config_round_trip_and_rejection() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"folds": 3}"#).is_err());
        let s = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), RunConfig::default());
        let bad = RunConfig {
            k: 1,
            ..RunConfig::default()
        };
        assert!(bad.check().is_err());
    }
}
