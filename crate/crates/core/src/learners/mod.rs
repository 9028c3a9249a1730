//! First-stage nuisance learners for `p_z(X) = pr(A=1 | Z=z, X)`,
//! `π_z(X) = f(Z=z | X)` and `e_z(X) = E{Y(1-A) | Z=z, X}`.

pub mod boost;
pub mod glm;
pub mod stack;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MivError, Result};
use crate::rng;

pub use boost::{BoostModel, BoostParams};
pub use glm::{GlmBasis, GlmModel};
pub use stack::stack_weights;

/// Whether a learner predicts a probability or an unbounded mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Probability,
    Continuous,
}

/// Dense row-major feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Design {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "design shape mismatch");
        Self { rows, cols, values }
    }

    pub fn from_dataset(data: &Dataset, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * data.d());
        for &i in idx {
            values.extend_from_slice(data.x(i));
        }
        Self::new(idx.len(), data.d(), values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    fn select(&self, idx: &[usize]) -> Design {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Design::new(idx.len(), self.cols, values)
    }
}

fn default_lambda() -> f64 {
    1e-4
}
fn default_rounds() -> usize {
    200
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_depth() -> usize {
    1
}
fn default_min_leaf() -> usize {
    5
}
fn default_cv_folds() -> usize {
    5
}

/// Learner configuration, read from the `learners` block of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerSpec {
    /// Logistic (probability targets) or linear ridge regression. The ridge
    /// penalty is `lambda * n` on the standardised non-intercept coefficients.
    Glm {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        basis: GlmBasis,
    },
    BoostedStumps {
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default = "default_learning_rate")]
        learning_rate: f64,
        #[serde(default = "default_depth")]
        max_depth: usize,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
    },
    Stack {
        candidates: Vec<LearnerSpec>,
        #[serde(default = "default_cv_folds")]
        cv_folds: usize,
    },
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::Stack {
            candidates: vec![
                LearnerSpec::Glm {
                    lambda: default_lambda(),
                    basis: GlmBasis::Pairwise,
                },
                LearnerSpec::boosted_stumps(),
            ],
            cv_folds: default_cv_folds(),
        }
    }
}

impl LearnerSpec {
    pub fn glm() -> Self {
        LearnerSpec::Glm {
            lambda: default_lambda(),
            basis: GlmBasis::Raw,
        }
    }

    pub fn boosted_stumps() -> Self {
        LearnerSpec::BoostedStumps {
            rounds: default_rounds(),
            learning_rate: default_learning_rate(),
            max_depth: default_depth(),
            min_leaf: default_min_leaf(),
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            LearnerSpec::Glm { lambda, .. } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    return Err(MivError::Config(format!("glm lambda must be >= 0, got {lambda}")));
                }
            }
            LearnerSpec::BoostedStumps {
                rounds,
                learning_rate,
                max_depth,
                ..
            } => {
                if !(1..=2).contains(max_depth) {
                    return Err(MivError::Config(format!(
                        "boosting max_depth must be 1 or 2, got {max_depth}"
                    )));
                }
                if *rounds == 0 || !(*learning_rate > 0.0 && *learning_rate <= 1.0) {
                    return Err(MivError::Config(
                        "boosting needs rounds >= 1 and learning_rate in (0, 1]".into(),
                    ));
                }
            }
            LearnerSpec::Stack { candidates, cv_folds } => {
                if candidates.is_empty() {
                    return Err(MivError::Config("stacking candidate list is empty".into()));
                }
                if *cv_folds < 2 {
                    return Err(MivError::Config("stacking cv_folds must be >= 2".into()));
                }
                for c in candidates {
                    c.check()?;
                }
            }
        }
        Ok(())
    }
}

/// A fitted learner. Predictions are unclipped; see [`Surface`].
#[derive(Debug, Clone, PartialEq)]
pub enum FittedLearner {
    Constant(f64),
    Glm(GlmModel),
    Boost(BoostModel),
    Stack {
        weights: Vec<f64>,
        members: Vec<FittedLearner>,
    },
}

impl FittedLearner {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            FittedLearner::Constant(c) => *c,
            FittedLearner::Glm(m) => m.predict(x),
            FittedLearner::Boost(m) => m.predict(x),
            FittedLearner::Stack { weights, members } => weights
                .iter()
                .zip(members)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, m)| w * m.predict(x))
                .sum(),
        }
    }
}

/// Fit `spec` to `(design, y)`. Single-valued targets short-circuit to a
/// constant. `seed` drives the stacking folds only.
pub fn fit_learner(
    spec: &LearnerSpec,
    design: &Design,
    y: &[f64],
    target: Target,
    seed: u64,
) -> FittedLearner {
    let n = y.len();
    if n == 0 {
        return FittedLearner::Constant(0.0);
    }
    if y.iter().all(|v| *v == y[0]) {
        return FittedLearner::Constant(y[0]);
    }
    match spec {
        LearnerSpec::Glm { lambda, basis } => {
            FittedLearner::Glm(GlmModel::fit(design, y, target, *basis, *lambda))
        }
        LearnerSpec::BoostedStumps {
            rounds,
            learning_rate,
            max_depth,
            min_leaf,
        } => FittedLearner::Boost(BoostModel::fit(
            design,
            y,
            target,
            &BoostParams {
                rounds: *rounds,
                learning_rate: *learning_rate,
                max_depth: *max_depth,
                min_leaf: *min_leaf,
            },
        )),
        LearnerSpec::Stack { candidates, cv_folds } => {
            let members: Vec<FittedLearner> = candidates
                .iter()
                .enumerate()
                .map(|(j, c)| fit_learner(c, design, y, target, rng::derive_seed(seed, &[j as u64])))
                .collect();
            if candidates.len() == 1 || n < 2 * cv_folds {
                let mut weights = vec![0.0; candidates.len()];
                weights[0] = 1.0;
                return FittedLearner::Stack { weights, members };
            }
            let cv = cross_validated_predictions(candidates, design, y, target, *cv_folds, seed);
            let weights = stack_weights(&cv, y);
            FittedLearner::Stack { weights, members }
        }
    }
}

/// Out-of-fold predictions of each candidate under a seeded `v`-fold split.
pub fn cross_validated_predictions(
    candidates: &[LearnerSpec],
    design: &Design,
    y: &[f64],
    target: Target,
    v: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let n = y.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[0x57AC]));
    let mut fold = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % v;
    }
    let mut out = vec![vec![0.0; n]; candidates.len()];
    for f in 0..v {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let d_train = design.select(&train);
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        for (j, c) in candidates.iter().enumerate() {
            let m = fit_learner(c, &d_train, &y_train, target, rng::derive_seed(seed, &[f as u64, j as u64]));
            for &i in &test {
                out[j][i] = m.predict(design.row(i));
            }
        }
    }
    out
}

/// Bounds applied to estimated nuisance surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipPolicy {
    /// Probability floor: probabilities live in `[c1, 1 - c1]`.
    #[serde(default = "ClipPolicy::default_c1")]
    pub c1: f64,
    /// Magnitude cap for regression-type surfaces; `None` means ten times the
    /// largest `|Y|` in the data.
    #[serde(default)]
    pub c2: Option<f64>,
    /// Floor for `|p̂₁ - p̂₀|`.
    #[serde(default = "ClipPolicy::default_tau")]
    pub tau: f64,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        Self {
            c1: Self::default_c1(),
            c2: None,
            tau: Self::default_tau(),
        }
    }
}

impl ClipPolicy {
    fn default_c1() -> f64 {
        0.01
    }

    fn default_tau() -> f64 {
        0.01
    }

    pub fn check(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1 < 0.5) {
            return Err(MivError::Config(format!("c1 must be in (0, 0.5), got {}", self.c1)));
        }
        if let Some(c2) = self.c2 {
            if !(c2 > 0.0) {
                return Err(MivError::Config(format!("c2 must be > 0, got {c2}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(MivError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// Fill in the data-dependent default for `c2`.
    pub fn resolve(&self, data: &Dataset) -> ClipPolicy {
        let c2 = self.c2.unwrap_or_else(|| {
            let m = 10.0 * data.max_abs_y();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        });
        ClipPolicy { c2: Some(c2), ..*self }
    }

    pub fn cap(&self) -> f64 {
        self.c2.unwrap_or(f64::INFINITY)
    }

    /// Floor `p̂₁ - p̂₀` away from zero, keeping its sign (zero maps to `+τ`).
    pub fn floor_gap(&self, gap: f64) -> f64 {
        if gap.abs() >= self.tau {
            gap
        } else if gap < 0.0 {
            -self.tau
        } else {
            self.tau
        }
    }
}

/// A fitted learner with output bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    model: FittedLearner,
    lo: f64,
    hi: f64,
}

impl Surface {
    pub fn new(model: FittedLearner, lo: f64, hi: f64) -> Self {
        Self { model, lo, hi }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.model.predict(x).clamp(self.lo, self.hi)
    }

    /// Value and whether the bound was active.
    pub fn eval_flagged(&self, x: &[f64]) -> (f64, bool) {
        let raw = self.model.predict(x);
        let v = raw.clamp(self.lo, self.hi);
        (v, v != raw)
    }

    pub fn model(&self) -> &FittedLearner {
        &self.model
    }
}

/// Learner choice per nuisance block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NuisanceLearners {
    #[serde(default)]
    pub propensity: LearnerSpec,
    #[serde(default)]
    pub instrument: LearnerSpec,
    #[serde(default)]
    pub outcome: LearnerSpec,
}

impl NuisanceLearners {
    pub fn uniform(spec: LearnerSpec) -> Self {
        Self {
            propensity: spec.clone(),
            instrument: spec.clone(),
            outcome: spec,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.propensity.check()?;
        self.instrument.check()?;
        self.outcome.check()
    }
}

fn arm_rows(data: &Dataset, rows: &[usize], z: usize) -> Vec<usize> {
    rows.iter().copied().filter(|&i| data.arm(i) == z).collect()
}

/// `(p̂₀, p̂₁)`: treatment regressed on `X` within each instrument arm.
pub fn fit_propensity(
    data: &Dataset,
    rows: &[usize],
    spec: &LearnerSpec,
    clip: &ClipPolicy,
    seed: u64,
) -> Result<[Surface; 2]> {
    let fit = |z: usize| -> Result<Surface> {
        let idx = arm_rows(data, rows, z);
        if idx.is_empty() {
            return Err(MivError::InstrumentArmAbsent { z: z as u8 });
        }
        let y: Vec<f64> = idx.iter().map(|&i| data.a()[i]).collect();
        let m = fit_learner(
            spec,
            &Design::from_dataset(data, &idx),
            &y,
            Target::Probability,
            rng::derive_seed(seed, &[z as u64]),
        );
        Ok(Surface::new(m, clip.c1, 1.0 - clip.c1))
    };
    Ok([fit(0)?, fit(1)?])
}

/// `π̂₁` fitted on all rows; `π̂₀ = 1 - π̂₁` is implied.
pub fn fit_instrument_density(
    data: &Dataset,
    rows: &[usize],
    spec: &LearnerSpec,
    clip: &ClipPolicy,
    seed: u64,
) -> Result<Surface> {
    for z in 0..2 {
        if arm_rows(data, rows, z).is_empty() {
            return Err(MivError::InstrumentArmAbsent { z: z as u8 });
        }
    }
    let y: Vec<f64> = rows.iter().map(|&i| data.z()[i]).collect();
    let m = fit_learner(spec, &Design::from_dataset(data, rows), &y, Target::Probability, seed);
    Ok(Surface::new(m, clip.c1, 1.0 - clip.c1))
}

/// `(ê₀, ê₁)`: `Y(1-A)` regressed on `X` within each instrument arm.
pub fn fit_untreated_outcome(
    data: &Dataset,
    rows: &[usize],
    spec: &LearnerSpec,
    clip: &ClipPolicy,
    seed: u64,
) -> Result<[Surface; 2]> {
    let cap = clip.cap();
    let fit = |z: usize| -> Result<Surface> {
        let idx = arm_rows(data, rows, z);
        if idx.is_empty() {
            return Err(MivError::InstrumentArmAbsent { z: z as u8 });
        }
        let y: Vec<f64> = idx.iter().map(|&i| data.y()[i] * (1.0 - data.a()[i])).collect();
        let m = fit_learner(
            spec,
            &Design::from_dataset(data, &idx),
            &y,
            Target::Continuous,
            rng::derive_seed(seed, &[z as u64]),
        );
        Ok(Surface::new(m, -cap, cap))
    };
    Ok([fit(0)?, fit(1)?])
}

/// Nuisance values at one covariate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointNuisance {
    pub p: [f64; 2],
    pub pi1: f64,
    pub e: [f64; 2],
}

impl PointNuisance {
    pub fn pi(&self, z: usize) -> f64 {
        if z == 1 {
            self.pi1
        } else {
            1.0 - self.pi1
        }
    }

    /// `ρ = p₁π₁ + p₀π₀ = pr(A=1 | X)`.
    pub fn rho(&self) -> f64 {
        self.p[1] * self.pi1 + self.p[0] * (1.0 - self.pi1)
    }

    pub fn gap(&self) -> f64 {
        self.p[1] - self.p[0]
    }

    pub fn average(&self, other: &PointNuisance) -> PointNuisance {
        PointNuisance {
            p: [0.5 * (self.p[0] + other.p[0]), 0.5 * (self.p[1] + other.p[1])],
            pi1: 0.5 * (self.pi1 + other.pi1),
            e: [0.5 * (self.e[0] + other.e[0]), 0.5 * (self.e[1] + other.e[1])],
        }
    }
}

/// Counts of active bounds while evaluating surfaces.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClipCounts {
    pub evaluations: usize,
    pub probability: usize,
    pub outcome: usize,
}

impl ClipCounts {
    pub fn merge(&mut self, o: &ClipCounts) {
        self.evaluations += o.evaluations;
        self.probability += o.probability;
        self.outcome += o.outcome;
    }
}

/// Step-1 fitted surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFit {
    pub p: [Surface; 2],
    pub pi1: Surface,
    pub e: [Surface; 2],
    pub clip: ClipPolicy,
}

impl NuisanceFit {
    /// Fit all five surfaces on `rows`. `clip` must already be resolved.
    pub fn fit(
        data: &Dataset,
        rows: &[usize],
        learners: &NuisanceLearners,
        clip: &ClipPolicy,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            p: fit_propensity(data, rows, &learners.propensity, clip, rng::derive_seed(seed, &[1]))?,
            pi1: fit_instrument_density(data, rows, &learners.instrument, clip, rng::derive_seed(seed, &[2]))?,
            e: fit_untreated_outcome(data, rows, &learners.outcome, clip, rng::derive_seed(seed, &[3]))?,
            clip: *clip,
        })
    }

    pub fn at(&self, x: &[f64]) -> PointNuisance {
        self.at_flagged(x).0
    }

    pub fn at_flagged(&self, x: &[f64]) -> (PointNuisance, ClipCounts) {
        let (p0, c0) = self.p[0].eval_flagged(x);
        let (p1, c1) = self.p[1].eval_flagged(x);
        let (pi1, c2) = self.pi1.eval_flagged(x);
        let (e0, c3) = self.e[0].eval_flagged(x);
        let (e1, c4) = self.e[1].eval_flagged(x);
        (
            PointNuisance {
                p: [p0, p1],
                pi1,
                e: [e0, e1],
            },
            ClipCounts {
                evaluations: 1,
                probability: usize::from(c0 || c1 || c2),
                outcome: usize::from(c3 || c4),
            },
        )
    }
}
