use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MivError, Result};
use crate::estimator::{estimate_suite, EstimatorKind, McMean, RunConfig};
use crate::rng;

use super::dgp::{generate_dgp4, Dgp4Params};
use super::glim::{generate_glim, GlimParams};
use super::oracle::OracleSurfaces;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    Dgp4(Dgp4Params),
    Glim(GlimParams),
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec::Dgp4(Dgp4Params::default())
    }
}

impl DgpSpec {
    pub fn check(&self) -> Result<()> {
        match self {
            DgpSpec::Dgp4(p) => p.check(),
            DgpSpec::Glim(p) => p.check(),
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            DgpSpec::Dgp4(p) => Ok(generate_dgp4(p, n, seed)?.data),
            DgpSpec::Glim(p) => Ok(generate_glim(p, n, seed)?.data),
        }
    }

    /// Ground-truth ATT: quadrature for the log-linear DGP, a 10⁶-draw
    /// Monte-Carlo average otherwise.
    pub fn truth(&self, seed: u64) -> Result<f64> {
        match self {
            DgpSpec::Dgp4(p) => Ok(OracleSurfaces::new(p)?.att()),
            DgpSpec::Glim(p) => {
                let s = generate_glim(p, 1_000_000, rng::derive_seed(seed, &[0x7207]))?;
                let diffs: Vec<f64> = (0..s.data.n())
                    .filter(|&i| s.data.a()[i] == 1.0)
                    .map(|i| s.latent.y1[i] - s.latent.y0[i])
                    .collect();
                if diffs.is_empty() {
                    return Err(MivError::Config("GLIM scenario has no treated draws".into()));
                }
                Ok(McMean::from_values(&diffs).mean)
            }
        }
    }
}

/// One Monte-Carlo design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub dgp: DgpSpec,
    pub n: usize,
    pub replicates: usize,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub config: RunConfig,
    /// Overrides the computed ground truth.
    #[serde(default)]
    pub truth: Option<f64>,
}

impl Scenario {
    pub fn check(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(MivError::Config("replicates must be >= 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(MivError::Config("scenario lists no estimators".into()));
        }
        self.dgp.check()?;
        self.config.check()
    }
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimator: EstimatorKind,
    pub psi: f64,
    pub se: f64,
    pub ci: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Bias, average estimated SE, empirical SE and coverage for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub truth: f64,
    pub bias: f64,
    /// Mean of `σ̂ / √N`.
    pub ase: f64,
    /// Standard deviation of the estimates; undefined with fewer than two.
    pub ese: Option<f64>,
    pub coverage: f64,
}

impl ReplicationSummary {
    pub fn from_records(estimator: EstimatorKind, n: usize, truth: f64, records: &[ReplicateRecord]) -> Self {
        let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.estimator == estimator).collect();
        let good: Vec<&ReplicateRecord> = mine.iter().copied().filter(|r| r.ok()).collect();
        let m = good.len();
        let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| {
            if m == 0 {
                f64::NAN
            } else {
                good.iter().map(|r| f(r)).sum::<f64>() / m as f64
            }
        };
        let mean_psi = mean(&|r| r.psi);
        let ese = (m >= 2).then(|| (good.iter().map(|r| (r.psi - mean_psi).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt());
        Self {
            estimator,
            n,
            replicates: mine.len(),
            failures: mine.len() - m,
            truth,
            bias: mean_psi - truth,
            ase: mean(&|r| r.se),
            ese,
            coverage: mean(&|r| f64::from(r.ci.0 <= truth && truth <= r.ci.1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutput {
    pub summaries: Vec<ReplicationSummary>,
    pub records: Vec<ReplicateRecord>,
}

impl ReplicationOutput {
    /// Estimates of one estimator in replicate order (failures as NaN).
    pub fn estimates(&self, estimator: EstimatorKind) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.estimator == estimator)
            .map(|r| if r.ok() { r.psi } else { f64::NAN })
            .collect()
    }

    pub fn summary(&self, estimator: EstimatorKind) -> Option<&ReplicationSummary> {
        self.summaries.iter().find(|s| s.estimator == estimator)
    }
}

/// Run `scenario.replicates` independent datasets. Replicate `r` draws its
/// data from stream `(seed, r, 0)` and its fold plans from `(seed, r, 1)`, so
/// every estimator sees the same splits and results do not depend on
/// scheduling. Failed replicates are kept as records with their error.
pub fn run_replications(scenario: &Scenario, seed: u64) -> Result<ReplicationOutput> {
    scenario.check()?;
    let truth = match scenario.truth {
        Some(t) => t,
        None => scenario.dgp.truth(seed)?,
    };
    let kinds = &scenario.estimators;
    let per_rep: Vec<Vec<ReplicateRecord>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|r| {
            let data_seed = rng::derive_seed(seed, &[r as u64, 0]);
            let cfg = RunConfig {
                seed: rng::derive_seed(seed, &[r as u64, 1]),
                ..scenario.config.clone()
            };
            let fail = |e: &MivError| -> Vec<ReplicateRecord> {
                kinds
                    .iter()
                    .map(|&k| ReplicateRecord {
                        replicate: r,
                        estimator: k,
                        psi: f64::NAN,
                        se: f64::NAN,
                        ci: (f64::NAN, f64::NAN),
                        error: Some(e.to_string()),
                    })
                    .collect()
            };
            let data = match scenario.dgp.generate(scenario.n, data_seed) {
                Ok(d) => d,
                Err(e) => return fail(&e),
            };
            // Each estimator separately fallible: TSLS failures should not
            // discard the cross-fitted estimates.
            let (tsls, folded): (Vec<EstimatorKind>, Vec<EstimatorKind>) =
                kinds.iter().partition(|k| **k == EstimatorKind::Tsls);
            let mut out = Vec::with_capacity(kinds.len());
            let mut push = |kinds: &[EstimatorKind]| {
                if kinds.is_empty() {
                    return;
                }
                match estimate_suite(&data, &cfg, kinds) {
                    Ok(reports) => {
                        for (k, rep) in kinds.iter().zip(reports) {
                            out.push(ReplicateRecord {
                                replicate: r,
                                estimator: *k,
                                psi: rep.psi_hat,
                                se: rep.se,
                                ci: rep.ci,
                                error: None,
                            });
                        }
                    }
                    Err(e) => out.extend(fail(&e).into_iter().filter(|rec| kinds.contains(&rec.estimator))),
                }
            };
            push(&folded);
            push(&tsls);
            out.sort_by_key(|rec| kinds.iter().position(|k| *k == rec.estimator));
            out
        })
        .collect();
    let records: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();
    let summaries = kinds
        .iter()
        .map(|&k| ReplicationSummary::from_records(k, scenario.n, truth, &records))
        .collect();
    Ok(ReplicationOutput { summaries, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{LearnerSpec, NuisanceLearners};

    fn quick(replicates: usize) -> Scenario {
        Scenario {
            dgp: DgpSpec::default(),
            n: 300,
            replicates,
            estimators: vec![EstimatorKind::EifFw, EstimatorKind::Wald, EstimatorKind::Tsls],
            config: RunConfig {
                repeats: 1,
                stratified: true,
                learners: NuisanceLearners::uniform(LearnerSpec::glm()),
                ..RunConfig::default()
            },
            truth: None,
        }
    }

    #[test]
    fn single_replicate_summary() {
        let out = run_replications(&quick(1), 5).unwrap();
        let s = out.summary(EstimatorKind::EifFw).unwrap();
        assert_eq!(s.replicates, 1);
        assert!(s.ese.is_none());
        let rec = &out.records[0];
        assert!((s.bias - (rec.psi - s.truth)).abs() < 1e-12);
    }

    #[test]
    fn summaries_are_consistent_and_deterministic() {
        let a = run_replications(&quick(4), 6).unwrap();
        assert_eq!(a, run_replications(&quick(4), 6).unwrap());
        assert_eq!(a.records.len(), 12);
        for s in &a.summaries {
            assert!((0.0..=1.0).contains(&s.coverage));
            assert!(s.ese.unwrap() >= 0.0);
            assert_eq!(s.replicates, 4);
        }
    }

    #[test]
    fn failures_are_counted() {
        let mut sc = quick(2);
        sc.dgp = DgpSpec::Dgp4(Dgp4Params {
            propensity_form: super::super::PropensityForm::NestedExp,
            ..Dgp4Params::default()
        });
        sc.truth = Some(3.0);
        let out = run_replications(&sc, 1).unwrap();
        let s = out.summary(EstimatorKind::Wald).unwrap();
        assert_eq!(s.failures, 2);
        assert!(out.records.iter().all(|r| r.error.as_deref().unwrap().contains("outside (0,1)")));
    }
}
