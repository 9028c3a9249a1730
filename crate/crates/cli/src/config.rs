use std::fs;
use std::path::Path;

use miv_att::estimator::EstimatorKind;
use miv_att::simulation::{DgpSpec, Scenario};
use miv_att::RunConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Top-level JSON configuration. Every block is optional; omitted keys take
/// the library defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Root seed for `simulate` and `generate`, and the fold seed for
    /// `estimate` when set. `--seed` overrides it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub run: RunConfig,
    /// Estimators reported by `estimate`; the first one is the headline.
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub simulate: Option<SimulateBlock>,
    #[serde(default)]
    pub generate: Option<GenerateBlock>,
}

fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            seed: None,
            run: RunConfig::default(),
            estimators: default_estimators(),
            simulate: None,
            generate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBlock {
    #[serde(default)]
    pub dgp: DgpSpec,
    pub n: usize,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), CliError> {
        self.run.check().map_err(CliError::from_core)?;
        if self.estimators.is_empty() {
            return Err(CliError::input("config lists no estimators"));
        }
        if let Some(sim) = &self.simulate {
            if sim.scenarios.is_empty() {
                return Err(CliError::input("simulate block has no scenarios"));
            }
            for (i, s) in sim.scenarios.iter().enumerate() {
                s.check()
                    .map_err(|e| CliError::input(format!("scenario {i}: {e}")))?;
            }
        }
        if let Some(g) = &self.generate {
            if g.n == 0 {
                return Err(CliError::input("generate.n must be >= 1"));
            }
            g.dgp.check().map_err(CliError::from_core)?;
        }
        Ok(())
    }

    /// `--seed`, then the config seed, then the fold seed inside `run`.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(self.run.seed)
    }
}
