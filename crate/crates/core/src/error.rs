use thiserror::Error;

pub type Result<T> = std::result::Result<T, MivError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MivError {
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("insufficient samples for fold plan: n = {n}, folds = {k} (need n >= {})", 2 * .k)]
    InsufficientSamples { n: usize, k: usize },

    #[error("instrument arm absent in training fold (z = {z})")]
    InstrumentArmAbsent { z: u8 },

    #[error("instrument relevance violated in fold{}", fold_label(.repeat, .fold))]
    WeakInstrument { repeat: Option<usize>, fold: Option<usize> },

    #[error("degenerate arm in fold{}: {detail}; consider stratified folds", fold_label(.repeat, .fold))]
    DegenerateFold {
        repeat: Option<usize>,
        fold: Option<usize>,
        detail: String,
    },

    #[error("pseudo-outcome overflow; check clipping")]
    PseudoOutcomeOverflow,

    #[error("collinear design: column(s) {0} are linearly dependent on earlier columns")]
    Collinear(String),

    #[error("first-stage F statistic {0:.4} < 1: instrument is irrelevant")]
    IrrelevantInstrument(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("DGP propensity {value} outside (0,1) at draw {row} (z = {z}, x = {x:?}, u = {u})")]
    PropensityOutOfRange {
        row: usize,
        value: f64,
        z: u8,
        x: Vec<f64>,
        u: f64,
    },

    #[error("GLIM index {value} outside (0,1) at row {row} (z = {z}, u = {u})")]
    IndexOutOfRange { row: usize, value: f64, z: u8, u: f64 },
}

fn fold_label(repeat: &Option<usize>, fold: &Option<usize>) -> String {
    match (repeat, fold) {
        (Some(r), Some(k)) => format!(" {k} (repeat {r})"),
        (None, Some(k)) => format!(" {k}"),
        _ => String::new(),
    }
}

impl MivError {
    /// Attach a (repeat, fold) location to fold-level failures.
    pub(crate) fn at_fold(self, r: usize, k: usize) -> Self {
        match self {
            MivError::WeakInstrument { .. } => MivError::WeakInstrument {
                repeat: Some(r),
                fold: Some(k),
            },
            MivError::DegenerateFold { detail, .. } => MivError::DegenerateFold {
                repeat: Some(r),
                fold: Some(k),
                detail,
            },
            MivError::InstrumentArmAbsent { z } => MivError::DegenerateFold {
                repeat: Some(r),
                fold: Some(k),
                detail: format!("instrument arm z = {z} absent in training fold"),
            },
            other => other,
        }
    }
}
