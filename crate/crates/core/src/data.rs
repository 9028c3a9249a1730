//! Observed data `O = (Y, A, Z, X)` and cross-fitting fold plans.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MivError, Result};
use crate::rng;

/// One observation. `a` and `z` are stored as reals so that invalid codes
/// survive ingestion and can be reported by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub a: f64,
    pub z: f64,
    pub x: Vec<f64>,
}

/// Columnar dataset with a row-major covariate block of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<f64>,
    z: Vec<f64>,
    x: Vec<f64>,
    d: usize,
    names: Vec<String>,
}

impl Dataset {
    /// Build from columns. Only the shape is checked here; semantic checks
    /// live in [`validate`].
    pub fn new(y: Vec<f64>, a: Vec<f64>, z: Vec<f64>, x_rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = x_rows.first().map_or(0, Vec::len);
        let names = (1..=d).map(|j| format!("x{j}")).collect();
        Self::with_names(y, a, z, x_rows, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        a: Vec<f64>,
        z: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if a.len() != n || z.len() != n || x_rows.len() != n {
            return Err(MivError::InvalidData(format!(
                "column lengths differ: y={}, a={}, z={}, x={}",
                n,
                a.len(),
                z.len(),
                x_rows.len()
            )));
        }
        let d = names.len();
        let mut x = Vec::with_capacity(n * d);
        for (i, row) in x_rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(MivError::InvalidData(format!(
                    "row {i} has {} covariates, expected {d}",
                    row.len()
                )));
            }
            x.extend(row);
        }
        Ok(Self { y, a, z, x, d, names })
    }

    pub fn from_observations(rows: &[Observation]) -> Result<Self> {
        Self::new(
            rows.iter().map(|o| o.y).collect(),
            rows.iter().map(|o| o.a).collect(),
            rows.iter().map(|o| o.z).collect(),
            rows.iter().map(|o| o.x.clone()).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    /// Covariates of row `i`.
    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            y: self.y[i],
            a: self.a[i],
            z: self.z[i],
            x: self.x(i).to_vec(),
        }
    }

    /// Instrument arm of row `i` as an index (0 or 1).
    pub(crate) fn arm(&self, i: usize) -> usize {
        usize::from(self.z[i] >= 0.5)
    }

    pub fn mean_a(&self) -> f64 {
        self.a.iter().sum::<f64>() / self.n() as f64
    }

    pub fn max_abs_y(&self) -> f64 {
        self.y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Rows restricted to `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(self.x(i));
        }
        Dataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            x,
            d: self.d,
            names: self.names.clone(),
        }
    }
}

/// A violated dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    Empty,
    NonBinaryTreatment { row: usize },
    NonBinaryInstrument { row: usize },
    NonFiniteOutcome { row: usize },
    NonFiniteCovariate { row: usize, column: usize },
    NoUntreated,
    NoTreated,
    NoInstrumentArm { z: u8 },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::Empty => write!(f, "empty dataset"),
            Issue::NonBinaryTreatment { row } => write!(f, "non-binary treatment (row {row})"),
            Issue::NonBinaryInstrument { row } => write!(f, "non-binary instrument (row {row})"),
            Issue::NonFiniteOutcome { row } => write!(f, "non-finite outcome (row {row})"),
            Issue::NonFiniteCovariate { row, column } => {
                write!(f, "non-finite covariate (row {row}, column {column})")
            }
            Issue::NoUntreated => write!(f, "no untreated observations"),
            Issue::NoTreated => write!(f, "no treated observations"),
            Issue::NoInstrumentArm { z } => write!(f, "no observations with z = {z}"),
        }
    }
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

/// Every violated invariant of `data`; empty on success.
pub fn validate(data: &Dataset) -> Vec<Issue> {
    let mut issues = Vec::new();
    if data.n() == 0 {
        issues.push(Issue::Empty);
        return issues;
    }
    if let Some(row) = data.a.iter().position(|&v| !is_binary(v)) {
        issues.push(Issue::NonBinaryTreatment { row });
    }
    if let Some(row) = data.z.iter().position(|&v| !is_binary(v)) {
        issues.push(Issue::NonBinaryInstrument { row });
    }
    if let Some(row) = data.y.iter().position(|v| !v.is_finite()) {
        issues.push(Issue::NonFiniteOutcome { row });
    }
    if let Some(pos) = data.x.iter().position(|v| !v.is_finite()) {
        issues.push(Issue::NonFiniteCovariate {
            row: pos / data.d,
            column: pos % data.d,
        });
    }
    if !data.a.contains(&0.0) {
        issues.push(Issue::NoUntreated);
    }
    if !data.a.contains(&1.0) {
        issues.push(Issue::NoTreated);
    }
    for z in [0u8, 1] {
        if !data.z.iter().any(|&v| v == f64::from(z)) {
            issues.push(Issue::NoInstrumentArm { z });
        }
    }
    issues
}

/// Assignment of rows to `k` evaluation folds, plus a two-way split of each
/// fold's complement into halves `c1`, `c2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub nested_halves: Vec<(Vec<usize>, Vec<usize>)>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == k)
            .collect()
    }

    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != k)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

const FOLD_STREAM: u64 = 0xF01D;

fn check_size(n: usize, k: usize) -> Result<()> {
    if k == 0 || n < 2 * k {
        return Err(MivError::InsufficientSamples { n, k });
    }
    Ok(())
}

/// Uniform random fold plan: seeded shuffle dealt round-robin, then each
/// complement shuffled and halved.
pub fn make_fold_plan(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    check_size(n, k)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[FOLD_STREAM]));
    let mut assignments = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        assignments[i] = pos % k;
    }
    let nested_halves = (0..k)
        .map(|f| {
            let mut comp: Vec<usize> = (0..n).filter(|&i| assignments[i] != f).collect();
            comp.shuffle(&mut rng::stream(seed, &[FOLD_STREAM, f as u64 + 1]));
            let half = comp.len().div_ceil(2);
            let c2 = comp.split_off(half);
            (comp, c2)
        })
        .collect();
    Ok(FoldPlan {
        k,
        assignments,
        nested_halves,
        seed,
    })
}

/// Fold plan stratified by the four `(A, Z)` cells: each cell is shuffled and
/// dealt round-robin with a running counter, so overall fold sizes still
/// differ by at most one and every fold sees every non-empty cell when the
/// cell has at least `k` members.
pub fn make_stratified_fold_plan(data: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    let n = data.n();
    check_size(n, k)?;
    let cell = |i: usize| 2 * usize::from(data.a[i] >= 0.5) + data.arm(i);
    let deal = |rows: Vec<usize>, parts: usize, path: &[u64]| -> Vec<usize> {
        let mut cells: [Vec<usize>; 4] = Default::default();
        for i in rows {
            cells[cell(i)].push(i);
        }
        let mut out = vec![0; n];
        let mut counter = 0usize;
        for (c, mut members) in cells.into_iter().enumerate() {
            let mut p = path.to_vec();
            p.push(c as u64);
            members.shuffle(&mut rng::stream(seed, &p));
            for i in members {
                out[i] = counter % parts;
                counter += 1;
            }
        }
        out
    };
    let assignments = deal((0..n).collect(), k, &[FOLD_STREAM, 0xCE11]);
    let nested_halves = (0..k)
        .map(|f| {
            let comp: Vec<usize> = (0..n).filter(|&i| assignments[i] != f).collect();
            let halves = deal(comp.clone(), 2, &[FOLD_STREAM, 0xCE11, f as u64 + 1]);
            let (mut c1, mut c2) = (Vec::new(), Vec::new());
            for i in comp {
                if halves[i] == 0 {
                    c1.push(i);
                } else {
                    c2.push(i);
                }
            }
            (c1, c2)
        })
        .collect();
    Ok(FoldPlan {
        k,
        assignments,
        nested_halves,
        seed,
    })
}
