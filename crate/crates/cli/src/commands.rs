use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use miv_att::baselines::tsls_estimate;
use miv_att::estimator::{estimate_suite, EstimatorKind};
use miv_att::simulation::{run_replications, DgpSpec};
use miv_att::{rng, validate};

use crate::config::ConfigFile;
use crate::io::{read_dataset, write_dataset, write_summaries};
use crate::CliError;

pub struct Context {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub verbose: bool,
}

impl Context {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn emit(&self, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
        let res = match &self.out {
            Some(path) => {
                let file = File::create(path)
                    .map_err(|e| CliError::input(format!("cannot create {}: {e}", path.display())))?;
                let mut w = BufWriter::new(file);
                f(&mut w).and_then(|()| w.flush())
            }
            None => {
                let stdout = io::stdout();
                let mut w = stdout.lock();
                f(&mut w).and_then(|()| w.flush())
            }
        };
        res.map_err(|e| CliError::runtime(format!("write failed: {e}")))
    }
}

pub fn estimate(cfg: &ConfigFile, data_path: &Path, ctx: &Context) -> Result<(), CliError> {
    let data = read_dataset(data_path)?;
    let issues = validate(&data);
    if !issues.is_empty() {
        let msg: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
        return Err(CliError::input(format!("{}: {}", data_path.display(), msg.join("; "))));
    }
    let mut run = cfg.run.clone();
    run.seed = cfg.effective_seed(ctx.seed);
    ctx.log(format!("estimate: n = {}, d = {}, repeats = {}", data.n(), data.d(), run.repeats));

    let headline = cfg.estimators[0];
    // TSLS is a side baseline unless it is the headline; its failure then
    // becomes a note instead of aborting the run.
    let suite: Vec<EstimatorKind> = cfg
        .estimators
        .iter()
        .copied()
        .filter(|&k| k == headline || k != EstimatorKind::Tsls)
        .collect();
    let t = Instant::now();
    let reports = estimate_suite(&data, &run, &suite).map_err(CliError::from_core)?;
    ctx.log(format!("estimate: done in {:.1}s", t.elapsed().as_secs_f64()));

    let mut report = reports[0].clone();
    for kind in &cfg.estimators {
        if let Some(r) = reports.iter().find(|r| r.estimator == kind.name()) {
            report.baselines.push(r.baseline_row());
        } else {
            match tsls_estimate(&data, run.alpha) {
                Ok(t) => report.baselines.push(miv_att::estimator::BaselineRow {
                    estimator: kind.name().to_string(),
                    estimate: t.estimate,
                    ci: t.ci,
                }),
                Err(e) => report.diagnostics.notes.push(format!("tsls: {e}")),
            }
        }
    }
    ctx.emit(|w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })
}

pub fn simulate(cfg: &ConfigFile, ctx: &Context) -> Result<(), CliError> {
    let Some(sim) = &cfg.simulate else {
        return Err(CliError::input("configuration has no simulate block"));
    };
    let seed = cfg.effective_seed(ctx.seed);
    let mut rows = Vec::new();
    for (i, sc) in sim.scenarios.iter().enumerate() {
        let t = Instant::now();
        let out = run_replications(sc, rng::derive_seed(seed, &[i as u64])).map_err(CliError::from_core)?;
        ctx.log(format!(
            "scenario {i}: N = {}, {} replicates, {:.1}s",
            sc.n,
            sc.replicates,
            t.elapsed().as_secs_f64()
        ));
        for r in out.records.iter().filter(|r| !r.ok()) {
            ctx.log(format!(
                "  replicate {} ({}) failed: {}",
                r.replicate,
                r.estimator,
                r.error.as_deref().unwrap_or("")
            ));
        }
        rows.extend(out.summaries);
    }
    ctx.emit(|w| write_summaries(&rows, w))
}

pub fn generate(cfg: &ConfigFile, n: Option<usize>, ctx: &Context) -> Result<(), CliError> {
    let (dgp, n) = match (&cfg.generate, n) {
        (Some(g), n) => (g.dgp, n.unwrap_or(g.n)),
        (None, Some(n)) => (DgpSpec::default(), n),
        (None, None) => return Err(CliError::input("sample size missing: pass --n or a generate block")),
    };
    if n == 0 {
        return Err(CliError::input("sample size must be >= 1"));
    }
    let seed = cfg.effective_seed(ctx.seed);
    let data = dgp.generate(n, seed).map_err(CliError::from_core)?;
    ctx.log(format!("generate: {n} rows, seed {seed}"));
    ctx.emit(|w| write_dataset(&data, w))
}
