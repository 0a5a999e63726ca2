//! `synthforest` command-line front end.
//!
//! Exit codes: 0 on success, 1 when the analysis fails, 2 for usage and I/O
//! problems (bad flags, unreadable or malformed input files).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use config::{parse_merge, EstimatorKind, RunConfig, SchemeKind};
use synthforest::panel::TrailingWeek;
use synthforest::{Bagging, SplitSpec};

/// Problem with the invocation or its inputs rather than with the analysis.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "synthforest", version, about = "Tree-based synthetic control")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Master seed from which all randomness is derived.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true, env = "SYNTHFOREST_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Aggregate a daily event CSV into a weekly panel CSV.
    Ingest(IngestArgs),
    /// Fit one estimator and report the effect, its uncertainty and fit metrics.
    Fit(FitArgs),
    /// Rerun the estimator with every control relabeled as treated.
    Placebo(PlaceboArgs),
    /// Permutation test of a sharp null effect trajectory.
    Conformal(ConformalArgs),
    /// Forest, synthetic control and elastic net side by side.
    Compare(CompareArgs),
    /// Write a synthetic panel with known regression function and effect.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    date_col: Option<String>,
    #[arg(long)]
    unit_col: Option<String>,
    #[arg(long)]
    count_col: Option<String>,
    /// First day of week 1 (YYYY-MM-DD); defaults to the first date in the data.
    #[arg(long)]
    start: Option<NaiveDate>,
    /// Last day to include (YYYY-MM-DD).
    #[arg(long)]
    end: Option<NaiveDate>,
    /// Sum raw units into one panel unit, e.g. `Israel+Palestine=Israel-Palestine`.
    #[arg(long)]
    merge: Vec<String>,
    /// Keep a final week with fewer than seven days.
    #[arg(long)]
    keep_partial_week: bool,
    /// Print and write per-unit summary statistics.
    #[arg(long)]
    summary: bool,
}

#[derive(Args, Debug)]
struct PanelArgs {
    /// Panel CSV written by `ingest` or `simulate`.
    #[arg(long)]
    panel: Option<PathBuf>,
    #[arg(long)]
    treated: Option<String>,
    /// Controls to use (comma separated); every other unit by default.
    #[arg(long, value_delimiter = ',')]
    controls: Vec<String>,
    /// Onset: the first treated week (YYYY-MM-DD) or a period index.
    #[arg(long)]
    t0: Option<String>,
}

#[derive(Args, Debug)]
struct EstimatorArgs {
    #[arg(long, value_enum)]
    estimator: Option<EstimatorKind>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    mtry: Option<usize>,
    /// Minimum leaf size.
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Strict upper bound on leaf size.
    #[arg(long)]
    max_leaf: Option<usize>,
    /// Minimum child share of its parent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Grow each tree on a circular block bootstrap with this block length.
    #[arg(long)]
    tree_block_bootstrap: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha_mix: Option<f64>,
    /// Scale controls to unit variance before the elastic net.
    #[arg(long)]
    standardize: bool,
    /// Tune mtry (forest) or the penalty (elastic net) on a temporal split.
    #[arg(long)]
    tune: bool,
    /// Reserve the last share of the pre-period for tuning validation.
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long)]
    block_length: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[command(flatten)]
    bootstrap: BootstrapArgs,
}

#[derive(Args, Debug)]
struct PlaceboArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Flag placebos whose pre-period RMSPE exceeds this multiple of the treated unit's.
    #[arg(long)]
    exclude_multiplier: Option<f64>,
}

#[derive(Args, Debug)]
struct ConformalArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long, value_enum)]
    scheme: Option<SchemeKind>,
    /// Norm order of the test statistic.
    #[arg(long)]
    q: Option<f64>,
    /// Random permutations for the iid scheme.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Effect under the null: `zero` or a constant.
    #[arg(long)]
    null: Option<String>,
    /// Also run the pre-period specification test.
    #[arg(long)]
    spec_test: bool,
    #[arg(long)]
    kappa_max: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Regression function: `interaction` or `linear`.
    #[arg(long)]
    dgp: Option<String>,
    /// Coefficients of the regression function (comma separated).
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    #[arg(long)]
    n_controls: Option<usize>,
    #[arg(long)]
    pre: Option<usize>,
    #[arg(long)]
    post: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    factor_loading: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use synthforest::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Schema(_) | E::Row { .. } | E::Csv(_) | E::Json(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| UsageError(format!("cannot start {threads} worker threads: {e}")))?;
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| UsageError(format!("cannot create {}: {e}", cfg.output_dir.display())))?;

    match cli.command {
        Command::Ingest(a) => {
            apply_ingest(&mut cfg, &a)?;
            cfg.write_echo("ingest")?;
            commands::ingest(&cfg, a.summary)
        }
        Command::Fit(a) => {
            apply_panel(&mut cfg, a.panel);
            apply_estimator(&mut cfg, a.estimator)?;
            apply_bootstrap(&mut cfg, a.bootstrap);
            cfg.write_echo("fit")?;
            commands::fit(&cfg)
        }
        Command::Placebo(a) => {
            apply_panel(&mut cfg, a.panel);
            apply_estimator(&mut cfg, a.estimator)?;
            if let Some(m) = a.exclude_multiplier {
                cfg.placebo.exclude_multiplier = m;
            }
            cfg.write_echo("placebo")?;
            commands::placebo(&cfg)
        }
        Command::Conformal(a) => {
            apply_panel(&mut cfg, a.panel);
            apply_estimator(&mut cfg, a.estimator)?;
            let c = &mut cfg.conformal;
            if let Some(s) = a.scheme {
                c.scheme = s;
            }
            if let Some(q) = a.q {
                c.q = q;
            }
            if let Some(n) = a.n_samples {
                c.n_samples = n;
            }
            if let Some(null) = a.null {
                c.null = parse_null(&null)?;
            }
            c.spec_test |= a.spec_test;
            if let Some(k) = a.kappa_max {
                c.kappa_max = k;
            }
            cfg.write_echo("conformal")?;
            commands::conformal(&cfg)
        }
        Command::Compare(a) => {
            apply_panel(&mut cfg, a.panel);
            let holdout = a.estimator.holdout;
            apply_estimator(&mut cfg, a.estimator)?;
            if let Some(h) = holdout {
                cfg.compare.holdout = h;
            }
            cfg.write_echo("compare")?;
            commands::compare(&cfg)
        }
        Command::Simulate(a) => {
            apply_simulate(&mut cfg, a)?;
            cfg.simulate.seed = cfg.seed;
            cfg.write_echo("simulate")?;
            commands::simulate(&cfg)
        }
    }
}

fn parse_null(text: &str) -> Result<f64> {
    if text.eq_ignore_ascii_case("zero") {
        return Ok(0.0);
    }
    text.parse()
        .map_err(|_| UsageError(format!("--null expects `zero` or a number, got {text:?}")).into())
}

fn apply_ingest(cfg: &mut RunConfig, a: &IngestArgs) -> Result<()> {
    let ing = &mut cfg.ingest;
    if let Some(p) = &a.input {
        ing.input = Some(p.clone());
    }
    if let Some(c) = &a.date_col {
        ing.schema.date_col = c.clone();
    }
    if let Some(c) = &a.unit_col {
        ing.schema.unit_col = c.clone();
    }
    if let Some(c) = &a.count_col {
        ing.schema.count_col = c.clone();
    }
    if a.start.is_some() {
        ing.start = a.start;
    }
    if a.end.is_some() {
        ing.end = a.end;
    }
    for spec in &a.merge {
        ing.merge.extend(parse_merge(spec)?);
    }
    if a.keep_partial_week {
        ing.trailing_week = TrailingWeek::Keep;
    }
    Ok(())
}

fn apply_panel(cfg: &mut RunConfig, a: PanelArgs) {
    let p = &mut cfg.panel;
    if a.panel.is_some() {
        p.path = a.panel;
    }
    if a.treated.is_some() {
        p.treated = a.treated;
    }
    if !a.controls.is_empty() {
        p.controls = a.controls;
    }
    if a.t0.is_some() {
        p.t0 = a.t0;
    }
}

fn apply_estimator(cfg: &mut RunConfig, a: EstimatorArgs) -> Result<()> {
    if let Some(e) = a.estimator {
        cfg.estimator = e;
    }
    let f = &mut cfg.forest;
    if let Some(n) = a.n_trees {
        f.n_trees = n;
    }
    if a.mtry.is_some() {
        f.mtry = a.mtry;
    }
    if let Some(k) = a.min_leaf {
        f.k = k;
    }
    if a.max_leaf.is_some() {
        f.m_leaf = a.max_leaf;
    }
    if let Some(alpha) = a.alpha {
        f.alpha = alpha;
    }
    if let Some(l) = a.tree_block_bootstrap {
        f.bagging = Bagging::BlockBootstrap { block_length: l };
    }
    if a.lambda.is_some() {
        cfg.enet.lambda = a.lambda;
    }
    if a.alpha_mix.is_some() {
        cfg.enet.alpha_mix = a.alpha_mix;
    }
    cfg.enet.options.standardize |= a.standardize;
    cfg.tuning.enabled |= a.tune;
    if let Some(h) = a.holdout {
        if !(h > 0.0 && h < 1.0) {
            return Err(UsageError(format!("--holdout {h} must lie in (0, 1)")).into());
        }
        cfg.tuning.split = SplitSpec::holdout(h);
    }
    Ok(())
}

fn apply_bootstrap(cfg: &mut RunConfig, a: BootstrapArgs) {
    let b = &mut cfg.bootstrap;
    if let Some(n) = a.n_boot {
        b.n_boot = n;
    }
    if let Some(l) = a.block_length {
        b.block_length = l;
    }
    if let Some(level) = a.level {
        b.level = level;
    }
}

fn apply_simulate(cfg: &mut RunConfig, a: SimulateArgs) -> Result<()> {
    use synthforest::sim::Dgp;
    let s = &mut cfg.simulate;
    match a.dgp.as_deref() {
        None => {
            if !a.beta.is_empty() {
                s.dgp = match &s.dgp {
                    Dgp::Interaction { .. } => interaction(&a.beta)?,
                    Dgp::Linear { .. } => Dgp::Linear { beta: a.beta.clone() },
                };
            }
        }
        Some("interaction") => {
            s.dgp = if a.beta.is_empty() {
                Dgp::Interaction { beta: [1.0, 1.0, 0.5] }
            } else {
                interaction(&a.beta)?
            };
        }
        Some("linear") => {
            let beta = if a.beta.is_empty() { vec![1.0; 2] } else { a.beta.clone() };
            s.dgp = Dgp::Linear { beta };
        }
        Some(other) => return Err(UsageError(format!("unknown DGP {other:?}; use interaction or linear")).into()),
    }
    if let Some(n) = a.n_controls {
        s.n_controls = n;
    }
    if let Some(n) = a.pre {
        s.t0 = n;
    }
    if let Some(n) = a.post {
        s.t_post = n;
    }
    if let Some(t) = a.tau {
        s.tau = t;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    if let Some(v) = a.factor_loading {
        s.factor_loading = v;
    }
    Ok(())
}

fn interaction(beta: &[f64]) -> Result<synthforest::sim::Dgp> {
    let beta: [f64; 3] = beta
        .try_into()
        .map_err(|_| UsageError(format!("the interaction DGP takes three coefficients, got {}", beta.len())))?;
    Ok(synthforest::sim::Dgp::Interaction { beta })
}
