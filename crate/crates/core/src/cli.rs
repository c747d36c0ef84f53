//! Command-line front end: grid landscapes, optimization runs, replay,
//! cost reports and post-hoc selection from a run's Pareto front.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Profile, RunConfig};
use crate::error::{Error, Result};
use crate::mobo::{run_mobo, ScopeEnvironment, SearchSpace};
use crate::optics::Coefficient;
use crate::pareto::{hypervolume, pareto_front, reference_from, ParetoArchive};
use crate::rewards::RewardEvaluator;
use crate::seeding::{derive_seed, SeedRole};
use crate::trajectory::{
    cost_report, read_log, replay_verify, write_hypervolume_csv, write_pareto_csv, RunDirectory, LOG_FILE,
};
use crate::virtual_scope::VirtualScope;

pub const SNAPSHOT_FILE: &str = "config.snapshot";

pub const EXIT_MISMATCH: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "stemtune", version, about = "Virtual STEM aberration tuning by multi-objective Bayesian optimization")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Latency profile.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Disable shot and correlated noise.
    #[arg(long, global = true)]
    pub no_noise: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate both rewards on every vertex of a regular grid.
    Grid {
        /// Levels per axis (2 to 9).
        #[arg(long)]
        levels: Option<usize>,
        /// Comma-separated coefficients to sweep.
        #[arg(long, value_delimiter = ',')]
        coefficients: Option<Vec<Coefficient>>,
    },
    /// Run the optimization loop against the virtual microscope.
    Optimize {
        /// Number of BO iterations after the initial design.
        #[arg(long)]
        iterations: Option<usize>,
        /// Initial design size.
        #[arg(long)]
        n_init: Option<usize>,
        /// Comma-separated coefficients to tune.
        #[arg(long, value_delimiter = ',')]
        coefficients: Option<Vec<Coefficient>>,
    },
    /// Recompute rewards and hypervolume from a run directory.
    Replay { run_dir: PathBuf },
    /// Per-step timing breakdown of a run.
    Cost { run_dir: PathBuf },
    /// Rank front members by weights over normalized objectives, or show one.
    Select {
        run_dir: PathBuf,
        /// Weights for (contrast, fft).
        #[arg(long, value_delimiter = ',', conflicts_with = "index", allow_negative_numbers = true)]
        weights: Option<Vec<f64>>,
        /// Step index of a front member.
        #[arg(long)]
        index: Option<usize>,
    },
}

pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::NumericalFailure(_) => EXIT_NUMERICAL,
        _ => EXIT_INVALID,
    }
}

/// Parses the process arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolved_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(profile) = cli.profile {
        cfg.profile = profile;
        cfg.latency.hw_seconds_per_acquire = None;
    }
    if cli.no_noise {
        cfg.noise.enabled = false;
    }
    match &cli.command {
        Command::Grid { levels, coefficients } => {
            if let Some(l) = levels {
                cfg.grid.levels = *l;
            }
            if let Some(c) = coefficients {
                set_coefficients(&mut cfg, c);
            }
        }
        Command::Optimize { iterations, n_init, coefficients } => {
            if let Some(c) = coefficients {
                set_coefficients(&mut cfg, c);
            }
            if let Some(i) = iterations {
                cfg.mobo.n_iterations = *i;
            }
            if let Some(n) = n_init {
                cfg.mobo.n_init = Some(*n);
            }
        }
        _ => {}
    }
    cfg.resolve()
}

fn set_coefficients(cfg: &mut RunConfig, coefficients: &[Coefficient]) {
    cfg.space.coefficients = coefficients.to_vec();
    cfg.space.bounds.retain(|c, _| coefficients.contains(c));
    cfg.mobo.n_init = None;
}

fn write_snapshot(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(SNAPSHOT_FILE), cfg.to_toml()?)?;
    Ok(())
}

/// Runs one command; `Ok` carries the exit code (0 or a mismatch code).
pub fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Grid { .. } => {
            let cfg = resolved_config(&cli)?;
            let summary = cmd_grid(&cfg)?;
            print!("{summary}");
            Ok(0)
        }
        Command::Optimize { .. } => {
            let cfg = resolved_config(&cli)?;
            let (summary, failure) = cmd_optimize(&cfg)?;
            print!("{summary}");
            match failure {
                Some(e) => Err(e),
                None => Ok(0),
            }
        }
        Command::Replay { run_dir } => {
            let (text, clean) = cmd_replay(run_dir)?;
            print!("{text}");
            Ok(if clean { 0 } else { EXIT_MISMATCH })
        }
        Command::Cost { run_dir } => {
            let report = cost_report(&run_dir.join(LOG_FILE))?;
            print!("{}", report.to_csv());
            eprint!("{}", report.summary());
            Ok(0)
        }
        Command::Select { run_dir, weights, index } => {
            let text = cmd_select(run_dir, weights.as_deref(), *index)?;
            print!("{text}");
            Ok(0)
        }
    }
}

/// Grid vertices in row-major order, last axis fastest.
pub fn grid_points(space: &SearchSpace, levels: usize) -> Vec<Vec<f64>> {
    let d = space.dim();
    let total = levels.pow(d as u32);
    let value = |axis: usize, i: usize| {
        let (l, u) = (space.lower()[axis], space.upper()[axis]);
        l + (u - l) * i as f64 / (levels - 1) as f64
    };
    (0..total)
        .map(|mut k| {
            let mut x = vec![0.0; d];
            for axis in (0..d).rev() {
                x[axis] = value(axis, k % levels);
                k /= levels;
            }
            x
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridLandscape {
    pub coefficients: Vec<Coefficient>,
    pub points: Vec<Vec<f64>>,
    pub rewards: Vec<[f64; 2]>,
    pub front: Vec<usize>,
}

/// Evaluates every vertex; noise seeds are keyed on the vertex index.
pub fn evaluate_grid(cfg: &RunConfig) -> Result<GridLandscape> {
    let levels = cfg.grid.levels;
    if !(2..=9).contains(&levels) {
        return Err(Error::invalid(format!("grid levels must be within 2..=9, got {levels}")));
    }
    let space = cfg.search_space()?;
    let count = (levels as u128).pow(space.dim() as u32);
    if count > cfg.grid.max_evaluations as u128 {
        return Err(Error::invalid(format!(
            "{levels}^{} = {count} evaluations exceeds the cap of {}",
            space.dim(),
            cfg.grid.max_evaluations
        )));
    }
    let scope = VirtualScope::new(cfg.scope_config()?)?;
    let evaluator = RewardEvaluator::new(cfg.optics.grid_size);
    let points = grid_points(&space, levels);
    let rewards = points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let state = space.to_state(x)?;
            let image = scope.render_noisy(&state, derive_seed(cfg.seed, i as u64, SeedRole::Grid))?;
            Ok(evaluator.evaluate(&image).as_array())
        })
        .collect::<Result<Vec<_>>>()?;
    let front = pareto_front(&rewards);
    Ok(GridLandscape {
        coefficients: space.coefficients().to_vec(),
        points,
        rewards,
        front,
    })
}

fn landscape_csv(land: &GridLandscape, front_only: bool) -> String {
    let mut out = String::from("index");
    for c in &land.coefficients {
        out.push(',');
        out.push_str(c.name());
    }
    out.push_str(",contrast,fft,on_front\n");
    for (i, (x, y)) in land.points.iter().zip(&land.rewards).enumerate() {
        let on = land.front.binary_search(&i).is_ok();
        if front_only && !on {
            continue;
        }
        out.push_str(&i.to_string());
        for v in x {
            let _ = write!(out, ",{v:?}");
        }
        let _ = writeln!(out, ",{:?},{:?},{}", y[0], y[1], u8::from(on));
    }
    out
}

/// Writes `config.snapshot`, `landscape.csv` (every vertex) and
/// `pareto.csv` (front vertices only).
pub fn cmd_grid(cfg: &RunConfig) -> Result<String> {
    write_snapshot(cfg)?;
    let land = evaluate_grid(cfg)?;
    fs::write(cfg.out.join("landscape.csv"), landscape_csv(&land, false))?;
    fs::write(cfg.out.join("pareto.csv"), landscape_csv(&land, true))?;
    let mut s = String::new();
    let _ = writeln!(s, "evaluations {}", land.points.len());
    let _ = writeln!(s, "front size {}", land.front.len());
    if let Some(zero) = land.points.iter().position(|x| x.iter().all(|v| *v == 0.0)) {
        let _ = writeln!(s, "zero state on front {}", land.front.contains(&zero));
    }
    if let Some(r) = reference_from(&land.rewards) {
        let front: Vec<[f64; 2]> = land.front.iter().map(|&i| land.rewards[i]).collect();
        let _ = writeln!(s, "hypervolume {:?}", hypervolume(&front, r));
    }
    let _ = writeln!(s, "wrote {}", cfg.out.display());
    Ok(s)
}

/// Runs the loop into `cfg.out`. The second value is the error that ended
/// the run early, if any; outputs are written either way.
pub fn cmd_optimize(cfg: &RunConfig) -> Result<(String, Option<Error>)> {
    if cfg.out.join(LOG_FILE).exists() {
        return Err(Error::invalid(format!("{} already holds a run", cfg.out.display())));
    }
    write_snapshot(cfg)?;
    let space = cfg.search_space()?;
    let config = cfg.mobo_config()?;
    let mut env = ScopeEnvironment::new(VirtualScope::new(cfg.scope_config()?)?);
    let mut sink = RunDirectory::create(&cfg.out)?;
    let outcome = run_mobo(&mut env, &space, &config, &mut sink)?;
    write_pareto_csv(&cfg.out.join("pareto.csv"), &outcome.archive, space.coefficients())?;
    write_hypervolume_csv(&cfg.out.join("hypervolume.csv"), &outcome.hv_history)?;
    let cost = cost_report(&cfg.out.join(LOG_FILE))?;
    fs::write(cfg.out.join("cost.csv"), cost.to_csv())?;

    let mut s = String::new();
    let _ = writeln!(s, "steps {}", outcome.steps);
    let _ = writeln!(s, "hypervolume {:?}", outcome.archive.hypervolume());
    let _ = writeln!(s, "front (index, contrast, fft, {}):", coefficient_header(space.coefficients()));
    for &i in outcome.archive.front() {
        let y = outcome.archive.values()[i];
        let _ = writeln!(s, "  {i} {:.6} {:.6} {}", y[0], y[1], format_x(&outcome.archive.xs()[i]));
    }
    if let Some(e) = &outcome.failure {
        let _ = writeln!(s, "stopped early: {e}");
    }
    Ok((s, outcome.failure))
}

fn coefficient_header(cs: &[Coefficient]) -> String {
    cs.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ")
}

fn format_x(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
}

/// Human-readable replay report and whether it was clean.
pub fn cmd_replay(run_dir: &Path) -> Result<(String, bool)> {
    let report = replay_verify(run_dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "records {}", report.records);
    let _ = writeln!(s, "images checked {}", report.images_checked);
    let _ = writeln!(s, "max contrast deviation {:.3e}", report.max_contrast_deviation);
    let _ = writeln!(s, "max fft deviation {:.3e}", report.max_fft_deviation);
    let _ = writeln!(s, "max hypervolume deviation {:.3e}", report.max_hypervolume_deviation);
    let _ = writeln!(s, "mismatches {}", report.issues.len());
    for issue in &report.issues {
        let _ = writeln!(s, "  step {}: {}", issue.step, issue.message);
    }
    Ok((s, report.is_clean()))
}

/// Front members of a run ranked by `weights` over min-max normalized
/// objectives, or the single member at `index`.
pub fn cmd_select(run_dir: &Path, weights: Option<&[f64]>, index: Option<usize>) -> Result<String> {
    let log = read_log(&run_dir.join(LOG_FILE))?;
    let mut archive = ParetoArchive::new();
    let mut steps = Vec::new();
    let mut actions = Vec::new();
    for rec in &log.records {
        if let (Some(r), Some(a)) = (rec.rewards, rec.action) {
            archive.insert(a.values().to_vec(), r.as_array());
            steps.push(rec.step);
            actions.push(a);
        }
    }
    if archive.front().is_empty() {
        return Err(Error::invalid(format!("the Pareto front of {} is empty", run_dir.display())));
    }
    let front: Vec<usize> = archive.front().to_vec();
    let values = archive.values();
    let names = Coefficient::ALL.map(|c| c.name()).join(" ");
    let line = |s: &mut String, rank: usize, i: usize, score: Option<f64>| {
        let y = values[i];
        let score = score.map_or(String::new(), |v| format!(" score {v:.6}"));
        let _ = writeln!(
            s,
            "{rank} step {} contrast {:.6} fft {:.6}{score} [{}]",
            steps[i],
            y[0],
            y[1],
            format_x(&actions[i].values())
        );
    };
    let mut s = String::new();
    if let Some(step) = index {
        let i = steps
            .iter()
            .position(|&k| k == step as u64)
            .filter(|i| front.contains(i))
            .ok_or_else(|| Error::invalid(format!("step {step} is not on the Pareto front")))?;
        let _ = writeln!(s, "rank step contrast fft [{names}]");
        line(&mut s, 1, i, None);
        return Ok(s);
    }
    let w = weights.unwrap_or(&[0.5, 0.5]);
    if w.len() != 2 || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("weights need two finite values"));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for &i in &front {
        for k in 0..2 {
            lo[k] = lo[k].min(values[i][k]);
            hi[k] = hi[k].max(values[i][k]);
        }
    }
    let norm = |v: f64, k: usize| if hi[k] > lo[k] { (v - lo[k]) / (hi[k] - lo[k]) } else { 0.0 };
    let mut ranked: Vec<(usize, f64)> = front
        .iter()
        .map(|&i| (i, w[0] * norm(values[i][0], 0) + w[1] * norm(values[i][1], 1)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let _ = writeln!(s, "rank step contrast fft score [{names}]");
    for (rank, (i, score)) in ranked.into_iter().enumerate() {
        line(&mut s, rank + 1, i, Some(score));
    }
    Ok(s)
}
