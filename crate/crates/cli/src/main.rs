//! `aopd`: command-line front end for the tabular on-policy distillation
//! lab. Subcommands: train, ablate, blackhole, verify, report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config error,
//! 3 verification failure.

mod manifest;
mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aopd_core::metrics::{write_advantage_hist_csv, write_metrics_csv};
use aopd_core::objectives::ObjectiveKind;
use aopd_core::oracle::{escape_experiment, make_blackhole, EscapeTrace};
use aopd_core::rollout::{
    make_prompt_set, rollout_student, rollout_teacher, write_trajectory_dump,
};
use aopd_core::trainer::{
    ablate, derive_seed, train, AblationAxis, Seeds, TrainConfig, TrainOutcome,
};
use aopd_core::verify::run_full_verification;
use aopd_core::ObjectiveConfig;

use manifest::{RunManifest, RunOutputs};

/// CLI failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or invocation (exit 2).
    Config(String),
    /// Failure while executing a valid request (exit 1).
    Runtime(String),
    /// The verification battery found property violations (exit 3).
    Verification(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "aopd",
    version,
    about = "Tabular on-policy distillation lab: train, ablate, and verify the objective family"
)]
struct Cli {
    /// Worker threads for concurrent ablation sub-runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training configuration and write its run directory.
    Train {
        /// Sectioned key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides every seed in the config, deriving the four roots.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (must not exist). Default: runs/<objective>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the final policy's rollouts to trajectories.csv.
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Sweep one axis (beta, tau or topk) with shared base seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for sub-runs and comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the constructed black-hole escape for OPD and AOPD.
    Blackhole {
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full property battery; nonzero exit on any failure.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Randomized instances per gradient family.
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
    /// Render a run CSV (or a run directory's metrics.csv) as text.
    Report {
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Ignore the error when a pool already exists (e.g. repeated init
        // in tests); determinism does not depend on thread count.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            config,
            seed,
            out,
            dump_trajectories,
        } => cmd_train(&config, seed, out, dump_trajectories),
        Command::Ablate {
            config,
            axis,
            values,
            seed,
            out,
        } => cmd_ablate(&config, &axis, &values, seed, out),
        Command::Blackhole {
            vocab,
            steps,
            lr,
            seed,
            out,
        } => cmd_blackhole(vocab, steps, lr, seed, out),
        Command::Verify { seed, instances } => cmd_verify(seed, instances),
        Command::Report { path } => {
            print!("{}", report::render(&path)?);
            Ok(())
        }
    }
}

/// Parses and validates a config file; all failures are config errors with
/// field-level messages.
fn load_config(path: &Path, seed_override: Option<u64>) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    let mut config: TrainConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(base) = seed_override {
        config.seeds = Seeds::from_base(base);
    }
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Creates a fresh run directory; re-running into an existing one is an
/// error (run directories are append-only).
fn create_run_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        return Err(CliError::Config(format!(
            "run directory {} already exists; run directories are append-only",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    Ok(())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Trains one config into `dir`: manifest, metrics.csv, advantage_hist.csv,
/// final policy dump, optional trajectory dump.
fn execute_run(
    config: &TrainConfig,
    dir: &Path,
    seed_override: Option<u64>,
    dump_trajectories: bool,
) -> Result<TrainOutcome, CliError> {
    create_run_dir(dir)?;
    let mut outputs = RunOutputs::default();
    if dump_trajectories {
        outputs.trajectories = Some("trajectories.csv".into());
    }
    let mut manifest = RunManifest::new(config.clone(), seed_override, outputs);
    manifest.write(dir)?;
    // The manifest invariant: the config snapshot round-trips identically.
    let reread = RunManifest::read(dir)?;
    if reread.config != *config {
        return Err(CliError::Runtime(
            "manifest config snapshot did not round-trip".into(),
        ));
    }

    let outcome = train(config).map_err(runtime)?;

    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &config.run_label(), &outcome.metrics).map_err(runtime)?;
    std::fs::write(dir.join(&manifest.outputs.metrics), metrics).map_err(runtime)?;

    let mut hist = Vec::new();
    write_advantage_hist_csv(&mut hist, &outcome.metrics, config.run.eval_interval)
        .map_err(runtime)?;
    std::fs::write(dir.join(&manifest.outputs.advantage_hist), hist).map_err(runtime)?;

    let mut policy = Vec::new();
    outcome.final_student.write_text(&mut policy).map_err(runtime)?;
    std::fs::write(dir.join(&manifest.outputs.final_policy), policy).map_err(runtime)?;

    if let Some(name) = &manifest.outputs.trajectories {
        let dump = final_rollout(config, &outcome).map_err(runtime)?;
        let mut buf = Vec::new();
        write_trajectory_dump(&dump, &mut buf).map_err(runtime)?;
        std::fs::write(dir.join(name), buf).map_err(runtime)?;
    }

    manifest.mark_finished();
    manifest.write(dir)?;
    Ok(outcome)
}

/// One rollout batch from the final policy, for the trajectory dump.
fn final_rollout(
    config: &TrainConfig,
    outcome: &TrainOutcome,
) -> aopd_core::Result<Vec<aopd_core::Trajectory>> {
    let prompts = make_prompt_set(
        config.run.prompt_count,
        config.run.prompt_length,
        config.model.vocab_size,
        config.seeds.prompt,
    )?;
    let seed = derive_seed(config.seeds.rollout, config.run.steps as u64);
    match config.objective.mask_rule() {
        Some(rule) => rollout_student(
            &outcome.final_student,
            &outcome.teacher,
            &prompts,
            config.run.horizon,
            &rule,
            seed,
        ),
        None => rollout_teacher(&outcome.teacher, &prompts, config.run.horizon, seed),
    }
}

fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    dump_trajectories: bool,
) -> Result<(), CliError> {
    let config = load_config(config_path, seed)?;
    let dir = out.unwrap_or_else(|| {
        PathBuf::from("runs").join(config.objective.kind.to_string().to_lowercase())
    });
    let outcome = execute_run(&config, &dir, seed, dump_trajectories)?;
    println!(
        "run complete: {} steps, exact_rkl {} -> {} ({})",
        outcome.metrics.len(),
        outcome.initial_rkl,
        outcome.final_rkl(),
        dir.display()
    );
    Ok(())
}

fn cmd_ablate(
    config_path: &Path,
    axis: &str,
    values: &[f64],
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let base = load_config(config_path, seed)?;
    let axis: AblationAxis = axis.parse().map_err(|e: aopd_core::Error| {
        CliError::Config(e.to_string())
    })?;
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("ablate-{axis}")));
    create_run_dir(&dir)?;

    // Values are validated before any run starts; the runs themselves are
    // independent and execute on the rayon pool.
    let rows = ablate(&base, axis, values).map_err(|e| match e {
        aopd_core::Error::Config(_) | aopd_core::Error::OutOfRange { .. } => {
            CliError::Config(e.to_string())
        }
        other => runtime(other),
    })?;

    let mut comparison = String::from("axis,value,final_exact_rkl,final_entropy,mean_intervention_ratio\n");
    for row in &rows {
        let sub = dir.join(format!("{axis}-{}", row.value));
        create_run_dir(&sub)?;
        let mut manifest = RunManifest::new(row.config.clone(), seed, RunOutputs::default());
        let mut metrics = Vec::new();
        write_metrics_csv(&mut metrics, &row.config.run_label(), &row.outcome.metrics)
            .map_err(runtime)?;
        std::fs::write(sub.join(&manifest.outputs.metrics), metrics).map_err(runtime)?;
        let mut hist = Vec::new();
        write_advantage_hist_csv(&mut hist, &row.outcome.metrics, row.config.run.eval_interval)
            .map_err(runtime)?;
        std::fs::write(sub.join(&manifest.outputs.advantage_hist), hist).map_err(runtime)?;
        let mut policy = Vec::new();
        row.outcome
            .final_student
            .write_text(&mut policy)
            .map_err(runtime)?;
        std::fs::write(sub.join(&manifest.outputs.final_policy), policy).map_err(runtime)?;
        manifest.mark_finished();
        manifest.write(&sub)?;

        comparison.push_str(&format!(
            "{axis},{},{},{},{}\n",
            row.value,
            row.outcome.final_rkl(),
            row.outcome.final_entropy().unwrap_or(f64::NAN),
            row.outcome
                .mean_intervention_ratio()
                .map(|r| r.to_string())
                .unwrap_or_default()
        ));
    }
    std::fs::write(dir.join("comparison.csv"), &comparison).map_err(runtime)?;
    println!(
        "ablation complete: {} runs over {axis} ({})",
        rows.len(),
        dir.display()
    );
    Ok(())
}

fn write_escape_trace(path: &Path, trace: &EscapeTrace) -> Result<(), CliError> {
    let mut out = String::from("step,p_essential,z_essential\n");
    for (step, (p, z)) in trace
        .p_essential
        .iter()
        .zip(&trace.z_essential)
        .enumerate()
    {
        out.push_str(&format!("{step},{p},{z}\n"));
    }
    std::fs::write(path, out).map_err(runtime)
}

fn cmd_blackhole(
    vocab: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join("blackhole"));
    let scenario = make_blackhole(vocab, seed).map_err(|e| CliError::Config(e.to_string()))?;
    create_run_dir(&dir)?;
    let aopd_cfg = ObjectiveConfig::new(ObjectiveKind::Aopd);
    let opd_cfg = ObjectiveConfig::new(ObjectiveKind::Opd);
    let guided = escape_experiment(&scenario, &aopd_cfg, steps, lr, seed).map_err(runtime)?;
    let unguided = escape_experiment(&scenario, &opd_cfg, steps, lr, seed).map_err(runtime)?;
    write_escape_trace(&dir.join("aopd_trace.csv"), &guided)?;
    write_escape_trace(&dir.join("opd_trace.csv"), &unguided)?;
    println!(
        "blackhole escape (vocab {vocab}, essential token {}, {steps} steps, lr {lr}, seed {seed}): \
         AOPD final P(v*) = {}, OPD final P(v*) = {} ({})",
        scenario.essential_token,
        guided.final_p_essential(),
        unguided.final_p_essential(),
        dir.display()
    );
    Ok(())
}

fn cmd_verify(seed: u64, instances: usize) -> Result<(), CliError> {
    let report = run_full_verification(seed, instances);
    print!("{}", report.render());
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Verification(
            "one or more property categories failed; see the report above".into(),
        ))
    }
}
