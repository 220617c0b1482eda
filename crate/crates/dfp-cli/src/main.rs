//! Experiment runner: configuration, orchestration, persistence, and result
//! emission for the deep fictitious play solver.

mod artifacts;
mod config;

use anyhow::{anyhow, bail, Result};
use artifacts::{check_compatibility, load_checkpoint, save_checkpoint, write_manifest, CheckpointMeta};
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use dfp::bsde::{write_history_csv, PlayersNets};
use dfp::driver::{eps_nash_gap, run_dfp, GapConfig, StagePolicy};
use dfp::evaluation::{path_comparison, rse_of_nets, write_comparison_csv, GroundTruthConfig};
use dfp::game::{Policy, ZeroPolicy};
use dfp::sde::{delta0_fixed_point, Delta0Config};
use dfp::systemic_risk::{
    build_game, riccati_solve, RiccatiPolicy, RiccatiSolution,
    DEFAULT_RICCATI_GRID,
};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "dfp", about = "N-player stochastic differential game solver", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment: closed-form oracle, initial-spread procedure,
    /// iterated decoupling, and all artifacts.
    Run {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Force fixed-order reductions (runs are seeded and reproducible
        /// either way; this flag is echoed into the artifacts).
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Recompute evaluation artifacts from a stored checkpoint, without
    /// retraining.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "runs/evaluate")]
        out: PathBuf,
    },
    /// Dump the scalar Riccati coefficients (t, eta, mu) as CSV.
    Riccati {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RICCATI_GRID)]
        grid: usize,
    },
    /// Finite-difference verification of the network gradients.
    Gradcheck,
    /// Time one training step at both presets.
    Bench {
        #[arg(long)]
        deterministic: bool,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("DFP_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            preset,
            seed,
            deterministic,
            out,
        } => load_config(config.as_deref(), preset.as_deref(), seed, deterministic)
            .and_then(|c| cmd_run(&c, &out).map_err(CliError::runtime)),
        Command::Evaluate {
            checkpoint,
            config,
            preset,
            out,
        } => load_config(config.as_deref(), preset.as_deref(), None, false)
            .and_then(|c| cmd_evaluate(&checkpoint, &c, &out)),
        Command::Riccati {
            config,
            preset,
            out,
            grid,
        } => load_config(config.as_deref(), preset.as_deref(), None, false)
            .and_then(|c| cmd_riccati(&c, out.as_deref(), grid).map_err(CliError::runtime)),
        Command::Gradcheck => cmd_gradcheck().map_err(CliError::runtime),
        Command::Bench { deterministic } => cmd_bench(deterministic).map_err(CliError::runtime),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(message)) => {
            eprintln!("configuration error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(error)) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    /// Schema or compatibility problems: exit code 2.
    Config(String),
    /// Everything else: exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    fn runtime(error: anyhow::Error) -> Self {
        CliError::Runtime(error)
    }
}

fn load_config(
    path: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    deterministic: bool,
) -> Result<ExperimentConfig, CliError> {
    let mut config = match (path, preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name).map_err(CliError::Config)?,
        (None, None) => ExperimentConfig::preset_ci(),
        (Some(_), Some(_)) => unreachable!("clap forbids --config with --preset"),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if deterministic {
        config.deterministic = true;
    }
    config.validate().map_err(CliError::Config)?;
    Ok(config)
}

struct Experiment {
    config: ExperimentConfig,
    game: Arc<dfp::game::GameSpec>,
    solution: Arc<RiccatiSolution>,
    partition: dfp::Partition,
}

fn setup(config: &ExperimentConfig) -> Result<Experiment> {
    if let Some(warning) = config.game.params.convexity_warning() {
        eprintln!("warning: {warning}");
    }
    let game = Arc::new(build_game(&config.game.params)?);
    let solution = Arc::new(riccati_solve(&config.game.params, DEFAULT_RICCATI_GRID)?);
    let partition = config.partition()?;
    Ok(Experiment {
        config: config.clone(),
        game,
        solution,
        partition,
    })
}

fn resolve_delta0(exp: &Experiment) -> Result<(f64, bool)> {
    let section = &exp.config.delta0;
    if section.mode == "fixed" {
        return Ok((section.value, true));
    }
    // the spread is a fixed point of the optimally controlled dynamics
    let policy = RiccatiPolicy {
        solution: Arc::clone(&exp.solution),
    };
    let config = Delta0Config {
        batch: section.batch,
        max_iter: section.max_iter,
        rel_tol: section.rel_tol,
        partition: exp.partition.clone(),
        seed: exp.config.seed ^ 0xDE17A0,
        initial: section.value,
    };
    let result = delta0_fixed_point(&exp.game, &policy, &config)?;
    if !result.converged {
        eprintln!(
            "warning: delta0 fixed point did not converge in {} iterations; using {}",
            result.iterations, result.delta
        );
    }
    Ok((result.delta, result.converged))
}

#[derive(Serialize)]
struct RunReport<'a> {
    scale: &'a str,
    seed: u64,
    deterministic: bool,
    delta0: f64,
    delta0_converged: bool,
    report: &'a dfp::driver::DfpReport,
    final_rse: f64,
}

fn cmd_run(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config_echo.toml"), config.to_toml())?;
    let exp = setup(config)?;

    // oracle CSV
    let mut riccati_csv = Vec::new();
    write_riccati_csv(&mut riccati_csv, &exp.solution)?;
    fs::write(out_dir.join("riccati.csv"), riccati_csv)?;

    let (delta0, delta0_converged) = resolve_delta0(&exp)?;
    println!("delta0 = {delta0:.4} (converged: {delta0_converged})");

    let oracle = RiccatiPolicy {
        solution: Arc::clone(&exp.solution),
    };
    let gt = GroundTruthConfig {
        j_paths: config.evaluation.rse_paths,
        seed: config.seed ^ 0x65E,
        partition: exp.partition.clone(),
        delta0,
    };
    let game = Arc::clone(&exp.game);
    let solution = Arc::clone(&exp.solution);
    let gt_hook = gt.clone();
    let rse_hook = move |nets: &PlayersNets| -> dfp::Result<f64> {
        Ok(rse_of_nets(&game, &solution, nets.primary(), &gt_hook)?.rse)
    };
    let dfp_config = config.dfp_config(delta0)?;
    let outcome = run_dfp(&exp.game, &dfp_config, Some(&oracle), Some(&rse_hook))?;
    for stage in &outcome.report.stages {
        println!(
            "stage {}: loss {:.3e}, distance to oracle {:.3e}, rse {:.4}",
            stage.stage,
            stage.final_loss,
            stage.policy_distance_oracle.unwrap_or(f64::NAN),
            stage.rse.unwrap_or(f64::NAN)
        );
    }

    for (m, history) in outcome.histories.iter().enumerate() {
        let mut csv = Vec::new();
        write_history_csv(&mut csv, history)?;
        fs::write(out_dir.join(format!("history_stage{m}.csv")), csv)?;
    }

    let meta = CheckpointMeta {
        config_toml: config.to_toml(),
        delta0,
        stages: outcome.stage_nets.len(),
        shared_players: config.dfp.shared_players,
    };
    save_checkpoint(&out_dir.join("checkpoint.bin"), &meta, &outcome.stage_nets)?;

    // final RSE profile
    let final_nets = outcome
        .policy
        .last_nets()
        .ok_or_else(|| anyhow!("run produced no stages"))?;
    let rse_report = rse_of_nets(&exp.game, &exp.solution, final_nets.primary(), &gt)?;
    let mut rse_csv = Vec::new();
    rse_report.write_csv(&mut rse_csv)?;
    fs::write(out_dir.join("rse.csv"), rse_csv)?;
    println!("final RSE: {:.4}%", rse_report.rse * 100.0);

    // coupled path comparison under the learned policy
    let rows = path_comparison(
        &exp.game,
        &exp.solution,
        outcome.policy.as_ref(),
        &exp.partition,
        delta0,
        config.seed ^ 0xC0,
    )?;
    let mut comparison_csv = Vec::new();
    write_comparison_csv(&mut comparison_csv, &rows)?;
    fs::write(out_dir.join("comparison.csv"), comparison_csv)?;

    let run_report = RunReport {
        scale: &config.scale,
        seed: config.seed,
        deterministic: config.deterministic,
        delta0,
        delta0_converged,
        report: &outcome.report,
        final_rse: rse_report.rse,
    };
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&run_report)?,
    )?;
    write_manifest(out_dir)?;
    println!(
        "artifacts in {} ({:.1}s)",
        out_dir.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, config: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    let partition = config.partition().map_err(|e| CliError::Config(e.to_string()))?;
    let (meta, stages) =
        load_checkpoint(checkpoint, &partition).map_err(|e| CliError::Config(format!("{e:#}")))?;
    check_compatibility(&meta, config).map_err(|e| CliError::Config(format!("{e:#}")))?;
    cmd_evaluate_inner(config, meta, stages, out_dir).map_err(CliError::runtime)
}

fn cmd_evaluate_inner(
    config: &ExperimentConfig,
    meta: CheckpointMeta,
    stages: Vec<PlayersNets>,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let exp = setup(config)?;
    let delta0 = meta.delta0;
    // rebuild the stage policy chain
    let base: Arc<dyn Policy> = Arc::new(ZeroPolicy {
        n_players: exp.game.n_players,
        d_alpha: exp.game.d_alpha,
    });
    let mut policy = StagePolicy::initial(Arc::clone(&exp.game), base);
    for nets in stages {
        policy = policy.extend(nets);
    }
    let final_nets = policy
        .last_nets()
        .ok_or_else(|| anyhow!("checkpoint has no stages"))?;

    let gt = GroundTruthConfig {
        j_paths: config.evaluation.rse_paths,
        seed: config.seed ^ 0x65E,
        partition: exp.partition.clone(),
        delta0,
    };
    let rse_report = rse_of_nets(&exp.game, &exp.solution, final_nets.primary(), &gt)?;
    let mut rse_csv = Vec::new();
    rse_report.write_csv(&mut rse_csv)?;
    fs::write(out_dir.join("rse.csv"), rse_csv)?;
    println!("RSE: {:.4}%", rse_report.rse * 100.0);

    // exploitability of player 1 under the stored policy
    let policy_dyn: Arc<dyn Policy> = policy;
    let gap_config = GapConfig {
        train: {
            let mut t = config.train_config();
            t.steps = config.evaluation.gap_train_steps;
            t
        },
        net: config.net_config(),
        partition: exp.partition.clone(),
        delta0,
        eval_batch: config.evaluation.gap_eval_batch,
        seed: config.seed ^ 0x6A9,
    };
    let gap = eps_nash_gap(&exp.game, &policy_dyn, 0, &gap_config)?;
    println!(
        "eps-Nash gap (player 1): {:.3e} +- {:.3e}",
        gap.gap, gap.stderr
    );
    fs::write(out_dir.join("gap.json"), serde_json::to_string_pretty(&gap)?)?;

    let rows = path_comparison(
        &exp.game,
        &exp.solution,
        policy_dyn.as_ref(),
        &exp.partition,
        delta0,
        config.seed ^ 0xC0,
    )?;
    let mut comparison_csv = Vec::new();
    write_comparison_csv(&mut comparison_csv, &rows)?;
    fs::write(out_dir.join("comparison.csv"), comparison_csv)?;
    write_manifest(out_dir)?;
    Ok(())
}

fn write_riccati_csv<W: std::io::Write>(mut out: W, solution: &RiccatiSolution) -> Result<()> {
    writeln!(out, "t,eta,mu")?;
    for ((t, eta), mu) in solution
        .grid
        .iter()
        .zip(solution.eta.iter())
        .zip(solution.mu.iter())
    {
        writeln!(out, "{t},{eta},{mu}")?;
    }
    Ok(())
}

fn cmd_riccati(config: &ExperimentConfig, out: Option<&Path>, grid: usize) -> Result<()> {
    let solution = riccati_solve(&config.game.params, grid)?;
    match out {
        Some(path) => {
            let mut buffer = Vec::new();
            write_riccati_csv(&mut buffer, &solution)?;
            fs::write(path, buffer)?;
        }
        None => {
            let stdout = std::io::stdout();
            write_riccati_csv(stdout.lock(), &solution)?;
        }
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let reports = dfp::nn::gradient_check_suite()?;
    println!(
        "{:<22} {:>8} {:>14} {:>14}",
        "configuration", "params", "max rel err", "max abs err"
    );
    let mut worst = 0.0f64;
    for report in &reports {
        println!(
            "{:<22} {:>8} {:>14.3e} {:>14.3e}",
            report.label, report.n_params, report.max_rel_err, report.max_abs_err
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst >= 1e-5 {
        bail!("gradient check failed: max relative error {worst:.3e} >= 1e-5");
    }
    println!("all gradients within 1e-5 of finite differences");
    Ok(())
}

fn cmd_bench(deterministic: bool) -> Result<()> {
    println!("deterministic mode: {deterministic}");
    for preset in ["ci", "full"] {
        let config = ExperimentConfig::preset(preset).map_err(|e| anyhow!(e))?;
        let exp = setup(&config)?;
        let zero: Arc<dyn Policy> = Arc::new(ZeroPolicy {
            n_players: exp.game.n_players,
            d_alpha: exp.game.d_alpha,
        });
        let prev = StagePolicy::initial(Arc::clone(&exp.game), zero);
        let problems: Vec<_> = (0..1)
            .map(|i| {
                dfp::driver::stage_problem(
                    &exp.game,
                    &prev,
                    i,
                    config.dfp.mode,
                    &exp.partition,
                )
            })
            .collect();
        let mut nets = PlayersNets::Shared(dfp::bsde::StageNets::new(
            exp.game.state_dim,
            exp.game.noise_dim,
            &exp.partition,
            &config.net_config(),
        ));
        let mut train_config = config.train_config();
        let steps = 20;
        train_config.steps = steps;
        train_config.eval_every = 0;
        let game = Arc::clone(&exp.game);
        let partition = exp.partition.clone();
        let batch = config.train.batch;
        let mut source = move |step: u64| {
            let x0 = dfp::sde::sample_initial(0.75, game.state_dim, batch, step ^ 0xBE7C)?;
            dfp::sde::simulate_driftless(&game, &partition, x0.view(), step ^ 0x17)
        };
        let t0 = Instant::now();
        dfp::bsde::train(&problems, &mut nets, &train_config, &mut source, None)?;
        let per_step = t0.elapsed().as_secs_f64() / steps as f64;
        println!(
            "{preset:>5}: {:.1} ms/step, {:.2} steps/s (batch {batch})",
            per_step * 1e3,
            1.0 / per_step
        );
    }
    Ok(())
}
