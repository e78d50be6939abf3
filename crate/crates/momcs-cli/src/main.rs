//! Experiment harness for the recovery laboratory: generate nets, synthesize
//! problems, run single recoveries, sweep benchmark grids, and drive the
//! lemma-check suite.

mod config;
mod plan;
mod theory;

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use momcs_core::seeds::{self, tag};
use momcs_core::{
    recover, recover_with_validation, synthesize, GeneratorNet, LatentVector, NoiseSpec,
    RecoveryConfig, SensingProblem, ValidationSet,
};

use config::Config;
use plan::ExperimentPlan;

#[derive(Parser)]
#[command(
    name = "momcs",
    version,
    about = "Robust compressed sensing under a generative prior: median-of-means \
             tournament recovery, baselines, and statistical lemma checks"
)]
struct Cli {
    /// Worker threads for trial-parallel commands (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a random generator net and save its weights.
    Gen(GenArgs),
    /// Synthesize a measurement problem from a saved net.
    Synth(SynthArgs),
    /// Recover the latent code for one saved problem.
    Recover(RecoverArgs),
    /// Run an experiment plan over (m, algorithm, trial) cells.
    Bench(BenchArgs),
    /// Run the lemma-check suite; nonzero exit if any check fails.
    Theory(TheoryArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Layer dimensions, latent first, e.g. 5,50,100.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight std is scale/sqrt(fan_in).
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Apply a ReLU after the last layer too.
    #[arg(long)]
    final_relu: bool,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator weight file.
    #[arg(long)]
    net: PathBuf,
    /// Number of measurement rows.
    #[arg(long)]
    m: usize,
    /// gaussian or student_t:DOF.
    #[arg(long, default_value = "gaussian")]
    ensemble: String,
    /// gaussian or student_t:DOF.
    #[arg(long, default_value = "gaussian")]
    noise: String,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Corrupted-row fraction.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// sign_row_and_neg_one, measurement_only, or matrix_row_only.
    #[arg(long, default_value = "sign_row_and_neg_one")]
    corruption: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output problem directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    /// Problem directory from `synth`.
    #[arg(long)]
    problem: PathBuf,
    /// Generator weight file.
    #[arg(long)]
    net: PathBuf,
    /// erm, l1, trimmed[:keep], mom_direct, or mom_tournament.
    #[arg(long, default_value = "mom_tournament")]
    algorithm: String,
    /// Batch count M for the median algorithms.
    #[arg(long, default_value_t = 20)]
    batches: usize,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    /// plain, momentum:beta, adam, or adam:b1:b2:eps.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Redraw the batch partition every iteration.
    #[arg(long)]
    reshuffle: bool,
    /// Tournament ablation: inner ascent steps per iteration.
    #[arg(long, default_value_t = 1)]
    inner_ascent_steps: usize,
    /// Write the per-iteration trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Dump G(z_hat), one value per line.
    #[arg(long)]
    dump_reconstruction: Option<PathBuf>,
    /// Problem directory with held-out measurements for restart selection.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Batch count for validation scoring.
    #[arg(long, default_value_t = 10)]
    validation_batches: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Plan config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key: section.key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed override (same as --set plan.master_seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for bench.csv and summary.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Suite config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key: section.key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override (same as --set theory.seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the report rows to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // A second builder call in-process is harmless; the pool is built
        // once per run.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let outcome = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Recover(args) => cmd_recover(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Theory(args) => cmd_theory(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<i32> {
    let net = if args.final_relu {
        GeneratorNet::random_with_final_relu(&args.dims, args.seed, args.scale)
    } else {
        GeneratorNet::random(&args.dims, args.seed, args.scale)
    }?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    net.save(&args.out)?;
    println!(
        "wrote generator dims={:?} final_relu={} seed={} to {}",
        net.dims(),
        args.final_relu,
        args.seed,
        args.out.display()
    );
    Ok(0)
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let net = GeneratorNet::load(&args.net)?;
    let ensemble = args
        .ensemble
        .parse()
        .map_err(|e| anyhow!("--ensemble: {e}"))?;
    let noise_kind = args.noise.parse().map_err(|e| anyhow!("--noise: {e}"))?;
    let noise = NoiseSpec::new(noise_kind, args.sigma)?;
    let corruption = plan::parse_corruption(&args.corruption)?;
    let mut rng = seeds::rng(args.seed, &[tag::LATENT]);
    let z_star = LatentVector::standard_normal(net.input_dim(), 1.0, &mut rng);
    let problem = synthesize(
        &net,
        &z_star,
        args.m,
        ensemble,
        noise,
        args.epsilon,
        corruption,
        args.seed,
    )?;
    problem.save_dir(&args.out)?;
    println!(
        "wrote problem m={} n={} sigma={} epsilon={} corrupted_rows={} seed={} to {}",
        problem.m(),
        problem.n(),
        problem.sigma(),
        problem.epsilon(),
        problem.corrupted_rows().len(),
        args.seed,
        args.out.display()
    );
    Ok(0)
}

fn cmd_recover(args: RecoverArgs) -> Result<i32> {
    let net = GeneratorNet::load(&args.net)?;
    let problem = SensingProblem::load_dir(&args.problem)?;
    let mut config = RecoveryConfig::new(plan::parse_algorithm(&args.algorithm, 0.8)?);
    config.num_batches = args.batches;
    config.iterations = args.iterations;
    config.restarts = args.restarts;
    config.step_size = args.step_size;
    config.optimizer = plan::parse_optimizer(&args.optimizer)?;
    config.init_scale = args.init_scale;
    config.seed = args.seed;
    config.reshuffle_each_iter = args.reshuffle;
    config.inner_ascent_steps = args.inner_ascent_steps;

    let report = match &args.validation {
        Some(dir) => {
            let held_out = SensingProblem::load_dir(dir)?;
            let validation = ValidationSet::new(held_out, args.validation_batches)?;
            recover_with_validation(&problem, &net, &config, &validation)?
        }
        None => recover(&problem, &net, &config)?,
    };

    if let Some(path) = &args.trace {
        plan::emit_trace(&report, args.seed, path)?;
    }
    if let Some(path) = &args.dump_reconstruction {
        let mut out = String::new();
        for v in report.reconstruction.iter() {
            writeln!(out, "{v}").expect("string write");
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "algorithm={} final_objective={} recon_error_per_pixel={} restart={} \
         diverged_restarts={} iterations={} wall_ms={}",
        args.algorithm,
        report.final_objective,
        report.recon_error_per_pixel,
        report.restart_index_chosen,
        report.diverged_restarts.len(),
        args.iterations,
        report.wall_time.as_secs_f64() * 1e3,
    );
    Ok(0)
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<Config> {
    let mut config = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for assignment in overrides {
        config.set(assignment)?;
    }
    Ok(config)
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let mut config = load_config(&args.config, &args.set)?;
    if let Some(seed) = args.seed {
        config.set(&format!("plan.master_seed={seed}"))?;
    }
    let plan = ExperimentPlan::from_config(&config)?;
    let table = plan.run()?;
    let (per_trial, summary) = table.write(&args.out)?;
    println!(
        "wrote {} rows to {} (summary {})",
        table.rows.len(),
        per_trial.display(),
        summary.display()
    );
    Ok(0)
}

fn cmd_theory(args: TheoryArgs) -> Result<i32> {
    let mut config = load_config(&args.config, &args.set)?;
    if let Some(seed) = args.seed {
        config.set(&format!("theory.seed={seed}"))?;
    }
    let lemma = theory::lemma_config(&config)?;
    let outcome = theory::run_suite(&lemma)?;
    let mut text = format!(
        "# seed = {}\n# version = {}\n",
        lemma.seed,
        env!("CARGO_PKG_VERSION")
    );
    for row in &outcome.rows {
        text.push_str(row);
        text.push('\n');
    }
    print!("{text}");
    if let Some(path) = &args.out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if outcome.all_passed { 0 } else { 1 })
}
