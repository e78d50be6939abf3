//! Experiment plans: a scenario template expanded over a measurement grid,
//! a set of algorithms, and seeded trials, emitting per-trial and summary
//! CSV tables. Cell seeds derive from (master_seed, scenario, m, algorithm,
//! trial), so any single cell can be re-run in isolation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use momcs_core::seeds::{self, tag};
use momcs_core::{
    recover, synthesize, Algorithm, CorruptionSpec, Ensemble, Error, GeneratorNet, LatentVector,
    NoiseKind, NoiseSpec, OptimizerKind, RecoveryConfig, RecoveryReport,
};

use crate::config::Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    CleanGaussian,
    HeavyTailed,
    Corrupted,
}

impl Scenario {
    pub fn id(self) -> u64 {
        match self {
            Scenario::CleanGaussian => 0,
            Scenario::HeavyTailed => 1,
            Scenario::Corrupted => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::CleanGaussian => "clean_gaussian",
            Scenario::HeavyTailed => "heavy_tailed",
            Scenario::Corrupted => "corrupted",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "clean_gaussian" => Ok(Scenario::CleanGaussian),
            "heavy_tailed" => Ok(Scenario::HeavyTailed),
            "corrupted" => Ok(Scenario::Corrupted),
            other => Err(anyhow!(
                "key `plan.scenario`: unknown scenario `{other}` \
                 (expected clean_gaussian, heavy_tailed, or corrupted)"
            )),
        }
    }

    fn default_ensemble(self) -> Ensemble {
        match self {
            Scenario::HeavyTailed => Ensemble::StudentT { dof: 4.0 },
            _ => Ensemble::Gaussian,
        }
    }

    fn default_noise(self) -> &'static str {
        match self {
            Scenario::HeavyTailed => "student_t:3",
            _ => "gaussian",
        }
    }

    fn default_sigma(self) -> f64 {
        match self {
            Scenario::HeavyTailed => 1.0,
            _ => 0.1,
        }
    }

    fn default_epsilon(self) -> f64 {
        match self {
            Scenario::Corrupted => 0.02,
            _ => 0.0,
        }
    }

    fn default_m_grid(self) -> Vec<usize> {
        match self {
            Scenario::CleanGaussian => vec![200],
            Scenario::HeavyTailed => vec![100, 200, 300, 400],
            Scenario::Corrupted => vec![1000],
        }
    }

    fn default_num_batches(self) -> usize {
        match self {
            Scenario::CleanGaussian => 20,
            Scenario::HeavyTailed => 10,
            Scenario::Corrupted => 40,
        }
    }
}

pub fn parse_algorithm(token: &str, default_keep: f64) -> Result<Algorithm> {
    if let Some(rest) = token.strip_prefix("trimmed:") {
        let keep: f64 = rest
            .parse()
            .map_err(|e| anyhow!("algorithm `{token}`: bad keep fraction: {e}"))?;
        return Ok(Algorithm::Trimmed { keep_fraction: keep });
    }
    match token {
        "erm" => Ok(Algorithm::Erm),
        "l1" => Ok(Algorithm::L1),
        "trimmed" => Ok(Algorithm::Trimmed {
            keep_fraction: default_keep,
        }),
        "mom_direct" => Ok(Algorithm::MomDirect),
        "mom_tournament" => Ok(Algorithm::MomTournament),
        other => Err(anyhow!(
            "unknown algorithm `{other}` \
             (expected erm, l1, trimmed[:keep], mom_direct, or mom_tournament)"
        )),
    }
}

pub fn algorithm_label(algorithm: Algorithm) -> &'static str {
    match algorithm {
        Algorithm::Erm => "erm",
        Algorithm::L1 => "l1",
        Algorithm::Trimmed { .. } => "trimmed",
        Algorithm::MomDirect => "mom_direct",
        Algorithm::MomTournament => "mom_tournament",
    }
}

pub fn algorithm_id(algorithm: Algorithm) -> u64 {
    match algorithm {
        Algorithm::Erm => 0,
        Algorithm::L1 => 1,
        Algorithm::Trimmed { .. } => 2,
        Algorithm::MomDirect => 3,
        Algorithm::MomTournament => 4,
    }
}

fn uses_batches(algorithm: Algorithm) -> bool {
    matches!(algorithm, Algorithm::MomDirect | Algorithm::MomTournament)
}

pub fn parse_optimizer(token: &str) -> Result<OptimizerKind> {
    if token == "plain" {
        return Ok(OptimizerKind::PlainGd);
    }
    if let Some(rest) = token.strip_prefix("momentum:") {
        let beta: f64 = rest
            .parse()
            .map_err(|e| anyhow!("optimizer `{token}`: bad beta: {e}"))?;
        return Ok(OptimizerKind::Momentum { beta });
    }
    if token == "adam" {
        return Ok(OptimizerKind::adaptive());
    }
    if let Some(rest) = token.strip_prefix("adam:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            bail!("optimizer `{token}`: expected adam:beta1:beta2:epsilon");
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| anyhow!("optimizer `{token}`: bad number `{s}`: {e}"))
        };
        return Ok(OptimizerKind::AdaptiveMoment {
            beta1: parse(parts[0])?,
            beta2: parse(parts[1])?,
            epsilon: parse(parts[2])?,
        });
    }
    Err(anyhow!(
        "unknown optimizer `{token}` (expected plain, momentum:beta, adam, or adam:b1:b2:eps)"
    ))
}

pub fn parse_corruption(token: &str) -> Result<CorruptionSpec> {
    match token {
        "sign_row_and_neg_one" => Ok(CorruptionSpec::SignRowAndNegOne),
        "measurement_only" => Ok(CorruptionSpec::MeasurementOnly),
        "matrix_row_only" => Ok(CorruptionSpec::MatrixRowOnly),
        other => Err(anyhow!(
            "unknown corruption `{other}` (expected sign_row_and_neg_one, \
             measurement_only, or matrix_row_only)"
        )),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub scenario: Scenario,
    pub net: GeneratorNet,
    pub m_grid: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub trials: usize,
    pub master_seed: u64,
    pub ensemble: Ensemble,
    pub noise: NoiseSpec,
    pub epsilon: f64,
    pub corruption: CorruptionSpec,
    /// Template applied to every cell; algorithm, batch count, and seed are
    /// filled in per cell.
    pub template: RecoveryConfig,
    pub num_batches: usize,
}

impl ExperimentPlan {
    /// Builds and fully validates a plan. All field errors surface here,
    /// before any trial runs.
    pub fn from_config(config: &Config) -> Result<Self> {
        let scenario = Scenario::from_label(
            config
                .get("plan", "scenario")
                .unwrap_or("clean_gaussian"),
        )?;
        let trials: usize = config.get_or("plan", "trials", 20)?;
        if trials == 0 {
            bail!("key `plan.trials`: must be positive");
        }
        let master_seed: u64 = config.get_or("plan", "master_seed", 0)?;
        let m_grid: Vec<usize> = config
            .list("plan", "m_grid")?
            .unwrap_or_else(|| scenario.default_m_grid());
        if m_grid.is_empty() {
            bail!("key `plan.m_grid`: must list at least one measurement count");
        }

        let net = load_generator(config)?;

        let ensemble: Ensemble = match config.get("problem", "ensemble") {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow!("key `problem.ensemble`: {e}"))?,
            None => scenario.default_ensemble(),
        };
        let noise_kind: NoiseKind = config
            .get("problem", "noise")
            .unwrap_or(scenario.default_noise())
            .parse()
            .map_err(|e| anyhow!("key `problem.noise`: {e}"))?;
        let sigma: f64 = config.get_or("problem", "sigma", scenario.default_sigma())?;
        let noise = NoiseSpec::new(noise_kind, sigma)
            .map_err(|e| anyhow!("key `problem.sigma`: {e}"))?;
        let epsilon: f64 = config.get_or("problem", "epsilon", scenario.default_epsilon())?;
        if !(0.0..1.0).contains(&epsilon) {
            bail!("key `problem.epsilon`: {epsilon} not in [0, 1)");
        }
        let corruption = parse_corruption(
            config
                .get("problem", "corruption")
                .unwrap_or("sign_row_and_neg_one"),
        )
        .map_err(|e| anyhow!("key `problem.corruption`: {e}"))?;

        let default_keep: f64 = config.get_or("algorithms", "keep_fraction", 0.8)?;
        let tokens: Vec<String> = config
            .list("algorithms", "list")?
            .unwrap_or_else(|| vec!["erm".to_string(), "mom_tournament".to_string()]);
        if tokens.is_empty() {
            bail!("key `algorithms.list`: must name at least one algorithm");
        }
        let algorithms = tokens
            .iter()
            .map(|t| parse_algorithm(t, default_keep).map_err(|e| anyhow!("key `algorithms.list`: {e}")))
            .collect::<Result<Vec<_>>>()?;

        let num_batches: usize =
            config.get_or("recovery", "num_batches", scenario.default_num_batches())?;
        let mut template = RecoveryConfig::new(Algorithm::Erm);
        template.num_batches = num_batches;
        template.iterations = config.get_or("recovery", "iterations", 1000)?;
        template.restarts = config.get_or("recovery", "restarts", 2)?;
        template.step_size = config.get_or("recovery", "step_size", 0.05)?;
        template.init_scale = config.get_or("recovery", "init_scale", 1.0)?;
        template.reshuffle_each_iter = config.get_or("recovery", "reshuffle_each_iter", false)?;
        template.inner_ascent_steps = config.get_or("recovery", "inner_ascent_steps", 1)?;
        template.stop_tol = config.get_or("recovery", "stop_tol", 0.0)?;
        template.optimizer = parse_optimizer(config.get("recovery", "optimizer").unwrap_or("adam"))
            .map_err(|e| anyhow!("key `recovery.optimizer`: {e}"))?;
        template
            .validate()
            .map_err(|e| anyhow!("section `recovery`: {e}"))?;

        let plan = ExperimentPlan {
            scenario,
            net,
            m_grid,
            algorithms,
            trials,
            master_seed,
            ensemble,
            noise,
            epsilon,
            corruption,
            template,
            num_batches,
        };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        for &m in &self.m_grid {
            if m == 0 {
                bail!("key `plan.m_grid`: zero measurement count");
            }
            for &algorithm in &self.algorithms {
                if uses_batches(algorithm) && m % self.num_batches != 0 {
                    bail!(
                        "key `recovery.num_batches`: {} does not divide m={m}",
                        self.num_batches
                    );
                }
            }
        }
        Ok(())
    }

    fn cell_config(&self, algorithm: Algorithm, seed: u64) -> RecoveryConfig {
        let mut config = self.template.clone();
        config.algorithm = algorithm;
        // Algorithms without batches still validate; keep M=1 for them so
        // indivisible grids do not reject ERM cells.
        config.num_batches = if uses_batches(algorithm) {
            self.num_batches
        } else {
            1
        };
        config.seed = seed;
        config
    }

    fn run_cell(&self, m: usize, algorithm: Algorithm, trial: usize) -> Result<BenchRow> {
        let seed = seeds::derive(
            self.master_seed,
            &[self.scenario.id(), m as u64, algorithm_id(algorithm), trial as u64],
        );
        let mut latent_rng = seeds::rng(seed, &[tag::LATENT]);
        let z_star =
            LatentVector::standard_normal(self.net.input_dim(), 1.0, &mut latent_rng);
        let problem = synthesize(
            &self.net,
            &z_star,
            m,
            self.ensemble,
            self.noise,
            self.epsilon,
            self.corruption,
            seed,
        )
        .with_context(|| format!("synthesizing cell m={m} trial={trial}"))?;
        let config = self.cell_config(algorithm, seed);
        let started = Instant::now();
        match recover(&problem, &self.net, &config) {
            Ok(report) => Ok(BenchRow {
                scenario: self.scenario.label(),
                m,
                algorithm: algorithm_label(algorithm),
                algorithm_id: algorithm_id(algorithm),
                num_batches: config.num_batches,
                trial,
                recon_error_per_pixel: report.recon_error_per_pixel,
                final_objective: report.final_objective,
                iterations: config.iterations,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                diverged_restarts: report.diverged_restarts.len(),
                total_restarts: config.restarts,
            }),
            // A fully diverged cell is data, not a crash.
            Err(Error::AllRestartsDiverged { restarts }) => Ok(BenchRow {
                scenario: self.scenario.label(),
                m,
                algorithm: algorithm_label(algorithm),
                algorithm_id: algorithm_id(algorithm),
                num_batches: config.num_batches,
                trial,
                recon_error_per_pixel: f64::NAN,
                final_objective: f64::NAN,
                iterations: config.iterations,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                diverged_restarts: restarts,
                total_restarts: restarts,
            }),
            Err(e) => Err(e).with_context(|| format!("recovering cell m={m} trial={trial}")),
        }
    }

    /// Runs every (m, algorithm, trial) cell, in parallel, and returns rows
    /// sorted by (m, algorithm, trial) so output is order-independent.
    pub fn run(&self) -> Result<BenchTable> {
        let mut cells = Vec::new();
        for &m in &self.m_grid {
            for &algorithm in &self.algorithms {
                for trial in 0..self.trials {
                    cells.push((m, algorithm, trial));
                }
            }
        }
        let mut rows = cells
            .par_iter()
            .map(|&(m, algorithm, trial)| self.run_cell(m, algorithm, trial))
            .collect::<Result<Vec<_>>>()?;
        rows.sort_by_key(|r| (r.m, r.algorithm_id, r.trial));
        Ok(BenchTable {
            master_seed: self.master_seed,
            rows,
        })
    }
}

fn load_generator(config: &Config) -> Result<GeneratorNet> {
    if let Some(path) = config.get("generator", "weights") {
        return GeneratorNet::load(Path::new(path))
            .map_err(|e| anyhow!("key `generator.weights`: {e}"));
    }
    let dims: Vec<usize> = config
        .list("generator", "dims")?
        .unwrap_or_else(|| vec![5, 50, 100]);
    let seed: u64 = config.get_or("generator", "seed", 1)?;
    let scale: f64 = config.get_or("generator", "scale", 1.0)?;
    let final_relu: bool = config.get_or("generator", "final_relu", false)?;
    let net = if final_relu {
        GeneratorNet::random_with_final_relu(&dims, seed, scale)
    } else {
        GeneratorNet::random(&dims, seed, scale)
    };
    net.map_err(|e| anyhow!("key `generator.dims`: {e}"))
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub scenario: &'static str,
    pub m: usize,
    pub algorithm: &'static str,
    pub algorithm_id: u64,
    pub num_batches: usize,
    pub trial: usize,
    pub recon_error_per_pixel: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub wall_ms: f64,
    pub diverged_restarts: usize,
    pub total_restarts: usize,
}

impl BenchRow {
    fn diverged(&self) -> bool {
        self.diverged_restarts == self.total_restarts
    }
}

#[derive(Debug, Clone)]
pub struct BenchTable {
    pub master_seed: u64,
    pub rows: Vec<BenchRow>,
}

pub const BENCH_HEADER: &str =
    "scenario,m,algorithm,M,trial,recon_error_per_pixel,final_objective,iterations,wall_ms,diverged";

pub const SUMMARY_HEADER: &str = "scenario,m,algorithm,M,trials,mean_recon_error_per_pixel,\
ci95_recon_error_per_pixel,mean_final_objective,mean_wall_ms,diverged_trials";

fn file_header(master_seed: u64) -> String {
    format!(
        "# master_seed = {master_seed}\n# version = {}\n",
        env!("CARGO_PKG_VERSION")
    )
}

impl BenchTable {
    pub fn per_trial_csv(&self) -> String {
        let mut out = file_header(self.master_seed);
        out.push_str(BENCH_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.scenario,
                r.m,
                r.algorithm,
                r.num_batches,
                r.trial,
                r.recon_error_per_pixel,
                r.final_objective,
                r.iterations,
                r.wall_ms,
                r.diverged(),
            )
            .expect("string write");
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = file_header(self.master_seed);
        out.push_str(SUMMARY_HEADER);
        out.push('\n');
        let mut seen: Vec<(usize, u64)> = Vec::new();
        for r in &self.rows {
            if seen.contains(&(r.m, r.algorithm_id)) {
                continue;
            }
            seen.push((r.m, r.algorithm_id));
            let cell: Vec<&BenchRow> = self
                .rows
                .iter()
                .filter(|x| x.m == r.m && x.algorithm_id == r.algorithm_id)
                .collect();
            let good: Vec<f64> = cell
                .iter()
                .filter(|x| !x.diverged())
                .map(|x| x.recon_error_per_pixel)
                .collect();
            let diverged_trials = cell.len() - good.len();
            let (mean, ci) = mean_ci95(&good);
            let mean_obj = mean_of(
                &cell
                    .iter()
                    .filter(|x| !x.diverged())
                    .map(|x| x.final_objective)
                    .collect::<Vec<_>>(),
            );
            let mean_wall = mean_of(&cell.iter().map(|x| x.wall_ms).collect::<Vec<_>>());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.scenario,
                r.m,
                r.algorithm,
                r.num_batches,
                cell.len(),
                mean,
                ci,
                mean_obj,
                mean_wall,
                diverged_trials,
            )
            .expect("string write");
        }
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let per_trial = out_dir.join("bench.csv");
        let summary = out_dir.join("summary.csv");
        std::fs::write(&per_trial, self.per_trial_csv())
            .with_context(|| format!("writing {}", per_trial.display()))?;
        std::fs::write(&summary, self.summary_csv())
            .with_context(|| format!("writing {}", summary.display()))?;
        Ok((per_trial, summary))
    }
}

fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and half-width of the normal-approximation 95% confidence interval.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Per-iteration trace CSV for error-vs-iteration and error-vs-time plots.
pub fn emit_trace(report: &RecoveryReport, seed: u64, path: &Path) -> Result<()> {
    let mut out = format!(
        "# seed = {seed}\n# version = {}\n",
        env!("CARGO_PKG_VERSION")
    );
    out.push_str("iteration,objective,recon_error_per_pixel,elapsed_seconds\n");
    for p in &report.trace {
        writeln!(
            out,
            "{},{},{},{}",
            p.iteration, p.objective, p.recon_error_per_pixel, p.elapsed_seconds
        )
        .expect("string write");
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
