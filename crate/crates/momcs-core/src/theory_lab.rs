//! Monte-Carlo oracles for the statistical claims behind the recovery
//! pipeline: the 4-sigma^2 bound on the median batch loss at the planted
//! code, the per-batch restricted-eigenvalue (small-ball) property, the
//! noise-measurement multiplier bound, and the classical 1-D median-of-means
//! estimator.
//!
//! Every check runs `trials` independent experiments from per-trial seed
//! streams and reports the fraction that satisfied the claim. Reports are
//! bit-reproducible from their seed. Constants like the eigenvalue level
//! `gamma` and the batch size are calibrated empirically by sweeping, never
//! asserted a priori.
//!
//! Trial counts are sized so thresholds discriminate sharply: at 200 trials
//! a true pass probability of 0.99 dips below a 0.95 threshold with
//! probability under 1e-5 (binomial tail), and 100 trials stay under 1e-3.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::generator::{GeneratorNet, LatentVector};
use crate::objectives::{self, make_partition, BatchPartition};
use crate::seeds::{self, tag};
use crate::sensing::{sample_measurement_matrix, synthesize, CorruptionSpec, Ensemble, NoiseSpec};

/// Shared knobs for the lemma checks. `m = num_batches * batch_size` rows per
/// trial; `n` is signal dimension, `k` latent dimension.
#[derive(Debug, Clone, Copy)]
pub struct LemmaCheckConfig {
    pub trials: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub num_batches: usize,
    pub ensemble: Ensemble,
    pub noise: NoiseSpec,
    /// Directions (or latents) sampled per trial; the trial statistic is the
    /// worst direction.
    pub direction_samples: usize,
    /// Candidate restricted-eigenvalue level for the small-ball check.
    pub gamma: f64,
    /// Fraction of batches that must satisfy the per-batch inequality for a
    /// direction to count as passing (0.9 in the claims).
    pub batch_pass_fraction: f64,
    /// Fraction of trials that must pass for the whole check to pass.
    pub pass_rate_target: f64,
    pub seed: u64,
}

impl Default for LemmaCheckConfig {
    fn default() -> Self {
        LemmaCheckConfig {
            trials: 200,
            m: 200,
            n: 20,
            k: 4,
            num_batches: 20,
            ensemble: Ensemble::Gaussian,
            noise: NoiseSpec::gaussian(1.0).expect("valid sigma"),
            direction_samples: 100,
            gamma: 0.4,
            batch_pass_fraction: 0.9,
            pass_rate_target: 0.95,
            seed: 0,
        }
    }
}

impl LemmaCheckConfig {
    pub fn batch_size(&self) -> usize {
        self.m / self.num_batches
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials", "must be positive"));
        }
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(Error::invalid("dims", "m, n, k must be positive"));
        }
        if self.num_batches == 0 || self.m % self.num_batches != 0 {
            return Err(Error::IndivisibleBatches {
                count: self.m,
                batches: self.num_batches,
            });
        }
        if self.direction_samples == 0 {
            return Err(Error::invalid("direction_samples", "must be positive"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid("gamma", format!("{}", self.gamma)));
        }
        for (name, v) in [
            ("batch_pass_fraction", self.batch_pass_fraction),
            ("pass_rate_target", self.pass_rate_target),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(name, format!("{v} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// One Monte-Carlo experiment. `statistic` is the quantity compared against
/// the claim's threshold: the median batch loss for the objective bound, the
/// worst passing-batch fraction for the batchwise checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub passed: bool,
    pub statistic: f64,
    /// Index of the direction attaining the worst fraction, when the check
    /// samples directions.
    pub worst_direction: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaCheckReport {
    pub check: &'static str,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub num_batches: usize,
    /// Named constants the check depended on (gamma, sigma, bounds).
    pub constants: Vec<(&'static str, f64)>,
    pub pass_rate: f64,
    pub pass_rate_target: f64,
    pub trials: Vec<TrialOutcome>,
    pub seed: u64,
}

impl LemmaCheckReport {
    fn from_trials(
        check: &'static str,
        config: &LemmaCheckConfig,
        constants: Vec<(&'static str, f64)>,
        trials: Vec<TrialOutcome>,
    ) -> Self {
        let passed = trials.iter().filter(|t| t.passed).count();
        LemmaCheckReport {
            check,
            m: config.m,
            n: config.n,
            k: config.k,
            num_batches: config.num_batches,
            constants,
            pass_rate: passed as f64 / trials.len() as f64,
            pass_rate_target: config.pass_rate_target,
            trials,
            seed: config.seed,
        }
    }

    pub fn passed(&self) -> bool {
        self.pass_rate >= self.pass_rate_target
    }

    /// One structured text row: check name, dims, constants, pass rate, seed.
    pub fn row(&self) -> String {
        let mut row = format!(
            "check={} m={} n={} k={} M={} b={} trials={} pass_rate={} target={} seed={}",
            self.check,
            self.m,
            self.n,
            self.k,
            self.num_batches,
            self.m / self.num_batches,
            self.trials.len(),
            self.pass_rate,
            self.pass_rate_target,
            self.seed,
        );
        for (name, value) in &self.constants {
            row.push_str(&format!(" {name}={value}"));
        }
        row
    }
}

/// Where the test directions for the small-ball check come from: differences
/// of generator outputs at random latents (the operative set), or random
/// vectors in a random 2k-dimensional subspace (the linear reduction).
#[derive(Debug, Clone, Copy)]
pub enum DirectionSource<'a> {
    Generator(&'a GeneratorNet),
    Subspace,
}

/// Median batch loss at the planted code stays below `4 sigma^2`.
///
/// The residual at `z*` is exactly the noise, so the statistic reduces to
/// the median over batches of the per-batch mean of `eta^2`.
pub fn check_objective_bound(config: &LemmaCheckConfig) -> Result<LemmaCheckReport> {
    config.validate()?;
    let sigma = config.noise.sigma();
    let bound = 4.0 * sigma * sigma;
    let partition = make_partition(config.m, config.num_batches, 0, false)?;
    let mut trials = Vec::with_capacity(config.trials);
    for i in 0..config.trials {
        let ts = seeds::derive(config.seed, &[tag::TRIAL, i as u64]);
        let net = GeneratorNet::random(&[config.k, config.n], seeds::derive(ts, &[1]), 1.0)?;
        let mut rng = seeds::rng(ts, &[tag::LATENT]);
        let z_star = LatentVector::standard_normal(config.k, 1.0, &mut rng);
        let problem = synthesize(
            &net,
            &z_star,
            config.m,
            config.ensemble,
            config.noise,
            0.0,
            CorruptionSpec::SignRowAndNegOne,
            seeds::derive(ts, &[2]),
        )?;
        let r = objectives::residuals(&problem, &net, &z_star)?;
        let losses = objectives::batch_losses(&r, &partition);
        let statistic = objectives::lower_median(&losses)?.value;
        trials.push(TrialOutcome {
            passed: statistic <= bound,
            statistic,
            worst_direction: None,
        });
    }
    Ok(LemmaCheckReport::from_trials(
        "objective_bound",
        config,
        vec![("sigma", sigma), ("bound", bound)],
        trials,
    ))
}

/// Fraction of batches on which `(1/b) |A_B v|^2 >= gamma^2 |v|^2`.
///
/// A zero direction passes vacuously on every batch.
pub fn batch_srec_fraction(
    a: &Array2<f64>,
    partition: &BatchPartition,
    v: &Array1<f64>,
    gamma: f64,
) -> f64 {
    let p = a.dot(v);
    let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
    let threshold = gamma * gamma * v_norm_sq;
    let b = partition.batch_size() as f64;
    let mut passing = 0usize;
    for j in 0..partition.num_batches() {
        let energy: f64 = partition.batch(j).iter().map(|&i| p[i] * p[i]).sum();
        if energy / b >= threshold {
            passing += 1;
        }
    }
    passing as f64 / partition.num_batches() as f64
}

/// Fraction of batches on which `(1/b) |eta_B^T A_B v| <= sigma |v|`.
pub fn batch_multiplier_fraction(
    a: &Array2<f64>,
    eta: &Array1<f64>,
    partition: &BatchPartition,
    v: &Array1<f64>,
    sigma: f64,
) -> f64 {
    let p = a.dot(v);
    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bound = sigma * v_norm;
    let b = partition.batch_size() as f64;
    let mut passing = 0usize;
    for j in 0..partition.num_batches() {
        let cross: f64 = partition.batch(j).iter().map(|&i| eta[i] * p[i]).sum();
        if (cross / b).abs() <= bound {
            passing += 1;
        }
    }
    passing as f64 / partition.num_batches() as f64
}

/// Random matrix with orthonormal columns, via modified Gram-Schmidt with a
/// re-orthogonalization pass.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    if cols > rows {
        return Err(Error::invalid(
            "cols",
            format!("{cols} exceeds row dimension {rows}"),
        ));
    }
    let mut basis = Array2::<f64>::zeros((rows, cols));
    for c in 0..cols {
        let mut attempts = 0;
        loop {
            let mut v = Array1::<f64>::zeros(rows);
            for x in v.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            for _ in 0..2 {
                for prev in 0..c {
                    let col = basis.column(prev);
                    let proj = col.dot(&v);
                    v.scaled_add(-proj, &col);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                v /= norm;
                basis.column_mut(c).assign(&v);
                break;
            }
            attempts += 1;
            if attempts > 32 {
                return Err(Error::invalid("basis", "degenerate random draws"));
            }
        }
    }
    Ok(basis)
}

fn draw_direction(
    source: &DirectionSource<'_>,
    subspace: Option<&Array2<f64>>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<f64>> {
    for _ in 0..100 {
        let v = match source {
            DirectionSource::Generator(net) => {
                let k = net.input_dim();
                let z1 = LatentVector::standard_normal(k, 1.0, rng);
                let z2 = LatentVector::standard_normal(k, 1.0, rng);
                net.forward(&z1)? - net.forward(&z2)?
            }
            DirectionSource::Subspace => {
                let basis = subspace.expect("subspace source carries a basis");
                let mut u = Array1::<f64>::zeros(basis.ncols());
                for x in u.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
                basis.dot(&u)
            }
        };
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                context: "direction vs signal dimension",
                expected: n,
                actual: v.len(),
            });
        }
        // Zero directions carry no constraint; skip and redraw.
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-24 {
            return Ok(v);
        }
    }
    Err(Error::invalid(
        "direction",
        "could not sample a nonzero direction in 100 attempts",
    ))
}

/// Per-batch restricted-eigenvalue check: in each trial, every sampled
/// direction must satisfy the `gamma`-level bound on at least
/// `batch_pass_fraction` of the batches.
pub fn check_batch_srec(
    config: &LemmaCheckConfig,
    source: DirectionSource<'_>,
) -> Result<LemmaCheckReport> {
    config.validate()?;
    if let DirectionSource::Generator(net) = source {
        if net.output_dim() != config.n {
            return Err(Error::DimensionMismatch {
                context: "generator output vs configured n",
                expected: config.n,
                actual: net.output_dim(),
            });
        }
    }
    let partition = make_partition(config.m, config.num_batches, 0, false)?;
    let mut trials = Vec::with_capacity(config.trials);
    for i in 0..config.trials {
        let ts = seeds::derive(config.seed, &[tag::TRIAL, i as u64]);
        let a = sample_measurement_matrix(config.m, config.n, config.ensemble, ts)?;
        let subspace = match source {
            DirectionSource::Subspace => {
                let mut rng = seeds::rng(ts, &[1]);
                Some(random_orthonormal(config.n, 2 * config.k, &mut rng)?)
            }
            DirectionSource::Generator(_) => None,
        };
        let mut rng = seeds::rng(ts, &[tag::DIRECTION]);
        let mut worst = f64::INFINITY;
        let mut worst_direction = None;
        for j in 0..config.direction_samples {
            let v = draw_direction(&source, subspace.as_ref(), config.n, &mut rng)?;
            let frac = batch_srec_fraction(&a, &partition, &v, config.gamma);
            if frac < worst {
                worst = frac;
                worst_direction = Some(j);
            }
        }
        trials.push(TrialOutcome {
            passed: worst >= config.batch_pass_fraction,
            statistic: worst,
            worst_direction,
        });
    }
    Ok(LemmaCheckReport::from_trials(
        "batch_srec",
        config,
        vec![
            ("gamma", config.gamma),
            ("batch_pass_fraction", config.batch_pass_fraction),
        ],
        trials,
    ))
}

/// Noise-measurement cross-term check: for directions `G(z) - G(z*)`, the
/// normalized inner product `(1/b)|eta_B^T A_B v|` stays below
/// `sigma |v|` on at least `batch_pass_fraction` of the batches.
pub fn check_multiplier_bound(
    config: &LemmaCheckConfig,
    net: &GeneratorNet,
) -> Result<LemmaCheckReport> {
    config.validate()?;
    if net.output_dim() != config.n {
        return Err(Error::DimensionMismatch {
            context: "generator output vs configured n",
            expected: config.n,
            actual: net.output_dim(),
        });
    }
    let sigma = config.noise.sigma();
    let partition = make_partition(config.m, config.num_batches, 0, false)?;
    let source = DirectionSource::Generator(net);
    let mut trials = Vec::with_capacity(config.trials);
    for i in 0..config.trials {
        let ts = seeds::derive(config.seed, &[tag::TRIAL, i as u64]);
        let a = sample_measurement_matrix(config.m, config.n, config.ensemble, ts)?;
        let mut noise_rng = seeds::rng(ts, &[tag::NOISE]);
        let eta = Array1::from_iter((0..config.m).map(|_| config.noise.sample(&mut noise_rng)));
        let mut rng = seeds::rng(ts, &[tag::DIRECTION]);
        let mut worst = f64::INFINITY;
        let mut worst_direction = None;
        for j in 0..config.direction_samples {
            let v = draw_direction(&source, None, config.n, &mut rng)?;
            let frac = batch_multiplier_fraction(&a, &eta, &partition, &v, sigma);
            if frac < worst {
                worst = frac;
                worst_direction = Some(j);
            }
        }
        trials.push(TrialOutcome {
            passed: worst >= config.batch_pass_fraction,
            statistic: worst,
            worst_direction,
        });
    }
    Ok(LemmaCheckReport::from_trials(
        "multiplier_bound",
        config,
        vec![
            ("sigma", sigma),
            ("batch_pass_fraction", config.batch_pass_fraction),
        ],
        trials,
    ))
}

/// Classical 1-D median-of-means: contiguous batches in sample order, batch
/// means, lower median. `M = 1` reduces to the sample mean.
pub fn mom_mean_1d(samples: &[f64], num_batches: usize) -> Result<f64> {
    if num_batches == 0 || samples.len() % num_batches != 0 {
        return Err(Error::IndivisibleBatches {
            count: samples.len(),
            batches: num_batches,
        });
    }
    let b = samples.len() / num_batches;
    if b == 0 {
        return Err(Error::invalid("samples", "empty sample set"));
    }
    let means: Vec<f64> = samples
        .chunks_exact(b)
        .map(|chunk| chunk.iter().sum::<f64>() / b as f64)
        .collect();
    Ok(objectives::lower_median(&means)?.value)
}

/// L4-L2 ratio of the projections of the matrix rows onto one direction:
/// `(mean p^4)^{1/4} / (mean p^2)^{1/2}`.
pub fn moment_ratio(matrix: &Array2<f64>, direction: &Array1<f64>) -> Result<f64> {
    if direction.len() != matrix.ncols() {
        return Err(Error::DimensionMismatch {
            context: "direction vs matrix columns",
            expected: matrix.ncols(),
            actual: direction.len(),
        });
    }
    if matrix.nrows() == 0 {
        return Err(Error::invalid("matrix", "no rows"));
    }
    let p = matrix.dot(direction);
    let m = p.len() as f64;
    let m2 = p.iter().map(|x| x * x).sum::<f64>() / m;
    let m4 = p.iter().map(|x| x * x * x * x).sum::<f64>() / m;
    if m2 <= 0.0 {
        return Err(Error::invalid("direction", "zero projection energy"));
    }
    Ok(m4.powf(0.25) / m2.sqrt())
}

/// Worst-case L4-L2 ratio of an ensemble over random unit directions,
/// estimated from `samples` rows.
pub fn estimate_moment_ratio(
    ensemble: Ensemble,
    n: usize,
    samples: usize,
    direction_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 || samples == 0 || direction_samples == 0 {
        return Err(Error::invalid("dims", "n, samples, directions must be positive"));
    }
    let matrix = sample_measurement_matrix(samples, n, ensemble, seeds::derive(seed, &[tag::MATRIX]))?;
    let mut rng = seeds::rng(seed, &[tag::DIRECTION]);
    let mut worst = 0.0f64;
    for _ in 0..direction_samples {
        let mut u = Array1::<f64>::zeros(n);
        loop {
            for x in u.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let norm = u.dot(&u).sqrt();
            if norm > 1e-8 {
                u /= norm;
                break;
            }
        }
        worst = worst.max(moment_ratio(&matrix, &u)?);
    }
    Ok(worst)
}

/// Gamma calibration table: pass rate of the small-ball check at each grid
/// level, using the same seed so runs differ only in gamma.
#[derive(Debug, Clone)]
pub struct GammaCalibration {
    /// Largest grid gamma whose pass rate met the target, if any.
    pub chosen: Option<f64>,
    /// `(gamma, pass_rate)` in grid order.
    pub table: Vec<(f64, f64)>,
}

pub fn calibrate_srec_gamma(
    config: &LemmaCheckConfig,
    source: DirectionSource<'_>,
    grid: &[f64],
) -> Result<GammaCalibration> {
    if grid.is_empty() {
        return Err(Error::EmptyCandidates("gamma grid"));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut chosen: Option<f64> = None;
    for &gamma in grid {
        let mut c = *config;
        c.gamma = gamma;
        let report = check_batch_srec(&c, source)?;
        table.push((gamma, report.pass_rate));
        if report.pass_rate >= config.pass_rate_target
            && chosen.is_none_or(|best| gamma > best)
        {
            chosen = Some(gamma);
        }
    }
    Ok(GammaCalibration { chosen, table })
}

/// Which batchwise property a batch-size sweep exercises.
#[derive(Debug, Clone, Copy)]
pub enum BatchCheck<'a> {
    Srec(DirectionSource<'a>),
    Multiplier(&'a GeneratorNet),
}

#[derive(Debug, Clone)]
pub struct BatchSizeSweep {
    /// Smallest grid batch size whose pass rate met the target, if any.
    pub chosen: Option<usize>,
    /// `(batch_size, pass_rate)` in grid order.
    pub table: Vec<(usize, f64)>,
}

/// Sweeps the batch size at fixed `m`, reporting the smallest size at which
/// the chosen check meets its pass-rate target. Every grid entry must divide
/// `m`.
pub fn sweep_batch_size(
    config: &LemmaCheckConfig,
    check: BatchCheck<'_>,
    grid: &[usize],
) -> Result<BatchSizeSweep> {
    if grid.is_empty() {
        return Err(Error::EmptyCandidates("batch size grid"));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut chosen: Option<usize> = None;
    for &b in grid {
        if b == 0 || config.m % b != 0 {
            return Err(Error::IndivisibleBatches {
                count: config.m,
                batches: b,
            });
        }
        let mut c = *config;
        c.num_batches = config.m / b;
        let report = match check {
            BatchCheck::Srec(source) => check_batch_srec(&c, source)?,
            BatchCheck::Multiplier(net) => check_multiplier_bound(&c, net)?,
        };
        table.push((b, report.pass_rate));
        if report.pass_rate >= config.pass_rate_target
            && chosen.is_none_or(|best| b < best)
        {
            chosen = Some(b);
        }
    }
    Ok(BatchSizeSweep { chosen, table })
}
