//! Drives the full lemma-check suite from a `[theory]` config section and
//! renders one structured text row per check, plus moment-ratio context rows.

use anyhow::{anyhow, Result};

use momcs_core::{
    check_batch_srec, check_multiplier_bound, check_objective_bound, estimate_moment_ratio,
    DirectionSource, Ensemble, GeneratorNet, LemmaCheckConfig, NoiseKind, NoiseSpec,
};

use crate::config::Config;

pub struct TheoryOutcome {
    pub rows: Vec<String>,
    pub all_passed: bool,
}

pub fn lemma_config(config: &Config) -> Result<LemmaCheckConfig> {
    let defaults = LemmaCheckConfig::default();
    let ensemble: Ensemble = match config.get("theory", "ensemble") {
        Some(raw) => raw
            .parse()
            .map_err(|e| anyhow!("key `theory.ensemble`: {e}"))?,
        None => defaults.ensemble,
    };
    let noise_kind: NoiseKind = match config.get("theory", "noise") {
        Some(raw) => raw.parse().map_err(|e| anyhow!("key `theory.noise`: {e}"))?,
        None => NoiseKind::Gaussian,
    };
    let sigma: f64 = config.get_or("theory", "sigma", defaults.noise.sigma())?;
    let noise = NoiseSpec::new(noise_kind, sigma).map_err(|e| anyhow!("key `theory.sigma`: {e}"))?;
    let out = LemmaCheckConfig {
        trials: config.get_or("theory", "trials", 100)?,
        m: config.get_or("theory", "m", defaults.m)?,
        n: config.get_or("theory", "n", defaults.n)?,
        k: config.get_or("theory", "k", defaults.k)?,
        num_batches: config.get_or("theory", "num_batches", defaults.num_batches)?,
        ensemble,
        noise,
        direction_samples: config.get_or("theory", "direction_samples", 50)?,
        gamma: config.get_or("theory", "gamma", defaults.gamma)?,
        batch_pass_fraction: config
            .get_or("theory", "batch_pass_fraction", defaults.batch_pass_fraction)?,
        pass_rate_target: config.get_or("theory", "pass_rate_target", defaults.pass_rate_target)?,
        seed: config.get_or("theory", "seed", 0)?,
    };
    out.validate().map_err(|e| anyhow!("section `theory`: {e}"))?;
    Ok(out)
}

pub fn run_suite(lemma: &LemmaCheckConfig) -> Result<TheoryOutcome> {
    let net = GeneratorNet::random(
        &[lemma.k, lemma.n],
        momcs_core::seeds::derive(lemma.seed, &[0x6e65745f]),
        1.0,
    )?;
    let reports = [
        check_objective_bound(lemma)?,
        check_batch_srec(lemma, DirectionSource::Generator(&net))?,
        check_batch_srec(lemma, DirectionSource::Subspace)?,
        check_multiplier_bound(lemma, &net)?,
    ];
    let all_passed = reports.iter().all(|r| r.passed());
    let mut rows: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "{} verdict={}",
                r.row(),
                if r.passed() { "pass" } else { "FAIL" }
            )
        })
        .collect();
    // Context, not pass/fail: the empirical L4-L2 ratio the batch-size
    // constants depend on.
    for ensemble in [Ensemble::Gaussian, lemma.ensemble] {
        let ratio = estimate_moment_ratio(ensemble, lemma.n, 20_000, 50, lemma.seed)?;
        let row = format!("check=moment_ratio ensemble={ensemble} n={} ratio={ratio}", lemma.n);
        if !rows.contains(&row) {
            rows.push(row);
        }
    }
    Ok(TheoryOutcome { rows, all_passed })
}
