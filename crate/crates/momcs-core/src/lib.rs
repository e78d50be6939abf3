//! Desk-scale laboratory for robust compressed sensing under a generative prior.
//!
//! The pipeline is: fix a ReLU generator `G: R^k -> R^n` ([`generator`]),
//! synthesize measurements `y = A G(z*) + eta` with heavy-tailed ensembles and
//! adversarial row corruption ([`sensing`]), then recover `z` by descending one
//! of several objectives ([`objectives`], [`recovery`]). The tournament
//! objective takes a median across measurement batches, which is what buys
//! robustness to tail events and corrupted rows. [`theory_lab`] checks the
//! finite-sample claims behind that design by direct simulation.

pub mod error;
pub mod generator;
pub mod objectives;
pub mod recovery;
pub mod seeds;
pub mod sensing;
pub mod theory_lab;
pub(crate) mod util;

pub use error::{Error, Result, WeightFormatError};
pub use generator::{EvalWorkspace, GeneratorNet, LatentVector};
pub use objectives::{
    batch_loss, erm_value, l1_value, lower_median, make_partition, mom_direct_value,
    mom_tournament_value, objective_gradient, residuals, trimmed_value, BatchPartition, GradSign,
    LossKind, MedianSelection, TrimmedValue,
};
pub use recovery::{
    final_partition, recover, recover_with_validation, run_restarts, select_batch_count,
    select_best, Algorithm, BatchCountRow, BatchCountSelection, OptimizerKind, RecoveryConfig,
    RecoveryReport, RestartRun, TracePoint, ValidationSet,
};
pub use sensing::{
    corrupt_rows_with, sample_measurement_matrix, synthesize, synthesize_with, CorruptionSpec,
    Ensemble, NoiseKind, NoiseSpec, SensingProblem,
};
pub use theory_lab::{
    batch_multiplier_fraction, batch_srec_fraction, calibrate_srec_gamma, check_batch_srec,
    check_multiplier_bound, check_objective_bound, estimate_moment_ratio, mom_mean_1d,
    moment_ratio, random_orthonormal, sweep_batch_size, BatchCheck, BatchSizeSweep,
    DirectionSource, GammaCalibration, LemmaCheckConfig, LemmaCheckReport, TrialOutcome,
};
