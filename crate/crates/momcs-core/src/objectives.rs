//! Loss surfaces over the latent space.
//!
//! All losses are functions of the residual `r(z) = A G(z) - y`. The
//! tournament value at `(z, z')` is the median over batches of
//! `l_j(z) - l_j(z')` where `l_j` is the per-batch mean of squared residuals;
//! descending it in `z` while ascending in `z'` is what the recovery loop
//! does. The direct variant takes the median of `l_j(z)` itself.
//!
//! Median convention, used everywhere a median over batches appears: sort the
//! M values ascending and take the element at rank `floor((M+1)/2)`
//! (1-indexed), i.e. the lower of the two middle order statistics when M is
//! even. The reported batch index is the smallest index attaining that value,
//! and the gradient is taken on that batch, so the selected median is always
//! an actual batch.
//!
//! Every residual in this crate is computed by the same full mat-vec code
//! path. Mixing accumulation orders would let "the same" residual differ in
//! the last bit between call sites, and several tests assert exact zeros.

use ndarray::Array1;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::generator::{EvalWorkspace, GeneratorNet, LatentVector};
use crate::seeds::{self, tag};
use crate::sensing::SensingProblem;
use crate::util::floor_count;

/// Disjoint equal-size batches covering `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPartition {
    batches: Vec<Vec<usize>>,
    sample_count: usize,
}

impl BatchPartition {
    /// Validates that `batches` partitions `0..m` into equal-size groups.
    pub fn from_batches(batches: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::EmptyCandidates("batch partition"));
        }
        let b = batches[0].len();
        if b == 0 || b * batches.len() != m {
            return Err(Error::IndivisibleBatches {
                count: m,
                batches: batches.len(),
            });
        }
        let mut seen = vec![false; m];
        for batch in &batches {
            if batch.len() != b {
                return Err(Error::invalid("batches", "unequal batch sizes"));
            }
            for &i in batch {
                if i >= m || seen[i] {
                    return Err(Error::invalid(
                        "batches",
                        format!("index {i} out of range or repeated"),
                    ));
                }
                seen[i] = true;
            }
        }
        Ok(BatchPartition {
            batches,
            sample_count: m,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batches[0].len()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn batch(&self, j: usize) -> &[usize] {
        &self.batches[j]
    }
}

/// Splits `0..m` into `num_batches` equal batches; errors unless
/// `num_batches` divides `m`. Without shuffling, batches are the contiguous
/// blocks `[0,b), [b,2b), ...`; with it, a seeded permutation is dealt out
/// instead.
pub fn make_partition(
    m: usize,
    num_batches: usize,
    seed: u64,
    shuffle: bool,
) -> Result<BatchPartition> {
    if num_batches == 0 {
        return Err(Error::invalid("num_batches", "must be positive"));
    }
    if m == 0 || m % num_batches != 0 {
        return Err(Error::IndivisibleBatches {
            count: m,
            batches: num_batches,
        });
    }
    let mut indices: Vec<usize> = (0..m).collect();
    if shuffle {
        indices.shuffle(&mut seeds::rng(seed, &[tag::PARTITION]));
    }
    let b = m / num_batches;
    let batches = indices.chunks(b).map(|c| c.to_vec()).collect();
    Ok(BatchPartition {
        batches,
        sample_count: m,
    })
}

/// A median over batches: the value and the batch that attains it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedianSelection {
    pub batch_index: usize,
    pub value: f64,
}

/// Lower median with deterministic tie-breaking (smallest attaining index).
pub fn lower_median(values: &[f64]) -> Result<MedianSelection> {
    if values.is_empty() {
        return Err(Error::EmptyCandidates("median"));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("batch values"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[i]
            .partial_cmp(&values[j])
            .expect("finite values")
            .then(i.cmp(&j))
    });
    let value = values[order[(values.len() - 1) / 2]];
    let batch_index = values
        .iter()
        .position(|&v| v == value)
        .expect("median value is present");
    Ok(MedianSelection { batch_index, value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    L1,
}

/// Multiplies a gradient by +1 or -1; `Minus` turns a descent direction on a
/// batch loss into the ascent direction the tournament's second player uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSign {
    Plus,
    Minus,
}

impl GradSign {
    pub fn factor(self) -> f64 {
        match self {
            GradSign::Plus => 1.0,
            GradSign::Minus => -1.0,
        }
    }
}

fn check_net(problem: &SensingProblem, net: &GeneratorNet) -> Result<()> {
    if net.output_dim() != problem.n() {
        return Err(Error::DimensionMismatch {
            context: "generator output vs matrix columns",
            expected: problem.n(),
            actual: net.output_dim(),
        });
    }
    Ok(())
}

/// `A G(z) - y`.
pub fn residuals(
    problem: &SensingProblem,
    net: &GeneratorNet,
    z: &LatentVector,
) -> Result<Array1<f64>> {
    check_net(problem, net)?;
    let x = net.forward(z)?;
    Ok(problem.matrix().dot(&x) - problem.measurements())
}

pub(crate) fn residuals_with(
    problem: &SensingProblem,
    net: &GeneratorNet,
    z: &LatentVector,
    ws: &mut EvalWorkspace,
) -> Result<Array1<f64>> {
    check_net(problem, net)?;
    let x = net.forward_with(z, ws)?;
    Ok(problem.matrix().dot(&x) - problem.measurements())
}

fn check_indices(problem: &SensingProblem, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::EmptyCandidates("measurement index set"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= problem.m()) {
        return Err(Error::RowOutOfRange {
            row: bad,
            rows: problem.m(),
        });
    }
    Ok(())
}

/// Mean squared residual over one batch of rows.
pub fn batch_loss(
    problem: &SensingProblem,
    net: &GeneratorNet,
    z: &LatentVector,
    batch: &[usize],
) -> Result<f64> {
    check_indices(problem, batch)?;
    let r = residuals(problem, net, z)?;
    Ok(batch.iter().map(|&i| r[i] * r[i]).sum::<f64>() / batch.len() as f64)
}

pub(crate) fn batch_losses(residual: &Array1<f64>, partition: &BatchPartition) -> Vec<f64> {
    partition
        .batches()
        .iter()
        .map(|batch| {
            batch.iter().map(|&i| residual[i] * residual[i]).sum::<f64>() / batch.len() as f64
        })
        .collect()
}

/// Mean squared residual over all rows.
pub fn erm_value(problem: &SensingProblem, net: &GeneratorNet, z: &LatentVector) -> Result<f64> {
    let r = residuals(problem, net, z)?;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

/// Mean absolute residual over all rows.
pub fn l1_value(problem: &SensingProblem, net: &GeneratorNet, z: &LatentVector) -> Result<f64> {
    let r = residuals(problem, net, z)?;
    Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
}

/// Trimmed squared loss and the surviving rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimmedValue {
    pub value: f64,
    /// Kept rows, ascending. Gradients are masked to this set.
    pub kept: Vec<usize>,
}

/// Mean over the `floor(keep_fraction * m)` smallest squared residuals. The
/// kept set is data-dependent and must be recomputed after every step. Ties
/// at the cut are resolved toward lower row indices.
pub fn trimmed_value(
    problem: &SensingProblem,
    net: &GeneratorNet,
    z: &LatentVector,
    keep_fraction: f64,
) -> Result<TrimmedValue> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(
            "keep_fraction",
            format!("{keep_fraction} not in (0, 1]"),
        ));
    }
    let r = residuals(problem, net, z)?;
    let keep = floor_count(keep_fraction, r.len());
    if keep == 0 {
        return Err(Error::invalid(
            "keep_fraction",
            format!("{keep_fraction} keeps zero of {} rows", r.len()),
        ));
    }
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (r[i] * r[i], r[j] * r[j]);
        a.partial_cmp(&b).expect("finite residuals").then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    let value = kept.iter().map(|&i| r[i] * r[i]).sum::<f64>() / keep as f64;
    Ok(TrimmedValue { value, kept })
}

fn check_partition(problem: &SensingProblem, partition: &BatchPartition) -> Result<()> {
    if partition.sample_count() != problem.m() {
        return Err(Error::DimensionMismatch {
            context: "partition sample count",
            expected: problem.m(),
            actual: partition.sample_count(),
        });
    }
    Ok(())
}

/// Median over batches of the per-batch loss at `z`.
pub fn mom_direct_value(
    problem: &SensingProblem,
    net: &GeneratorNet,
    z: &LatentVector,
    partition: &BatchPartition,
) -> Result<MedianSelection> {
    check_partition(problem, partition)?;
    let r = residuals(problem, net, z)?;
    lower_median(&batch_losses(&r, partition))
}

/// Median over batches of `l_j(z) - l_j(z_prime)`.
pub fn mom_tournament_value(
    problem: &SensingProblem,
    net: &GeneratorNet,
    z: &LatentVector,
    z_prime: &LatentVector,
    partition: &BatchPartition,
) -> Result<MedianSelection> {
    check_partition(problem, partition)?;
    let r = residuals(problem, net, z)?;
    let r_prime = residuals(problem, net, z_prime)?;
    let own = batch_losses(&r, partition);
    let other = batch_losses(&r_prime, partition);
    let diff: Vec<f64> = own.iter().zip(other.iter()).map(|(a, b)| a - b).collect();
    lower_median(&diff)
}

/// Gradient in `z` of the mean loss over `indices`, times `sign`.
pub fn objective_gradient(
    problem: &SensingProblem,
    net: &GeneratorNet,
    z: &LatentVector,
    indices: &[usize],
    loss: LossKind,
    sign: GradSign,
) -> Result<Array1<f64>> {
    let mut ws = EvalWorkspace::default();
    let r = residuals_with(problem, net, z, &mut ws)?;
    objective_gradient_from_residuals(problem, net, &ws, &r, indices, loss, sign)
}

/// Same, reusing a residual vector and forward cache already computed at `z`.
/// This is the recovery loop's path: one forward, one mat-vec, one backward
/// per gradient.
pub(crate) fn objective_gradient_from_residuals(
    problem: &SensingProblem,
    net: &GeneratorNet,
    ws: &EvalWorkspace,
    residual: &Array1<f64>,
    indices: &[usize],
    loss: LossKind,
    sign: GradSign,
) -> Result<Array1<f64>> {
    check_indices(problem, indices)?;
    let count = indices.len() as f64;
    let mut upstream = Array1::zeros(problem.n());
    for &i in indices {
        let weight = match loss {
            LossKind::Squared => 2.0 * residual[i] / count,
            // Subgradient 0 at an exactly zero residual.
            LossKind::L1 => {
                if residual[i] == 0.0 {
                    0.0
                } else {
                    residual[i].signum() / count
                }
            }
        };
        if weight != 0.0 {
            upstream.scaled_add(weight, &problem.matrix().row(i));
        }
    }
    let mut g = net.latent_gradient_with(ws, &upstream)?;
    if sign == GradSign::Minus {
        g.mapv_inplace(|v| -v);
    }
    Ok(g)
}
