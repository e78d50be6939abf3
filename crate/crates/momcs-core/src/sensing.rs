//! Measurement synthesis: `y = A G(z*) + eta`, with heavy-tailed row
//! ensembles and adversarial row corruption.
//!
//! Matrix entries are i.i.d. with unit variance regardless of ensemble, so
//! rows are isotropic and results across ensembles are comparable. Student-t
//! entries are drawn as `N(0,1) / sqrt(ChiSquare(dof)/dof)` and rescaled by
//! `sqrt((dof-2)/dof)`; the degrees of freedom must exceed 2 or the variance
//! normalization is meaningless.
//!
//! Corruption replaces `floor(epsilon * m)` rows, chosen uniformly without
//! replacement: the matrix row becomes i.i.d. random signs and the
//! measurement becomes the constant -1. Both halves can be applied alone for
//! ablations. Each randomized stage (matrix, noise, row choice, corruption
//! fill) draws from its own derived stream, so the clean part of a corrupted
//! problem is bit-identical to the `epsilon = 0` problem at the same seed.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::generator::{GeneratorNet, LatentVector};
use crate::seeds::{self, tag};

const MATRIX_MAGIC: [u8; 4] = *b"GMX1";
const VECTOR_MAGIC: [u8; 4] = *b"GVC1";

/// Distribution of measurement-matrix entries. Unit variance either way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ensemble {
    Gaussian,
    StudentT { dof: f64 },
}

impl Ensemble {
    pub fn student_t(dof: f64) -> Result<Self> {
        check_dof(dof)?;
        Ok(Ensemble::StudentT { dof })
    }

    fn validate(&self) -> Result<()> {
        match self {
            Ensemble::Gaussian => Ok(()),
            Ensemble::StudentT { dof } => check_dof(*dof),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Ensemble::Gaussian => rng.sample(StandardNormal),
            Ensemble::StudentT { dof } => student_t_unit_variance(*dof, rng),
        }
    }
}

impl fmt::Display for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ensemble::Gaussian => write!(f, "gaussian"),
            Ensemble::StudentT { dof } => write!(f, "student_t:{dof}"),
        }
    }
}

impl FromStr for Ensemble {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(Ensemble::Gaussian),
            other => {
                if let Some(dof) = other.strip_prefix("student_t:") {
                    let dof: f64 = dof
                        .parse()
                        .map_err(|_| Error::invalid("ensemble", format!("bad dof in {other:?}")))?;
                    Ensemble::student_t(dof)
                } else {
                    Err(Error::invalid(
                        "ensemble",
                        format!("{other:?} is not gaussian or student_t:<dof>"),
                    ))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    Gaussian,
    StudentT { dof: f64 },
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::Gaussian => write!(f, "gaussian"),
            NoiseKind::StudentT { dof } => write!(f, "student_t:{dof}"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Ensemble::from_str(s)? {
            Ensemble::Gaussian => Ok(NoiseKind::Gaussian),
            Ensemble::StudentT { dof } => Ok(NoiseKind::StudentT { dof }),
        }
    }
}

/// Additive measurement noise with variance exactly `sigma^2` (Student-t
/// draws are variance-normalized before scaling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    kind: NoiseKind,
    sigma: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid("sigma", format!("{sigma} not a nonnegative real")));
        }
        if let NoiseKind::StudentT { dof } = kind {
            check_dof(dof)?;
        }
        Ok(NoiseSpec { kind, sigma })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(NoiseKind::Gaussian, sigma)
    }

    pub fn student_t(dof: f64, sigma: f64) -> Result<Self> {
        Self::new(NoiseKind::StudentT { dof }, sigma)
    }

    pub fn noiseless() -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma: 0.0,
        }
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub(crate) fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let unit: f64 = match self.kind {
            NoiseKind::Gaussian => rng.sample(StandardNormal),
            NoiseKind::StudentT { dof } => student_t_unit_variance(dof, rng),
        };
        self.sigma * unit
    }
}

/// Which part of a selected row gets replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionSpec {
    /// Matrix row becomes i.i.d. signs and the measurement becomes -1.
    SignRowAndNegOne,
    /// Only the measurement is replaced.
    MeasurementOnly,
    /// Only the matrix row is replaced.
    MatrixRowOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingProblem {
    a: Array2<f64>,
    y: Array1<f64>,
    z_star: LatentVector,
    sigma: f64,
    epsilon: f64,
    corrupted_rows: Vec<usize>,
    ensemble: Ensemble,
    seed: u64,
}

impl SensingProblem {
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn measurements(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn z_star(&self) -> &LatentVector {
        &self.z_star
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Sorted indices of replaced rows.
    pub fn corrupted_rows(&self) -> &[usize] {
        &self.corrupted_rows
    }

    pub fn ensemble(&self) -> Ensemble {
        self.ensemble
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Serializes into `dir/matrix.bin`, `dir/y.bin`, `dir/z_star.bin` (same
    /// little-endian header+payload convention as the weight file) plus a
    /// `dir/meta.txt` sidecar with the scalar fields.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(&dir.join("matrix.bin"), &self.a)?;
        write_vector(&dir.join("y.bin"), &self.y)?;
        write_vector(&dir.join("z_star.bin"), self.z_star.values())?;
        let rows: Vec<String> = self.corrupted_rows.iter().map(|r| r.to_string()).collect();
        let meta = format!(
            "m = {}\nn = {}\nsigma = {}\nepsilon = {}\nensemble = {}\nseed = {}\ncorrupted_rows = {}\n",
            self.m(),
            self.n(),
            self.sigma,
            self.epsilon,
            self.ensemble,
            self.seed,
            rows.join(",")
        );
        let meta_path = dir.join("meta.txt");
        fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let a = read_matrix(&dir.join("matrix.bin"))?;
        let y = read_vector(&dir.join("y.bin"))?;
        let z_star = LatentVector::new(read_vector(&dir.join("z_star.bin"))?)?;
        let meta_path = dir.join("meta.txt");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut m = None;
        let mut n = None;
        let mut sigma = None;
        let mut epsilon = None;
        let mut ensemble = None;
        let mut seed = None;
        let mut corrupted_rows = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ProblemFormat {
                path: dir.into(),
                reason: format!("meta.txt line {}: no '=' in {raw:?}", lineno + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::ProblemFormat {
                path: dir.into(),
                reason: format!("meta.txt key {key}: {what}: {value:?}"),
            };
            match key {
                "m" => m = Some(value.parse::<usize>().map_err(|_| bad("bad integer"))?),
                "n" => n = Some(value.parse::<usize>().map_err(|_| bad("bad integer"))?),
                "sigma" => sigma = Some(value.parse::<f64>().map_err(|_| bad("bad real"))?),
                "epsilon" => epsilon = Some(value.parse::<f64>().map_err(|_| bad("bad real"))?),
                "ensemble" => ensemble = Some(value.parse::<Ensemble>().map_err(|_| bad("bad ensemble"))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("bad integer"))?),
                "corrupted_rows" => {
                    let rows = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|t| t.trim().parse::<usize>().map_err(|_| bad("bad row index")))
                            .collect::<Result<Vec<usize>>>()?
                    };
                    corrupted_rows = Some(rows);
                }
                other => {
                    return Err(Error::ProblemFormat {
                        path: dir.into(),
                        reason: format!("meta.txt: unknown key {other:?}"),
                    })
                }
            }
        }
        let missing = |what: &'static str| Error::ProblemFormat {
            path: dir.into(),
            reason: format!("meta.txt: missing key {what}"),
        };
        let (m, n) = (m.ok_or_else(|| missing("m"))?, n.ok_or_else(|| missing("n"))?);
        let problem = SensingProblem {
            a,
            y,
            z_star,
            sigma: sigma.ok_or_else(|| missing("sigma"))?,
            epsilon: epsilon.ok_or_else(|| missing("epsilon"))?,
            corrupted_rows: corrupted_rows.ok_or_else(|| missing("corrupted_rows"))?,
            ensemble: ensemble.ok_or_else(|| missing("ensemble"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        };
        if problem.a.nrows() != m || problem.a.ncols() != n || problem.y.len() != m {
            return Err(Error::ProblemFormat {
                path: dir.into(),
                reason: format!(
                    "meta says {}x{} but matrix is {}x{} with {} measurements",
                    m,
                    n,
                    problem.a.nrows(),
                    problem.a.ncols(),
                    problem.y.len()
                ),
            });
        }
        if problem.corrupted_rows.iter().any(|&r| r >= m) {
            return Err(Error::ProblemFormat {
                path: dir.into(),
                reason: "corrupted row index out of range".into(),
            });
        }
        Ok(problem)
    }
}

fn check_dof(dof: f64) -> Result<()> {
    if !(dof.is_finite() && dof > 2.0) {
        return Err(Error::invalid(
            "dof",
            format!("{dof}: Student-t needs dof > 2 for finite variance"),
        ));
    }
    Ok(())
}

/// Raw t(dof) is `N(0,1)/sqrt(ChiSquare(dof)/dof)` with variance
/// `dof/(dof-2)`; multiply by `sqrt((dof-2)/dof)` to land at variance 1.
fn student_t_unit_variance<R: Rng>(dof: f64, rng: &mut R) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    let chi = ChiSquared::new(dof).expect("dof checked > 2").sample(rng);
    let t = g / (chi / dof).sqrt();
    t * ((dof - 2.0) / dof).sqrt()
}

/// i.i.d. unit-variance matrix, row-major fill order.
pub fn sample_measurement_matrix(
    m: usize,
    n: usize,
    ensemble: Ensemble,
    seed: u64,
) -> Result<Array2<f64>> {
    ensemble.validate()?;
    if m == 0 || n == 0 {
        return Err(Error::invalid("matrix dims", format!("{m}x{n}")));
    }
    let mut rng = seeds::rng(seed, &[tag::MATRIX]);
    let data: Vec<f64> = (0..m * n).map(|_| ensemble.sample(&mut rng)).collect();
    Ok(Array2::from_shape_vec((m, n), data).expect("shape fits data"))
}

fn corrupted_count(epsilon: f64, m: usize) -> usize {
    crate::util::floor_count(epsilon, m)
}

/// Builds a full problem: sample `A`, form `y = A G(z*) + eta`, then corrupt
/// `floor(epsilon * m)` uniformly chosen rows.
pub fn synthesize(
    net: &GeneratorNet,
    z_star: &LatentVector,
    m: usize,
    ensemble: Ensemble,
    noise: NoiseSpec,
    epsilon: f64,
    corruption: CorruptionSpec,
    seed: u64,
) -> Result<SensingProblem> {
    synthesize_inner(net, z_star, m, ensemble, noise, epsilon, seed, |a, y, rows, rng| {
        apply_rows(a, y, rows, corruption, rng)
    })
}

/// Like [`synthesize`] but with a caller-supplied corruption: `hook` receives
/// each selected row index, mutable views of that matrix row and measurement,
/// and the corruption RNG stream.
pub fn synthesize_with<F>(
    net: &GeneratorNet,
    z_star: &LatentVector,
    m: usize,
    ensemble: Ensemble,
    noise: NoiseSpec,
    epsilon: f64,
    seed: u64,
    mut hook: F,
) -> Result<SensingProblem>
where
    F: FnMut(usize, ndarray::ArrayViewMut1<'_, f64>, &mut f64, &mut ChaCha8Rng),
{
    synthesize_inner(net, z_star, m, ensemble, noise, epsilon, seed, |a, y, rows, rng| {
        for &row in rows {
            hook(row, a.row_mut(row), &mut y[row], rng);
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn synthesize_inner(
    net: &GeneratorNet,
    z_star: &LatentVector,
    m: usize,
    ensemble: Ensemble,
    noise: NoiseSpec,
    epsilon: f64,
    seed: u64,
    corrupt: impl FnOnce(&mut Array2<f64>, &mut Array1<f64>, &[usize], &mut ChaCha8Rng),
) -> Result<SensingProblem> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid("epsilon", format!("{epsilon} not in [0, 1)")));
    }
    let x_star = net.forward(z_star)?;
    if !x_star.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("generator output"));
    }
    let mut a = sample_measurement_matrix(m, net.output_dim(), ensemble, seed)?;

    let mut noise_rng = seeds::rng(seed, &[tag::NOISE]);
    let eta = Array1::from_shape_fn(m, |_| noise.sample(&mut noise_rng));
    let mut y = a.dot(&x_star) + &eta;

    let num_corrupt = corrupted_count(epsilon, m);
    let mut rows = {
        let mut choice_rng = seeds::rng(seed, &[tag::ROW_CHOICE]);
        rand::seq::index::sample(&mut choice_rng, m, num_corrupt).into_vec()
    };
    rows.sort_unstable();
    let mut corruption_rng = seeds::rng(seed, &[tag::CORRUPTION]);
    corrupt(&mut a, &mut y, &rows, &mut corruption_rng);

    Ok(SensingProblem {
        a,
        y,
        z_star: z_star.clone(),
        sigma: noise.sigma(),
        epsilon,
        corrupted_rows: rows,
        ensemble,
        seed,
    })
}

fn apply_rows(
    a: &mut Array2<f64>,
    y: &mut Array1<f64>,
    rows: &[usize],
    kind: CorruptionSpec,
    rng: &mut ChaCha8Rng,
) {
    for &row in rows {
        if matches!(kind, CorruptionSpec::SignRowAndNegOne | CorruptionSpec::MatrixRowOnly) {
            for v in a.row_mut(row) {
                *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
        if matches!(kind, CorruptionSpec::SignRowAndNegOne | CorruptionSpec::MeasurementOnly) {
            y[row] = -1.0;
        }
    }
}

/// Replaces the given rows in place the same way synthesis would and records
/// them in the problem's bookkeeping. Rows must be in range.
pub fn apply_corruption(
    problem: &mut SensingProblem,
    rows: &[usize],
    kind: CorruptionSpec,
    seed: u64,
) -> Result<()> {
    let m = problem.m();
    if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
        return Err(Error::RowOutOfRange { row: bad, rows: m });
    }
    let mut rng = seeds::rng(seed, &[tag::CORRUPTION]);
    apply_rows(&mut problem.a, &mut problem.y, rows, kind, &mut rng);
    problem.corrupted_rows.extend_from_slice(rows);
    problem.corrupted_rows.sort_unstable();
    problem.corrupted_rows.dedup();
    Ok(())
}

/// The corruption used throughout: sign matrix rows, -1 measurements.
pub fn apply_paper_corruption(
    problem: &mut SensingProblem,
    rows: &[usize],
    seed: u64,
) -> Result<()> {
    apply_corruption(problem, rows, CorruptionSpec::SignRowAndNegOne, seed)
}

/// Arbitrary row rewrite on an existing problem: `hook` gets each row index,
/// the matrix row, and the measurement. Rows are recorded as corrupted.
pub fn corrupt_rows_with<F>(problem: &mut SensingProblem, rows: &[usize], mut hook: F) -> Result<()>
where
    F: FnMut(usize, ndarray::ArrayViewMut1<'_, f64>, &mut f64),
{
    let m = problem.m();
    if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
        return Err(Error::RowOutOfRange { row: bad, rows: m });
    }
    for &row in rows {
        hook(row, problem.a.row_mut(row), &mut problem.y[row]);
    }
    problem.corrupted_rows.extend_from_slice(rows);
    problem.corrupted_rows.sort_unstable();
    problem.corrupted_rows.dedup();
    Ok(())
}

fn write_matrix(path: &Path, a: &Array2<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&MATRIX_MAGIC).map_err(io)?;
    w.write_all(&(a.nrows() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(a.ncols() as u32).to_le_bytes()).map_err(io)?;
    for &v in a.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

fn write_vector(path: &Path, v: &Array1<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&VECTOR_MAGIC).map_err(io)?;
    w.write_all(&(v.len() as u32).to_le_bytes()).map_err(io)?;
    for &x in v.iter() {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::ProblemFormat {
        path: path.into(),
        reason: reason.into(),
    }
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != MATRIX_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let rows = read_u32_io(&mut r, path)? as usize;
    let cols = read_u32_io(&mut r, path)? as usize;
    let mut data = vec![0.0; rows * cols];
    read_f64s(&mut r, path, &mut data)?;
    expect_eof(&mut r, path)?;
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|_| format_err(path, "header does not match payload"))
}

fn read_vector(path: &Path) -> Result<Array1<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != VECTOR_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let len = read_u32_io(&mut r, path)? as usize;
    let mut data = vec![0.0; len];
    read_f64s(&mut r, path, &mut data)?;
    expect_eof(&mut r, path)?;
    Ok(Array1::from_vec(data))
}

fn read_u32_io(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(path, "truncated header"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, path: &Path, out: &mut [f64]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(path, "truncated payload"))?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        out[i] = f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes"));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(format_err(path, "trailing bytes after payload")),
        Err(e) => Err(Error::io(path, e)),
    }
}
