//! Fixed fully-connected ReLU generator `G: R^k -> R^n`.
//!
//! Layer `l` maps `a` to `relu(W_l a + b_l)` with `W_l` of shape
//! `(dims[l+1], dims[l])`, stored row-major. The last layer applies ReLU only
//! when `final_relu` is set. Nets are immutable after construction; forward
//! passes write their pre-activations into a caller-owned [`EvalWorkspace`],
//! so one net can be shared across threads.
//!
//! The ReLU derivative at an exactly-zero pre-activation is 0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_vec_mul;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result, WeightFormatError};
use crate::seeds;

const MAGIC: [u8; 4] = *b"GNW1";
/// Refuse to allocate for absurd headers (corrupt or hostile files).
const MAX_DIM: usize = 1 << 24;
const MAX_LAYERS: usize = 1 << 10;

/// Latent code `z`. Guaranteed finite at construction; length is checked
/// against the generator on every use.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    values: Array1<f64>,
}

impl LatentVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent vector"));
        }
        Ok(LatentVector { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from_vec(values))
    }

    /// i.i.d. `N(0, scale^2)` entries.
    pub fn standard_normal<R: Rng>(k: usize, scale: f64, rng: &mut R) -> Self {
        let values = Array1::from_shape_fn(k, |_| {
            let g: f64 = rng.sample(StandardNormal);
            scale * g
        });
        LatentVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    /// Direct mutable access for optimizer loops. Finiteness is re-checked by
    /// the caller's divergence guard, not here.
    pub fn values_mut(&mut self) -> &mut Array1<f64> {
        &mut self.values
    }
}

/// Scratch space for one forward/backward pair. Reusing it across calls keeps
/// the hot loop allocation-free except for the returned vectors.
#[derive(Debug, Clone, Default)]
pub struct EvalWorkspace {
    /// `preacts[l] = W_l a_{l-1} + b_l`, kept for activation masks and for
    /// boundary checks in tests.
    preacts: Vec<Array1<f64>>,
    acts: Vec<Array1<f64>>,
}

impl EvalWorkspace {
    pub fn preactivations(&self) -> &[Array1<f64>] {
        &self.preacts
    }

    /// Smallest pre-activation magnitude over all layers. Gradient checks use
    /// this to stay away from ReLU kinks.
    pub fn min_preactivation_magnitude(&self) -> f64 {
        self.preacts
            .iter()
            .flat_map(|p| p.iter())
            .fold(f64::INFINITY, |acc, &v| acc.min(v.abs()))
    }

    fn resize_for(&mut self, dims: &[usize]) {
        let layers = dims.len() - 1;
        self.preacts.resize_with(layers, Default::default);
        self.acts.resize_with(layers, Default::default);
        for l in 0..layers {
            if self.preacts[l].len() != dims[l + 1] {
                self.preacts[l] = Array1::zeros(dims[l + 1]);
                self.acts[l] = Array1::zeros(dims[l + 1]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    final_relu: bool,
}

impl GeneratorNet {
    /// Builds a net from explicit layers. Shapes must chain: `weights[l]` is
    /// `(dims[l+1], dims[l])` and `biases[l]` has length `dims[l+1]`.
    pub fn new(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        final_relu: bool,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("weights", "need at least one layer"));
        }
        if weights.len() != biases.len() {
            return Err(Error::DimensionMismatch {
                context: "bias count vs layer count",
                expected: weights.len(),
                actual: biases.len(),
            });
        }
        let mut dims = Vec::with_capacity(weights.len() + 1);
        dims.push(weights[0].ncols());
        for (l, w) in weights.iter().enumerate() {
            if w.ncols() != dims[l] {
                return Err(Error::DimensionMismatch {
                    context: "layer input dimension",
                    expected: dims[l],
                    actual: w.ncols(),
                });
            }
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::invalid("weights", format!("layer {l} has a zero dim")));
            }
            if biases[l].len() != w.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "bias length",
                    expected: w.nrows(),
                    actual: biases[l].len(),
                });
            }
            dims.push(w.nrows());
        }
        let finite = weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("generator weights"));
        }
        Ok(GeneratorNet {
            dims,
            weights,
            biases,
            final_relu,
        })
    }

    /// Random net with i.i.d. `N(0, (scale/sqrt(fan_in))^2)` weights and zero
    /// biases. Bitwise reproducible from the seed.
    pub fn random(dims: &[usize], seed: u64, scale: f64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(
                "dims",
                format!("need input and output dims, got {dims:?}"),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("dims", format!("zero dimension in {dims:?}")));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid("scale", format!("{scale} not positive")));
        }
        let mut rng = seeds::rng(seed, &[]);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let std = scale / (cols as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    std * g
                })
                .collect();
            weights.push(Array2::from_shape_vec((rows, cols), data).expect("shape fits data"));
            biases.push(Array1::zeros(rows));
        }
        GeneratorNet::new(weights, biases, false)
    }

    /// Same as [`GeneratorNet::random`] but with the output ReLU enabled, for
    /// nonnegative-signal settings.
    pub fn random_with_final_relu(dims: &[usize], seed: u64, scale: f64) -> Result<Self> {
        let mut net = Self::random(dims, seed, scale)?;
        net.final_relu = true;
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least one layer")
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn final_relu(&self) -> bool {
        self.final_relu
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    fn relu_at(&self, layer: usize) -> bool {
        layer + 1 < self.depth() || self.final_relu
    }

    fn check_input(&self, z: &LatentVector) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "generator input",
                expected: self.input_dim(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// `G(z)`, allocating a fresh workspace.
    pub fn forward(&self, z: &LatentVector) -> Result<Array1<f64>> {
        let mut ws = EvalWorkspace::default();
        self.forward_with(z, &mut ws)
    }

    /// `G(z)`, caching pre-activations in `ws` for a later
    /// [`latent_gradient_with`](Self::latent_gradient_with).
    pub fn forward_with(&self, z: &LatentVector, ws: &mut EvalWorkspace) -> Result<Array1<f64>> {
        self.check_input(z)?;
        ws.resize_for(&self.dims);
        for l in 0..self.depth() {
            // Split borrow: acts[l] is written from acts[l-1] (or z).
            let (done, rest) = ws.acts.split_at_mut(l);
            let input = if l == 0 { z.values() } else { &done[l - 1] };
            general_mat_vec_mul(1.0, &self.weights[l], input, 0.0, &mut ws.preacts[l]);
            ws.preacts[l] += &self.biases[l];
            if self.relu_at(l) {
                azip_relu(&ws.preacts[l], &mut rest[0]);
            } else {
                rest[0].assign(&ws.preacts[l]);
            }
        }
        Ok(ws.acts[self.depth() - 1].clone())
    }

    /// `J_G(z)^T upstream`: pullback of a cotangent at `G(z)` to latent space.
    /// Runs one forward pass internally.
    pub fn latent_gradient(&self, z: &LatentVector, upstream: &Array1<f64>) -> Result<Array1<f64>> {
        let mut ws = EvalWorkspace::default();
        self.forward_with(z, &mut ws)?;
        self.latent_gradient_with(&ws, upstream)
    }

    /// Backward pass over the masks cached by the last
    /// [`forward_with`](Self::forward_with) on `ws`.
    pub fn latent_gradient_with(
        &self,
        ws: &EvalWorkspace,
        upstream: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "upstream cotangent",
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        if ws.preacts.len() != self.depth() {
            return Err(Error::invalid("workspace", "stale workspace for this net"));
        }
        let mut g = upstream.clone();
        for l in (0..self.depth()).rev() {
            if self.relu_at(l) {
                // Mask strictly positive pre-activations; derivative at 0 is 0.
                for (gi, &p) in g.iter_mut().zip(ws.preacts[l].iter()) {
                    if p <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = self.weights[l].t().dot(&g);
        }
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r).map_err(|e| match e {
            ReadError::Io(source) => Error::io(path, source),
            ReadError::Format(source) => Error::WeightFormat {
                path: path.into(),
                source,
            },
            ReadError::Net(e) => e,
        })
    }

    /// Binary layout: magic `GNW1`, `u32` layer count `d`, `d+1` `u32` dims,
    /// one `u8` final-ReLU flag, then per layer the row-major `f64` weights
    /// followed by the `f64` biases. All integers and floats little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&(self.depth() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.final_relu)])?;
        for l in 0..self.depth() {
            for &v in self.weights[l].iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for &v in self.biases[l].iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, ReadError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(WeightFormatError::BadMagic {
                expected: MAGIC,
                found: magic,
            }
            .into());
        }
        let layers = read_u32(r)? as usize;
        if layers == 0 || layers > MAX_LAYERS {
            return Err(WeightFormatError::InvalidDims(format!("layer count {layers}")).into());
        }
        let mut dims = Vec::with_capacity(layers + 1);
        for _ in 0..layers + 1 {
            let d = read_u32(r)? as usize;
            if d == 0 || d > MAX_DIM {
                return Err(WeightFormatError::InvalidDims(format!("dimension {d}")).into());
            }
            dims.push(d);
        }
        let mut flag = [0u8; 1];
        read_exact(r, &mut flag)?;
        let final_relu = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(
                    WeightFormatError::InvalidDims(format!("final-relu flag {other}")).into(),
                )
            }
        };
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let mut wdata = vec![0.0; rows * cols];
            read_f64_slice(r, &mut wdata)?;
            let mut bdata = vec![0.0; rows];
            read_f64_slice(r, &mut bdata)?;
            weights.push(Array2::from_shape_vec((rows, cols), wdata).expect("shape fits data"));
            biases.push(Array1::from_vec(bdata));
        }
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => {}
            Ok(n) => return Err(WeightFormatError::TrailingBytes(n).into()),
            Err(e) => return Err(ReadError::Io(e)),
        }
        GeneratorNet::new(weights, biases, final_relu).map_err(ReadError::Net)
    }
}

/// Decode-time error split: I/O problems, format violations, and nets that
/// decode but fail construction invariants (e.g. NaN weights).
#[derive(Debug)]
pub enum ReadError {
    Io(std::io::Error),
    Format(WeightFormatError),
    Net(Error),
}

impl From<WeightFormatError> for ReadError {
    fn from(e: WeightFormatError) -> Self {
        ReadError::Format(e)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> std::result::Result<(), ReadError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ReadError::Format(WeightFormatError::Truncated {
                expected: buf.len(),
            })
        } else {
            ReadError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> std::result::Result<u32, ReadError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64_slice(r: &mut impl Read, out: &mut [f64]) -> std::result::Result<(), ReadError> {
    let mut buf = vec![0u8; out.len() * 8];
    read_exact(r, &mut buf)?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        out[i] = f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes"));
    }
    Ok(())
}

fn azip_relu(pre: &Array1<f64>, out: &mut Array1<f64>) {
    for (o, &p) in out.iter_mut().zip(pre.iter()) {
        *o = if p > 0.0 { p } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn one_layer(w: f64, b: f64, final_relu: bool) -> GeneratorNet {
        GeneratorNet::new(vec![array![[w]]], vec![array![b]], final_relu).unwrap()
    }

    fn z(values: &[f64]) -> LatentVector {
        LatentVector::from_vec(values.to_vec()).unwrap()
    }

    /// Independent decoder and evaluator for the byte format: walks explicit
    /// offsets and runs the net with scalar loops. Oracle for both the file
    /// layout and `forward`.
    fn interpret_weight_bytes(bytes: &[u8], z: &[f64]) -> Vec<f64> {
        assert_eq!(&bytes[0..4], b"GNW1");
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut dims = Vec::new();
        let mut off = 8;
        for _ in 0..d + 1 {
            dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let final_relu = bytes[off] == 1;
        off += 1;
        let read_f64 = |off: &mut usize| {
            let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v
        };
        let mut act = z.to_vec();
        for l in 0..d {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let mut w = vec![0.0; rows * cols];
            for v in w.iter_mut() {
                *v = read_f64(&mut off);
            }
            let mut b = vec![0.0; rows];
            for v in b.iter_mut() {
                *v = read_f64(&mut off);
            }
            let mut next = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = b[r];
                for c in 0..cols {
                    acc += w[r * cols + c] * act[c];
                }
                next[r] = if (l + 1 < d || final_relu) && acc <= 0.0 {
                    0.0
                } else {
                    acc
                };
            }
            act = next;
        }
        assert_eq!(off, bytes.len());
        act
    }

    fn fd_latent_gradient(
        net: &GeneratorNet,
        at: &LatentVector,
        upstream: &Array1<f64>,
        h: f64,
    ) -> Array1<f64> {
        let k = at.len();
        let mut g = Array1::zeros(k);
        for i in 0..k {
            let mut zp = at.clone();
            zp.values_mut()[i] += h;
            let mut zm = at.clone();
            zm.values_mut()[i] -= h;
            let fp = net.forward(&zp).unwrap();
            let fm = net.forward(&zm).unwrap();
            g[i] = upstream.dot(&((&fp - &fm) / (2.0 * h)));
        }
        g
    }

    #[test]
    fn forward_one_layer_hand_computed() {
        let net = one_layer(2.0, -1.0, true);
        assert_eq!(net.forward(&z(&[3.0])).unwrap(), array![5.0]);
        assert_eq!(net.forward(&z(&[0.0])).unwrap(), array![0.0]);
    }

    #[test]
    fn forward_without_final_relu_passes_negatives_through() {
        let net = one_layer(2.0, -1.0, false);
        assert_eq!(net.forward(&z(&[0.0])).unwrap(), array![-1.0]);
    }

    #[test]
    fn forward_matches_straight_line_interpreter() {
        let net = GeneratorNet::random(&[4, 12, 20], 31, 1.0).unwrap();
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        let mut rng = seeds::rng(77, &[]);
        for _ in 0..20 {
            let zv = LatentVector::standard_normal(4, 1.0, &mut rng);
            let ours = net.forward(&zv).unwrap();
            let oracle = interpret_weight_bytes(&bytes, zv.values().as_slice().unwrap());
            for (a, b) in ours.iter().zip(oracle.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradient_one_layer_hand_computed() {
        let net = one_layer(2.0, -1.0, true);
        let up = array![1.0];
        // pre = 5 > 0: d/dz relu(2z-1) = 2
        assert_eq!(net.latent_gradient(&z(&[3.0]), &up).unwrap(), array![2.0]);
        // pre = -1 <= 0: dead unit
        assert_eq!(net.latent_gradient(&z(&[0.0]), &up).unwrap(), array![0.0]);
    }

    #[test]
    fn gradient_is_zero_at_exactly_zero_preactivation() {
        let net = one_layer(1.0, 0.0, true);
        let g = net.latent_gradient(&z(&[0.0]), &array![1.0]).unwrap();
        assert_eq!(g, array![0.0]);
    }

    #[test]
    fn gradient_matches_central_differences_away_from_kinks() {
        let mut rng = seeds::rng(5, &[]);
        let mut checked = 0;
        let mut attempt = 0;
        while checked < 10 {
            attempt += 1;
            let net = GeneratorNet::random(&[6, 16, 24], 1000 + attempt, 1.0).unwrap();
            let zv = LatentVector::standard_normal(6, 1.0, &mut rng);
            let mut ws = EvalWorkspace::default();
            net.forward_with(&zv, &mut ws).unwrap();
            if ws.min_preactivation_magnitude() < 1e-3 {
                continue;
            }
            let up = Array1::from_shape_fn(24, |_| rng.sample::<f64, _>(StandardNormal));
            let ours = net.latent_gradient(&zv, &up).unwrap();
            let fd = fd_latent_gradient(&net, &zv, &up, 1e-5);
            for (a, b) in ours.iter().zip(fd.iter()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
                assert!(rel <= 1e-6, "analytic {a} vs fd {b}");
            }
            checked += 1;
        }
    }

    #[test]
    fn random_net_is_reproducible_and_biases_are_zero() {
        let a = GeneratorNet::random(&[4, 8, 20], 9, 1.0).unwrap();
        let b = GeneratorNet::random(&[4, 8, 20], 9, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, GeneratorNet::random(&[4, 8, 20], 10, 1.0).unwrap());
        for bias in a.biases() {
            assert!(bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn random_net_weight_variance_tracks_fan_in() {
        // Pool entries over many seeds; per layer the empirical variance must
        // sit within 3 standard errors of scale^2/fan_in.
        let dims = [4usize, 8, 20];
        let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); dims.len() - 1];
        for seed in 0..1000 {
            let net = GeneratorNet::random(&dims, seed, 1.0).unwrap();
            for (l, w) in net.weights().iter().enumerate() {
                pooled[l].extend(w.iter().copied());
            }
        }
        for (l, entries) in pooled.iter().enumerate() {
            let want = 1.0 / dims[l] as f64;
            let n = entries.len() as f64;
            let var = entries.iter().map(|v| v * v).sum::<f64>() / n;
            // var(sample var) ~ 2 var^2 / n for Gaussians
            let se = want * (2.0 / n).sqrt();
            assert!(
                (var - want).abs() <= 3.0 * se,
                "layer {l}: variance {var} vs {want} (se {se})"
            );
        }
    }

    #[test]
    fn degenerate_dims_are_rejected() {
        assert!(GeneratorNet::random(&[1], 0, 1.0).is_err());
        assert!(GeneratorNet::random(&[], 0, 1.0).is_err());
        assert!(GeneratorNet::random(&[4, 0, 8], 0, 1.0).is_err());
    }

    #[test]
    fn input_dimension_is_checked() {
        let net = GeneratorNet::random(&[4, 8], 0, 1.0).unwrap();
        let err = net.forward(&z(&[1.0, 2.0])).unwrap_err();
        match err {
            Error::DimensionMismatch {
                expected, actual, ..
            } => {
                assert_eq!((expected, actual), (4, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.gnw");
        let net = GeneratorNet::random_with_final_relu(&[3, 7, 11], 123, 0.7).unwrap();
        net.save(&path).unwrap();
        let back = GeneratorNet::load(&path).unwrap();
        assert_eq!(net, back);
        // Byte-identical on re-save, not merely value-equal.
        let mut a = Vec::new();
        net.write_to(&mut a).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_bad_magic() {
        let net = GeneratorNet::random(&[2, 3], 1, 1.0).unwrap();
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        match GeneratorNet::read_from(&mut bytes.as_slice()) {
            Err(ReadError::Format(WeightFormatError::BadMagic { .. })) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_truncated_payload() {
        let net = GeneratorNet::random(&[2, 3], 1, 1.0).unwrap();
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 9);
        match GeneratorNet::read_from(&mut bytes.as_slice()) {
            Err(ReadError::Format(WeightFormatError::Truncated { .. })) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_trailing_bytes() {
        let net = GeneratorNet::random(&[2, 3], 1, 1.0).unwrap();
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        bytes.push(0);
        match GeneratorNet::read_from(&mut bytes.as_slice()) {
            Err(ReadError::Format(WeightFormatError::TrailingBytes(1))) => {}
            other => panic!("expected trailing bytes, got {other:?}"),
        }
    }

    #[test]
    fn positive_homogeneity_with_zero_biases() {
        // All-ReLU nets with zero biases satisfy G(cz) = c G(z) for c > 0.
        let net = GeneratorNet::random_with_final_relu(&[5, 9, 13], 21, 1.0).unwrap();
        let mut rng = seeds::rng(3, &[]);
        for _ in 0..10 {
            let zv = LatentVector::standard_normal(5, 1.0, &mut rng);
            let c = 0.25 + 3.0 * rng.random::<f64>();
            let scaled =
                LatentVector::new(zv.values() * c).unwrap();
            let lhs = net.forward(&scaled).unwrap();
            let rhs = net.forward(&zv).unwrap() * c;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        /// Inside one activation cell the map is affine: interpolating inputs
        /// interpolates outputs.
        #[test]
        fn piecewise_linearity_within_activation_cell(
            seed in 0u64..1000,
            alpha in 0.0f64..1.0,
        ) {
            let net = GeneratorNet::random(&[4, 10, 16], seed, 1.0).unwrap();
            let mut rng = seeds::rng(seed, &[99]);
            let z1 = LatentVector::standard_normal(4, 1.0, &mut rng);
            // Tiny perturbation: almost surely the same activation pattern.
            let delta = LatentVector::standard_normal(4, 1e-5, &mut rng);
            let z2 = LatentVector::new(z1.values() + delta.values()).unwrap();
            let mut ws1 = EvalWorkspace::default();
            let mut ws2 = EvalWorkspace::default();
            net.forward_with(&z1, &mut ws1).unwrap();
            net.forward_with(&z2, &mut ws2).unwrap();
            let same_pattern = ws1
                .preactivations()
                .iter()
                .zip(ws2.preactivations().iter())
                .all(|(p1, p2)| {
                    p1.iter().zip(p2.iter()).all(|(a, b)| (*a > 0.0) == (*b > 0.0))
                });
            prop_assume!(same_pattern);
            let mid = LatentVector::new(
                z1.values() * alpha + z2.values() * (1.0 - alpha),
            ).unwrap();
            let lhs = net.forward(&mid).unwrap();
            let rhs = net.forward(&z1).unwrap() * alpha + net.forward(&z2).unwrap() * (1.0 - alpha);
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
