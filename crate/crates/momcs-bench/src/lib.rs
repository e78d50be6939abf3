//! Fixture builders shared by the criterion benchmarks. Everything is seeded
//! so successive benchmark runs measure the same workload.

use momcs_core::{
    seeds, synthesize, CorruptionSpec, Ensemble, GeneratorNet, LatentVector, NoiseSpec,
    SensingProblem,
};
use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn net(dims: &[usize], seed: u64) -> GeneratorNet {
    GeneratorNet::random(dims, seed, 1.0).expect("valid dims")
}

pub fn latent(k: usize, seed: u64) -> LatentVector {
    let mut rng = seeds::rng(seed, &[]);
    let values = Array1::from_shape_fn(k, |_| rng.sample::<f64, _>(StandardNormal));
    LatentVector::new(values).expect("finite entries")
}

pub fn gaussian_problem(net: &GeneratorNet, m: usize, sigma: f64, seed: u64) -> SensingProblem {
    let z_star = latent(net.dims()[0], seed ^ 0x5a);
    synthesize(
        net,
        &z_star,
        m,
        Ensemble::Gaussian,
        NoiseSpec::gaussian(sigma).expect("nonnegative sigma"),
        0.0,
        CorruptionSpec::SignRowAndNegOne,
        seed,
    )
    .expect("valid problem")
}

pub fn heavy_samples(count: usize, seed: u64) -> Vec<f64> {
    // Student t with 2.5 dof: finite variance, heavy enough tails that the
    // median-of-means path earns its keep.
    let mut rng = seeds::rng(seed, &[]);
    let dist = rand_distr::StudentT::new(2.5).expect("dof > 0");
    (0..count).map(|_| rng.sample(dist)).collect()
}
