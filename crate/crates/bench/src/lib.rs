//! Inputs shared by the benchmarks.

use dreamstate::rwkv::TimestepSignals;
use dreamstate::Tensor;
use rand::Rng;

/// Random step signals with decays in `[0.05, 1]`, in-context rates in
/// `[0, 2]` and unit key directions.
pub fn random_signals<R: Rng>(n_heads: usize, head_dim: usize, rng: &mut R) -> TimestepSignals {
    let mut m = |lo: f64, hi: f64| Tensor::uniform(&[n_heads, head_dim], lo, hi, &mut *rng);
    let (r, k, v) = (m(-1.0, 1.0), m(-1.0, 1.0), m(-1.0, 1.0));
    let (w, a) = (m(0.05, 1.0), m(0.0, 2.0));
    let mut kappa = m(-1.0, 1.0);
    for row in kappa.data_mut().chunks_mut(head_dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    TimestepSignals {
        r,
        k,
        v,
        w,
        a,
        kappa,
    }
}

/// `n` points in `dim` dimensions around `clusters` well separated centres.
pub fn clustered_points<R: Rng>(
    n: usize,
    dim: usize,
    clusters: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let c = (i % clusters) as f64;
            (0..dim)
                .map(|j| if j % clusters == i % clusters { 4.0 + c } else { 0.0 } + rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect()
}
