//! Exact t-SNE.

use super::pca::{check_rows, pca_project};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, seeded};

pub const TSNE_MAX_POINTS: usize = 2000;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const MIN_GAIN: f64 = 0.01;
const P_FLOOR: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-5;
const BISECTION_STEPS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 10.0,
            iterations: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProjectionMethod {
    Pca,
    Tsne(TsneParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection2D {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    pub method: ProjectionMethod,
}

impl Projection2D {
    pub fn new(
        points: Vec<[f64; 2]>,
        labels: Vec<String>,
        method: ProjectionMethod,
    ) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::shape(
                "projection labels",
                &[points.len()],
                &[labels.len()],
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection has non-finite coordinates"));
        }
        Ok(Projection2D {
            points,
            labels,
            method,
        })
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }
}

/// Squared distances; those negligible against the data scale count as 0.
fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let scale = x.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64;
    let tiny = 1e-20 * scale.max(1e-300);
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum();
            let v = if v < tiny { 0.0 } else { v };
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional probabilities of row `i` at precision `beta`, and their
/// entropy in nats.
fn row_probs(d: &[f64], i: usize, n: usize, beta: f64, out: &mut [f64]) -> f64 {
    let row = &d[i * n..(i + 1) * n];
    let min = (0..n)
        .filter(|&j| j != i)
        .map(|j| row[j])
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        out[j] = if j == i {
            0.0
        } else {
            (-(row[j] - min) * beta).exp()
        };
        sum += out[j];
    }
    let mut h = 0.0;
    for p in out.iter_mut() {
        *p /= sum;
        if *p > 0.0 {
            h -= *p * p.ln();
        }
    }
    h
}

/// Symmetric joint probabilities with per-point bandwidths matched to the
/// perplexity.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let d = sq_distances(x);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = 0.0;
        let mut ok = false;
        for _ in 0..BISECTION_STEPS {
            h = row_probs(&d, i, n, beta, &mut row);
            if (h - target).abs() < ENTROPY_TOL {
                ok = true;
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            if !beta.is_finite() || beta > 1e300 {
                break;
            }
        }
        if !ok {
            return Err(Error::domain(
                "tsne",
                format!(
                    "perplexity bisection failed at point {i} (entropy {h:.4} vs target {target:.4}); \
                     input has too many duplicate points"
                ),
            ));
        }
        cond[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] =
                    ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    Ok(p)
}

/// `KL(P || Q)` for an embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                num[i * n + j] = 1.0 / (1.0 + d);
                z += num[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    for k in 0..n * n {
        if p[k] > 0.0 {
            let q = (num[k] / z).max(P_FLOOR);
            kl += p[k] * (p[k] / q).ln();
        }
    }
    kl
}

/// Step size scaled to the number of points, never below 50.
pub fn learning_rate(n: usize) -> f64 {
    (n as f64 / EXAGGERATION / 4.0).max(50.0)
}

/// Runs t-SNE, calling `observe(iteration, embedding)` after every update.
pub fn tsne_project_with<F>(
    vectors: &[Vec<f64>],
    params: TsneParams,
    mut observe: F,
) -> Result<Vec<[f64; 2]>>
where
    F: FnMut(usize, &[[f64; 2]]),
{
    check_rows(vectors, 4)?;
    let n = vectors.len();
    if n > TSNE_MAX_POINTS {
        return Err(Error::invalid(format!(
            "exact t-SNE supports at most {TSNE_MAX_POINTS} points"
        )));
    }
    if !(params.perplexity >= 3.0 && params.perplexity < n as f64 / 3.0) {
        return Err(Error::invalid(format!(
            "perplexity {} outside [3, N/3) for N = {n}",
            params.perplexity
        )));
    }
    let p = joint_probabilities(vectors, params.perplexity)?;

    let init = pca_project(vectors)?;
    let sd = {
        let m = init.points.iter().map(|q| q[0]).sum::<f64>() / n as f64;
        (init.points.iter().map(|q| (q[0] - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    // tiny seeded jitter separates points that PCA maps to one spot
    let jitter = normal_vec(2 * n, &mut seeded(params.seed));
    let mut y: Vec<[f64; 2]> = init
        .points
        .iter()
        .enumerate()
        .map(|(i, q)| {
            [
                1e-4 * q[0] / sd + 1e-8 * jitter[2 * i],
                1e-4 * q[1] / sd + 1e-8 * jitter[2 * i + 1],
            ]
        })
        .collect();

    let lr = learning_rate(n);
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..params.iterations {
        let (exag, momentum) = if it < EXAGGERATION_ITERS {
            (EXAGGERATION, 0.5)
        } else {
            (1.0, 0.8)
        };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                let v = 1.0 / (1.0 + d);
                num[i * n + j] = v;
                num[j * n + i] = v;
                z += 2.0 * v;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = 4.0 * (exag * p[i * n + j] - w / z) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (grad[k] > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(MIN_GAIN)
                };
                update[i][k] = momentum * update[i][k] - lr * gains[i][k] * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let c = [
            y.iter().map(|q| q[0]).sum::<f64>() / n as f64,
            y.iter().map(|q| q[1]).sum::<f64>() / n as f64,
        ];
        for q in y.iter_mut() {
            q[0] -= c[0];
            q[1] -= c[1];
        }
        observe(it, &y);
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("tsne", "embedding diverged"));
    }
    Ok(y)
}

pub fn tsne_project(
    vectors: &[Vec<f64>],
    labels: &[String],
    params: TsneParams,
) -> Result<Projection2D> {
    if labels.len() != vectors.len() {
        return Err(Error::shape(
            "tsne labels",
            &[vectors.len()],
            &[labels.len()],
        ));
    }
    let points = tsne_project_with(vectors, params, |_, _| {})?;
    Projection2D::new(points, labels.to_vec(), ProjectionMethod::Tsne(params))
}

pub fn pca_projection(vectors: &[Vec<f64>], labels: &[String]) -> Result<Projection2D> {
    if labels.len() != vectors.len() {
        return Err(Error::shape(
            "pca labels",
            &[vectors.len()],
            &[labels.len()],
        ));
    }
    Projection2D::new(
        pca_project(vectors)?.points,
        labels.to_vec(),
        ProjectionMethod::Pca,
    )
}
