use nalgebra::{DMatrix, DVector};

use super::pca::check_rows;
use crate::error::{Error, Result};

/// Ridge strength relative to the mean diagonal of the Gram matrix.
pub const PROBE_RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub silhouette: f64,
    pub probe_accuracy: f64,
    pub within_category_cosine: f64,
    pub cross_category_cosine: f64,
}

/// Distinct labels in order of first appearance, and each row's class index.
fn encode(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut classes: Vec<String> = Vec::new();
    let idx = labels
        .iter()
        .map(|l| match classes.iter().position(|c| c == l) {
            Some(i) => i,
            None => {
                classes.push(l.clone());
                classes.len() - 1
            }
        })
        .collect();
    (classes, idx)
}

fn check_labels(vectors: &[Vec<f64>], labels: &[String]) -> Result<(Vec<String>, Vec<usize>)> {
    check_rows(vectors, 2)?;
    if labels.len() != vectors.len() {
        return Err(Error::shape("labels", &[vectors.len()], &[labels.len()]));
    }
    let (classes, idx) = encode(labels);
    if classes.len() < 2 {
        return Err(Error::invalid("metrics need at least two categories"));
    }
    for (k, c) in classes.iter().enumerate() {
        if idx.iter().filter(|&&i| i == k).count() < 2 {
            return Err(Error::invalid(format!(
                "category '{c}' has fewer than two members"
            )));
        }
    }
    Ok((classes, idx))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[String]) -> Result<f64> {
    let (classes, idx) = check_labels(points, labels)?;
    let n = points.len();
    let k = classes.len();
    let sizes: Vec<usize> = (0..k)
        .map(|c| idx.iter().filter(|&&i| i == c).count())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[idx[j]] += dist(&points[i], &points[j]);
            }
        }
        let a = sums[idx[i]] / (sizes[idx[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != idx[i])
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// One-vs-rest least-squares classifier with a bias and a small ridge term.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    /// `classes x dim` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Gram matrix of the bias-augmented rows and the ridge strength used.
fn augmented_gram(x: &[Vec<f64>]) -> (DMatrix<f64>, f64) {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        1.0 + x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let lambda = PROBE_RIDGE * k.trace() / n as f64;
    (k, lambda)
}

fn one_hot(idx: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), k, |i, c| if idx[i] == c { 1.0 } else { 0.0 })
}

fn solve(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| Error::domain("linear_probe", "ridge system is not positive definite"))
}

impl LinearProbe {
    pub fn fit(vectors: &[Vec<f64>], labels: &[String]) -> Result<Self> {
        let (classes, idx) = check_labels(vectors, labels)?;
        let n = vectors.len();
        let d = vectors[0].len();
        let (k, lambda) = augmented_gram(vectors);
        let y = one_hot(&idx, classes.len());
        let alpha = solve(k + DMatrix::identity(n, n) * lambda, &y)?;
        let weights = (0..classes.len())
            .map(|c| {
                (0..d)
                    .map(|j| (0..n).map(|i| alpha[(i, c)] * vectors[i][j]).sum())
                    .collect()
            })
            .collect();
        let bias = (0..classes.len()).map(|c| alpha.column(c).sum()).collect();
        Ok(LinearProbe {
            classes,
            weights,
            bias,
        })
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.weights[0].len();
        if x.len() != d {
            return Err(Error::shape("linear_probe", &[x.len()], &[d]));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
            .collect())
    }

    /// Softmax of the class scores.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.scores(x)?;
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / z).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        let s = self.scores(x)?;
        Ok(&self.classes[argmax(&s)])
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Exact leave-one-out accuracy of [`LinearProbe`], via the ridge hat matrix.
pub fn probe_accuracy(vectors: &[Vec<f64>], labels: &[String]) -> Result<f64> {
    let (classes, idx) = check_labels(vectors, labels)?;
    let n = vectors.len();
    let (k, lambda) = augmented_gram(vectors);
    let y = one_hot(&idx, classes.len());
    // H = K (K + lambda I)^-1, so y_hat = H y
    let inv = solve(
        k.clone() + DMatrix::identity(n, n) * lambda,
        &DMatrix::identity(n, n),
    )?;
    let h = &k * inv;
    let fitted = &h * &y;
    let mut correct = 0;
    for i in 0..n {
        let hii = h[(i, i)];
        let loo: DVector<f64> = DVector::from_fn(classes.len(), |c, _| {
            y[(i, c)] - (y[(i, c)] - fitted[(i, c)]) / (1.0 - hii)
        });
        if argmax(loo.as_slice()) == idx[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean pairwise cosine similarity within and across categories.
pub fn category_cosines(vectors: &[Vec<f64>], labels: &[String]) -> Result<(f64, f64)> {
    let (_, idx) = check_labels(vectors, labels)?;
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j]);
            if idx[i] == idx[j] {
                within += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    Ok((within / nw as f64, cross / nc as f64))
}

pub fn cluster_metrics(vectors: &[Vec<f64>], labels: &[String]) -> Result<MetricReport> {
    let (within_category_cosine, cross_category_cosine) = category_cosines(vectors, labels)?;
    Ok(MetricReport {
        silhouette: silhouette(vectors, labels)?,
        probe_accuracy: probe_accuracy(vectors, labels)?,
        within_category_cosine,
        cross_category_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};
    use rand::seq::SliceRandom;

    fn blobs(n_each: usize, sep: f64, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
        let mut rng = seeded(seed);
        let mut x = Vec::new();
        let mut l = Vec::new();
        for k in 0..2 {
            for _ in 0..n_each {
                let mut v = normal_vec(d, &mut rng);
                v[1] += sep * k as f64;
                x.push(v);
                l.push(if k == 0 {
                    "a".to_string()
                } else {
                    "b".to_string()
                });
            }
        }
        (x, l)
    }

    /// Brute-force leave-one-out: refit without each point.
    fn loo_by_refit(x: &[Vec<f64>], l: &[String]) -> f64 {
        let mut correct = 0;
        for i in 0..x.len() {
            let xs: Vec<Vec<f64>> = x
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| v.clone())
                .collect();
            let ls: Vec<String> = l
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| v.clone())
                .collect();
            // same ridge strength as the full fit
            let (_, lambda) = augmented_gram(x);
            let (k, _) = augmented_gram(&xs);
            let (classes, idx) = encode(&ls);
            let y = one_hot(&idx, classes.len());
            let n = xs.len();
            let alpha = solve(k + DMatrix::identity(n, n) * lambda, &y).unwrap();
            let scores: Vec<f64> = (0..classes.len())
                .map(|c| {
                    (0..n)
                        .map(|r| {
                            alpha[(r, c)]
                                * (1.0 + xs[r].iter().zip(&x[i]).map(|(p, q)| p * q).sum::<f64>())
                        })
                        .sum()
                })
                .collect();
            if classes[argmax(&scores)] == l[i] {
                correct += 1;
            }
        }
        correct as f64 / x.len() as f64
    }

    #[test]
    fn closed_form_loo_matches_refitting() {
        let (x, l) = blobs(10, 1.0, 5, 3);
        assert_eq!(probe_accuracy(&x, &l).unwrap(), loo_by_refit(&x, &l));
        let (x, l) = blobs(12, 0.0, 30, 4);
        assert_eq!(probe_accuracy(&x, &l).unwrap(), loo_by_refit(&x, &l));
    }

    #[test]
    fn separable_data_is_perfectly_probed() {
        let (x, l) = blobs(15, 30.0, 4, 1);
        assert_eq!(probe_accuracy(&x, &l).unwrap(), 1.0);
        let probe = LinearProbe::fit(&x, &l).unwrap();
        assert_eq!(probe.predict(&x[0]).unwrap(), "a");
        assert_eq!(probe.predict(&x[20]).unwrap(), "b");
        let p = probe.predict_proba(&x[20]).unwrap();
        assert!(p[1] > p[0] && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_give_near_zero_silhouette() {
        let (x, mut l) = blobs(30, 6.0, 4, 2);
        assert!(silhouette(&x, &l).unwrap() > 0.4);
        let mut rng = seeded(7);
        let mut total = 0.0;
        for _ in 0..20 {
            l.shuffle(&mut rng);
            total += silhouette(&x, &l).unwrap();
        }
        assert!((total / 20.0).abs() < 0.1, "{}", total / 20.0);
    }

    #[test]
    fn silhouette_ignores_rigid_motion() {
        let (x, l) = blobs(10, 3.0, 2, 5);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let moved: Vec<Vec<f64>> = x
            .iter()
            .map(|p| vec![c * p[0] - s * p[1] + 5.0, s * p[0] + c * p[1] - 2.0])
            .collect();
        assert!((silhouette(&x, &l).unwrap() - silhouette(&moved, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_summaries() {
        let x = vec![
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 3.0],
            vec![0.0, 1.0],
        ];
        let l: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let (w, c) = category_cosines(&x, &l).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
        assert_eq!(c, 0.0);
        let r = cluster_metrics(&x, &l).unwrap();
        assert!(r.silhouette > 0.0 && r.probe_accuracy <= 1.0);
    }

    #[test]
    fn rejects_single_category() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let l = vec!["a".to_string(); 3];
        assert!(cluster_metrics(&x, &l).is_err());
        let l2: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(silhouette(&x, &l2).is_err());
    }
}
