use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `N` projected points.
    pub points: Vec<[f64; 2]>,
    /// Variance captured by the first and second component.
    pub explained: [f64; 2],
    /// Unit principal directions, each of input dimension.
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

pub(crate) fn check_rows(vectors: &[Vec<f64>], min_rows: usize) -> Result<usize> {
    if vectors.len() < min_rows {
        return Err(Error::invalid(format!(
            "need at least {min_rows} vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if d == 0 {
        return Err(Error::invalid("vectors must be non-empty"));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::shape("vectors", &[i, v.len()], &[d]));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("vector {i} is not finite")));
        }
    }
    Ok(d)
}

/// Top two principal components of mean-centred data. Each direction's
/// first non-negligible loading is made positive.
pub fn pca_project(vectors: &[Vec<f64>]) -> Result<Pca> {
    let d = check_rows(vectors, 3)?;
    let n = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let total: f64 = x.iter().map(|v| v * v).sum();
    let scale: f64 = vectors
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .max(1.0);
    if total <= 1e-24 * scale {
        return Err(Error::invalid(
            "all vectors are identical; no principal direction",
        ));
    }

    // eigen-decompose whichever of X^T X and X X^T is smaller
    let (values, dirs) = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let order = sorted_desc(eig.eigenvalues.as_slice());
        let dirs: Vec<Vec<f64>> = order[..2.min(d)]
            .iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect();
        (
            order
                .iter()
                .map(|&k| eig.eigenvalues[k])
                .collect::<Vec<_>>(),
            dirs,
        )
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let order = sorted_desc(eig.eigenvalues.as_slice());
        let dirs = order[..2]
            .iter()
            .map(|&k| {
                let lam = eig.eigenvalues[k].max(0.0);
                let u = eig.eigenvectors.column(k);
                let v = x.transpose() * u;
                if lam > 0.0 {
                    (v / lam.sqrt()).iter().copied().collect()
                } else {
                    vec![0.0; d]
                }
            })
            .collect();
        (
            order
                .iter()
                .map(|&k| eig.eigenvalues[k])
                .collect::<Vec<_>>(),
            dirs,
        )
    };

    let mut comps: Vec<Vec<f64>> = dirs.into_iter().map(fix_sign).collect();
    if comps.len() < 2 {
        comps.push(vec![0.0; d]);
    }
    let explained = [
        values[0].max(0.0) / n as f64,
        values.get(1).copied().unwrap_or(0.0).max(0.0) / n as f64,
    ];
    let points = (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect();
    let [c0, c1]: [Vec<f64>; 2] = comps.try_into().map_err(|_| Error::invalid("pca"))?;
    Ok(Pca {
        points,
        explained,
        components: [c0, c1],
        mean,
    })
}

fn sorted_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

fn fix_sign(mut v: Vec<f64>) -> Vec<f64> {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * max) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    #[test]
    fn line_data_has_one_component() {
        let dir = [0.2, -0.5, 0.1, 0.8];
        let data: Vec<Vec<f64>> = (0..10)
            .map(|i| dir.iter().map(|d| d * i as f64 + 1.0).collect())
            .collect();
        let p = pca_project(&data).unwrap();
        assert_eq!(p.points.len(), 10);
        assert!(p.explained[0] > 1.0);
        assert!(p.explained[1].abs() < 1e-12);
        assert!(p.components[0][0] > 0.0);
    }

    #[test]
    fn planar_data_keeps_distances() {
        let mut rng = seeded(4);
        let e1 = [0.6, 0.0, 0.8, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0, 0.0, 0.0];
        for n in [8usize, 3] {
            // n=3 exercises the Gram-matrix branch (d > n)
            let data: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let c = normal_vec(2, &mut rng);
                    (0..5).map(|k| c[0] * e1[k] + c[1] * e2[k] + 3.0).collect()
                })
                .collect();
            let p = pca_project(&data).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let orig: f64 = data[i]
                        .iter()
                        .zip(&data[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let proj = ((p.points[i][0] - p.points[j][0]).powi(2)
                        + (p.points[i][1] - p.points[j][1]).powi(2))
                    .sqrt();
                    assert!((orig - proj).abs() < 1e-9, "n={n}: {orig} vs {proj}");
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(pca_project(&vec![vec![1.0, 2.0]; 5]).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0]]).is_err());
        assert!(pca_project(&[vec![1.0, 2.0], vec![2.0], vec![3.0, 1.0]]).is_err());
    }

    #[test]
    fn sign_convention_is_stable() {
        let mut rng = seeded(8);
        let data: Vec<Vec<f64>> = (0..12).map(|_| normal_vec(3, &mut rng)).collect();
        let neg: Vec<Vec<f64>> = data
            .iter()
            .map(|v| v.iter().map(|x| -x).collect())
            .collect();
        let a = pca_project(&data).unwrap();
        let b = pca_project(&neg).unwrap();
        for k in 0..2 {
            assert!(a.components[k].iter().find(|x| x.abs() > 1e-9).unwrap() > &0.0);
            for (x, y) in a.components[k].iter().zip(&b.components[k]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
