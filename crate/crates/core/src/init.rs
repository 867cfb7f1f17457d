use nalgebra::DMatrix;
use rand::Rng;

use crate::numcore::Tensor;
use crate::rng::normal_vec;

/// `rows x cols` matrix with orthonormal rows or columns (whichever is
/// shorter), scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::from_vec(tall, short, normal_vec(tall * short, rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.push(gain * v);
        }
    }
    Tensor::matrix(rows, cols, out).expect("orthogonal shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn columns_are_orthonormal() {
        let mut rng = seeded(1);
        for (r, c) in [(6, 6), (8, 3), (3, 8)] {
            let w = orthogonal(r, c, 1.0, &mut rng);
            let gram = if r >= c {
                w.transpose().matmul(&w).unwrap()
            } else {
                w.matmul(&w.transpose()).unwrap()
            };
            let n = r.min(c);
            assert!(gram.dist(&Tensor::eye(n)) < 1e-12);
        }
    }
}
