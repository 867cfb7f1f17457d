//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_floored, finite_difference_check_many,
};
pub use graph::{evaluate, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_of_ones() {
        let (out, _) = evaluate(|g| {
            let a = g.constant(Tensor::ones(&[2, 3]));
            let b = g.constant(Tensor::ones(&[3, 2]));
            g.matmul(a, b)
        })
        .unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[3.0; 4]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let (out, _) = evaluate(|g| {
            let a = g.constant(Tensor::row(vec![0.0; 3]));
            g.softmax_rows(a)
        })
        .unwrap();
        assert!(close(out.data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let (out, _) = evaluate(|g| {
            let a = g.constant(Tensor::row(vec![3.0, 4.0]));
            g.l2_normalize_rows(a, 1e-8)
        })
        .unwrap();
        assert_eq!(out.data(), &[0.6, 0.8]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let err = evaluate(|g| {
            let a = g.constant(Tensor::ones(&[2, 3]));
            let b = g.constant(Tensor::ones(&[2, 3]));
            g.matmul(a, b)
        })
        .err()
        .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");

        let err = evaluate(|g| {
            let a = g.constant(Tensor::ones(&[2, 3]));
            let b = g.constant(Tensor::ones(&[3, 2]));
            g.add(a, b)
        })
        .err()
        .unwrap();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn log_and_sqrt_reject_bad_domain() {
        assert!(evaluate(|g| {
            let a = g.constant(Tensor::row(vec![1.0, -1.0]));
            g.log(a)
        })
        .is_err());
        assert!(evaluate(|g| {
            let a = g.constant(Tensor::row(vec![-0.5]));
            g.sqrt(a)
        })
        .is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 4]));
        let s = g.sigmoid(x);
        let y = g.sum(s);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);

        let mut g = Graph::new();
        let w = g.param(Tensor::ones(&[3, 2]));
        let v = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let wv = g.matmul(w, v).unwrap();
        let y = g.sum(wv);
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x*x + 3x at x=2 -> 2x + 3 = 7
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn finite_difference_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[1, 8], -1.0, 1.0, &mut rng);
        let err = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");

        let err = finite_difference_check(
            |g, x| {
                let e = g.exp(x);
                Ok(g.sum(e))
            },
            &Tensor::zeros(&[1, 8]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");

        let err = finite_difference_check(
            |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
            &Tensor::ones(&[1, 3]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn floor_only_affects_tiny_gradients() {
        // d/dx of 1e-9 * sum(x^3) is 3e-9 x^2, below the central-difference noise
        let x = Tensor::row(vec![0.5, -1.0, 2.0]);
        let f = |g: &mut Graph, vs: &[Var]| {
            let sq = g.mul(vs[0], vs[0])?;
            let cube = g.mul(sq, vs[0])?;
            let s = g.sum(cube);
            Ok(g.scale(s, 1e-9))
        };
        let strict = finite_difference_check_many(f, std::slice::from_ref(&x), 1e-5).unwrap();
        let floored =
            finite_difference_check_floored(f, std::slice::from_ref(&x), 1e-5, 1e-6).unwrap();
        assert!(floored <= strict);
        assert!(floored < 1e-4, "{floored}");
        assert!(finite_difference_check_floored(f, &[x], 1e-5, 0.0).is_err());
    }

    #[test]
    fn finite_difference_rejects_vector_output_and_bad_step() {
        let x = Tensor::ones(&[1, 3]);
        assert!(finite_difference_check(|g, x| Ok(g.exp(x)), &x, 1e-5).is_err());
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &x, 0.5).is_err());
    }

    type Prim = fn(&mut Graph, Var, Var) -> Result<Var>;

    /// Every primitive reduced to a scalar through a fixed random projection so
    /// that the check sees all output coordinates.
    fn primitives() -> Vec<(&'static str, [usize; 2], [usize; 2], Prim)> {
        vec![
            ("matmul", [3, 4], [4, 2], |g, a, b| g.matmul(a, b)),
            ("add", [3, 4], [3, 4], |g, a, b| g.add(a, b)),
            ("sub", [3, 4], [3, 4], |g, a, b| g.sub(a, b)),
            ("mul", [3, 4], [3, 4], |g, a, b| g.mul(a, b)),
            ("add_row", [3, 4], [1, 4], |g, a, b| g.add_row(a, b)),
            ("mul_row", [3, 4], [1, 4], |g, a, b| g.mul_row(a, b)),
            ("scale", [3, 4], [1, 1], |g, a, _| Ok(g.scale(a, -1.7))),
            ("add_scalar", [3, 4], [1, 1], |g, a, _| {
                Ok(g.add_scalar(a, 0.3))
            }),
            ("exp", [3, 4], [1, 1], |g, a, _| Ok(g.exp(a))),
            ("log", [3, 4], [1, 1], |g, a, _| {
                let e = g.exp(a);
                g.log(e)
            }),
            ("sqrt", [3, 4], [1, 1], |g, a, _| {
                let e = g.exp(a);
                g.sqrt(e)
            }),
            ("sigmoid", [3, 4], [1, 1], |g, a, _| Ok(g.sigmoid(a))),
            ("tanh", [3, 4], [1, 1], |g, a, _| Ok(g.tanh(a))),
            ("relu", [3, 4], [1, 1], |g, a, _| Ok(g.relu(a))),
            ("sq_relu", [3, 4], [1, 1], |g, a, _| Ok(g.sq_relu(a))),
            ("silu", [3, 4], [1, 1], |g, a, _| Ok(g.silu(a))),
            ("gelu", [3, 4], [1, 1], |g, a, _| Ok(g.gelu(a))),
            ("softmax_rows", [3, 4], [1, 1], |g, a, _| g.softmax_rows(a)),
            ("log_softmax_rows", [3, 4], [1, 1], |g, a, _| {
                g.log_softmax_rows(a)
            }),
            ("layer_norm_rows", [3, 4], [1, 1], |g, a, _| {
                g.layer_norm_rows(a, 1e-5)
            }),
            ("l2_normalize_rows", [3, 4], [1, 1], |g, a, _| {
                g.l2_normalize_rows(a, 1e-8)
            }),
            ("reshape", [3, 4], [1, 1], |g, a, _| g.reshape(a, &[2, 6])),
            ("slice", [3, 4], [1, 1], |g, a, _| {
                g.slice(a, (1, 3), (0, 3))
            }),
            ("concat_rows", [3, 4], [2, 4], |g, a, b| {
                g.concat_rows(&[a, b, a])
            }),
            ("concat_cols", [3, 4], [3, 2], |g, a, b| {
                g.concat_cols(&[b, a])
            }),
            ("transpose", [3, 4], [1, 1], |g, a, _| g.transpose(a)),
            ("sum", [3, 4], [1, 1], |g, a, _| Ok(g.sum(a))),
            ("mean", [3, 4], [1, 1], |g, a, _| Ok(g.mean(a))),
            ("mean_rows", [3, 4], [1, 1], |g, a, _| g.mean_rows(a)),
            ("gather_rows", [3, 4], [1, 1], |g, a, _| {
                g.gather_rows(a, &[2, 0, 2])
            }),
            ("pick_per_row", [3, 4], [1, 1], |g, a, _| {
                g.pick_per_row(a, &[1, 3, 0])
            }),
        ]
    }

    fn project_to_scalar(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(y).to_vec();
        let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, sa, sb, f) in primitives() {
            for trial in 0..10 {
                let a = Tensor::uniform(&sa, -1.5, 1.5, &mut rng);
                let b = Tensor::uniform(&sb, -1.5, 1.5, &mut rng);
                let err = finite_difference_check_many(
                    |g, vs| {
                        let y = f(g, vs[0], vs[1])?;
                        project_to_scalar(g, y, 99)
                    },
                    &[a, b],
                    1e-5,
                )
                .unwrap();
                assert!(err <= 1e-4, "{name} trial {trial}: {err}");
            }
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let f = {
                let t = g.tanh(v);
                g.sum(t)
            };
            let h = {
                let e = g.exp(v);
                let m = g.mul(e, v).unwrap();
                g.sum(m)
            };
            let out = match which {
                0 => f,
                1 => h,
                _ => {
                    let a = g.scale(f, 2.5);
                    let b = g.scale(h, -0.75);
                    g.add(a, b).unwrap()
                }
            };
            g.backward(out).unwrap();
            g.grad(v).unwrap()
        };
        let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for k in 0..x.len() {
            let expect = 2.5 * gf.data()[k] - 0.75 * gh.data()[k];
            assert!((gc.data()[k] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn identical_inputs_give_identical_results() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
            let mut g = Graph::new();
            let (va, vb) = (g.param(a), g.param(b));
            let m = g.matmul(va, vb).unwrap();
            let s = g.softmax_rows(m).unwrap();
            let l = g.log(s).unwrap();
            let y = g.sum(l);
            g.backward(y).unwrap();
            (g.value(y).clone(), g.grad(va).unwrap(), g.grad(vb).unwrap())
        };
        let (x, y) = (run(), run());
        assert_eq!(x.0.data(), y.0.data());
        assert_eq!(x.1.data(), y.1.data());
        assert_eq!(x.2.data(), y.2.data());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[1, 2]));
        let p = g.param(Tensor::ones(&[1, 2]));
        let m = g.mul(c, p).unwrap();
        let y = g.sum(m);
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 1.0]);
    }
}
