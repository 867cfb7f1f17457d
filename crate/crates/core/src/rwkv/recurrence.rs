//! The WKV recurrence on plain tensors.
//!
//! Each head keeps a `D x D` matrix `S` whose rows index value channels and
//! whose columns index key channels. One step applies
//!
//! ```text
//! S_t = S_{t-1} (diag(w_t) - kappa_t^T (a_t * kappa_t)) + v_t^T k_t
//! ```
//!
//! [`wkv_unrolled`] evaluates the closed-form sum of decayed key-value
//! outer products and exists mostly as an oracle for [`wkv_step`].

use super::config::{RwkvConfig, KAPPA_NORM_FLOOR, W_MIN};
use super::weights::BlockParams;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One layer's recurrent state: `n_heads` square matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvState {
    pub heads: Vec<Tensor>,
    pub layer_index: usize,
}

impl WkvState {
    pub fn zeros(n_heads: usize, head_dim: usize, layer_index: usize) -> Self {
        WkvState {
            heads: vec![Tensor::zeros(&[head_dim, head_dim]); n_heads],
            layer_index,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.shape()[0])
    }

    /// Frobenius distance over all heads.
    pub fn dist(&self, other: &WkvState) -> f64 {
        self.heads
            .iter()
            .zip(&other.heads)
            .map(|(a, b)| a.dist(b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.head_dim();
        if self.heads.is_empty() || d == 0 {
            return Err(Error::invalid("state has no heads"));
        }
        for h in &self.heads {
            if h.shape() != [d, d] {
                return Err(Error::shape("wkv_state", &[d, d], h.shape()));
            }
            if !h.is_finite() {
                return Err(Error::invalid("state has non-finite entries"));
            }
        }
        Ok(())
    }
}

/// Per-head vectors driving one recurrence step. Every field is
/// `n_heads x head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepSignals {
    pub r: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub w: Tensor,
    pub a: Tensor,
    pub kappa: Tensor,
}

impl TimestepSignals {
    pub fn n_heads(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.r.shape()[1]
    }

    fn head(t: &Tensor, h: usize) -> &[f64] {
        let d = t.shape()[1];
        &t.data()[h * d..(h + 1) * d]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = w.dims2().expect("projection matrix");
    (0..rows)
        .map(|i| {
            let row = &w.data()[i * cols..(i + 1) * cols];
            b.data()[i] + row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()
        })
        .collect()
}

/// Projects one (already token-shifted) input vector into the step signals.
pub fn project_signals(
    cfg: &RwkvConfig,
    x: &[f64],
    params: &BlockParams,
) -> Result<TimestepSignals> {
    if x.len() != cfg.d_model {
        return Err(Error::shape("project_signals", &[cfg.d_model], &[x.len()]));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("project_signals: non-finite input"));
    }
    let shape = [cfg.n_heads, cfg.head_dim];
    let as_heads = |v: Vec<f64>| Tensor::new(shape.to_vec(), v).expect("head reshape");
    let r = affine(&params.w_r, &params.b_r, x);
    let k = affine(&params.w_k, &params.b_k, x);
    let v = affine(&params.w_v, &params.b_v, x);
    let w = affine(&params.w_decay, &params.b_decay, x)
        .into_iter()
        .map(|z| W_MIN + (1.0 - W_MIN) * sigmoid(z))
        .collect();
    let a = affine(&params.w_iclr, &params.b_iclr, x)
        .into_iter()
        .map(|z| 2.0 * sigmoid(z))
        .collect();
    let mut kappa = affine(&params.w_kappa, &params.b_kappa, x);
    for head in kappa.chunks_mut(cfg.head_dim) {
        let n = head
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(KAPPA_NORM_FLOOR);
        head.iter_mut().for_each(|v| *v /= n);
    }
    Ok(TimestepSignals {
        r: as_heads(r),
        k: as_heads(k),
        v: as_heads(v),
        w: as_heads(w),
        a: as_heads(a),
        kappa: as_heads(kappa),
    })
}

/// `diag(w) - kappa^T (a * kappa)` for one head.
pub fn transition_matrix(w: &[f64], a: &[f64], kappa: &[f64]) -> Tensor {
    let d = w.len();
    let mut m = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let diag = if i == j { w[i] } else { 0.0 };
            m.set(i, j, diag - kappa[i] * a[j] * kappa[j]);
        }
    }
    m
}

fn check_signals(prev: &WkvState, s: &TimestepSignals) -> Result<()> {
    if prev.n_heads() != s.n_heads() || prev.head_dim() != s.head_dim() {
        return Err(Error::shape(
            "wkv_step",
            &[prev.n_heads(), prev.head_dim()],
            &[s.n_heads(), s.head_dim()],
        ));
    }
    Ok(())
}

/// One application of the recurrence to every head.
pub fn wkv_step(prev: &WkvState, s: &TimestepSignals) -> Result<WkvState> {
    check_signals(prev, s)?;
    let d = s.head_dim();
    let heads = prev
        .heads
        .iter()
        .enumerate()
        .map(|(h, st)| {
            let (w, a, kap) = (
                TimestepSignals::head(&s.w, h),
                TimestepSignals::head(&s.a, h),
                TimestepSignals::head(&s.kappa, h),
            );
            let (v, k) = (
                TimestepSignals::head(&s.v, h),
                TimestepSignals::head(&s.k, h),
            );
            let ak: Vec<f64> = a.iter().zip(kap).map(|(x, y)| x * y).collect();
            let sd = st.data();
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                let row = &sd[i * d..(i + 1) * d];
                let proj: f64 = row.iter().zip(kap).map(|(x, y)| x * y).sum();
                for j in 0..d {
                    out[i * d + j] = row[j] * w[j] - proj * ak[j] + v[i] * k[j];
                }
            }
            Tensor::matrix(d, d, out).expect("head shape")
        })
        .collect();
    Ok(WkvState {
        heads,
        layer_index: prev.layer_index,
    })
}

/// Closed-form state after `signals.len()` steps from the zero state.
pub fn wkv_unrolled(signals: &[TimestepSignals], layer_index: usize) -> Result<WkvState> {
    let first = signals
        .first()
        .ok_or_else(|| Error::invalid("wkv_unrolled needs at least one timestep"))?;
    let (nh, d) = (first.n_heads(), first.head_dim());
    if signals
        .iter()
        .any(|s| s.n_heads() != nh || s.head_dim() != d)
    {
        return Err(Error::invalid("wkv_unrolled: inconsistent signal shapes"));
    }
    let t = signals.len();
    let mut heads = Vec::with_capacity(nh);
    for h in 0..nh {
        let transitions: Vec<Tensor> = signals
            .iter()
            .map(|s| {
                transition_matrix(
                    TimestepSignals::head(&s.w, h),
                    TimestepSignals::head(&s.a, h),
                    TimestepSignals::head(&s.kappa, h),
                )
            })
            .collect();
        let mut total = Tensor::zeros(&[d, d]);
        for i in 0..t {
            let v = TimestepSignals::head(&signals[i].v, h);
            let k = TimestepSignals::head(&signals[i].k, h);
            let outer = Tensor::matrix(d, 1, v.to_vec())?.matmul(&Tensor::row(k.to_vec()))?;
            let mut term = outer;
            for m in &transitions[i + 1..] {
                term = term.matmul(m)?;
            }
            for (acc, x) in total.data_mut().iter_mut().zip(term.data()) {
                *acc += x;
            }
        }
        heads.push(total);
    }
    Ok(WkvState { heads, layer_index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::rwkv::weights::RwkvWeights;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_signals(nh: usize, d: usize, rng: &mut impl Rng) -> TimestepSignals {
        let mut t = |lo: f64, hi: f64| Tensor::uniform(&[nh, d], lo, hi, rng);
        let r = t(-1.0, 1.0);
        let k = t(-1.0, 1.0);
        let v = t(-1.0, 1.0);
        let w = t(W_MIN, 1.0);
        let a = t(0.0, 2.0);
        let mut kappa = t(-1.0, 1.0);
        for row in kappa.data_mut().chunks_mut(d) {
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

    fn sig(d: usize, w: &[f64], a: &[f64], kappa: &[f64], v: &[f64], k: &[f64]) -> TimestepSignals {
        let m = |x: &[f64]| Tensor::matrix(1, d, x.to_vec()).unwrap();
        TimestepSignals {
            r: m(&vec![0.0; d]),
            k: m(k),
            v: m(v),
            w: m(w),
            a: m(a),
            kappa: m(kappa),
        }
    }

    fn identity_state(d: usize) -> WkvState {
        WkvState {
            heads: vec![Tensor::eye(d)],
            layer_index: 0,
        }
    }

    #[test]
    fn zero_state_step_is_outer_product() {
        let mut rng = seeded(2);
        let s = random_signals(3, 4, &mut rng);
        let next = wkv_step(&WkvState::zeros(3, 4, 0), &s).unwrap();
        for h in 0..3 {
            let v = TimestepSignals::head(&s.v, h);
            let k = TimestepSignals::head(&s.k, h);
            for (i, vi) in v.iter().enumerate() {
                for (j, kj) in k.iter().enumerate() {
                    assert_eq!(next.heads[h].at(i, j), vi * kj);
                }
            }
        }
    }

    #[test]
    fn pure_diagonal_decay() {
        let s = sig(
            2,
            &[0.5, 0.5],
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
        );
        let next = wkv_step(&identity_state(2), &s).unwrap();
        assert_eq!(next.heads[0].data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn full_removal_flips_the_key_direction() {
        let s = sig(
            2,
            &[1.0, 1.0],
            &[2.0, 2.0],
            &[1.0, 0.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
        );
        let next = wkv_step(&identity_state(2), &s).unwrap();
        // Oracle: the transition itself, evaluated densely.
        let m = DMatrix::from_row_slice(2, 2, &[1.0 - 2.0, 0.0, 0.0, 1.0]);
        let expect = DMatrix::<f64>::identity(2, 2) * m;
        assert_eq!(next.heads[0].data(), expect.transpose().as_slice());
        assert_eq!(next.heads[0].data(), &[-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unrolled_single_step_and_zero_values() {
        let mut rng = seeded(3);
        let s = random_signals(2, 3, &mut rng);
        let one = wkv_unrolled(std::slice::from_ref(&s), 0).unwrap();
        let step = wkv_step(&WkvState::zeros(2, 3, 0), &s).unwrap();
        assert!(one.dist(&step) < 1e-15);

        let mut seq: Vec<_> = (0..5).map(|_| random_signals(2, 3, &mut rng)).collect();
        for s in &mut seq {
            s.v = Tensor::zeros(&[2, 3]);
        }
        let z = wkv_unrolled(&seq, 0).unwrap();
        assert_eq!(z, WkvState::zeros(2, 3, 0));

        assert!(wkv_unrolled(&[], 0).is_err());
    }

    #[test]
    fn three_steps_match_closed_form() {
        let mut rng = seeded(4);
        let seq: Vec<_> = (0..3).map(|_| random_signals(2, 4, &mut rng)).collect();
        let mut st = WkvState::zeros(2, 4, 0);
        for s in &seq {
            st = wkv_step(&st, s).unwrap();
        }
        assert!(st.dist(&wkv_unrolled(&seq, 0).unwrap()) <= 1e-10);
    }

    #[test]
    fn step_rejects_mismatched_heads() {
        let mut rng = seeded(5);
        let s = random_signals(2, 4, &mut rng);
        assert!(wkv_step(&WkvState::zeros(3, 4, 0), &s).is_err());
    }

    fn tiny_cfg() -> RwkvConfig {
        RwkvConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            n_layers: 1,
            context_len: 16,
        }
    }

    fn zero_block(cfg: &RwkvConfig) -> BlockParams {
        let mut p = RwkvWeights::init(cfg, &mut seeded(0))
            .unwrap()
            .layers
            .remove(0);
        p.for_each_mut("", &mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0)
        });
        p
    }

    #[test]
    fn zero_weights_give_midpoint_signals() {
        let cfg = tiny_cfg();
        let p = zero_block(&cfg);
        let s = project_signals(&cfg, &[0.3; 8], &p).unwrap();
        let mid = W_MIN + (1.0 - W_MIN) / 2.0;
        assert!(s.w.data().iter().all(|&w| w == mid));
        assert!(s.a.data().iter().all(|&a| a == 1.0));
        // zero kappa is floored, not rejected
        assert!(s.kappa.data().iter().all(|&k| k == 0.0));
    }

    #[test]
    fn kappa_three_four_five_and_identity_receptance() {
        let cfg = tiny_cfg();
        let mut p = zero_block(&cfg);
        p.w_kappa = Tensor::eye(8);
        p.w_r = Tensor::eye(8);
        let mut x = vec![0.0; 8];
        x[0] = 3.0;
        x[1] = 4.0;
        let s = project_signals(&cfg, &x, &p).unwrap();
        assert_eq!(&s.kappa.data()[..4], &[0.6, 0.8, 0.0, 0.0]);

        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        let s = project_signals(&cfg, &e1, &p).unwrap();
        assert_eq!(s.r.data(), &e1[..]);
        assert_eq!(s.r.shape(), &[2, 4]);
    }

    #[test]
    fn signals_stay_in_range() {
        let cfg = tiny_cfg();
        let mut rng = seeded(8);
        let p = RwkvWeights::init(&cfg, &mut rng).unwrap().layers.remove(0);
        for _ in 0..200 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
            let s = project_signals(&cfg, &x, &p).unwrap();
            assert!(s.w.data().iter().all(|&w| w > W_MIN && w < 1.0));
            assert!(s.a.data().iter().all(|&a| (0.0..=2.0).contains(&a)));
            for row in s.kappa.data().chunks(4) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() <= 1e-9);
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn recurrence_matches_unrolled(seed in 0u64..10_000, t in 1usize..=16, d in 1usize..=8, nh in 1usize..=4) {
            let mut rng = seeded(seed);
            let seq: Vec<_> = (0..t).map(|_| random_signals(nh, d, &mut rng)).collect();
            let mut st = WkvState::zeros(nh, d, 0);
            for s in &seq {
                st = wkv_step(&st, s).unwrap();
            }
            let closed = wkv_unrolled(&seq, 0).unwrap();
            proptest::prop_assert!(st.dist(&closed) <= 1e-9);
        }

        #[test]
        fn transition_eigenvalues(d in 2usize..=8, a0 in 0.0f64..=2.0, seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let mut kappa: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = kappa.iter().map(|x| x * x).sum::<f64>().sqrt();
            kappa.iter_mut().for_each(|x| *x /= n);
            let m = transition_matrix(&vec![1.0; d], &vec![a0; d], &kappa);
            let dm = DMatrix::from_row_slice(d, d, m.data());
            let mut eig: Vec<f64> = dm.symmetric_eigenvalues().iter().cloned().collect();
            eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
            proptest::prop_assert!((eig[0] - (1.0 - a0)).abs() < 1e-9);
            for e in &eig[1..] {
                proptest::prop_assert!((e - 1.0).abs() < 1e-9);
            }
        }
    }
}
