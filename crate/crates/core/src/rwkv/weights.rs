use rand::Rng;

use super::config::{RwkvConfig, W_MIN};
use crate::error::{Error, Result};
use crate::init::orthogonal;
use crate::numcore::Tensor;
use crate::params::param_tree;

/// Parameters of one block: token shift, time mixing and channel mixing.
///
/// Projection matrices are stored `out x in`, so a projection of `x` is
/// `W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    /// Per-channel token-shift coefficient.
    pub mu: T,
    pub w_r: T,
    pub b_r: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_decay: T,
    pub b_decay: T,
    pub w_iclr: T,
    pub b_iclr: T,
    pub w_kappa: T,
    pub b_kappa: T,
    pub w_out: T,
    pub b_out: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

param_tree!(BlockParams {
    mu,
    w_r,
    b_r,
    w_k,
    b_k,
    w_v,
    b_v,
    w_decay,
    b_decay,
    w_iclr,
    b_iclr,
    w_kappa,
    b_kappa,
    w_out,
    b_out,
    ffn_w1,
    ffn_b1,
    ffn_w2,
    ffn_b2,
});

#[derive(Clone, Debug, PartialEq)]
pub struct RwkvWeights<T = Tensor> {
    pub embedding: T,
    pub head_w: T,
    pub head_b: T,
    pub layers: Vec<BlockParams<T>>,
}

param_tree!(RwkvWeights {
    embedding, head_w, head_b
} lists { layers: BlockParams });

/// Decay bias giving `w` a spread from `w_lo` to `w_hi` across the channels
/// of each head.
fn decay_bias(cfg: &RwkvConfig, w_lo: f64, w_hi: f64) -> Tensor {
    let d = cfg.head_dim;
    let data = (0..cfg.d_model)
        .map(|c| {
            let frac = if d > 1 {
                (c % d) as f64 / (d - 1) as f64
            } else {
                0.5
            };
            let w = w_lo + (w_hi - w_lo) * frac;
            let s = (w - W_MIN) / (1.0 - W_MIN);
            (s / (1.0 - s)).ln()
        })
        .collect();
    Tensor::row(data)
}

impl RwkvWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &RwkvConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let zeros = |n| Tensor::zeros(&[1, n]);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let mut proj = || orthogonal(d, d, 0.5, &mut *rng);
                let (w_r, w_k, w_v) = (proj(), proj(), proj());
                let (w_decay, w_iclr, w_kappa, w_out) = (proj(), proj(), proj(), proj());
                BlockParams {
                    mu: Tensor::full(&[1, d], 0.5),
                    w_r,
                    b_r: zeros(d),
                    w_k,
                    b_k: zeros(d),
                    w_v,
                    b_v: zeros(d),
                    w_decay,
                    b_decay: decay_bias(cfg, 0.5, 0.98),
                    w_iclr,
                    b_iclr: zeros(d),
                    w_kappa,
                    b_kappa: zeros(d),
                    w_out,
                    b_out: zeros(d),
                    ffn_w1: orthogonal(f, d, 0.5, &mut *rng),
                    ffn_b1: zeros(f),
                    ffn_w2: orthogonal(d, f, 0.5, &mut *rng),
                    ffn_b2: zeros(d),
                }
            })
            .collect();
        Ok(RwkvWeights {
            embedding: Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
            head_w: orthogonal(cfg.vocab_size, d, 0.5, rng),
            head_b: zeros(cfg.vocab_size),
            layers,
        })
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check(&self, cfg: &RwkvConfig) -> Result<()> {
        cfg.validate()?;
        let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.ffn_dim());
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape || !t.is_finite() {
                return Err(Error::Format(format!(
                    "{name}: expected finite {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("embedding", &self.embedding, &[v, d])?;
        expect("head_w", &self.head_w, &[v, d])?;
        expect("head_b", &self.head_b, &[1, v])?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Format(format!(
                "{} layers, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let mut res = Ok(());
        for layer in &self.layers {
            layer.for_each("", &mut |name, t| {
                let shape: &[usize] = match name {
                    "ffn_w1" => &[f, d],
                    "ffn_b1" => &[1, f],
                    "ffn_w2" => &[d, f],
                    n if n.starts_with("w_") => &[d, d],
                    _ => &[1, d],
                };
                if res.is_ok() {
                    res = expect(name, t, shape);
                }
            });
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn init_has_expected_shapes_and_names() {
        let cfg = RwkvConfig {
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 16,
            ..RwkvConfig::default()
        };
        let w = RwkvWeights::init(&cfg, &mut seeded(0)).unwrap();
        w.check(&cfg).unwrap();
        let mut names = Vec::new();
        w.for_each("", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names[0], "embedding");
        assert!(names.contains(&"layers.1.w_kappa".to_string()));
        assert_eq!(names.len(), 3 + 19 * cfg.n_layers);
    }

    #[test]
    fn decay_bias_spans_requested_range() {
        let cfg = RwkvConfig::default();
        let b = decay_bias(&cfg, 0.5, 0.98);
        let w = |x: f64| W_MIN + (1.0 - W_MIN) / (1.0 + (-x).exp());
        assert!((w(b.data()[0]) - 0.5).abs() < 1e-12);
        assert!((w(b.data()[cfg.head_dim - 1]) - 0.98).abs() < 1e-12);
    }
}
