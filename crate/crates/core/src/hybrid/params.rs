use rand::Rng;

use crate::diffusion::{DiT, DiTConfig};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::rwkv::{BlockParams, RwkvConfig, RwkvWeights};

/// Parameters with magnitude below this are treated as constant.
pub const PARAM_STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct HybridConfig {
    pub lambda_1: f64,
    pub lambda_2: f64,
    /// Reverse steps used to generate parameters at evaluation time.
    pub gen_steps: usize,
    pub alpha_init: f64,
    /// Layer whose receptance/key/value projections are generated.
    pub layer: usize,
    pub norm_momentum: f64,
}

impl HybridConfig {
    pub fn for_model(cfg: &RwkvConfig) -> Self {
        HybridConfig {
            lambda_1: 1.0,
            lambda_2: 0.1,
            gen_steps: 4,
            alpha_init: 0.9,
            layer: cfg.n_layers.saturating_sub(1),
            norm_momentum: 0.99,
        }
    }

    pub fn validate(&self, cfg: &RwkvConfig) -> Result<()> {
        if !(self.lambda_1 >= 0.0 && self.lambda_2 >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.gen_steps == 0 {
            return Err(Error::invalid("gen_steps must be positive"));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(Error::invalid("alpha init must lie in (0, 1)"));
        }
        if self.layer >= cfg.n_layers {
            return Err(Error::invalid(format!(
                "hybrid layer {} out of range for {} layers",
                self.layer, cfg.n_layers
            )));
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return Err(Error::invalid("normalizer momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Running scalar mean and standard deviation of the static parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamNormalizer {
    pub mean: f64,
    pub std: f64,
    /// Number of observations folded in so far.
    pub count: u64,
}

impl Default for ParamNormalizer {
    fn default() -> Self {
        ParamNormalizer {
            mean: 0.0,
            std: 1.0,
            count: 0,
        }
    }
}

impl ParamNormalizer {
    /// Moments after folding in `theta`; the first observation replaces the
    /// defaults outright.
    pub fn observe(&self, theta: &[f64], momentum: f64) -> ParamNormalizer {
        let n = theta.len() as f64;
        let mean = theta.iter().sum::<f64>() / n;
        let std = (theta.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(PARAM_STD_FLOOR);
        if self.count == 0 {
            return ParamNormalizer {
                mean,
                std,
                count: 1,
            };
        }
        ParamNormalizer {
            mean: momentum * self.mean + (1.0 - momentum) * mean,
            std: momentum * self.std + (1.0 - momentum) * std,
            count: self.count + 1,
        }
    }

    pub fn standardize(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * self.std + self.mean).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Trainable state of the dynamic-parameter model on top of a static RWKV
/// model. The static projections are the base model's own `w_r`, `w_k` and
/// `w_v` at `config.layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridParams {
    pub config: HybridConfig,
    pub alpha_logit: f64,
    pub param_dit: DiT,
    pub normalizer: ParamNormalizer,
}

impl HybridParams {
    pub fn new<R: Rng + ?Sized>(
        cfg: &RwkvConfig,
        config: HybridConfig,
        dit_config: DiTConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(cfg)?;
        check_dit_config(cfg, &dit_config)?;
        Ok(HybridParams {
            alpha_logit: logit(config.alpha_init),
            param_dit: DiT::new(dit_config, rng)?,
            normalizer: ParamNormalizer::default(),
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_logit)
    }

    pub fn check(&self, cfg: &RwkvConfig) -> Result<()> {
        self.config.validate(cfg)?;
        check_dit_config(cfg, &self.param_dit.config)?;
        self.param_dit.weights.check(&self.param_dit.config)
    }
}

/// Parameter DiT sizes for a model: generates `3 d^2` values from a
/// `d`-dimensional condition.
pub fn param_dit_config(cfg: &RwkvConfig) -> DiTConfig {
    DiTConfig::for_input(theta_len(cfg), cfg.d_model)
}

fn check_dit_config(cfg: &RwkvConfig, dit: &DiTConfig) -> Result<()> {
    dit.validate()?;
    if dit.input_len != theta_len(cfg) || dit.cond_dim != cfg.d_model {
        return Err(Error::invalid(format!(
            "parameter DiT must map {} -> {}, got {} -> {}",
            cfg.d_model,
            theta_len(cfg),
            dit.cond_dim,
            dit.input_len
        )));
    }
    Ok(())
}

pub fn theta_len(cfg: &RwkvConfig) -> usize {
    3 * cfg.d_model * cfg.d_model
}

/// `concat(vec(W_r), vec(W_k), vec(W_v))`, each row-major.
pub fn theta_static(weights: &RwkvWeights, layer: usize) -> Result<Vec<f64>> {
    let l = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
    Ok([&l.w_r, &l.w_k, &l.w_v]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect())
}

/// Inverse of [`theta_static`]'s layout.
pub fn split_theta(theta: &[f64], d_model: usize) -> Result<[Tensor; 3]> {
    let n = d_model * d_model;
    if theta.len() != 3 * n {
        return Err(Error::shape("split_theta", &[theta.len()], &[3 * n]));
    }
    let part = |i: usize| Tensor::new(vec![d_model, d_model], theta[i * n..(i + 1) * n].to_vec());
    Ok([part(0)?, part(1)?, part(2)?])
}

pub fn theta_static_graph(g: &mut Graph, layer: &BlockParams<Var>) -> Result<Var> {
    let parts = [layer.w_r, layer.w_k, layer.w_v]
        .iter()
        .map(|&w| {
            let n = g.value(w).len();
            g.reshape(w, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&parts)
}

pub fn split_theta_graph(g: &mut Graph, theta: Var, d_model: usize) -> Result<[Var; 3]> {
    let n = d_model * d_model;
    if g.shape(theta) != [1, 3 * n] {
        return Err(Error::shape("split_theta", g.shape(theta), &[1, 3 * n]));
    }
    let mut part = |i: usize| -> Result<Var> {
        let s = g.slice(theta, (0, 1), (i * n, (i + 1) * n))?;
        g.reshape(s, &[d_model, d_model])
    };
    Ok([part(0)?, part(1)?, part(2)?])
}

/// `alpha * theta_static + (1 - alpha) * theta_gen`.
pub fn fuse_params(theta_static: &[f64], theta_gen: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if theta_static.len() != theta_gen.len() {
        return Err(Error::shape(
            "fuse_params",
            &[theta_static.len()],
            &[theta_gen.len()],
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(theta_static
        .iter()
        .zip(theta_gen)
        .map(|(s, g)| alpha * s + (1.0 - alpha) * g)
        .collect())
}

/// Graph form of [`fuse_params`]; `alpha` is a `1 x 1` node.
pub fn fuse_graph(g: &mut Graph, theta_static: Var, theta_gen: Var, alpha: Var) -> Result<Var> {
    if g.shape(alpha) != [1, 1] {
        return Err(Error::shape("fuse_params alpha", g.shape(alpha), &[1, 1]));
    }
    let a = g.matmul(alpha, theta_static)?;
    let one_minus = g.neg(alpha);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let b = g.matmul(one_minus, theta_gen)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn cfg() -> RwkvConfig {
        RwkvConfig {
            vocab_size: 16,
            d_model: 4,
            n_heads: 2,
            head_dim: 2,
            n_layers: 2,
            context_len: 8,
        }
    }

    #[test]
    fn fusion_boundaries_and_arithmetic() {
        let s = vec![2.0, -1.0, 0.25];
        let gvec = vec![4.0, 3.0, 1e9];
        assert_eq!(fuse_params(&s, &gvec, 1.0).unwrap(), s);
        assert_eq!(fuse_params(&s, &gvec, 0.0).unwrap(), gvec);
        assert_eq!(fuse_params(&[2.0], &[4.0], 0.5).unwrap(), vec![3.0]);
        assert!(fuse_params(&s, &gvec[..2], 0.5).is_err());
        assert!(fuse_params(&s, &gvec, 1.5).is_err());
    }

    #[test]
    fn theta_layout_is_r_then_k_then_v() {
        let c = cfg();
        let w = RwkvWeights::init(&c, &mut seeded(1)).unwrap();
        let theta = theta_static(&w, 1).unwrap();
        let n = 16;
        assert_eq!(theta.len(), theta_len(&c));
        assert_eq!(&theta[..n], w.layers[1].w_r.data());
        assert_eq!(&theta[n..2 * n], w.layers[1].w_k.data());
        assert_eq!(&theta[2 * n..], w.layers[1].w_v.data());
        let [r, k, v] = split_theta(&theta, 4).unwrap();
        assert_eq!(r, w.layers[1].w_r);
        assert_eq!(k, w.layers[1].w_k);
        assert_eq!(v, w.layers[1].w_v);

        let mut g = Graph::new();
        let bound = w.bind(&mut g, false);
        let tv = theta_static_graph(&mut g, &bound.layers[1]).unwrap();
        assert_eq!(g.value(tv).data(), theta.as_slice());
        let [gr, _, gv] = split_theta_graph(&mut g, tv, 4).unwrap();
        assert_eq!(g.value(gr), &w.layers[1].w_r);
        assert_eq!(g.value(gv), &w.layers[1].w_v);
    }

    #[test]
    fn graph_fusion_matches_plain_fusion() {
        let s = vec![0.5, -1.5, 2.0];
        let t = vec![1.0, 1.0, -3.0];
        for alpha in [0.0, 0.3, 1.0] {
            let mut g = Graph::new();
            let sv = g.constant(Tensor::row(s.clone()));
            let tv = g.constant(Tensor::row(t.clone()));
            let av = g.constant(Tensor::new(vec![1, 1], vec![alpha]).unwrap());
            let f = fuse_graph(&mut g, sv, tv, av).unwrap();
            assert_eq!(
                g.value(f).data(),
                fuse_params(&s, &t, alpha).unwrap().as_slice()
            );
        }
    }

    #[test]
    fn normalizer_tracks_running_moments() {
        let n0 = ParamNormalizer::default();
        let n1 = n0.observe(&[1.0, 3.0], 0.99);
        assert_eq!((n1.mean, n1.std, n1.count), (2.0, 1.0, 1));
        let n2 = n1.observe(&[3.0, 5.0], 0.5);
        assert_eq!((n2.mean, n2.std), (3.0, 1.0));
        let z = n2.standardize(&[4.0]);
        assert_eq!(n2.destandardize(&z), vec![4.0]);
        let flat = n0.observe(&[2.0, 2.0], 0.9);
        assert_eq!(flat.std, PARAM_STD_FLOOR);
    }

    #[test]
    fn alpha_starts_at_init() {
        let c = cfg();
        let mut dc = param_dit_config(&c);
        dc.depth = 1;
        dc.width = 8;
        dc.n_heads = 2;
        let hp =
            HybridParams::new(&c, HybridConfig::for_model(&c), dc.clone(), &mut seeded(0)).unwrap();
        assert!((hp.alpha() - 0.9).abs() < 1e-12);
        assert_eq!(hp.config.layer, 1);
        hp.check(&c).unwrap();
        let mut bad = dc;
        bad.input_len = 12;
        assert!(HybridParams::new(&c, HybridConfig::for_model(&c), bad, &mut seeded(0)).is_err());
        let mut hc = HybridConfig::for_model(&c);
        hc.lambda_2 = -0.1;
        assert!(hc.validate(&c).is_err());
    }
}
