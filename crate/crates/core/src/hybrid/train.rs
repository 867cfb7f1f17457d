//! Parameter generation, the joint objective and its training step.

use rand::Rng;

use super::params::{
    fuse_graph, split_theta_graph, theta_len, theta_static, theta_static_graph, HybridParams,
    ParamNormalizer,
};
use crate::diffusion::{
    dit_forward_graph, dit_loss_graph, draw_noise, sample_strided, DiTWeights, DiffusionSchedule,
    NoiseDraw,
};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::optim::Sgd;
use crate::params::GradMap;
use crate::rng::normal_vec;
use crate::rwkv::{batch_lm_loss, forward_graph, ProjectionOverride, RwkvConfig, RwkvWeights};

/// Smallest `abar_T` the single-step estimate will divide by.
pub const MIN_ALPHA_BAR_T: f64 = 1e-8;

/// Per-sequence conditioning: the embedding of the first token.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    pub c: Vec<f64>,
}

/// First-position rows of embedded sequences (`seq_len x d_model` each).
pub fn global_condition(embedded: &[Tensor]) -> Result<Vec<ConditionVector>> {
    if embedded.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    embedded
        .iter()
        .map(|x| {
            let (_, cols) = x
                .dims2()
                .ok_or_else(|| Error::invalid("embedded sequence must be a matrix"))?;
            let c = x.data()[..cols].to_vec();
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("condition is not finite"));
            }
            Ok(ConditionVector { c })
        })
        .collect()
}

/// Condition node for a token sequence, so gradients reach the embedding.
pub fn condition_graph(g: &mut Graph, embedding: Var, tokens: &[usize]) -> Result<Var> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::invalid("empty sequence"))?;
    g.gather_rows(embedding, &[*first])
}

fn check_alpha_bar(schedule: &DiffusionSchedule) -> Result<f64> {
    let ab = schedule.alpha_bar(schedule.steps());
    if ab < MIN_ALPHA_BAR_T {
        return Err(Error::domain(
            "generate_params",
            format!("alpha_bar_T = {ab:e} is below {MIN_ALPHA_BAR_T:e}"),
        ));
    }
    Ok(ab)
}

/// `(x_T - sqrt(1 - abar_T) eps_hat) / sqrt(abar_T)`.
pub fn single_step_x0(
    g: &mut Graph,
    schedule: &DiffusionSchedule,
    x_t: Var,
    eps_hat: Var,
) -> Result<Var> {
    let ab = check_alpha_bar(schedule)?;
    let e = g.scale(eps_hat, (1.0 - ab).sqrt());
    let d = g.sub(x_t, e)?;
    Ok(g.scale(d, 1.0 / ab.sqrt()))
}

/// Differentiable train-mode parameters from starting noise `eps`,
/// de-standardized with `norm`.
pub fn generate_params_graph(
    g: &mut Graph,
    hybrid: &HybridParams,
    dit: &DiTWeights<Var>,
    schedule: &DiffusionSchedule,
    c: Var,
    eps: &[f64],
    norm: &ParamNormalizer,
) -> Result<Var> {
    let cfg = &hybrid.param_dit.config;
    if eps.len() != cfg.input_len {
        return Err(Error::shape(
            "generate_params noise",
            &[eps.len()],
            &[cfg.input_len],
        ));
    }
    check_alpha_bar(schedule)?;
    let x_t = g.constant(Tensor::row(eps.to_vec()));
    let eps_hat = dit_forward_graph(g, cfg, dit, x_t, schedule.steps(), c)?;
    let x0 = single_step_x0(g, schedule, x_t, eps_hat)?;
    let scaled = g.scale(x0, norm.std);
    Ok(g.add_scalar(scaled, norm.mean))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMode {
    /// Single-step estimate from `x_T`.
    Train,
    /// `gen_steps` strided deterministic reverse steps.
    Eval,
}

/// Generated parameters (de-standardized) from starting noise `x_t`.
pub fn generate_params_from(
    c: &[f64],
    hybrid: &HybridParams,
    schedule: &DiffusionSchedule,
    mode: GenMode,
    x_t: &[f64],
) -> Result<Vec<f64>> {
    let dit = &hybrid.param_dit;
    if c.len() != dit.config.cond_dim {
        return Err(Error::shape(
            "generate_params condition",
            &[c.len()],
            &[dit.config.cond_dim],
        ));
    }
    check_alpha_bar(schedule)?;
    let z = match mode {
        GenMode::Train => {
            let mut g = Graph::new();
            let w = dit.weights.bind(&mut g, false);
            let cv = g.constant(Tensor::row(c.to_vec()));
            let unit = ParamNormalizer::default();
            let out = generate_params_graph(&mut g, hybrid, &w, schedule, cv, x_t, &unit)?;
            g.value(out).data().to_vec()
        }
        GenMode::Eval => sample_strided(dit, schedule, c, x_t, hybrid.config.gen_steps)?,
    };
    Ok(hybrid.normalizer.destandardize(&z))
}

/// Generated parameters with fresh starting noise from `rng`.
pub fn generate_params<R: Rng + ?Sized>(
    c: &[f64],
    hybrid: &HybridParams,
    schedule: &DiffusionSchedule,
    mode: GenMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let x_t = normal_vec(hybrid.param_dit.config.input_len, rng);
    generate_params_from(c, hybrid, schedule, mode, &x_t)
}

/// Diffusion loss of the parameter DiT with `target` (standardized) as the
/// clean sample for every condition.
pub fn param_diffusion_loss_graph(
    g: &mut Graph,
    hybrid: &HybridParams,
    dit: &DiTWeights<Var>,
    schedule: &DiffusionSchedule,
    conds: &[Var],
    target: &[f64],
    draws: &[NoiseDraw],
) -> Result<Var> {
    if conds.is_empty() {
        return Err(Error::invalid("empty condition batch"));
    }
    let x0 = vec![target; conds.len()];
    dit_loss_graph(
        g,
        &hybrid.param_dit.config,
        dit,
        schedule,
        &x0,
        conds,
        draws,
    )
}

/// Loss value against the standardized current static parameters.
pub fn param_diffusion_loss<R: Rng + ?Sized>(
    hybrid: &HybridParams,
    weights: &RwkvWeights,
    schedule: &DiffusionSchedule,
    conds: &[ConditionVector],
    rng: &mut R,
) -> Result<f64> {
    if conds.is_empty() {
        return Err(Error::invalid("empty condition batch"));
    }
    let target = hybrid
        .normalizer
        .standardize(&theta_static(weights, hybrid.config.layer)?);
    let draws = draw_noise(schedule, target.len(), conds.len(), rng);
    let mut g = Graph::new();
    let w = hybrid.param_dit.weights.bind(&mut g, false);
    let cv: Vec<Var> = conds
        .iter()
        .map(|c| g.constant(Tensor::row(c.c.clone())))
        .collect();
    let l = param_diffusion_loss_graph(&mut g, hybrid, &w, schedule, &cv, &target, &draws)?;
    Ok(g.value(l).item())
}

pub fn total_loss(lm: f64, pdiff: f64, lambda_1: f64, lambda_2: f64) -> Result<f64> {
    if !(lambda_1 >= 0.0 && lambda_2 >= 0.0) {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    Ok(lambda_1 * lm + lambda_2 * pdiff)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLosses {
    pub lm: f64,
    pub pdiff: f64,
    pub total: f64,
}

/// Options of a joint step that tests and ablations need.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    /// Use this fusion weight instead of `sigmoid(alpha_logit)` and leave
    /// `alpha_logit` untouched.
    pub frozen_alpha: Option<f64>,
}

fn alpha_node(g: &mut Graph, hybrid: &HybridParams, frozen: Option<f64>) -> (Var, Option<Var>) {
    match frozen {
        Some(a) => (g.constant(Tensor::full(&[1, 1], a)), None),
        None => {
            let logit = g.param(Tensor::full(&[1, 1], hybrid.alpha_logit));
            (g.sigmoid(logit), Some(logit))
        }
    }
}

fn override_for(
    g: &mut Graph,
    cfg: &RwkvConfig,
    layer: usize,
    theta_static: Var,
    theta_gen: Var,
    alpha: Var,
) -> Result<ProjectionOverride> {
    let fused = fuse_graph(g, theta_static, theta_gen, alpha)?;
    let [w_r, w_k, w_v] = split_theta_graph(g, fused, cfg.d_model)?;
    Ok(ProjectionOverride {
        layer,
        w_r,
        w_k,
        w_v,
    })
}

/// One joint optimizer step. On a non-finite loss or update every piece of
/// state is left as it was and the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn joint_train_step<R: Rng + ?Sized>(
    cfg: &RwkvConfig,
    weights: &mut RwkvWeights,
    hybrid: &mut HybridParams,
    schedule: &DiffusionSchedule,
    opt: &mut Sgd,
    batch: &[Vec<usize>],
    rng: &mut R,
    step: u64,
    options: StepOptions,
) -> Result<JointLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let hc = hybrid.config.clone();
    hc.validate(cfg)?;
    let static_now = theta_static(weights, hc.layer)?;
    let norm = hybrid.normalizer.observe(&static_now, hc.norm_momentum);
    let target = norm.standardize(&static_now);
    let n = theta_len(cfg);
    let gen_eps = normal_vec(n, rng);
    let draws = draw_noise(schedule, n, batch.len(), rng);

    let mut g = Graph::new();
    let w = weights.bind(&mut g, true);
    let dit = hybrid.param_dit.weights.bind(&mut g, true);
    let (alpha, alpha_logit) = alpha_node(&mut g, hybrid, options.frozen_alpha);

    let c = condition_graph(&mut g, w.embedding, &batch[0])?;
    let theta_gen = generate_params_graph(&mut g, hybrid, &dit, schedule, c, &gen_eps, &norm)?;
    let theta_s = theta_static_graph(&mut g, &w.layers[hc.layer])?;
    let over = override_for(&mut g, cfg, hc.layer, theta_s, theta_gen, alpha)?;
    let lm = batch_lm_loss(&mut g, cfg, &w, batch, Some(&over))?;

    let conds = batch
        .iter()
        .map(|seq| condition_graph(&mut g, w.embedding, seq))
        .collect::<Result<Vec<_>>>()?;
    let pdiff =
        param_diffusion_loss_graph(&mut g, hybrid, &dit, schedule, &conds, &target, &draws)?;
    let a = g.scale(lm, hc.lambda_1);
    let b = g.scale(pdiff, hc.lambda_2);
    let total = g.add(a, b)?;

    let losses = JointLosses {
        lm: g.value(lm).item(),
        pdiff: g.value(pdiff).item(),
        total: g.value(total).item(),
    };
    if ![losses.lm, losses.pdiff, losses.total]
        .iter()
        .all(|v| v.is_finite())
    {
        log::warn!("step {step}: non-finite joint loss {losses:?}, step rejected");
        return Err(Error::NonFinite {
            step,
            what: format!("joint loss {losses:?}"),
        });
    }
    g.backward(total)?;
    let mut grads = GradMap::new();
    w.collect_grads(&g, "lm.", &mut grads);
    dit.collect_grads(&g, "pdit.", &mut grads);
    if let Some(v) = alpha_logit {
        let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(&[1, 1]));
        grads.insert("alpha_logit".to_string(), grad);
    }

    let saved = (weights.clone(), hybrid.clone(), opt.velocity().clone());
    let scale = opt.clip_scale(&grads);
    let mut alpha_t = Tensor::full(&[1, 1], hybrid.alpha_logit);
    let trains_alpha = alpha_logit.is_some();
    opt.step_with(&grads, scale, |f| {
        weights.for_each_mut("lm.", f);
        hybrid.param_dit.weights.for_each_mut("pdit.", f);
        if trains_alpha {
            f("alpha_logit", &mut alpha_t);
        }
    });
    hybrid.alpha_logit = alpha_t.item();
    hybrid.normalizer = norm;

    let mut finite = hybrid.alpha_logit.is_finite();
    weights.for_each("", &mut |_, t| finite &= t.is_finite());
    hybrid
        .param_dit
        .weights
        .for_each("", &mut |_, t| finite &= t.is_finite());
    if !finite {
        log::warn!("step {step}: update produced non-finite parameters, rolled back");
        *weights = saved.0;
        *hybrid = saved.1;
        opt.set_velocity(saved.2);
        return Err(Error::NonFinite {
            step,
            what: "parameters after update".to_string(),
        });
    }
    Ok(losses)
}

/// Logits of the hybrid model on one sequence with evaluation-mode
/// parameters generated from `x_t`.
pub fn hybrid_logits(
    cfg: &RwkvConfig,
    weights: &RwkvWeights,
    hybrid: &HybridParams,
    schedule: &DiffusionSchedule,
    tokens: &[usize],
    x_t: &[f64],
    alpha: Option<f64>,
) -> Result<Tensor> {
    crate::rwkv::check_tokens(cfg, tokens)?;
    let c =
        weights.embedding.data()[tokens[0] * cfg.d_model..(tokens[0] + 1) * cfg.d_model].to_vec();
    let theta_gen = generate_params_from(&c, hybrid, schedule, GenMode::Eval, x_t)?;
    let alpha = alpha.unwrap_or_else(|| hybrid.alpha());
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut g = Graph::new();
    let w = weights.bind(&mut g, false);
    let a = g.constant(Tensor::full(&[1, 1], alpha));
    let tg = g.constant(Tensor::row(theta_gen));
    let ts = theta_static_graph(&mut g, &w.layers[hybrid.config.layer])?;
    let over = override_for(&mut g, cfg, hybrid.config.layer, ts, tg, a)?;
    let out = forward_graph(&mut g, cfg, &w, tokens, Some(&over), None)?;
    Ok(g.value(out.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiTConfig;
    use crate::hybrid::params::{param_dit_config, HybridConfig};
    use crate::optim::SgdConfig;
    use crate::rng::seeded;
    use crate::rwkv::{forward, lm_train_step};

    fn cfg() -> RwkvConfig {
        RwkvConfig {
            vocab_size: 16,
            d_model: 4,
            n_heads: 2,
            head_dim: 2,
            n_layers: 2,
            context_len: 12,
        }
    }

    fn dit_cfg(c: &RwkvConfig) -> DiTConfig {
        DiTConfig {
            depth: 1,
            width: 8,
            n_heads: 2,
            ..param_dit_config(c)
        }
    }

    fn setup(seed: u64) -> (RwkvConfig, RwkvWeights, HybridParams, DiffusionSchedule) {
        let c = cfg();
        let w = RwkvWeights::init(&c, &mut seeded(seed)).unwrap();
        let hp = HybridParams::new(
            &c,
            HybridConfig::for_model(&c),
            dit_cfg(&c),
            &mut seeded(seed + 1),
        )
        .unwrap();
        (c, w, hp, DiffusionSchedule::linear(20, 1e-3, 0.1).unwrap())
    }

    fn batch() -> Vec<Vec<usize>> {
        vec![
            vec![1, 5, 2, 7, 3, 9],
            vec![4, 4, 8, 1, 0, 2],
            vec![1, 3, 3, 6, 2, 2],
        ]
    }

    #[test]
    fn condition_is_first_embedding() {
        let e = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = global_condition(std::slice::from_ref(&e)).unwrap();
        assert_eq!(c[0].c, vec![1.0, 2.0]);
        assert!(global_condition(&[]).is_err());

        let (c, w, _, _) = setup(0);
        let emb = |toks: &[usize]| forward_graph_embedded(&c, &w, toks);
        assert_eq!(
            global_condition(&[emb(&[3, 1, 2, 5])]).unwrap(),
            global_condition(&[emb(&[3, 5, 1, 2])]).unwrap()
        );
        assert_ne!(
            global_condition(&[emb(&[3, 1])]).unwrap(),
            global_condition(&[emb(&[4, 1])]).unwrap()
        );
    }

    fn forward_graph_embedded(c: &RwkvConfig, w: &RwkvWeights, toks: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let out = forward_graph(&mut g, c, &b, toks, None, None).unwrap();
        g.value(out.embedded).clone()
    }

    #[test]
    fn perfect_predictor_estimates_zero() {
        let s = DiffusionSchedule::linear(20, 1e-3, 0.1).unwrap();
        let ab = s.alpha_bar(s.steps());
        let x_t = vec![0.3, -1.2, 2.5];
        // exact noise of x_t when the clean sample is zero
        let truth: Vec<f64> = x_t.iter().map(|v| v / (1.0 - ab).sqrt()).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::row(x_t));
        let ev = g.constant(Tensor::row(truth));
        let x0 = single_step_x0(&mut g, &s, xv, ev).unwrap();
        assert!(g.value(x0).data().iter().all(|v| v.abs() < 1e-12));
        let tiny = DiffusionSchedule::linear(400, 0.3, 0.4).unwrap();
        assert!(single_step_x0(&mut g, &tiny, xv, ev).is_err());
    }

    #[test]
    fn generated_shapes_and_eval_consistency() {
        let (c, _, hp, s) = setup(1);
        let cond = vec![0.1, -0.2, 0.3, 0.4];
        let mut rng = seeded(5);
        let t = generate_params(&cond, &hp, &s, GenMode::Train, &mut rng).unwrap();
        assert_eq!(t.len(), theta_len(&c));
        let x_t = normal_vec(theta_len(&c), &mut seeded(6));
        let a = generate_params_from(&cond, &hp, &s, GenMode::Eval, &x_t).unwrap();
        let b = generate_params_from(&cond, &hp, &s, GenMode::Eval, &x_t).unwrap();
        assert_eq!(a, b);
        // full-length strided pass is the full deterministic sampler
        let mut full = hp.clone();
        full.config.gen_steps = s.steps();
        let strided = generate_params_from(&cond, &full, &s, GenMode::Eval, &x_t).unwrap();
        let direct = crate::diffusion::ddpm_sample_standardized(
            &hp.param_dit,
            &s,
            &cond,
            Some(&x_t),
            crate::diffusion::SamplerMode::Deterministic,
            &mut seeded(0),
        )
        .unwrap();
        let direct = hp.normalizer.destandardize(&direct);
        let err = strided
            .iter()
            .zip(&direct)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(2.0, 5.0, 1.0, 0.1).unwrap(), 2.5);
        assert_eq!(total_loss(2.0, 5.0, 1.0, 0.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 5.0, 0.0, 1.0).unwrap(), 5.0);
        assert!(total_loss(2.0, 5.0, -1.0, 0.1).is_err());
        // exact linearity in each component
        let a = total_loss(1.5, 4.0, 0.5, 0.25).unwrap();
        let b = total_loss(3.0, 4.0, 0.5, 0.25).unwrap();
        assert_eq!(b - a, 0.5 * 1.5);
    }

    #[test]
    fn param_loss_oracles() {
        let (c, w, mut hp, s) = setup(2);
        hp.normalizer = hp.normalizer.observe(&theta_static(&w, 1).unwrap(), 0.99);
        let conds = vec![ConditionVector { c: vec![0.5; 4] }];
        let mut rng = seeded(3);
        for _ in 0..3 {
            assert!(param_diffusion_loss(&hp, &w, &s, &conds, &mut rng).unwrap() >= 0.0);
        }
        assert!(param_diffusion_loss(&hp, &w, &s, &[], &mut rng).is_err());

        // zero network: Monte-Carlo mean of ||eps||^2 over 10k draws
        let n = theta_len(&c);
        let target = vec![0.0; n];
        let draws = draw_noise(&s, n, 10_000, &mut seeded(4));
        let oracle = draws
            .iter()
            .map(|d| d.eps.iter().map(|e| e * e).sum::<f64>())
            .sum::<f64>()
            / draws.len() as f64;
        let mut g = Graph::new();
        let x0 = vec![target.as_slice(); draws.len()];
        let l = crate::diffusion::diffusion_loss_with(&mut g, &s, &x0, &draws, |g, _, _, _| {
            Ok(g.constant(Tensor::zeros(&[1, n])))
        })
        .unwrap();
        let v = g.value(l).item();
        assert!((v - oracle).abs() < 1e-9);
        let se = (2.0 * n as f64 / 10_000.0).sqrt();
        assert!((v - n as f64).abs() < 4.0 * se, "{v} vs {n}");
    }

    #[test]
    fn alpha_one_matches_static_model() {
        let (c, w, hp, s) = setup(3);
        let toks = vec![2, 7, 1, 8, 2, 8];
        let x_t = normal_vec(theta_len(&c), &mut seeded(9));
        let hyb = hybrid_logits(&c, &w, &hp, &s, &toks, &x_t, Some(1.0)).unwrap();
        let (stat, _) = forward(&c, &w, &toks).unwrap();
        let err = hyb
            .data()
            .iter()
            .zip(stat.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-9, "{err}");
        let mixed = hybrid_logits(&c, &w, &hp, &s, &toks, &x_t, None).unwrap();
        assert_ne!(mixed, stat);
    }

    #[test]
    fn joint_step_reaches_every_parameter_group() {
        let (c, mut w, mut hp, s) = setup(4);
        let before = (w.clone(), hp.clone());
        let mut opt = Sgd::new(SgdConfig::default());
        let l = joint_train_step(
            &c,
            &mut w,
            &mut hp,
            &s,
            &mut opt,
            &batch(),
            &mut seeded(1),
            0,
            StepOptions::default(),
        )
        .unwrap();
        assert!(l.lm.is_finite() && l.pdiff > 0.0);
        assert!((l.total - (l.lm + 0.1 * l.pdiff)).abs() < 1e-12);
        assert_ne!(hp.alpha_logit, before.1.alpha_logit);
        assert_ne!(w.layers[1].w_r, before.0.layers[1].w_r);
        assert_ne!(w.layers[0].w_decay, before.0.layers[0].w_decay);
        assert_ne!(w.head_w, before.0.head_w);
        assert_ne!(
            hp.param_dit.weights.blocks[0].fc1_w,
            before.1.param_dit.weights.blocks[0].fc1_w
        );
        assert_ne!(hp.param_dit.weights.c_w, before.1.param_dit.weights.c_w);
        assert_eq!(hp.normalizer.count, 1);
    }

    #[test]
    fn no_diffusion_weight_and_unit_alpha_is_plain_lm_training() {
        let (c, w0, hp0, s) = setup(5);
        let mut hc = hp0.config.clone();
        hc.lambda_2 = 0.0;
        let mut hp = HybridParams { config: hc, ..hp0 };
        let mut w_h = w0.clone();
        let mut w_b = w0;
        let mut opt_h = Sgd::new(SgdConfig::default());
        let mut opt_b = Sgd::new(SgdConfig::default());
        let mut rng = seeded(2);
        let opts = StepOptions {
            frozen_alpha: Some(1.0),
        };
        for step in 0..5 {
            let lh = joint_train_step(
                &c,
                &mut w_h,
                &mut hp,
                &s,
                &mut opt_h,
                &batch(),
                &mut rng,
                step,
                opts,
            )
            .unwrap();
            let lb = lm_train_step(&c, &mut w_b, &mut opt_b, &batch(), step).unwrap();
            assert!(
                (lh.lm - lb).abs() <= 1e-12,
                "step {step}: {} vs {lb}",
                lh.lm
            );
            assert_eq!(lh.total, lh.lm);
        }
    }

    #[test]
    fn non_finite_loss_leaves_state_untouched() {
        let (c, mut w, mut hp, s) = setup(6);
        w.head_w.data_mut()[0] = f64::NAN;
        let before = (w.clone(), hp.clone());
        let mut opt = Sgd::new(SgdConfig::default());
        let r = joint_train_step(
            &c,
            &mut w,
            &mut hp,
            &s,
            &mut opt,
            &batch(),
            &mut seeded(1),
            7,
            StepOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite { step: 7, .. })));
        assert_eq!(hp, before.1);
        assert!(w.head_w.data()[0].is_nan());
        assert_eq!(w.layers, before.0.layers);
        assert!(opt.velocity().is_empty());
    }
}
