use rand::Rng;

use super::dit::{dit_forward_graph, DiT, DiTConfig, DiTWeights};
use super::schedule::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::optim::Sgd;
use crate::params::GradMap;
use crate::rng::normal_vec;

/// Timestep and noise for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

pub fn draw_noise<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    len: usize,
    count: usize,
    rng: &mut R,
) -> Vec<NoiseDraw> {
    (0..count)
        .map(|_| {
            let t = rng.random_range(1..=schedule.steps());
            NoiseDraw {
                t,
                eps: normal_vec(len, rng),
            }
        })
        .collect()
}

/// Mean over examples of `||eps - predict(x_t, t)||^2`. `predict` receives
/// the example index, the noised input and its timestep.
pub fn diffusion_loss_with<P>(
    g: &mut Graph,
    schedule: &DiffusionSchedule,
    x0: &[&[f64]],
    draws: &[NoiseDraw],
    mut predict: P,
) -> Result<Var>
where
    P: FnMut(&mut Graph, usize, Var, usize) -> Result<Var>,
{
    if x0.is_empty() {
        return Err(Error::invalid("empty diffusion batch"));
    }
    if x0.len() != draws.len() {
        return Err(Error::shape(
            "diffusion_loss draws",
            &[x0.len()],
            &[draws.len()],
        ));
    }
    let mut terms = Vec::with_capacity(x0.len());
    for (i, (x, d)) in x0.iter().zip(draws).enumerate() {
        let xt = q_sample(x, d.t, &d.eps, schedule)?;
        let xt = g.constant(Tensor::row(xt));
        let pred = predict(g, i, xt, d.t)?;
        let eps = g.constant(Tensor::row(d.eps.clone()));
        let diff = g.sub(eps, pred)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        terms.push(g.reshape(s, &[1, 1])?);
    }
    let all = g.concat_rows(&terms)?;
    Ok(g.mean(all))
}

/// Conditional DiT loss with fixed draws; conditions are graph nodes so
/// gradients can reach whatever produced them.
pub fn dit_loss_graph(
    g: &mut Graph,
    cfg: &DiTConfig,
    w: &DiTWeights<Var>,
    schedule: &DiffusionSchedule,
    x0: &[&[f64]],
    conds: &[Var],
    draws: &[NoiseDraw],
) -> Result<Var> {
    if conds.len() != x0.len() {
        return Err(Error::shape(
            "diffusion_loss conditions",
            &[x0.len()],
            &[conds.len()],
        ));
    }
    diffusion_loss_with(g, schedule, x0, draws, |g, i, xt, t| {
        dit_forward_graph(g, cfg, w, xt, t, conds[i])
    })
}

/// One (standardized state, condition) pair.
pub type StateExample<'a> = (&'a [f64], &'a [f64]);

fn bind_batch<'a>(g: &mut Graph, batch: &[StateExample<'a>]) -> (Vec<&'a [f64]>, Vec<Var>) {
    let x0 = batch.iter().map(|(s, _)| *s).collect();
    let conds = batch
        .iter()
        .map(|(_, c)| g.constant(Tensor::row(c.to_vec())))
        .collect();
    (x0, conds)
}

/// Loss value on a batch with fresh timesteps and noise from `rng`.
pub fn state_diffusion_loss<R: Rng + ?Sized>(
    dit: &DiT,
    schedule: &DiffusionSchedule,
    batch: &[StateExample],
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty diffusion batch"));
    }
    let draws = draw_noise(schedule, dit.config.input_len, batch.len(), rng);
    let mut g = Graph::new();
    let w = dit.weights.bind(&mut g, false);
    let (x0, conds) = bind_batch(&mut g, batch);
    let loss = dit_loss_graph(&mut g, &dit.config, &w, schedule, &x0, &conds, &draws)?;
    Ok(g.value(loss).item())
}

/// One optimizer step of the state DiT. Weights are untouched when the loss
/// is not finite.
pub fn dit_train_step<R: Rng + ?Sized>(
    dit: &mut DiT,
    schedule: &DiffusionSchedule,
    opt: &mut Sgd,
    batch: &[StateExample],
    rng: &mut R,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty diffusion batch"));
    }
    let draws = draw_noise(schedule, dit.config.input_len, batch.len(), rng);
    let mut g = Graph::new();
    let w = dit.weights.bind(&mut g, true);
    let (x0, conds) = bind_batch(&mut g, batch);
    let loss = dit_loss_graph(&mut g, &dit.config, &w, schedule, &x0, &conds, &draws)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: format!("diffusion loss {value}"),
        });
    }
    g.backward(loss)?;
    let mut grads = GradMap::new();
    w.collect_grads(&g, "", &mut grads);
    let scale = opt.clip_scale(&grads);
    opt.step_with(&grads, scale, |f| dit.weights.for_each_mut("", f));
    Ok(value)
}
