//! Plain language-model training on byte sequences.

use rand::Rng;

use super::config::RwkvConfig;
use super::model::{forward_graph, lm_loss_graph, ProjectionOverride};
use super::weights::RwkvWeights;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Var};
use crate::optim::Sgd;
use crate::params::GradMap;

/// Random windows of at most `seq_len + 1` tokens from sequences with at
/// least two tokens.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &[Vec<usize>],
    batch_size: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let usable: Vec<&Vec<usize>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid("no sequence with at least two tokens"));
    }
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::invalid(
            "batch size and sequence length must be positive",
        ));
    }
    Ok((0..batch_size)
        .map(|_| {
            let s = usable[rng.random_range(0..usable.len())];
            let n = (seq_len + 1).min(s.len());
            let start = rng.random_range(0..=s.len() - n);
            s[start..start + n].to_vec()
        })
        .collect())
}

/// Mean over sequences of each sequence's mean next-token loss.
pub fn batch_lm_loss(
    g: &mut Graph,
    cfg: &RwkvConfig,
    w: &RwkvWeights<Var>,
    batch: &[Vec<usize>],
    over: Option<&ProjectionOverride>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for seq in batch {
        if seq.len() < 2 {
            return Err(Error::invalid("sequence shorter than two tokens"));
        }
        let n = seq.len() - 1;
        let out = forward_graph(g, cfg, w, &seq[..n], over, None)?;
        let l = lm_loss_graph(g, out.logits, &seq[1..])?;
        losses.push(g.reshape(l, &[1, 1])?);
    }
    let all = g.concat_rows(&losses)?;
    Ok(g.mean(all))
}

/// One optimizer step on the language-modeling loss. Weights are untouched
/// when the loss is not finite.
pub fn lm_train_step(
    cfg: &RwkvConfig,
    weights: &mut RwkvWeights,
    opt: &mut Sgd,
    batch: &[Vec<usize>],
    step: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = weights.bind(&mut g, true);
    let loss = batch_lm_loss(&mut g, cfg, &bound, batch, None)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: format!("lm loss {value}"),
        });
    }
    g.backward(loss)?;
    let mut grads = GradMap::new();
    bound.collect_grads(&g, "", &mut grads);
    let scale = opt.clip_scale(&grads);
    opt.step_with(&grads, scale, |f| weights.for_each_mut("", f));
    Ok(value)
}
