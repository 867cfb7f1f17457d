use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rwkv::WkvState;

/// Heads in ascending order, each matrix row-major.
pub fn flatten_state(state: &WkvState) -> Vec<f64> {
    state
        .heads
        .iter()
        .flat_map(|h| h.data().iter().copied())
        .collect()
}

pub fn unflatten_state(
    s_flat: &[f64],
    n_heads: usize,
    head_dim: usize,
    layer_index: usize,
) -> Result<WkvState> {
    let per = head_dim * head_dim;
    if n_heads == 0 || head_dim == 0 || s_flat.len() != n_heads * per {
        return Err(Error::shape(
            "unflatten_state",
            &[n_heads, head_dim, head_dim],
            &[s_flat.len()],
        ));
    }
    let heads = s_flat
        .chunks(per)
        .map(|c| Tensor::matrix(head_dim, head_dim, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(WkvState { heads, layer_index })
}
