use crate::error::{Error, Result};

/// Lower bound of the per-channel decay `w_t`.
pub const W_MIN: f64 = 0.05;

/// Floor on the key-direction norm before normalization.
pub const KAPPA_NORM_FLOOR: f64 = 1e-8;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RwkvConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub context_len: usize,
}

impl Default for RwkvConfig {
    fn default() -> Self {
        RwkvConfig {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            n_layers: 2,
            context_len: 128,
        }
    }
}

impl RwkvConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("n_layers", self.n_layers),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be at least 1")));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::invalid(format!(
                "n_heads ({}) * head_dim ({}) != d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        Ok(())
    }

    /// Length of one layer's flattened state.
    pub fn state_len(&self) -> usize {
        self.n_heads * self.head_dim * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "rwkv/v{}/d{}/h{}x{}/l{}/ctx{}",
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.head_dim,
            self.n_layers,
            self.context_len
        )
    }
}
