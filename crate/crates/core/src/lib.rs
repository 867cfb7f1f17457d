pub mod analysis;
pub mod binio;
pub mod diffusion;
pub mod error;
pub mod hybrid;
pub mod init;
pub mod numcore;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rwkv;
pub mod state_pipeline;

pub use error::{Error, Result};
pub use numcore::{Graph, Tensor, Var};
