//! `DSCKPT01` checkpoints: named tensors, optimizer velocity, step and RNG.

use std::collections::BTreeMap;
use std::path::Path;

use dreamstate::binio::{write_atomic, Reader, Writer};
use dreamstate::rng::{RngState, RNG_STATE_BYTES};
use dreamstate::{Error, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor '{name}'")))
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC)
            .u32(CHECKPOINT_VERSION)
            .str(&self.fingerprint);
        w.u64(self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            w.str(name).u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.u64(self.optimizer.len() as u64);
        for (name, v) in &self.optimizer {
            w.str(name).f64s(v);
        }
        w.u64(self.step).bytes(&self.rng.to_bytes());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format(
                "not a DSCKPT01 checkpoint (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let fingerprint = r.str()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let rank = r.u32()?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Format(format!("tensor '{name}' has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
            tensors.insert(name, t);
        }
        let mut optimizer = BTreeMap::new();
        for _ in 0..r.u64()? {
            let name = r.str()?;
            optimizer.insert(name, r.f64s()?);
        }
        let step = r.u64()?;
        let rng = RngState::from_bytes(r.take(RNG_STATE_BYTES)?)?;
        r.expect_end()?;
        Ok(Checkpoint {
            fingerprint,
            tensors,
            optimizer,
            step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and checks the fingerprint in one go.
    pub fn load_expecting(path: &Path, fingerprint: &str) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        c.check_fingerprint(fingerprint)?;
        Ok(c)
    }
}
