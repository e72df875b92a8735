//! Parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "HLCK"
//! version      u32      currently 1
//! metadata     u32 length + UTF-8 text (model configuration, TOML)
//! count        u32      number of parameter entries
//! entry*       u32 name length + UTF-8 name
//!              u32 rank, then u64 per dimension
//!              f64 payload, row-major, product(dims) values
//! has_adam     u8       0 or 1
//! adam         u64 step count, f64 learning rate, beta1, beta2, epsilon,
//!              u32 moment count k, then for each of the first k entries:
//!              first moment payload, second moment payload (shapes as the
//!              entry). Entries past k, such as the schedule, have none.
//! ```
//!
//! Names are namespaced by component (`conditioner/...`, `denoiser/...`,
//! `schedule/...`).

use std::path::Path;

use crate::binio::{read_file, write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HLCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub entries: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_store(metadata: String, store: &ParamStore, adam: Option<&AdamState>) -> Self {
        let entries = store
            .iter()
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect();
        Self {
            metadata,
            entries,
            adam: adam.cloned(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every entry of `store` from the checkpoint. Entries without a
    /// counterpart in the store (for example `schedule/...`) are ignored.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|p| p.name().to_string()).collect();
        for name in names {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::format(WHAT, format!("missing parameter `{name}`")))?;
            store.set_by_name(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(MAGIC);
        enc.u32(CHECKPOINT_VERSION);
        enc.str(&self.metadata);
        enc.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            enc.str(name);
            enc.u32(t.shape().len() as u32);
            for &d in t.shape() {
                enc.u64(d as u64);
            }
            enc.f64s(t.data());
        }
        match &self.adam {
            None => enc.u8(0),
            Some(adam) => {
                enc.u8(1);
                enc.u64(adam.step_count);
                enc.f64(adam.config.learning_rate);
                enc.f64(adam.config.beta1);
                enc.f64(adam.config.beta2);
                enc.f64(adam.config.epsilon);
                enc.u32(adam.first_moment.len() as u32);
                for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
                    enc.f64s(m.data());
                    enc.f64s(v.data());
                }
            }
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(WHAT, bytes);
        dec.expect_magic(MAGIC)?;
        dec.expect_version(CHECKPOINT_VERSION)?;
        let metadata = dec.str()?;
        let count = dec.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = dec.str()?;
            let rank = dec.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(dec.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| dec.error(format!("entry `{name}` is too large")))?;
            let data = dec.f64s(n)?;
            entries.push((name, Tensor::new(shape, data)?));
        }
        let adam = match dec.u8()? {
            0 => None,
            1 => {
                let step_count = dec.u64()?;
                let config = AdamConfig {
                    learning_rate: dec.f64()?,
                    beta1: dec.f64()?,
                    beta2: dec.f64()?,
                    epsilon: dec.f64()?,
                };
                let moments = dec.u32()? as usize;
                if moments > entries.len() {
                    return Err(dec.error(format!("{moments} optimizer moments for {} entries", entries.len())));
                }
                let mut first_moment = Vec::with_capacity(moments);
                let mut second_moment = Vec::with_capacity(moments);
                for (_, t) in &entries[..moments] {
                    first_moment.push(Tensor::new(t.shape().to_vec(), dec.f64s(t.len())?)?);
                    second_moment.push(Tensor::new(t.shape().to_vec(), dec.f64s(t.len())?)?);
                }
                Some(AdamState {
                    config,
                    step_count,
                    first_moment,
                    second_moment,
                })
            }
            other => return Err(dec.error(format!("invalid optimizer flag {other}"))),
        };
        dec.finish()?;
        Ok(Self {
            metadata,
            entries,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
