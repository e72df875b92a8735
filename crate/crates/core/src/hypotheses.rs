//! Binary file of sampled hypotheses for a set of records.
//!
//! Layout, little endian: magic `HLHY`, `u32` version, `u32` joints,
//! `u32` hypotheses per record, `u8` deterministic flag, `u64` sampling
//! seed, `u32` timesteps, `u32` samples per joint, `u64` record count, then
//! per record its `u64` dataset index followed by `M * 3J` `f64` values.

use std::path::Path;

use crate::binio::{read_file, write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::pose::{Pose3D, PoseVector};

const MAGIC: &[u8] = b"HLHY";
pub const HYPOTHESES_VERSION: u32 = 1;
const WHAT: &str = "hypotheses file";

#[derive(Clone, Debug, PartialEq)]
pub struct RecordHypotheses {
    pub index: u64,
    pub poses: Vec<PoseVector>,
}

impl RecordHypotheses {
    pub fn to_poses(&self) -> Result<Vec<Pose3D>> {
        self.poses.iter().map(PoseVector::to_pose).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesesFile {
    pub joints: usize,
    pub hypotheses: usize,
    pub deterministic: bool,
    pub seed: u64,
    pub timesteps: usize,
    pub samples: usize,
    pub records: Vec<RecordHypotheses>,
}

impl HypothesesFile {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.poses.len() != self.hypotheses {
                return Err(Error::format(
                    WHAT,
                    format!("record {} has {} hypotheses, expected {}", r.index, r.poses.len(), self.hypotheses),
                ));
            }
            if let Some(p) = r.poses.iter().find(|p| p.0.len() != 3 * self.joints) {
                return Err(Error::format(
                    WHAT,
                    format!("record {} has a pose of length {}, expected {}", r.index, p.0.len(), 3 * self.joints),
                ));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut enc = Encoder::new();
        enc.bytes(MAGIC);
        enc.u32(HYPOTHESES_VERSION);
        enc.u32(self.joints as u32);
        enc.u32(self.hypotheses as u32);
        enc.u8(self.deterministic as u8);
        enc.u64(self.seed);
        enc.u32(self.timesteps as u32);
        enc.u32(self.samples as u32);
        enc.u64(self.records.len() as u64);
        for r in &self.records {
            enc.u64(r.index);
            for p in &r.poses {
                enc.f64s(&p.0);
            }
        }
        Ok(enc.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(WHAT, bytes);
        dec.expect_magic(MAGIC)?;
        dec.expect_version(HYPOTHESES_VERSION)?;
        let joints = dec.u32()? as usize;
        let hypotheses = dec.u32()? as usize;
        let deterministic = match dec.u8()? {
            0 => false,
            1 => true,
            v => return Err(dec.error(format!("deterministic flag {v}"))),
        };
        let seed = dec.u64()?;
        let timesteps = dec.u32()? as usize;
        let samples = dec.u32()? as usize;
        let count = dec.u64()?;
        let per_record = (8 + hypotheses * 3 * joints * 8) as u64;
        if count.saturating_mul(per_record) > bytes.len() as u64 {
            return Err(dec.error(format!("{count} records do not fit in {} bytes", bytes.len())));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let index = dec.u64()?;
            let poses = (0..hypotheses)
                .map(|_| dec.f64s(3 * joints).map(PoseVector))
                .collect::<Result<Vec<_>>>()?;
            records.push(RecordHypotheses { index, poses });
        }
        dec.finish()?;
        Ok(Self {
            joints,
            hypotheses,
            deterministic,
            seed,
            timesteps,
            samples,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
