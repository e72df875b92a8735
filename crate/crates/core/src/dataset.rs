//! Dataset records and their on-disk container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic       4 bytes "HLDS"
//! version     u32     currently 1
//! units       u32 length + UTF-8 ("decimeters")
//! skeleton    u32 joint count J, then per joint: name (u32 length + UTF-8),
//!             parent u32, mirror u32, rest offset 3 x f64, angle limit f64
//! seed        u64
//! size        u32     heatmap side length
//! count       u64     number of records
//! record*     index u64
//!             pose J x 3 f64 (mean-centered, decimeters)
//!             camera: focal f64, principal 2 x f64, crop u32, translation 3 x f64
//!             has_alt u8, then J x 3 f64 alternative pose when 1
//!             per joint: corruption code u8, cell count u32,
//!                        cell indices u16 each, cell values f32 each
//! ```

use std::path::Path;

use serde::Serialize;

use crate::binio::{read_file, write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::pose::{Pose3D, Skeleton};
use crate::synth::{CameraModel, CorruptionMode, HeatmapSet, SparseMap};

const MAGIC: &[u8; 4] = b"HLDS";
pub const DATASET_VERSION: u32 = 1;
pub const UNITS: &str = "decimeters";
const WHAT: &str = "dataset";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub index: u64,
    /// Ground truth, mean-centered. `pose + camera.translation` is the
    /// camera-frame pose that produced the heatmaps.
    pub pose: Pose3D,
    pub camera: CameraModel,
    pub heatmaps: HeatmapSet,
    pub modes: Vec<CorruptionMode>,
    /// Second pose with the same projection, for constructed-ambiguity records.
    pub alt_pose: Option<Pose3D>,
}

impl Record {
    pub fn is_ambiguous(&self) -> bool {
        self.alt_pose.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub seed: u64,
    pub heatmap_size: usize,
    pub records: Vec<Record>,
}

fn put_pose(enc: &mut Encoder, pose: &Pose3D) {
    for p in &pose.joints {
        enc.f64s(p);
    }
}

fn get_pose(dec: &mut Decoder<'_>, j: usize) -> Result<Pose3D> {
    let flat = dec.f64s(j * 3)?;
    Ok(Pose3D::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let j = self.skeleton.joint_count();
        for r in &self.records {
            let bad = |d: String| Err(Error::format(WHAT, format!("record {}: {d}", r.index)));
            if r.pose.joint_count() != j || r.alt_pose.as_ref().is_some_and(|p| p.joint_count() != j) {
                return bad(format!("pose does not have {j} joints"));
            }
            if r.heatmaps.joint_count() != j || r.modes.len() != j {
                return bad(format!("expected {j} heatmaps and corruption labels"));
            }
            if r.heatmaps.size() != self.heatmap_size || r.camera.crop != self.heatmap_size {
                return bad(format!("heatmap size differs from {}", self.heatmap_size));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut enc = Encoder::new();
        enc.bytes(MAGIC);
        enc.u32(DATASET_VERSION);
        enc.str(UNITS);
        let skel = &self.skeleton;
        enc.u32(skel.joint_count() as u32);
        for j in 0..skel.joint_count() {
            enc.str(&skel.names()[j]);
            enc.u32(skel.parent(j) as u32);
            enc.u32(skel.mirror(j) as u32);
            enc.f64s(&skel.rest_offset(j));
            enc.f64(skel.angle_limit(j));
        }
        enc.u64(self.seed);
        enc.u32(self.heatmap_size as u32);
        enc.u64(self.records.len() as u64);
        for r in &self.records {
            enc.u64(r.index);
            put_pose(&mut enc, &r.pose);
            let c = &r.camera;
            enc.f64(c.focal);
            enc.f64s(&c.principal);
            enc.u32(c.crop as u32);
            enc.f64s(&c.translation);
            match &r.alt_pose {
                None => enc.u8(0),
                Some(p) => {
                    enc.u8(1);
                    put_pose(&mut enc, p);
                }
            }
            for (m, mode) in r.heatmaps.maps().iter().zip(&r.modes) {
                enc.u8(mode.code());
                enc.u32(m.len() as u32);
                for &i in &m.indices {
                    enc.u16(i);
                }
                for &v in &m.values {
                    enc.f32(v);
                }
            }
        }
        Ok(enc.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(WHAT, bytes);
        dec.expect_magic(MAGIC)?;
        dec.expect_version(DATASET_VERSION)?;
        let units = dec.str()?;
        if units != UNITS {
            return Err(dec.error(format!("unsupported units `{units}`")));
        }
        let j = dec.u32()? as usize;
        let (mut names, mut parents, mut mirror, mut offsets, mut limits) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..j {
            names.push(dec.str()?);
            parents.push(dec.u32()? as usize);
            mirror.push(dec.u32()? as usize);
            let o = dec.f64s(3)?;
            offsets.push([o[0], o[1], o[2]]);
            limits.push(dec.f64()?);
        }
        let skeleton = Skeleton::new(names, parents, mirror, offsets, limits)?;
        let seed = dec.u64()?;
        let heatmap_size = dec.u32()? as usize;
        let count = dec.u64()?;
        let mut records = Vec::with_capacity((count as usize).min(1 << 16));
        for _ in 0..count {
            let index = dec.u64()?;
            let pose = get_pose(&mut dec, j)?;
            let focal = dec.f64()?;
            let pp = dec.f64s(2)?;
            let crop = dec.u32()? as usize;
            let t = dec.f64s(3)?;
            let camera = CameraModel::new(focal, [pp[0], pp[1]], crop, [t[0], t[1], t[2]])?;
            let alt_pose = match dec.u8()? {
                0 => None,
                1 => Some(get_pose(&mut dec, j)?),
                other => return Err(dec.error(format!("record {index}: invalid alternative flag {other}"))),
            };
            let mut maps = Vec::with_capacity(j);
            let mut modes = Vec::with_capacity(j);
            for _ in 0..j {
                let code = dec.u8()?;
                modes.push(
                    CorruptionMode::from_code(code)
                        .ok_or_else(|| dec.error(format!("record {index}: corruption code {code}")))?,
                );
                let n = dec.u32()? as usize;
                let mut m = SparseMap {
                    indices: Vec::with_capacity(n.min(1 << 16)),
                    values: Vec::with_capacity(n.min(1 << 16)),
                };
                for _ in 0..n {
                    m.indices.push(dec.u16()?);
                }
                for _ in 0..n {
                    m.values.push(dec.f32()?);
                }
                maps.push(m);
            }
            records.push(Record {
                index,
                pose,
                camera,
                heatmaps: HeatmapSet::new(heatmap_size, maps)?,
                modes,
                alt_pose,
            });
        }
        dec.finish()?;
        let ds = Self {
            skeleton,
            seed,
            heatmap_size,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    /// Plain-text export for inspection; not read back.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }

    /// Bytes of pose, camera and stored heatmap cells, without framing.
    pub fn payload_bytes(&self) -> usize {
        let j = self.skeleton.joint_count();
        self.records
            .iter()
            .map(|r| {
                let poses = if r.alt_pose.is_some() { 2 } else { 1 };
                poses * j * 24 + 9 * 8 + r.heatmaps.stored_cells() * 6
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{AmbiguitySpec, CorruptionSpec, Generator, GeneratorConfig};

    fn dataset(n: u64) -> Dataset {
        let skel = Skeleton::default16();
        let cfg = GeneratorConfig {
            corruptions: vec![
                CorruptionSpec::new(CorruptionMode::Bimodal, 0.3),
                CorruptionSpec::new(CorruptionMode::Wide, 0.1),
                CorruptionSpec::new(CorruptionMode::Occluded, 0.02),
            ],
            ambiguity: Some(AmbiguitySpec {
                joint: 15,
                probability: 0.5,
                depth_angle: [35.0, 65.0],
            }),
            ..GeneratorConfig::default()
        };
        let gen = Generator::new(skel.clone(), cfg).unwrap();
        Dataset {
            skeleton: skel,
            seed: 3,
            heatmap_size: 64,
            records: gen.records(3, 0..n).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = dataset(20);
        let bytes = ds.encode().unwrap();
        let back = Dataset::decode(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset {
            skeleton: Skeleton::default16(),
            seed: 0,
            heatmap_size: 64,
            records: Vec::new(),
        };
        let back = Dataset::decode(&ds.encode().unwrap()).unwrap();
        assert!(back.records.is_empty());
        assert_eq!(back, ds);
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = dataset(2).encode().unwrap();
        let err = Dataset::decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(Dataset::decode(&v), Err(Error::Version { found: 2, .. })));
    }
}
