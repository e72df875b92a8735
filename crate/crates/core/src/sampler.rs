//! Per-joint multinomial sampling of heatmap cells.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose2D;
use crate::rng;
use crate::synth::{cell_center, HeatmapSet, SparseMap};

/// Samples of one joint: normalized cell centers with their raw heatmap
/// values as likelihoods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSamples {
    pub coords: Vec<[f64; 2]>,
    pub likelihoods: Vec<f64>,
    /// Slot holding the heatmap argmax, when it was injected.
    pub argmax_slot: Option<usize>,
}

impl JointSamples {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSampleSet {
    pub joints: Vec<JointSamples>,
}

fn checked_map(h: &HeatmapSet, joint: usize) -> Result<&SparseMap> {
    let m = h.map(joint);
    if !(m.mass() > 0.0) {
        return Err(Error::EmptyHeatmap(joint));
    }
    Ok(m)
}

/// Draws `n` cells per joint with probability proportional to the cell
/// value. With `include_argmax` only `n - 1` cells are drawn and slot 0
/// holds the argmax cell. Each joint uses its own substream of one seed
/// taken from `rng`, so a joint's samples depend only on its own map.
pub fn sample_heatmaps(
    h: &HeatmapSet,
    n: usize,
    rng: &mut impl RngCore,
    include_argmax: bool,
) -> Result<JointSampleSet> {
    if n == 0 {
        return Err(Error::Config("samples per joint must be at least 1".into()));
    }
    let base = rng.next_u64();
    let size = h.size();
    let mut joints = Vec::with_capacity(h.joint_count());
    for j in 0..h.joint_count() {
        let m = checked_map(h, j)?;
        let mut joint_rng = rng::indexed(base, j as u64);
        let mut cdf = Vec::with_capacity(m.len());
        let mut acc = 0.0;
        for &v in &m.values {
            acc += v as f64;
            cdf.push(acc);
        }
        let mut coords = Vec::with_capacity(n);
        let mut likelihoods = Vec::with_capacity(n);
        let mut argmax_slot = None;
        if include_argmax {
            let (idx, val) = m.argmax().expect("positive mass");
            coords.push(cell_center(idx, size));
            likelihoods.push(val);
            argmax_slot = Some(0);
        }
        while coords.len() < n {
            let u = joint_rng.random::<f64>() * acc;
            // First cell whose cumulative mass exceeds u; zero cells are
            // never selected because their cumulative value repeats.
            let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            coords.push(cell_center(m.indices[k] as usize, size));
            likelihoods.push(m.values[k] as f64);
        }
        joints.push(JointSamples {
            coords,
            likelihoods,
            argmax_slot,
        });
    }
    Ok(JointSampleSet { joints })
}

/// Per-joint argmax cell center; ties go to the lowest row-major index.
pub fn argmax_pose(h: &HeatmapSet) -> Result<Pose2D> {
    let joints = (0..h.joint_count())
        .map(|j| {
            let m = checked_map(h, j)?;
            let (idx, _) = m.argmax().expect("positive mass");
            Ok(cell_center(idx, h.size()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pose2D { joints })
}
