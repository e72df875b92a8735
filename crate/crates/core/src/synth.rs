//! Procedural ground truth: articulated poses, a pinhole camera, rendered
//! joint heatmaps with optional corruptions, and a constructed depth
//! ambiguity on one limb.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::pose::{
    add3, axis_angle, compose, dot3, mean_center, norm3, rotate, scale3, sub3, Pose2D, Pose3D,
    Rotation, Skeleton, IDENTITY,
};
use crate::rng;

pub const HEATMAP_SIZE: usize = 64;
/// Standard deviation of a clean joint heatmap, in cells.
pub const CLEAN_SIGMA: f64 = 2.0;
/// Rendered cells below this value are not stored.
pub const HEATMAP_FLOOR: f64 = 1e-4;

/// Pinhole camera looking down +z. Pose joints are shifted by
/// `translation` into the camera frame, then projected to pixel
/// coordinates of the `crop` x `crop` heatmap frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    pub principal: [f64; 2],
    pub crop: usize,
    pub translation: [f64; 3],
}

impl CameraModel {
    pub fn new(focal: f64, principal: [f64; 2], crop: usize, translation: [f64; 3]) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        if crop == 0 || crop > 256 {
            return Err(Error::Config(format!("crop size {crop} outside 1..=256")));
        }
        Ok(Self {
            focal,
            principal,
            crop,
            translation,
        })
    }

    /// Principal point at the crop center.
    pub fn centered(focal: f64, crop: usize, translation: [f64; 3]) -> Result<Self> {
        let c = crop as f64 / 2.0;
        Self::new(focal, [c, c], crop, translation)
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        add3(p, self.translation)
    }

    pub fn pixel(&self, joint: usize, p_cam: [f64; 3]) -> Result<[f64; 2]> {
        if !(p_cam[2] > 0.0) {
            return Err(Error::BehindCamera {
                joint,
                depth: p_cam[2],
            });
        }
        Ok([
            self.principal[0] + self.focal * p_cam[0] / p_cam[2],
            self.principal[1] + self.focal * p_cam[1] / p_cam[2],
        ])
    }

    pub fn normalize(&self, px: [f64; 2]) -> [f64; 2] {
        let half = self.crop as f64 / 2.0;
        [px[0] / half - 1.0, px[1] / half - 1.0]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        let half = self.crop as f64 / 2.0;
        [(p[0] + 1.0) * half, (p[1] + 1.0) * half]
    }
}

pub fn project_pixels(pose: &Pose3D, cam: &CameraModel) -> Result<Vec<[f64; 2]>> {
    pose.joints
        .iter()
        .enumerate()
        .map(|(j, p)| cam.pixel(j, cam.to_camera(*p)))
        .collect()
}

pub fn project(pose: &Pose3D, cam: &CameraModel) -> Result<Pose2D> {
    Ok(Pose2D {
        joints: project_pixels(pose, cam)?
            .into_iter()
            .map(|px| cam.normalize(px))
            .collect(),
    })
}

/// Stored nonzero cells of one joint map: ascending row-major indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseMap {
    pub indices: Vec<u16>,
    pub values: Vec<f32>,
}

impl SparseMap {
    pub fn mass(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(index, value)` of the largest cell, lowest index on ties.
    pub fn argmax(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f32)> = None;
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i as usize, v));
            }
        }
        best.map(|(i, v)| (i, v as f64))
    }
}

/// Per-joint `size` x `size` likelihood grids. Values are unnormalized
/// (a clean joint peaks near 1.0) and stored sparsely as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSet {
    size: usize,
    maps: Vec<SparseMap>,
}

impl HeatmapSet {
    pub fn new(size: usize, maps: Vec<SparseMap>) -> Result<Self> {
        if size == 0 || size * size > 1 << 16 {
            return Err(Error::Config(format!("heatmap size {size} outside 1..=256")));
        }
        for (j, m) in maps.iter().enumerate() {
            let bad = |detail: String| Err(Error::format("heatmap", format!("joint {j}: {detail}")));
            if m.indices.len() != m.values.len() {
                return bad("index and value counts differ".into());
            }
            if m.indices.windows(2).any(|w| w[0] >= w[1]) {
                return bad("cell indices not strictly ascending".into());
            }
            if m.indices.last().is_some_and(|&i| i as usize >= size * size) {
                return bad("cell index out of range".into());
            }
            if m.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("negative or non-finite cell value".into());
            }
        }
        Ok(Self { size, maps })
    }

    /// Builds from dense row-major grids, keeping every positive cell.
    pub fn from_dense(size: usize, grids: &[Vec<f64>]) -> Result<Self> {
        let maps = grids
            .iter()
            .map(|g| {
                if g.len() != size * size {
                    return Err(Error::format(
                        "heatmap",
                        format!("grid has {} cells, expected {}", g.len(), size * size),
                    ));
                }
                let mut m = SparseMap::default();
                for (i, &v) in g.iter().enumerate() {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::format("heatmap", format!("cell {i} holds {v}")));
                    }
                    if v > 0.0 {
                        m.indices.push(i as u16);
                        m.values.push(v as f32);
                    }
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(size, maps)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn joint_count(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, joint: usize) -> &SparseMap {
        &self.maps[joint]
    }

    pub fn maps(&self) -> &[SparseMap] {
        &self.maps
    }

    pub fn dense(&self, joint: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.size * self.size];
        let m = &self.maps[joint];
        for (&i, &v) in m.indices.iter().zip(&m.values) {
            g[i as usize] = v as f64;
        }
        g
    }

    pub fn value(&self, joint: usize, row: usize, col: usize) -> f64 {
        let m = &self.maps[joint];
        let key = (row * self.size + col) as u16;
        m.indices
            .binary_search(&key)
            .map(|k| m.values[k] as f64)
            .unwrap_or(0.0)
    }

    pub fn stored_cells(&self) -> usize {
        self.maps.iter().map(SparseMap::len).sum()
    }

    /// Normalized `[-1, 1]` coordinates of the center of a row-major cell.
    pub fn cell_center(&self, index: usize) -> [f64; 2] {
        cell_center(index, self.size)
    }
}

pub fn cell_center(index: usize, size: usize) -> [f64; 2] {
    let (row, col) = (index / size, index % size);
    let s = size as f64;
    [(2 * col + 1) as f64 / s - 1.0, (2 * row + 1) as f64 / s - 1.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Clean,
    Wide,
    Bimodal,
    Occluded,
}

impl CorruptionMode {
    pub fn code(self) -> u8 {
        match self {
            Self::Clean => 0,
            Self::Wide => 1,
            Self::Bimodal => 2,
            Self::Occluded => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::Clean,
            1 => Self::Wide,
            2 => Self::Bimodal,
            3 => Self::Occluded,
            _ => return None,
        })
    }
}

/// One corruption applied independently to each eligible joint with
/// `probability`. Distances are in heatmap cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub probability: f64,
    /// Eligible joints; empty means every joint.
    pub joints: Vec<usize>,
    pub wide_sigma: [f64; 2],
    pub bimodal_offset: [f64; 2],
    /// Mixture weight of the distractor mode; the true mode gets the rest.
    pub bimodal_weight: [f64; 2],
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            mode: CorruptionMode::Clean,
            probability: 0.0,
            joints: Vec::new(),
            wide_sigma: [5.5, 8.0],
            bimodal_offset: [8.0, 12.0],
            bimodal_weight: [0.3, 0.7],
        }
    }
}

impl CorruptionSpec {
    pub fn new(mode: CorruptionMode, probability: f64) -> Self {
        Self {
            mode,
            probability,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("corruption: {m}")));
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0, 1]", self.probability));
        }
        if !range_ok(self.wide_sigma) || self.wide_sigma[0] <= CLEAN_SIGMA {
            return bad(format!(
                "wide sigma range {:?} must be ordered and above {CLEAN_SIGMA}",
                self.wide_sigma
            ));
        }
        if !range_ok(self.bimodal_offset) || self.bimodal_offset[0] < 0.0 {
            return bad(format!("bimodal offset range {:?}", self.bimodal_offset));
        }
        if !range_ok(self.bimodal_weight) || self.bimodal_weight[0] < 0.0 || self.bimodal_weight[1] > 1.0
        {
            return bad(format!("bimodal weight range {:?}", self.bimodal_weight));
        }
        Ok(())
    }

    pub fn applies_to(&self, joint: usize) -> bool {
        self.joints.is_empty() || self.joints.contains(&joint)
    }
}

fn uniform_in(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn add_gaussian(grid: &mut [f64], size: usize, center: [f64; 2], sigma: f64, amplitude: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let gx: Vec<f64> = (0..size)
        .map(|c| (-(c as f64 + 0.5 - center[0]).powi(2) * inv).exp())
        .collect();
    for row in 0..size {
        let gy = amplitude * (-(row as f64 + 0.5 - center[1]).powi(2) * inv).exp();
        for col in 0..size {
            grid[row * size + col] += gy * gx[col];
        }
    }
}

fn render_joint(
    px: [f64; 2],
    mode: CorruptionMode,
    spec: &CorruptionSpec,
    size: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut grid = vec![0.0; size * size];
    match mode {
        CorruptionMode::Clean => add_gaussian(&mut grid, size, px, CLEAN_SIGMA, 1.0),
        CorruptionMode::Wide => {
            let sigma = uniform_in(rng, spec.wide_sigma);
            // Same total mass as a clean map.
            let amp = (CLEAN_SIGMA / sigma).powi(2);
            add_gaussian(&mut grid, size, px, sigma, amp);
        }
        CorruptionMode::Bimodal => {
            let w = uniform_in(rng, spec.bimodal_weight);
            let dist = uniform_in(rng, spec.bimodal_offset);
            let s = size as f64;
            let inside = |p: [f64; 2]| (0.5..=s - 0.5).contains(&p[0]) && (0.5..=s - 0.5).contains(&p[1]);
            let mut other = None;
            for _ in 0..64 {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let p = [px[0] + dist * a.cos(), px[1] + dist * a.sin()];
                if inside(p) {
                    other = Some(p);
                    break;
                }
            }
            let other = other.unwrap_or_else(|| {
                let dir = if px[0] < s / 2.0 { 1.0 } else { -1.0 };
                [(px[0] + dir * dist).clamp(0.5, s - 0.5), px[1]]
            });
            add_gaussian(&mut grid, size, px, CLEAN_SIGMA, 1.0 - w);
            add_gaussian(&mut grid, size, other, CLEAN_SIGMA, w);
        }
        CorruptionMode::Occluded => {
            add_gaussian(&mut grid, size, px, 8.0, 0.04);
            for v in &mut grid {
                *v += 0.01;
            }
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedHeatmaps {
    pub heatmaps: HeatmapSet,
    pub modes: Vec<CorruptionMode>,
}

/// Renders one map per joint of `p2d`. Specs are tried in order; the first
/// one that fires for a joint decides its corruption, otherwise the joint
/// is clean.
pub fn render_heatmaps(
    p2d: &Pose2D,
    specs: &[CorruptionSpec],
    size: usize,
    rng: &mut impl Rng,
) -> Result<RenderedHeatmaps> {
    for s in specs {
        s.validate()?;
    }
    let clean = CorruptionSpec::default();
    let half = size as f64 / 2.0;
    let mut maps = Vec::with_capacity(p2d.joints.len());
    let mut modes = Vec::with_capacity(p2d.joints.len());
    for (j, p) in p2d.joints.iter().enumerate() {
        let px = [(p[0] + 1.0) * half, (p[1] + 1.0) * half];
        let mut chosen = (CorruptionMode::Clean, &clean);
        for s in specs.iter().filter(|s| s.applies_to(j) && s.mode != CorruptionMode::Clean) {
            if rng.random_bool(s.probability) {
                chosen = (s.mode, s);
                break;
            }
        }
        let grid = render_joint(px, chosen.0, chosen.1, size, rng);
        let mut m = SparseMap::default();
        for (i, &v) in grid.iter().enumerate() {
            if v >= HEATMAP_FLOOR {
                m.indices.push(i as u16);
                m.values.push(v as f32);
            }
        }
        if m.is_empty() {
            return Err(Error::EmptyHeatmap(j));
        }
        maps.push(m);
        modes.push(chosen.0);
    }
    Ok(RenderedHeatmaps {
        heatmaps: HeatmapSet::new(size, maps)?,
        modes,
    })
}

pub fn render_heatmap(p2d: &Pose2D, spec: &CorruptionSpec, rng: &mut impl Rng) -> Result<HeatmapSet> {
    Ok(render_heatmaps(p2d, std::slice::from_ref(spec), HEATMAP_SIZE, rng)?.heatmaps)
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Rotation {
    let mut axis = [0.0; 3];
    for a in &mut axis {
        *a = rng.sample(StandardNormal);
    }
    let u: f64 = rng.random();
    let n = norm3(axis);
    if n < 1e-12 || max_angle == 0.0 {
        return IDENTITY;
    }
    axis_angle(scale3(axis, 1.0 / n), u * max_angle)
}

/// Forward kinematics with a random local rotation per joint. A joint's
/// rotation turns its own bone and everything below it; its angle is
/// uniform up to `angle_limit * noise_scale`. The root sits at the origin.
pub fn sample_pose(rng: &mut impl Rng, skel: &Skeleton, noise_scale: f64) -> Pose3D {
    let j = skel.joint_count();
    let mut global = vec![IDENTITY; j];
    let mut joints = vec![[0.0; 3]; j];
    for i in skel.topological_order() {
        let local = random_rotation(rng, skel.angle_limit(i) * noise_scale);
        let p = skel.parent(i);
        if p == i {
            global[i] = local;
        } else {
            let g = compose(&global[p], &local);
            joints[i] = add3(joints[p], rotate(&g, skel.rest_offset(i)));
            global[i] = g;
        }
    }
    Pose3D::new(joints)
}

/// Depth of `joint` relative to its parent, positive away from the camera.
pub fn limb_depth(pose: &Pose3D, skel: &Skeleton, joint: usize) -> f64 {
    pose.joints[joint][2] - pose.joints[skel.parent(joint)][2]
}

/// Records with this flag have their `joint` bone re-aimed `depth_angle`
/// degrees out of the image plane, toward or away from the camera at
/// random. The other solution with the same projection is kept as the
/// record's alternative pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguitySpec {
    pub joint: usize,
    pub probability: f64,
    pub depth_angle: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub focal: f64,
    /// Distance of the pose centroid from the camera, decimeters.
    pub depth: f64,
    /// Lateral placement jitter of the centroid, decimeters.
    pub jitter: f64,
    pub noise_scale: f64,
    pub heatmap_size: usize,
    /// Minimum distance of every projected joint from the crop border, cells.
    pub margin: f64,
    pub corruptions: Vec<CorruptionSpec>,
    pub ambiguity: Option<AmbiguitySpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            focal: 140.0,
            depth: 50.0,
            jitter: 1.0,
            noise_scale: 1.0,
            heatmap_size: HEATMAP_SIZE,
            margin: 3.0,
            corruptions: Vec::new(),
            ambiguity: None,
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug)]
pub struct Generator {
    skeleton: Skeleton,
    config: GeneratorConfig,
}

impl Generator {
    pub fn new(skeleton: Skeleton, config: GeneratorConfig) -> Result<Self> {
        for s in &config.corruptions {
            s.validate()?;
            if let Some(&j) = s.joints.iter().find(|&&j| j >= skeleton.joint_count()) {
                return Err(Error::Config(format!("corruption names joint {j}, skeleton has {}", skeleton.joint_count())));
            }
        }
        if let Some(a) = &config.ambiguity {
            let j = a.joint;
            if j >= skeleton.joint_count() || skeleton.parent(j) == j {
                return Err(Error::Config(format!("ambiguity joint {j} must be a non-root joint")));
            }
            if (0..skeleton.joint_count()).any(|c| c != j && skeleton.parent(c) == j) {
                return Err(Error::Config(format!("ambiguity joint {j} must be a leaf")));
            }
            if !(0.0..=1.0).contains(&a.probability) {
                return Err(Error::Config(format!("ambiguity probability {}", a.probability)));
            }
            if !(0.0 < a.depth_angle[0] && a.depth_angle[0] <= a.depth_angle[1] && a.depth_angle[1] < 90.0) {
                return Err(Error::Config(format!("ambiguity depth angle {:?}", a.depth_angle)));
            }
        }
        if !(config.depth > 0.0 && config.jitter >= 0.0 && config.noise_scale >= 0.0) {
            return Err(Error::Config("depth must be positive, jitter and noise scale nonnegative".into()));
        }
        CameraModel::centered(config.focal, config.heatmap_size, [0.0, 0.0, config.depth])?;
        Ok(Self { skeleton, config })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Record `index` of the dataset seeded with `seed`. Each record draws
    /// from its own stream, so any subset can be regenerated on its own.
    pub fn record(&self, seed: u64, index: u64) -> Result<Record> {
        let cfg = &self.config;
        let mut rng = rng::indexed(seed, index);
        let size = cfg.heatmap_size as f64;
        for _ in 0..MAX_ATTEMPTS {
            let pose = mean_center(&sample_pose(&mut rng, &self.skeleton, cfg.noise_scale));
            let offset = [
                cfg.jitter * rng.random_range(-1.0..=1.0),
                cfg.jitter * rng.random_range(-1.0..=1.0),
                cfg.depth,
            ];
            let mut cam_pose = pose.translated(offset);
            let mut alt = None;
            if let Some(a) = &cfg.ambiguity {
                if rng.random_bool(a.probability) {
                    let (chosen, other) = self.ambiguous_pair(&cam_pose, a, &mut rng);
                    cam_pose = chosen;
                    alt = Some(mean_center(&other));
                }
            }
            let translation = cam_pose.centroid();
            let pose = mean_center(&cam_pose);
            let camera = CameraModel::centered(cfg.focal, cfg.heatmap_size, translation)?;
            let Ok(px) = project_pixels(&pose, &camera) else { continue };
            let lo = cfg.margin;
            let hi = size - cfg.margin;
            if !px.iter().flatten().all(|v| (lo..=hi).contains(v)) {
                continue;
            }
            let p2d = Pose2D {
                joints: px.into_iter().map(|p| camera.normalize(p)).collect(),
            };
            let rendered = render_heatmaps(&p2d, &cfg.corruptions, cfg.heatmap_size, &mut rng)?;
            return Ok(Record {
                index,
                pose,
                camera,
                heatmaps: rendered.heatmaps,
                modes: rendered.modes,
                alt_pose: alt,
            });
        }
        Err(Error::Degenerate(format!(
            "no pose fitting the crop after {MAX_ATTEMPTS} attempts for record {index}"
        )))
    }

    pub fn records(&self, seed: u64, indices: std::ops::Range<u64>) -> Result<Vec<Record>> {
        indices.map(|i| self.record(seed, i)).collect()
    }

    /// Re-aims the ambiguity bone in camera coordinates and returns
    /// `(recorded, alternative)`: both solutions on the same viewing ray.
    fn ambiguous_pair(&self, cam_pose: &Pose3D, a: &AmbiguitySpec, rng: &mut impl Rng) -> (Pose3D, Pose3D) {
        let j = a.joint;
        let parent = cam_pose.joints[self.skeleton.parent(j)];
        let bone = sub3(cam_pose.joints[j], parent);
        let len = norm3(bone);
        let planar = (bone[0] * bone[0] + bone[1] * bone[1]).sqrt();
        let (ux, uy) = if planar > 1e-9 {
            (bone[0] / planar, bone[1] / planar)
        } else {
            (1.0, 0.0)
        };
        let phi = uniform_in(rng, a.depth_angle).to_radians();
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let dir = [phi.cos() * ux, phi.cos() * uy, sign * phi.sin()];
        let first = add3(parent, scale3(dir, len));
        // The ray s * u meets the sphere |x - parent| = len at s = |first|
        // and at s = 2 (u . parent) - |first|.
        let dist = norm3(first);
        let u = scale3(first, 1.0 / dist);
        let second = scale3(u, 2.0 * dot3(u, parent) - dist);
        let mut chosen = cam_pose.clone();
        chosen.joints[j] = first;
        let mut other = cam_pose.clone();
        other.joints[j] = second;
        (chosen, other)
    }
}
