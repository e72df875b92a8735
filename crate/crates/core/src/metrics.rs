//! Pose error metrics in millimeters and the best-of-M protocol.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{bone_lengths, check_joint_count, norm3, sub3, Pose3D, Skeleton};

/// Poses are stored in decimeters.
pub const DM_TO_MM: f64 = 100.0;
pub const CPS_RANGE_MM: usize = 300;

fn same_shape(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.joint_count() != gt.joint_count() || gt.joint_count() == 0 {
        return Err(Error::JointCount {
            expected: gt.joint_count(),
            actual: pred.joint_count(),
        });
    }
    Ok(())
}

/// Per-joint distances in millimeters after moving both roots to the origin.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D, skel: &Skeleton) -> Result<Vec<f64>> {
    same_shape(pred, gt)?;
    check_joint_count(gt, skel)?;
    let r = skel.root();
    let (pr, gr) = (pred.joints[r], gt.joints[r]);
    Ok(pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| norm3(sub3(sub3(*p, pr), sub3(*g, gr))) * DM_TO_MM)
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Root-aligned mean per-joint position error, millimeters.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D, skel: &Skeleton) -> Result<f64> {
    Ok(mean(&joint_errors(pred, gt, skel)?))
}

/// Percentage of root-aligned joints within `threshold_mm`.
pub fn pck(pred: &Pose3D, gt: &Pose3D, skel: &Skeleton, threshold_mm: f64) -> Result<f64> {
    let e = joint_errors(pred, gt, skel)?;
    Ok(100.0 * e.iter().filter(|&&d| d <= threshold_mm).count() as f64 / e.len() as f64)
}

fn centered(pose: &Pose3D) -> (Vec<Vector3<f64>>, Vector3<f64>) {
    let c = pose.centroid();
    let c = Vector3::new(c[0], c[1], c[2]);
    let pts = pose
        .joints
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]) - c)
        .collect();
    (pts, c)
}

fn check_spread(pts: &[Vector3<f64>], which: &str) -> Result<()> {
    let cov = pts.iter().fold(Matrix3::zeros(), |acc, p| acc + p * p.transpose());
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate(format!("{which} joints are collinear")));
    }
    Ok(())
}

/// Newton steps on `tr(R^T A)` over rotations `R exp([w]x)`. The 3x3 SVD
/// leaves errors around 1e-12; two steps bring them to rounding level.
fn polish_rotation(mut r: Matrix3<f64>, a: &Matrix3<f64>) -> Matrix3<f64> {
    for _ in 0..2 {
        let w = r.transpose() * a;
        let g = -Vector3::new(w[(1, 2)] - w[(2, 1)], w[(2, 0)] - w[(0, 2)], w[(0, 1)] - w[(1, 0)]);
        let h = (w + w.transpose()) * 0.5 - Matrix3::identity() * w.trace();
        let Some(step) = h.lu().solve(&(-g)) else { break };
        if !step.iter().all(|v| v.is_finite()) || step.norm() > 1e-3 {
            break;
        }
        r *= Rotation3::new(step).into_inner();
    }
    r
}

/// Similarity (or, without `scale`, rigid) transform of `pred` minimizing
/// the summed squared distance to `gt`.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D, scale: bool) -> Result<Pose3D> {
    same_shape(pred, gt)?;
    let (x, _) = centered(pred);
    let (y, gc) = centered(gt);
    check_spread(&x, "predicted")?;
    check_spread(&y, "ground-truth")?;
    let a = x
        .iter()
        .zip(&y)
        .fold(Matrix3::zeros(), |acc, (xi, yi)| acc + yi * xi.transpose());
    let svd = a.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (u * v_t).determinant().signum();
    let s_mat = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = polish_rotation(u * s_mat * v_t, &a);
    let s = if scale {
        (r.transpose() * a).trace() / x.iter().map(|p| p.norm_squared()).sum::<f64>()
    } else {
        1.0
    };
    Ok(Pose3D::new(
        x.iter()
            .map(|p| {
                let q = s * (r * p) + gc;
                [q[0], q[1], q[2]]
            })
            .collect(),
    ))
}

/// Mean per-joint error after Procrustes alignment, millimeters.
pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D, scale: bool) -> Result<f64> {
    let aligned = procrustes_align(pred, gt, scale)?;
    Ok(mean(
        &aligned
            .joints
            .iter()
            .zip(&gt.joints)
            .map(|(p, g)| norm3(sub3(*p, *g)) * DM_TO_MM)
            .collect::<Vec<_>>(),
    ))
}

/// Area under the fraction-of-correct-poses curve on a 1 mm grid over
/// `[0, 300)`: `sum_{theta = 0}^{299} frac(max error <= theta)`.
pub fn cps_from_max_errors(max_errors: &[f64]) -> f64 {
    if max_errors.is_empty() {
        return 0.0;
    }
    let mut sorted = max_errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    (0..CPS_RANGE_MM)
        .map(|theta| sorted.partition_point(|&e| e <= theta as f64) as f64 / n)
        .sum()
}

pub fn max_joint_error(pred: &Pose3D, gt: &Pose3D, skel: &Skeleton) -> Result<f64> {
    Ok(joint_errors(pred, gt, skel)?.into_iter().fold(0.0, f64::max))
}

pub fn cps(preds: &[Pose3D], gts: &[Pose3D], skel: &Skeleton) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} ground-truth poses",
            preds.len(),
            gts.len()
        )));
    }
    let errs = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| max_joint_error(p, g, skel))
        .collect::<Result<Vec<_>>>()?;
    Ok(cps_from_max_errors(&errs))
}

/// Mean over poses and mirrored bone pairs of the length difference, mm.
pub fn symmetry_error(poses: &[Pose3D], skel: &Skeleton) -> Result<f64> {
    let pairs = skel.bone_pairs();
    if pairs.is_empty() {
        return Err(Error::InvalidSkeleton("no left/right bone pairs".into()));
    }
    if poses.is_empty() {
        return Err(Error::Config("symmetry error of an empty pose set".into()));
    }
    let mut total = 0.0;
    for p in poses {
        let len = bone_lengths(p, skel)?;
        total += pairs.iter().map(|&(a, b)| (len[a] - len[b]).abs()).sum::<f64>();
    }
    Ok(total / (poses.len() * pairs.len()) as f64 * DM_TO_MM)
}

/// Index and value of the lowest score; ties go to the lowest index.
pub fn best_of_m<F>(hyps: &[Pose3D], mut score: F) -> Result<(usize, f64)>
where
    F: FnMut(&Pose3D) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in hyps.iter().enumerate() {
        let v = score(h)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::Config("best-of-M over an empty hypothesis set".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    /// Include uniform scale in the Procrustes alignment.
    pub procrustes_scale: bool,
    pub pck_threshold_mm: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            procrustes_scale: true,
            pck_threshold_mm: 150.0,
        }
    }
}

/// All metrics of one hypothesis against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub max_error: f64,
    pub symmetry: f64,
}

pub fn score(pred: &Pose3D, gt: &Pose3D, skel: &Skeleton, protocol: &Protocol) -> Result<Scores> {
    let errs = joint_errors(pred, gt, skel)?;
    Ok(Scores {
        mpjpe: mean(&errs),
        pa_mpjpe: pa_mpjpe(pred, gt, protocol.procrustes_scale)?,
        pck: 100.0 * errs.iter().filter(|&&d| d <= protocol.pck_threshold_mm).count() as f64
            / errs.len() as f64,
        max_error: errs.iter().copied().fold(0.0, f64::max),
        symmetry: symmetry_error(std::slice::from_ref(pred), skel)?,
    })
}

/// Best-of-M values for one record. Each error metric takes its own best
/// hypothesis (PCK its highest); CPS uses the hypothesis with the smallest
/// maximum joint error. Symmetry is averaged over all hypotheses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub index: u64,
    pub best_index: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub max_error_mm: f64,
    pub symmetry_mm: f64,
}

impl RecordMetrics {
    pub fn from_scores(index: u64, scores: &[Scores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Config(format!("record {index} has no hypotheses")));
        }
        let argmin = |f: &dyn Fn(&Scores) -> f64| {
            let mut best = (0, f(&scores[0]));
            for (i, s) in scores.iter().enumerate().skip(1) {
                if f(s) < best.1 {
                    best = (i, f(s));
                }
            }
            best
        };
        let (best_index, mpjpe_mm) = argmin(&|s| s.mpjpe);
        Ok(Self {
            index,
            best_index,
            mpjpe_mm,
            pa_mpjpe_mm: argmin(&|s| s.pa_mpjpe).1,
            pck_percent: -argmin(&|s| -s.pck).1,
            max_error_mm: argmin(&|s| s.max_error).1,
            symmetry_mm: mean(&scores.iter().map(|s| s.symmetry).collect::<Vec<_>>()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hypotheses: usize,
    pub records: usize,
    pub protocol: Protocol,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub cps: f64,
    pub symmetry_mm: f64,
    pub per_record: Vec<RecordMetrics>,
}

pub const RECORD_CSV_HEADER: &str =
    "index,best_index,mpjpe_mm,pa_mpjpe_mm,pck_percent,max_error_mm,symmetry_mm";

impl MetricReport {
    /// Aggregates per-hypothesis scores, using the first `m` hypotheses of
    /// every record (all of them when `m` is `None`).
    pub fn from_scores(
        indices: &[u64],
        scores: &[Vec<Scores>],
        m: Option<usize>,
        protocol: Protocol,
    ) -> Result<Self> {
        if indices.len() != scores.len() || scores.is_empty() {
            return Err(Error::Config(format!(
                "{} record indices for {} scored records",
                indices.len(),
                scores.len()
            )));
        }
        let per_record = indices
            .iter()
            .zip(scores)
            .map(|(&i, s)| RecordMetrics::from_scores(i, &s[..m.unwrap_or(s.len()).min(s.len())]))
            .collect::<Result<Vec<_>>>()?;
        let avg = |f: fn(&RecordMetrics) -> f64| mean(&per_record.iter().map(f).collect::<Vec<_>>());
        let hypotheses = scores
            .iter()
            .map(|s| m.unwrap_or(s.len()).min(s.len()))
            .max()
            .unwrap_or(0);
        Ok(Self {
            hypotheses,
            records: per_record.len(),
            protocol,
            mpjpe_mm: avg(|r| r.mpjpe_mm),
            pa_mpjpe_mm: avg(|r| r.pa_mpjpe_mm),
            pck_percent: avg(|r| r.pck_percent),
            cps: cps_from_max_errors(&per_record.iter().map(|r| r.max_error_mm).collect::<Vec<_>>()),
            symmetry_mm: avg(|r| r.symmetry_mm),
            per_record,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.mpjpe_mm, self.pa_mpjpe_mm, self.pck_percent, self.cps, self.symmetry_mm]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Per-record table with [`RECORD_CSV_HEADER`] columns.
    pub fn records_csv(&self) -> String {
        let mut out = String::from(RECORD_CSV_HEADER);
        out.push('\n');
        for r in &self.per_record {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.index, r.best_index, r.mpjpe_mm, r.pa_mpjpe_mm, r.pck_percent, r.max_error_mm, r.symmetry_mm
            ));
        }
        out
    }
}
