//! Trajectory, surface and classification metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::field::{extract_mesh, Field};
use crate::geometry::{umeyama_sim3, Pose, Sim3, Vec3};
use crate::synth::{GtLabels, SceneSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Points sampled from each surface.
    pub surface_points: usize,
    /// Marching resolution for the trained field; zero uses the grid resolution.
    pub mesh_resolution: usize,
    /// Resolution of the reference mesh of the analytic surface.
    pub reference_resolution: usize,
    /// F-score threshold; defaults to 1% of the reference bounding-box diagonal.
    pub fscore_threshold: Option<f64>,
    /// An outlier counts as recovered within these aligned errors.
    pub recovery_rot_deg: f64,
    pub recovery_trans: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            surface_points: 20000,
            mesh_resolution: 0,
            reference_resolution: 192,
            fscore_threshold: None,
            recovery_rot_deg: 2.0,
            recovery_trans: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    pub ape_rot_deg: f64,
    pub ape_trans: f64,
    pub rpe_rot_deg: f64,
    pub rpe_trans: f64,
    /// Mean `||E - I||_F` of the 4x4 error transforms, absolute and relative.
    pub ape_full: f64,
    pub rpe_full: f64,
    /// Per-pose absolute errors after alignment.
    pub per_pose: Vec<PoseError>,
    pub alignment: Sim3,
}

impl TrajectoryMetrics {
    /// Mean absolute rotation error over the poses selected by `mask`.
    pub fn mean_rot_deg(&self, mask: &[bool]) -> f64 {
        mean(self.per_pose.iter().zip(mask).filter(|(_, m)| **m).map(|(e, _)| e.rot_deg))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Rotation angle and translation length of `a^-1 b`, plus `||T - I||_F`.
fn pose_difference(a: &Pose, b: &Pose) -> (PoseError, f64) {
    let e = a.inverse() * *b;
    let r = e.rotation.matrix();
    let full = ((r - crate::geometry::Mat3::identity()).norm_squared() + e.translation.norm_squared()).sqrt();
    (
        PoseError {
            rot_deg: e.rotation.angle().to_degrees(),
            trans: e.translation.norm(),
        },
        full,
    )
}

/// Aligns `est` to `gt` with the Sim3 fitted on the centers of the masked
/// poses, then measures absolute and consecutive-pair relative errors over
/// all poses.
pub fn ape_rpe(est: &[Pose], gt: &[Pose], inliers: &[bool]) -> Result<TrajectoryMetrics> {
    if est.len() != gt.len() || est.len() != inliers.len() {
        return Err(Error::DegenerateConfiguration("trajectory lengths differ".into()));
    }
    let (src, dst): (Vec<Vec3>, Vec<Vec3>) = est
        .iter()
        .zip(gt)
        .zip(inliers)
        .filter(|(_, m)| **m)
        .map(|((e, g), _)| (e.center(), g.center()))
        .unzip();
    if src.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!("need 3 inliers, got {}", src.len())));
    }
    let s = umeyama_sim3(&src, &dst)?;
    let aligned: Vec<Pose> = est.iter().map(|p| s.apply_pose(p)).collect();

    let abs: Vec<(PoseError, f64)> = aligned.iter().zip(gt).map(|(e, g)| pose_difference(g, e)).collect();
    let rel: Vec<(PoseError, f64)> = (1..gt.len())
        .map(|i| {
            let re = aligned[i - 1].inverse() * aligned[i];
            let rg = gt[i - 1].inverse() * gt[i];
            pose_difference(&rg, &re)
        })
        .collect();
    Ok(TrajectoryMetrics {
        ape_rot_deg: mean(abs.iter().map(|e| e.0.rot_deg)),
        ape_trans: mean(abs.iter().map(|e| e.0.trans)),
        rpe_rot_deg: mean(rel.iter().map(|e| e.0.rot_deg)),
        rpe_trans: mean(rel.iter().map(|e| e.0.trans)),
        ape_full: mean(abs.iter().map(|e| e.1)),
        rpe_full: mean(rel.iter().map(|e| e.1)),
        per_pose: abs.iter().map(|e| e.0).collect(),
        alignment: s,
    })
}

/// Static 3-d tree for exact nearest-neighbor queries.
pub struct KdTree {
    points: Vec<Vec3>,
    /// Point indices arranged so that every subtree is a contiguous range
    /// whose median element is the splitting node.
    order: Vec<u32>,
}

const LEAF: usize = 8;

#[inline]
fn sq_dist(a: &Vec3, b: &Vec3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        build(points, &mut order, 0);
        KdTree {
            points: points.to_vec(),
            order,
        }
    }

    /// Squared distance to the nearest stored point; infinity when empty.
    pub fn nearest_sq(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                let d = sq_dist(q, &self.points[i as usize]);
                if d < *best {
                    *best = d;
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = depth % 3;
        let p = &self.points[self.order[mid] as usize];
        let d = sq_dist(q, p);
        if d < *best {
            *best = d;
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff < *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], depth: usize) {
    if order.len() <= LEAF {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a as usize][axis].total_cmp(&points[b as usize][axis]));
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub chamfer: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Distances from every point of `from` to its nearest neighbor in `to`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.par_iter().map(|p| tree.nearest_sq(p).sqrt()).collect()
}

/// Chamfer distance `(mean d(pred, gt) + mean d(gt, pred)) / 2` and the
/// F-score at threshold `rho`.
pub fn chamfer_fscore(pred: &[Vec3], gt: &[Vec3], rho: f64) -> Result<SurfaceMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(surface_metrics(&nearest_distances(pred, gt), &nearest_distances(gt, pred), rho))
}

/// Metrics from precomputed nearest-neighbor distances in both directions.
pub fn surface_metrics(pred_to_gt: &[f64], gt_to_pred: &[f64], rho: f64) -> SurfaceMetrics {
    let precision = pred_to_gt.iter().filter(|&&d| d < rho).count() as f64 / pred_to_gt.len() as f64;
    let recall = gt_to_pred.iter().filter(|&&d| d < rho).count() as f64 / gt_to_pred.len() as f64;
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SurfaceMetrics {
        chamfer: 0.5 * (mean(pred_to_gt.iter().copied()) + mean(gt_to_pred.iter().copied())),
        fscore,
        precision,
        recall,
    }
}

/// Diagonal of the axis-aligned bounding box.
pub fn bbox_diagonal(points: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Precision and recall of the outlier class; each is 1 when its
/// denominator is empty.
pub fn classification_metrics(predicted: &[bool], actual: &[bool]) -> (f64, f64) {
    assert_eq!(predicted.len(), actual.len());
    let tp = predicted.iter().zip(actual).filter(|(p, a)| **p && **a).count();
    let pp = predicted.iter().filter(|p| **p).count();
    let ap = actual.iter().filter(|a| **a).count();
    let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
    let recall = if ap == 0 { 1.0 } else { tp as f64 / ap as f64 };
    (precision, recall)
}

/// The fixed-key metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ape_rot_deg: f64,
    pub ape_trans: f64,
    pub rpe_rot_deg: f64,
    pub rpe_trans: f64,
    pub ape_full: f64,
    pub rpe_full: f64,
    pub inlier_ape_rot_deg: f64,
    pub chamfer: f64,
    pub fscore: f64,
    pub fscore_threshold: f64,
    pub outlier_precision: f64,
    pub outlier_recall: f64,
    /// Ground-truth outliers ending within the recovery tolerance.
    pub outliers_recovered: usize,
    pub outliers_total: usize,
}

/// Ground-truth outliers whose aligned pose is within `rot_deg` and `trans`.
pub fn recovered_outliers(m: &TrajectoryMetrics, outliers: &[usize], rot_deg: f64, trans: f64) -> usize {
    outliers
        .iter()
        .filter(|&&i| m.per_pose[i].rot_deg <= rot_deg && m.per_pose[i].trans <= trans)
        .count()
}

/// Every metric of a trained run against the hidden ground truth.
/// Alignment uses the ground-truth inliers.
pub fn evaluate_run(
    field: &Field,
    poses: &[Pose],
    predicted_outliers: &[bool],
    scene: &SceneSpec,
    labels: &GtLabels,
    cfg: &EvalConfig,
) -> Result<(EvalReport, TrajectoryMetrics)> {
    let n = poses.len();
    let actual: Vec<bool> = (0..n).map(|i| labels.is_outlier(i)).collect();
    let inliers: Vec<bool> = actual.iter().map(|o| !o).collect();
    let m = ape_rpe(poses, &labels.poses, &inliers)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let res = if cfg.mesh_resolution == 0 { field.res() } else { cfg.mesh_resolution };
    let pred = extract_mesh(field, res)?.sample_points(cfg.surface_points, &mut rng);
    let gt = scene.surface_mesh(cfg.reference_resolution)?.sample_points(cfg.surface_points, &mut rng);
    let rho = cfg.fscore_threshold.unwrap_or_else(|| 0.01 * bbox_diagonal(&gt));
    let s = chamfer_fscore(&pred, &gt, rho)?;

    let (outlier_precision, outlier_recall) = classification_metrics(predicted_outliers, &actual);
    let report = EvalReport {
        ape_rot_deg: m.ape_rot_deg,
        ape_trans: m.ape_trans,
        rpe_rot_deg: m.rpe_rot_deg,
        rpe_trans: m.rpe_trans,
        ape_full: m.ape_full,
        rpe_full: m.rpe_full,
        inlier_ape_rot_deg: m.mean_rot_deg(&inliers),
        chamfer: s.chamfer,
        fscore: s.fscore,
        fscore_threshold: rho,
        outlier_precision,
        outlier_recall,
        outliers_recovered: recovered_outliers(&m, &labels.outliers, cfg.recovery_rot_deg, cfg.recovery_trans),
        outliers_total: labels.outliers.len(),
    };
    Ok((report, m))
}
