//! Analytic scenes, camera rings, ground-truth images and keypoint matches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{extract_mesh_fn, Mesh};
use crate::geometry::{pixel_ray, project, Intrinsics, Pose, Rotation, Vec2, Vec3};
use crate::image::Image;
use crate::scene_graph::{Edge, Match, SceneGraph};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    /// `|x| - radius - amplitude * sin(f n_x) sin(f n_y) sin(f n_z)` with
    /// `n = x / |x|`. Only approximately a distance field.
    BumpySphere { radius: f64, amplitude: f64, frequency: f64 },
    /// Torus around the z axis.
    Torus { major: f64, minor: f64 },
}

impl Shape {
    pub fn sdf(&self, x: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => x.norm() - radius,
            Shape::BumpySphere {
                radius,
                amplitude,
                frequency,
            } => {
                let r = x.norm();
                if r == 0.0 {
                    return -radius;
                }
                let n = x / r;
                r - radius - amplitude * (frequency * n.x).sin() * (frequency * n.y).sin() * (frequency * n.z).sin()
            }
            Shape::Torus { major, minor } => {
                let q = (x.x * x.x + x.y * x.y).sqrt() - major;
                (q * q + x.z * x.z).sqrt() - minor
            }
        }
    }

    /// Upper bound on the gradient norm, used to keep sphere tracing safe.
    fn lipschitz(&self) -> f64 {
        match self {
            Shape::BumpySphere { .. } => 1.25,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0 && radius < 1.0,
            Shape::BumpySphere {
                radius,
                amplitude,
                frequency,
            } => radius > 0.0 && amplitude >= 0.0 && radius + amplitude < 1.0 && frequency >= 0.0,
            Shape::Torus { major, minor } => minor > 0.0 && major > minor && major + minor < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("shape {self:?} must fit strictly inside the unit cube")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color_seed: u64,
    /// Lattice frequencies of the value-noise octaves of the albedo.
    pub color_octaves: Vec<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            shape: Shape::BumpySphere {
                radius: 0.5,
                amplitude: 0.025,
                frequency: 3.0,
            },
            color_seed: 7,
            color_octaves: vec![2.5, 5.0, 10.0],
        }
    }
}

impl SceneSpec {
    pub fn sdf(&self, x: &Vec3) -> f64 {
        self.shape.sdf(x)
    }

    /// Band-limited albedo in `[0.1, 0.9]`.
    pub fn albedo(&self, x: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        let mut total = 0.0;
        for (o, &freq) in self.color_octaves.iter().enumerate() {
            let amp = 1.0 / (o as f64 + 1.0);
            total += amp;
            for (ch, v) in out.iter_mut().enumerate() {
                *v += amp * value_noise(x * freq, self.color_seed ^ ((o as u64) << 8) ^ ((ch as u64) << 16));
            }
        }
        if total > 0.0 {
            for v in out.iter_mut() {
                *v = 0.1 + 0.8 * (*v / total);
            }
        } else {
            out = [0.5; 3];
        }
        out
    }

    /// First hit of a unit-direction ray with the surface, as a distance.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let hit = crate::field::ray_box(origin, dir).ok()?;
        let lip = self.shape.lipschitz();
        let mut t = hit.t_near;
        for _ in 0..512 {
            let d = self.sdf(&(origin + dir * t));
            if d < 1e-9 {
                return Some(t);
            }
            t += d / lip;
            if t > hit.t_far {
                return None;
            }
        }
        None
    }

    /// Dense triangulation of the analytic surface.
    pub fn surface_mesh(&self, resolution: usize) -> Result<Mesh> {
        extract_mesh_fn(|x| self.sdf(x), resolution)
    }
}

fn hash3(i: i64, j: i64, k: i64, seed: u64) -> f64 {
    let mut h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [i, j, k] {
        h ^= (v as u64).wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(p: Vec3, seed: u64) -> f64 {
    let fl = [p.x.floor(), p.y.floor(), p.z.floor()];
    let f = [p.x - fl[0], p.y - fl[1], p.z - fl[2]];
    let s: Vec<f64> = f.iter().map(|t| t * t * (3.0 - 2.0 * t)).collect();
    let base = [fl[0] as i64, fl[1] as i64, fl[2] as i64];
    let mut v = 0.0;
    for c in 0..8 {
        let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if bx == 1 { s[0] } else { 1.0 - s[0] })
            * (if by == 1 { s[1] } else { 1.0 - s[1] })
            * (if bz == 1 { s[2] } else { 1.0 - s[2] });
        v += w * hash3(base[0] + bx as i64, base[1] + by as i64, base[2] + bz as i64, seed);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub cameras: usize,
    pub ring_radius: f64,
    /// Mean camera elevation above the ring plane.
    pub elevation_deg: f64,
    pub elevation_jitter_deg: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub outlier_fraction: f64,
    pub outlier_rot_sigma_deg: f64,
    pub outlier_trans_sigma: f64,
    pub inlier_rot_sigma_deg: f64,
    pub inlier_trans_sigma: f64,
    /// Maximum ground-truth viewing angle between an image pair that gets matches.
    pub covisibility_deg: f64,
    pub keypoints_per_pair: usize,
    pub wrong_match_fraction: f64,
    /// Keypoints are rounded to multiples of this (pixels); zero disables rounding.
    pub keypoint_quantization: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            cameras: 30,
            ring_radius: 2.6,
            elevation_deg: 15.0,
            elevation_jitter_deg: 4.0,
            width: 64,
            height: 64,
            fov_deg: 40.0,
            outlier_fraction: 0.2,
            outlier_rot_sigma_deg: 2.0,
            outlier_trans_sigma: 0.05,
            inlier_rot_sigma_deg: 1.0,
            inlier_trans_sigma: 0.02,
            covisibility_deg: 60.0,
            keypoints_per_pair: 40,
            wrong_match_fraction: 0.2,
            keypoint_quantization: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.cameras < 8 {
            return bad("at least 8 cameras are required");
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must be in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.wrong_match_fraction) {
            return bad("wrong_match_fraction must be in [0, 1]");
        }
        let sigmas = [
            self.outlier_rot_sigma_deg,
            self.outlier_trans_sigma,
            self.inlier_rot_sigma_deg,
            self.inlier_trans_sigma,
            self.elevation_jitter_deg,
            self.keypoint_quantization,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise magnitudes must be non-negative");
        }
        if self.ring_radius <= 3f64.sqrt() {
            return bad("ring_radius must place cameras outside the unit cube");
        }
        if self.width < 8 || self.height < 8 || !(self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return bad("invalid image size or field of view");
        }
        if self.keypoints_per_pair < 8 {
            return bad("keypoints_per_pair must be at least 8");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * self.width as f64,
            cy: 0.5 * self.height as f64,
            width: self.width,
            height: self.height,
        }
    }

    /// `floor(N * fraction)`, with a small tolerance for inexact fractions.
    pub fn outlier_count(&self) -> usize {
        (self.cameras as f64 * self.outlier_fraction + 1e-9).floor() as usize
    }
}

/// Hidden ground truth that only evaluation may read.
#[derive(Clone, Debug, PartialEq)]
pub struct GtLabels {
    pub poses: Vec<Pose>,
    pub outliers: Vec<usize>,
    /// Per raw edge, per match: true when the match is geometrically correct.
    pub match_correct: Vec<Vec<bool>>,
}

impl GtLabels {
    pub fn is_outlier(&self, i: usize) -> bool {
        self.outliers.contains(&i)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: SceneSpec,
    pub spec: DatasetSpec,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    /// Noisy initial poses.
    pub poses: Vec<Pose>,
    pub images: Vec<Image>,
    pub graph: SceneGraph,
    pub labels: GtLabels,
}

fn gaussian_vec<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    Vec3::new(
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
    )
}

/// Random rotation about a uniformly drawn axis with a normally drawn angle.
fn perturb<R: Rng>(p: &Pose, rot_sigma_deg: f64, trans_sigma: f64, rng: &mut R) -> Pose {
    let axis = loop {
        let a = gaussian_vec(rng, 1.0);
        if a.norm() > 1e-6 {
            break a.normalize();
        }
    };
    let angle = rng.sample::<f64, _>(StandardNormal) * rot_sigma_deg.to_radians();
    let dr = Rotation::from_axis_angle(&axis, angle);
    Pose::new(dr * p.rotation, p.translation + gaussian_vec(rng, trans_sigma))
}

/// Half-turn about the world z axis, the axis of the camera ring.
pub fn mirror_pose(p: &Pose) -> Pose {
    let rz = Rotation::from_axis_angle(&Vec3::z(), std::f64::consts::PI);
    Pose::new(rz * p.rotation, rz.apply(&p.translation))
}

/// Renders the ground-truth image of `pose`; rays that miss stay black.
pub fn render_gt_image(scene: &SceneSpec, pose: &Pose, k: &Intrinsics) -> Image {
    let mut img = Image::new(k.width, k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let px = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
            let (o, d, _) = pixel_ray(pose, k, &px);
            if let Some(t) = scene.trace(&o, &d) {
                img.set(x, y, scene.albedo(&(o + d * t)));
            }
        }
    }
    img
}

/// True when `x` is the first surface point seen from `pose` along its ray.
fn visible(scene: &SceneSpec, pose: &Pose, k: &Intrinsics, x: &Vec3) -> Option<Vec2> {
    let px = project(pose, k, x).ok()?;
    if !k.contains(&px) {
        return None;
    }
    let o = pose.center();
    let dist = (x - o).norm();
    let t = scene.trace(&o, &((x - o) / dist))?;
    if (t - dist).abs() < 1e-6 {
        Some(px)
    } else {
        None
    }
}

fn quantize(p: Vec2, q: f64) -> Vec2 {
    if q > 0.0 {
        Vec2::new((p.x / q).round() * q, (p.y / q).round() * q)
    } else {
        p
    }
}

/// Generates a full dataset. Deterministic in `(scene, spec, seed)`.
pub fn generate_dataset(scene: &SceneSpec, spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    scene.shape.validate()?;
    spec.validate()?;
    let k = spec.intrinsics();
    let n = spec.cameras;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let gt: Vec<Pose> = (0..n)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let el = (spec.elevation_deg + rng.sample::<f64, _>(StandardNormal) * spec.elevation_jitter_deg).to_radians();
            let eye = spec.ring_radius * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Pose::look_at(&eye, &Vec3::zeros(), &Vec3::z())
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut outliers: Vec<usize> = order[..spec.outlier_count()].to_vec();
    outliers.sort_unstable();

    let poses: Vec<Pose> = (0..n)
        .map(|i| {
            if outliers.contains(&i) {
                perturb(&mirror_pose(&gt[i]), spec.outlier_rot_sigma_deg, spec.outlier_trans_sigma, &mut rng)
            } else {
                perturb(&gt[i], spec.inlier_rot_sigma_deg, spec.inlier_trans_sigma, &mut rng)
            }
        })
        .collect();

    let images: Vec<Image> = gt.par_iter().map(|p| render_gt_image(scene, p, &k)).collect();

    let mut edges = Vec::new();
    let mut match_correct = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if crate::geometry::relative_rotation_deg(&gt[i], &gt[j]) > spec.covisibility_deg {
                continue;
            }
            let (matches, correct) = pair_matches(scene, spec, &k, &gt, i, j, &mut rng)?;
            edges.push(Edge { i, j, matches });
            match_correct.push(correct);
        }
    }
    let graph = SceneGraph::new(n, edges)?;

    Ok(Dataset {
        scene: scene.clone(),
        spec: spec.clone(),
        seed,
        intrinsics: k,
        poses,
        images,
        graph,
        labels: GtLabels {
            poses: gt,
            outliers,
            match_correct,
        },
    })
}

fn pair_matches(
    scene: &SceneSpec,
    spec: &DatasetSpec,
    k: &Intrinsics,
    gt: &[Pose],
    i: usize,
    j: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Match>, Vec<bool>)> {
    let total = spec.keypoints_per_pair;
    let wrong = (spec.wrong_match_fraction * total as f64).round() as usize;
    let q = spec.keypoint_quantization;

    // surface points visible in both images, found from random pixels of i
    let mut shared = Vec::new();
    let attempts = 60 * total;
    for _ in 0..attempts {
        if shared.len() == total {
            break;
        }
        let px = Vec2::new(rng.gen_range(0.0..k.width as f64), rng.gen_range(0.0..k.height as f64));
        let (o, d, _) = pixel_ray(&gt[i], k, &px);
        let Some(t) = scene.trace(&o, &d) else { continue };
        let x = o + d * t;
        if visible(scene, &gt[j], k, &x).is_some() {
            shared.push(x);
        }
    }
    if shared.len() < 8 {
        return Err(Error::InsufficientCovisibility { i, j, found: shared.len() });
    }

    let mut out = Vec::with_capacity(shared.len());
    for (m, x) in shared.iter().enumerate() {
        let pi = project(&gt[i], k, x)?;
        let pj = project(&gt[j], k, x)?;
        if m < wrong {
            // keep the keypoint in i, replace its partner by a far-away pixel
            let wrong_j = loop {
                let c = Vec2::new(rng.gen_range(0.0..k.width as f64), rng.gen_range(0.0..k.height as f64));
                if (c - pj).norm() > 5.0 {
                    break c;
                }
            };
            out.push((Match::new(quantize(pi, q), quantize(wrong_j, q)), false));
        } else {
            out.push((Match::new(quantize(pi, q), quantize(pj, q)), true));
        }
    }
    out.shuffle(rng);
    Ok(out.into_iter().unzip())
}
