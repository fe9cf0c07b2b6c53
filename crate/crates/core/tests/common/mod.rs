#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_nsr::autodiff::{central_difference, grad_close, Block, Gradients, ParamSet};
use robust_nsr::field::{render_ray_jittered, Field};
use robust_nsr::image::Image;
use robust_nsr::eval::{surface_metrics, SurfaceMetrics};
use robust_nsr::geometry::{pixel_ray, Intrinsics, Pose, Rotation, Sim3, Vec2, Vec3};
use robust_nsr::losses::LossConfig;
use robust_nsr::objective::{evaluate, pixel_center, Batch, MatchItem, MatchMode, RayItem, RayMode};
use robust_nsr::reloc::{estimate_axis, run_relocalization, RelocConfig, RelocInput};
use robust_nsr::scene_graph::NodeClass;
use robust_nsr::synth::{generate_dataset, Dataset, DatasetSpec, SceneSpec};
use robust_nsr::trainer::{build_batch, step_rng, train_step, Observations, TrainConfig, TrainState};

pub const SAMPLES: usize = 24;

/// Perturbed, painted sphere with `n` cameras on a slightly tilted ring.
pub fn params(res: usize, n: usize, seed: u64) -> (ParamSet, Intrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = Field::sphere(res, 0.55);
    for v in field.sdf.iter_mut() {
        *v += rng.gen_range(-0.03..0.03);
    }
    field.paint(|x| [0.5 + 0.4 * x.x, 0.5 - 0.3 * x.y, 0.5 + 0.3 * x.z * x.x]);
    for v in field.color_o.iter_mut() {
        *v += rng.gen_range(-0.2..0.2);
    }
    for v in field.color_n.iter_mut() {
        *v += rng.gen_range(-0.2..0.2);
    }
    field.sharpness = 14.0;
    let k = Intrinsics::new(40.0, 40.0, 12.0, 12.0, 24, 24).unwrap();
    let poses = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64 + rng.gen_range(-0.05..0.05);
            let eye = Vec3::new(2.5 * a.cos(), 2.5 * a.sin(), 0.5 + rng.gen_range(-0.2..0.2));
            let target = Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0);
            Pose::look_at(&eye, &target, &Vec3::z())
        })
        .collect();
    (ParamSet { field, poses }, k)
}

fn jitter(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..SAMPLES).map(|_| rng.gen::<f64>()).collect()
}

pub fn ray(rng: &mut ChaCha8Rng, image: usize, mode: RayMode) -> RayItem {
    RayItem {
        image,
        pixel: Vec2::new(rng.gen_range(7.0..17.0), rng.gen_range(7.0..17.0)),
        target: [rng.gen(), rng.gen(), rng.gen()],
        jitter: jitter(rng),
        mode,
    }
}

pub fn matched(rng: &mut ChaCha8Rng, i: usize, j: usize, mode: MatchMode) -> MatchItem {
    MatchItem {
        i,
        j,
        kp_i: Vec2::new(rng.gen_range(8.0..16.0), rng.gen_range(8.0..16.0)),
        kp_j: Vec2::new(rng.gen_range(8.0..16.0), rng.gen_range(8.0..16.0)),
        jitter_i: jitter(rng),
        jitter_j: jitter(rng),
        mode,
    }
}

/// Joint rays on every image and random matches between ring neighbours.
pub fn joint_batch(n: usize, rays: usize, matches: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        rays: (0..rays).map(|r| ray(&mut rng, r % n, RayMode::Joint)).collect(),
        matches: (0..matches)
            .map(|m| {
                let i = m % n;
                matched(&mut rng, i.min((i + 1) % n), i.max((i + 1) % n), MatchMode::Joint)
            })
            .collect(),
    }
}

pub fn loss_cfg() -> LossConfig {
    LossConfig {
        alpha: 0.3,
        beta: 0.05,
        weight_floor: 0.0,
        ..LossConfig::default()
    }
}

pub fn gradients(p: &ParamSet, k: &Intrinsics, batch: &Batch, cfg: &LossConfig) -> Gradients {
    let mut g = Gradients::zeros_like(p);
    evaluate(&p.field, &p.poses, k, batch, cfg, Some(&mut g));
    g
}

/// Up to `n` distinct random coordinates of a block that carry gradient.
pub fn pick(g: &Gradients, block: Block, n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut nz = g.nonzero_coords(block);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nz.shuffle(&mut rng);
    nz.truncate(n);
    nz.sort_unstable();
    nz
}

/// Returns the coordinates whose analytic gradient disagrees with central differences.
pub fn mismatches(
    p: &ParamSet,
    g: &Gradients,
    block: Block,
    coords: &[usize],
    h: f64,
    rel: f64,
    abs: f64,
    f: &(dyn Fn(&ParamSet) -> f64 + Sync),
) -> Vec<(usize, f64, f64)> {
    use rayon::prelude::*;
    coords
        .par_iter()
        .filter_map(|&c| {
            let fd = central_difference(p, block, c, h, f);
            let a = g.get(block, c);
            (!grad_close(a, fd, rel, abs)).then_some((c, a, fd))
        })
        .collect()
}

/// Field initialised to an analytic scene: exact SDF samples and its albedo
/// in both color heads.
pub fn scene_field(scene: &SceneSpec, res: usize, sharpness: f64) -> Field {
    let mut f = Field::from_sdf(res, |x| scene.sdf(x));
    f.paint(|x| scene.albedo(x));
    f.sharpness = sharpness;
    f
}

/// Image of the field's view-independent head as the PSNR probes see it
/// (pixel centers, midpoint samples), plus Gaussian noise of width `noise`.
pub fn field_image(field: &Field, pose: &Pose, k: &Intrinsics, samples: usize, noise: f64, seed: u64) -> Image {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let jitter = vec![0.5; samples];
    let mut img = Image::new(k.width, k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let (o, d, _) = pixel_ray(pose, k, &pixel_center(x, y));
            let mut c = render_ray_jittered(field, &o, &d, &jitter).map(|r| r.color_n).unwrap_or([0.0; 3]);
            if noise > 0.0 {
                for v in c.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            img.set(x, y, c);
        }
    }
    img
}

/// Small synthetic dataset with a matching training configuration.
pub fn small_run(cameras: usize, px: usize, iterations: usize, seed: u64) -> (Dataset, Observations, TrainConfig) {
    let spec = DatasetSpec {
        cameras,
        width: px,
        height: px,
        ..DatasetSpec::default()
    };
    let d = generate_dataset(&SceneSpec::default(), &spec, seed).unwrap();
    let obs = Observations::from(&d);
    let cfg = TrainConfig {
        iterations,
        grid_resolution: 16,
        rays_per_batch: 32,
        samples_per_ray: 24,
        matches_per_step: 16,
        probe_pixels: 32,
        confidence_period: 50,
        graph_samples: 32,
        seed,
        ..TrainConfig::default()
    };
    (d, obs, cfg)
}

/// Trains jointly for `warm` steps, then marks node `inlier` as the only
/// inlier with zero confidence and everything else as outliers. Runs `steps`
/// more steps and reports what moved that should have stayed put.
pub fn frozen_inlier_violations(
    obs: &Observations,
    cfg: &TrainConfig,
    inlier: usize,
    warm: usize,
    steps: usize,
) -> Vec<String> {
    let loss = LossConfig::default();
    let mut state = TrainState::new(obs, cfg).unwrap();
    for _ in 0..warm {
        train_step(&mut state, obs, cfg, &loss);
    }
    let n = state.poses.len();
    for node in &mut state.graph.nodes {
        let is_inlier = node.id == inlier;
        node.class = if is_inlier { NodeClass::Inlier } else { NodeClass::Outlier };
        node.confidence = if is_inlier { 0.0 } else { 1.0 / (n - 1) as f64 };
    }
    let field = state.field.clone();
    let poses = state.poses.clone();
    let mut touched_inlier_edge = false;
    for _ in 0..steps {
        let mut rng = step_rng(cfg.seed, state.iteration);
        let (_, batch) = build_batch(&state, obs, cfg, &mut rng);
        touched_inlier_edge |= batch.matches.iter().any(|m| m.i == inlier || m.j == inlier);
        train_step(&mut state, obs, cfg, &loss);
    }
    let mut bad = Vec::new();
    if !touched_inlier_edge {
        bad.push("no batch contained an inlier-outlier match".to_string());
    }
    if state.field.sdf != field.sdf {
        bad.push("sdf grid changed".into());
    }
    if state.field.color_o != field.color_o || state.field.color_n != field.color_n {
        bad.push("color grids changed".into());
    }
    if state.field.sharpness.to_bits() != field.sharpness.to_bits() {
        bad.push("sharpness changed".into());
    }
    if state.poses[inlier] != poses[inlier] {
        bad.push("inlier pose changed".into());
    }
    if (0..n).filter(|&i| i != inlier).all(|i| state.poses[i] == poses[i]) {
        bad.push("no outlier pose moved".into());
    }
    bad
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    Rotation::from_axis_angle(&axis, rng.gen_range(0.0..3.1))
}

pub fn random_sim3(rng: &mut ChaCha8Rng) -> Sim3 {
    Sim3 {
        scale: rng.gen_range(0.3..3.0),
        rotation: random_rotation(rng),
        translation: Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
    }
}

/// Cameras on a ring of radius 2 with random heights, looking inward.
pub fn ring_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = Vec3::new(2.0 * a.cos(), 2.0 * a.sin(), rng.gen_range(0.0..0.8));
            Pose::look_at(&eye, &Vec3::new(0.0, 0.0, rng.gen_range(-0.1..0.1)), &Vec3::z())
        })
        .collect()
}

/// O(n^2) nearest neighbours with the same arithmetic as the tree.
pub fn brute_surface_metrics(pred: &[Vec3], gt: &[Vec3], rho: f64) -> SurfaceMetrics {
    let nn = |from: &[Vec3], to: &[Vec3]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let (dx, dy, dz) = (p.x - q.x, p.y - q.y, p.z - q.z);
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    surface_metrics(&nn(pred, gt), &nn(gt, pred), rho)
}

/// Random point cloud in the unit cube; every third point sits on a shared
/// grid plane, like mesh vertices do.
pub fn grid_cloud(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec3> {
    (0..k)
        .map(|i| {
            let mut p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if i % 3 == 0 {
                p.x = (p.x * 8.0).round() / 8.0;
            }
            p
        })
        .collect()
}

pub fn perturb_pose(p: &Pose, rng: &mut ChaCha8Rng, rot_deg: f64, trans: f64) -> Pose {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    let r = Rotation::from_axis_angle(&axis, rot_deg.to_radians());
    let t = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * trans;
    Pose::new(r * p.rotation, p.translation + t)
}

/// 48 px dataset and a field built from its analytic scene.
pub fn reloc_fixture() -> (Dataset, Field) {
    let spec = DatasetSpec {
        width: 48,
        height: 48,
        ..DatasetSpec::default()
    };
    let d = generate_dataset(&SceneSpec::default(), &spec, 11).unwrap();
    let field = scene_field(&d.scene, 48, 60.0);
    (d, field)
}

/// Re-localizes `runs` images rendered from the field itself. Even runs start
/// at the truth and must keep it; odd runs start up to 90 degrees off. No run
/// may end worse than its incumbent. Returns accepted count and violations.
pub fn randomized_reloc(d: &Dataset, field: &Field, runs: u64) -> (usize, Vec<String>) {
    let cfg = RelocConfig {
        particles: 6,
        stage1_steps: 4,
        stage2_steps: 12,
        rays_per_step: 16,
        probe_pixels: 128,
        ..RelocConfig::default()
    };
    let axis = estimate_axis(&d.labels.poses).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut accepted = 0;
    let mut bad = Vec::new();
    for run in 0..runs {
        let id = rng.gen_range(0..d.images.len());
        let gt = d.labels.poses[id];
        // the image comes from the field itself, so `gt` is the optimum
        let image = field_image(field, &gt, &d.intrinsics, 48, 0.01, run);
        let incumbent = if run % 2 == 0 {
            gt
        } else {
            let deg = rng.gen_range(0.0..90.0);
            perturb_pose(&gt, &mut rng, deg, 0.1)
        };
        let input = RelocInput {
            field,
            intrinsics: &d.intrinsics,
            image: &image,
            image_id: id,
            incumbent,
            axis,
            samples: 48,
            seed: run,
        };
        let out = run_relocalization(&input, &cfg).unwrap();
        let best = out.particle_psnrs[out.chosen];
        if out.particle_psnrs.iter().any(|p| *p > best) {
            bad.push(format!("run {run}: chosen particle is not the best"));
        }
        if out.accepted != out.pose.is_some() {
            bad.push(format!("run {run}: accepted flag and pose disagree"));
        }
        if out.accepted {
            accepted += 1;
            if best <= out.incumbent_psnr + cfg.margin_db {
                bad.push(format!("run {run}: degraded ({best} vs {})", out.incumbent_psnr));
            }
            if run % 2 == 0 {
                bad.push(format!("run {run}: truth replaced ({} vs {best})", out.incumbent_psnr));
            }
        }
    }
    (accepted, bad)
}
