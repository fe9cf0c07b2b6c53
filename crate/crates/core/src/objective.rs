//! Assembly of the total loss over a batch of pixel rays and keypoint
//! matches, with gradient routing per ray and per match.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{ray_to_pose, Gradients};
use crate::field::{render_ray_jittered, Field, RayAdjoint, RayRender, Route};
use crate::geometry::{pixel_ray, Intrinsics, Pose, Tangent, Vec2, Vec3};
use crate::image::Image;
use crate::losses::{color_loss_grad, iou_loss_grad, reprojection_point_grad, LossConfig, LossParts, RayMoG};

/// How a pixel ray's color losses propagate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RayMode {
    /// C_o trains geometry, C_o and the pose; C_n trains only its own grid.
    /// The ray's samples also enter the Eikonal term.
    Joint,
    /// C_o moves only the pose; the field is frozen. Used for rays of
    /// images classified as outliers.
    PoseOnly,
    /// C_n moves only the pose through the frozen field.
    Reloc,
}

#[derive(Clone, Debug)]
pub struct RayItem {
    pub image: usize,
    pub pixel: Vec2,
    pub target: [f64; 3],
    pub jitter: Vec<f64>,
    pub mode: RayMode,
}

/// How a match's IoU and re-projection terms propagate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    /// Geometry, sharpness and both poses.
    Joint,
    /// Only the pose of image `outlier`; field and the other pose frozen.
    PoseOnly { outlier: usize },
}

#[derive(Clone, Debug)]
pub struct MatchItem {
    pub i: usize,
    pub j: usize,
    pub kp_i: Vec2,
    pub kp_j: Vec2,
    pub jitter_i: Vec<f64>,
    pub jitter_j: Vec<f64>,
    pub mode: MatchMode,
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub rays: Vec<RayItem>,
    pub matches: Vec<MatchItem>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayOutcome {
    /// Per-channel mean squared error of each head.
    pub sq_err_o: f64,
    pub sq_err_n: f64,
    pub rendered: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub parts: LossParts,
    pub total: f64,
    pub rays: Vec<RayOutcome>,
    /// Match directions that could not be scored (no depth or behind camera).
    pub skipped_directions: usize,
}

fn render(field: &Field, poses: &[Pose], k: &Intrinsics, image: usize, pixel: &Vec2, jitter: &[f64]) -> Option<RayRender> {
    let (o, d, _) = pixel_ray(&poses[image], k, pixel);
    render_ray_jittered(field, &o, &d, jitter).ok()
}

/// Evaluates the total loss. When `grads` is given, adds the gradient of
/// the total into it following each item's mode.
pub fn evaluate(
    field: &Field,
    poses: &[Pose],
    k: &Intrinsics,
    batch: &Batch,
    cfg: &LossConfig,
    mut grads: Option<&mut Gradients>,
) -> Evaluation {
    let mut ev = Evaluation {
        rays: vec![RayOutcome::default(); batch.rays.len()],
        ..Evaluation::default()
    };
    let n_rays = batch.rays.len();
    let joint_samples: usize = batch
        .rays
        .iter()
        .filter(|r| r.mode == RayMode::Joint)
        .map(|r| r.jitter.len())
        .sum();

    for (ray, out) in batch.rays.iter().zip(ev.rays.iter_mut()) {
        let Some(r) = render(field, poses, k, ray.image, &ray.pixel, &ray.jitter) else {
            // rays that miss the cube render black
            let lo: f64 = ray.target.iter().map(|c| c.abs()).sum::<f64>() / (3 * n_rays) as f64;
            ev.parts.color_o += lo;
            ev.parts.color_n += lo;
            out.sq_err_o = ray.target.iter().map(|c| c * c).sum::<f64>() / 3.0;
            out.sq_err_n = out.sq_err_o;
            continue;
        };
        out.rendered = true;
        let mut so = 0.0;
        let mut sn = 0.0;
        for ch in 0..3 {
            let eo = r.color_o[ch] - ray.target[ch];
            let en = r.color_n[ch] - ray.target[ch];
            ev.parts.color_o += eo.abs() / (3 * n_rays) as f64;
            ev.parts.color_n += en.abs() / (3 * n_rays) as f64;
            so += eo * eo;
            sn += en * en;
        }
        out.sq_err_o = so / 3.0;
        out.sq_err_n = sn / 3.0;
        if ray.mode == RayMode::Joint && joint_samples > 0 {
            let e: f64 = r.samples.iter().map(|s| (s.grad.norm() - 1.0).powi(2)).sum();
            ev.parts.eikonal += e / joint_samples as f64;
        }

        if let Some(g) = grads.as_deref_mut() {
            let go = color_loss_grad(&r.color_o, &ray.target, n_rays);
            let gn = color_loss_grad(&r.color_n, &ray.target, n_rays);
            let (adj, route) = match ray.mode {
                RayMode::Joint => (
                    RayAdjoint {
                        color_o: go,
                        color_n: gn,
                        eikonal: cfg.lambda / joint_samples as f64,
                        ..RayAdjoint::default()
                    },
                    Route::joint(),
                ),
                RayMode::PoseOnly => (
                    RayAdjoint {
                        color_o: go,
                        ..RayAdjoint::default()
                    },
                    Route::pose_only(),
                ),
                RayMode::Reloc => (
                    RayAdjoint {
                        color_n: gn,
                        ..RayAdjoint::default()
                    },
                    Route::reloc(),
                ),
            };
            let rg = r.backward(field, &adj, route, &mut g.field);
            g.add_pose(ray.image, &ray_to_pose(&poses[ray.image], &r.dir, &rg));
        }
    }

    let n_matches = batch.matches.len();
    for m in &batch.matches {
        let ri = render(field, poses, k, m.i, &m.kp_i, &m.jitter_i);
        let rj = render(field, poses, k, m.j, &m.kp_j, &m.jitter_j);
        let (Some(ri), Some(rj)) = (ri, rj) else {
            ev.skipped_directions += 2;
            continue;
        };
        let mut adj_i = RayAdjoint {
            points: vec![Vec3::zeros(); ri.samples.len()],
            weights: vec![0.0; ri.weights.len()],
            ..RayAdjoint::default()
        };
        let mut adj_j = RayAdjoint {
            points: vec![Vec3::zeros(); rj.samples.len()],
            weights: vec![0.0; rj.weights.len()],
            ..RayAdjoint::default()
        };
        let mut pose_i = Tangent::zero();
        let mut pose_j = Tangent::zero();
        let mut touched = false;

        // IoU between the two rays' weight mixtures
        if cfg.alpha > 0.0 {
            if let (Ok(a), Ok(b)) = (RayMoG::from_render(&ri, cfg.sigma_scale), RayMoG::from_render(&rj, cfg.sigma_scale)) {
                if let Ok((l, ga, gb)) = iou_loss_grad(&a, &b, cfg.weight_floor) {
                    ev.parts.iou += l / n_matches as f64;
                    let s = cfg.alpha / n_matches as f64;
                    for (adj, g) in [(&mut adj_i, &ga), (&mut adj_j, &gb)] {
                        for (p, gm) in adj.points.iter_mut().zip(&g.means) {
                            *p += s * gm;
                        }
                        for (w, gw) in adj.weights.iter_mut().zip(&g.weights) {
                            *w += s * gw;
                        }
                        adj.spacing += s * cfg.sigma_scale * g.sigmas.iter().sum::<f64>();
                    }
                    touched = true;
                }
            }
        }

        // re-projection in both directions from the heaviest sample
        let s = cfg.beta / (2 * n_matches) as f64;
        for (src, adj_src, kp_dst, pose_dst, dst_img) in [
            (&ri, &mut adj_i, &m.kp_j, &mut pose_j, m.j),
            (&rj, &mut adj_j, &m.kp_i, &mut pose_i, m.i),
        ] {
            let Some(kstar) = src.max_weight_index() else {
                ev.skipped_directions += 1;
                continue;
            };
            let x = src.samples[kstar].point;
            match reprojection_point_grad(&x, &poses[dst_img], k, kp_dst, cfg.delta) {
                Ok((l, gx, gp)) => {
                    ev.parts.rep += l / (2 * n_matches) as f64;
                    adj_src.points[kstar] += s * gx;
                    *pose_dst = Tangent::new(pose_dst.omega + s * gp.omega, pose_dst.v + s * gp.v);
                    touched = true;
                }
                Err(_) => ev.skipped_directions += 1,
            }
        }

        let Some(g) = grads.as_deref_mut() else { continue };
        if !touched {
            continue;
        }
        let route = match m.mode {
            MatchMode::Joint => Route {
                sdf: true,
                sharpness: true,
                pose: true,
                ..Route::default()
            },
            MatchMode::PoseOnly { .. } => Route::pose_only(),
        };
        let gi = ri.backward(field, &adj_i, route, &mut g.field);
        let gj = rj.backward(field, &adj_j, route, &mut g.field);
        let ti = ray_to_pose(&poses[m.i], &ri.dir, &gi);
        let tj = ray_to_pose(&poses[m.j], &rj.dir, &gj);
        let sum = |a: &Tangent, b: &Tangent| Tangent::new(a.omega + b.omega, a.v + b.v);
        match m.mode {
            MatchMode::Joint => {
                g.add_pose(m.i, &sum(&ti, &pose_i));
                g.add_pose(m.j, &sum(&tj, &pose_j));
            }
            MatchMode::PoseOnly { outlier } if outlier == m.i => g.add_pose(m.i, &sum(&ti, &pose_i)),
            MatchMode::PoseOnly { .. } => g.add_pose(m.j, &sum(&tj, &pose_j)),
        }
    }

    ev.total = crate::losses::total_loss(&ev.parts, cfg);
    ev
}

/// `count` distinct pixel centers of an image, deterministic in `seed`.
pub fn probe_pixels(k: &Intrinsics, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = k.width * k.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, count.min(total)).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| (i % k.width, i / k.width)).collect()
}

pub fn pixel_center(x: usize, y: usize) -> Vec2 {
    Vec2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Per-channel mean squared error of both heads over `pixels`, rendered
/// with midpoint samples and no gradients. Rays that miss render black.
pub fn probe_mse(
    field: &Field,
    pose: &Pose,
    k: &Intrinsics,
    image: &Image,
    pixels: &[(usize, usize)],
    samples: usize,
) -> (f64, f64) {
    let jitter = vec![0.5; samples];
    let errs: Vec<(f64, f64)> = pixels
        .par_iter()
        .map(|&(x, y)| {
            let target = image.get(x, y);
            let (o, d, _) = pixel_ray(pose, k, &pixel_center(x, y));
            let (co, cn) = match render_ray_jittered(field, &o, &d, &jitter) {
                Ok(r) => (r.color_o, r.color_n),
                Err(_) => ([0.0; 3], [0.0; 3]),
            };
            let se = |c: [f64; 3]| (0..3).map(|i| (c[i] - target[i]).powi(2)).sum::<f64>() / 3.0;
            (se(co), se(cn))
        })
        .collect();
    let n = errs.len().max(1) as f64;
    let (so, sn) = errs.iter().fold((0.0, 0.0), |a, e| (a.0 + e.0, a.1 + e.1));
    (so / n, sn / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, grad_close, Block, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamSet, Intrinsics) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut field = Field::sphere(8, 0.55);
        for v in field.sdf.iter_mut() {
            *v += rng.gen_range(-0.03..0.03);
        }
        field.paint(|x| [0.5 + 0.4 * x.x, 0.5 - 0.3 * x.y, 0.5 + 0.3 * x.z]);
        for v in field.color_o.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        field.sharpness = 12.0;
        let k = Intrinsics::new(40.0, 40.0, 12.0, 12.0, 24, 24).unwrap();
        let poses = vec![
            Pose::look_at(&Vec3::new(2.5, 0.3, 0.5), &Vec3::zeros(), &Vec3::z()),
            Pose::look_at(&Vec3::new(2.0, 1.4, 0.6), &Vec3::new(0.05, 0.0, 0.0), &Vec3::z()),
            Pose::look_at(&Vec3::new(1.2, 2.2, 0.4), &Vec3::zeros(), &Vec3::z()),
        ];
        (ParamSet { field, poses }, k)
    }

    fn jitter(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..16).map(|_| rng.gen::<f64>()).collect()
    }

    fn cfg() -> LossConfig {
        LossConfig {
            alpha: 0.3,
            beta: 0.05,
            weight_floor: 0.0,
            ..LossConfig::default()
        }
    }

    fn ray(rng: &mut ChaCha8Rng, image: usize, mode: RayMode) -> RayItem {
        RayItem {
            image,
            pixel: Vec2::new(rng.gen_range(8.0..16.0), rng.gen_range(8.0..16.0)),
            target: [rng.gen(), rng.gen(), rng.gen()],
            jitter: jitter(rng),
            mode,
        }
    }

    fn matched(rng: &mut ChaCha8Rng, i: usize, j: usize, mode: MatchMode) -> MatchItem {
        MatchItem {
            i,
            j,
            kp_i: Vec2::new(rng.gen_range(9.0..15.0), rng.gen_range(9.0..15.0)),
            kp_j: Vec2::new(rng.gen_range(9.0..15.0), rng.gen_range(9.0..15.0)),
            jitter_i: jitter(rng),
            jitter_j: jitter(rng),
            mode,
        }
    }

    fn analytic(p: &ParamSet, k: &Intrinsics, batch: &Batch, cfg: &LossConfig) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        evaluate(&p.field, &p.poses, k, batch, cfg, Some(&mut g));
        g
    }

    fn check(p: &ParamSet, g: &Gradients, block: Block, coords: &[usize], f: &dyn Fn(&ParamSet) -> f64) {
        for &c in coords {
            let fd = central_difference(p, block, c, 1e-6, f);
            let a = g.get(block, c);
            assert!(grad_close(a, fd, 2e-3, 1e-7), "{block} {c}: analytic {a} fd {fd}");
        }
    }

    fn some_coords(g: &Gradients, block: Block, n: usize) -> Vec<usize> {
        let nz = g.nonzero_coords(block);
        assert!(!nz.is_empty(), "{block} has no gradient");
        let step = (nz.len() / n).max(1);
        nz.into_iter().step_by(step).collect()
    }

    #[test]
    fn joint_batch_gradient_matches_finite_differences() {
        let (p, k) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = Batch {
            rays: (0..4).map(|i| ray(&mut rng, i % 3, RayMode::Joint)).collect(),
            matches: vec![matched(&mut rng, 0, 1, MatchMode::Joint), matched(&mut rng, 1, 2, MatchMode::Joint)],
        };
        let cfg = cfg();
        let g = analytic(&p, &k, &batch, &cfg);
        let ev = evaluate(&p.field, &p.poses, &k, &batch, &cfg, None);
        assert!(ev.parts.iou > 0.0 && ev.parts.rep > 0.0 && ev.parts.eikonal > 0.0);
        // C_n is detached from geometry and poses
        let geo = |q: &ParamSet| {
            let e = evaluate(&q.field, &q.poses, &k, &batch, &cfg, None);
            e.total - e.parts.color_n
        };
        let all = |q: &ParamSet| evaluate(&q.field, &q.poses, &k, &batch, &cfg, None).total;
        check(&p, &g, Block::Sdf, &some_coords(&g, Block::Sdf, 25), &geo);
        check(&p, &g, Block::Sharpness, &[0], &geo);
        check(&p, &g, Block::ColorO, &some_coords(&g, Block::ColorO, 25), &all);
        check(&p, &g, Block::ColorN, &some_coords(&g, Block::ColorN, 25), &all);
        check(&p, &g, Block::Pose, &(0..18).collect::<Vec<_>>(), &geo);
    }

    #[test]
    fn pose_only_and_reloc_rays_leave_the_field_alone() {
        let (p, k) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = cfg();
        for (mode, head) in [(RayMode::PoseOnly, 0), (RayMode::Reloc, 1)] {
            let batch = Batch {
                rays: (0..3).map(|_| ray(&mut rng, 2, mode)).collect(),
                matches: vec![],
            };
            let g = analytic(&p, &k, &batch, &cfg);
            assert!(g.field.is_zero());
            assert_eq!(g.active_poses, vec![false, false, true]);
            let f = |q: &ParamSet| {
                let e = evaluate(&q.field, &q.poses, &k, &batch, &cfg, None);
                if head == 0 {
                    e.parts.color_o
                } else {
                    e.parts.color_n
                }
            };
            check(&p, &g, Block::Pose, &(12..18).collect::<Vec<_>>(), &f);
        }
    }

    #[test]
    fn pose_only_match_moves_only_the_outlier() {
        let (p, k) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = cfg();
        let batch = Batch {
            rays: vec![],
            matches: (0..3).map(|_| matched(&mut rng, 0, 1, MatchMode::PoseOnly { outlier: 1 })).collect(),
        };
        let g = analytic(&p, &k, &batch, &cfg);
        assert!(g.field.is_zero());
        assert_eq!(g.active_poses, vec![false, true, false]);
        assert_eq!(g.poses[0], [0.0; 6]);
        let f = |q: &ParamSet| evaluate(&q.field, &q.poses, &k, &batch, &cfg, None).total;
        check(&p, &g, Block::Pose, &(6..12).collect::<Vec<_>>(), &f);
    }

    #[test]
    fn value_does_not_depend_on_gradient_request() {
        let (p, k) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = Batch {
            rays: (0..5).map(|i| ray(&mut rng, i % 3, RayMode::Joint)).collect(),
            matches: vec![matched(&mut rng, 2, 0, MatchMode::Joint)],
        };
        let cfg = cfg();
        let a = evaluate(&p.field, &p.poses, &k, &batch, &cfg, None);
        let mut g = Gradients::zeros_like(&p);
        let b = evaluate(&p.field, &p.poses, &k, &batch, &cfg, Some(&mut g));
        assert_eq!(a.total, b.total);
    }
}
