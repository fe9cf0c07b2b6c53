//! Monte Carlo re-localization of outlier poses.
//!
//! Candidate poses (particles) are spread around the main axis of the
//! camera ring, each is refined against the frozen field through the
//! view-independent color head, and the best one replaces the outlier if
//! it renders the outlier's image strictly better.

use std::collections::VecDeque;

use nalgebra::SymmetricEigen;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::field::{psnr_from_mse, Field};
use crate::geometry::{Intrinsics, Mat3, Pose, Rotation, Vec3};
use crate::image::Image;
use crate::losses::LossConfig;
use crate::objective::{evaluate, pixel_center, probe_mse, probe_pixels, Batch, RayItem, RayMode};
use crate::optim::PoseMomentum;
use crate::{Error, Result};

/// Number of recent PSNR values averaged into a particle's score.
pub const HISTORY: usize = 10;

/// Batch MSE floor for particle scores (100 dB), so a batch that happens to
/// render perfectly cannot push the softmax to infinity.
const MSE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelocConfig {
    pub particles: usize,
    /// Steps per particle, visiting particles in turn.
    pub stage1_steps: usize,
    /// Steps in total, each on a particle drawn from the PSNR distribution.
    pub stage2_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub rays_per_step: usize,
    /// Fixed pixels on which incumbent and particles are compared.
    pub probe_pixels: usize,
    /// A particle must beat the incumbent by more than this (dB).
    pub margin_db: f64,
}

impl Default for RelocConfig {
    fn default() -> Self {
        RelocConfig {
            particles: 24,
            stage1_steps: 300,
            stage2_steps: 700,
            lr: 1e-2,
            momentum: 0.9,
            rays_per_step: 32,
            probe_pixels: 512,
            margin_db: 0.1,
        }
    }
}

impl RelocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("reloc.particles must be at least 2".into()));
        }
        if self.rays_per_step == 0 || self.probe_pixels == 0 {
            return Err(Error::Config("reloc ray counts must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.margin_db >= 0.0) {
            return Err(Error::Config("reloc.lr must be positive, momentum in [0, 1), margin non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub direction: Vec3,
    pub anchor: Vec3,
}

/// Normal of the best-fit plane through the camera centers, anchored at
/// their centroid and oriented along the mean camera up vector.
pub fn estimate_axis(poses: &[Pose]) -> Result<Axis> {
    if poses.len() < 3 {
        return Err(Error::DegenerateRing(format!("need 3 cameras, got {}", poses.len())));
    }
    let centers: Vec<Vec3> = poses.iter().map(|p| p.center()).collect();
    let anchor = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let mut cov = Mat3::zeros();
    for c in &centers {
        let d = c - anchor;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (mid, max) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(max > 0.0) || mid <= 1e-12 * max {
        return Err(Error::DegenerateRing("camera centers are collinear".into()));
    }
    let mut direction: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
    // camera y points down in the image, so up is -y
    let up: Vec3 = poses.iter().map(|p| p.rotation.apply(&-Vec3::y())).sum();
    if direction.dot(&up) < 0.0 {
        direction = -direction;
    }
    Ok(Axis { direction, anchor })
}

/// Rotates a camera about `axis` by `theta`: orientation and center alike.
pub fn rotate_about_axis(pose: &Pose, axis: &Axis, theta: f64) -> Pose {
    let r = Rotation::from_axis_angle(&axis.direction, theta);
    Pose::new(r * pose.rotation, axis.anchor + r.apply(&(pose.translation - axis.anchor)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub pose: Pose,
    pub history: VecDeque<f64>,
    pub probability: f64,
}

impl Particle {
    pub fn new(pose: Pose, probability: f64) -> Self {
        Particle {
            pose,
            history: VecDeque::with_capacity(HISTORY),
            probability,
        }
    }

    pub fn push_psnr(&mut self, psnr: f64) {
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(psnr);
    }

    /// Mean of the recorded window; `None` before the first entry.
    pub fn score(&self) -> Option<f64> {
        if self.history.is_empty() {
            None
        } else {
            Some(self.history.iter().sum::<f64>() / self.history.len() as f64)
        }
    }
}

/// `count` copies of `outlier` turned by `i * 2 pi / count`, `i = 1..=count`,
/// with uniform probabilities. The last one is the outlier itself.
pub fn spawn_particles(outlier: &Pose, axis: &Axis, count: usize) -> Result<Vec<Particle>> {
    if count < 2 {
        return Err(Error::Config(format!("need at least 2 particles, got {count}")));
    }
    let p = 1.0 / count as f64;
    Ok((1..=count)
        .map(|i| {
            let theta = i as f64 * std::f64::consts::TAU / count as f64;
            Particle::new(rotate_about_axis(outlier, axis, theta), p)
        })
        .collect())
}

/// `P_i = exp(s_i - min s) / sum_j exp(s_j - min s)`.
pub fn particle_distribution(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = scores.iter().map(|s| (s - min).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Recomputes every particle's probability from its PSNR window.
pub fn update_probabilities(particles: &mut [Particle]) {
    let scores: Vec<f64> = particles.iter().map(|p| p.score().expect("particle without PSNR history")).collect();
    for (p, q) in particles.iter_mut().zip(particle_distribution(&scores)) {
        p.probability = q;
    }
}

/// Record of one re-localization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelocOutcome {
    pub image: usize,
    pub incumbent_psnr: f64,
    /// Final probe PSNR of each particle.
    pub particle_psnrs: Vec<f64>,
    pub chosen: usize,
    pub accepted: bool,
    #[serde(skip)]
    pub pose: Option<Pose>,
}

/// Everything a re-localization reads. The field is only borrowed, so it
/// is untouched by construction.
pub struct RelocInput<'a> {
    pub field: &'a Field,
    pub intrinsics: &'a Intrinsics,
    pub image: &'a Image,
    pub image_id: usize,
    pub incumbent: Pose,
    pub axis: Axis,
    pub samples: usize,
    pub seed: u64,
}

struct Worker {
    grads: Gradients,
    opt: PoseMomentum,
    rng: ChaCha8Rng,
}

impl Worker {
    /// One gradient step on the C_n color loss; returns the batch PSNR
    /// measured before the step.
    fn step(&mut self, input: &RelocInput, cfg: &RelocConfig, pose: &mut Pose) -> f64 {
        let k = input.intrinsics;
        let rays = (0..cfg.rays_per_step)
            .map(|_| {
                let (x, y) = (self.rng.gen_range(0..k.width), self.rng.gen_range(0..k.height));
                RayItem {
                    image: 0,
                    pixel: pixel_center(x, y),
                    target: input.image.get(x, y),
                    jitter: (0..input.samples).map(|_| self.rng.gen()).collect(),
                    mode: RayMode::Reloc,
                }
            })
            .collect();
        let batch = Batch { rays, matches: vec![] };
        self.grads.clear();
        let poses = [*pose];
        let ev = evaluate(input.field, &poses, k, &batch, &LossConfig::default(), Some(&mut self.grads));
        let mse = ev.rays.iter().map(|r| r.sq_err_n).sum::<f64>() / ev.rays.len() as f64;
        let g = self.grads.poses[0];
        self.opt.step_one(0, pose, &g, cfg.lr);
        psnr_from_mse(mse.max(MSE_FLOOR))
    }
}

/// Runs both stages for one outlier and decides whether to replace it.
pub fn run_relocalization(input: &RelocInput, cfg: &RelocConfig) -> Result<RelocOutcome> {
    cfg.validate()?;
    let mut particles = spawn_particles(&input.incumbent, &input.axis, cfg.particles)?;
    let mut workers: Vec<Worker> = (0..particles.len())
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
            rng.set_stream(i as u64 + 1);
            Worker {
                grads: Gradients::new(input.field, 1),
                opt: PoseMomentum::new(1, cfg.momentum),
                rng,
            }
        })
        .collect();

    // stage 1: every particle gets the same number of steps
    for _ in 0..cfg.stage1_steps {
        for (p, w) in particles.iter_mut().zip(workers.iter_mut()) {
            let psnr = w.step(input, cfg, &mut p.pose);
            p.push_psnr(psnr);
        }
    }
    // stage 2: steps go to particles in proportion to their PSNR distribution
    if cfg.stage2_steps > 0 {
        if cfg.stage1_steps == 0 {
            for (p, w) in particles.iter_mut().zip(workers.iter_mut()) {
                let psnr = w.step(input, cfg, &mut p.pose);
                p.push_psnr(psnr);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
        for _ in 0..cfg.stage2_steps {
            update_probabilities(&mut particles);
            let dist = WeightedIndex::new(particles.iter().map(|p| p.probability)).expect("valid distribution");
            let i = dist.sample(&mut rng);
            let psnr = workers[i].step(input, cfg, &mut particles[i].pose);
            particles[i].push_psnr(psnr);
        }
    }

    // final comparison on a common set of pixels
    let pixels = probe_pixels(input.intrinsics, cfg.probe_pixels, input.seed);
    let probe = |pose: &Pose| {
        let (_, mse_n) = probe_mse(input.field, pose, input.intrinsics, input.image, &pixels, input.samples);
        psnr_from_mse(mse_n)
    };
    let incumbent_psnr = probe(&input.incumbent);
    let particle_psnrs: Vec<f64> = particles.iter().map(|p| probe(&p.pose)).collect();
    let chosen = (0..particle_psnrs.len())
        .max_by(|&a, &b| particle_psnrs[a].total_cmp(&particle_psnrs[b]).then(b.cmp(&a)))
        .expect("at least two particles");
    let accepted = particle_psnrs[chosen] > incumbent_psnr + cfg.margin_db;
    Ok(RelocOutcome {
        image: input.image_id,
        incumbent_psnr,
        particle_psnrs,
        chosen,
        accepted,
        pose: accepted.then_some(particles[chosen].pose),
    })
}
