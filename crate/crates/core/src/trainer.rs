//! The joint optimization loop and its schedule.

use rand::prelude::*;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::field::{psnr_from_mse, Field, Head, PsnrTracker};
use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;
use crate::losses::{LossConfig, LossParts};
use crate::objective::{evaluate, pixel_center, probe_mse, probe_pixels, Batch, MatchItem, MatchMode, RayItem, RayMode};
use crate::optim::{cosine_lr, FieldAdam, PoseMomentum};
use crate::reloc::{estimate_axis, run_relocalization, RelocConfig, RelocInput, RelocOutcome};
use crate::scene_graph::{GraphUpdate, NodeClass, SceneGraph};
use crate::synth::Dataset;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub matches_per_step: usize,
    pub grid_resolution: usize,
    /// Radius of the sphere the SDF grid starts from.
    pub init_radius: f64,
    pub lr_field: f64,
    pub lr_pose: f64,
    pub lr_sharpness: f64,
    /// Learning rates decay to this fraction of their base value.
    pub lr_floor: f64,
    pub pose_momentum: f64,
    pub sharpness_init: f64,
    pub sharpness_max: f64,
    /// Defaults to a tenth of `iterations`.
    pub warmup_iters: Option<usize>,
    /// Graph updates are spread evenly: with 3 they fall at 25%, 50%, 75%.
    pub graph_updates: usize,
    pub confidence_period: usize,
    pub lambda_c: f64,
    /// Angular sparsification threshold (degrees).
    pub tau: f64,
    /// PSNR gap above which a node is an outlier (dB).
    pub tau1: f64,
    /// Re-projection threshold at the first and the last graph update (pixels).
    pub tau_rep_start: f64,
    pub tau_rep_end: f64,
    pub psnr_gamma: f64,
    /// Pixels per image rendered when refreshing PSNR estimates.
    pub probe_pixels: usize,
    /// Samples per ray for depths during graph updates.
    pub graph_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 12000,
            rays_per_batch: 128,
            samples_per_ray: 64,
            matches_per_step: 64,
            grid_resolution: 64,
            init_radius: 0.6,
            lr_field: 1e-2,
            lr_pose: 1e-3,
            lr_sharpness: 0.05,
            lr_floor: 0.05,
            pose_momentum: 0.9,
            sharpness_init: 30.0,
            sharpness_max: 500.0,
            warmup_iters: None,
            graph_updates: 3,
            confidence_period: 500,
            lambda_c: 0.01,
            tau: 70.0,
            tau1: 9.0,
            tau_rep_start: 8.0,
            tau_rep_end: 2.0,
            psnr_gamma: 0.95,
            probe_pixels: 256,
            graph_samples: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 || self.rays_per_batch == 0 || self.confidence_period == 0 || self.probe_pixels == 0 {
            return bad("train counts must be positive");
        }
        if self.samples_per_ray < 8 || self.graph_samples < 8 {
            return bad("at least 8 samples per ray are required");
        }
        if self.grid_resolution < 2 {
            return bad("grid_resolution must be at least 2");
        }
        for (name, v) in [
            ("lr_field", self.lr_field),
            ("lr_pose", self.lr_pose),
            ("lr_sharpness", self.lr_sharpness),
            ("sharpness_init", self.sharpness_init),
            ("lambda_c", self.lambda_c),
            ("tau1", self.tau1),
            ("init_radius", self.init_radius),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 180.0) {
            return bad("train.tau must be in (0, 180]");
        }
        if !(0.0..1.0).contains(&self.pose_momentum) || !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("pose_momentum must be in [0, 1) and lr_floor in [0, 1]");
        }
        if !(self.psnr_gamma > 0.0 && self.psnr_gamma < 1.0) {
            return bad("psnr_gamma must be in (0, 1)");
        }
        if !(self.sharpness_max >= self.sharpness_init) {
            return bad("sharpness_max must be at least sharpness_init");
        }
        if !(self.tau_rep_start > 0.0 && self.tau_rep_end > 0.0) {
            return bad("tau_rep values must be positive");
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_iters.unwrap_or(self.iterations / 10)
    }

    /// Iteration counts after which graph updates run, ascending.
    pub fn graph_update_points(&self) -> Vec<usize> {
        let q = self.graph_updates;
        (1..=q)
            .map(|i| self.iterations * i / (q + 1))
            .filter(|&it| it > self.warmup())
            .collect()
    }

    /// Linear decay from `tau_rep_start` to `tau_rep_end` across updates.
    pub fn tau_rep(&self, update: usize, updates: usize) -> f64 {
        if updates <= 1 {
            return self.tau_rep_start;
        }
        let f = update as f64 / (updates - 1) as f64;
        self.tau_rep_start + f * (self.tau_rep_end - self.tau_rep_start)
    }
}

/// What the optimizer may see of a dataset: no ground truth.
#[derive(Clone, Debug)]
pub struct Observations {
    pub intrinsics: Intrinsics,
    pub images: Vec<Image>,
    pub poses: Vec<Pose>,
    pub graph: SceneGraph,
}

impl From<&Dataset> for Observations {
    fn from(d: &Dataset) -> Self {
        Observations {
            intrinsics: d.intrinsics,
            images: d.images.clone(),
            poses: d.poses.clone(),
            graph: d.graph.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    Joint,
    /// Only the outlier's pose moves.
    OutlierPoseOnly,
    Skip,
}

/// Unknown counts as inlier.
pub fn pair_policy(a: NodeClass, b: NodeClass) -> PairMode {
    match (a == NodeClass::Outlier, b == NodeClass::Outlier) {
        (false, false) => PairMode::Joint,
        (true, true) => PairMode::Skip,
        _ => PairMode::OutlierPoseOnly,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Init {
        edges_raw: usize,
        edges_kept: usize,
        confidences: Vec<f64>,
    },
    Confidence {
        iteration: usize,
        psnr_n: Vec<f64>,
        confidences: Vec<f64>,
    },
    Classify {
        iteration: usize,
        psnr_o: Vec<f64>,
        psnr_n: Vec<f64>,
        outliers: Vec<usize>,
    },
    Reloc {
        iteration: usize,
        #[serde(flatten)]
        outcome: RelocOutcome,
    },
    GraphUpdate {
        iteration: usize,
        tau_rep: f64,
        #[serde(flatten)]
        update: GraphUpdate,
    },
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub field: Field,
    pub poses: Vec<Pose>,
    pub graph: SceneGraph,
    pub adam: FieldAdam,
    pub pose_opt: PoseMomentum,
    pub psnr: PsnrTracker,
    pub iteration: usize,
    pub events: Vec<Event>,
    grads: Gradients,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub node: usize,
    pub parts: LossParts,
    pub total: f64,
}

/// RNG for one iteration: the same `(seed, iteration)` always gives the
/// same draws, which makes resumed runs identical to uninterrupted ones.
pub fn step_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

fn probe_seed(seed: u64, node: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(node as u64 + 1)
}

impl TrainState {
    /// Fresh state: sphere-initialized field, sparsified graph and
    /// match-count confidences.
    pub fn new(obs: &Observations, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if obs.images.len() != obs.poses.len() || obs.graph.len() != obs.poses.len() {
            return Err(Error::Config("images, poses and graph nodes disagree in count".into()));
        }
        let mut field = Field::sphere(cfg.grid_resolution, cfg.init_radius);
        field.sharpness = cfg.sharpness_init;
        let mut graph = obs.graph.clone();
        let edges_raw = graph.edges.len();
        graph.sparsify(&obs.poses, cfg.tau);
        graph.initial_confidence()?;
        let n = obs.poses.len();
        let event = Event::Init {
            edges_raw,
            edges_kept: graph.edges.len(),
            confidences: graph.confidences(),
        };
        Ok(TrainState {
            adam: FieldAdam::new(&field),
            pose_opt: PoseMomentum::new(n, cfg.pose_momentum),
            psnr: PsnrTracker::new(n, cfg.psnr_gamma),
            grads: Gradients::new(&field, n),
            field,
            poses: obs.poses.clone(),
            graph,
            iteration: 0,
            events: vec![event],
        })
    }

    /// Rebuilds a state from saved parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        field: Field,
        poses: Vec<Pose>,
        graph: SceneGraph,
        adam: FieldAdam,
        pose_opt: PoseMomentum,
        psnr: PsnrTracker,
        iteration: usize,
        events: Vec<Event>,
    ) -> Self {
        let grads = Gradients::new(&field, poses.len());
        TrainState {
            field,
            poses,
            graph,
            adam,
            pose_opt,
            psnr,
            iteration,
            events,
            grads,
        }
    }

    /// Gradient buffers of the last step.
    pub fn last_gradients(&self) -> &Gradients {
        &self.grads
    }
}

/// Builds the batch of one step: rays of the sampled node and matches
/// on its edges, both routed by class.
pub fn build_batch(state: &TrainState, obs: &Observations, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (usize, Batch) {
    let node = state.graph.sample_node(rng);
    let classes = state.graph.classes();
    let k = &obs.intrinsics;
    let mode = if classes[node] == NodeClass::Outlier {
        RayMode::PoseOnly
    } else {
        RayMode::Joint
    };
    let img = &obs.images[node];
    let rays = (0..cfg.rays_per_batch)
        .map(|_| {
            let (x, y) = (rng.gen_range(0..k.width), rng.gen_range(0..k.height));
            RayItem {
                image: node,
                pixel: pixel_center(x, y),
                target: img.get(x, y),
                jitter: (0..cfg.samples_per_ray).map(|_| rng.gen()).collect(),
                mode,
            }
        })
        .collect();

    let mut pool = Vec::new();
    for (ei, e) in state.graph.edges.iter().enumerate() {
        if e.i != node && e.j != node {
            continue;
        }
        let mode = match pair_policy(classes[e.i], classes[e.j]) {
            PairMode::Skip => continue,
            PairMode::Joint => MatchMode::Joint,
            PairMode::OutlierPoseOnly => MatchMode::PoseOnly {
                outlier: if classes[e.i] == NodeClass::Outlier { e.i } else { e.j },
            },
        };
        for (mi, m) in e.matches.iter().enumerate() {
            if m.alive {
                pool.push((ei, mi, mode));
            }
        }
    }
    let take = cfg.matches_per_step.min(pool.len());
    let mut picks = sample(rng, pool.len(), take).into_vec();
    picks.sort_unstable();
    let matches = picks
        .into_iter()
        .map(|p| {
            let (ei, mi, mode) = pool[p];
            let e = &state.graph.edges[ei];
            let m = &e.matches[mi];
            MatchItem {
                i: e.i,
                j: e.j,
                kp_i: m.kp_i,
                kp_j: m.kp_j,
                jitter_i: (0..cfg.samples_per_ray).map(|_| rng.gen()).collect(),
                jitter_j: (0..cfg.samples_per_ray).map(|_| rng.gen()).collect(),
                mode,
            }
        })
        .collect();
    (node, Batch { rays, matches })
}

/// One optimization step. Does not run schedule events.
pub fn train_step(state: &mut TrainState, obs: &Observations, cfg: &TrainConfig, loss: &LossConfig) -> StepInfo {
    let mut rng = step_rng(cfg.seed, state.iteration);
    let (node, batch) = build_batch(state, obs, cfg, &mut rng);
    state.grads.clear();
    let ev = evaluate(&state.field, &state.poses, &obs.intrinsics, &batch, loss, Some(&mut state.grads));

    let lr_field = cosine_lr(cfg.lr_field, state.iteration, cfg.iterations, cfg.lr_floor);
    let lr_s = cosine_lr(cfg.lr_sharpness, state.iteration, cfg.iterations, cfg.lr_floor);
    let lr_pose = cosine_lr(cfg.lr_pose, state.iteration, cfg.iterations, cfg.lr_floor);
    state.adam.step(&mut state.field, &state.grads, lr_field, lr_s, (1.0, cfg.sharpness_max));
    state.pose_opt.step(&mut state.poses, &state.grads, lr_pose);

    let eo: Vec<f64> = ev.rays.iter().map(|r| r.sq_err_o).collect();
    let en: Vec<f64> = ev.rays.iter().map(|r| r.sq_err_n).collect();
    state.psnr.track(node, &eo, Head::O);
    state.psnr.track(node, &en, Head::N);
    state.iteration += 1;
    StepInfo {
        node,
        parts: ev.parts,
        total: ev.total,
    }
}

/// Renders a fixed pixel subset of every image and folds the errors into
/// the trackers, so that rarely sampled nodes keep current estimates.
pub fn refresh_psnr(state: &mut TrainState, obs: &Observations, cfg: &TrainConfig) {
    for node in 0..state.poses.len() {
        let pixels = probe_pixels(&obs.intrinsics, cfg.probe_pixels, probe_seed(cfg.seed, node));
        let (mo, mn) = probe_mse(
            &state.field,
            &state.poses[node],
            &obs.intrinsics,
            &obs.images[node],
            &pixels,
            cfg.samples_per_ray,
        );
        state.psnr.track(node, &[mo], Head::O);
        state.psnr.track(node, &[mn], Head::N);
    }
}

/// Runs whatever the schedule asks for after `state.iteration` steps.
pub fn run_events(
    state: &mut TrainState,
    obs: &Observations,
    cfg: &TrainConfig,
    reloc: &RelocConfig,
) -> Result<()> {
    let done = state.iteration;
    let warmup = cfg.warmup();
    if done <= warmup {
        return Ok(());
    }
    let points = cfg.graph_update_points();
    let graph_update = points.iter().position(|&p| p == done);
    let confidence = (done - warmup) % cfg.confidence_period == 0;
    if !confidence && graph_update.is_none() {
        return Ok(());
    }
    refresh_psnr(state, obs, cfg);

    if confidence {
        let psnr_n = state.psnr.psnr_all(Head::N);
        state.graph.update_confidence(&psnr_n, cfg.lambda_c);
        state.events.push(Event::Confidence {
            iteration: done,
            psnr_n,
            confidences: state.graph.confidences(),
        });
    }

    let Some(q) = graph_update else { return Ok(()) };
    let psnr_o = state.psnr.psnr_all(Head::O);
    let psnr_n = state.psnr.psnr_all(Head::N);
    state.graph.classify(&psnr_o, &psnr_n, cfg.tau1);
    let outliers: Vec<usize> = (0..state.poses.len())
        .filter(|&i| state.graph.nodes[i].class == NodeClass::Outlier)
        .collect();
    state.events.push(Event::Classify {
        iteration: done,
        psnr_o,
        psnr_n,
        outliers: outliers.clone(),
    });

    if !outliers.is_empty() {
        let inliers: Vec<Pose> = (0..state.poses.len())
            .filter(|i| !outliers.contains(i))
            .map(|i| state.poses[i])
            .collect();
        match estimate_axis(&inliers) {
            Ok(axis) => {
                for &o in &outliers {
                    let input = RelocInput {
                        field: &state.field,
                        intrinsics: &obs.intrinsics,
                        image: &obs.images[o],
                        image_id: o,
                        incumbent: state.poses[o],
                        axis,
                        samples: cfg.samples_per_ray,
                        seed: probe_seed(cfg.seed ^ done as u64, o),
                    };
                    let outcome = run_relocalization(&input, reloc)?;
                    if let Some(p) = outcome.pose {
                        accept_relocation(state, obs, cfg, o, p);
                    }
                    log::info!(
                        "reloc image {o}: incumbent {:.2} dB, best particle {:.2} dB, accepted {}",
                        outcome.incumbent_psnr,
                        outcome.particle_psnrs[outcome.chosen],
                        outcome.accepted
                    );
                    state.events.push(Event::Reloc {
                        iteration: done,
                        outcome,
                    });
                }
            }
            Err(e) => log::warn!("skipping re-localization: {e}"),
        }
    }

    let tau_rep = cfg.tau_rep(q, points.len());
    let update = state
        .graph
        .update_graph(&state.field, &state.poses, &obs.intrinsics, cfg.tau, tau_rep, cfg.graph_samples);
    state.events.push(Event::GraphUpdate {
        iteration: done,
        tau_rep,
        update,
    });
    Ok(())
}

fn accept_relocation(state: &mut TrainState, obs: &Observations, cfg: &TrainConfig, node: usize, pose: Pose) {
    state.poses[node] = pose;
    state.pose_opt.reset(node);
    state.graph.nodes[node].class = NodeClass::Inlier;
    let pixels = probe_pixels(&obs.intrinsics, cfg.probe_pixels, probe_seed(cfg.seed, node));
    let (mo, mn) = probe_mse(&state.field, &pose, &obs.intrinsics, &obs.images[node], &pixels, cfg.samples_per_ray);
    state.psnr.reset(node, mo, Head::O);
    state.psnr.reset(node, mn, Head::N);
}

/// Final state summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub poses: Vec<[f64; 12]>,
    pub classes: Vec<NodeClass>,
    pub confidences: Vec<f64>,
    pub psnr_o: Vec<f64>,
    pub psnr_n: Vec<f64>,
    pub sharpness: f64,
    pub events: Vec<Event>,
}

impl TrainReport {
    pub fn from_state(state: &TrainState) -> Self {
        TrainReport {
            iterations: state.iteration,
            poses: state.poses.iter().map(|p| p.to_array()).collect(),
            classes: state.graph.classes(),
            confidences: state.graph.confidences(),
            psnr_o: state.psnr.psnr_all(Head::O),
            psnr_n: state.psnr.psnr_all(Head::N),
            sharpness: state.field.sharpness,
            events: state.events.clone(),
        }
    }
}

/// Continues `state` up to `cfg.iterations`, calling `progress` after
/// every step.
pub fn resume_training(
    state: &mut TrainState,
    obs: &Observations,
    cfg: &TrainConfig,
    loss: &LossConfig,
    reloc: &RelocConfig,
    progress: impl FnMut(&TrainState, &StepInfo),
) -> Result<()> {
    train_until(state, obs, cfg, loss, reloc, cfg.iterations, progress)
}

/// Like [`resume_training`] but stops after iteration `until`; the
/// schedules still follow `cfg.iterations`.
pub fn train_until(
    state: &mut TrainState,
    obs: &Observations,
    cfg: &TrainConfig,
    loss: &LossConfig,
    reloc: &RelocConfig,
    until: usize,
    mut progress: impl FnMut(&TrainState, &StepInfo),
) -> Result<()> {
    cfg.validate()?;
    loss.validate()?;
    reloc.validate()?;
    while state.iteration < cfg.iterations.min(until) {
        let info = train_step(state, obs, cfg, loss);
        run_events(state, obs, cfg, reloc)?;
        progress(state, &info);
    }
    Ok(())
}

pub fn run_training(
    obs: &Observations,
    cfg: &TrainConfig,
    loss: &LossConfig,
    reloc: &RelocConfig,
) -> Result<(TrainState, TrainReport)> {
    let mut state = TrainState::new(obs, cfg)?;
    resume_training(&mut state, obs, cfg, loss, reloc, |s, info| {
        if s.iteration % 500 == 0 {
            log::info!(
                "iter {} loss {:.5} (o {:.4} n {:.4} eik {:.4} iou {:.4} rep {:.3}) s {:.1} psnr_n {:.2}",
                s.iteration,
                info.total,
                info.parts.color_o,
                info.parts.color_n,
                info.parts.eikonal,
                info.parts.iou,
                info.parts.rep,
                s.field.sharpness,
                s.psnr.psnr(info.node, Head::N).unwrap_or(0.0)
            );
        }
    })?;
    let report = TrainReport::from_state(&state);
    Ok((state, report))
}

/// PSNR of an image under a pose, probed like the schedule does.
pub fn probe_psnr(state: &TrainState, obs: &Observations, cfg: &TrainConfig, node: usize) -> (f64, f64) {
    let pixels = probe_pixels(&obs.intrinsics, cfg.probe_pixels, probe_seed(cfg.seed, node));
    let (mo, mn) = probe_mse(&state.field, &state.poses[node], &obs.intrinsics, &obs.images[node], &pixels, cfg.samples_per_ray);
    (psnr_from_mse(mo), psnr_from_mse(mn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_policy_table() {
        use NodeClass::*;
        assert_eq!(pair_policy(Inlier, Inlier), PairMode::Joint);
        assert_eq!(pair_policy(Unknown, Unknown), PairMode::Joint);
        assert_eq!(pair_policy(Inlier, Outlier), PairMode::OutlierPoseOnly);
        assert_eq!(pair_policy(Outlier, Unknown), PairMode::OutlierPoseOnly);
        assert_eq!(pair_policy(Outlier, Outlier), PairMode::Skip);
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig {
            iterations: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup(), 100);
        assert_eq!(cfg.graph_update_points(), vec![250, 500, 750]);
        assert_eq!(cfg.tau_rep(0, 3), 8.0);
        assert_eq!(cfg.tau_rep(1, 3), 5.0);
        assert_eq!(cfg.tau_rep(2, 3), 2.0);
        let short = TrainConfig {
            iterations: 100,
            warmup_iters: Some(100),
            ..TrainConfig::default()
        };
        assert!(short.graph_update_points().is_empty());
    }

    #[test]
    fn step_rng_depends_on_both_inputs() {
        let a: u64 = step_rng(1, 5).gen();
        assert_eq!(a, step_rng(1, 5).gen::<u64>());
        assert_ne!(a, step_rng(1, 6).gen::<u64>());
        assert_ne!(a, step_rng(2, 5).gen::<u64>());
    }
}
