//! Optimizers: lazy Adam for the field grids, momentum SGD on pose
//! tangents, and a cosine learning-rate schedule.
//!
//! Both optimizers are lazy: parameters that received no gradient in a step
//! are left bit-identical, moments included. This is what lets frozen
//! blocks stay frozen across a step.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::field::{Field, N_COEFFS, O_COEFFS};
use crate::geometry::{Pose, Tangent};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor: f64) -> f64 {
    let p = (step as f64 / total.max(1) as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates applied to each entry so far, for bias correction.
    t: Vec<u32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
        }
    }

    fn step(&mut self, i: usize, param: &mut f64, g: f64, lr: f64) {
        self.t[i] += 1;
        self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
        self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
        let t = self.t[i] as i32;
        let mh = self.m[i] / (1.0 - BETA1.powi(t));
        let vh = self.v[i] / (1.0 - BETA2.powi(t));
        *param -= lr * mh / (vh.sqrt() + EPS);
    }
}

/// Adam over the SDF, both color grids and the sharpness. Only grid nodes
/// listed as touched in the gradient are visited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldAdam {
    sdf: Moments,
    color_o: Moments,
    color_n: Moments,
    sharpness: Moments,
}

impl FieldAdam {
    pub fn new(field: &Field) -> Self {
        FieldAdam {
            sdf: Moments::new(field.sdf.len()),
            color_o: Moments::new(field.color_o.len()),
            color_n: Moments::new(field.color_n.len()),
            sharpness: Moments::new(1),
        }
    }

    /// Applies one step. Entries whose gradient is exactly zero are
    /// skipped so that routed-away blocks keep their state.
    pub fn step(&mut self, field: &mut Field, g: &Gradients, lr: f64, lr_sharpness: f64, sharpness_range: (f64, f64)) {
        let fg = &g.field;
        for &node in fg.touched() {
            let node = node as usize;
            if fg.sdf[node] != 0.0 {
                self.sdf.step(node, &mut field.sdf[node], fg.sdf[node], lr);
            }
            for c in node * O_COEFFS..(node + 1) * O_COEFFS {
                if fg.color_o[c] != 0.0 {
                    self.color_o.step(c, &mut field.color_o[c], fg.color_o[c], lr);
                }
            }
            for c in node * N_COEFFS..(node + 1) * N_COEFFS {
                if fg.color_n[c] != 0.0 {
                    self.color_n.step(c, &mut field.color_n[c], fg.color_n[c], lr);
                }
            }
        }
        if fg.sharpness != 0.0 {
            self.sharpness.step(0, &mut field.sharpness, fg.sharpness, lr_sharpness);
            field.sharpness = field.sharpness.clamp(sharpness_range.0, sharpness_range.1);
        }
    }

    pub(crate) fn to_bytes(&self, out: &mut Vec<u8>) {
        for m in [&self.sdf, &self.color_o, &self.color_n, &self.sharpness] {
            for v in m.m.iter().chain(&m.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for t in &m.t {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
    }

    /// Inverse of `to_bytes` for a field of the same shape; returns the
    /// number of bytes consumed.
    pub(crate) fn from_bytes(field: &Field, bytes: &[u8]) -> Option<(Self, usize)> {
        let mut adam = FieldAdam::new(field);
        let mut pos = 0;
        for m in [&mut adam.sdf, &mut adam.color_o, &mut adam.color_n, &mut adam.sharpness] {
            for v in m.m.iter_mut().chain(m.v.iter_mut()) {
                *v = f64::from_le_bytes(bytes.get(pos..pos + 8)?.try_into().ok()?);
                pos += 8;
            }
            for t in m.t.iter_mut() {
                *t = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?);
                pos += 4;
            }
        }
        Some((adam, pos))
    }
}

/// Heavy-ball SGD on the pose tangents: `m <- mu m + g`, `P <- exp(-lr m) P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMomentum {
    pub momentum: f64,
    pub velocity: Vec<[f64; 6]>,
}

impl PoseMomentum {
    pub fn new(poses: usize, momentum: f64) -> Self {
        PoseMomentum {
            momentum,
            velocity: vec![[0.0; 6]; poses],
        }
    }

    /// Updates the poses flagged active in `g`; the rest are untouched.
    pub fn step(&mut self, poses: &mut [Pose], g: &Gradients, lr: f64) {
        for (i, pose) in poses.iter_mut().enumerate() {
            if !g.active_poses[i] {
                continue;
            }
            self.step_one(i, pose, &g.poses[i], lr);
        }
    }

    pub fn step_one(&mut self, i: usize, pose: &mut Pose, g: &[f64; 6], lr: f64) {
        let v = &mut self.velocity[i];
        let mut xi = [0.0; 6];
        for a in 0..6 {
            v[a] = self.momentum * v[a] + g[a];
            xi[a] = -lr * v[a];
        }
        *pose = pose.retract(&Tangent::from_array(xi));
    }

    pub fn reset(&mut self, i: usize) {
        self.velocity[i] = [0.0; 6];
    }
}
