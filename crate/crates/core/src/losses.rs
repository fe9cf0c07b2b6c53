//! Training losses and their gradients.

use serde::{Deserialize, Serialize};

use crate::field::RayRender;
use crate::geometry::{backproject, project, Intrinsics, Pose, Tangent, Vec2, Vec3};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Eikonal weight.
    pub lambda: f64,
    /// IoU weight.
    pub alpha: f64,
    /// Re-projection weight.
    pub beta: f64,
    /// Huber transition in pixels.
    pub delta: f64,
    /// Gaussian width as a multiple of the sample spacing.
    pub sigma_scale: f64,
    /// Mixture components with normalized weight below this are dropped
    /// from the IoU sums. Zero keeps every component.
    pub weight_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            alpha: 0.2,
            beta: 0.001,
            delta: 1.0,
            sigma_scale: 0.5,
            weight_floor: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda, self.alpha, self.beta, self.delta, self.sigma_scale, self.weight_floor]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.weight_floor < 0.0 {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.delta <= 0.0 || self.sigma_scale <= 0.0 {
            return Err(Error::Config("huber delta and sigma_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Individual loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub color_o: f64,
    pub color_n: f64,
    pub eikonal: f64,
    pub iou: f64,
    pub rep: f64,
}

/// `L_o + L_n + lambda * L_eik + alpha * L_iou + beta * L_rep`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    parts.color_o + parts.color_n + cfg.lambda * parts.eikonal + cfg.alpha * parts.iou + cfg.beta * parts.rep
}

/// Mean absolute difference over rays and channels.
pub fn color_loss(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(rendered.len(), target.len());
    if rendered.is_empty() {
        return 0.0;
    }
    let sum: f64 = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| (0..3).map(|c| (r[c] - t[c]).abs()).sum::<f64>())
        .sum();
    sum / (3 * rendered.len()) as f64
}

/// Gradient of one ray's contribution to [`color_loss`] over `n` rays.
pub fn color_loss_grad(rendered: &[f64; 3], target: &[f64; 3], n: usize) -> [f64; 3] {
    let s = 1.0 / (3 * n) as f64;
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    [
        s * sign(rendered[0] - target[0]),
        s * sign(rendered[1] - target[1]),
        s * sign(rendered[2] - target[2]),
    ]
}

/// `(1/k) * sum (|g| - 1)^2`.
pub fn eikonal_loss(gradients: &[Vec3]) -> f64 {
    if gradients.is_empty() {
        return 0.0;
    }
    gradients.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / gradients.len() as f64
}

/// Mixture of isotropic Gaussians along a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayMoG {
    pub means: Vec<Vec3>,
    pub sigmas: Vec<f64>,
    /// Normalized to sum to one.
    pub weights: Vec<f64>,
    /// Sum of the weights before normalization.
    pub total: f64,
}

impl RayMoG {
    pub fn new(means: Vec<Vec3>, sigmas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        assert!(means.len() == sigmas.len() && means.len() == weights.len());
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateMixture);
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(RayMoG {
            means,
            sigmas,
            weights,
            total,
        })
    }

    /// Components at the weighted samples of a render, width `sigma_scale * spacing`.
    pub fn from_render(r: &RayRender, sigma_scale: f64) -> Result<Self> {
        let m = r.weights.len();
        RayMoG::new(
            r.samples[..m].iter().map(|s| s.point).collect(),
            vec![sigma_scale * r.spacing; m],
            r.weights.clone(),
        )
    }
}

/// Gradient of a scalar w.r.t. the raw parts of a [`RayMoG`]. `weights` is
/// w.r.t. the unnormalized weights the mixture was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct MoGGrad {
    pub means: Vec<Vec3>,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MoGGrad {
    fn zeros(n: usize) -> Self {
        MoGGrad {
            means: vec![Vec3::zeros(); n],
            sigmas: vec![0.0; n],
            weights: vec![0.0; n],
        }
    }
}

/// Integral of the product of two isotropic Gaussians whose variances sum to `var`.
#[inline]
pub fn gaussian_overlap(delta: &Vec3, var: f64) -> f64 {
    (2.0 * std::f64::consts::PI * var).powf(-1.5) * (-delta.norm_squared() / (2.0 * var)).exp()
}

struct Overlap {
    value: f64,
    // d value / d mean of the first argument
    dmu: Vec3,
    // d value / d var
    dvar: f64,
}

#[inline]
fn overlap_with_grad(delta: &Vec3, var: f64) -> Overlap {
    let g = gaussian_overlap(delta, var);
    Overlap {
        value: g,
        dmu: -g / var * delta,
        dvar: g * (-1.5 / var + delta.norm_squared() / (2.0 * var * var)),
    }
}

fn active(m: &RayMoG, floor: f64) -> Vec<usize> {
    (0..m.weights.len()).filter(|&i| m.weights[i] > floor || (floor == 0.0 && m.weights[i] > 0.0)).collect()
}

fn cross_volume(a: &RayMoG, b: &RayMoG, ia: &[usize], ib: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in ia {
        for &j in ib {
            let var = a.sigmas[i] * a.sigmas[i] + b.sigmas[j] * b.sigmas[j];
            s += a.weights[i] * b.weights[j] * gaussian_overlap(&(a.means[i] - b.means[j]), var);
        }
    }
    s
}

/// `1 - I / U` with `I` the cross-correlation volume and `U = V_a + V_b - I`.
pub fn iou_loss(a: &RayMoG, b: &RayMoG) -> Result<f64> {
    iou_loss_floor(a, b, 0.0)
}

pub fn iou_loss_floor(a: &RayMoG, b: &RayMoG, floor: f64) -> Result<f64> {
    let (ia, ib) = (active(a, floor), active(b, floor));
    if ia.is_empty() || ib.is_empty() {
        return Err(Error::DegenerateMixture);
    }
    let i = cross_volume(a, b, &ia, &ib);
    let va = cross_volume(a, a, &ia, &ia);
    let vb = cross_volume(b, b, &ib, &ib);
    let u = va + vb - i;
    Ok((1.0 - i / u).clamp(0.0, 1.0))
}

/// Loss value and gradients w.r.t. both mixtures.
pub fn iou_loss_grad(a: &RayMoG, b: &RayMoG, floor: f64) -> Result<(f64, MoGGrad, MoGGrad)> {
    let (ia, ib) = (active(a, floor), active(b, floor));
    if ia.is_empty() || ib.is_empty() {
        return Err(Error::DegenerateMixture);
    }
    let i = cross_volume(a, b, &ia, &ib);
    let va = cross_volume(a, a, &ia, &ia);
    let vb = cross_volume(b, b, &ib, &ib);
    let u = va + vb - i;
    let loss = 1.0 - i / u;
    let mut ga = MoGGrad::zeros(a.weights.len());
    let mut gb = MoGGrad::zeros(b.weights.len());
    if !(0.0..=1.0).contains(&loss) {
        return Ok((loss.clamp(0.0, 1.0), ga, gb));
    }
    let g_i = -(u + i) / (u * u);
    let g_v = i / (u * u);

    // normalized-weight gradients are accumulated in `weights` first
    for &p in &ia {
        for &q in &ib {
            let var = a.sigmas[p] * a.sigmas[p] + b.sigmas[q] * b.sigmas[q];
            let o = overlap_with_grad(&(a.means[p] - b.means[q]), var);
            let ww = a.weights[p] * b.weights[q];
            ga.weights[p] += g_i * b.weights[q] * o.value;
            gb.weights[q] += g_i * a.weights[p] * o.value;
            ga.means[p] += g_i * ww * o.dmu;
            gb.means[q] -= g_i * ww * o.dmu;
            ga.sigmas[p] += g_i * ww * o.dvar * 2.0 * a.sigmas[p];
            gb.sigmas[q] += g_i * ww * o.dvar * 2.0 * b.sigmas[q];
        }
    }
    for (m, idx, g) in [(a, &ia, &mut ga), (b, &ib, &mut gb)] {
        for (n, &p) in idx.iter().enumerate() {
            for &q in &idx[n..] {
                let var = m.sigmas[p] * m.sigmas[p] + m.sigmas[q] * m.sigmas[q];
                let o = overlap_with_grad(&(m.means[p] - m.means[q]), var);
                let ww = m.weights[p] * m.weights[q];
                // off-diagonal pairs appear twice in the double sum
                let mult = if p == q { 1.0 } else { 2.0 };
                if p == q {
                    g.weights[p] += g_v * 2.0 * m.weights[p] * o.value;
                } else {
                    g.weights[p] += g_v * mult * m.weights[q] * o.value;
                    g.weights[q] += g_v * mult * m.weights[p] * o.value;
                    g.means[p] += g_v * mult * ww * o.dmu;
                    g.means[q] -= g_v * mult * ww * o.dmu;
                }
                g.sigmas[p] += g_v * mult * ww * o.dvar * 2.0 * m.sigmas[p];
                g.sigmas[q] += g_v * mult * ww * o.dvar * 2.0 * m.sigmas[q];
            }
        }
    }
    // chain through the normalization back to the raw weights
    for (m, g) in [(a, &mut ga), (b, &mut gb)] {
        let dot: f64 = m.weights.iter().zip(&g.weights).map(|(w, gw)| w * gw).sum();
        for gw in g.weights.iter_mut() {
            *gw = (*gw - dot) / m.total;
        }
    }
    Ok((loss, ga, gb))
}

/// Depth of the heaviest sample; ties go to the nearer sample.
pub fn max_weight_depth(weights: &[f64], depths: &[f64]) -> Result<f64> {
    let mut best: Option<usize> = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && best.map_or(true, |b| w > weights[b]) {
            best = Some(i);
        }
    }
    best.map(|i| depths[i]).ok_or(Error::AllZeroWeights)
}

#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

#[inline]
pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r <= delta {
        r
    } else {
        delta
    }
}

/// Huber loss of the pixel distance between `kp_j` and `kp_i` lifted at
/// depth `d_i` from camera `i` and projected into camera `j`.
pub fn reprojection_loss(
    kp_i: &Vec2,
    d_i: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
    kp_j: &Vec2,
    delta: f64,
) -> Result<f64> {
    let x = backproject(pose_i, k, kp_i, d_i)?;
    let px = project(pose_j, k, &x)?;
    Ok(huber((px - kp_j).norm(), delta))
}

/// Loss at a world point projected into camera `j`, with gradients w.r.t.
/// the point and a left tangent perturbation of `pose_j`.
pub fn reprojection_point_grad(
    x: &Vec3,
    pose_j: &Pose,
    k: &Intrinsics,
    kp_j: &Vec2,
    delta: f64,
) -> Result<(f64, Vec3, Tangent)> {
    let xc = pose_j.to_camera(x);
    let px = project(pose_j, k, x)?;
    let e = px - kp_j;
    let r = e.norm();
    let loss = huber(r, delta);
    if r == 0.0 {
        return Ok((loss, Vec3::zeros(), Tangent::zero()));
    }
    let gu = e * (huber_derivative(r, delta) / r);
    let z = xc.z;
    let gxc = Vec3::new(
        k.fx * gu.x / z,
        k.fy * gu.y / z,
        -(k.fx * gu.x * xc.x + k.fy * gu.y * xc.y) / (z * z),
    );
    let gx = pose_j.rotation.matrix() * gxc;
    Ok((loss, gx, Tangent::new(gx.cross(x), -gx)))
}
