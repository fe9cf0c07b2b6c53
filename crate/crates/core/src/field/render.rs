//! Stratified NeuS-style volume rendering with a hand-written adjoint.

use super::{color_o_from_coeffs, log_sigmoid, sigmoid, Field, FieldGrad, N_COEFFS, O_COEFFS};
use crate::geometry::Vec3;
use crate::{Error, Result};

/// Which parameter blocks receive gradients from a backward pass.
///
/// `n_through_geometry` controls whether the C_n adjoint also flows through
/// the rendering weights and sample positions. It is off during joint
/// training (C_n is detached from geometry and poses) and on during
/// re-localization, where C_n's loss drives the particle poses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Route {
    pub sdf: bool,
    pub sharpness: bool,
    pub color_o: bool,
    pub color_n: bool,
    pub pose: bool,
    pub n_through_geometry: bool,
}

impl Route {
    pub fn joint() -> Self {
        Route {
            sdf: true,
            sharpness: true,
            color_o: true,
            color_n: true,
            pose: true,
            n_through_geometry: false,
        }
    }

    pub fn pose_only() -> Self {
        Route {
            pose: true,
            ..Route::default()
        }
    }

    pub fn reloc() -> Self {
        Route {
            pose: true,
            n_through_geometry: true,
            ..Route::default()
        }
    }

    fn needs_geometry(&self) -> bool {
        self.sdf || self.sharpness || self.pose
    }
}

/// Entry and exit of a ray through `[-1, 1]^3`, with the derivatives of
/// both distances w.r.t. ray origin and direction.
#[derive(Clone, Copy, Debug)]
pub struct BoxHit {
    pub t_near: f64,
    pub t_far: f64,
    pub dnear_do: Vec3,
    pub dnear_dd: Vec3,
    pub dfar_do: Vec3,
    pub dfar_dd: Vec3,
}

/// Slab intersection with the unit cube. A ray starting inside the cube
/// gets `t_near = 0`.
pub fn ray_box(origin: &Vec3, dir: &Vec3) -> Result<BoxHit> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = None;
    let mut far_axis = None;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < -1.0 || origin[a] > 1.0 {
                return Err(Error::NoIntersection);
            }
            continue;
        }
        let t1 = (-1.0 - origin[a]) / dir[a];
        let t2 = (1.0 - origin[a]) / dir[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            near_axis = Some(a);
        }
        if hi < t_far {
            t_far = hi;
            far_axis = Some(a);
        }
    }
    if t_near < 0.0 {
        t_near = 0.0;
        near_axis = None;
    }
    if !(t_far > t_near + 1e-12) {
        return Err(Error::NoIntersection);
    }
    let slab = |axis: Option<usize>, t: f64| -> (Vec3, Vec3) {
        match axis {
            Some(a) => {
                let mut go = Vec3::zeros();
                let mut gd = Vec3::zeros();
                go[a] = -1.0 / dir[a];
                gd[a] = -t / dir[a];
                (go, gd)
            }
            None => (Vec3::zeros(), Vec3::zeros()),
        }
    };
    let (dnear_do, dnear_dd) = slab(near_axis, t_near);
    let (dfar_do, dfar_dd) = slab(far_axis, t_far);
    Ok(BoxHit {
        t_near,
        t_far,
        dnear_do,
        dnear_dd,
        dfar_do,
        dfar_dd,
    })
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub t: f64,
    /// Position of the sample inside the interval, in `[0, 1)`.
    pub frac: f64,
    pub point: Vec3,
    pub sdf: f64,
    pub grad: Vec3,
    pub color_o: [f64; 3],
    pub color_n: [f64; 3],
}

/// Forward record of one rendered ray. Both heads share samples and weights.
#[derive(Clone, Debug)]
pub struct RayRender {
    pub origin: Vec3,
    pub dir: Vec3,
    pub hit: BoxHit,
    pub spacing: f64,
    pub samples: Vec<Sample>,
    /// Opacity, ratio `Phi(s f_{k+1}) / Phi(s f_k)`, transmittance and
    /// weight of each interval; one shorter than `samples`.
    pub alpha: Vec<f64>,
    pub ratio: Vec<f64>,
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
    pub color_o: [f64; 3],
    pub color_n: [f64; 3],
}

/// Upstream gradients for a rendered ray.
#[derive(Clone, Debug, Default)]
pub struct RayAdjoint {
    pub color_o: [f64; 3],
    pub color_n: [f64; 3],
    /// Scale `c` of an Eikonal term `c * sum_k (|grad f(p_k)| - 1)^2` over all samples.
    pub eikonal: f64,
    /// Gradient w.r.t. each weight (empty means zero).
    pub weights: Vec<f64>,
    /// Gradient w.r.t. each sample position (empty means zero).
    pub points: Vec<Vec3>,
    /// Gradient w.r.t. the sample spacing.
    pub spacing: f64,
}

/// Gradient w.r.t. the ray origin and unit direction.
#[derive(Clone, Copy, Debug, Default)]
pub struct RayGrad {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Renders with midpoint samples. Returns the color of the requested head,
/// the weights and the sample depths.
pub fn render_ray(
    field: &Field,
    origin: &Vec3,
    dir: &Vec3,
    k: usize,
    use_view_dir: bool,
) -> Result<([f64; 3], Vec<f64>, Vec<f64>)> {
    let jitter = vec![0.5; k];
    let r = render_ray_jittered(field, origin, dir, &jitter)?;
    let color = if use_view_dir { r.color_o } else { r.color_n };
    let depths = r.samples.iter().map(|s| s.t).collect();
    Ok((color, r.weights, depths))
}

/// Renders with one sample per stratum at offset `jitter[k]` in `[0, 1)`.
pub fn render_ray_jittered(field: &Field, origin: &Vec3, dir: &Vec3, jitter: &[f64]) -> Result<RayRender> {
    let k = jitter.len();
    if k < 8 {
        return Err(Error::Config(format!("need at least 8 samples per ray, got {k}")));
    }
    let hit = ray_box(origin, dir)?;
    let len = hit.t_far - hit.t_near;
    let spacing = len / k as f64;
    let s = field.sharpness;

    let mut samples = Vec::with_capacity(k);
    for (i, u) in jitter.iter().enumerate() {
        let frac = (i as f64 + u) / k as f64;
        let t = hit.t_near + frac * len;
        let point = origin + dir * t;
        let cell = field.locate(&point);
        let mut f = 0.0;
        let mut g = Vec3::zeros();
        for c in 0..8 {
            let v = field.sdf[cell.idx[c]];
            f += cell.w[c] * v;
            g.x += cell.dw[c][0] * v;
            g.y += cell.dw[c][1] * v;
            g.z += cell.dw[c][2] * v;
        }
        let qo = field.interp_o(&cell);
        let qn = field.interp_n(&cell);
        samples.push(Sample {
            t,
            frac,
            point,
            sdf: f,
            grad: g,
            color_o: color_o_from_coeffs(&qo, dir),
            color_n: [sigmoid(qn[0]), sigmoid(qn[1]), sigmoid(qn[2])],
        });
    }

    let m = k - 1;
    let mut alpha = Vec::with_capacity(m);
    let mut ratio = Vec::with_capacity(m);
    let mut trans = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut color_o = [0.0; 3];
    let mut color_n = [0.0; 3];
    let mut tr = 1.0;
    let mut ls_prev = log_sigmoid(s * samples[0].sdf);
    for j in 0..m {
        let ls_next = log_sigmoid(s * samples[j + 1].sdf);
        let r = (ls_next - ls_prev).exp();
        let a = if r < 1.0 { 1.0 - r } else { 0.0 };
        let w = tr * a;
        for ch in 0..3 {
            color_o[ch] += w * samples[j].color_o[ch];
            color_n[ch] += w * samples[j].color_n[ch];
        }
        alpha.push(a);
        ratio.push(r);
        trans.push(tr);
        weights.push(w);
        tr *= 1.0 - a;
        ls_prev = ls_next;
    }

    Ok(RayRender {
        origin: *origin,
        dir: *dir,
        hit,
        spacing,
        samples,
        alpha,
        ratio,
        trans,
        weights,
        color_o,
        color_n,
    })
}

impl RayRender {
    pub fn depths(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Index of the heaviest sample, nearest on ties; `None` when all
    /// weights are zero.
    pub fn max_weight_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 && best.map_or(true, |b| w > self.weights[b]) {
                best = Some(i);
            }
        }
        best
    }

    /// Accumulates parameter gradients into `grads` according to `route`
    /// and returns the gradient w.r.t. the ray origin and direction (zero
    /// unless `route.pose`).
    pub fn backward(&self, field: &Field, adj: &RayAdjoint, route: Route, grads: &mut FieldGrad) -> RayGrad {
        let k = self.samples.len();
        let m = k - 1;
        let s = field.sharpness;
        let d = self.dir;
        let n_geo = route.n_through_geometry;
        let need_geo = route.needs_geometry();

        let go_c = adj.color_o;
        let gn_c = adj.color_n;
        let any_o = go_c.iter().any(|&v| v != 0.0);
        let any_n = gn_c.iter().any(|&v| v != 0.0);

        let mut gp: Vec<Vec3> = if adj.points.is_empty() {
            vec![Vec3::zeros(); k]
        } else {
            adj.points.clone()
        };
        let mut gd = Vec3::zeros();

        // Color heads: parameter deposits plus position/direction terms.
        for j in 0..m {
            let w = self.weights[j];
            if w == 0.0 {
                continue;
            }
            let smp = &self.samples[j];
            let want_o = any_o && (route.color_o || route.pose);
            let want_n = any_n && (route.color_n || (route.pose && n_geo));
            if !want_o && !want_n {
                continue;
            }
            let cell = field.locate(&smp.point);
            if want_o {
                let mut gb = [0.0; 3];
                for ch in 0..3 {
                    let c = smp.color_o[ch];
                    gb[ch] = w * go_c[ch] * c * (1.0 - c);
                }
                let mut gq = [0.0; O_COEFFS];
                for ch in 0..3 {
                    gq[ch] = gb[ch];
                    gq[3 + 3 * ch] = gb[ch] * d.x;
                    gq[4 + 3 * ch] = gb[ch] * d.y;
                    gq[5 + 3 * ch] = gb[ch] * d.z;
                }
                if route.color_o {
                    for c in 0..8 {
                        let node = cell.idx[c];
                        grads.touch(node);
                        let wc = cell.w[c];
                        let dst = &mut grads.color_o[node * O_COEFFS..(node + 1) * O_COEFFS];
                        for (g, q) in dst.iter_mut().zip(&gq) {
                            *g += wc * q;
                        }
                    }
                }
                if route.pose {
                    let q = field.interp_o(&cell);
                    for ch in 0..3 {
                        let a = 3 + 3 * ch;
                        gd += gb[ch] * Vec3::new(q[a], q[a + 1], q[a + 2]);
                    }
                    for c in 0..8 {
                        let node = cell.idx[c];
                        let src = &field.color_o[node * O_COEFFS..(node + 1) * O_COEFFS];
                        let dot: f64 = src.iter().zip(&gq).map(|(v, g)| v * g).sum();
                        gp[j] += dot * Vec3::new(cell.dw[c][0], cell.dw[c][1], cell.dw[c][2]);
                    }
                }
            }
            if want_n {
                let mut gb = [0.0; 3];
                for ch in 0..3 {
                    let c = smp.color_n[ch];
                    gb[ch] = w * gn_c[ch] * c * (1.0 - c);
                }
                if route.color_n {
                    for c in 0..8 {
                        let node = cell.idx[c];
                        grads.touch(node);
                        let wc = cell.w[c];
                        for ch in 0..3 {
                            grads.color_n[node * N_COEFFS + ch] += wc * gb[ch];
                        }
                    }
                }
                if route.pose && n_geo {
                    for c in 0..8 {
                        let node = cell.idx[c];
                        let src = &field.color_n[node * N_COEFFS..(node + 1) * N_COEFFS];
                        let dot = src[0] * gb[0] + src[1] * gb[1] + src[2] * gb[2];
                        gp[j] += dot * Vec3::new(cell.dw[c][0], cell.dw[c][1], cell.dw[c][2]);
                    }
                }
            }
        }

        if !need_geo {
            return RayGrad::default();
        }

        // Weights -> opacities -> SDF values and sharpness.
        let mut gw = vec![0.0; m];
        for j in 0..m {
            let smp = &self.samples[j];
            let mut v = if adj.weights.is_empty() { 0.0 } else { adj.weights[j] };
            for ch in 0..3 {
                v += go_c[ch] * smp.color_o[ch];
                if n_geo {
                    v += gn_c[ch] * smp.color_n[ch];
                }
            }
            gw[j] = v;
        }
        let mut gf = vec![0.0; k];
        let mut gs = 0.0;
        let mut rest = 0.0;
        for j in (0..m).rev() {
            let ga = self.trans[j] * (gw[j] - rest);
            rest = gw[j] * self.alpha[j] + (1.0 - self.alpha[j]) * rest;
            let r = self.ratio[j];
            if r >= 1.0 || ga == 0.0 {
                continue;
            }
            let f0 = self.samples[j].sdf;
            let f1 = self.samples[j + 1].sdf;
            let q0 = sigmoid(-s * f0);
            let q1 = sigmoid(-s * f1);
            gf[j] += ga * r * s * q0;
            gf[j + 1] -= ga * r * s * q1;
            gs += ga * r * (q0 * f0 - q1 * f1);
        }
        if route.sharpness {
            grads.sharpness += gs;
        }

        for j in 0..k {
            let smp = &self.samples[j];
            let gg = if adj.eikonal != 0.0 {
                let n = smp.grad.norm();
                if n > 0.0 {
                    smp.grad * (adj.eikonal * 2.0 * (n - 1.0) / n)
                } else {
                    Vec3::zeros()
                }
            } else {
                Vec3::zeros()
            };
            if gf[j] == 0.0 && gg == Vec3::zeros() {
                continue;
            }
            let cell = field.locate(&smp.point);
            if route.sdf {
                for c in 0..8 {
                    let node = cell.idx[c];
                    grads.touch(node);
                    grads.sdf[node] +=
                        cell.w[c] * gf[j] + cell.dw[c][0] * gg.x + cell.dw[c][1] * gg.y + cell.dw[c][2] * gg.z;
                }
            }
            if route.pose {
                gp[j] += gf[j] * smp.grad;
                if gg != Vec3::zeros() {
                    let (mut hxy, mut hxz, mut hyz) = (0.0, 0.0, 0.0);
                    for c in 0..8 {
                        let v = field.sdf[cell.idx[c]];
                        let h = cell.second(c);
                        hxy += h[0] * v;
                        hxz += h[1] * v;
                        hyz += h[2] * v;
                    }
                    gp[j] += Vec3::new(hxy * gg.y + hxz * gg.z, hxy * gg.x + hyz * gg.z, hxz * gg.x + hyz * gg.y);
                }
            }
        }

        if !route.pose {
            return RayGrad::default();
        }

        // Sample positions -> ray origin, direction and interval ends.
        let mut go = Vec3::zeros();
        let mut gt_near = 0.0;
        let mut gt_far = 0.0;
        for (smp, g) in self.samples.iter().zip(&gp) {
            go += g;
            gd += smp.t * g;
            let gt = g.dot(&d);
            gt_near += gt * (1.0 - smp.frac);
            gt_far += gt * smp.frac;
        }
        let gsp = adj.spacing / k as f64;
        gt_far += gsp;
        gt_near -= gsp;
        go += gt_near * self.hit.dnear_do + gt_far * self.hit.dfar_do;
        gd += gt_near * self.hit.dnear_dd + gt_far * self.hit.dfar_dd;
        RayGrad { origin: go, dir: gd }
    }
}
