//! Rigid and similarity transforms, the pinhole camera, and trajectory I/O.
//!
//! Poses are stored camera-to-world: a camera-frame point `x_c` maps to
//! `R * x_c + t`, so `t` is the camera center. Camera frames follow the
//! usual computer-vision convention (+z forward, +y down in the image).
//!
//! Tangent vectors are ordered `(omega, v)` and act by left
//! multiplication: `exp(xi) * P`.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, SVD};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle exp/log switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric cross-product matrix of `w`.
#[inline]
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

#[inline]
fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// An element of SO(3) stored as an orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps a matrix the caller guarantees to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Re-orthonormalizes an approximately orthonormal matrix (Gram-Schmidt on columns).
    pub fn from_matrix_normalized(m: Mat3) -> Self {
        let c0 = m.column(0).normalize();
        let c1 = (m.column(1) - c0 * c0.dot(&m.column(1))).normalize();
        let c2 = c0.cross(&c1);
        Rotation(Mat3::from_columns(&[c0, c1, c2]))
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn from_quaternion(qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Quaternion coefficients in scalar-last order `(qx, qy, qz, qw)`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    #[inline]
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Geodesic angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let s = vee(&self.0).norm();
        let c = (self.0.trace() - 1.0) * 0.5;
        s.atan2(c)
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.0 * x
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Rodrigues exponential on SO(3).
pub fn so3_exp(w: &Vec3) -> Rotation {
    let theta = w.norm();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Rotation(Mat3::identity() + k * a + k * k * b)
}

/// SO(3) logarithm. Fails within `1e-6` of a half turn.
pub fn so3_log(r: &Rotation) -> Result<Vec3> {
    let theta = r.angle();
    if theta >= std::f64::consts::PI - 1e-6 {
        return Err(Error::AngleNearPi { angle: theta });
    }
    let v = vee(&r.0);
    let scale = if theta < SMALL_ANGLE {
        1.0 + theta * theta / 6.0
    } else {
        theta / theta.sin()
    };
    Ok(v * scale)
}

/// A 6-vector of the SE(3) Lie algebra: rotation `omega` (radians), translation `v`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Tangent {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Tangent {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Tangent { omega, v }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Tangent {
            omega: Vec3::new(a[0], a[1], a[2]),
            v: Vec3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z]
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        Pose {
            rotation: Rotation(Mat3::from_columns(&[x, y, z])),
            translation: *eye,
        }
    }

    #[inline]
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Pose {
            rotation: rt,
            translation: -(rt.apply(&self.translation)),
        }
    }

    /// Camera-to-world point transform.
    #[inline]
    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation.apply(x) + self.translation
    }

    /// World-to-camera point transform.
    #[inline]
    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.matrix().tr_mul(&(x - self.translation))
    }

    /// `exp(xi) * self` with re-orthonormalization of the rotation.
    pub fn retract(&self, xi: &Tangent) -> Self {
        let p = se3_exp(xi) * *self;
        Pose {
            rotation: Rotation::from_matrix_normalized(p.rotation.0),
            translation: p.translation,
        }
    }

    /// Row-major `[R | t]`, twelve numbers.
    pub fn to_array(&self) -> [f64; 12] {
        let m = self.rotation.matrix();
        let t = self.translation;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)], t.x,
            m[(1, 0)], m[(1, 1)], m[(1, 2)], t.y,
            m[(2, 0)], m[(2, 1)], m[(2, 2)], t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        Pose {
            rotation: Rotation(Mat3::new(a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10])),
            translation: Vec3::new(a[3], a[7], a[11]),
        }
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.apply(&rhs.translation) + self.translation,
        }
    }
}

/// Exact SE(3) exponential. Requires `|omega| < pi`.
pub fn se3_exp(xi: &Tangent) -> Pose {
    let theta = xi.omega.norm();
    let k = hat(&xi.omega);
    let k2 = k * k;
    let (a, b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let r = Mat3::identity() + k * a + k2 * b;
    let v = Mat3::identity() + k * b + k2 * c;
    Pose {
        rotation: Rotation(r),
        translation: v * xi.v,
    }
}

/// SE(3) logarithm. Fails with `AngleNearPi` when the rotation is within `1e-6` of a half turn.
pub fn se3_log(p: &Pose) -> Result<Tangent> {
    let omega = so3_log(&p.rotation)?;
    let theta = omega.norm();
    let k = hat(&omega);
    // V^{-1} = I - K/2 + coef K^2
    let coef = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let v_inv = Mat3::identity() - k * 0.5 + k * k * coef;
    Ok(Tangent {
        omega,
        v: v_inv * p.translation,
    })
}

/// Angle in degrees of the relative rotation `R_i^T R_j`, in `[0, 180]`.
pub fn relative_rotation_deg(p_i: &Pose, p_j: &Pose) -> f64 {
    (p_i.rotation.inverse() * p_j.rotation).angle().to_degrees()
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config("principal point must lie inside the image".into()));
        }
        Ok(())
    }

    /// Unnormalized camera-frame direction `((u-cx)/fx, (v-cy)/fy, 1)`.
    #[inline]
    pub fn unproject(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }
}

/// Projects a world point into the image of `pose`.
pub fn project(pose: &Pose, k: &Intrinsics, x: &Vec3) -> Result<Vec2> {
    let xc = pose.to_camera(x);
    if xc.z <= 1e-8 {
        return Err(Error::BehindCamera { depth: xc.z });
    }
    Ok(Vec2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy))
}

/// Lifts a pixel to the world point at camera-frame depth `depth` (z, not ray length).
pub fn backproject(pose: &Pose, k: &Intrinsics, pixel: &Vec2, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(pose.transform(&(k.unproject(pixel) * depth)))
}

/// World-space ray through a pixel: `(origin, unit direction, |unprojected direction|)`.
///
/// The third value converts a distance along the unit ray into camera depth
/// (`z = t / norm`).
#[inline]
pub fn pixel_ray(pose: &Pose, k: &Intrinsics, pixel: &Vec2) -> (Vec3, Vec3, f64) {
    let dc = k.unproject(pixel);
    let n = dc.norm();
    (pose.translation, pose.rotation.apply(&(dc / n)), n)
}

/// Similarity transform `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation.apply(x) * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        let s = 1.0 / self.scale;
        Sim3 {
            scale: s,
            rotation: rt,
            translation: -(rt.apply(&self.translation) * s),
        }
    }

    /// Maps a camera-to-world pose into the similarity-transformed world frame.
    pub fn apply_pose(&self, p: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * p.rotation,
            translation: self.apply(&p.translation),
        }
    }
}

/// Least-squares similarity aligning `src` onto `dst` (Umeyama 1991).
pub fn umeyama_sim3(src: &[Vec3], dst: &[Vec3]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::DegenerateConfiguration(format!(
            "point count mismatch ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!("{} point pairs, need at least 3", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;

    let mut cov = Mat3::zeros();
    let mut scatter = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        cov += dc * sc.transpose();
        scatter += sc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let sv = scatter.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateConfiguration("source points are collinear".into()));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut sign = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let mut r = u * sign * v_t;
    // Newton steps on the optimality condition skew(R^T cov) = 0; the SVD alone
    // leaves ~1e-9 rad for near-planar point sets
    for _ in 0..2 {
        let m = r.transpose() * cov;
        let sym = (m + m.transpose()) * 0.5;
        let lhs = Mat3::identity() * sym.trace() - sym;
        match lhs.try_inverse() {
            Some(inv) => r *= so3_exp(&(inv * vee(&(m - m.transpose())))).0,
            None => break,
        }
    }
    let d = svd.singular_values;
    let trace_ds = d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)];
    let scale = trace_ds / var_s;
    let rotation = Rotation::from_matrix_unchecked(r);
    let translation = mu_d - rotation.apply(&mu_s) * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.to_quaternion();
        let t = self.translation;
        write!(f, "{} {} {} {} {} {} {}", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
    }
}

/// Writes `id tx ty tz qx qy qz qw`, one pose per line.
pub fn write_trajectory<W: Write>(mut w: W, poses: &[Pose]) -> std::io::Result<()> {
    for (i, p) in poses.iter().enumerate() {
        writeln!(w, "{i} {p}")?;
    }
    Ok(())
}

/// Reads the trajectory format written by [`write_trajectory`]. Blank lines and
/// `#` comments are skipped; ids must be `0..n` in order.
pub fn read_trajectory<R: BufRead>(r: R, path: &str) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 8 {
            return Err(Error::parse(path, ln + 1, format!("expected 8 fields, found {}", vals.len())));
        }
        let id: usize = vals[0]
            .parse()
            .map_err(|_| Error::parse(path, ln + 1, "bad pose id"))?;
        if id != out.len() {
            return Err(Error::parse(path, ln + 1, format!("expected id {}, found {id}", out.len())));
        }
        let mut nums = [0.0; 7];
        for (slot, s) in nums.iter_mut().zip(&vals[1..]) {
            *slot = s
                .parse()
                .map_err(|_| Error::parse(path, ln + 1, format!("bad number '{s}'")))?;
        }
        out.push(Pose {
            rotation: Rotation::from_quaternion(nums[3], nums[4], nums[5], nums[6]),
            translation: Vec3::new(nums[0], nums[1], nums[2]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_tangent(rng: &mut ChaCha8Rng, max_angle: f64) -> Tangent {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let omega = axis * rng.gen_range(0.0..max_angle);
        let v = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        Tangent::new(omega, v)
    }

    // 4x4 twist matrix exponential by truncated power series.
    fn series_exp(xi: &Tangent) -> Matrix4<f64> {
        let mut a = Matrix4::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&xi.omega));
        a.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.v);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * a / k as f64;
            sum += term;
        }
        sum
    }

    fn max_diff(p: &Pose, q: &Pose) -> f64 {
        let a = p.to_array();
        let b = q.to_array();
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Tangent::zero()), Pose::identity());
    }

    #[test]
    fn exp_quarter_turn_about_x_matches_rodrigues() {
        let p = se3_exp(&Tangent::new(Vec3::new(PI / 2.0, 0.0, 0.0), Vec3::zeros()));
        // Rodrigues with k = x, theta = 90 deg: R = [[1,0,0],[0,0,-1],[0,1,0]].
        let expect = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((p.rotation.matrix() - expect).abs().max() < 1e-15);
        assert_eq!(p.translation, Vec3::zeros());
    }

    #[test]
    fn exp_matches_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let xi = random_tangent(&mut rng, 3.0);
            let p = se3_exp(&xi);
            let m = series_exp(&xi);
            for r in 0..3 {
                for c in 0..3 {
                    assert!((p.rotation.matrix()[(r, c)] - m[(r, c)]).abs() < 1e-9);
                }
                assert!((p.translation[r] - m[(r, 3)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let xi = random_tangent(&mut rng, 3.0);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            assert!((back.omega - xi.omega).norm() < 1e-9, "{xi:?} {back:?}");
            assert!((back.v - xi.v).norm() < 1e-9);
            let p = se3_exp(&xi);
            assert!(max_diff(&se3_exp(&back), &p) < 1e-9);
        }
    }

    #[test]
    fn exp_small_angle_branch_is_continuous() {
        let xi_small = Tangent::new(Vec3::new(5e-9, -3e-9, 1e-9), Vec3::new(0.3, -0.2, 1.0));
        let xi_big = Tangent::new(xi_small.omega * 2.5, xi_small.v);
        let a = se3_exp(&xi_small);
        let b = se3_exp(&xi_big);
        assert!(max_diff(&a, &b) < 1e-7);
        let back = se3_log(&a).unwrap();
        assert!((back.omega - xi_small.omega).norm() < 1e-15);
    }

    #[test]
    fn log_identity_is_zero() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Tangent::zero());
    }

    #[test]
    fn log_near_half_turn_fails() {
        let p = Pose::new(Rotation::from_axis_angle(&Vec3::new(0.0, 1.0, 1.0), PI - 1e-8), Vec3::zeros());
        assert!(matches!(se3_log(&p), Err(Error::AngleNearPi { .. })));
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = se3_exp(&random_tangent(&mut rng, 3.0));
            assert!(max_diff(&(p * p.inverse()), &Pose::identity()) < 1e-9);
            assert!(max_diff(&(p.inverse() * p), &Pose::identity()) < 1e-9);
        }
    }

    #[test]
    fn rotation_stays_orthonormal_after_retraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Pose::identity();
        for _ in 0..2000 {
            p = p.retract(&random_tangent(&mut rng, 0.3));
        }
        let m = p.rotation.matrix();
        assert!((m * m.transpose() - Mat3::identity()).abs().max() < 1e-9);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn project_principal_point() {
        let px = project(&Pose::identity(), &k100(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vec2::new(50.0, 50.0));
    }

    #[test]
    fn project_behind_camera() {
        let r = project(&Pose::identity(), &k100(), &Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(r, Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn backproject_principal_point_lies_on_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = se3_exp(&random_tangent(&mut rng, 2.0));
        let x = backproject(&pose, &k100(), &Vec2::new(50.0, 50.0), 2.5).unwrap();
        let axis = pose.rotation.apply(&Vec3::z());
        assert!((x - (pose.center() + axis * 2.5)).norm() < 1e-12);
        assert!(matches!(
            backproject(&pose, &k100(), &Vec2::new(1.0, 1.0), 0.0),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = k100();
        for _ in 0..100 {
            let pose = se3_exp(&random_tangent(&mut rng, 3.0));
            let px = Vec2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
            let depth = rng.gen_range(0.1..10.0);
            let x = backproject(&pose, &k, &px, depth).unwrap();
            let back = project(&pose, &k, &x).unwrap();
            assert!((back - px).norm() < 1e-9);
        }
    }

    #[test]
    fn relative_rotation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = se3_exp(&random_tangent(&mut rng, 3.0));
        assert!(relative_rotation_deg(&p, &p) < 1e-6);
        let q = Pose::new(p.rotation * Rotation::from_axis_angle(&Vec3::x(), 45f64.to_radians()), p.translation);
        assert_relative_eq!(relative_rotation_deg(&p, &q), 45.0, epsilon = 1e-9);
        assert_relative_eq!(relative_rotation_deg(&q, &p), 45.0, epsilon = 1e-9);
        let g = Rotation::from_axis_angle(&Vec3::new(0.2, 1.0, -0.4), 1.1);
        let pg = Pose::new(g * p.rotation, p.translation);
        let qg = Pose::new(g * q.rotation, q.translation);
        assert_relative_eq!(relative_rotation_deg(&pg, &qg), 45.0, epsilon = 1e-9);
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn umeyama_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pts = random_points(&mut rng, 10);
        let s = umeyama_sim3(&pts, &pts).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!((s.rotation.matrix() - Mat3::identity()).abs().max() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn umeyama_recovers_planted_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let planted = Sim3 {
                scale: rng.gen_range(0.2..5.0),
                rotation: se3_exp(&random_tangent(&mut rng, 3.0)).rotation,
                translation: Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            };
            let src = random_points(&mut rng, 12);
            let dst: Vec<Vec3> = src.iter().map(|x| planted.apply(x)).collect();
            let est = umeyama_sim3(&src, &dst).unwrap();
            assert!((est.scale - planted.scale).abs() < 1e-9);
            assert!((est.rotation.matrix() - planted.rotation.matrix()).abs().max() < 1e-9);
            assert!((est.translation - planted.translation).norm() < 1e-9);
            let inv = planted.inverse();
            for x in &src {
                assert!((inv.apply(&planted.apply(x)) - x).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn umeyama_degenerate_inputs() {
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(umeyama_sim3(&two, &two), Err(Error::DegenerateConfiguration(_))));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(umeyama_sim3(&line, &line), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn trajectory_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let poses: Vec<Pose> = (0..20).map(|_| se3_exp(&random_tangent(&mut rng, 3.0))).collect();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &poses).unwrap();
        let back = read_trajectory(std::io::Cursor::new(buf), "mem").unwrap();
        assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(&back) {
            assert!(max_diff(a, b) < 1e-9);
        }
    }

    #[test]
    fn trajectory_parse_error_reports_line() {
        let text = "0 0 0 0 0 0 0 1\n1 0 0 zero 0 0 0 1\n";
        match read_trajectory(std::io::Cursor::new(text), "traj.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn look_at_points_the_optical_axis_at_target() {
        let eye = Vec3::new(2.0, 1.0, 0.5);
        let p = Pose::look_at(&eye, &Vec3::zeros(), &Vec3::z());
        let px = project(&p, &k100(), &Vec3::zeros()).unwrap();
        assert!((px - Vec2::new(50.0, 50.0)).norm() < 1e-12);
        // world up projects above the principal point (smaller v)
        let up = project(&p, &k100(), &Vec3::new(0.0, 0.0, 0.1)).unwrap();
        assert!(up.y < 50.0);
    }
}
