//! Trainable SDF grid with two color heads.
//!
//! All three grids share one lattice of `res^3` nodes spanning `[-1, 1]^3`.
//! The view-dependent head stores, per node, three base logits followed by
//! a 3x3 block of directional coefficients (one row per channel); its color
//! is `sigmoid(base + A * d)`. The view-independent head stores three logits.

mod mesh;
mod psnr;
mod render;

pub use mesh::{extract_mesh, extract_mesh_fn, read_ply, write_ply, Mesh};
pub use psnr::{psnr_from_mse, Head, PsnrTracker};
pub use render::{
    ray_box, render_ray, render_ray_jittered, BoxHit, RayAdjoint, RayGrad, RayRender, Route, Sample,
};

use crate::geometry::Vec3;

/// Coefficients per node for the view-dependent head.
pub const O_COEFFS: usize = 12;
/// Coefficients per node for the view-independent head.
pub const N_COEFFS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    res: usize,
    pub sdf: Vec<f64>,
    pub color_o: Vec<f64>,
    pub color_n: Vec<f64>,
    pub sharpness: f64,
}

/// Trilinear stencil of one query point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// Spatial gradient of each corner weight.
    pub dw: [[f64; 3]; 8],
    // per-axis linear factors and their slopes, for second derivatives
    l: [[f64; 2]; 3],
    inv_h: f64,
}

impl Cell {
    /// Mixed second derivatives of corner weight `c`: (xy, xz, yz).
    #[inline]
    pub fn second(&self, c: usize) -> [f64; 3] {
        let bx = c & 1;
        let by = (c >> 1) & 1;
        let bz = (c >> 2) & 1;
        let sx = if bx == 1 { 1.0 } else { -1.0 };
        let sy = if by == 1 { 1.0 } else { -1.0 };
        let sz = if bz == 1 { 1.0 } else { -1.0 };
        let h2 = self.inv_h * self.inv_h;
        [
            sx * sy * self.l[2][bz] * h2,
            sx * self.l[1][by] * sz * h2,
            self.l[0][bx] * sy * sz * h2,
        ]
    }
}

impl Field {
    /// A field of `res^3` nodes with zero SDF, mid-gray colors and sharpness 30.
    pub fn new(res: usize) -> Self {
        assert!(res >= 2, "grid resolution must be at least 2");
        let n = res * res * res;
        Field {
            res,
            sdf: vec![0.0; n],
            color_o: vec![0.0; n * O_COEFFS],
            color_n: vec![0.0; n * N_COEFFS],
            sharpness: 30.0,
        }
    }

    /// Fills the SDF grid by sampling `f` at every node.
    pub fn from_sdf(res: usize, f: impl Fn(&Vec3) -> f64) -> Self {
        let mut field = Field::new(res);
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let idx = field.index(i, j, k);
                    field.sdf[idx] = f(&field.node_position(i, j, k));
                }
            }
        }
        field
    }

    /// Sphere of `radius` centered at the origin.
    pub fn sphere(res: usize, radius: f64) -> Self {
        Field::from_sdf(res, |x| x.norm() - radius)
    }

    /// Sets both color heads from an albedo function: base logits are the
    /// logit of the albedo, directional coefficients are zero.
    pub fn paint(&mut self, albedo: impl Fn(&Vec3) -> [f64; 3]) {
        let res = self.res;
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let idx = self.index(i, j, k);
                    let c = albedo(&self.node_position(i, j, k));
                    for ch in 0..3 {
                        let v = c[ch].clamp(1e-4, 1.0 - 1e-4);
                        let logit = (v / (1.0 - v)).ln();
                        self.color_o[idx * O_COEFFS + ch] = logit;
                        for q in 3..O_COEFFS {
                            self.color_o[idx * O_COEFFS + q] = 0.0;
                        }
                        self.color_n[idx * N_COEFFS + ch] = logit;
                    }
                }
            }
        }
    }

    #[inline]
    pub fn res(&self) -> usize {
        self.res
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.res * self.res * self.res
    }

    /// Lattice spacing in scene units.
    #[inline]
    pub fn cell_size(&self) -> f64 {
        2.0 / (self.res - 1) as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.res + j) * self.res + i
    }

    #[inline]
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.cell_size();
        Vec3::new(-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h)
    }

    pub(crate) fn locate(&self, p: &Vec3) -> Cell {
        let res = self.res;
        let inv_h = (res - 1) as f64 * 0.5;
        let mut base = [0usize; 3];
        let mut l = [[0.0; 2]; 3];
        let top = (res - 1) as f64;
        for a in 0..3 {
            let u = ((p[a] + 1.0) * inv_h).clamp(0.0, top);
            let i = (u.floor() as usize).min(res - 2);
            let f = u - i as f64;
            base[a] = i;
            l[a] = [1.0 - f, f];
        }
        let b = (base[2] * res + base[1]) * res + base[0];
        let sx = 1;
        let sy = res;
        let sz = res * res;
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        let mut dw = [[0.0; 3]; 8];
        for c in 0..8 {
            let bx = c & 1;
            let by = (c >> 1) & 1;
            let bz = (c >> 2) & 1;
            idx[c] = b + bx * sx + by * sy + bz * sz;
            let (lx, ly, lz) = (l[0][bx], l[1][by], l[2][bz]);
            let dx = if bx == 1 { inv_h } else { -inv_h };
            let dy = if by == 1 { inv_h } else { -inv_h };
            let dz = if bz == 1 { inv_h } else { -inv_h };
            w[c] = lx * ly * lz;
            dw[c] = [dx * ly * lz, lx * dy * lz, lx * ly * dz];
        }
        Cell {
            idx,
            w,
            dw,
            l,
            inv_h,
        }
    }

    /// Trilinear SDF value and the analytic gradient of the interpolant.
    /// Points outside the cube are clamped to its boundary.
    pub fn sdf_query(&self, x: &Vec3) -> (f64, Vec3) {
        let cell = self.locate(x);
        let mut f = 0.0;
        let mut g = Vec3::zeros();
        for c in 0..8 {
            let v = self.sdf[cell.idx[c]];
            f += cell.w[c] * v;
            g.x += cell.dw[c][0] * v;
            g.y += cell.dw[c][1] * v;
            g.z += cell.dw[c][2] * v;
        }
        (f, g)
    }

    /// View-dependent color at `x` seen along unit direction `d`.
    pub fn color_o_query(&self, x: &Vec3, d: &Vec3) -> [f64; 3] {
        let cell = self.locate(x);
        let q = self.interp_o(&cell);
        color_o_from_coeffs(&q, d)
    }

    /// View-independent color at `x`.
    pub fn color_n_query(&self, x: &Vec3) -> [f64; 3] {
        let cell = self.locate(x);
        let q = self.interp_n(&cell);
        [sigmoid(q[0]), sigmoid(q[1]), sigmoid(q[2])]
    }

    #[inline]
    pub(crate) fn interp_o(&self, cell: &Cell) -> [f64; O_COEFFS] {
        let mut q = [0.0; O_COEFFS];
        for c in 0..8 {
            let w = cell.w[c];
            let src = &self.color_o[cell.idx[c] * O_COEFFS..(cell.idx[c] + 1) * O_COEFFS];
            for (acc, v) in q.iter_mut().zip(src) {
                *acc += w * v;
            }
        }
        q
    }

    #[inline]
    pub(crate) fn interp_n(&self, cell: &Cell) -> [f64; N_COEFFS] {
        let mut q = [0.0; N_COEFFS];
        for c in 0..8 {
            let w = cell.w[c];
            let base = cell.idx[c] * N_COEFFS;
            for (a, acc) in q.iter_mut().enumerate() {
                *acc += w * self.color_n[base + a];
            }
        }
        q
    }
}

#[inline]
pub(crate) fn color_o_from_coeffs(q: &[f64; O_COEFFS], d: &Vec3) -> [f64; 3] {
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let a = 3 + 3 * ch;
        out[ch] = sigmoid(q[ch] + q[a] * d.x + q[a + 1] * d.y + q[a + 2] * d.z);
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Gradient buffers with the same shapes as a [`Field`].
///
/// Nodes that received any contribution are listed in `touched` so sparse
/// optimizers and resets only visit those.
#[derive(Clone, Debug)]
pub struct FieldGrad {
    pub sdf: Vec<f64>,
    pub color_o: Vec<f64>,
    pub color_n: Vec<f64>,
    pub sharpness: f64,
    mark: Vec<bool>,
    touched: Vec<u32>,
}

impl FieldGrad {
    pub fn zeros_like(field: &Field) -> Self {
        let n = field.node_count();
        FieldGrad {
            sdf: vec![0.0; n],
            color_o: vec![0.0; n * O_COEFFS],
            color_n: vec![0.0; n * N_COEFFS],
            sharpness: 0.0,
            mark: vec![false; n],
            touched: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn touch(&mut self, node: usize) {
        if !self.mark[node] {
            self.mark[node] = true;
            self.touched.push(node as u32);
        }
    }

    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    /// Zeroes every touched entry.
    pub fn clear(&mut self) {
        for &n in &self.touched {
            let n = n as usize;
            self.mark[n] = false;
            self.sdf[n] = 0.0;
            self.color_o[n * O_COEFFS..(n + 1) * O_COEFFS].fill(0.0);
            self.color_n[n * N_COEFFS..(n + 1) * N_COEFFS].fill(0.0);
        }
        self.touched.clear();
        self.sharpness = 0.0;
    }

    /// True when every entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.sharpness == 0.0
            && self.sdf.iter().all(|&v| v == 0.0)
            && self.color_o.iter().all(|&v| v == 0.0)
            && self.color_n.iter().all(|&v| v == 0.0)
    }

    pub fn geometry_is_zero(&self) -> bool {
        self.sharpness == 0.0 && self.sdf.iter().all(|&v| v == 0.0)
    }
}
