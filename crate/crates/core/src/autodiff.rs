//! Parameter blocks, gradient buffers and finite-difference probes.
//!
//! Gradients are hand-derived adjoints. Pose gradients are taken w.r.t. a
//! left tangent perturbation `exp(xi) * P`, matching [`Pose::retract`].

use std::fmt;

use crate::field::{Field, FieldGrad, RayGrad, N_COEFFS, O_COEFFS};
use crate::geometry::{Pose, Tangent, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Sdf,
    ColorO,
    ColorN,
    Sharpness,
    Pose,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::Sdf, Block::ColorO, Block::ColorN, Block::Sharpness, Block::Pose];
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Sdf => "sdf_grid",
            Block::ColorO => "color_o",
            Block::ColorN => "color_n",
            Block::Sharpness => "sharpness",
            Block::Pose => "pose_tangents",
        })
    }
}

/// Everything that is optimized: the field and one pose per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub field: Field,
    pub poses: Vec<Pose>,
}

impl ParamSet {
    pub fn len(&self, block: Block) -> usize {
        match block {
            Block::Sdf => self.field.sdf.len(),
            Block::ColorO => self.field.color_o.len(),
            Block::ColorN => self.field.color_n.len(),
            Block::Sharpness => 1,
            Block::Pose => 6 * self.poses.len(),
        }
    }

    /// Copy with one coordinate moved by `h`. Pose coordinates move along
    /// the left tangent, everything else additively.
    pub fn perturbed(&self, block: Block, coord: usize, h: f64) -> ParamSet {
        let mut p = self.clone();
        match block {
            Block::Sdf => p.field.sdf[coord] += h,
            Block::ColorO => p.field.color_o[coord] += h,
            Block::ColorN => p.field.color_n[coord] += h,
            Block::Sharpness => p.field.sharpness += h,
            Block::Pose => {
                let mut t = [0.0; 6];
                t[coord % 6] = h;
                let i = coord / 6;
                p.poses[i] = p.poses[i].retract(&Tangent::from_array(t));
            }
        }
        p
    }
}

/// Gradient buffers with the shapes of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub field: FieldGrad,
    pub poses: Vec<[f64; 6]>,
    /// Poses that took part in the evaluation with gradients enabled,
    /// whether or not their gradient ended up nonzero.
    pub active_poses: Vec<bool>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients::new(&params.field, params.poses.len())
    }

    pub fn new(field: &Field, poses: usize) -> Self {
        Gradients {
            field: FieldGrad::zeros_like(field),
            poses: vec![[0.0; 6]; poses],
            active_poses: vec![false; poses],
        }
    }

    /// Zeroes every buffer; called at the start of each step.
    pub fn clear(&mut self) {
        self.field.clear();
        for p in &mut self.poses {
            *p = [0.0; 6];
        }
        self.active_poses.fill(false);
    }

    pub fn add_pose(&mut self, i: usize, t: &Tangent) {
        let a = t.to_array();
        for (g, v) in self.poses[i].iter_mut().zip(a) {
            *g += v;
        }
        self.active_poses[i] = true;
    }

    pub fn get(&self, block: Block, coord: usize) -> f64 {
        match block {
            Block::Sdf => self.field.sdf[coord],
            Block::ColorO => self.field.color_o[coord],
            Block::ColorN => self.field.color_n[coord],
            Block::Sharpness => self.field.sharpness,
            Block::Pose => self.poses[coord / 6][coord % 6],
        }
    }

    /// True when every entry of `block` is exactly zero.
    pub fn block_is_zero(&self, block: Block) -> bool {
        match block {
            Block::Sdf => self.field.sdf.iter().all(|&v| v == 0.0),
            Block::ColorO => self.field.color_o.iter().all(|&v| v == 0.0),
            Block::ColorN => self.field.color_n.iter().all(|&v| v == 0.0),
            Block::Sharpness => self.field.sharpness == 0.0,
            Block::Pose => self.poses.iter().all(|p| p.iter().all(|&v| v == 0.0)),
        }
    }

    /// Coordinates of `block` with a nonzero gradient (nodes for grids).
    pub fn nonzero_coords(&self, block: Block) -> Vec<usize> {
        let dense: Vec<f64> = match block {
            Block::Sdf => self.field.sdf.clone(),
            Block::ColorO => self.field.color_o.clone(),
            Block::ColorN => self.field.color_n.clone(),
            Block::Sharpness => vec![self.field.sharpness],
            Block::Pose => self.poses.iter().flatten().copied().collect(),
        };
        dense.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
    }
}

/// Chain rule from a ray gradient to the left tangent of the camera pose.
/// The ray is `o = t`, `d = R d_c / |d_c|`, so `delta o = omega x t + v`
/// and `delta d = omega x d`.
pub fn ray_to_pose(pose: &Pose, dir: &Vec3, g: &RayGrad) -> Tangent {
    let t = pose.translation;
    Tangent::new(t.cross(&g.origin) + dir.cross(&g.dir), g.origin)
}

/// Central difference of `f` along one coordinate of one block.
pub fn central_difference(params: &ParamSet, block: Block, coord: usize, h: f64, f: impl Fn(&ParamSet) -> f64) -> f64 {
    let plus = f(&params.perturbed(block, coord, h));
    let minus = f(&params.perturbed(block, coord, -h));
    (plus - minus) / (2.0 * h)
}

/// `|analytic - fd| <= max(abs_floor, rel * max(|analytic|, |fd|))`.
pub fn grad_close(analytic: f64, fd: f64, rel: f64, abs_floor: f64) -> bool {
    (analytic - fd).abs() <= abs_floor.max(rel * analytic.abs().max(fd.abs()))
}

/// Number of scalar coordinates per grid node of a block.
pub fn coords_per_node(block: Block) -> usize {
    match block {
        Block::ColorO => O_COEFFS,
        Block::ColorN => N_COEFFS,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{render_ray_jittered, RayAdjoint, Route};
    use crate::geometry::{pixel_ray, Intrinsics, Vec2};

    #[test]
    fn ray_gradient_maps_to_pose_tangent() {
        let mut field = Field::sphere(12, 0.5);
        field.paint(|x| [0.5 + 0.4 * x.x, 0.5 - 0.3 * x.y, 0.5 + 0.2 * x.z]);
        field.sharpness = 15.0;
        let k = Intrinsics::new(60.0, 60.0, 16.0, 16.0, 32, 32).unwrap();
        let pose = Pose::look_at(&Vec3::new(2.4, 0.4, 0.6), &Vec3::zeros(), &Vec3::z());
        let px = Vec2::new(13.3, 18.9);
        let jit: Vec<f64> = (0..32).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let adj = RayAdjoint {
            color_o: [1.0, -0.5, 0.25],
            ..RayAdjoint::default()
        };
        let loss = |p: &ParamSet| {
            let (o, d, _) = pixel_ray(&p.poses[0], &k, &px);
            let r = render_ray_jittered(&p.field, &o, &d, &jit).unwrap();
            r.color_o[0] - 0.5 * r.color_o[1] + 0.25 * r.color_o[2]
        };
        let params = ParamSet {
            field: field.clone(),
            poses: vec![pose],
        };
        let (o, d, _) = pixel_ray(&pose, &k, &px);
        let r = render_ray_jittered(&field, &o, &d, &jit).unwrap();
        let mut g = FieldGrad::zeros_like(&field);
        let rg = r.backward(&field, &adj, Route::pose_only(), &mut g);
        assert!(g.is_zero());
        let t = ray_to_pose(&pose, &d, &rg).to_array();
        for a in 0..6 {
            let fd = central_difference(&params, Block::Pose, a, 1e-6, loss);
            assert!(grad_close(t[a], fd, 1e-4, 1e-7), "coord {a}: {} vs {fd}", t[a]);
        }
    }
}
