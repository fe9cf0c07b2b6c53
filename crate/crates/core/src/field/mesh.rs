//! Zero level-set extraction by marching tetrahedra, plus ASCII PLY I/O.
//!
//! Each lattice cube is split into six tetrahedra around its main diagonal.
//! The split is the same in every cube, so shared faces are cut identically
//! and the output is closed wherever the level set stays inside the cube.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;

use super::Field;
use crate::geometry::Vec3;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

// Corner offsets of the six tetrahedra (one per axis permutation).
const TETS: [[[usize; 3]; 4]; 6] = {
    const fn tet(a: usize, b: usize) -> [[usize; 3]; 4] {
        let mut v1 = [0; 3];
        v1[a] = 1;
        let mut v2 = v1;
        v2[b] = 1;
        [[0, 0, 0], v1, v2, [1, 1, 1]]
    }
    [tet(0, 1), tet(0, 2), tet(1, 0), tet(1, 2), tet(2, 0), tet(2, 1)]
};

/// Extracts the zero level set of `field` sampled on `resolution^3` lattice points.
pub fn extract_mesh(field: &Field, resolution: usize) -> Result<Mesh> {
    extract_mesh_fn(|x| field.sdf_query(x).0, resolution)
}

/// Extracts the zero level set of an arbitrary function over `[-1, 1]^3`.
pub fn extract_mesh_fn(f: impl Fn(&Vec3) -> f64, resolution: usize) -> Result<Mesh> {
    assert!(resolution >= 2);
    let n = resolution;
    let h = 2.0 / (n - 1) as f64;
    let pos = |i: usize, j: usize, k: usize| Vec3::new(-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h);
    let mut values = vec![0.0; n * n * n];
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let v = f(&pos(i, j, k));
                // exact zeros are nudged outside so every crossing is strict
                values[(k * n + j) * n + i] = if v == 0.0 { 1e-12 } else { v };
            }
        }
    }

    let mut mesh = Mesh::default();
    let mut lookup: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertex = |mesh: &mut Mesh, a: (usize, [usize; 3]), b: (usize, [usize; 3])| -> u32 {
        let key = if a.0 < b.0 { (a.0, b.0) } else { (b.0, a.0) };
        *lookup.entry(key).or_insert_with(|| {
            let (fa, fb) = (values[a.0], values[b.0]);
            let t = fa / (fa - fb);
            let pa = pos(a.1[0], a.1[1], a.1[2]);
            let pb = pos(b.1[0], b.1[1], b.1[2]);
            mesh.vertices.push(pa + (pb - pa) * t);
            (mesh.vertices.len() - 1) as u32
        })
    };

    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                for tet in &TETS {
                    let mut corners = [(0usize, [0usize; 3]); 4];
                    for (c, off) in tet.iter().enumerate() {
                        let g = [i + off[0], j + off[1], k + off[2]];
                        corners[c] = ((g[2] * n + g[1]) * n + g[0], g);
                    }
                    let inside: Vec<usize> = (0..4).filter(|&c| values[corners[c].0] < 0.0).collect();
                    let outside: Vec<usize> = (0..4).filter(|&c| values[corners[c].0] >= 0.0).collect();
                    let tris: Vec<[u32; 3]> = match inside.len() {
                        1 | 3 => {
                            let (lone, others) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
                            vec![[
                                vertex(&mut mesh, corners[lone], corners[others[0]]),
                                vertex(&mut mesh, corners[lone], corners[others[1]]),
                                vertex(&mut mesh, corners[lone], corners[others[2]]),
                            ]]
                        }
                        2 => {
                            let (a, b) = (inside[0], inside[1]);
                            let (c, d) = (outside[0], outside[1]);
                            let ac = vertex(&mut mesh, corners[a], corners[c]);
                            let ad = vertex(&mut mesh, corners[a], corners[d]);
                            let bc = vertex(&mut mesh, corners[b], corners[c]);
                            let bd = vertex(&mut mesh, corners[b], corners[d]);
                            vec![[ac, ad, bd], [ac, bd, bc]]
                        }
                        _ => Vec::new(),
                    };
                    if tris.is_empty() {
                        continue;
                    }
                    // orient normals from the inside corners toward the outside ones
                    let mut outward = Vec3::zeros();
                    for &c in &outside {
                        let g = corners[c].1;
                        outward += pos(g[0], g[1], g[2]) / outside.len() as f64;
                    }
                    for &c in &inside {
                        let g = corners[c].1;
                        outward -= pos(g[0], g[1], g[2]) / inside.len() as f64;
                    }
                    for mut t in tris {
                        let p = [
                            mesh.vertices[t[0] as usize],
                            mesh.vertices[t[1] as usize],
                            mesh.vertices[t[2] as usize],
                        ];
                        if (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&outward) < 0.0 {
                            t.swap(1, 2);
                        }
                        mesh.faces.push(t);
                    }
                }
            }
        }
    }
    if mesh.faces.is_empty() {
        return Err(Error::EmptyLevelSet);
    }
    Ok(mesh)
}

impl Mesh {
    /// True when every undirected edge is used by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *count.entry(if a < b { (a, b) } else { (b, a) }).or_insert(0) += 1;
            }
        }
        !count.is_empty() && count.values().all(|&c| c == 2)
    }

    pub fn area(&self) -> f64 {
        self.faces.iter().map(|f| self.face_area(f)).sum()
    }

    fn face_area(&self, f: &[u32; 3]) -> f64 {
        let a = self.vertices[f[0] as usize];
        let b = self.vertices[f[1] as usize];
        let c = self.vertices[f[2] as usize];
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// `count` points drawn uniformly by area.
    pub fn sample_points<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<Vec3> {
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in &self.faces {
            acc += self.face_area(f);
            cdf.push(acc);
        }
        if acc <= 0.0 {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let r = rng.gen::<f64>() * acc;
                let i = cdf.partition_point(|&c| c <= r).min(self.faces.len() - 1);
                let f = self.faces[i];
                let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let a = self.vertices[f[0] as usize];
                let b = self.vertices[f[1] as usize];
                let c = self.vertices[f[2] as usize];
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }
}

pub fn write_ply<W: Write>(mesh: &Mesh, mut w: W) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "element face {}", mesh.faces.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for v in &mesh.vertices {
        writeln!(w, "{:?} {:?} {:?}", v.x, v.y, v.z)?;
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

/// Reads the ASCII subset written by [`write_ply`].
pub fn read_ply<R: BufRead>(r: R, path: &str) -> Result<Mesh> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(Error::parse(path, 0, format!("unexpected end of file, expected {what}"))),
        }
    };
    let (ln, magic) = next("header")?;
    if magic.trim() != "ply" {
        return Err(Error::parse(path, ln, "missing 'ply' magic"));
    }
    let mut nv = None;
    let mut nf = None;
    loop {
        let (ln, line) = next("end_header")?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] | ["property", ..] | ["comment", ..] => {}
            ["format", ..] => return Err(Error::parse(path, ln, "only ascii PLY is supported")),
            ["element", "vertex", n] => nv = Some(n.parse::<usize>().map_err(|e| Error::parse(path, ln, e.to_string()))?),
            ["element", "face", n] => nf = Some(n.parse::<usize>().map_err(|e| Error::parse(path, ln, e.to_string()))?),
            _ => return Err(Error::parse(path, ln, format!("unexpected header line '{line}'"))),
        }
    }
    let nv = nv.ok_or_else(|| Error::parse(path, 0, "no vertex element"))?;
    let nf = nf.unwrap_or(0);
    let mut mesh = Mesh::default();
    for _ in 0..nv {
        let (ln, line) = next("vertex")?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, ln, e.to_string()))?;
        if v.len() < 3 {
            return Err(Error::parse(path, ln, "vertex needs 3 coordinates"));
        }
        mesh.vertices.push(Vec3::new(v[0], v[1], v[2]));
    }
    for _ in 0..nf {
        let (ln, line) = next("face")?;
        let v: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, ln, e.to_string()))?;
        if v.len() != 4 || v[0] != 3 {
            return Err(Error::parse(path, ln, "only triangular faces are supported"));
        }
        if v[1..].iter().any(|&i| i as usize >= nv) {
            return Err(Error::parse(path, ln, "face index out of range"));
        }
        mesh.faces.push([v[1], v[2], v[3]]);
    }
    Ok(mesh)
}
