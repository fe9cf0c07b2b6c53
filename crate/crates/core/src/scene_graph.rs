//! Images as nodes, keypoint matches as edges, and the confidence scores
//! that steer ray sampling.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::{render_ray, Field};
use crate::geometry::{backproject, pixel_ray, project, relative_rotation_deg, Intrinsics, Pose, Vec2};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeClass {
    Unknown,
    Inlier,
    Outlier,
}

impl fmt::Display for NodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeClass::Unknown => "unknown",
            NodeClass::Inlier => "inlier",
            NodeClass::Outlier => "outlier",
        })
    }
}

impl FromStr for NodeClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unknown" => Ok(NodeClass::Unknown),
            "inlier" => Ok(NodeClass::Inlier),
            "outlier" => Ok(NodeClass::Outlier),
            _ => Err(format!("unknown node class '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: usize,
    pub confidence: f64,
    pub class: NodeClass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub kp_i: Vec2,
    pub kp_j: Vec2,
    pub alive: bool,
}

impl Match {
    pub fn new(kp_i: Vec2, kp_j: Vec2) -> Self {
        Match { kp_i, kp_j, alive: true }
    }
}

/// Matches between images `i < j`. Match order is stable across
/// filtering, so an index identifies a match for the lifetime of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub matches: Vec<Match>,
}

impl Edge {
    pub fn alive_count(&self) -> usize {
        self.matches.iter().filter(|m| m.alive).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    raw: Vec<Edge>,
}

/// Counts from one [`SceneGraph::update_graph`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphUpdate {
    pub edges_before: usize,
    pub edges_after: usize,
    pub removed_by_angle: usize,
    pub matches_alive: usize,
    pub matches_killed: usize,
}

impl SceneGraph {
    /// Builds a graph over `n` images. Edges must satisfy `i < j < n` and
    /// carry at least one match; every match starts alive.
    pub fn new(n: usize, edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            if e.i >= e.j || e.j >= n {
                return Err(Error::Config(format!("invalid edge ({}, {}) for {n} nodes", e.i, e.j)));
            }
            if e.matches.is_empty() {
                return Err(Error::Config(format!("edge ({}, {}) has no matches", e.i, e.j)));
            }
        }
        let nodes = (0..n)
            .map(|id| Node {
                id,
                confidence: 1.0 / n as f64,
                class: NodeClass::Unknown,
            })
            .collect();
        Ok(SceneGraph {
            nodes,
            raw: edges.clone(),
            edges,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The unfiltered edges the graph was created with.
    pub fn raw_edges(&self) -> &[Edge] {
        &self.raw
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.confidence).collect()
    }

    pub fn classes(&self) -> Vec<NodeClass> {
        self.nodes.iter().map(|n| n.class).collect()
    }

    /// Drops edges whose relative rotation exceeds `tau` degrees.
    pub fn sparsify(&mut self, poses: &[Pose], tau: f64) {
        self.edges.retain(|e| relative_rotation_deg(&poses[e.i], &poses[e.j]) <= tau);
    }

    /// Mean alive-match count over each node's edges; zero for isolated nodes.
    pub fn match_scores(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.nodes.len()];
        let mut deg = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            let c = e.alive_count() as f64;
            for v in [e.i, e.j] {
                sum[v] += c;
                deg[v] += 1;
            }
        }
        sum.iter().zip(&deg).map(|(s, &d)| if d == 0 { 0.0 } else { s / d as f64 }).collect()
    }

    /// Sets confidences to the normalized match scores.
    pub fn initial_confidence(&mut self) -> Result<()> {
        let conf = normalize_scores(&self.match_scores())?;
        for (n, c) in self.nodes.iter_mut().zip(conf) {
            n.confidence = c;
        }
        Ok(())
    }

    /// Adds `lambda_c * psnr_n` to each confidence, clamps at zero and
    /// renormalizes. A graph that would end with zero total mass falls
    /// back to uniform confidence.
    pub fn update_confidence(&mut self, psnr_n: &[f64], lambda_c: f64) {
        assert_eq!(psnr_n.len(), self.nodes.len());
        for (n, p) in self.nodes.iter_mut().zip(psnr_n) {
            n.confidence = (n.confidence + lambda_c * p).max(0.0);
        }
        self.normalize();
    }

    fn normalize(&mut self) {
        let total: f64 = self.nodes.iter().map(|n| n.confidence).sum();
        if total > 0.0 {
            for n in &mut self.nodes {
                n.confidence /= total;
            }
        } else {
            let u = 1.0 / self.nodes.len() as f64;
            for n in &mut self.nodes {
                n.confidence = u;
            }
        }
    }

    /// Marks a node outlier iff its PSNR gap strictly exceeds `tau1`.
    pub fn classify(&mut self, psnr_o: &[f64], psnr_n: &[f64], tau1: f64) {
        for n in &mut self.nodes {
            let gap = (psnr_o[n.id] - psnr_n[n.id]).abs();
            n.class = if gap > tau1 { NodeClass::Outlier } else { NodeClass::Inlier };
        }
    }

    /// Draws a node with probability equal to its confidence.
    pub fn sample_node<R: Rng>(&self, rng: &mut R) -> usize {
        let dist = WeightedIndex::new(self.nodes.iter().map(|n| n.confidence)).expect("confidences must be normalized");
        dist.sample(rng)
    }

    /// Restarts from the raw edges, re-applies the angular filter with the
    /// current poses, then kills every match whose symmetric re-projection
    /// residual exceeds `tau_rep`. `depth(image, pixel)` returns the z-depth
    /// seen through that pixel, or `None` when it is unknown.
    pub fn update_graph_with(
        &mut self,
        poses: &[Pose],
        k: &Intrinsics,
        tau: f64,
        tau_rep: f64,
        mut depth: impl FnMut(usize, &Vec2) -> Option<f64>,
    ) -> GraphUpdate {
        let mut report = GraphUpdate {
            edges_before: self.edges.len(),
            ..GraphUpdate::default()
        };
        let mut edges = Vec::new();
        for raw in &self.raw {
            if relative_rotation_deg(&poses[raw.i], &poses[raw.j]) > tau {
                report.removed_by_angle += 1;
                continue;
            }
            let mut e = raw.clone();
            for m in &mut e.matches {
                let di = depth(e.i, &m.kp_i);
                let dj = depth(e.j, &m.kp_j);
                let r = match_residual(poses, k, e.i, e.j, m, di, dj);
                m.alive = r <= tau_rep;
                if m.alive {
                    report.matches_alive += 1;
                } else {
                    report.matches_killed += 1;
                }
            }
            if e.alive_count() > 0 {
                edges.push(e);
            }
        }
        self.edges = edges;
        report.edges_after = self.edges.len();
        report
    }

    /// [`SceneGraph::update_graph_with`] using max-weight depths rendered
    /// from `field` with `samples` midpoint samples per ray.
    pub fn update_graph(
        &mut self,
        field: &Field,
        poses: &[Pose],
        k: &Intrinsics,
        tau: f64,
        tau_rep: f64,
        samples: usize,
    ) -> GraphUpdate {
        self.update_graph_with(poses, k, tau, tau_rep, |img, px| rendered_depth(field, &poses[img], k, px, samples))
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "nodes {}", self.nodes.len())?;
        for n in &self.nodes {
            writeln!(w, "node {} {:?} {}", n.id, n.confidence, n.class)?;
        }
        write_edges(&mut w, "edges", &self.edges)?;
        write_edges(&mut w, "raw", &self.raw)
    }

    pub fn read<R: BufRead>(r: R, path: &str) -> Result<Self> {
        let mut lines = Lines {
            inner: r.lines(),
            line: 0,
            path,
        };
        let n = lines.header("nodes")?;
        let mut nodes = Vec::with_capacity(n);
        for id in 0..n {
            let tok = lines.tokens()?;
            if tok.len() != 4 || tok[0] != "node" {
                return Err(lines.err("expected 'node id confidence class'"));
            }
            let got: usize = lines.num(&tok[1])?;
            if got != id {
                return Err(lines.err(format!("expected node {id}, found {got}")));
            }
            let confidence: f64 = lines.num(&tok[2])?;
            let class = tok[3].parse().map_err(|e: String| lines.err(e))?;
            nodes.push(Node { id, confidence, class });
        }
        let edges = read_edges(&mut lines, "edges", n)?;
        let raw = read_edges(&mut lines, "raw", n)?;
        Ok(SceneGraph { nodes, edges, raw })
    }
}

/// Scales non-negative scores to sum to one.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroConfidence);
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

/// Symmetric re-projection residual of a match in pixels: the mean of both
/// directions. Missing depths or points behind a camera give infinity.
pub fn match_residual(
    poses: &[Pose],
    k: &Intrinsics,
    i: usize,
    j: usize,
    m: &Match,
    depth_i: Option<f64>,
    depth_j: Option<f64>,
) -> f64 {
    let one_way = |a: usize, b: usize, kp_a: &Vec2, kp_b: &Vec2, d: Option<f64>| -> f64 {
        let Some(d) = d else { return f64::INFINITY };
        backproject(&poses[a], k, kp_a, d)
            .and_then(|x| project(&poses[b], k, &x))
            .map(|p| (p - kp_b).norm())
            .unwrap_or(f64::INFINITY)
    };
    0.5 * (one_way(i, j, &m.kp_i, &m.kp_j, depth_i) + one_way(j, i, &m.kp_j, &m.kp_i, depth_j))
}

/// Z-depth of the heaviest render sample through `pixel`.
pub fn rendered_depth(field: &Field, pose: &Pose, k: &Intrinsics, pixel: &Vec2, samples: usize) -> Option<f64> {
    let (o, d, norm) = pixel_ray(pose, k, pixel);
    let (_, w, t) = render_ray(field, &o, &d, samples, true).ok()?;
    let best = crate::losses::max_weight_depth(&w, &t).ok()?;
    Some(best / norm)
}

fn write_edges<W: Write>(w: &mut W, tag: &str, edges: &[Edge]) -> std::io::Result<()> {
    writeln!(w, "{tag} {}", edges.len())?;
    for e in edges {
        writeln!(w, "edge {} {} {}", e.i, e.j, e.matches.len())?;
        for m in &e.matches {
            writeln!(
                w,
                "m {:?} {:?} {:?} {:?} {}",
                m.kp_i.x,
                m.kp_i.y,
                m.kp_j.x,
                m.kp_j.y,
                u8::from(m.alive)
            )?;
        }
    }
    Ok(())
}

struct Lines<'a, R: BufRead> {
    inner: std::io::Lines<R>,
    line: usize,
    path: &'a str,
}

impl<R: BufRead> Lines<'_, R> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }

    fn tokens(&mut self) -> Result<Vec<String>> {
        loop {
            self.line += 1;
            match self.inner.next() {
                None => return Err(self.err("unexpected end of file")),
                Some(l) => {
                    let l = l?;
                    let t: Vec<String> = l.split_whitespace().map(str::to_string).collect();
                    if !t.is_empty() {
                        return Ok(t);
                    }
                }
            }
        }
    }

    fn num<T: FromStr>(&self, s: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        s.parse().map_err(|e: T::Err| self.err(format!("bad number '{s}': {e}")))
    }

    fn header(&mut self, tag: &str) -> Result<usize> {
        let t = self.tokens()?;
        if t.len() != 2 || t[0] != tag {
            return Err(self.err(format!("expected '{tag} <count>'")));
        }
        self.num(&t[1])
    }
}

fn read_edges<R: BufRead>(lines: &mut Lines<'_, R>, tag: &str, n: usize) -> Result<Vec<Edge>> {
    let count = lines.header(tag)?;
    let mut edges = Vec::with_capacity(count);
    for _ in 0..count {
        let t = lines.tokens()?;
        if t.len() != 4 || t[0] != "edge" {
            return Err(lines.err("expected 'edge i j count'"));
        }
        let i: usize = lines.num(&t[1])?;
        let j: usize = lines.num(&t[2])?;
        let c: usize = lines.num(&t[3])?;
        if i >= j || j >= n {
            return Err(lines.err(format!("invalid edge ({i}, {j})")));
        }
        let mut matches = Vec::with_capacity(c);
        for _ in 0..c {
            let t = lines.tokens()?;
            if t.len() != 6 || t[0] != "m" {
                return Err(lines.err("expected 'm xi yi xj yj alive'"));
            }
            let v: Vec<f64> = t[1..5].iter().map(|s| lines.num(s)).collect::<Result<_>>()?;
            let alive = match t[5].as_str() {
                "1" => true,
                "0" => false,
                other => return Err(lines.err(format!("alive flag must be 0 or 1, got '{other}'"))),
            };
            matches.push(Match {
                kp_i: Vec2::new(v[0], v[1]),
                kp_j: Vec2::new(v[2], v[3]),
                alive,
            });
        }
        edges.push(Edge { i, j, matches });
    }
    Ok(edges)
}
