//! Triangle meshes of the unit square with an optional interior obstacle.
//!
//! Nodes carry a type: `Boundary` for nodes on the outer square or on the
//! obstacle rim, `Interior` otherwise. Graph connectivity, boundary distance
//! and P1 interpolation between unrelated meshes all live here.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::Rng;

use crate::{seed, Error, Result};

/// Geometric tolerance for boundary classification.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Triangles with smaller area are treated as degenerate.
pub const MIN_AREA: f64 = 1e-12;
/// Default distance a target node may sit outside the source mesh.
pub const INTERP_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeType {
    Interior,
    Boundary,
}

impl NodeType {
    pub fn is_boundary(self) -> bool {
        self == NodeType::Boundary
    }

    /// One-hot encoding used as a node feature: `[1,0]` off the boundary,
    /// `[0,1]` on it.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            NodeType::Interior => [1.0, 0.0],
            NodeType::Boundary => [0.0, 1.0],
        }
    }
}

/// Axis-aligned elliptic obstacle; a disk when both radii agree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Obstacle {
    Disk { center: [f64; 2], radius: f64 },
    Ellipse { center: [f64; 2], radii: [f64; 2] },
}

impl Obstacle {
    pub fn center(&self) -> [f64; 2] {
        match *self {
            Obstacle::Disk { center, .. } | Obstacle::Ellipse { center, .. } => center,
        }
    }

    pub fn radii(&self) -> [f64; 2] {
        match *self {
            Obstacle::Disk { radius, .. } => [radius, radius],
            Obstacle::Ellipse { radii, .. } => radii,
        }
    }

    /// Negative inside, zero on the rim, positive outside. Scaled so that it
    /// approximates signed distance near the rim.
    pub fn level(&self, p: [f64; 2]) -> f64 {
        let c = self.center();
        let [a, b] = self.radii();
        let q = ((p[0] - c[0]) / a).powi(2) + ((p[1] - c[1]) / b).powi(2);
        (q.sqrt() - 1.0) * a.min(b)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.level(p) < 0.0
    }

    /// Point on the rim at parameter angle `theta`.
    pub fn rim_point(&self, theta: f64) -> [f64; 2] {
        let c = self.center();
        let [a, b] = self.radii();
        [c[0] + a * theta.cos(), c[1] + b * theta.sin()]
    }

    /// Ramanujan's perimeter approximation.
    pub fn perimeter(&self) -> f64 {
        let [a, b] = self.radii();
        let h = ((a - b) / (a + b)).powi(2);
        std::f64::consts::PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
    }

    pub fn area(&self) -> f64 {
        let [a, b] = self.radii();
        std::f64::consts::PI * a * b
    }
}

/// Parameters of [`generate_mesh`].
#[derive(Clone, Debug, PartialEq)]
pub struct MeshSpec {
    /// Approximate number of nodes.
    pub target_nodes: usize,
    pub obstacle: Option<Obstacle>,
    /// Node jitter as a fraction of the grid spacing, at most 0.3.
    pub jitter: f64,
}

impl MeshSpec {
    pub fn new(target_nodes: usize, obstacle: Option<Obstacle>) -> Self {
        Self {
            target_nodes,
            obstacle,
            jitter: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub node_type: Vec<NodeType>,
    pub obstacle: Option<Obstacle>,
    /// Seed the mesh was generated from; 0 for structured meshes.
    pub seed: u64,
}

/// Directed edges with geometric features. Every undirected mesh edge
/// appears once in each direction.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `[dx, dy, |d|]` with `d = x_dst - x_src`.
    pub features: Vec<[f64; 3]>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn on_outer_boundary(p: [f64; 2]) -> bool {
    p[0].abs() <= BOUNDARY_TOL
        || (p[0] - 1.0).abs() <= BOUNDARY_TOL
        || p[1].abs() <= BOUNDARY_TOL
        || (p[1] - 1.0).abs() <= BOUNDARY_TOL
}

impl Mesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// `n×n` grid on the unit square, every cell split along the same
    /// diagonal. Outer nodes are `Boundary`.
    pub fn structured(n: usize) -> Mesh {
        assert!(n >= 2, "structured mesh needs at least 2 nodes per side");
        let h = 1.0 / (n - 1) as f64;
        let mut nodes = Vec::with_capacity(n * n);
        let mut node_type = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                nodes.push([i as f64 * h, j as f64 * h]);
                let edge = i == 0 || j == 0 || i == n - 1 || j == n - 1;
                node_type.push(if edge { NodeType::Boundary } else { NodeType::Interior });
            }
        }
        let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                let b = a + 1;
                let c = a + n;
                let d = c + 1;
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        Mesh {
            nodes,
            triangles,
            node_type,
            obstacle: None,
            seed: 0,
        }
    }

    pub fn boundary_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.node_type[i].is_boundary())
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| !self.node_type[i].is_boundary())
    }

    /// 1.0 on interior nodes, 0.0 on boundary nodes.
    pub fn interior_mask(&self) -> Vec<f64> {
        self.node_type
            .iter()
            .map(|t| if t.is_boundary() { 0.0 } else { 1.0 })
            .collect()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    /// Unique undirected edges `(i, j)` with `i < j`, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.undirected_edges();
        let total: f64 = edges.iter().map(|&(i, j)| dist(self.nodes[i], self.nodes[j])).sum();
        total / edges.len().max(1) as f64
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if self.node_type.len() != n {
            return Err(Error::InvalidMesh(format!(
                "{} node types for {n} nodes",
                self.node_type.len()
            )));
        }
        let mut referenced = vec![false; n];
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!("triangle {t} indexes past {n} nodes")));
            }
            let area = self.triangle_area(t);
            if area.abs() <= MIN_AREA {
                return Err(Error::DegenerateTriangle { triangle: t, area });
            }
            for &i in tri {
                referenced[i] = true;
            }
        }
        if let Some(i) = referenced.iter().position(|r| !r) {
            return Err(Error::InvalidMesh(format!("node {i} belongs to no triangle")));
        }
        for (i, p) in self.nodes.iter().enumerate() {
            let on_rim = self
                .obstacle
                .is_some_and(|o| o.level(*p).abs() <= BOUNDARY_TOL);
            let expect = on_outer_boundary(*p) || on_rim;
            if expect != self.node_type[i].is_boundary() {
                return Err(Error::InvalidMesh(format!(
                    "node {i} at {p:?} typed {:?}",
                    self.node_type[i]
                )));
            }
            if let Some(o) = &self.obstacle {
                if o.level(*p) < -BOUNDARY_TOL {
                    return Err(Error::InvalidMesh(format!("node {i} lies inside the obstacle")));
                }
            }
        }
        Ok(())
    }

    /// Applies a node permutation: node `i` of the result is node `perm[i]`
    /// of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Mesh {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Mesh {
            nodes: perm.iter().map(|&o| self.nodes[o]).collect(),
            triangles: self
                .triangles
                .iter()
                .map(|t| [inverse[t[0]], inverse[t[1]], inverse[t[2]]])
                .collect(),
            node_type: perm.iter().map(|&o| self.node_type[o]).collect(),
            obstacle: self.obstacle,
            seed: self.seed,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

/// Jittered-grid Delaunay mesh of the unit square, with an obstacle hole
/// when requested. A pure function of `(spec, seed)`.
pub fn generate_mesh(spec: &MeshSpec, seed: u64) -> Result<Mesh> {
    if spec.target_nodes < 9 {
        return Err(Error::MeshRejected(format!(
            "target node count {} is below the minimum of 9",
            spec.target_nodes
        )));
    }
    if !(0.0..=0.3).contains(&spec.jitter) {
        return Err(Error::MeshRejected(format!("jitter {} outside [0, 0.3]", spec.jitter)));
    }

    let hole_fraction = spec.obstacle.map_or(0.0, |o| o.area());
    let per_side = ((spec.target_nodes as f64 / (1.0 - hole_fraction).max(0.05)).sqrt()).round();
    let n = (per_side as usize).max(3);
    let h = 1.0 / (n - 1) as f64;

    if let Some(o) = &spec.obstacle {
        let c = o.center();
        let [a, b] = o.radii();
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::MeshRejected("obstacle radii must be positive".into()));
        }
        // One grid cell of clearance keeps at least one node layer between
        // the rim and the outer boundary.
        let clear = h;
        if c[0] - a < clear || c[0] + a > 1.0 - clear || c[1] - b < clear || c[1] + b > 1.0 - clear {
            return Err(Error::MeshRejected(format!(
                "obstacle at {c:?} with radii {:?} leaves less than {clear:.4} clearance to the boundary at spacing {h:.4}",
                [a, b]
            )));
        }
    }

    let mut rng = seed::rng(seed, "mesh-jitter");
    let amp = spec.jitter * h;
    let mut points: Vec<[f64; 2]> = Vec::new();
    let mut is_rim: Vec<bool> = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let mut p = [i as f64 * h, j as f64 * h];
            let on_x = i == 0 || i == n - 1;
            let on_y = j == 0 || j == n - 1;
            // Boundary points slide along their edge; corners stay put.
            let dx: f64 = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            let dy: f64 = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            if !on_x {
                p[0] += dx;
            }
            if !on_y {
                p[1] += dy;
            }
            if let Some(o) = &spec.obstacle {
                if o.level(p) < 0.5 * h {
                    continue;
                }
            }
            points.push(p);
            is_rim.push(false);
        }
    }
    if let Some(o) = &spec.obstacle {
        let m = ((o.perimeter() / h).ceil() as usize).max(8);
        for k in 0..m {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            points.push(o.rim_point(theta));
            is_rim.push(true);
        }
    }

    let dpts: Vec<delaunator::Point> = points.iter().map(|p| delaunator::Point { x: p[0], y: p[1] }).collect();
    let tri = delaunator::triangulate(&dpts);
    if tri.triangles.is_empty() {
        return Err(Error::MeshRejected("triangulation produced no triangles".into()));
    }
    let mut triangles = Vec::with_capacity(tri.triangles.len() / 3);
    for t in tri.triangles.chunks_exact(3) {
        let (a, b, c) = (t[0], t[1], t[2]);
        let area = signed_area(points[a], points[b], points[c]);
        if area.abs() <= MIN_AREA {
            continue;
        }
        if let Some(o) = &spec.obstacle {
            let g = [
                (points[a][0] + points[b][0] + points[c][0]) / 3.0,
                (points[a][1] + points[b][1] + points[c][1]) / 3.0,
            ];
            if o.contains(g) {
                continue;
            }
        }
        triangles.push(if area > 0.0 { [a, b, c] } else { [a, c, b] });
    }

    // Drop nodes no triangle uses and renumber the rest.
    let mut remap = vec![usize::MAX; points.len()];
    for t in &triangles {
        for &i in t {
            remap[i] = 0;
        }
    }
    let mut nodes = Vec::new();
    let mut node_type = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if remap[i] == 0 {
            remap[i] = nodes.len();
            nodes.push(*p);
            node_type.push(if is_rim[i] || on_outer_boundary(*p) {
                NodeType::Boundary
            } else {
                NodeType::Interior
            });
        }
    }
    for t in &mut triangles {
        for i in t.iter_mut() {
            *i = remap[*i];
        }
    }

    let mesh = Mesh {
        nodes,
        triangles,
        node_type,
        obstacle: spec.obstacle,
        seed,
    };
    mesh.validate()
        .map_err(|e| Error::MeshRejected(format!("generated mesh failed validation: {e}")))?;
    Ok(mesh)
}

/// Directed edge list of `mesh`, sorted by `(src, dst)`.
pub fn build_edges(mesh: &Mesh) -> EdgeList {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, j) in mesh.undirected_edges() {
        pairs.push((i, j));
        pairs.push((j, i));
    }
    pairs.sort_unstable();
    let mut out = EdgeList {
        src: Vec::with_capacity(pairs.len()),
        dst: Vec::with_capacity(pairs.len()),
        features: Vec::with_capacity(pairs.len()),
    };
    for (i, j) in pairs {
        let d = [mesh.nodes[j][0] - mesh.nodes[i][0], mesh.nodes[j][1] - mesh.nodes[i][1]];
        out.src.push(i);
        out.dst.push(j);
        out.features.push([d[0], d[1], d[0].hypot(d[1])]);
    }
    out
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // Reversed so that `BinaryHeap` pops the smallest distance first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Shortest edge-path distance from every node to the nearest boundary node.
pub fn boundary_distance(mesh: &Mesh) -> Result<Vec<f64>> {
    let n = mesh.node_count();
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, j) in mesh.undirected_edges() {
        let w = dist(mesh.nodes[i], mesh.nodes[j]);
        adjacency[i].push((j, w));
        adjacency[j].push((i, w));
    }
    let mut d = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for i in mesh.boundary_nodes() {
        d[i] = 0.0;
        heap.push(Frontier(0.0, i));
    }
    if heap.is_empty() {
        return Err(Error::InvalidMesh("mesh has no boundary nodes".into()));
    }
    while let Some(Frontier(di, i)) = heap.pop() {
        if di > d[i] {
            continue;
        }
        for &(j, w) in &adjacency[i] {
            let cand = di + w;
            if cand < d[j] {
                d[j] = cand;
                heap.push(Frontier(cand, j));
            }
        }
    }
    if let Some(node) = d.iter().position(|v| v.is_infinite()) {
        return Err(Error::Disconnected { node });
    }
    Ok(d)
}

/// Barycentric coordinates of `p` in triangle `(a, b, c)`.
fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 3] {
    let area = signed_area(a, b, c);
    let l0 = signed_area(p, b, c) / area;
    let l1 = signed_area(a, p, c) / area;
    [l0, l1, 1.0 - l0 - l1]
}

fn closest_on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * ab[0], a[1] + t * ab[1]]
}

/// Weights of the point of triangle `t` nearest to `p`, and that distance.
fn clamped_weights(mesh: &Mesh, t: usize, p: [f64; 2]) -> ([f64; 3], f64) {
    let [ia, ib, ic] = mesh.triangles[t];
    let (a, b, c) = (mesh.nodes[ia], mesh.nodes[ib], mesh.nodes[ic]);
    let w = barycentric(p, a, b, c);
    if w.iter().all(|&v| v >= 0.0) {
        return (w, 0.0);
    }
    let mut best = (f64::INFINITY, p);
    for (u, v) in [(a, b), (b, c), (c, a)] {
        let q = closest_on_segment(p, u, v);
        let d = dist(p, q);
        if d < best.0 {
            best = (d, q);
        }
    }
    let w = barycentric(best.1, a, b, c).map(|v| v.max(0.0));
    let s: f64 = w.iter().sum();
    (w.map(|v| v / s), best.0)
}

/// Uniform bucket grid over triangle bounding boxes.
struct Locator {
    cells: usize,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    fn new(mesh: &Mesh) -> Self {
        let cells = ((mesh.triangles.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 256);
        let mut buckets = vec![Vec::new(); cells * cells];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let xs = tri.map(|i| mesh.nodes[i][0]);
            let ys = tri.map(|i| mesh.nodes[i][1]);
            let (x0, x1) = (Self::cell(xs.iter().cloned().fold(f64::INFINITY, f64::min), cells), Self::cell(xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max), cells));
            let (y0, y1) = (Self::cell(ys.iter().cloned().fold(f64::INFINITY, f64::min), cells), Self::cell(ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max), cells));
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    buckets[cy * cells + cx].push(t);
                }
            }
        }
        Self { cells, buckets }
    }

    fn cell(v: f64, cells: usize) -> usize {
        ((v * cells as f64).floor().max(0.0) as usize).min(cells - 1)
    }

    fn candidates(&self, p: [f64; 2]) -> &[usize] {
        &self.buckets[Self::cell(p[1], self.cells) * self.cells + Self::cell(p[0], self.cells)]
    }
}

/// Linear interpolation weights that map a field on `source` to the nodes of
/// `target`: `out[i] = Σ w · field[node]` over the three entries of row `i`.
#[derive(Clone, Debug)]
pub struct Interpolant {
    pub rows: Vec<[(usize, f64); 3]>,
}

impl Interpolant {
    pub fn new(source: &Mesh, target: &Mesh, tol: f64) -> Result<Self> {
        let locator = Locator::new(source);
        let mut rows = Vec::with_capacity(target.node_count());
        let mut outside = Vec::new();
        for (i, &p) in target.nodes.iter().enumerate() {
            let mut found = None;
            for &t in locator.candidates(p) {
                let tri = source.triangles[t];
                let w = barycentric(p, source.nodes[tri[0]], source.nodes[tri[1]], source.nodes[tri[2]]);
                if w.iter().all(|&v| v >= -1e-12) {
                    found = Some((t, w));
                    break;
                }
            }
            let (t, w) = match found {
                Some(hit) => hit,
                None => {
                    let mut best = (usize::MAX, [0.0; 3], f64::INFINITY);
                    for t in 0..source.triangles.len() {
                        let (w, d) = clamped_weights(source, t, p);
                        if d < best.2 {
                            best = (t, w, d);
                        }
                    }
                    if best.2 > tol {
                        outside.push(i);
                    }
                    (best.0, best.1)
                }
            };
            let tri = source.triangles[t];
            rows.push([(tri[0], w[0]), (tri[1], w[1]), (tri[2], w[2])]);
        }
        if !outside.is_empty() {
            return Err(Error::OutsideMesh {
                count: outside.len(),
                nodes: outside.into_iter().take(10).collect(),
            });
        }
        Ok(Self { rows })
    }

    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * field[j]).sum())
            .collect()
    }
}

/// P1 interpolation of `field` from `source` onto the nodes of `target`.
pub fn interpolate(field: &[f64], source: &Mesh, target: &Mesh) -> Result<Vec<f64>> {
    interpolate_with_tolerance(field, source, target, INTERP_TOL)
}

pub fn interpolate_with_tolerance(field: &[f64], source: &Mesh, target: &Mesh, tol: f64) -> Result<Vec<f64>> {
    if field.len() != source.node_count() {
        return Err(Error::InvalidInput(format!(
            "field has {} values for {} source nodes",
            field.len(),
            source.node_count()
        )));
    }
    Ok(Interpolant::new(source, target, tol)?.apply(field))
}
