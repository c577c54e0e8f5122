//! Triadic cubes, open clusters, and the crossability / goodness predicates.
//!
//! Components are computed with a small union-find over the local indices of
//! an axis box. Component ids are assigned in order of the smallest (in the
//! lexicographic order) vertex of each component.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::lattice::{pow3, AxisBox, Point};

/// The cube `z + (-3^n/2, 3^n/2)^d ∩ Z^d` with `z ∈ 3^n Z^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TriadicCube {
    pub dim: usize,
    pub scale: u32,
    pub center: Point,
}

impl TriadicCube {
    pub fn new(dim: usize, scale: u32, center: Point) -> Result<Self> {
        let s = pow3(scale);
        if (0..dim).any(|i| center.0[i].rem_euclid(s) != 0) {
            return Err(Error::Precondition(format!("center {center} not in 3^{scale} Z^{dim}")));
        }
        Ok(TriadicCube { dim, scale, center })
    }

    /// `□_n(0)`.
    pub fn origin(dim: usize, scale: u32) -> Self {
        TriadicCube { dim, scale, center: Point::ORIGIN }
    }

    /// The unique cube of scale `n` containing `x`.
    pub fn cube_of(dim: usize, x: Point, n: u32) -> Self {
        let s = pow3(n);
        let h = (s - 1) / 2;
        let mut c = Point::ORIGIN;
        for i in 0..dim {
            c.0[i] = s * (x.0[i] + h).div_euclid(s);
        }
        TriadicCube { dim, scale: n, center: c }
    }

    pub fn size(&self) -> i64 {
        pow3(self.scale)
    }

    pub fn half(&self) -> i64 {
        (self.size() - 1) / 2
    }

    pub fn volume(&self) -> usize {
        (self.size() as usize).pow(self.dim as u32)
    }

    pub fn as_box(&self) -> AxisBox {
        AxisBox::ball(self.dim, self.center, self.half())
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..self.dim).all(|i| (p.0[i] - self.center.0[i]).abs() <= self.half())
    }

    pub fn contains_cube(&self, o: &TriadicCube) -> bool {
        o.scale <= self.scale && self.contains(o.center)
    }

    pub fn predecessor(&self) -> TriadicCube {
        TriadicCube::cube_of(self.dim, self.center, self.scale + 1)
    }

    /// The `3^d` cubes of scale `n - 1` tiling this cube; empty at scale 0.
    pub fn successors(&self) -> Vec<TriadicCube> {
        if self.scale == 0 {
            return Vec::new();
        }
        let step = pow3(self.scale - 1);
        let offsets = AxisBox::ball(self.dim, Point::ORIGIN, 1);
        offsets
            .points()
            .map(|o| TriadicCube { dim: self.dim, scale: self.scale - 1, center: self.center.add(o.scale(step)) })
            .collect()
    }

    /// Membership in the dilation `r□`, which keeps the center and uses the
    /// half-width `r (size + 1) / 2`. `r = num / den`.
    pub fn dilate_contains(&self, p: Point, num: i64, den: i64) -> bool {
        let s1 = self.size() + 1;
        (0..self.dim).all(|i| 2 * den * (p.0[i] - self.center.0[i]).abs() < num * s1)
    }

    /// Bounding box of `r□`.
    pub fn dilated_box(&self, num: i64, den: i64) -> AxisBox {
        let s1 = self.size() + 1;
        // largest k with 2 den k < num s1
        let k = (num * s1 - 1).div_euclid(2 * den);
        AxisBox::ball(self.dim, self.center, k)
    }

    /// ℓ∞ distance between the point sets of two cubes.
    pub fn distance(&self, o: &TriadicCube) -> i64 {
        (0..self.dim)
            .map(|i| {
                let gap = (self.center.0[i] - o.center.0[i]).abs() - self.half() - o.half();
                gap.max(0)
            })
            .max()
            .unwrap_or(0)
    }
}

impl std::fmt::Display for TriadicCube {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "□_{}{}", self.scale, self.center)
    }
}

struct Dsu {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu { parent: (0..n as u32).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (ka, kb) = (self.rank[ra as usize], self.rank[rb as usize]);
        if ka < kb {
            self.parent[ra as usize] = rb;
        } else {
            self.parent[rb as usize] = ra;
            if ka == kb {
                self.rank[ra as usize] += 1;
            }
        }
    }
}

/// Component labelling of the open subgraph induced on an axis box.
#[derive(Clone, Debug)]
pub struct Components {
    pub region: AxisBox,
    /// Component id of each local index.
    pub label: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Bit `2i` set when the component meets the lower face along axis `i`,
    /// bit `2i + 1` for the upper face.
    pub faces: Vec<u8>,
    pub lo: Vec<Point>,
    pub hi: Vec<Point>,
}

impl Components {
    pub fn compute(env: &Environment, region: &AxisBox) -> Result<Self> {
        let lat = env.lattice();
        if !lat.as_axis_box().contains_box(region) {
            return Err(Error::Bounds(format!("region {:?}..{:?} leaves the box", region.lo, region.hi)));
        }
        let d = region.dim;
        let n = region.len();
        let mut dsu = Dsu::new(n);
        let mut local_stride = [0usize; 3];
        for i in 0..d {
            local_stride[i] = (i + 1..d).map(|j| region.side(j) as usize).product();
        }
        for (k, p) in region.points().enumerate() {
            let g = lat.index(p);
            for dir in 0..d {
                if p.0[dir] < region.hi.0[dir] && env.bond(g, dir) > 0.0 {
                    dsu.union(k as u32, (k + local_stride[dir]) as u32);
                }
            }
        }
        let mut root_label = vec![u32::MAX; n];
        let mut label = vec![0u32; n];
        let mut sizes = Vec::new();
        let mut faces = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for (k, p) in region.points().enumerate() {
            let r = dsu.find(k as u32) as usize;
            if root_label[r] == u32::MAX {
                root_label[r] = sizes.len() as u32;
                sizes.push(0);
                faces.push(0u8);
                lo.push(p);
                hi.push(p);
            }
            let c = root_label[r] as usize;
            label[k] = c as u32;
            sizes[c] += 1;
            for i in 0..d {
                if p.0[i] == region.lo.0[i] {
                    faces[c] |= 1 << (2 * i);
                }
                if p.0[i] == region.hi.0[i] {
                    faces[c] |= 1 << (2 * i + 1);
                }
                lo[c].0[i] = lo[c].0[i].min(p.0[i]);
                hi[c].0[i] = hi[c].0[i].max(p.0[i]);
            }
        }
        Ok(Components { region: *region, label, sizes, faces, lo, hi })
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn label_of(&self, p: Point) -> u32 {
        self.label[self.region.local_index(p)]
    }

    /// ℓ∞ extent of the bounding box of component `c`.
    pub fn extent(&self, c: usize) -> i64 {
        (0..self.region.dim).map(|i| self.hi[c].0[i] - self.lo[c].0[i]).max().unwrap_or(0)
    }

    fn all_faces(&self) -> u8 {
        ((1u16 << (2 * self.region.dim)) - 1) as u8
    }

    pub fn crosses_all_faces(&self, c: usize) -> bool {
        self.faces[c] == self.all_faces()
    }

    /// True when, for every axis, some component meets both opposite faces.
    pub fn crossable(&self) -> bool {
        (0..self.region.dim).all(|i| {
            let m = 0b11u8 << (2 * i);
            self.faces.iter().any(|f| f & m == m)
        })
    }

    /// Largest component meeting every face; ties go to the smallest vertex,
    /// which is the lowest id.
    pub fn crossing_component(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for c in 0..self.count() {
            if self.crosses_all_faces(c) && best.is_none_or(|b| self.sizes[c] > self.sizes[b]) {
                best = Some(c);
            }
        }
        best
    }

    /// Largest component, ties to the lowest id.
    pub fn largest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for c in 0..self.count() {
            if best.is_none_or(|b| self.sizes[c] > self.sizes[b]) {
                best = Some(c);
            }
        }
        best
    }

    pub fn members(&self, c: usize) -> Vec<Point> {
        self.region
            .points()
            .zip(self.label.iter())
            .filter(|(_, &l)| l as usize == c)
            .map(|(p, _)| p)
            .collect()
    }
}

/// Connected components of the open subgraph induced on `region`, each
/// listed in lexicographic order, components ordered by smallest vertex.
pub fn open_clusters(env: &Environment, region: &AxisBox) -> Result<Vec<Vec<Point>>> {
    let comps = Components::compute(env, region)?;
    let mut out = vec![Vec::new(); comps.count()];
    for (p, &l) in region.points().zip(comps.label.iter()) {
        out[l as usize].push(p);
    }
    Ok(out)
}

/// A connected weighted graph on lattice points, stored in CSR form.
///
/// Vertices are sorted lexicographically. Each unordered edge `{x, y}` has an
/// id; edges are sorted by `(x, y)` with `x < y` in index order.
#[derive(Clone, Debug)]
pub struct ClusterGraph {
    dim: usize,
    vertices: Vec<Point>,
    offsets: Vec<usize>,
    nbrs: Vec<u32>,
    weights: Vec<f64>,
    edge_ids: Vec<u32>,
    edges: Vec<(u32, u32)>,
    edge_weights: Vec<f64>,
    bbox: AxisBox,
    lookup: Vec<u32>,
}

impl ClusterGraph {
    /// Builds the graph on `vertices` with the given weighted edges. Each pair
    /// must be nearest neighbours with a positive weight.
    pub fn from_edges(dim: usize, mut vertices: Vec<Point>, edges: &[(Point, Point, f64)]) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::EmptyCluster("no vertices".into()));
        }
        vertices.sort();
        vertices.dedup();
        let mut lo = vertices[0];
        let mut hi = vertices[0];
        for v in &vertices {
            for i in 0..dim {
                lo.0[i] = lo.0[i].min(v.0[i]);
                hi.0[i] = hi.0[i].max(v.0[i]);
            }
        }
        let bbox = AxisBox::new(dim, lo, hi);
        let mut lookup = vec![u32::MAX; bbox.len()];
        for (k, v) in vertices.iter().enumerate() {
            lookup[bbox.local_index(*v)] = k as u32;
        }
        let find = |p: Point| -> Result<u32> {
            if !bbox.contains(p) || lookup[bbox.local_index(p)] == u32::MAX {
                return Err(Error::Topology(format!("edge endpoint {p} not a vertex")));
            }
            Ok(lookup[bbox.local_index(p)])
        };
        let mut list = Vec::with_capacity(edges.len());
        for &(a, b, w) in edges {
            if a.sub(b).l1() != 1 || !(w > 0.0) {
                return Err(Error::Topology(format!("invalid edge {a}-{b} with weight {w}")));
            }
            let (i, j) = (find(a)?, find(b)?);
            list.push(if i < j { (i, j, w) } else { (j, i, w) });
        }
        list.sort_by_key(|&(i, j, _)| (i, j));
        list.dedup_by_key(|e| (e.0, e.1));
        let n = vertices.len();
        let mut deg = vec![0usize; n + 1];
        for &(i, j, _) in &list {
            deg[i as usize + 1] += 1;
            deg[j as usize + 1] += 1;
        }
        for k in 0..n {
            deg[k + 1] += deg[k];
        }
        let offsets = deg.clone();
        let mut fill = deg;
        let m = offsets[n];
        let mut nbrs = vec![0u32; m];
        let mut weights = vec![0.0; m];
        let mut edge_ids = vec![0u32; m];
        for (id, &(i, j, w)) in list.iter().enumerate() {
            for (s, t) in [(i, j), (j, i)] {
                let slot = fill[s as usize];
                nbrs[slot] = t;
                weights[slot] = w;
                edge_ids[slot] = id as u32;
                fill[s as usize] += 1;
            }
        }
        let g = ClusterGraph {
            dim,
            vertices,
            offsets,
            nbrs,
            weights,
            edge_ids,
            edges: list.iter().map(|&(i, j, _)| (i, j)).collect(),
            edge_weights: list.iter().map(|e| e.2).collect(),
            bbox,
            lookup,
        };
        if !g.is_connected() {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(g)
    }

    /// The graph of one component of `env` restricted to `region`: all open
    /// bonds with both endpoints in `members`.
    pub fn from_members(env: &Environment, members: Vec<Point>) -> Result<Self> {
        let lat = env.lattice();
        let d = env.dim();
        let mut edges = Vec::new();
        let set: std::collections::HashSet<Point> = members.iter().copied().collect();
        for &p in &members {
            let g = lat.index(p);
            for dir in 0..d {
                let a = env.bond(g, dir);
                let q = p.add(Point::unit(dir));
                if a > 0.0 && set.contains(&q) {
                    edges.push((p, q, a));
                }
            }
        }
        Self::from_edges(d, members, &edges)
    }

    fn is_connected(&self) -> bool {
        let n = self.vertices.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in self.neighbours(v) {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    count += 1;
                    stack.push(w as usize);
                }
            }
        }
        count == n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Point {
        self.vertices[i]
    }

    pub fn index_of(&self, p: Point) -> Option<usize> {
        if !self.bbox.contains(p) {
            return None;
        }
        let k = self.lookup[self.bbox.local_index(p)];
        (k != u32::MAX).then_some(k as usize)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.index_of(p).is_some()
    }

    #[inline]
    pub fn neighbours(&self, v: usize) -> &[u32] {
        &self.nbrs[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn neighbour_weights(&self, v: usize) -> &[f64] {
        &self.weights[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn neighbour_edges(&self, v: usize) -> &[u32] {
        &self.edge_ids[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Endpoints `(x, y)` of edge `id`, with `x < y`.
    pub fn edge(&self, id: usize) -> (usize, usize) {
        let (a, b) = self.edges[id];
        (a as usize, b as usize)
    }

    pub fn edge_weight(&self, id: usize) -> f64 {
        self.edge_weights[id]
    }

    pub fn edge_between(&self, v: usize, w: usize) -> Option<usize> {
        self.neighbours(v).iter().position(|&u| u as usize == w).map(|k| self.neighbour_edges(v)[k] as usize)
    }

    pub fn edge_of_points(&self, x: Point, y: Point) -> Option<usize> {
        self.edge_between(self.index_of(x)?, self.index_of(y)?)
    }

    /// Weighted degree `Σ_y a(x, y)`.
    pub fn degree(&self, v: usize) -> f64 {
        self.neighbour_weights(v).iter().sum()
    }
}

/// The largest open component of `region` as a graph; ties go to the
/// component containing the lexicographically smallest vertex.
pub fn maximal_cluster(env: &Environment, region: &AxisBox) -> Result<ClusterGraph> {
    if region.is_empty() {
        return Err(Error::Precondition("empty region".into()));
    }
    let comps = Components::compute(env, region)?;
    let best = comps.largest().ok_or_else(|| Error::EmptyCluster("empty region".into()))?;
    if comps.sizes[best] < 2 {
        return Err(Error::EmptyCluster(format!("region {:?}..{:?} has no open bond", region.lo, region.hi)));
    }
    ClusterGraph::from_members(env, comps.members(best))
}

fn check_in_box(env: &Environment, cube: &TriadicCube) -> Result<()> {
    if cube.dim != env.dim() || !env.lattice().as_axis_box().contains_box(&cube.as_box()) {
        return Err(Error::Bounds(format!("cube {cube} not inside the box")));
    }
    Ok(())
}

pub fn is_crossable(env: &Environment, cube: &TriadicCube) -> Result<bool> {
    check_in_box(env, cube)?;
    Ok(Components::compute(env, &cube.as_box())?.crossable())
}

/// Vertices of the largest cluster inside `cube` meeting all `2d` faces.
pub fn crossing_cluster(env: &Environment, cube: &TriadicCube) -> Result<Option<Vec<Point>>> {
    check_in_box(env, cube)?;
    let comps = Components::compute(env, &cube.as_box())?;
    Ok(comps.crossing_component().map(|c| comps.members(c)))
}

/// Family of sub-cubes tested in the well-connectedness predicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CheckDensity {
    /// Sizes `⌈S/10⌉ k`, `k = 1..5`, rounded up to odd and capped at the largest
    /// odd side `≤ S/2`, anchored on a grid of
    /// spacing `⌈S/10⌉` plus the flush last position.
    #[default]
    Grid,
    /// Every odd size in `[⌈S/10⌉, ⌊S/2⌋]` at every position. Allowed for `S ≤ 27`.
    Exhaustive,
}

fn sub_cube_sizes(s: i64, density: CheckDensity) -> Vec<i64> {
    // cubes have odd side length
    let lo = (s + 9) / 10;
    let hi = s / 2;
    let odd_hi = if hi % 2 == 1 { hi } else { hi - 1 };
    let mut v: Vec<i64> = match density {
        CheckDensity::Exhaustive => (lo..=hi).filter(|k| k % 2 == 1).collect(),
        CheckDensity::Grid => (1..=5)
            .map(|k| {
                let c = lo * k;
                if c % 2 == 1 { c } else { c + 1 }
            })
            .map(|c| c.min(odd_hi))
            .filter(|&c| c >= lo)
            .collect(),
    };
    v.sort();
    v.dedup();
    v
}

fn anchors(lo: i64, hi: i64, side: i64, step: i64) -> Vec<i64> {
    let last = hi - side + 1;
    let mut v: Vec<i64> = (0..).map(|j| lo + j * step).take_while(|&a| a <= last).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// Sub-cubes `□'` (as boxes) of the tested family that meet `¾□`.
pub fn tested_sub_cubes(cube: &TriadicCube, density: CheckDensity) -> Vec<AxisBox> {
    let s = cube.size();
    let bx = cube.as_box();
    let three_quarter = cube.dilated_box(3, 4);
    let step = match density {
        CheckDensity::Grid => (s + 9) / 10,
        CheckDensity::Exhaustive => 1,
    };
    let d = cube.dim;
    let mut out = Vec::new();
    for side in sub_cube_sizes(s, density) {
        let per_axis: Vec<Vec<i64>> = (0..d).map(|i| anchors(bx.lo.0[i], bx.hi.0[i], side, step)).collect();
        let counts: Vec<usize> = per_axis.iter().map(|v| v.len()).collect();
        let total: usize = counts.iter().product();
        for mut k in 0..total {
            let mut lo = Point::ORIGIN;
            for i in (0..d).rev() {
                lo.0[i] = per_axis[i][k % counts[i]];
                k /= counts[i];
            }
            let mut hi = lo;
            for i in 0..d {
                hi.0[i] += side - 1;
            }
            let sub = AxisBox::new(d, lo, hi);
            if sub.intersects(&three_quarter) {
                out.push(sub);
            }
        }
    }
    out
}

/// The well-connectedness predicate. Requires `size ≥ 3`.
pub fn is_well_connected(env: &Environment, cube: &TriadicCube, density: CheckDensity) -> Result<bool> {
    check_in_box(env, cube)?;
    if cube.size() < 3 {
        return Err(Error::Precondition(format!("well-connectedness needs size ≥ 3, got {}", cube.size())));
    }
    if density == CheckDensity::Exhaustive && cube.size() > 27 {
        return Err(Error::Precondition("exhaustive sub-cube family limited to size ≤ 27".into()));
    }
    well_connected_unchecked(env, cube, density)
}

fn well_connected_unchecked(env: &Environment, cube: &TriadicCube, density: CheckDensity) -> Result<bool> {
    let bx = cube.as_box();
    let comps = Components::compute(env, &bx)?;
    let Some(c) = comps.crossing_component() else {
        return Ok(false);
    };
    let in_c: Vec<bool> = comps.label.iter().map(|&l| l as usize == c).collect();
    let min_extent = (cube.size() + 9) / 10;
    for sub in tested_sub_cubes(cube, density) {
        let sc = Components::compute(env, &sub)?;
        if !sc.crossable() {
            return Ok(false);
        }
        let mut touches = vec![false; sc.count()];
        for (p, &l) in sub.points().zip(sc.label.iter()) {
            if in_c[bx.local_index(p)] {
                touches[l as usize] = true;
            }
        }
        if (0..sc.count()).any(|k| sc.extent(k) >= min_extent && !touches[k]) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Size ≥ 3, well-connected, and every successor well-connected. Successors
/// of size 1 count as well-connected.
pub fn is_good(env: &Environment, cube: &TriadicCube) -> Result<bool> {
    is_good_with(env, cube, CheckDensity::Grid)
}

pub fn is_good_with(env: &Environment, cube: &TriadicCube, density: CheckDensity) -> Result<bool> {
    check_in_box(env, cube)?;
    if cube.size() < 3 {
        return Ok(false);
    }
    if !well_connected_unchecked(env, cube, density)? {
        return Ok(false);
    }
    if cube.scale == 1 {
        return Ok(true);
    }
    for s in cube.successors() {
        if !well_connected_unchecked(env, &s, density)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Goodness of every triadic cube inside the box, at every scale.
#[derive(Clone, Debug)]
pub struct GoodnessMap {
    pub dim: usize,
    pub top: u32,
    well_connected: Vec<Vec<bool>>,
    good: Vec<Vec<bool>>,
}

impl GoodnessMap {
    pub fn compute(env: &Environment, density: CheckDensity) -> Result<Self> {
        let dim = env.dim();
        let top = env.lattice().scale;
        let mut well_connected = Vec::with_capacity(top as usize + 1);
        for n in 0..=top {
            let cubes = cubes_at_scale(dim, top, n);
            let wc: Vec<bool> = if n == 0 {
                vec![true; cubes.len()]
            } else {
                cubes
                    .par_iter()
                    .map(|c| well_connected_unchecked(env, c, density))
                    .collect::<Result<Vec<bool>>>()?
            };
            well_connected.push(wc);
        }
        let mut good = Vec::with_capacity(top as usize + 1);
        for n in 0..=top {
            let cubes = cubes_at_scale(dim, top, n);
            let g: Vec<bool> = cubes
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    n >= 1
                        && well_connected[n as usize][k]
                        && c.successors().iter().all(|s| well_connected[n as usize - 1][grid_index(top, s)])
                })
                .collect();
            good.push(g);
        }
        Ok(GoodnessMap { dim, top, well_connected, good })
    }

    /// Map with every cube of scale ≥ 1 good; used as a test fixture.
    pub fn all_good(dim: usize, top: u32) -> Self {
        let wc: Vec<Vec<bool>> = (0..=top).map(|n| vec![true; cubes_at_scale(dim, top, n).len()]).collect();
        let good = (0..=top).map(|n| vec![n >= 1; cubes_at_scale(dim, top, n).len()]).collect();
        GoodnessMap { dim, top, well_connected: wc, good }
    }

    pub fn is_good(&self, cube: &TriadicCube) -> bool {
        self.good[cube.scale as usize][grid_index(self.top, cube)]
    }

    pub fn is_well_connected(&self, cube: &TriadicCube) -> bool {
        self.well_connected[cube.scale as usize][grid_index(self.top, cube)]
    }

    pub fn set_good(&mut self, cube: &TriadicCube, value: bool) {
        let k = grid_index(self.top, cube);
        self.good[cube.scale as usize][k] = value;
    }

    /// Fraction of good cubes at scale `n`.
    pub fn good_fraction(&self, n: u32) -> f64 {
        let g = &self.good[n as usize];
        g.iter().filter(|&&b| b).count() as f64 / g.len() as f64
    }

    pub fn cubes(&self, n: u32) -> Vec<TriadicCube> {
        cubes_at_scale(self.dim, self.top, n)
    }

    /// CSV rows `scale,c1,..,cd,good`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let coords = ["x", "y", "z"];
        writeln!(w, "scale,{},good", coords[..self.dim].join(","))?;
        for n in 0..=self.top {
            for (k, c) in self.cubes(n).iter().enumerate() {
                let cs: Vec<String> = c.center.coords(self.dim).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{},{}", n, cs.join(","), self.good[n as usize][k] as u8)?;
            }
        }
        Ok(())
    }
}

/// Cubes of scale `n` inside `□_top`, in lexicographic order of centers.
pub fn cubes_at_scale(dim: usize, top: u32, n: u32) -> Vec<TriadicCube> {
    let k = (pow3(top - n) - 1) / 2;
    let step = pow3(n);
    AxisBox::ball(dim, Point::ORIGIN, k)
        .points()
        .map(|p| TriadicCube { dim, scale: n, center: p.scale(step) })
        .collect()
}

/// Position of `cube` in [`cubes_at_scale`] order.
pub fn grid_index(top: u32, cube: &TriadicCube) -> usize {
    let k = (pow3(top - cube.scale) - 1) / 2;
    let step = pow3(cube.scale);
    let grid = AxisBox::ball(cube.dim, Point::ORIGIN, k);
    let mut p = Point::ORIGIN;
    for i in 0..cube.dim {
        p.0[i] = cube.center.0[i] / step;
    }
    grid.local_index(p)
}
