//! The partition of the box into good triadic cubes, cell representatives,
//! coarsening, and the mollified coarse field.
//!
//! Construction: for a cube `□` of scale `n`, `A(□)` holds when for every
//! scale `m ≥ n` up to the box scale, all triadic cubes of scale `m` within
//! distance `k 3^m` of the ancestor of `□` at scale `m` are good (cubes outside
//! the box are ignored). The scale of `x` is the least `n ≥ 1` with
//! `A(□_n(x))`. The maximal cubes among `□_{n(x)}(x)` form the provisional
//! cells; small cells next to much larger ones are then merged into ancestors
//! until neighbouring sizes are comparable, and the result is verified.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::{GridField, GridGeometry};
use crate::env::{EdgeRef, Environment};
use crate::error::{Error, Result};
use crate::geometry::{grid_index, CheckDensity, ClusterGraph, Components, GoodnessMap, TriadicCube};
use crate::lattice::{pow3, AxisBox, LatticeBox, Point};
use crate::solver::{LatticeFunction, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptions {
    /// Neighbourhood factor `k` in the construction.
    pub neighbourhood: i64,
    pub density: CheckDensity,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        PartitionOptions { neighbourhood: 1, density: CheckDensity::Grid }
    }
}

#[derive(Clone, Debug)]
pub struct Partition {
    dim: usize,
    lattice: LatticeBox,
    cells: Vec<TriadicCube>,
    /// Cell id of every box vertex.
    cell_index: Vec<u32>,
    representatives: Vec<Point>,
    /// True for vertices in the maximal crossing cluster of their own cell.
    in_crossing: Vec<bool>,
}

/// Builds the partition with default options.
pub fn build_partition(env: &Environment) -> Result<Partition> {
    let map = GoodnessMap::compute(env, CheckDensity::Grid)?;
    build_partition_with(env, &map, &PartitionOptions::default())
}

pub fn build_partition_with(env: &Environment, map: &GoodnessMap, opts: &PartitionOptions) -> Result<Partition> {
    let lattice = *env.lattice();
    let dim = lattice.dim;
    let top = lattice.scale;
    if top < 1 {
        return Err(Error::Config("partition needs box scale ≥ 1".into()));
    }
    let root = TriadicCube::origin(dim, top);
    if !map.is_good(&root) {
        return Err(Error::Unresolvable(vec![root]));
    }
    let admissible = admissible_cubes(map, dim, top, opts.neighbourhood);

    // Top-down: emit a cube when some child fails `A` (or at scale 1).
    let mut cells = Vec::new();
    let mut stack = vec![root];
    while let Some(c) = stack.pop() {
        let children = c.successors();
        let emit = c.scale == 1 || children.iter().any(|s| !admissible[s.scale as usize][grid_index(top, s)]);
        if emit {
            cells.push(c);
        } else {
            stack.extend(children);
        }
    }
    let cells = repair(cells, &lattice);
    assemble(env, map, cells)
}

/// `A(□)` for every cube, per scale.
fn admissible_cubes(map: &GoodnessMap, dim: usize, top: u32, k: i64) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = vec![Vec::new(); top as usize + 1];
    for n in (0..=top).rev() {
        let cubes = map.cubes(n);
        let row: Vec<bool> = cubes
            .iter()
            .map(|c| {
                if n == 0 {
                    return false;
                }
                let near_ok = neighbours_within(c, k, top).iter().all(|c2| map.is_good(c2));
                let up_ok = n == top || out[n as usize + 1][grid_index(top, &c.predecessor())];
                near_ok && up_ok
            })
            .collect();
        out[n as usize] = row;
    }
    let _ = dim;
    out
}

/// Cubes of the same scale whose point sets lie within `k 3^n` of `c`, inside `□_top`.
fn neighbours_within(c: &TriadicCube, k: i64, top: u32) -> Vec<TriadicCube> {
    let step = c.size();
    let lim = (pow3(top) - 1) / 2;
    AxisBox::ball(c.dim, Point::ORIGIN, k)
        .points()
        .map(|o| TriadicCube { dim: c.dim, scale: c.scale, center: c.center.add(o.scale(step)) })
        .filter(|c2| (0..c.dim).all(|i| c2.center.0[i].abs() <= lim))
        .collect()
}

fn fill_index(cells: &[TriadicCube], lattice: &LatticeBox) -> Vec<u32> {
    let mut idx = vec![u32::MAX; lattice.num_vertices()];
    for (k, c) in cells.iter().enumerate() {
        for p in c.as_box().points() {
            idx[lattice.index(p)] = k as u32;
        }
    }
    idx
}

/// Pairs of cell ids at ℓ∞ distance ≤ 1, via vertex neighbourhoods.
fn for_each_adjacent(cells: &[TriadicCube], idx: &[u32], lattice: &LatticeBox, mut f: impl FnMut(usize, usize)) {
    let d = lattice.dim;
    let offsets: Vec<Point> = AxisBox::ball(d, Point::ORIGIN, 1).points().filter(|o| *o > Point::ORIGIN).collect();
    let _ = cells;
    for v in 0..lattice.num_vertices() {
        let p = lattice.point(v);
        for o in &offsets {
            let q = p.add(*o);
            if lattice.contains(q) {
                let (a, b) = (idx[v] as usize, idx[lattice.index(q)] as usize);
                if a != b {
                    f(a, b);
                }
            }
        }
    }
}

/// Merges small cells into ancestors until neighbouring sizes are within a
/// factor 3. Ancestors of admissible cells are good, so (i) is preserved, and
/// the single-cell partition is a fixed point, so the loop terminates.
fn repair(mut cells: Vec<TriadicCube>, lattice: &LatticeBox) -> Vec<TriadicCube> {
    loop {
        let idx = fill_index(&cells, lattice);
        let mut merge_to: Vec<Option<u32>> = vec![None; cells.len()];
        for_each_adjacent(&cells, &idx, lattice, |a, b| {
            let (sa, sb) = (cells[a].scale, cells[b].scale);
            let (small, big) = if sa < sb { (a, sb) } else { (b, sa) };
            if big > cells[small].scale + 1 {
                let target = big - 1;
                merge_to[small] = Some(merge_to[small].map_or(target, |t| t.max(target)));
            }
        });
        if merge_to.iter().all(|m| m.is_none()) {
            break;
        }
        let mut merged: Vec<TriadicCube> = Vec::new();
        for (c, m) in cells.iter().zip(&merge_to) {
            if let Some(target) = m {
                let mut a = *c;
                while a.scale < *target {
                    a = a.predecessor();
                }
                merged.push(a);
            }
        }
        merged.sort();
        merged.dedup();
        // drop merged cubes contained in other merged cubes, then cells they swallow
        let keep: Vec<TriadicCube> =
            merged.iter().copied().filter(|m| !merged.iter().any(|o| o != m && o.contains_cube(m))).collect();
        cells.retain(|c| !keep.iter().any(|m| m.contains_cube(c)));
        cells.extend(keep);
    }
    cells.sort();
    cells
}

fn assemble(env: &Environment, map: &GoodnessMap, cells: Vec<TriadicCube>) -> Result<Partition> {
    let lattice = *env.lattice();
    let cell_index = fill_index(&cells, &lattice);
    let mut representatives = Vec::with_capacity(cells.len());
    let mut in_crossing = vec![false; lattice.num_vertices()];
    for c in &cells {
        let comps = Components::compute(env, &c.as_box())?;
        let Some(cc) = comps.crossing_component() else {
            return Err(Error::Construction(format!("cell {c} has no crossing cluster")));
        };
        let mut best: Option<(i64, Point)> = None;
        for (p, &l) in c.as_box().points().zip(&comps.label) {
            if l as usize == cc {
                in_crossing[lattice.index(p)] = true;
                let dist = p.sub(c.center).l1();
                // points are visited in lexicographic order, so strict < keeps the smallest on ties
                if best.is_none_or(|(d0, _)| dist < d0) {
                    best = Some((dist, p));
                }
            }
        }
        representatives.push(best.map(|b| b.1).unwrap_or(c.center));
    }
    let part = Partition { dim: lattice.dim, lattice, cells, cell_index, representatives, in_crossing };
    let violations = verify(&part, map);
    if !violations.is_empty() {
        return Err(Error::Construction(format!("{} invariant violation(s), first: {}", violations.len(), violations[0])));
    }
    Ok(part)
}

/// A failed partition invariant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    Overlap { point: Point },
    Uncovered { point: Point },
    LookupMismatch { point: Point },
    CellTooSmall { cell: TriadicCube },
    CellNotGood { cell: TriadicCube },
    AncestorNotGood { cell: TriadicCube, ancestor: TriadicCube },
    SizeJump { a: TriadicCube, b: TriadicCube },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Overlap { point } => write!(f, "{point} covered twice"),
            Violation::Uncovered { point } => write!(f, "{point} not covered"),
            Violation::LookupMismatch { point } => write!(f, "lookup at {point} disagrees with cell list"),
            Violation::CellTooSmall { cell } => write!(f, "cell {cell} has scale 0"),
            Violation::CellNotGood { cell } => write!(f, "cell {cell} is not good"),
            Violation::AncestorNotGood { cell, ancestor } => write!(f, "ancestor {ancestor} of {cell} is not good"),
            Violation::SizeJump { a, b } => write!(f, "neighbours {a} and {b} differ by more than 3x"),
        }
    }
}

/// Checks every partition invariant from scratch against `map`: exact
/// cover, lookup consistency, scale ≥ 1, cells and strict ancestors good,
/// and neighbouring sizes within a factor 3.
pub fn verify(p: &Partition, map: &GoodnessMap) -> Vec<Violation> {
    let lat = &p.lattice;
    let mut out = Vec::new();
    let mut cover = vec![0u32; lat.num_vertices()];
    let bx = lat.as_axis_box();
    for (k, c) in p.cells.iter().enumerate() {
        if !bx.contains_box(&c.as_box()) {
            out.push(Violation::Uncovered { point: c.center });
            continue;
        }
        for q in c.as_box().points() {
            let v = lat.index(q);
            cover[v] += 1;
            if p.cell_index[v] as usize != k {
                out.push(Violation::LookupMismatch { point: q });
            }
        }
        if c.scale == 0 {
            out.push(Violation::CellTooSmall { cell: *c });
            continue;
        }
        if !map.is_good(c) {
            out.push(Violation::CellNotGood { cell: *c });
        }
        let mut a = *c;
        while a.scale < lat.scale {
            a = a.predecessor();
            if !map.is_good(&a) {
                out.push(Violation::AncestorNotGood { cell: *c, ancestor: a });
            }
        }
    }
    for (v, &n) in cover.iter().enumerate() {
        match n {
            0 => out.push(Violation::Uncovered { point: lat.point(v) }),
            1 => {}
            _ => out.push(Violation::Overlap { point: lat.point(v) }),
        }
    }
    if out.is_empty() {
        let mut seen = std::collections::HashSet::new();
        for_each_adjacent(&p.cells, &p.cell_index, lat, |a, b| {
            let (sa, sb) = (p.cells[a].size(), p.cells[b].size());
            if (sa > 3 * sb || sb > 3 * sa) && seen.insert((a.min(b), a.max(b))) {
                out.push(Violation::SizeJump { a: p.cells[a], b: p.cells[b] });
            }
        });
    }
    out
}

impl Partition {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lattice(&self) -> &LatticeBox {
        &self.lattice
    }

    pub fn cells(&self) -> &[TriadicCube] {
        &self.cells
    }

    pub fn representatives(&self) -> &[Point] {
        &self.representatives
    }

    pub fn cell_id(&self, x: Point) -> Result<usize> {
        Ok(self.cell_index[self.lattice.try_index(x)?] as usize)
    }

    /// Whether `x` belongs to the maximal crossing cluster of its cell.
    pub fn in_crossing_cluster(&self, x: Point) -> Result<bool> {
        Ok(self.in_crossing[self.lattice.try_index(x)?])
    }

    /// Flat cell-id array over the box in vertex-index order.
    pub fn lookup(&self) -> &[u32] {
        &self.cell_index
    }

    /// Size of the cell containing each box vertex.
    pub fn size_field(&self) -> Vec<i64> {
        self.cell_index.iter().map(|&k| self.cells[k as usize].size()).collect()
    }

    /// Replaces the cell list, keeping the lookup stale; for negative-control tests.
    pub fn with_cells_unchecked(&self, cells: Vec<TriadicCube>) -> Partition {
        Partition { cells, ..self.clone() }
    }

    /// A stable fingerprint of the cell list.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in &self.cells {
            for v in [c.scale as i64, c.center.0[0], c.center.0[1], c.center.0[2]] {
                h = crate::env::splitmix64(h ^ v as u64);
            }
        }
        h
    }

    /// CSV rows `scale,center..,rep..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim;
        let names = ["x", "y", "z"];
        let cs: Vec<String> = names[..d].iter().map(|n| format!("c{n}")).collect();
        let rs: Vec<String> = names[..d].iter().map(|n| format!("r{n}")).collect();
        writeln!(w, "scale,{},{}", cs.join(","), rs.join(","))?;
        for (c, r) in self.cells.iter().zip(&self.representatives) {
            let a: Vec<String> = c.center.coords(d).iter().map(|v| v.to_string()).collect();
            let b: Vec<String> = r.coords(d).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", c.scale, a.join(","), b.join(","))?;
        }
        Ok(())
    }

    /// Cell-lookup export: one cell id per line in vertex-index order.
    pub fn write_lookup<W: Write>(&self, mut w: W) -> Result<()> {
        for k in &self.cell_index {
            writeln!(w, "{k}")?;
        }
        Ok(())
    }
}

/// The cell `□_P(x)`.
pub fn cell_of(p: &Partition, x: Point) -> Result<TriadicCube> {
    Ok(p.cells[p.cell_id(x)?])
}

/// The representative `z̄(□)` of a cell.
pub fn representative(p: &Partition, cube: &TriadicCube) -> Result<Point> {
    let k = p.cells.binary_search(cube).map_err(|_| Error::Precondition(format!("{cube} is not a cell")))?;
    Ok(p.representatives[k])
}

/// `[u]_P` sampled on every box vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseFunction {
    pub lattice: LatticeBox,
    pub values: Vec<f64>,
    /// Fingerprint of the source partition.
    pub partition: u64,
}

impl CoarseFunction {
    pub fn at(&self, x: Point) -> Result<f64> {
        Ok(self.values[self.lattice.try_index(x)?])
    }

    /// Lattice gradient over all box bonds, `f(x) - f(x + e_k)`, indexed as
    /// environment bonds (`vertex * d + k`, zero for absent bonds).
    pub fn bond_gradient(&self) -> Vec<f64> {
        let d = self.lattice.dim;
        let mut g = vec![0.0; self.values.len() * d];
        for v in 0..self.values.len() {
            for k in 0..d {
                if let Some(w) = self.lattice.forward(v, k) {
                    g[v * d + k] = self.values[v] - self.values[w];
                }
            }
        }
        g
    }
}

/// `[u]_P(x) = u(z̄(□_P(x)))` for `u` given on the vertices of `g`.
pub fn coarsen(p: &Partition, g: &ClusterGraph, u: &LatticeFunction) -> Result<CoarseFunction> {
    if u.len() != g.len() {
        return Err(Error::Data("function length does not match the cluster".into()));
    }
    let mut rep_vals = Vec::with_capacity(p.cells.len());
    for (c, z) in p.cells.iter().zip(&p.representatives) {
        let i = g.index_of(*z).ok_or_else(|| Error::Data(format!("representative {z} of {c} is not on the cluster")))?;
        rep_vals.push(u.values[i]);
    }
    let values = p.cell_index.iter().map(|&k| rep_vals[k as usize]).collect();
    Ok(CoarseFunction { lattice: p.lattice, values, partition: p.fingerprint() })
}

/// As [`coarsen`], but only cells meeting `window` need a representative on
/// `g`; every other vertex gets 0.
pub fn coarsen_within(p: &Partition, g: &ClusterGraph, u: &LatticeFunction, window: &AxisBox) -> Result<CoarseFunction> {
    if u.len() != g.len() {
        return Err(Error::Data("function length does not match the cluster".into()));
    }
    let mut rep_vals = vec![0.0; p.cells.len()];
    for (k, (c, z)) in p.cells.iter().zip(&p.representatives).enumerate() {
        if !c.as_box().intersects(window) {
            continue;
        }
        let i = g.index_of(*z).ok_or_else(|| Error::Data(format!("representative {z} of {c} is not on the cluster")))?;
        rep_vals[k] = u.values[i];
    }
    let values = p.cell_index.iter().map(|&k| rep_vals[k as usize]).collect();
    Ok(CoarseFunction { lattice: p.lattice, values, partition: p.fingerprint() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum KernelFamily {
    /// `exp(-1 / (1 - 4t²))`, smooth with compact support.
    SmoothBump,
    /// `(1 - 4t²)^k`.
    PolynomialBump { power: u32 },
    /// `exp(-t² / (2σ²))` cut at `|t| = ½`.
    TruncatedGaussian { sigma: f64 },
}

/// Product kernel `η(x) = Π η₁(x_i)` supported in the ℓ∞ ball of radius ½.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub family: KernelFamily,
    pub radius: f64,
    /// Quadrature resolution of the tabulated one-dimensional CDF.
    pub resolution: f64,
}

impl Default for MollifierSpec {
    fn default() -> Self {
        MollifierSpec { family: KernelFamily::SmoothBump, radius: 0.5, resolution: 1.0 / 64.0 }
    }
}

const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Normalized one-dimensional profile with tabulated CDF.
#[derive(Clone, Debug)]
pub struct Kernel1d {
    family: KernelFamily,
    norm: f64,
    step: f64,
    cdf: Vec<f64>,
}

impl Kernel1d {
    pub fn new(spec: &MollifierSpec) -> Result<Self> {
        if (spec.radius - 0.5).abs() > 1e-15 {
            return Err(Error::Config("mollifier support radius must be 1/2".into()));
        }
        if !(spec.resolution > 0.0 && spec.resolution <= 0.25) {
            return Err(Error::Config(format!("quadrature resolution {} not in (0, 1/4]", spec.resolution)));
        }
        if let KernelFamily::TruncatedGaussian { sigma } = spec.family {
            if !(sigma > 0.0) {
                return Err(Error::Config("gaussian width must be positive".into()));
            }
        }
        let n = (1.0 / spec.resolution).ceil() as usize;
        let step = 1.0 / n as f64;
        let mut k = Kernel1d { family: spec.family, norm: 1.0, step, cdf: vec![0.0; n + 1] };
        for j in 0..n {
            let a = -0.5 + j as f64 * step;
            let mut s = 0.0;
            // four sub-panels of Gauss-Legendre per table interval
            for q in 0..4 {
                let lo = a + q as f64 * step / 4.0;
                let half = step / 8.0;
                s += GL5.iter().map(|(x, w)| w * half * k.raw(lo + half * (1.0 + x))).sum::<f64>();
            }
            k.cdf[j + 1] = k.cdf[j] + s;
        }
        let total = k.cdf[n];
        k.norm = 1.0 / total;
        k.cdf.iter_mut().for_each(|c| *c /= total);
        Ok(k)
    }

    fn raw(&self, t: f64) -> f64 {
        if t.abs() >= 0.5 {
            return 0.0;
        }
        let s = 1.0 - 4.0 * t * t;
        match self.family {
            KernelFamily::SmoothBump => (-1.0 / s).exp(),
            KernelFamily::PolynomialBump { power } => s.powi(power as i32),
            KernelFamily::TruncatedGaussian { sigma } => (-t * t / (2.0 * sigma * sigma)).exp(),
        }
    }

    /// Normalized density `η₁(t)`.
    pub fn density(&self, t: f64) -> f64 {
        self.raw(t) * self.norm
    }

    /// `∫_{-∞}^t η₁`, by cubic Hermite interpolation of the table.
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= -0.5 {
            return 0.0;
        }
        if t >= 0.5 {
            return 1.0;
        }
        let n = self.cdf.len() - 1;
        let u = (t + 0.5) / self.step;
        let j = (u.floor() as usize).min(n - 1);
        let s = u - j as f64;
        let x0 = -0.5 + j as f64 * self.step;
        let (y0, y1) = (self.cdf[j], self.cdf[j + 1]);
        let (d0, d1) = (self.density(x0) * self.step, self.density(x0 + self.step) * self.step);
        let h00 = 2.0 * s * s * s - 3.0 * s * s + 1.0;
        let h10 = s * s * s - 2.0 * s * s + s;
        let h01 = -2.0 * s * s * s + 3.0 * s * s;
        let h11 = s * s * s - s * s;
        h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1
    }
}

/// Values and gradients of `(piecewise-constant extension of f) * η` at the
/// points of `grid`. The extension is constant on `z + [-½, ½)^d`.
pub fn mollify(f: &CoarseFunction, spec: &MollifierSpec, grid: &GridGeometry) -> Result<(GridField, GridField)> {
    let k = Kernel1d::new(spec)?;
    let lat = f.lattice;
    let d = lat.dim;
    if grid.dim != d {
        return Err(Error::Config("grid dimension mismatch".into()));
    }
    let lim = (lat.half() - 1) as f64;
    for i in 0..d {
        let lo = grid.origin[i];
        let hi = grid.origin[i] + grid.spacing * (grid.counts[i] as f64 - 1.0);
        if lo < -lim || hi > lim {
            return Err(Error::Bounds(format!("sample grid reaches the box boundary along axis {i}")));
        }
    }
    let n = grid.len();
    let mut vals = vec![0.0; n];
    let mut grads = vec![0.0; n * d];
    for s in 0..n {
        let x = grid.point(s);
        // base lattice points z with |x_i - z_i| < 1
        let mut base = [0i64; 3];
        for i in 0..d {
            base[i] = x[i].floor() as i64;
        }
        let corners = 1usize << d;
        for mask in 0..corners {
            let mut z = Point::ORIGIN;
            let mut w = [0.0; 3];
            let mut dw = [0.0; 3];
            for i in 0..d {
                z.0[i] = base[i] + ((mask >> i) & 1) as i64;
                let t = x[i] - z.0[i] as f64;
                w[i] = k.cdf(t + 0.5) - k.cdf(t - 0.5);
                dw[i] = k.density(t + 0.5) - k.density(t - 0.5);
            }
            let fz = f.values[lat.index(z)];
            let prod: f64 = w[..d].iter().product();
            vals[s] += fz * prod;
            for i in 0..d {
                let mut g = dw[i];
                for j in 0..d {
                    if j != i {
                        g *= w[j];
                    }
                }
                grads[s * d + i] += fz * g;
            }
        }
    }
    Ok((GridField::new(grid.clone(), 1, vals)?, GridField::new(grid.clone(), d, grads)?))
}

/// Maximal crossing cluster of a cube as a vertex list.
fn crossing_members(env: &Environment, cube: &TriadicCube) -> Result<Vec<Point>> {
    let comps = Components::compute(env, &cube.as_box())?;
    let c = comps.crossing_component().ok_or_else(|| Error::Topology(format!("{cube} has no crossing cluster")))?;
    Ok(comps.members(c))
}

fn weighted_sums(
    env: &Environment,
    p: &Partition,
    g: &ClusterGraph,
    cube: &TriadicCube,
    mut f: impl FnMut(Point, usize, i64) -> (f64, f64),
) -> Result<f64> {
    let members = crossing_members(env, cube)?;
    let (mut num, mut den) = (0.0, 0.0);
    for x in members {
        let Some(i) = g.index_of(x) else { continue };
        let size = cell_of(p, x)?.size();
        let (a, b) = f(x, i, size);
        num += a;
        den += b;
    }
    Ok(if num == 0.0 { 0.0 } else { num / den })
}

/// `Σ_{C_*(□)} |w - [w]_P|^s / Σ_{C_*(□)} size(□_P(x))^{sd} |∇w|^s(x)`, sums
/// restricted to vertices of `g`; `0/0` is reported as 0.
pub fn coarsening_ratio(env: &Environment, p: &Partition, g: &ClusterGraph, w: &LatticeFunction, cube: &TriadicCube, s: f64) -> Result<f64> {
    let coarse = coarsen(p, g, w)?;
    let grad = crate::solver::gradient(g, w)?;
    let mag = grad.magnitude(g);
    let d = p.dim as f64;
    weighted_sums(env, p, g, cube, |x, i, size| {
        let diff = (w.values[i] - coarse.values[p.lattice.index(x)]).abs().powf(s);
        (diff, (size as f64).powf(s * d) * mag.values[i].powf(s))
    })
}

/// `Σ_{C_*(□)} |∇[w]_P|^s / Σ_{C_*(□)} size(□_P(x))^{sd-1} |∇w|^s(x)`, where
/// `∇[w]_P` runs over all lattice bonds of the box.
pub fn gradient_coarsening_ratio(env: &Environment, p: &Partition, g: &ClusterGraph, w: &LatticeFunction, cube: &TriadicCube, s: f64) -> Result<f64> {
    let coarse = coarsen(p, g, w)?;
    let lat = p.lattice;
    let d = p.dim;
    let bond_grad = coarse.bond_gradient();
    let grad: VectorField = crate::solver::gradient(g, w)?;
    let mag = grad.magnitude(g);
    weighted_sums(env, p, g, cube, |x, i, size| {
        let v = lat.index(x);
        let mut sq = 0.0;
        for k in 0..d {
            sq += bond_grad[v * d + k].powi(2);
            if let Some(b) = lat.backward(v, k) {
                sq += bond_grad[b * d + k].powi(2);
            }
        }
        let coarse_mag = (0.5 * sq).sqrt();
        (coarse_mag.powf(s), (size as f64).powf(s * d as f64 - 1.0) * mag.values[i].powf(s))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarsenessStats {
    pub samples: usize,
    pub thresholds: Vec<f64>,
    /// Empirical `P[size(□_P(0)) > t]` for each threshold.
    pub exceedance: Vec<f64>,
    /// Per-sample minimal-scale proxy (scale `m`, `None` when never reached).
    pub minimal_scale: Vec<Option<u32>>,
}

/// Smallest `m` such that for every `m' ∈ [m, M]` the average of
/// `size(□_P(x))^t` over `□_{m'}` is at most `threshold` and the largest cell
/// meeting `□_{m'}` has size at most `3^{d m' / (d + t)}`.
pub fn minimal_scale_proxy(p: &Partition, t: f64, threshold: f64) -> Option<u32> {
    let lat = p.lattice;
    let d = p.dim as f64;
    let sizes = p.size_field();
    let ok = |m: u32| {
        let bx = TriadicCube::origin(p.dim, m).as_box();
        let (mut sum, mut mx, mut cnt) = (0.0, 0i64, 0usize);
        for q in bx.points() {
            let s = sizes[lat.index(q)];
            sum += (s as f64).powf(t);
            mx = mx.max(s);
            cnt += 1;
        }
        sum / cnt as f64 <= threshold && (mx as f64) <= 3f64.powf(d * m as f64 / (d + t)) + 1e-9
    };
    let mut best = None;
    for m in (1..=lat.scale).rev() {
        if ok(m) {
            best = Some(m);
        } else {
            break;
        }
    }
    best
}

/// Exceedance curve of `size(□_P(0))` and the minimal-scale proxy per sample.
pub fn coarseness_statistics(ensemble: &[Partition], thresholds: &[f64], t: f64, threshold: f64) -> Result<CoarsenessStats> {
    if ensemble.is_empty() {
        return Err(Error::Data("empty ensemble".into()));
    }
    let sizes: Vec<i64> = ensemble.iter().map(|p| cell_of(p, Point::ORIGIN).map(|c| c.size())).collect::<Result<_>>()?;
    let exceedance = thresholds
        .iter()
        .map(|&th| sizes.iter().filter(|&&s| s as f64 > th).count() as f64 / sizes.len() as f64)
        .collect();
    Ok(CoarsenessStats {
        samples: ensemble.len(),
        thresholds: thresholds.to_vec(),
        exceedance,
        minimal_scale: ensemble.iter().map(|p| minimal_scale_proxy(p, t, threshold)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub edge: EdgeRef,
    /// `size(□_P(x))` before resampling, with `x` the first endpoint.
    pub base_size: i64,
    /// Largest `size(□_{P'}(z)) / size(□_P(x))` over `z` within `C0 size(□_P(x))` of `x`.
    pub max_near_ratio: f64,
    /// Whether every vertex farther than `C0 size(□_P(x))` keeps its cell.
    pub far_equal: bool,
    pub changed_far: usize,
    pub passes: bool,
}

/// Compares the partitions before and after resampling `e`.
pub fn partition_resample_stability(env: &Environment, e: &EdgeRef, aux_seed: u64, c0: f64, c: f64) -> Result<StabilityReport> {
    let other = env.resample_edge(e, aux_seed)?;
    let p = build_partition(env)?;
    let q = build_partition(&other)?;
    Ok(compare_partitions(&p, &q, e, c0, c))
}

pub fn compare_partitions(p: &Partition, q: &Partition, e: &EdgeRef, c0: f64, c: f64) -> StabilityReport {
    let lat = p.lattice;
    let x = e.x;
    let base = p.cells[p.cell_index[lat.index(x)] as usize].size();
    let radius = c0 * base as f64;
    let (mut max_ratio, mut changed) = (0.0f64, 0usize);
    for v in 0..lat.num_vertices() {
        let z = lat.point(v);
        let a = p.cells[p.cell_index[v] as usize];
        let b = q.cells[q.cell_index[v] as usize];
        if (z.sub(x).linf() as f64) <= radius {
            max_ratio = max_ratio.max(b.size() as f64 / base as f64);
        } else if a != b {
            changed += 1;
        }
    }
    StabilityReport {
        edge: *e,
        base_size: base,
        max_near_ratio: max_ratio,
        far_equal: changed == 0,
        changed_far: changed,
        passes: changed == 0 && max_ratio <= c,
    }
}
