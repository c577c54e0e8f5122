//! Elliptic operators and solves on cluster graphs.
//!
//! Vector fields live on unordered edges, stored with the orientation
//! `x → y` where `x` is the lexicographically smaller endpoint; the value on
//! the reversed pair is the negative. Inner products of vector fields default
//! to sums over unordered edges; [`EdgeSum::Ordered`] counts each edge twice.
//!
//! With that default, `Σ_e a(e) ∇u(e) ∇v(e) = Σ_x u(x) (-∇·a∇v)(x)`, the
//! dipole problem `-∇·a∇G = δ_x - δ_y` gives `⟨∇G, a∇h⟩ = ∇h(x, y)`, and the
//! representation `∇w_ξ = Σ_e ξ(e) ∇G^e` sums each unordered edge once.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{EdgeRef, Environment};
use crate::error::{Error, Result};
use crate::geometry::{maximal_cluster, ClusterGraph};
use crate::lattice::{AxisBox, Point};

pub const DEFAULT_TOL: f64 = 1e-10;

/// One value per vertex of a [`ClusterGraph`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeFunction {
    pub values: Vec<f64>,
}

impl LatticeFunction {
    pub fn new(values: Vec<f64>) -> Self {
        LatticeFunction { values }
    }

    pub fn zeros(n: usize) -> Self {
        LatticeFunction { values: vec![0.0; n] }
    }

    pub fn from_fn(g: &ClusterGraph, f: impl Fn(Point) -> f64) -> Self {
        LatticeFunction { values: g.vertices().iter().map(|&p| f(p)).collect() }
    }

    /// The affine function `x ↦ p·x`.
    pub fn affine(g: &ClusterGraph, p: [f64; 3]) -> Self {
        Self::from_fn(g, |x| {
            let c = x.as_f64();
            p[0] * c[0] + p[1] * c[1] + p[2] * c[2]
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, g: &ClusterGraph, mut w: W) -> Result<()> {
        check_len(g.len(), self.len())?;
        let d = g.dim();
        writeln!(w, "{},value", ["x", "y", "z"][..d].join(","))?;
        for (p, v) in g.vertices().iter().zip(&self.values) {
            writeln!(w, "{},{v:e}", join_coords(*p, d))?;
        }
        Ok(())
    }
}

fn join_coords(p: Point, d: usize) -> String {
    p.coords(d).iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// One value per edge of a [`ClusterGraph`], oriented from the smaller endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeSum {
    /// Each unordered edge once.
    Unordered,
    /// Each edge in both orientations.
    Ordered,
}

impl VectorField {
    pub fn zeros(g: &ClusterGraph) -> Self {
        VectorField { values: vec![0.0; g.num_edges()] }
    }

    /// Value on the oriented pair `(v, w)` of vertex indices; zero when they
    /// are not joined by an edge of `g`.
    pub fn at(&self, g: &ClusterGraph, v: usize, w: usize) -> f64 {
        match g.edge_between(v, w) {
            Some(id) if v < w => self.values[id],
            Some(id) => -self.values[id],
            None => 0.0,
        }
    }

    /// Value on the canonical orientation of `e`; zero off the graph.
    pub fn at_edge(&self, g: &ClusterGraph, e: &EdgeRef) -> f64 {
        match (g.index_of(e.x), g.index_of(e.y)) {
            (Some(v), Some(w)) => self.at(g, v, w),
            _ => 0.0,
        }
    }

    pub fn inner(&self, other: &VectorField, sum: EdgeSum) -> f64 {
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        match sum {
            EdgeSum::Unordered => s,
            EdgeSum::Ordered => 2.0 * s,
        }
    }

    /// `|F|(x) = (½ Σ_{y∼x} F(x, y)²)^{1/2}`.
    pub fn magnitude(&self, g: &ClusterGraph) -> LatticeFunction {
        LatticeFunction::new(
            (0..g.len())
                .map(|v| {
                    let s: f64 = g.neighbour_edges(v).iter().map(|&id| self.values[id as usize].powi(2)).sum();
                    (0.5 * s).sqrt()
                })
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, g: &ClusterGraph, mut w: W) -> Result<()> {
        check_len(g.num_edges(), self.values.len())?;
        let d = g.dim();
        let names = ["x", "y", "z"];
        let xs: Vec<String> = names[..d].iter().map(|n| format!("{n}0")).collect();
        let ys: Vec<String> = names[..d].iter().map(|n| format!("{n}1")).collect();
        writeln!(w, "{},{},value", xs.join(","), ys.join(","))?;
        for (id, v) in self.values.iter().enumerate() {
            let (a, b) = g.edge(id);
            writeln!(w, "{},{},{v:e}", join_coords(g.vertex(a), d), join_coords(g.vertex(b), d))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub tolerance: f64,
    /// Threshold the residual was compared against: `tol (1 + ‖b‖)`.
    pub threshold: f64,
    pub unknowns: usize,
    pub converged: bool,
}

impl SolveReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    /// Overrides the default cap `20 √n + 500`.
    pub max_iter: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: DEFAULT_TOL, max_iter: None }
    }
}

impl SolveOptions {
    pub fn tol(tol: f64) -> Self {
        SolveOptions { tol, max_iter: None }
    }

    fn cap(&self, n: usize) -> usize {
        self.max_iter.unwrap_or(20 * (n as f64).sqrt().ceil() as usize + 500)
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Data(format!("length {got} does not match {expected}")));
    }
    Ok(())
}

/// `(-∇·a∇u)(x) = Σ_{y∼x} a(x, y) (u(x) - u(y))`.
pub fn apply_operator(g: &ClusterGraph, u: &LatticeFunction) -> Result<LatticeFunction> {
    check_len(g.len(), u.len())?;
    let out = (0..g.len())
        .map(|v| {
            let uv = u.values[v];
            g.neighbours(v).iter().zip(g.neighbour_weights(v)).map(|(&w, &a)| a * (uv - u.values[w as usize])).sum()
        })
        .collect();
    Ok(LatticeFunction::new(out))
}

pub fn gradient(g: &ClusterGraph, u: &LatticeFunction) -> Result<VectorField> {
    check_len(g.len(), u.len())?;
    Ok(VectorField {
        values: (0..g.num_edges())
            .map(|id| {
                let (x, y) = g.edge(id);
                u.values[x] - u.values[y]
            })
            .collect(),
    })
}

pub fn a_gradient(g: &ClusterGraph, u: &LatticeFunction) -> Result<VectorField> {
    let mut f = gradient(g, u)?;
    for (id, v) in f.values.iter_mut().enumerate() {
        *v *= g.edge_weight(id);
    }
    Ok(f)
}

/// `Σ_e a(e) ∇u(e) ∇v(e)` over unordered edges.
pub fn dirichlet_form(g: &ClusterGraph, u: &LatticeFunction, v: &LatticeFunction) -> Result<f64> {
    let gu = a_gradient(g, u)?;
    let gv = gradient(g, v)?;
    Ok(gu.inner(&gv, EdgeSum::Unordered))
}

/// Vertex loads `b(x) = Σ_{y∼x} ξ(x, y)`, the weak form of `-∇·ξ`.
pub fn divergence_loads(g: &ClusterGraph, xi: &VectorField) -> Result<LatticeFunction> {
    check_len(g.num_edges(), xi.values.len())?;
    let mut b = vec![0.0; g.len()];
    for (id, &v) in xi.values.iter().enumerate() {
        let (x, y) = g.edge(id);
        b[x] += v;
        b[y] -= v;
    }
    Ok(LatticeFunction::new(b))
}

/// Solves `-∇·a∇u = rhs` on the vertices outside `boundary`, with `u` fixed
/// to `boundary_values` on `boundary`, by Jacobi-preconditioned conjugate
/// gradients on the interior block. Rows of boundary vertices in `rhs` are
/// ignored.
pub fn solve_dirichlet(
    g: &ClusterGraph,
    boundary: &[usize],
    boundary_values: &[f64],
    rhs: &LatticeFunction,
    tol: f64,
) -> Result<(LatticeFunction, SolveReport)> {
    solve_dirichlet_with(g, boundary, boundary_values, rhs, SolveOptions::tol(tol))
}

pub fn solve_dirichlet_with(
    g: &ClusterGraph,
    boundary: &[usize],
    boundary_values: &[f64],
    rhs: &LatticeFunction,
    opts: SolveOptions,
) -> Result<(LatticeFunction, SolveReport)> {
    check_len(g.len(), rhs.len())?;
    check_len(boundary.len(), boundary_values.len())?;
    if boundary.is_empty() {
        return Err(Error::Precondition("empty Dirichlet boundary".into()));
    }
    let n = g.len();
    let mut fixed = vec![false; n];
    let mut u = vec![0.0; n];
    for (&v, &val) in boundary.iter().zip(boundary_values) {
        if v >= n {
            return Err(Error::Bounds(format!("boundary vertex {v} out of range")));
        }
        fixed[v] = true;
        u[v] = val;
    }
    let interior: Vec<usize> = (0..n).filter(|&v| !fixed[v]).collect();
    let m = interior.len();
    if m == 0 {
        let report = SolveReport { iterations: 0, residual: 0.0, tolerance: opts.tol, threshold: opts.tol, unknowns: 0, converged: true };
        return Ok((LatticeFunction::new(u), report));
    }
    let mut local = vec![u32::MAX; n];
    for (k, &v) in interior.iter().enumerate() {
        local[v] = k as u32;
    }
    let mut b = vec![0.0; m];
    let mut diag = vec![0.0; m];
    for (k, &v) in interior.iter().enumerate() {
        let mut acc = rhs.values[v];
        for (&w, &a) in g.neighbours(v).iter().zip(g.neighbour_weights(v)) {
            diag[k] += a;
            if fixed[w as usize] {
                acc += a * u[w as usize];
            }
        }
        b[k] = acc;
    }
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::Topology("interior vertex without edges".into()));
    }
    // reduced CSR over interior unknowns
    let mut offsets = Vec::with_capacity(m + 1);
    let mut cols: Vec<u32> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    offsets.push(0u32);
    for &v in &interior {
        for (&w, &a) in g.neighbours(v).iter().zip(g.neighbour_weights(v)) {
            let j = local[w as usize];
            if j != u32::MAX {
                cols.push(j);
                vals.push(a);
            }
        }
        offsets.push(cols.len() as u32);
    }
    let matvec = |x: &[f64], out: &mut [f64]| {
        for k in 0..m {
            let (lo, hi) = (offsets[k] as usize, offsets[k + 1] as usize);
            let mut s = diag[k] * x[k];
            for (&j, &a) in cols[lo..hi].iter().zip(&vals[lo..hi]) {
                s -= a * x[j as usize];
            }
            out[k] = s;
        }
    };
    let (x, report) = pcg(&matvec, &diag, &b, opts)?;
    for (k, &v) in interior.iter().enumerate() {
        u[v] = x[k];
    }
    Ok((LatticeFunction::new(u), report))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pcg(
    matvec: &dyn Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    opts: SolveOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let m = b.len();
    let cap = opts.cap(m);
    let threshold = opts.tol * (1.0 + norm(b));
    let mut x = vec![0.0; m];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; m];
    let mut rz = dot(&r, &z);
    let mut res = norm(&r);
    let mut it = 0;
    while res > threshold && it < cap {
        matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for k in 0..m {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        it += 1;
        // recompute the true residual now and then to avoid drift
        if it % 200 == 0 {
            matvec(&x, &mut ap);
            for k in 0..m {
                r[k] = b[k] - ap[k];
            }
        }
        let (mut rr, mut rz_new) = (0.0, 0.0);
        for k in 0..m {
            z[k] = r[k] / diag[k];
            rr += r[k] * r[k];
            rz_new += r[k] * z[k];
        }
        res = rr.sqrt();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
    }
    matvec(&x, &mut ap);
    let true_res = norm(&b.iter().zip(&ap).map(|(b, a)| b - a).collect::<Vec<_>>());
    let report = SolveReport {
        iterations: it,
        residual: true_res,
        tolerance: opts.tol,
        threshold,
        unknowns: m,
        converged: true_res <= threshold * 1.01,
    };
    if !report.converged {
        return Err(Error::Solver { message: format!("residual {true_res:e} above {threshold:e} after {it} iterations"), report });
    }
    Ok((x, report))
}

/// Solves the singular problem `-∇·a∇u = loads` on a connected graph,
/// grounding `u(ground) = 0`. Loads are projected to zero sum when their
/// total exceeds the tolerance.
pub fn solve_grounded(g: &ClusterGraph, loads: &LatticeFunction, ground: usize, opts: SolveOptions) -> Result<(LatticeFunction, SolveReport)> {
    check_len(g.len(), loads.len())?;
    let total: f64 = loads.values.iter().sum();
    let mut b = loads.clone();
    if total.abs() > opts.tol {
        let mean = total / g.len() as f64;
        b.values.iter_mut().for_each(|v| *v -= mean);
    }
    solve_dirichlet_with(g, &[ground], &[0.0], &b, opts)
}

/// Finite-volume corrector on the maximal cluster of a region.
#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    pub graph: ClusterGraph,
    pub chi: LatticeFunction,
    /// Vertices carrying the affine Dirichlet data.
    pub layer: Vec<bool>,
    pub p: [f64; 3],
    pub report: SolveReport,
}

impl CorrectorSolution {
    /// `p·x + χ_p(x)`.
    pub fn harmonic(&self) -> LatticeFunction {
        let mut u = LatticeFunction::affine(&self.graph, self.p);
        for (a, c) in u.values.iter_mut().zip(&self.chi.values) {
            *a += c;
        }
        u
    }

    pub fn value_at(&self, x: Point) -> Option<f64> {
        self.graph.index_of(x).map(|i| self.chi.values[i])
    }
}

/// Cluster vertices of `region` that are not in its `a`-interior: those
/// with an open bond leaving `region`, or a lattice neighbour outside the box.
pub fn dirichlet_layer(env: &Environment, region: &AxisBox, g: &ClusterGraph) -> Vec<bool> {
    let lat = env.lattice();
    g.vertices()
        .iter()
        .map(|&x| {
            let idx = lat.index(x);
            (0..env.dim()).any(|dir| {
                [1i64, -1].iter().any(|&s| {
                    let y = x.add(Point::unit(dir).scale(s));
                    if region.contains(y) {
                        return false;
                    }
                    if !lat.contains(y) {
                        return true;
                    }
                    let w = lat.index(y);
                    env.bond_between(idx, w, dir) > 0.0
                })
            })
        })
        .collect()
}

/// Solves `u ∈ A(C ∩ region)` with `u = p·x` on the Dirichlet layer and
/// returns `χ_p = u - p·x`.
pub fn corrector(env: &Environment, region: &AxisBox, p: [f64; 3], tol: f64) -> Result<CorrectorSolution> {
    corrector_with(env, region, p, SolveOptions::tol(tol))
}

pub fn corrector_with(env: &Environment, region: &AxisBox, p: [f64; 3], opts: SolveOptions) -> Result<CorrectorSolution> {
    let graph = maximal_cluster(env, region)?;
    corrector_on(env, region, graph, p, opts)
}

/// As [`corrector`], reusing an already extracted cluster of `region`.
pub fn corrector_on(env: &Environment, region: &AxisBox, graph: ClusterGraph, p: [f64; 3], opts: SolveOptions) -> Result<CorrectorSolution> {
    let layer = dirichlet_layer(env, region, &graph);
    let boundary: Vec<usize> = (0..graph.len()).filter(|&v| layer[v]).collect();
    if boundary.is_empty() {
        return Err(Error::Topology("cluster has no Dirichlet layer".into()));
    }
    // Solve for χ directly: -∇·a∇χ = ∇·a∇(p·x) in the interior, χ = 0 on the layer.
    let affine = LatticeFunction::affine(&graph, p);
    let mut rhs = apply_operator(&graph, &affine)?;
    rhs.values.iter_mut().for_each(|v| *v = -*v);
    let zeros = vec![0.0; boundary.len()];
    let (chi, report) = solve_dirichlet_with(&graph, &boundary, &zeros, &rhs, opts)?;
    Ok(CorrectorSolution { graph, chi, layer, p, report })
}

/// `∇G^e` with `-∇·a∇G^e = δ_x - δ_y` for `e = (x, y)`, grounded at `ground`.
/// The bond `e` itself may be closed as long as both endpoints lie in `g`.
pub fn greens_gradient(g: &ClusterGraph, e: &EdgeRef, ground: usize, tol: f64) -> Result<VectorField> {
    Ok(greens_solve(g, e, ground, SolveOptions::tol(tol))?.0)
}

pub fn greens_solve(g: &ClusterGraph, e: &EdgeRef, ground: usize, opts: SolveOptions) -> Result<(VectorField, LatticeFunction, SolveReport)> {
    let (Some(x), Some(y)) = (g.index_of(e.x), g.index_of(e.y)) else {
        return Err(Error::Topology(format!("edge {}-{} does not have both endpoints in the cluster", e.x, e.y)));
    };
    if ground >= g.len() {
        return Err(Error::Bounds(format!("ground vertex {ground} out of range")));
    }
    let mut b = LatticeFunction::zeros(g.len());
    b.values[x] += 1.0;
    b.values[y] -= 1.0;
    let (u, report) = solve_grounded(g, &b, ground, opts)?;
    Ok((gradient(g, &u)?, u, report))
}

/// `w` with `⟨∇w, a∇h⟩ = ⟨ξ, ∇h⟩` for every `h`, grounded at vertex 0.
pub fn solve_divergence_rhs(g: &ClusterGraph, xi: &VectorField, tol: f64) -> Result<(LatticeFunction, SolveReport)> {
    let b = divergence_loads(g, xi)?;
    solve_grounded(g, &b, 0, SolveOptions::tol(tol))
}

/// `(|C ∩ B_r|^{-1} Σ_{x ∈ C ∩ B_r} |F|²(x))^{1/2}` with `B_r` the ℓ∞ ball.
pub fn normalized_l2(g: &ClusterGraph, f: &VectorField, center: Point, r: i64) -> f64 {
    let mag = f.magnitude(g);
    let ball = AxisBox::ball(g.dim(), center, r);
    let (mut s, mut k) = (0.0, 0usize);
    for (v, &p) in g.vertices().iter().enumerate() {
        if ball.contains(p) {
            s += mag.values[v].powi(2);
            k += 1;
        }
    }
    if k == 0 {
        0.0
    } else {
        (s / k as f64).sqrt()
    }
}

/// Smallest ladder radius `r` such that, for the witnesses `p·x + χ_p` with
/// `p` a unit direction, `‖∇u‖_{L̲²(C∩B_r')} ≤ C0 ‖∇u‖_{L̲²(C∩B_R')}` for all
/// ladder radii `r ≤ r' ≤ R'`. Balls are centered at the region center.
/// Returns the largest radius when no smaller one qualifies.
pub fn regularity_scale(env: &Environment, region: &AxisBox, c0: f64, radii: &[i64], tol: f64) -> Result<i64> {
    let mut radii = radii.to_vec();
    radii.sort();
    radii.dedup();
    if radii.is_empty() {
        return Err(Error::Config("empty radius ladder".into()));
    }
    let mut center = Point::ORIGIN;
    for i in 0..region.dim {
        center.0[i] = (region.lo.0[i] + region.hi.0[i]).div_euclid(2);
    }
    let graph = maximal_cluster(env, region)?;
    let mut norms: Vec<Vec<f64>> = Vec::new();
    for dir in 0..env.dim() {
        let mut p = [0.0; 3];
        p[dir] = 1.0;
        let sol = corrector_on(env, region, graph.clone(), p, SolveOptions::tol(tol))?;
        let grad = gradient(&sol.graph, &sol.harmonic())?;
        norms.push(radii.iter().map(|&r| normalized_l2(&sol.graph, &grad, center, r)).collect());
    }
    let k = radii.len();
    for start in 0..k {
        let ok = norms.iter().all(|n| (start..k).all(|i| (i..k).all(|j| n[i] <= c0 * n[j] + 1e-12)));
        if ok {
            return Ok(radii[start]);
        }
    }
    Ok(radii[k - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ConductanceLaw, EnvironmentSpec};
    use crate::geometry::TriadicCube;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn path_graph(weights: &[f64]) -> ClusterGraph {
        let pts: Vec<Point> = (0..=weights.len() as i64).map(|i| Point::new2(i, 0)).collect();
        let edges: Vec<(Point, Point, f64)> = weights.iter().enumerate().map(|(i, &a)| (pts[i], pts[i + 1], a)).collect();
        ClusterGraph::from_edges(2, pts, &edges).unwrap()
    }

    fn random_env(dim: usize, scale: u32, p: f64, lambda: f64, seed: u64) -> Environment {
        Environment::generate(&EnvironmentSpec::new(dim, scale, p, lambda, ConductanceLaw::Uniform, seed)).unwrap()
    }

    /// Dense Laplacian of a graph, independent of the CSR routines.
    fn dense_laplacian(g: &ClusterGraph) -> DMatrix<f64> {
        let n = g.len();
        let mut l = DMatrix::zeros(n, n);
        for id in 0..g.num_edges() {
            let (x, y) = g.edge(id);
            let a = g.edge_weight(id);
            l[(x, x)] += a;
            l[(y, y)] += a;
            l[(x, y)] -= a;
            l[(y, x)] -= a;
        }
        l
    }

    fn dense_dirichlet(g: &ClusterGraph, fixed: &[usize], vals: &[f64], rhs: &[f64]) -> Vec<f64> {
        let l = dense_laplacian(g);
        let n = g.len();
        let mut is_fixed = vec![None; n];
        for (&v, &x) in fixed.iter().zip(vals) {
            is_fixed[v] = Some(x);
        }
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for i in 0..n {
            match is_fixed[i] {
                Some(x) => {
                    a[(i, i)] = 1.0;
                    b[i] = x;
                }
                None => {
                    for j in 0..n {
                        a[(i, j)] = l[(i, j)];
                    }
                    b[i] = rhs[i];
                }
            }
        }
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    #[test]
    fn operator_on_path() {
        let g = path_graph(&[1.0, 0.5]);
        let u = LatticeFunction::new(vec![0.0, 1.0, 3.0]);
        let lu = apply_operator(&g, &u).unwrap();
        assert_eq!(lu.values, vec![-1.0, 0.0, 1.0]);
        assert!(apply_operator(&g, &LatticeFunction::zeros(2)).is_err());
    }

    #[test]
    fn constants_and_affine_are_harmonic() {
        let env = random_env(2, 2, 0.8, 0.3, 1);
        let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
        let c = LatticeFunction::new(vec![2.5; g.len()]);
        assert!(apply_operator(&g, &c).unwrap().max_abs() == 0.0);
        assert!(gradient(&g, &c).unwrap().max_abs() == 0.0);

        let spec = EnvironmentSpec::new(2, 2, 1.0, 0.2, ConductanceLaw::Uniform, 0);
        let aniso = Environment::from_fn(&spec, |_, k| if k == 0 { 0.7 } else { 0.3 }).unwrap();
        let g = maximal_cluster(&aniso, &aniso.lattice().as_axis_box()).unwrap();
        let u = LatticeFunction::affine(&g, [1.5, -2.0, 0.0]);
        let lu = apply_operator(&g, &u).unwrap();
        for (v, p) in g.vertices().iter().enumerate() {
            if p.linf() < 4 {
                assert_abs_diff_eq!(lu.values[v], 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_first_coordinate() {
        let g = maximal_cluster(&Environment::fully_open(2, 1).unwrap(), &AxisBox::ball(2, Point::ORIGIN, 1)).unwrap();
        let u = LatticeFunction::from_fn(&g, |p| p.0[0] as f64);
        let grad = gradient(&g, &u).unwrap();
        for id in 0..g.num_edges() {
            let (x, y) = g.edge(id);
            let horizontal = g.vertex(x).0[0] != g.vertex(y).0[0];
            assert_eq!(grad.values[id], if horizontal { -1.0 } else { 0.0 });
            assert_eq!(grad.at(&g, y, x), -grad.values[id]);
        }
    }

    #[test]
    fn edge_sum_conventions_differ_by_two() {
        let env = random_env(2, 2, 0.8, 0.3, 2);
        let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
        let u = LatticeFunction::from_fn(&g, |p| (p.0[0] * p.0[1]) as f64);
        let f = gradient(&g, &u).unwrap();
        // ordered sum by explicit double loop over oriented pairs
        let mut ordered = 0.0;
        for v in 0..g.len() {
            for &w in g.neighbours(v) {
                ordered += f.at(&g, v, w as usize).powi(2);
            }
        }
        assert_abs_diff_eq!(f.inner(&f, EdgeSum::Ordered), ordered, epsilon = 1e-9);
        assert_abs_diff_eq!(f.inner(&f, EdgeSum::Unordered) * 2.0, ordered, epsilon = 1e-9);
        let mag = f.magnitude(&g);
        let s: f64 = mag.values.iter().map(|m| m * m).sum();
        assert_abs_diff_eq!(s, f.inner(&f, EdgeSum::Unordered), epsilon = 1e-9);
    }

    #[test]
    fn dirichlet_constant_and_affine_data() {
        let env = random_env(2, 2, 0.85, 0.4, 5);
        let region = env.lattice().as_axis_box();
        let g = maximal_cluster(&env, &region).unwrap();
        let layer = dirichlet_layer(&env, &region, &g);
        let bd: Vec<usize> = (0..g.len()).filter(|&v| layer[v]).collect();
        let (u, rep) = solve_dirichlet(&g, &bd, &vec![3.0; bd.len()], &LatticeFunction::zeros(g.len()), 1e-12).unwrap();
        assert!(rep.converged);
        assert!(u.values.iter().all(|v| (v - 3.0).abs() < 1e-9));

        let spec = EnvironmentSpec::new(2, 2, 1.0, 0.2, ConductanceLaw::Uniform, 0);
        let aniso = Environment::from_fn(&spec, |_, k| if k == 0 { 0.9 } else { 0.25 }).unwrap();
        let sol = corrector(&aniso, &region, [0.3, 1.0, 0.0], 1e-12).unwrap();
        assert!(sol.chi.max_abs() < 1e-9);
    }

    #[test]
    fn dirichlet_matches_dense_oracle_on_open_block() {
        let env = Environment::fully_open(2, 2).unwrap();
        let region = AxisBox::ball(2, Point::ORIGIN, 2);
        let g = maximal_cluster(&env, &region).unwrap();
        assert_eq!(g.len(), 25);
        let bd: Vec<usize> = (0..g.len()).filter(|&v| g.vertex(v).linf() == 2).collect();
        let vals: Vec<f64> = bd.iter().map(|&v| ((v * 37 % 11) as f64) - 5.0).collect();
        let rhs = LatticeFunction::zeros(g.len());
        let (u, _) = solve_dirichlet(&g, &bd, &vals, &rhs, 1e-13).unwrap();
        let oracle = dense_dirichlet(&g, &bd, &vals, &rhs.values);
        for (a, b) in u.values.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn empty_interior_returns_boundary_data() {
        let g = path_graph(&[1.0]);
        let (u, rep) = solve_dirichlet(&g, &[0, 1], &[1.0, 2.0], &LatticeFunction::zeros(2), 1e-10).unwrap();
        assert_eq!(u.values, vec![1.0, 2.0]);
        assert_eq!(rep.iterations, 0);
        assert!(solve_dirichlet(&g, &[], &[], &LatticeFunction::zeros(2), 1e-10).is_err());
    }

    #[test]
    fn iteration_cap_reports_failure() {
        let env = random_env(2, 3, 0.8, 0.3, 9);
        let region = env.lattice().as_axis_box();
        let g = maximal_cluster(&env, &region).unwrap();
        let opts = SolveOptions { tol: 1e-14, max_iter: Some(3) };
        let r = corrector_on(&env, &region, g, [1.0, 0.0, 0.0], opts);
        match r {
            Err(Error::Solver { report, .. }) => {
                assert_eq!(report.iterations, 3);
                assert!(!report.converged);
            }
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn trivial_correctors_vanish() {
        let open = Environment::fully_open(2, 3).unwrap();
        let region = open.lattice().as_axis_box();
        let sol = corrector(&open, &region, [1.0, 0.0, 0.0], DEFAULT_TOL).unwrap();
        assert!(sol.chi.max_abs() < 1e-8);
        let open3 = Environment::fully_open(3, 2).unwrap();
        let sol = corrector(&open3, &open3.lattice().as_axis_box(), [0.2, 0.5, -1.0], DEFAULT_TOL).unwrap();
        assert!(sol.chi.max_abs() < 1e-8);
    }

    #[test]
    fn corrector_is_linear_in_p() {
        let env = random_env(2, 3, 0.75, 0.5, 17);
        let region = env.lattice().as_axis_box();
        let tol = 1e-10;
        let a = corrector(&env, &region, [1.0, 0.0, 0.0], tol).unwrap();
        let b = corrector(&env, &region, [0.0, 1.0, 0.0], tol).unwrap();
        let c = corrector(&env, &region, [1.0, 1.0, 0.0], tol).unwrap();
        assert!(a.chi.max_abs() > 1e-3);
        // each solve leaves a residual of at most tol (1 + ‖b‖), so the defect's residual is below 3 tol (1 + ‖b‖)
        let g = &c.graph;
        let d = LatticeFunction::new((0..c.chi.len()).map(|i| c.chi.values[i] - a.chi.values[i] - b.chi.values[i]).collect());
        let r = apply_operator(g, &d).unwrap();
        let rhs = apply_operator(g, &LatticeFunction::affine(g, c.p)).unwrap();
        let interior = |f: &LatticeFunction| (0..g.len()).filter(|&v| !c.layer[v]).map(|v| f.values[v].powi(2)).sum::<f64>().sqrt();
        assert!(interior(&r) <= 10.0 * tol * (1.0 + interior(&rhs)), "{}", interior(&r));
    }

    #[test]
    fn corrector_layer_on_sub_region() {
        let env = random_env(2, 3, 0.8, 0.5, 3);
        let region = TriadicCube::origin(2, 2).as_box();
        let sol = corrector(&env, &region, [1.0, 0.0, 0.0], 1e-10).unwrap();
        for (v, &p) in sol.graph.vertices().iter().enumerate() {
            assert!(region.contains(p));
            if sol.layer[v] {
                assert_eq!(sol.chi.values[v], 0.0);
                assert_eq!(p.linf(), 4);
            }
        }
        let u = sol.harmonic();
        let lu = apply_operator(&sol.graph, &u).unwrap();
        for v in 0..sol.graph.len() {
            if !sol.layer[v] {
                assert!(lu.values[v].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn single_edge_green_gradient_is_one() {
        let g = path_graph(&[1.0]);
        let e = EdgeRef::new(Point::new2(0, 0), Point::new2(1, 0)).unwrap();
        let grad = greens_gradient(&g, &e, 0, 1e-12).unwrap();
        assert_abs_diff_eq!(grad.values[0], 1.0, epsilon = 1e-12);
        let far = EdgeRef::new(Point::new2(5, 0), Point::new2(6, 0)).unwrap();
        assert!(matches!(greens_gradient(&g, &far, 0, 1e-12), Err(Error::Topology(_))));
    }

    #[test]
    fn green_symmetry_bounds_and_energy() {
        let env = random_env(2, 2, 0.8, 0.4, 21);
        let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
        let tol = 1e-12;
        let edges: Vec<EdgeRef> = (0..g.num_edges())
            .step_by(7)
            .map(|id| {
                let (x, y) = g.edge(id);
                EdgeRef::new(g.vertex(x), g.vertex(y)).unwrap()
            })
            .collect();
        let grads: Vec<VectorField> = edges.iter().map(|e| greens_gradient(&g, e, 0, tol).unwrap()).collect();
        for (i, e) in edges.iter().enumerate() {
            let own = grads[i].at_edge(&g, e);
            assert!(grads[i].max_abs() <= 1.0 / 0.4 + 1e-9);
            let energy = grads[i].inner(&grads[i], EdgeSum::Unordered);
            assert!(energy <= own / 0.4 + 1e-9);
            for (j, f) in edges.iter().enumerate() {
                let a = grads[i].at_edge(&g, f);
                let b = grads[j].at_edge(&g, e);
                assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn green_tests_itself() {
        // ⟨∇G^e, a∇G^e'⟩ = ∇G^e(e') with unordered sums
        let env = random_env(2, 2, 0.8, 0.4, 4);
        let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
        let pick = |id: usize| {
            let (x, y) = g.edge(id);
            EdgeRef::new(g.vertex(x), g.vertex(y)).unwrap()
        };
        let (e, f) = (pick(3), pick(40));
        let ge = greens_gradient(&g, &e, 0, 1e-12).unwrap();
        let (_, uf, _) = greens_solve(&g, &f, 0, SolveOptions::tol(1e-12)).unwrap();
        let agf = a_gradient(&g, &uf).unwrap();
        assert_abs_diff_eq!(ge.inner(&agf, EdgeSum::Unordered), ge.at_edge(&g, &f), epsilon = 1e-9);
    }

    #[test]
    fn divergence_problem_known_solution() {
        let env = random_env(2, 2, 0.8, 0.4, 8);
        let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
        let v = LatticeFunction::from_fn(&g, |p| (p.0[0] * p.0[0]) as f64 - 0.5 * p.0[1] as f64);
        let xi = a_gradient(&g, &v).unwrap();
        let (w, _) = solve_divergence_rhs(&g, &xi, 1e-12).unwrap();
        let gw = gradient(&g, &w).unwrap();
        let gv = gradient(&g, &v).unwrap();
        for (a, b) in gw.values.iter().zip(&gv.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        let (w0, _) = solve_divergence_rhs(&g, &VectorField::zeros(&g), 1e-12).unwrap();
        assert!(w0.max_abs() == 0.0);
    }

    #[test]
    fn representation_formula_small_cluster() {
        let env = random_env(2, 2, 0.75, 0.5, 12);
        let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
        let xi = VectorField { values: (0..g.num_edges()).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 3.0).collect() };
        let (w, _) = solve_divergence_rhs(&g, &xi, 1e-13).unwrap();
        let gw = gradient(&g, &w).unwrap();
        let mut sum = vec![0.0; g.num_edges()];
        for id in 0..g.num_edges() {
            let (x, y) = g.edge(id);
            let e = EdgeRef::new(g.vertex(x), g.vertex(y)).unwrap();
            let ge = greens_gradient(&g, &e, 0, 1e-13).unwrap();
            for (s, v) in sum.iter_mut().zip(&ge.values) {
                *s += xi.values[id] * v;
            }
        }
        for (a, b) in gw.values.iter().zip(&sum) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn regularity_scale_examples() {
        let open = Environment::fully_open(2, 3).unwrap();
        let region = open.lattice().as_axis_box();
        assert_eq!(regularity_scale(&open, &region, 1.0, &[2, 4, 8], 1e-10).unwrap(), 2);
        let env = random_env(2, 3, 0.75, 0.5, 6);
        let ladder = [1, 2, 4, 8];
        let mut prev = i64::MAX;
        for c0 in [1.0, 1.2, 1.5, 2.0, 4.0] {
            let s = regularity_scale(&env, &region, c0, &ladder, 1e-10).unwrap();
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn exports() {
        let g = path_graph(&[1.0, 2.0]);
        let u = LatticeFunction::new(vec![0.0, 1.0, 2.0]);
        let mut buf = Vec::new();
        u.write_csv(&g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        let mut buf = Vec::new();
        gradient(&g, &u).unwrap().write_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,y0,x1,y1,value"));
        let rep = SolveReport { iterations: 3, residual: 1e-12, tolerance: 1e-10, threshold: 1e-10, unknowns: 3, converged: true };
        let back: SolveReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn summation_by_parts(seed in any::<u64>(), c in -3.0f64..3.0) {
            let env = random_env(2, 2, 0.8, 0.3, seed);
            let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
            let u = LatticeFunction::from_fn(&g, |p| ((p.0[0] * 3 + p.0[1] * 5) % 7) as f64 * c);
            let v = LatticeFunction::from_fn(&g, |p| (p.0[0] - 2 * p.0[1]) as f64 + c);
            let lhs = dirichlet_form(&g, &u, &v).unwrap();
            let lv = apply_operator(&g, &v).unwrap();
            let rhs: f64 = u.values.iter().zip(&lv.values).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn solver_matches_dense_on_small_graphs(seed in any::<u64>()) {
            let env = random_env(2, 2, 0.7, 0.3, seed);
            let region = AxisBox::ball(2, Point::ORIGIN, 4);
            let g = maximal_cluster(&env, &region).unwrap();
            prop_assume!(g.len() >= 3 && g.len() <= 100);
            let bd: Vec<usize> = (0..g.len()).filter(|&v| v % 5 == 0).collect();
            let vals: Vec<f64> = bd.iter().map(|&v| (v as f64 * 0.37).sin()).collect();
            let rhs = LatticeFunction::from_fn(&g, |p| (p.0[0] as f64 * 0.1).cos());
            let (u, _) = solve_dirichlet(&g, &bd, &vals, &rhs, 1e-13).unwrap();
            let oracle = dense_dirichlet(&g, &bd, &vals, &rhs.values);
            for (a, b) in u.values.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-8);
            }
        }
    }
}
