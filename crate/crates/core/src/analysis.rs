//! Estimators and inequality checks: oscillation and centered `L^q` norms,
//! Gaussian spatial averages, the multiscale Poincaré functional, Meyers and
//! Caccioppoli ratios, stretched-exponential moment calibration, tail
//! exponents and resampling sensitivity.
//!
//! The Gaussian kernel is `Φ_r(x) = r^{-d} exp(-|x|²/r²)`, whose mass is
//! `π^{d/2}`; it is deliberately left unnormalized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{splitmix64, EdgeRef, Environment};
use crate::error::{Error, Result};
use crate::geometry::{ClusterGraph, TriadicCube};
use crate::lattice::{AxisBox, Point};
use crate::partition::{CoarseFunction, Kernel1d, MollifierSpec};
use crate::solver::{gradient, LatticeFunction, VectorField};

/// Regular sample grid `origin + h k`, `0 ≤ k_i < counts_i`, row-major with the
/// last axis fastest. Unused axes have count 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dim: usize,
    pub origin: [f64; 3],
    pub spacing: f64,
    pub counts: [usize; 3],
}

impl GridGeometry {
    pub fn new(dim: usize, origin: [f64; 3], spacing: f64, counts: [usize; 3]) -> Self {
        let mut counts = counts;
        for c in counts.iter_mut().skip(dim) {
            *c = 1;
        }
        GridGeometry { dim, origin, spacing, counts }
    }

    /// Grid of spacing `h` covering `[-half, half]^d`, with the origin a grid point.
    pub fn centered(dim: usize, half: f64, spacing: f64) -> Self {
        let k = (half / spacing).floor() as usize;
        let o = -(k as f64) * spacing;
        GridGeometry::new(dim, [o, o, o], spacing, [2 * k + 1; 3])
    }

    /// Integer lattice points of a box.
    pub fn of_box(bx: &AxisBox) -> Self {
        let mut origin = [0.0; 3];
        let mut counts = [1; 3];
        for i in 0..bx.dim {
            origin[i] = bx.lo.0[i] as f64;
            counts[i] = bx.side(i) as usize;
        }
        GridGeometry::new(bx.dim, origin, 1.0, counts)
    }

    pub fn len(&self) -> usize {
        self.counts[..self.dim].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, s: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        let mut rest = s;
        for i in (0..self.dim).rev() {
            let k = rest % self.counts[i];
            rest /= self.counts[i];
            out[i] = self.origin[i] + self.spacing * k as f64;
        }
        out
    }

    pub fn index(&self, k: [usize; 3]) -> usize {
        let mut s = 0;
        for i in 0..self.dim {
            s = s * self.counts[i] + k[i];
        }
        s
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.origin[axis] + self.spacing * (self.counts[axis] as f64 - 1.0)
    }

    /// Index range along `axis` of grid points within `[lo, hi]`, or a bounds
    /// error if that interval leaves the grid.
    fn span(&self, axis: usize, lo: f64, hi: f64) -> Result<(usize, usize)> {
        let eps = 1e-9 * self.spacing;
        if lo < self.origin[axis] - eps || hi > self.upper(axis) + eps {
            return Err(Error::Bounds(format!(
                "interval [{lo}, {hi}] leaves the grid along axis {axis} ([{}, {}])",
                self.origin[axis],
                self.upper(axis)
            )));
        }
        let a = ((lo - self.origin[axis]) / self.spacing - 1e-9).ceil().max(0.0) as usize;
        let b = (((hi - self.origin[axis]) / self.spacing + 1e-9).floor() as usize).min(self.counts[axis] - 1);
        Ok((a, b))
    }

    /// Grid index of the point at `x` along `axis`, if `x` is a grid coordinate.
    fn exact_index(&self, axis: usize, x: f64) -> Option<usize> {
        let u = (x - self.origin[axis]) / self.spacing;
        let k = u.round();
        ((u - k).abs() < 1e-9 && k >= 0.0 && (k as usize) < self.counts[axis]).then_some(k as usize)
    }
}

/// Values with `components` entries per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    grid: GridGeometry,
    components: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: GridGeometry, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 || values.len() != grid.len() * components {
            return Err(Error::Data(format!("{} values for {} points x {components}", values.len(), grid.len())));
        }
        if !(grid.spacing > 0.0) {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at entry {i}")));
        }
        Ok(GridField { grid, components, values })
    }

    pub fn scalar_from_fn(grid: GridGeometry, f: impl Fn([f64; 3]) -> f64 + Sync) -> Result<Self> {
        let values = (0..grid.len()).into_par_iter().map(|s| f(grid.point(s))).collect();
        GridField::new(grid, 1, values)
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, s: usize) -> &[f64] {
        &self.values[s * self.components..(s + 1) * self.components]
    }

    /// Pointwise combination `a self + b other` on identical grids.
    pub fn combine(&self, a: f64, other: &GridField, b: f64) -> Result<GridField> {
        if self.grid != other.grid || self.components != other.components {
            return Err(Error::Data("grid fields differ in shape".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        GridField::new(self.grid.clone(), self.components, values)
    }
}

/// `sup_A u - inf_A u` over the listed vertex indices.
pub fn osc(u: &LatticeFunction, set: &[usize]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("oscillation over an empty set".into()));
    }
    let (lo, hi) = set.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        (lo.min(u.values[i]), hi.max(u.values[i]))
    });
    Ok(hi - lo)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide by the number of points.
    Average,
    /// Divide by `R^d`.
    Radius { radius: f64, dim: usize },
}

/// Centered `L^q` norm `(N^{-1} Σ_A |u - (u)_A|^q)^{1/q}`.
pub fn lq_centered(u: &LatticeFunction, set: &[usize], q: f64, norm: Normalization) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("L^q norm over an empty set".into()));
    }
    if !(q >= 1.0) {
        return Err(Error::Config(format!("exponent q = {q} below 1")));
    }
    let mean = set.iter().map(|&i| u.values[i]).sum::<f64>() / set.len() as f64;
    let sum: f64 = set.iter().map(|&i| (u.values[i] - mean).abs().powf(q)).sum();
    let denom = match norm {
        Normalization::Average => set.len() as f64,
        Normalization::Radius { radius, dim } => radius.powi(dim as i32),
    };
    Ok((sum / denom).powf(1.0 / q))
}

/// `Σ Φ_r(x - x0) F(x) h^d` over grid points with `|x - x0| ≤ 6r`.
pub fn gaussian_average(f: &GridField, r: f64, x0: [f64; 3]) -> Result<Vec<f64>> {
    let g = &f.grid;
    if !(r >= g.spacing) {
        return Err(Error::Precondition(format!("radius {r} below grid spacing {}", g.spacing)));
    }
    let d = g.dim;
    let cut = 6.0 * r;
    let mut ranges = [(0usize, 0usize); 3];
    for i in 0..d {
        ranges[i] = g.span(i, x0[i] - cut, x0[i] + cut)?;
    }
    let vol = g.spacing.powi(d as i32) / r.powi(d as i32);
    let mut out = vec![0.0; f.components];
    let mut k = [0usize; 3];
    let mut visit = |k: [usize; 3]| {
        let mut sq = 0.0;
        for i in 0..d {
            let t = g.origin[i] + g.spacing * k[i] as f64 - x0[i];
            sq += t * t;
        }
        if sq > cut * cut {
            return;
        }
        let w = (-sq / (r * r)).exp() * vol;
        let s = g.index(k);
        for (o, v) in out.iter_mut().zip(f.at(s)) {
            *o += w * v;
        }
    };
    for a in ranges[0].0..=ranges[0].1 {
        k[0] = a;
        for b in ranges[1].0..=ranges[1].1 {
            k[1] = b;
            if d == 2 {
                visit(k);
                continue;
            }
            for c in ranges[2].0..=ranges[2].1 {
                k[2] = c;
                visit(k);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleOptions {
    /// Log-spaced radii on `[h, 2R]`.
    pub radius_nodes: usize,
    /// Outer quadrature step as a multiple of `h`; `None` picks `max(1, round(R / 8h))`.
    pub outer_stride: Option<usize>,
}

impl Default for MultiscaleOptions {
    fn default() -> Self {
        MultiscaleOptions { radius_nodes: 32, outer_stride: None }
    }
}

fn ball_points(g: &GridGeometry, radius: f64) -> Result<Vec<usize>> {
    let d = g.dim;
    let mut ranges = [(0usize, 0usize); 3];
    for i in 0..d {
        ranges[i] = g.span(i, -radius, radius)?;
    }
    let mut out = Vec::new();
    for s in 0..g.len() {
        let x = g.point(s);
        if (0..d).map(|i| x[i] * x[i]).sum::<f64>() <= radius * radius {
            out.push(s);
        }
    }
    Ok(out)
}

/// `‖u - (u)_{B_R}‖` in the averaged `L^q(B_R)` norm over grid points of the
/// Euclidean ball centered at the origin.
pub fn multiscale_lhs(u: &GridField, radius: f64, q: f64) -> Result<f64> {
    if u.components != 1 {
        return Err(Error::Data("multiscale functional needs a scalar field".into()));
    }
    let pts = ball_points(&u.grid, radius)?;
    if pts.is_empty() {
        return Err(Error::Data("ball contains no grid point".into()));
    }
    let mean = pts.iter().map(|&s| u.values[s]).sum::<f64>() / pts.len() as f64;
    let sum: f64 = pts.iter().map(|&s| (u.values[s] - mean).abs().powf(q)).sum();
    Ok((sum / pts.len() as f64).powf(1.0 / q))
}

pub fn multiscale_rhs(u: &GridField, radius: f64, q: f64) -> Result<f64> {
    multiscale_rhs_with(u, radius, q, &MultiscaleOptions::default())
}

/// `(∫ R^{-d} e^{-|x|/2R} (∫_0^{2R} r |Φ_r * ∇u(x)|² dr)^{q/2} dx)^{1/q}`.
///
/// `Φ_r * ∇u` is evaluated as `(∇Φ_r) * u` with separable one-dimensional
/// passes. The radial integral uses the trapezoid rule in `log r` on
/// `[h, 2R]` plus `h²/2 |Φ_h * ∇u|²` for `r < h`. The outer integral runs over
/// a strided sub-grid of the ball `|x| ≤ 12R`.
pub fn multiscale_rhs_with(u: &GridField, radius: f64, q: f64, opts: &MultiscaleOptions) -> Result<f64> {
    let g = &u.grid;
    let d = g.dim;
    let h = g.spacing;
    if u.components != 1 {
        return Err(Error::Data("multiscale functional needs a scalar field".into()));
    }
    if !(2.0 * radius > h) || opts.radius_nodes < 2 {
        return Err(Error::Config("need 2R > h and at least two radius nodes".into()));
    }
    let outer = 12.0 * radius;
    let reach = outer + 6.0 * 2.0 * radius;
    let mut zero = [0usize; 3];
    for i in 0..d {
        g.span(i, -reach, reach)?;
        zero[i] = g.exact_index(i, 0.0).ok_or_else(|| Error::Config("origin is not a grid point".into()))?;
    }
    let stride = opts.outer_stride.unwrap_or_else(|| ((radius / (8.0 * h)).round() as usize).max(1));
    let step = stride as f64 * h;
    let m = (outer / step).floor() as usize;
    // outer sample indices per axis (identical on every axis)
    let per_axis: Vec<Vec<usize>> =
        (0..d).map(|i| (0..=2 * m).map(|k| zero[i] + k * stride - m * stride).collect()).collect();
    let n_out = 2 * m + 1;

    let ratio = (2.0 * radius / h).ln() / (opts.radius_nodes - 1) as f64;
    let radii: Vec<f64> = (0..opts.radius_nodes).map(|k| h * (ratio * k as f64).exp()).collect();
    let n_samples = n_out.pow(d as u32);
    let mut inner = vec![0.0; n_samples];
    for (k, &r) in radii.iter().enumerate() {
        let sq = smoothed_gradient_sq(u, r, &per_axis)?;
        let w_trap = if k == 0 || k + 1 == radii.len() { 0.5 * ratio } else { ratio };
        for (acc, v) in inner.iter_mut().zip(&sq) {
            *acc += w_trap * r * r * v;
        }
        if k == 0 {
            for (acc, v) in inner.iter_mut().zip(&sq) {
                *acc += 0.5 * h * h * v;
            }
        }
    }
    let mut total = 0.0;
    for s in 0..n_samples {
        let mut rest = s;
        let mut sq = 0.0;
        for _ in 0..d {
            let k = rest % n_out;
            rest /= n_out;
            let x = (k as f64 - m as f64) * step;
            sq += x * x;
        }
        let dist = sq.sqrt();
        if dist > outer {
            continue;
        }
        total += (-dist / (2.0 * radius)).exp() * inner[s].powf(q / 2.0);
    }
    Ok((total * step.powi(d as i32) / radius.powi(d as i32)).powf(1.0 / q))
}

/// `|Φ_r * ∇u|²` at the tensor sub-grid `per_axis`, flattened with the last axis fastest.
fn smoothed_gradient_sq(u: &GridField, r: f64, per_axis: &[Vec<usize>]) -> Result<Vec<f64>> {
    let g = &u.grid;
    let d = g.dim;
    let h = g.spacing;
    let half = (6.0 * r / h).floor() as i64;
    let gauss: Vec<f64> = (-half..=half).map(|j| (-(j as f64 * h).powi(2) / (r * r)).exp()).collect();
    let deriv: Vec<f64> = (-half..=half)
        .map(|j| {
            let t = j as f64 * h;
            -2.0 * t / (r * r) * (-(t * t) / (r * r)).exp()
        })
        .collect();
    let scale = (h / r).powi(d as i32);
    let n_out = per_axis[0].len();
    let mut total = vec![0.0; n_out.pow(d as u32)];
    for comp in 0..d {
        // passes from the last axis to the first; kernel along `comp` is the derivative
        let mut shape: Vec<usize> = g.counts[..d].to_vec();
        let mut data = u.values.clone();
        // rows actually needed along each axis: the samples widened by the kernel
        for axis in (0..d).rev() {
            let kern = if axis == comp { &deriv } else { &gauss };
            let out_idx = &per_axis[axis];
            let mut new_shape = shape.clone();
            new_shape[axis] = out_idx.len();
            let outer_len: usize = shape[..axis].iter().product();
            let inner_len: usize = shape[axis + 1..].iter().product();
            let mut next = vec![0.0; outer_len * out_idx.len() * inner_len];
            let needed = |axis2: usize, idx: usize| -> bool {
                // lower axes still at full resolution: keep only rows near a sample
                let lo = per_axis[axis2][0] as i64 - half;
                let hi = *per_axis[axis2].last().unwrap() as i64 + half;
                (idx as i64) >= lo && (idx as i64) <= hi
            };
            next.par_chunks_mut(out_idx.len() * inner_len).enumerate().for_each(|(o, chunk)| {
                // decode the lower-axis multi-index to skip unused rows
                let mut rest = o;
                for a in (0..axis).rev() {
                    let k = rest % shape[a];
                    rest /= shape[a];
                    if !needed(a, k) {
                        return;
                    }
                }
                let base = o * shape[axis] * inner_len;
                for (j, &c) in out_idx.iter().enumerate() {
                    for t in 0..inner_len {
                        let mut acc = 0.0;
                        for (kk, w) in kern.iter().enumerate() {
                            // convolution: Σ_y K(x - y) u(y), y = c - (kk - half)
                            let y = c as i64 - (kk as i64 - half);
                            acc += w * data[base + y as usize * inner_len + t];
                        }
                        chunk[j * inner_len + t] = acc;
                    }
                }
            });
            data = next;
            shape = new_shape;
        }
        for (t, v) in total.iter_mut().zip(&data) {
            *t += (v * scale).powi(2);
        }
    }
    Ok(total)
}

/// Per-vertex `|F|(x) = (½ Σ_{y~x} F(x,y)²)^{1/2}` summed to the power `p` over a vertex set.
fn power_sum(mag: &LatticeFunction, set: &[usize], p: f64) -> f64 {
    set.iter().map(|&i| mag.values[i].powf(p)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeyersPoint {
    pub epsilon: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Ratio of the `(2+ε)`-average of `|∇v|` over `□ ∩ C` to the two-term right
/// side over `(4/3)□ ∩ C`, with `C` the vertices of `g`. Volumes are lattice
/// point counts of `□` and `(4/3)□`. `0/0` is reported as 0.
pub fn meyers_ratio(g: &ClusterGraph, cube: &TriadicCube, v: &LatticeFunction, xi: &VectorField, epsilons: &[f64]) -> Result<Vec<MeyersPoint>> {
    if g.is_empty() {
        return Err(Error::EmptyCluster("Meyers check on an empty graph".into()));
    }
    let big = cube.dilated_box(4, 3);
    let inner: Vec<usize> = (0..g.len()).filter(|&i| cube.contains(g.vertex(i))).collect();
    let outer: Vec<usize> = (0..g.len()).filter(|&i| big.contains(g.vertex(i))).collect();
    let grad = gradient(g, v)?.magnitude(g);
    let xi_mag = xi.magnitude(g);
    let (vol, vol_big) = (cube.volume() as f64, big.len() as f64);
    epsilons
        .iter()
        .map(|&eps| {
            if !(eps >= 0.0) {
                return Err(Error::Config(format!("negative Meyers exponent {eps}")));
            }
            let p = 2.0 + eps;
            let lhs = (power_sum(&grad, &inner, p) / vol).powf(1.0 / p);
            let rhs = (power_sum(&grad, &outer, 2.0) / vol_big).sqrt() + (power_sum(&xi_mag, &outer, p) / vol_big).powf(1.0 / p);
            let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
            Ok(MeyersPoint { epsilon: eps, lhs, rhs, ratio })
        })
        .collect()
}

/// `Σ_{C∩V} |∇u|² / (r^{-2} Σ_{C∩(U\V)} u² + Σ_{C∩U} |ξ|²)` for boxes `V ⊂ U`
/// whose faces are at least `r` apart.
pub fn caccioppoli_ratio(g: &ClusterGraph, u: &LatticeFunction, xi: &VectorField, inner: &AxisBox, outer: &AxisBox, r: f64) -> Result<f64> {
    if !(r >= 1.0) {
        return Err(Error::Precondition("Caccioppoli gap must be at least 1".into()));
    }
    for i in 0..inner.dim {
        let gap = (inner.lo.0[i] - outer.lo.0[i]).min(outer.hi.0[i] - inner.hi.0[i]);
        if (gap as f64) < r {
            return Err(Error::Precondition(format!("inner box is closer than {r} to the outer boundary along axis {i}")));
        }
    }
    let grad = gradient(g, u)?.magnitude(g);
    let xi_mag = xi.magnitude(g);
    let (mut lhs, mut ring, mut src) = (0.0, 0.0, 0.0);
    for i in 0..g.len() {
        let x = g.vertex(i);
        if !outer.contains(x) {
            continue;
        }
        src += xi_mag.values[i].powi(2);
        if inner.contains(x) {
            lhs += grad.values[i].powi(2);
        } else {
            ring += u.values[i].powi(2);
        }
    }
    let rhs = ring / (r * r) + src;
    Ok(if lhs == 0.0 { 0.0 } else { lhs / rhs })
}

/// Calibrated stretched-exponential size `θ` with `mean exp((X/θ)^s) ≤ 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub exponent: f64,
    pub theta: f64,
    pub samples: usize,
    /// Empirical `mean exp((X/θ)^s)` at the reported `θ`.
    pub achieved: f64,
}

fn moment(samples: &[f64], s: f64, theta: f64) -> f64 {
    samples.iter().map(|x| ((x / theta).powf(s)).exp()).sum::<f64>() / samples.len() as f64
}

/// Minimal `θ` (to relative precision 1e-10) with empirical
/// `mean exp((X_i/θ)^s) ≤ 2`, by bisection in `log θ`.
pub fn estimate_os(samples: &[f64], s: f64) -> Result<MomentEstimate> {
    if samples.len() < 30 {
        return Err(Error::Data(format!("{} samples, need at least 30", samples.len())));
    }
    if !(s > 0.0) {
        return Err(Error::Config("exponent s must be positive".into()));
    }
    if let Some(x) = samples.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::Data(format!("sample {x} is not a finite nonnegative number")));
    }
    let max = samples.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(MomentEstimate { exponent: s, theta: 0.0, samples: samples.len(), achieved: 1.0 });
    }
    let (mut lo, mut hi) = ((max / 50.0).ln(), (50.0 * max).ln());
    // the mean decreases in θ; widen the bracket if a bound is on the wrong side
    while moment(samples, s, lo.exp()) <= 2.0 {
        lo -= 4.0;
    }
    while moment(samples, s, hi.exp()) > 2.0 {
        hi += 4.0;
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if moment(samples, s, mid.exp()) > 2.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = hi.exp();
    Ok(MomentEstimate { exponent: s, theta, samples: samples.len(), achieved: moment(samples, s, theta) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    pub points: usize,
}

/// Ordinary least squares `y ≈ a x + b`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(Error::Estimation(format!("linear fit needs matching inputs of length ≥ 2 (got {n}, {})", ys.len())));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Estimation("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(LinearFit { slope, intercept, r_squared, slope_stderr, points: n })
}

/// Least-squares slope of `log(-log P̂[X ≥ t])` against `log t` over the
/// upper quartile of the sorted samples.
pub fn tail_exponent(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::Estimation(format!("{n} samples, need at least 100")));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for i in (3 * n).div_ceil(4)..n {
        let t = xs[i];
        // fraction of samples ≥ t, counting ties
        let first = xs.partition_point(|v| *v < t);
        let p = (n - first) as f64 / n as f64;
        if t > 0.0 && p < 1.0 {
            lx.push(t.ln());
            ly.push((-p.ln()).ln());
        }
    }
    let distinct = lx.windows(2).any(|w| w[0] != w[1]);
    if !distinct {
        return Err(Error::Estimation("degenerate tail: upper quartile has no spread".into()));
    }
    Ok(linear_fit(&lx, &ly)?.slope)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub value: f64,
    pub base: f64,
    pub per_edge: Vec<f64>,
    pub resamples: usize,
}

/// `Σ_{e∈E0} (X(a) - mean_k X(a with e redrawn under seed k))²`.
///
/// Auxiliary seeds are `splitmix64(seed ^ splitmix64(j K + k))` for the `j`-th
/// edge. Fewer than 8 resamples is an error in strict mode and a warning otherwise.
pub fn resampling_sensitivity<F>(env: &Environment, functional: F, edges: &[EdgeRef], resamples: usize, seed: u64, strict: bool) -> Result<SensitivityReport>
where
    F: Fn(&Environment) -> Result<f64> + Sync,
{
    if resamples == 0 {
        return Err(Error::Config("need at least one resample".into()));
    }
    if resamples < 8 {
        if strict {
            return Err(Error::Precondition(format!("{resamples} resamples give an imprecise conditional mean (need 8)")));
        }
        log::warn!("resampling sensitivity with only {resamples} resamples");
    }
    let base = functional(env)?;
    let per_edge = edges
        .par_iter()
        .enumerate()
        .map(|(j, e)| {
            let mut sum = 0.0;
            for k in 0..resamples {
                let aux = splitmix64(seed ^ splitmix64((j * resamples + k) as u64));
                sum += functional(&env.resample_edge(e, aux)?)?;
            }
            Ok((base - sum / resamples as f64).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SensitivityReport { value: per_edge.iter().sum(), base, per_edge, resamples })
}

/// `(g * K)(τ)` and `(g' * K)(τ)` for `g(t) = exp(-t²/R²)` and the mollified
/// unit indicator `K(s) = H(s + ½) - H(s - ½)` supported in `[-1, 1]`.
fn smoothed_profile(kernel: &Kernel1d, radius: f64, tau: f64) -> (f64, f64) {
    const GL: [(f64, f64); 5] = [
        (0.0, 0.568_888_888_888_888_9),
        (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
        (0.906_179_845_938_664, 0.236_926_885_056_189_1),
    ];
    let panels = 64;
    let w = 2.0 / panels as f64;
    let (mut v, mut dv) = (0.0, 0.0);
    for p in 0..panels {
        let mid = -1.0 + (p as f64 + 0.5) * w;
        for (x, wt) in GL {
            let s = mid + 0.5 * w * x;
            let k = kernel.cdf(s + 0.5) - kernel.cdf(s - 0.5);
            let t = tau - s;
            let e = (-(t * t) / (radius * radius)).exp();
            v += 0.5 * w * wt * e * k;
            dv += 0.5 * w * wt * (-2.0 * t / (radius * radius)) * e * k;
        }
    }
    (v, dv)
}

/// `∇(Φ_R * [f]^η)(x0)` evaluated through the separable closed form
/// `R^{-d} Σ_z f(z) Π_j (g * K)(x0_j - z_j)` with one factor differentiated.
/// Lattice points with `|x0_j - z_j| > 6R + 1` are dropped.
pub fn spatial_average_gradient(f: &CoarseFunction, spec: &MollifierSpec, radius: f64, x0: [f64; 3]) -> Result<Vec<f64>> {
    let kernel = Kernel1d::new(spec)?;
    let lat = f.lattice;
    let d = lat.dim;
    let reach = 6.0 * radius + 1.0;
    let mut ranges = [(0i64, 0i64); 3];
    let mut tables: Vec<Vec<(f64, f64)>> = Vec::with_capacity(d);
    for i in 0..d {
        let (lo, hi) = ((x0[i] - reach).ceil() as i64, (x0[i] + reach).floor() as i64);
        if lo < -lat.half() || hi > lat.half() {
            return Err(Error::Bounds(format!("spatial average at radius {radius} reaches outside the box along axis {i}")));
        }
        ranges[i] = (lo, hi);
        tables.push((lo..=hi).map(|z| smoothed_profile(&kernel, radius, x0[i] - z as f64)).collect());
    }
    let bx = AxisBox::new(
        d,
        Point([ranges[0].0, ranges[1].0, ranges[2].0]),
        Point([ranges[0].1, ranges[1].1, if d == 3 { ranges[2].1 } else { 0 }]),
    );
    let mut out = vec![0.0; d];
    for z in bx.points() {
        let fz = f.values[lat.index(z)];
        if fz == 0.0 {
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            let mut prod = fz;
            for i in 0..d {
                let (v, dv) = tables[i][(z.0[i] - ranges[i].0) as usize];
                prod *= if i == c { dv } else { v };
            }
            *o += prod;
        }
    }
    let norm = radius.powi(d as i32);
    Ok(out.into_iter().map(|v| v / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvironmentSpec;
    use crate::geometry::maximal_cluster;
    use crate::lattice::LatticeBox;
    use crate::partition::mollify;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    #[test]
    fn osc_and_lq_examples() {
        let u = LatticeFunction::new(vec![3.0; 5]);
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(osc(&u, &all).unwrap(), 0.0);
        assert_eq!(lq_centered(&u, &all, 2.0, Normalization::Average).unwrap(), 0.0);
        let line = LatticeFunction::new((0..=7).map(|i| i as f64).collect());
        let idx: Vec<usize> = (0..=7).collect();
        assert_eq!(osc(&line, &idx).unwrap(), 7.0);
        assert!(osc(&line, &[]).is_err());
        assert!(lq_centered(&line, &[], 2.0, Normalization::Average).is_err());
        // R^{-d} normalization: Σ (i - 3.5)² over 0..=7 is 42
        let r = lq_centered(&line, &idx, 2.0, Normalization::Radius { radius: 2.0, dim: 2 }).unwrap();
        assert_abs_diff_eq!(r, (42.0f64 / 4.0).sqrt(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn osc_and_lq_brute_force(vals in prop::collection::vec(-10.0f64..10.0, 1..20), q in 1.0f64..4.0) {
            let u = LatticeFunction::new(vals.clone());
            let idx: Vec<usize> = (0..vals.len()).collect();
            let mut best = 0.0f64;
            for a in &vals { for b in &vals { best = best.max(a - b); } }
            prop_assert_eq!(osc(&u, &idx).unwrap(), best);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let direct = (vals.iter().map(|v| (v - mean).abs().powf(q)).sum::<f64>() / vals.len() as f64).powf(1.0 / q);
            prop_assert!((lq_centered(&u, &idx, q, Normalization::Average).unwrap() - direct).abs() < 1e-12);
        }

        #[test]
        fn gaussian_average_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let grid = GridGeometry::centered(2, 20.0, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = GridField::new(grid.clone(), 1, (0..grid.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
            let g = GridField::new(grid.clone(), 1, (0..grid.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
            let x0 = [0.3, -1.0, 0.0];
            let lhs = gaussian_average(&f.combine(a, &g, b).unwrap(), 3.0, x0).unwrap()[0];
            let rhs = a * gaussian_average(&f, 3.0, x0).unwrap()[0] + b * gaussian_average(&g, 3.0, x0).unwrap()[0];
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn moment_estimate_scales(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 3.0).collect();
            let ys: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let a = estimate_os(&xs, 1.5).unwrap();
            let b = estimate_os(&ys, 1.5).unwrap();
            prop_assert!((b.theta / a.theta - c).abs() < 1e-8 * c);
            prop_assert!(a.achieved <= 2.0 + 1e-6);
        }
    }

    #[test]
    fn gaussian_average_constant_has_mass_pi() {
        let grid = GridGeometry::centered(2, 40.0, 0.5);
        let f = GridField::new(grid.clone(), 2, [1.5, -2.0].repeat(grid.len())).unwrap();
        let v = gaussian_average(&f, 4.0, [0.0; 3]).unwrap();
        let pi = std::f64::consts::PI;
        assert_abs_diff_eq!(v[0], 1.5 * pi, epsilon = 1e-6);
        assert_abs_diff_eq!(v[1], -2.0 * pi, epsilon = 1e-6);
        let grid3 = GridGeometry::centered(3, 14.0, 0.5);
        let f3 = GridField::new(grid3.clone(), 1, vec![1.0; grid3.len()]).unwrap();
        assert_abs_diff_eq!(gaussian_average(&f3, 2.0, [0.0; 3]).unwrap()[0], pi.powf(1.5), epsilon = 1e-6);
        assert!(matches!(gaussian_average(&f, 8.0, [0.0; 3]), Err(Error::Bounds(_))));
        assert!(matches!(gaussian_average(&f, 0.2, [0.0; 3]), Err(Error::Precondition(_))));
    }

    #[test]
    fn gaussian_average_large_radius_and_odd() {
        // compact bump: Φ_r varies little across its support, direct sum oracle
        let grid = GridGeometry::centered(2, 130.0, 1.0);
        let f = GridField::scalar_from_fn(grid.clone(), |x| if x[0].abs() <= 2.0 && x[1].abs() <= 3.0 { 1.0 + x[0] } else { 0.0 }).unwrap();
        let r = 20.0;
        let x0 = [1.0, 0.0, 0.0];
        let mut oracle = 0.0;
        for s in 0..grid.len() {
            let x = grid.point(s);
            let sq = (x[0] - x0[0]).powi(2) + (x[1] - x0[1]).powi(2);
            oracle += f.values()[s] * (-sq / (r * r)).exp() / (r * r);
        }
        assert_abs_diff_eq!(gaussian_average(&f, r, x0).unwrap()[0], oracle, epsilon = 1e-14);
        let total: f64 = f.values().iter().sum();
        assert!((oracle - total / (r * r)).abs() < 0.01 * total / (r * r));

        let odd = GridField::scalar_from_fn(grid.clone(), |x| x[0] * (-x[1] * x[1] / 50.0).exp()).unwrap();
        assert!(gaussian_average(&odd, 5.0, [0.0; 3]).unwrap()[0].abs() < 1e-12);
    }

    fn band_limited(seed: u64) -> impl Fn([f64; 3]) -> f64 + Sync {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                let k = 2.0 * std::f64::consts::PI / rng.random_range(4.0..12.0);
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                (k * ang.cos(), k * ang.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.5))
            })
            .collect();
        move |x| modes.iter().map(|(a, b, ph, amp)| amp * (a * x[0] + b * x[1] + ph).cos()).sum()
    }

    #[test]
    fn multiscale_examples() {
        let grid = GridGeometry::centered(2, 24.0 * 4.0, 1.0);
        let c = GridField::new(grid.clone(), 1, vec![2.0; grid.len()]).unwrap();
        assert_eq!(multiscale_lhs(&c, 4.0, 2.0).unwrap(), 0.0);
        assert!(multiscale_rhs(&c, 4.0, 2.0).unwrap().abs() < 1e-12);
        let lin = GridField::scalar_from_fn(grid.clone(), |x| x[0]).unwrap();
        let l = multiscale_lhs(&lin, 4.0, 2.0).unwrap();
        let r = multiscale_rhs(&lin, 4.0, 2.0).unwrap();
        assert!(l > 0.0 && r > 0.0 && (l / r).is_finite());
        assert!(matches!(multiscale_rhs(&lin, 5.0, 2.0), Err(Error::Bounds(_))));
        // invariance under constants
        let shifted = lin.combine(1.0, &c, 1.0).unwrap();
        assert_abs_diff_eq!(multiscale_lhs(&shifted, 4.0, 2.0).unwrap(), l, epsilon = 1e-12);
        assert_abs_diff_eq!(multiscale_rhs(&shifted, 4.0, 2.0).unwrap(), r, epsilon = 1e-9 * r);
    }

    #[test]
    fn multiscale_rhs_of_plane_wave_matches_closed_form() {
        // u = cos(k x_1): Φ_r * ∂_1 u = -π k e^{-k²r²/4} sin(k x_1); average of sin² is ½
        let k = 2.0 * std::f64::consts::PI / 6.0;
        let radius = 4.0;
        let grid = GridGeometry::centered(2, 24.0 * radius, 0.5);
        let u = GridField::scalar_from_fn(grid.clone(), |x| (k * x[0]).cos()).unwrap();
        let opts = MultiscaleOptions { radius_nodes: 64, outer_stride: Some(1) };
        let rhs = multiscale_rhs_with(&u, radius, 2.0, &opts).unwrap();
        // oracle with inner radial integral ∫_0^{2R} r π² k² e^{-k²r²/2} dr in closed form
        let pi = std::f64::consts::PI;
        let radial = pi * pi * (1.0 - (-k * k * 2.0 * radius * radius).exp());
        let mut outer = 0.0;
        let h = 0.5;
        let n = (12.0 * radius / h) as i64;
        for i in -n..=n {
            for j in -n..=n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let dist = (x * x + y * y).sqrt();
                if dist <= 12.0 * radius {
                    outer += (-dist / (2.0 * radius)).exp() * (k * x).sin().powi(2) * h * h;
                }
            }
        }
        let oracle = (outer * radial / (radius * radius)).sqrt();
        assert!((rhs - oracle).abs() < 0.02 * oracle, "{rhs} vs {oracle}");
    }

    #[test]
    fn multiscale_ratio_stable_for_band_limited() {
        let grid = GridGeometry::centered(2, 24.0 * 16.0, 1.0);
        let u = GridField::scalar_from_fn(grid, band_limited(3)).unwrap();
        let r8 = multiscale_lhs(&u, 8.0, 2.0).unwrap() / multiscale_rhs(&u, 8.0, 2.0).unwrap();
        let r16 = multiscale_lhs(&u, 16.0, 2.0).unwrap() / multiscale_rhs(&u, 16.0, 2.0).unwrap();
        assert!((r8 / r16).max(r16 / r8) < 2.0, "{r8} {r16}");
    }

    #[test]
    fn moment_estimates() {
        let c = vec![1.7; 40];
        let one = estimate_os(&c, 1.0).unwrap();
        assert!((one.theta - 1.7 / 2f64.ln()).abs() < 1e-8);
        let two = estimate_os(&c, 2.0).unwrap();
        assert!((two.theta - 1.7 / 2f64.ln().sqrt()).abs() < 1e-8);
        let zero = estimate_os(&[0.0; 30], 1.0).unwrap();
        assert_eq!(zero.theta, 0.0);
        assert!(estimate_os(&[1.0; 29], 1.0).is_err());
        assert!(estimate_os(&[-1.0; 30], 1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..100_000).map(|_| Exp1.sample(&mut rng)).collect();
        let e = estimate_os(&xs, 1.0).unwrap();
        assert!((e.theta - 2.0).abs() < 0.1, "{}", e.theta);
        assert!(e.achieved <= 2.0 + 1e-6);
    }

    #[test]
    fn tail_exponent_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..20_000).map(|_| Exp1.sample(&mut rng)).collect();
        assert!((tail_exponent(&xs).unwrap() - 1.0).abs() < 0.15);
        let ns: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x.abs()).collect();
        let s = tail_exponent(&ns).unwrap();
        // population value of this estimator for |N(0,1)| over the upper quartile
        assert!((s - 1.493).abs() < 0.05, "{s}");
        assert!(matches!(tail_exponent(&[1.0; 500]), Err(Error::Estimation(_))));
        assert!(tail_exponent(&xs[..99]).is_err());
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let f = linear_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(f.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn resampling_examples() {
        let spec = EnvironmentSpec::new(2, 2, 0.8, 0.5, crate::env::ConductanceLaw::ConstantOne, 9);
        let env = Environment::generate(&spec).unwrap();
        let edges: Vec<EdgeRef> = env.bonds().take(6).collect();
        let constant = resampling_sensitivity(&env, |_| Ok(4.0), &edges, 8, 1, true).unwrap();
        assert_eq!(constant.value, 0.0);
        assert!(resampling_sensitivity(&env, |_| Ok(4.0), &edges, 4, 1, true).is_err());
        assert!(resampling_sensitivity(&env, |_| Ok(4.0), &edges, 4, 1, false).is_ok());
        let e0 = edges[0];
        let fully = Environment::fully_open(2, 2).unwrap();
        // under the constant-one law with 𝔭 = 1 the edge never changes
        let r = resampling_sensitivity(&fully, |a| Ok(a.conductance(&e0).unwrap()), &edges, 8, 1, true).unwrap();
        assert_eq!(r.value, 0.0);
        // generic law: a(e0) has nonnegative sensitivity, only e0 contributes
        let r = resampling_sensitivity(&env, |a| Ok(a.conductance(&e0).unwrap()), &edges, 16, 2, true).unwrap();
        assert!(r.value >= 0.0);
        assert!(r.per_edge[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn caccioppoli_and_meyers_examples() {
        let env = Environment::fully_open(2, 3).unwrap();
        let g = maximal_cluster(&env, &env.lattice().as_axis_box()).unwrap();
        let zero = VectorField::zeros(&g);
        let c = LatticeFunction::new(vec![1.0; g.len()]);
        let cube = TriadicCube::origin(2, 2);
        assert!(meyers_ratio(&g, &cube, &c, &zero, &[0.0, 0.5]).unwrap().iter().all(|m| m.ratio == 0.0));
        // affine function: |∇u|² = 1 at every interior vertex; LHS = 1, RHS = 1 inside (4/3)□
        let u = LatticeFunction::from_fn(&g, |q| q.0[0] as f64);
        let m = meyers_ratio(&g, &cube, &u, &zero, &[0.0]).unwrap();
        assert_abs_diff_eq!(m[0].ratio, 1.0, epsilon = 1e-12);
        let inner = AxisBox::ball(2, Point::ORIGIN, 4);
        let outer = AxisBox::ball(2, Point::ORIGIN, 8);
        let r = caccioppoli_ratio(&g, &u, &zero, &inner, &outer, 4.0).unwrap();
        // direct evaluation: 81 inner vertices with |∇u|² = 1; ring Σ x² over |x|∞ ≤ 8 minus |x|∞ ≤ 4
        let ring: f64 = outer.points().filter(|q| !inner.contains(*q)).map(|q| (q.0[0] * q.0[0]) as f64).sum();
        assert_abs_diff_eq!(r, 81.0 / (ring / 16.0), epsilon = 1e-12);
        assert!(caccioppoli_ratio(&g, &u, &zero, &inner, &outer, 5.0).is_err());
    }

    #[test]
    fn spatial_average_routes_agree() {
        let env = Environment::generate(&EnvironmentSpec::new(2, 4, 0.9, 0.5, crate::env::ConductanceLaw::Uniform, 3)).unwrap();
        let lat = LatticeBox::new(2, 4).unwrap();
        let _ = env;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..lat.num_vertices()).map(|_| rng.random::<f64>()).collect();
        let f = CoarseFunction { lattice: lat, values, partition: 0 };
        let spec = MollifierSpec::default();
        let radius = 4.0;
        let analytic = spatial_average_gradient(&f, &spec, radius, [0.0; 3]).unwrap();
        let grid = GridGeometry::centered(2, 6.0 * radius + 1.0, 1.0 / 16.0);
        let (_, grad) = mollify(&f, &spec, &grid).unwrap();
        let numeric = gaussian_average(&grad, radius, [0.0; 3]).unwrap();
        for i in 0..2 {
            assert!((analytic[i] - numeric[i]).abs() < 1e-3 * analytic.iter().map(|v| v.abs()).fold(0.0, f64::max), "{analytic:?} {numeric:?}");
        }
        let c = CoarseFunction { lattice: lat, values: vec![3.0; lat.num_vertices()], partition: 0 };
        assert!(spatial_average_gradient(&c, &spec, radius, [0.0; 3]).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(spatial_average_gradient(&c, &spec, 8.0, [0.0; 3]), Err(Error::Bounds(_))));
    }
}
