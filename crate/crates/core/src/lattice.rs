//! Lattice points, the working box `□_M` and axis-aligned integer boxes.
//!
//! Points always carry three coordinates; in dimension 2 the third one is
//! zero. The derived ordering on [`Point`] is lexicographic in
//! `(x_1, x_2, x_3)`, which is the tie-breaking order used throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point(pub [i64; MAX_DIM]);

impl Point {
    pub const ORIGIN: Point = Point([0; MAX_DIM]);

    pub fn new2(x: i64, y: i64) -> Self {
        Point([x, y, 0])
    }

    pub fn new3(x: i64, y: i64, z: i64) -> Self {
        Point([x, y, z])
    }

    /// Builds a point from a coordinate slice of length 2 or 3.
    pub fn from_slice(c: &[i64]) -> Self {
        let mut p = [0; MAX_DIM];
        p[..c.len()].copy_from_slice(c);
        Point(p)
    }

    pub fn unit(dir: usize) -> Self {
        let mut p = [0; MAX_DIM];
        p[dir] = 1;
        Point(p)
    }

    pub fn add(self, o: Point) -> Point {
        Point([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn sub(self, o: Point) -> Point {
        Point([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }

    pub fn neg(self) -> Point {
        Point([-self.0[0], -self.0[1], -self.0[2]])
    }

    pub fn scale(self, k: i64) -> Point {
        Point([self.0[0] * k, self.0[1] * k, self.0[2] * k])
    }

    pub fn l1(self) -> i64 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    pub fn linf(self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn coords(&self, dim: usize) -> &[i64] {
        &self.0[..dim]
    }

    pub fn as_f64(self) -> [f64; MAX_DIM] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }
}

impl std::fmt::Display for Point {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.0[0], self.0[1], self.0[2])
    }
}

pub fn pow3(n: u32) -> i64 {
    3_i64.pow(n)
}

/// Inclusive axis-aligned box `lo ..= hi` in the first `dim` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisBox {
    pub dim: usize,
    pub lo: Point,
    pub hi: Point,
}

impl AxisBox {
    pub fn new(dim: usize, lo: Point, hi: Point) -> Self {
        AxisBox { dim, lo, hi }
    }

    /// The ℓ∞ ball `B_r(center)`.
    pub fn ball(dim: usize, center: Point, r: i64) -> Self {
        let mut lo = center;
        let mut hi = center;
        for i in 0..dim {
            lo.0[i] -= r;
            hi.0[i] += r;
        }
        AxisBox { dim, lo, hi }
    }

    pub fn side(&self, axis: usize) -> i64 {
        self.hi.0[axis] - self.lo.0[axis] + 1
    }

    pub fn is_empty(&self) -> bool {
        (0..self.dim).any(|i| self.hi.0[i] < self.lo.0[i])
    }

    pub fn len(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        (0..self.dim).map(|i| self.side(i) as usize).product()
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..self.dim).all(|i| p.0[i] >= self.lo.0[i] && p.0[i] <= self.hi.0[i])
    }

    pub fn contains_box(&self, o: &AxisBox) -> bool {
        o.is_empty() || (self.contains(o.lo) && self.contains(o.hi))
    }

    pub fn intersects(&self, o: &AxisBox) -> bool {
        (0..self.dim).all(|i| self.lo.0[i] <= o.hi.0[i] && o.lo.0[i] <= self.hi.0[i])
    }

    pub fn intersection(&self, o: &AxisBox) -> AxisBox {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for i in 0..self.dim {
            lo.0[i] = lo.0[i].max(o.lo.0[i]);
            hi.0[i] = hi.0[i].min(o.hi.0[i]);
        }
        AxisBox { dim: self.dim, lo, hi }
    }

    /// Local row-major index (last coordinate fastest).
    #[inline]
    pub fn local_index(&self, p: Point) -> usize {
        let mut idx = 0usize;
        for i in 0..self.dim {
            idx = idx * self.side(i) as usize + (p.0[i] - self.lo.0[i]) as usize;
        }
        idx
    }

    /// Points in lexicographic order.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        let n = self.len();
        (0..n).map(move |k| self.local_point(k))
    }

    pub fn local_point(&self, mut k: usize) -> Point {
        let mut p = Point::ORIGIN;
        for i in (0..self.dim).rev() {
            let s = self.side(i) as usize;
            p.0[i] = self.lo.0[i] + (k % s) as i64;
            k /= s;
        }
        p
    }
}

/// The working box `□_M = □_M(0)` with its vertex indexing.
///
/// Vertices are indexed row-major with the last coordinate fastest, so that
/// index order coincides with lexicographic order of points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeBox {
    pub dim: usize,
    pub scale: u32,
    side: usize,
    half: i64,
}

impl LatticeBox {
    pub fn new(dim: usize, scale: u32) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
        }
        if scale > 12 {
            return Err(Error::Config(format!("box scale {scale} too large")));
        }
        let side = pow3(scale) as usize;
        Ok(LatticeBox { dim, scale, side, half: (side as i64 - 1) / 2 })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn half(&self) -> i64 {
        self.half
    }

    pub fn num_vertices(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn as_axis_box(&self) -> AxisBox {
        AxisBox::ball(self.dim, Point::ORIGIN, self.half)
    }

    #[inline]
    pub fn contains(&self, p: Point) -> bool {
        (0..self.dim).all(|i| p.0[i].abs() <= self.half)
    }

    #[inline]
    pub fn index(&self, p: Point) -> usize {
        let mut idx = 0usize;
        for i in 0..self.dim {
            idx = idx * self.side + (p.0[i] + self.half) as usize;
        }
        idx
    }

    pub fn try_index(&self, p: Point) -> Result<usize> {
        if self.contains(p) {
            Ok(self.index(p))
        } else {
            Err(Error::Bounds(format!("point {p} outside box of scale {}", self.scale)))
        }
    }

    #[inline]
    pub fn point(&self, mut idx: usize) -> Point {
        let mut p = Point::ORIGIN;
        for i in (0..self.dim).rev() {
            p.0[i] = (idx % self.side) as i64 - self.half;
            idx /= self.side;
        }
        p
    }

    /// Index stride of a unit step along `dir`.
    #[inline]
    pub fn stride(&self, dir: usize) -> usize {
        self.side.pow((self.dim - 1 - dir) as u32)
    }

    /// Index of `x + e_dir` if it stays in the box.
    #[inline]
    pub fn forward(&self, idx: usize, dir: usize) -> Option<usize> {
        let s = self.stride(dir);
        if (idx / s) % self.side + 1 < self.side {
            Some(idx + s)
        } else {
            None
        }
    }

    /// Index of `x - e_dir` if it stays in the box.
    #[inline]
    pub fn backward(&self, idx: usize, dir: usize) -> Option<usize> {
        let s = self.stride(dir);
        if (idx / s) % self.side > 0 {
            Some(idx - s)
        } else {
            None
        }
    }

    /// True when some lattice neighbour of `idx` lies outside the box.
    pub fn on_boundary(&self, idx: usize) -> bool {
        (0..self.dim).any(|d| self.forward(idx, d).is_none() || self.backward(idx, d).is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_order_is_lexicographic() {
        let b = LatticeBox::new(2, 2).unwrap();
        let pts: Vec<Point> = (0..b.num_vertices()).map(|i| b.point(i)).collect();
        let mut sorted = pts.clone();
        sorted.sort();
        assert_eq!(pts, sorted);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(b.index(*p), i);
        }
    }

    #[test]
    fn forward_backward_respect_box() {
        let b = LatticeBox::new(3, 1).unwrap();
        let corner = b.index(Point::new3(1, 1, 1));
        for d in 0..3 {
            assert!(b.forward(corner, d).is_none());
            let back = b.backward(corner, d).unwrap();
            assert_eq!(b.forward(back, d), Some(corner));
        }
        assert!(b.on_boundary(corner));
        assert!(!b.on_boundary(b.index(Point::ORIGIN)));
    }

    #[test]
    fn axis_box_local_points_roundtrip() {
        let bx = AxisBox::new(2, Point::new2(-2, 3), Point::new2(1, 5));
        assert_eq!(bx.len(), 12);
        for (k, p) in bx.points().enumerate() {
            assert_eq!(bx.local_index(p), k);
        }
    }
}
