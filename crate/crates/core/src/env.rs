//! I.i.d. random conductance environments on the triadic box `□_M`.
//!
//! Every vertex owns the `d` bonds pointing in the positive coordinate
//! directions; bonds leaving the box are absent and stored as zero. The bond
//! `(x, x + e_k)` has index `index(x) * d + k`, which is also the payload order
//! of the binary dump format (see `docs/environment-format.md`).

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeBox, Point};

/// Bond percolation threshold of `Z^2`.
pub const P_C_2D: f64 = 0.5;
/// Literature approximation of the bond percolation threshold of `Z^3`.
pub const P_C_3D: f64 = 0.2488;

pub fn critical_probability(dim: usize) -> f64 {
    match dim {
        2 => P_C_2D,
        _ => P_C_3D,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConductanceLaw {
    /// Every open bond has conductance 1.
    ConstantOne,
    /// Open bonds are uniform on `[λ, 1]`.
    Uniform,
}

impl ConductanceLaw {
    fn tag(self) -> u8 {
        match self {
            ConductanceLaw::ConstantOne => 0,
            ConductanceLaw::Uniform => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ConductanceLaw::ConstantOne),
            1 => Ok(ConductanceLaw::Uniform),
            t => Err(Error::Format(format!("unknown conductance law tag {t}"))),
        }
    }
}

impl std::str::FromStr for ConductanceLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant-one" | "constant" | "one" => Ok(ConductanceLaw::ConstantOne),
            "uniform" | "uniform-on-lambda-1" => Ok(ConductanceLaw::Uniform),
            other => Err(Error::Config(format!("unknown conductance law `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub dim: usize,
    /// Box scale `M`: the box is `□_M`, with `3^M` points per side.
    pub scale: u32,
    pub p_open: f64,
    pub lambda: f64,
    pub law: ConductanceLaw,
    pub seed: u64,
    #[serde(default)]
    pub subcritical_allowed: bool,
}

impl EnvironmentSpec {
    pub fn new(dim: usize, scale: u32, p_open: f64, lambda: f64, law: ConductanceLaw, seed: u64) -> Self {
        EnvironmentSpec { dim, scale, p_open, lambda, law, seed, subcritical_allowed: false }
    }

    /// Fully open constant-one environment, the analytic reference case.
    pub fn fully_open(dim: usize, scale: u32) -> Self {
        Self::new(dim, scale, 1.0, 1.0, ConductanceLaw::ConstantOne, 0)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EnvironmentSpec { seed, ..self.clone() }
    }

    pub fn allow_subcritical(mut self) -> Self {
        self.subcritical_allowed = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        LatticeBox::new(self.dim, self.scale)?;
        if !(self.p_open > 0.0 && self.p_open <= 1.0) {
            return Err(Error::Config(format!("open probability {} not in (0, 1]", self.p_open)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("ellipticity floor {} not in (0, 1]", self.lambda)));
        }
        let pc = critical_probability(self.dim);
        if self.p_open <= pc && !self.subcritical_allowed {
            return Err(Error::Config(format!(
                "open probability {} does not exceed p_c({}) = {pc}",
                self.p_open, self.dim
            )));
        }
        Ok(())
    }

    fn draw_conductance<R: Rng>(&self, rng: &mut R) -> f32 {
        if rng.random::<f64>() >= self.p_open {
            return 0.0;
        }
        match self.law {
            ConductanceLaw::ConstantOne => 1.0,
            ConductanceLaw::Uniform => {
                let v = self.lambda + (1.0 - self.lambda) * rng.random::<f64>();
                clamp_to_floor(v as f32, self.lambda)
            }
        }
    }
}

/// Rounds a conductance to f32 without letting it fall below `λ` or above 1.
fn clamp_to_floor(v: f32, lambda: f64) -> f32 {
    let mut v = v.min(1.0);
    while (v as f64) < lambda {
        v = f32::from_bits(v.to_bits() + 1);
    }
    v
}

/// A nearest-neighbour bond with its lexicographically smaller endpoint first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeRef {
    pub x: Point,
    pub y: Point,
}

impl EdgeRef {
    pub fn new(a: Point, b: Point) -> Result<Self> {
        let diff = b.sub(a);
        if diff.l1() != 1 {
            return Err(Error::Precondition(format!("{a} and {b} are not nearest neighbours")));
        }
        Ok(if a < b { EdgeRef { x: a, y: b } } else { EdgeRef { x: b, y: a } })
    }

    /// The bond `(x, x + e_dir)`.
    pub fn from_base(x: Point, dir: usize) -> Self {
        EdgeRef { x, y: x.add(Point::unit(dir)) }
    }

    pub fn direction(&self) -> usize {
        (0..3).find(|&i| self.y.0[i] != self.x.0[i]).unwrap_or(0)
    }
}

/// Conductances of every bond of the box, immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    spec: EnvironmentSpec,
    lattice: LatticeBox,
    conductance: Vec<f32>,
}

impl Environment {
    /// Samples an environment: each in-box bond is closed with probability
    /// `1 - p`, otherwise drawn from the conductance law. Deterministic in the seed.
    pub fn generate(spec: &EnvironmentSpec) -> Result<Self> {
        spec.validate()?;
        let lattice = LatticeBox::new(spec.dim, spec.scale)?;
        let d = spec.dim;
        let n = lattice.num_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut conductance = vec![0.0f32; n * d];
        for v in 0..n {
            for k in 0..d {
                if lattice.forward(v, k).is_some() {
                    conductance[v * d + k] = spec.draw_conductance(&mut rng);
                }
            }
        }
        Ok(Environment { spec: spec.clone(), lattice, conductance })
    }

    /// Builds an environment from a bond rule `f(x, dir)`, ignoring the law
    /// and seed of `spec`. Values must lie in `{0} ∪ [λ, 1]`.
    pub fn from_fn(spec: &EnvironmentSpec, mut f: impl FnMut(Point, usize) -> f64) -> Result<Self> {
        let lattice = LatticeBox::new(spec.dim, spec.scale)?;
        let d = spec.dim;
        let n = lattice.num_vertices();
        let mut conductance = vec![0.0f32; n * d];
        for v in 0..n {
            let x = lattice.point(v);
            for k in 0..d {
                if lattice.forward(v, k).is_some() {
                    let a = f(x, k);
                    check_value(a, spec.lambda)?;
                    conductance[v * d + k] = if a == 0.0 { 0.0 } else { clamp_to_floor(a as f32, spec.lambda) };
                }
            }
        }
        Ok(Environment { spec: spec.clone(), lattice, conductance })
    }

    pub fn fully_open(dim: usize, scale: u32) -> Result<Self> {
        Self::from_fn(&EnvironmentSpec::fully_open(dim, scale), |_, _| 1.0)
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn lattice(&self) -> &LatticeBox {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda
    }

    /// Raw conductances in canonical bond order.
    pub fn conductances(&self) -> &[f32] {
        &self.conductance
    }

    /// Conductance of the bond `(v, v + e_dir)` by vertex index; zero if absent.
    #[inline]
    pub fn bond(&self, v: usize, dir: usize) -> f64 {
        self.conductance[v * self.spec.dim + dir] as f64
    }

    /// Conductance between lattice neighbours `v` and `w` given by index,
    /// where `w = v ± e_dir`.
    #[inline]
    pub fn bond_between(&self, v: usize, w: usize, dir: usize) -> f64 {
        if w > v {
            self.bond(v, dir)
        } else {
            self.bond(w, dir)
        }
    }

    pub fn bond_index(&self, e: &EdgeRef) -> Result<usize> {
        if !self.lattice.contains(e.x) || !self.lattice.contains(e.y) {
            return Err(Error::Bounds(format!("edge {}-{} leaves the box", e.x, e.y)));
        }
        Ok(self.lattice.index(e.x) * self.spec.dim + e.direction())
    }

    pub fn conductance(&self, e: &EdgeRef) -> Result<f64> {
        Ok(self.conductance[self.bond_index(e)?] as f64)
    }

    pub fn is_open(&self, e: &EdgeRef) -> Result<bool> {
        Ok(self.conductance(e)? > 0.0)
    }

    /// Replaces one conductance; used to build explicit configurations.
    pub fn set_conductance(&mut self, e: &EdgeRef, a: f64) -> Result<()> {
        check_value(a, self.spec.lambda)?;
        let i = self.bond_index(e)?;
        self.conductance[i] = if a == 0.0 { 0.0 } else { clamp_to_floor(a as f32, self.spec.lambda) };
        Ok(())
    }

    /// Number of bonds with both endpoints in the box.
    pub fn num_bonds(&self) -> usize {
        let s = self.lattice.side();
        self.spec.dim * (s - 1) * s.pow(self.spec.dim as u32 - 1)
    }

    pub fn open_fraction(&self) -> f64 {
        let open = self.conductance.iter().filter(|&&a| a > 0.0).count();
        open as f64 / self.num_bonds() as f64
    }

    /// Every in-box bond as an [`EdgeRef`], in canonical order.
    pub fn bonds(&self) -> impl Iterator<Item = EdgeRef> + '_ {
        let d = self.spec.dim;
        (0..self.lattice.num_vertices()).flat_map(move |v| {
            (0..d).filter_map(move |k| {
                self.lattice.forward(v, k).map(|_| EdgeRef::from_base(self.lattice.point(v), k))
            })
        })
    }

    /// A copy with the conductance of `e` redrawn from the single-bond law,
    /// using a stream determined by `aux_seed` and the bond.
    pub fn resample_edge(&self, e: &EdgeRef, aux_seed: u64) -> Result<Environment> {
        let i = self.bond_index(e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(aux_seed ^ splitmix64(i as u64)));
        let mut out = self.clone();
        out.conductance[i] = self.spec.draw_conductance(&mut rng);
        Ok(out)
    }

    /// The environment seen from `z`, restricted to `□_m`: bond `(x, x+e_k)` of
    /// the result carries `a(x + z, x + z + e_k)`.
    pub fn translate(&self, z: Point, m: u32) -> Result<Environment> {
        let sub = LatticeBox::new(self.spec.dim, m)?;
        let h = sub.half();
        for i in 0..self.spec.dim {
            if (z.0[i] - h).abs() > self.lattice.half() || (z.0[i] + h).abs() > self.lattice.half() {
                return Err(Error::Bounds(format!("shifted box z + □_{m} with z = {z} escapes the environment")));
            }
        }
        let d = self.spec.dim;
        let mut conductance = vec![0.0f32; sub.num_vertices() * d];
        for v in 0..sub.num_vertices() {
            let src = self.lattice.index(sub.point(v).add(z));
            for k in 0..d {
                if sub.forward(v, k).is_some() {
                    conductance[v * d + k] = self.conductance[src * d + k];
                }
            }
        }
        let spec = EnvironmentSpec { scale: m, ..self.spec.clone() };
        Ok(Environment { spec, lattice: sub, conductance })
    }

    /// Writes the binary dump: magic, header, then `f32` conductances (LE).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[
            self.spec.dim as u8,
            self.spec.scale as u8,
            self.spec.law.tag(),
            self.spec.subcritical_allowed as u8,
        ])?;
        w.write_all(&self.spec.p_open.to_le_bytes())?;
        w.write_all(&self.spec.lambda.to_le_bytes())?;
        w.write_all(&self.spec.seed.to_le_bytes())?;
        w.write_all(&(self.conductance.len() as u64).to_le_bytes())?;
        for a in &self.conductance {
            w.write_all(&a.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut head = [0u8; 4];
        r.read_exact(&mut head)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let p_open = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let lambda = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let spec = EnvironmentSpec {
            dim: head[0] as usize,
            scale: head[1] as u32,
            p_open,
            lambda,
            law: ConductanceLaw::from_tag(head[2])?,
            seed,
            subcritical_allowed: head[3] != 0,
        };
        let lattice = LatticeBox::new(spec.dim, spec.scale)?;
        if count != lattice.num_vertices() * spec.dim {
            return Err(Error::Format(format!("payload has {count} bonds, header implies {}", lattice.num_vertices() * spec.dim)));
        }
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)?;
        let conductance: Vec<f32> =
            buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        for &a in &conductance {
            check_value(a as f64, spec.lambda)?;
        }
        Ok(Environment { spec, lattice, conductance })
    }
}

const MAGIC: &[u8; 8] = b"PLENV\x00\x00\x01";

fn check_value(a: f64, lambda: f64) -> Result<()> {
    if a == 0.0 || (a >= lambda as f32 as f64 - 1e-7 && a <= 1.0) {
        Ok(())
    } else {
        Err(Error::Data(format!("conductance {a} outside {{0}} ∪ [{lambda}, 1]")))
    }
}

/// SplitMix64 finaliser, used for seed schedules and stream separation.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: f64, scale: u32, seed: u64) -> EnvironmentSpec {
        EnvironmentSpec::new(2, scale, p, 0.3, ConductanceLaw::Uniform, seed)
    }

    #[test]
    fn full_probability_opens_everything() {
        let env = Environment::generate(&EnvironmentSpec::new(2, 2, 1.0, 1.0, ConductanceLaw::ConstantOne, 9)).unwrap();
        assert_eq!(env.num_bonds(), 2 * 9 * 8);
        assert!(env.bonds().all(|e| env.conductance(&e).unwrap() == 1.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Environment::generate(&spec(0.7, 3, 42)).unwrap();
        let b = Environment::generate(&spec(0.7, 3, 42)).unwrap();
        assert_eq!(a.conductances(), b.conductances());
        let c = Environment::generate(&spec(0.7, 3, 43)).unwrap();
        assert_ne!(a.conductances(), c.conductances());
    }

    #[test]
    fn open_fraction_in_binomial_band() {
        let env = Environment::generate(&spec(0.7, 5, 1)).unwrap();
        let n = env.num_bonds() as f64;
        let band = 5.0 * (0.7 * 0.3 / n).sqrt();
        assert!((env.open_fraction() - 0.7).abs() <= band, "{}", env.open_fraction());
    }

    #[test]
    fn values_respect_domain() {
        let env = Environment::generate(&spec(0.8, 3, 5)).unwrap();
        for e in env.bonds() {
            let a = env.conductance(&e).unwrap();
            assert!(a == 0.0 || (0.3..=1.0).contains(&a), "{a}");
        }
    }

    #[test]
    fn subcritical_refused_unless_allowed() {
        assert!(matches!(Environment::generate(&spec(0.5, 2, 0)), Err(Error::Config(_))));
        assert!(Environment::generate(&spec(0.4, 2, 0).allow_subcritical()).is_ok());
        let s3 = EnvironmentSpec::new(3, 1, 0.24, 0.5, ConductanceLaw::Uniform, 0);
        assert!(s3.validate().is_err());
    }

    #[test]
    fn resample_touches_only_one_bond() {
        let env = Environment::fully_open(2, 2).unwrap();
        let e = EdgeRef::from_base(Point::new2(0, 0), 0);
        let closed_spec = EnvironmentSpec::new(2, 2, 0.51, 1.0, ConductanceLaw::ConstantOne, 0);
        let env = Environment { spec: closed_spec, ..env };
        let mut found_closed = false;
        for seed in 0..64 {
            let r = env.resample_edge(&e, seed).unwrap();
            let diff = env.conductances().iter().zip(r.conductances()).filter(|(a, b)| a != b).count();
            assert!(diff <= 1);
            if diff == 1 {
                assert_eq!(r.conductance(&e).unwrap(), 0.0);
                found_closed = true;
            }
        }
        assert!(found_closed);
        assert_eq!(env.conductance(&e).unwrap(), 1.0);
    }

    #[test]
    fn resample_outside_box_is_bounds_error() {
        let env = Environment::fully_open(2, 1).unwrap();
        let e = EdgeRef::from_base(Point::new2(1, 0), 0);
        assert!(matches!(env.resample_edge(&e, 0), Err(Error::Bounds(_))));
    }

    #[test]
    fn resample_open_frequency_matches_p() {
        let env = Environment::generate(&spec(0.7, 2, 3)).unwrap();
        let e = EdgeRef::from_base(Point::new2(0, 0), 1);
        let k = 10_000;
        let open = (0..k).filter(|&s| env.resample_edge(&e, s).unwrap().is_open(&e).unwrap()).count();
        let freq = open as f64 / k as f64;
        let sigma = (0.7 * 0.3 / k as f64).sqrt();
        assert!((freq - 0.7).abs() <= 3.0 * sigma, "{freq}");
    }

    #[test]
    fn translate_identities() {
        let env = Environment::generate(&spec(0.7, 3, 11)).unwrap();
        let same = env.translate(Point::ORIGIN, 3).unwrap();
        assert_eq!(same.conductances(), env.conductances());

        let z = Point::new2(2, -3);
        let there = env.translate(z, 2).unwrap();
        let back = there.translate(z.neg(), 1).unwrap();
        assert_eq!(back.conductances(), env.translate(Point::ORIGIN, 1).unwrap().conductances());

        let open = Environment::fully_open(2, 3).unwrap();
        let t = open.translate(Point::new2(4, 4), 2).unwrap();
        assert!(t.bonds().all(|e| t.conductance(&e).unwrap() == 1.0));

        assert!(matches!(env.translate(Point::new2(10, 0), 2), Err(Error::Bounds(_))));
    }

    #[test]
    fn binary_dump_roundtrip() {
        let env = Environment::generate(&spec(0.7, 3, 8)).unwrap();
        let mut buf = Vec::new();
        env.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 * 4 + 4 * 27 * 27 * 2);
        let back = Environment::read_from(&buf[..]).unwrap();
        assert_eq!(back, env);
        buf[0] = b'X';
        assert!(matches!(Environment::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn disjoint_bond_indicators_uncorrelated() {
        let base = spec(0.7, 1, 0);
        let e1 = EdgeRef::from_base(Point::new2(-1, -1), 0);
        let e2 = EdgeRef::from_base(Point::new2(0, 0), 1);
        let n = 1000;
        let (mut s1, mut s2, mut s12) = (0.0, 0.0, 0.0);
        for seed in 0..n {
            let env = Environment::generate(&base.with_seed(seed)).unwrap();
            let a = env.is_open(&e1).unwrap() as u8 as f64;
            let b = env.is_open(&e2).unwrap() as u8 as f64;
            s1 += a;
            s2 += b;
            s12 += a * b;
        }
        let nf = n as f64;
        let cov = s12 / nf - (s1 / nf) * (s2 / nf);
        let corr = cov / (0.7 * 0.3);
        assert!(corr.abs() <= 3.0 / nf.sqrt(), "{corr}");
    }
}
