//! Discretized paths on `[-h, T]`: grids, stopping, sup-distances, constant
//! velocity extensions and finite path families.
//!
//! A [`GridPath`] stores one sample in `R^n` per grid node and is read as the
//! piecewise-linear interpolant of those samples. Time indices handed to the
//! public operations (`t_idx`) always count *future* nodes: `0` is `t = 0`,
//! `m_fut` is `t = T`. Past nodes are only addressed through the path itself.
//!
//! Node-wise maxima are exact sup-norms for piecewise-linear paths on a common
//! grid: on each interval the difference of two such paths is affine and the
//! Euclidean norm of an affine map is convex, so its maximum sits at an end
//! node.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::par;

/// Small inline vector for points of `R^n`.
pub type Point = SmallVec<[f64; 4]>;

pub const DEFAULT_CAP: u64 = 1_000_000;

/// Uniform grids on `[-h, 0]` and `[0, T]`; `t = 0` is always a node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    pub m_past: usize,
    pub m_fut: usize,
}

impl GridSpec {
    pub fn new(h: f64, horizon: f64, n: usize, m_past: usize, m_fut: usize) -> Result<Self> {
        let spec = GridSpec { h, horizon, n, m_past, m_fut };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("T must be positive, got {}", self.horizon)));
        }
        if !(self.h.is_finite() && self.h >= 0.0) {
            return Err(Error::InvalidGrid(format!("h must be non-negative, got {}", self.h)));
        }
        if self.n == 0 {
            return Err(Error::InvalidGrid("state dimension n must be positive".into()));
        }
        if self.m_fut == 0 {
            return Err(Error::InvalidGrid("m_fut must be positive".into()));
        }
        if self.h > 0.0 && self.m_past == 0 {
            return Err(Error::InvalidGrid("h > 0 needs m_past >= 1".into()));
        }
        if self.h == 0.0 && self.m_past != 0 {
            return Err(Error::InvalidGrid("h = 0 needs m_past = 0".into()));
        }
        Ok(())
    }

    /// Total number of nodes on `[-h, T]`.
    pub fn node_count(&self) -> usize {
        self.m_past + self.m_fut + 1
    }

    /// Global node index of future node `t_idx`.
    pub fn global(&self, t_idx: usize) -> usize {
        self.m_past + t_idx
    }

    /// Future grid spacing `T / m_fut`.
    pub fn delta(&self) -> f64 {
        self.horizon / self.m_fut as f64
    }

    pub fn past_delta(&self) -> f64 {
        if self.m_past == 0 {
            0.0
        } else {
            self.h / self.m_past as f64
        }
    }

    /// Time of the future node `t_idx`.
    pub fn time(&self, t_idx: usize) -> f64 {
        if t_idx == self.m_fut {
            self.horizon
        } else {
            self.horizon * t_idx as f64 / self.m_fut as f64
        }
    }

    /// Time of global node `i`.
    pub fn node_time(&self, i: usize) -> f64 {
        if i < self.m_past {
            -(self.h * (self.m_past - i) as f64) / self.m_past as f64
        } else {
            self.time(i - self.m_past)
        }
    }

    /// Length of the interval between global nodes `i` and `i + 1`.
    pub fn interval(&self, i: usize) -> f64 {
        if i < self.m_past {
            self.past_delta()
        } else {
            self.delta()
        }
    }

    pub fn check_t_idx(&self, t_idx: usize) -> Result<()> {
        if t_idx > self.m_fut {
            Err(Error::IndexOutOfRange { index: t_idx, max: self.m_fut })
        } else {
            Ok(())
        }
    }

    /// The same time window with every interval split into `factor` pieces.
    pub fn refined(&self, factor: usize) -> GridSpec {
        GridSpec { m_past: self.m_past * factor, m_fut: self.m_fut * factor, ..*self }
    }

    /// Smallest future index whose time is `>= time` (within rounding), if any.
    pub fn t_idx_of(&self, time: f64) -> Option<usize> {
        let k = (time / self.delta()).round();
        if k < 0.0 || k > self.m_fut as f64 {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - time).abs() <= 1e-12 * self.horizon.max(1.0)).then_some(k)
    }
}

/// Hashable identity of a path prefix: the bit patterns of its samples, with
/// `-0.0` folded into `+0.0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathKey(Vec<u64>);

fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// A sampled continuous path `x: [-h, T] -> R^n`, linear between nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    spec: GridSpec,
    /// Node-major: `samples[i * n + c]` is coordinate `c` at global node `i`.
    samples: Vec<f64>,
}

impl GridPath {
    pub fn new(spec: GridSpec, samples: Vec<f64>) -> Result<Self> {
        let expected = spec.node_count() * spec.n;
        if samples.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: samples.len() });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("path samples must be finite".into()));
        }
        Ok(GridPath { spec, samples })
    }

    /// Sample a function of time at every node.
    pub fn from_fn(spec: GridSpec, f: impl Fn(f64) -> Point) -> Result<Self> {
        let mut samples = Vec::with_capacity(spec.node_count() * spec.n);
        for i in 0..spec.node_count() {
            let p = f(spec.node_time(i));
            if p.len() != spec.n {
                return Err(Error::DimensionMismatch { expected: spec.n, got: p.len() });
            }
            samples.extend_from_slice(&p);
        }
        GridPath::new(spec, samples)
    }

    pub fn constant(spec: GridSpec, value: &[f64]) -> Result<Self> {
        GridPath::from_fn(spec, |_| Point::from_slice(value))
    }

    /// Scalar path from its node values (n = 1).
    pub fn scalar(spec: GridSpec, values: &[f64]) -> Result<Self> {
        if spec.n != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: spec.n });
        }
        GridPath::new(spec, values.to_vec())
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Sample at global node `i`.
    pub fn node(&self, i: usize) -> &[f64] {
        let n = self.spec.n;
        &self.samples[i * n..(i + 1) * n]
    }

    /// Sample at future node `t_idx`, i.e. `x(t)`.
    pub fn at(&self, t_idx: usize) -> &[f64] {
        self.node(self.spec.global(t_idx))
    }

    /// Linear interpolation at an arbitrary time in `[-h, T]` (clamped).
    pub fn value_at(&self, time: f64) -> Point {
        let spec = &self.spec;
        let last = spec.node_count() - 1;
        if time <= spec.node_time(0) {
            return Point::from_slice(self.node(0));
        }
        if time >= spec.horizon {
            return Point::from_slice(self.node(last));
        }
        // locate the interval
        let i = if time < 0.0 {
            let pd = spec.past_delta();
            (((time + spec.h) / pd).floor() as usize).min(spec.m_past - 1)
        } else {
            spec.m_past + ((time / spec.delta()).floor() as usize).min(spec.m_fut - 1)
        };
        let (t0, t1) = (spec.node_time(i), spec.node_time(i + 1));
        let w = (time - t0) / (t1 - t0);
        self.node(i).iter().zip(self.node(i + 1)).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// Key of the prefix up to (and including) future node `t_idx`; identifies
    /// the stopped path `x(. ^ t)` among paths on the same grid.
    pub fn stopped_key(&self, t_idx: usize) -> PathKey {
        let end = (self.spec.global(t_idx) + 1) * self.spec.n;
        PathKey(self.samples[..end].iter().map(|&v| canonical_bits(v)).collect())
    }

    /// Key of the whole path.
    pub fn key(&self) -> PathKey {
        self.stopped_key(self.spec.m_fut)
    }

    /// Rebuild a stopped path from a prefix key.
    pub fn from_stopped_key(spec: GridSpec, key: &PathKey) -> Result<Self> {
        let n = spec.n;
        if key.0.is_empty() || !key.0.len().is_multiple_of(n) || key.0.len() > spec.node_count() * n {
            return Err(Error::DimensionMismatch { expected: spec.node_count() * n, got: key.0.len() });
        }
        let mut samples: Vec<f64> = key.0.iter().map(|&b| f64::from_bits(b)).collect();
        let last: Vec<f64> = samples[samples.len() - n..].to_vec();
        while samples.len() < spec.node_count() * n {
            samples.extend_from_slice(&last);
        }
        GridPath::new(spec, samples)
    }

    /// Same path on a grid refined by `factor` (exact for paths linear
    /// between the coarse nodes).
    pub fn refine(&self, factor: usize) -> Result<GridPath> {
        if factor == 0 {
            return Err(Error::InvalidGrid("refinement factor must be positive".into()));
        }
        let fine = self.spec.refined(factor);
        let n = self.spec.n;
        let mut samples = Vec::with_capacity(fine.node_count() * n);
        for i in 0..self.spec.node_count() - 1 {
            let (a, b) = (self.node(i), self.node(i + 1));
            for s in 0..factor {
                let w = s as f64 / factor as f64;
                samples.extend(a.iter().zip(b).map(|(p, q)| p + w * (q - p)));
            }
        }
        samples.extend_from_slice(self.node(self.spec.node_count() - 1));
        GridPath::new(fine, samples)
    }

    /// One CSV row per node: `time, x_0, ..., x_{n-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..self.spec.n).map(|c| format!("x{c}")));
        w.write_record(&header)?;
        for i in 0..self.spec.node_count() {
            let mut row = vec![self.spec.node_time(i).to_string()];
            row.extend(self.node(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A pair `(t, x(.))` with `t` a future node.
#[derive(Clone, Debug, PartialEq)]
pub struct PointedPath {
    pub t_idx: usize,
    pub path: GridPath,
}

impl PointedPath {
    pub fn new(t_idx: usize, path: GridPath) -> Result<Self> {
        path.spec().check_t_idx(t_idx)?;
        Ok(PointedPath { t_idx, path })
    }

    pub fn time(&self) -> f64 {
        self.path.spec().time(self.t_idx)
    }
}

fn same_spec(x: &GridPath, y: &GridPath) -> Result<()> {
    if x.spec() == y.spec() {
        Ok(())
    } else {
        Err(Error::SpecMismatch)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// The stopped path `x(. ^ t)`.
pub fn stop(path: &GridPath, t_idx: usize) -> Result<GridPath> {
    let spec = *path.spec();
    spec.check_t_idx(t_idx)?;
    let n = spec.n;
    let g = spec.global(t_idx);
    let mut samples = path.samples.clone();
    let frozen: Point = Point::from_slice(path.node(g));
    for i in g + 1..spec.node_count() {
        samples[i * n..(i + 1) * n].copy_from_slice(&frozen);
    }
    Ok(GridPath { spec, samples })
}

/// `max_{xi <= t} ||x(xi) - y(xi)||` over grid nodes.
pub fn sup_dist_upto(x: &GridPath, y: &GridPath, t_idx: usize) -> Result<f64> {
    same_spec(x, y)?;
    x.spec().check_t_idx(t_idx)?;
    Ok(sup_dist_nodes(x, y, x.spec().global(t_idx)))
}

/// Unchecked node-max over global nodes `0..=last`.
pub(crate) fn sup_dist_nodes(x: &GridPath, y: &GridPath, last: usize) -> f64 {
    (0..=last).map(|i| dist(x.node(i), y.node(i))).fold(0.0, f64::max)
}

/// `|| x(. ^ t) - y(. ^ tau) ||_inf` over the whole grid.
pub fn stopped_sup_dist(x: &GridPath, t_idx: usize, y: &GridPath, tau_idx: usize) -> Result<f64> {
    same_spec(x, y)?;
    let spec = x.spec();
    spec.check_t_idx(t_idx)?;
    spec.check_t_idx(tau_idx)?;
    let (gt, gs) = (spec.global(t_idx), spec.global(tau_idx));
    Ok((0..spec.node_count())
        .map(|i| dist(x.node(i.min(gt)), y.node(i.min(gs))))
        .fold(0.0, f64::max))
}

/// Whether `(t, x(. ^ t)) = (tau, y(. ^ tau))`, compared exactly.
pub fn same_stopped(x: &GridPath, t_idx: usize, y: &GridPath, tau_idx: usize) -> bool {
    if t_idx != tau_idx || x.spec() != y.spec() {
        return false;
    }
    let end = (x.spec().global(t_idx) + 1) * x.spec().n;
    x.samples[..end] == y.samples[..end]
}

/// The path `z_{t,x,v}`: `x(. ^ t)` up to `t`, then `x(t) + v (xi - t)`.
///
/// Future samples are accumulated interval by interval, the same arithmetic
/// [`PathFamily::enumerate`] uses, so extensions of family members by
/// alphabet velocities reproduce members bit for bit.
pub fn lip_extension(t_idx: usize, x: &GridPath, v: &[f64]) -> Result<GridPath> {
    let spec = *x.spec();
    spec.check_t_idx(t_idx)?;
    if t_idx == spec.m_fut {
        return Err(Error::AtHorizon);
    }
    if v.len() != spec.n {
        return Err(Error::DimensionMismatch { expected: spec.n, got: v.len() });
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidGrid("extension velocity must be finite".into()));
    }
    let n = spec.n;
    let mut samples = x.samples.clone();
    for i in spec.global(t_idx)..spec.node_count() - 1 {
        let dt = spec.interval(i);
        for c in 0..n {
            samples[(i + 1) * n + c] = samples[i * n + c] + v[c] * dt;
        }
    }
    Ok(GridPath { spec, samples })
}

/// Lipschitz constant of the path restricted to `[0, T]`.
pub fn lip_constant(path: &GridPath) -> f64 {
    let spec = path.spec();
    (spec.m_past..spec.node_count() - 1)
        .map(|i| dist(path.node(i + 1), path.node(i)) / spec.interval(i))
        .fold(0.0, f64::max)
}

/// One or many numbers; lets scalar problems write `[-1, 0, 1]` instead of
/// `[[-1], [0], [1]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorEntry {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl VectorEntry {
    pub fn into_vec(self) -> Vec<f64> {
        match self {
            VectorEntry::Scalar(s) => vec![s],
            VectorEntry::Vector(v) => v,
        }
    }
}

/// JSON form of a path family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    #[serde(default)]
    pub h: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    #[serde(default)]
    pub m_past: usize,
    pub m_fut: usize,
    pub slope_bound: f64,
    pub velocity_alphabet: Vec<VectorEntry>,
    #[serde(default)]
    pub start_values: Option<Vec<VectorEntry>>,
    #[serde(default)]
    pub start_box: Option<f64>,
    #[serde(default)]
    pub cap: Option<u64>,
}

impl FamilyConfig {
    pub fn build(&self) -> Result<PathFamily> {
        let spec = GridSpec::new(self.h, self.horizon, self.n, self.m_past, self.m_fut)?;
        let alphabet = self.velocity_alphabet.iter().cloned().map(VectorEntry::into_vec).collect();
        let starts = match &self.start_values {
            Some(s) => s.iter().cloned().map(VectorEntry::into_vec).collect(),
            None => vec![vec![0.0; self.n]],
        };
        PathFamily::new(spec, self.slope_bound, alphabet, starts, self.start_box, self.cap.unwrap_or(DEFAULT_CAP))
    }
}

/// A finite family of piecewise-linear paths: a start lattice at `-h` and one
/// alphabet velocity per interval. Future intervals also admit the zero
/// velocity, which makes the family closed under stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct PathFamily {
    pub spec: GridSpec,
    pub start_box: f64,
    pub slope_bound: f64,
    pub velocity_alphabet: Vec<Point>,
    pub start_values: Vec<Point>,
    pub cap: u64,
}

impl PathFamily {
    pub fn new(
        spec: GridSpec,
        slope_bound: f64,
        alphabet: Vec<Vec<f64>>,
        starts: Vec<Vec<f64>>,
        start_box: Option<f64>,
        cap: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if !(slope_bound.is_finite() && slope_bound >= 0.0) {
            return Err(Error::InvalidFamily(format!("slope_bound must be finite and >= 0, got {slope_bound}")));
        }
        if alphabet.is_empty() {
            return Err(Error::InvalidFamily("velocity alphabet is empty".into()));
        }
        if starts.is_empty() {
            return Err(Error::InvalidFamily("start lattice is empty".into()));
        }
        let mut velocity_alphabet: Vec<Point> = Vec::new();
        for v in alphabet {
            if v.len() != spec.n {
                return Err(Error::DimensionMismatch { expected: spec.n, got: v.len() });
            }
            if v.iter().any(|c| !c.is_finite()) || norm(&v) > slope_bound * (1.0 + 1e-12) {
                return Err(Error::InvalidFamily(format!("velocity {v:?} exceeds slope bound {slope_bound}")));
            }
            let v = Point::from_vec(v);
            if !velocity_alphabet.contains(&v) {
                velocity_alphabet.push(v);
            }
        }
        let start_box = start_box.unwrap_or_else(|| starts.iter().map(|s| norm(s)).fold(0.0, f64::max));
        let mut start_values: Vec<Point> = Vec::new();
        for s in starts {
            if s.len() != spec.n {
                return Err(Error::DimensionMismatch { expected: spec.n, got: s.len() });
            }
            if s.iter().any(|c| !c.is_finite()) || norm(&s) > start_box * (1.0 + 1e-12) {
                return Err(Error::InvalidFamily(format!("start value {s:?} outside start box {start_box}")));
            }
            let s = Point::from_vec(s);
            if !start_values.contains(&s) {
                start_values.push(s);
            }
        }
        Ok(PathFamily { spec, start_box, slope_bound, velocity_alphabet, start_values, cap })
    }

    /// Always true: enumeration adds the zero velocity on `[0, T]`.
    pub fn include_stopped(&self) -> bool {
        true
    }

    /// Velocities admissible on future intervals (alphabet plus zero).
    pub fn future_alphabet(&self) -> Vec<Point> {
        let mut a = self.velocity_alphabet.clone();
        let zero: Point = smallvec::smallvec![0.0; self.spec.n];
        if !a.contains(&zero) {
            a.push(zero);
        }
        a
    }

    /// Number of members, or `None` if it does not fit in `u128`.
    pub fn size(&self) -> Option<u128> {
        let past = (self.velocity_alphabet.len() as u128).checked_pow(self.spec.m_past as u32)?;
        let fut = (self.future_alphabet().len() as u128).checked_pow(self.spec.m_fut as u32)?;
        (self.start_values.len() as u128).checked_mul(past)?.checked_mul(fut)
    }

    /// All members in lexicographic order of (start, past word, future word).
    pub fn enumerate(&self) -> Result<Vec<GridPath>> {
        let size = self.size().unwrap_or(u128::MAX);
        if size > self.cap as u128 {
            return Err(Error::CapExceeded { requested: size, cap: self.cap });
        }
        let spec = self.spec;
        let n = spec.n;
        let past = &self.velocity_alphabet;
        let fut = self.future_alphabet();
        let words = (past.len() as u128).pow(spec.m_past as u32) * (fut.len() as u128).pow(spec.m_fut as u32);
        let words = words as usize;
        let build = |idx: usize| {
            let start = &self.start_values[idx / words];
            let mut code = idx % words;
            // mixed radix digits, last interval least significant
            let mut digits = vec![0usize; spec.node_count() - 1];
            for i in (0..digits.len()).rev() {
                let base = if i < spec.m_past { past.len() } else { fut.len() };
                digits[i] = code % base;
                code /= base;
            }
            let mut samples = Vec::with_capacity(spec.node_count() * n);
            samples.extend_from_slice(start);
            for (i, &d) in digits.iter().enumerate() {
                let v = if i < spec.m_past { &past[d] } else { &fut[d] };
                let dt = spec.interval(i);
                for c in 0..n {
                    let prev = samples[i * n + c];
                    samples.push(prev + v[c] * dt);
                }
            }
            GridPath { spec, samples }
        };
        Ok(par::map_range(size as usize, build))
    }

    /// Enumerate and index the members.
    pub fn members(&self) -> Result<EnumeratedFamily> {
        let paths = self.enumerate()?;
        Ok(EnumeratedFamily::from_paths(self.clone(), paths))
    }
}

/// An enumerated family with a key index for membership queries.
#[derive(Clone, Debug)]
pub struct EnumeratedFamily {
    pub family: PathFamily,
    pub paths: Vec<GridPath>,
    index: HashMap<PathKey, usize>,
}

impl EnumeratedFamily {
    pub fn from_paths(family: PathFamily, paths: Vec<GridPath>) -> Self {
        let mut index = HashMap::with_capacity(paths.len());
        for (i, p) in paths.iter().enumerate() {
            index.entry(p.key()).or_insert(i);
        }
        EnumeratedFamily { family, paths, index }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.family.spec
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn index_of(&self, path: &GridPath) -> Option<usize> {
        if path.spec() != self.spec() {
            return None;
        }
        self.index.get(&path.key()).copied()
    }

    pub fn contains(&self, path: &GridPath) -> bool {
        self.index_of(path).is_some()
    }

    /// Table `stop_index[t][i]` = member index of `stop(paths[i], t)`.
    pub fn stop_table(&self) -> Result<Vec<Vec<usize>>> {
        (0..=self.spec().m_fut)
            .map(|t| {
                par::try_map_range(self.len(), |i| {
                    let s = stop(&self.paths[i], t)?;
                    self.index_of(&s)
                        .ok_or_else(|| Error::InvalidFamily("family is not closed under stopping".into()))
                })
            })
            .collect()
    }
}
