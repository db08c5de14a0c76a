//! Bellman Hamiltonians, empirical checks of the Lipschitz assumptions on `H`,
//! and a backward dynamic-programming solver on enumerated families.

mod dp;
pub mod expr;
pub mod problem;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::path_space::{norm, stopped_sup_dist, EnumeratedFamily, GridPath, Point};

pub use problem::{BellmanProblem, PROBLEM_SCHEMA};
pub use dp::{dpp_residual, solve_dp, solve_dp_families, DpOptions, DpSolution, ValueTable};

/// Declared Lipschitz structure of a Hamiltonian in the path variable.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub enum LipschitzDecl {
    #[default]
    Unknown,
    /// `|H(t,x,s) - H(t,y,s)| <= L (1 + |s|) ||x(. ^ t) - y(. ^ t)||`
    Global(f64),
    /// `(R, L_R)`: the same without the `(1 + |s|)` factor, for `|s| <= R`.
    PerRadius(Vec<(f64, f64)>),
}

pub trait Hamiltonian: Send + Sync {
    fn eval(&self, t_idx: usize, x: &GridPath, s: &[f64]) -> Result<f64>;

    fn lipschitz(&self) -> LipschitzDecl {
        LipschitzDecl::Unknown
    }
}

impl<H: Hamiltonian + ?Sized> Hamiltonian for &H {
    fn eval(&self, t_idx: usize, x: &GridPath, s: &[f64]) -> Result<f64> {
        (**self).eval(t_idx, x, s)
    }
    fn lipschitz(&self) -> LipschitzDecl {
        (**self).lipschitz()
    }
}

impl<H: Hamiltonian + ?Sized> Hamiltonian for Arc<H> {
    fn eval(&self, t_idx: usize, x: &GridPath, s: &[f64]) -> Result<f64> {
        (**self).eval(t_idx, x, s)
    }
    fn lipschitz(&self) -> LipschitzDecl {
        (**self).lipschitz()
    }
}

type HFn = dyn Fn(usize, &GridPath, &[f64]) -> f64 + Send + Sync;

/// Hamiltonian from a closure.
#[derive(Clone)]
pub struct FnHamiltonian {
    eval: Arc<HFn>,
    decl: LipschitzDecl,
}

impl FnHamiltonian {
    pub fn new(eval: impl Fn(usize, &GridPath, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FnHamiltonian { eval: Arc::new(eval), decl: LipschitzDecl::Unknown }
    }

    pub fn with_lipschitz(mut self, decl: LipschitzDecl) -> Self {
        self.decl = decl;
        self
    }
}

impl fmt::Debug for FnHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnHamiltonian").field("decl", &self.decl).finish_non_exhaustive()
    }
}

impl Hamiltonian for FnHamiltonian {
    fn eval(&self, t_idx: usize, x: &GridPath, s: &[f64]) -> Result<f64> {
        Ok((self.eval)(t_idx, x, s))
    }
    fn lipschitz(&self) -> LipschitzDecl {
        self.decl.clone()
    }
}

type DynamicsFn = dyn Fn(usize, &GridPath, &[f64]) -> Result<Point> + Send + Sync;
type CostFn = dyn Fn(usize, &GridPath, &[f64]) -> Result<f64> + Send + Sync;
type TerminalFn = dyn Fn(&GridPath) -> Result<f64> + Send + Sync;

/// Control data `(U, f, g, sigma)` of a Bellman Hamiltonian
/// `H(t, x, s) = min_{u in U} <f(t, x, u), s> + g(t, x, u)`.
#[derive(Clone)]
pub struct BellmanData {
    controls: Vec<Point>,
    f: Arc<DynamicsFn>,
    g: Arc<CostFn>,
    terminal: Arc<TerminalFn>,
    decl: LipschitzDecl,
}

impl fmt::Debug for BellmanData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BellmanData").field("controls", &self.controls).finish_non_exhaustive()
    }
}

impl BellmanData {
    pub fn new(
        controls: Vec<Point>,
        f: impl Fn(usize, &GridPath, &[f64]) -> Result<Point> + Send + Sync + 'static,
        g: impl Fn(usize, &GridPath, &[f64]) -> Result<f64> + Send + Sync + 'static,
        terminal: impl Fn(&GridPath) -> Result<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::EmptyControls);
        }
        Ok(BellmanData {
            controls,
            f: Arc::new(f),
            g: Arc::new(g),
            terminal: Arc::new(terminal),
            decl: LipschitzDecl::Unknown,
        })
    }

    /// `f = u`, `g = 0`, `U = {-1, 1}`, terminal `x(T)`, scalar state. Its
    /// value is `x(t) - (T - t)` and its Hamiltonian `-|s|`.
    pub fn unit_speed() -> Self {
        let mut d = BellmanData::new(
            vec![Point::from_slice(&[-1.0]), Point::from_slice(&[1.0])],
            |_, _, u| Ok(Point::from_slice(u)),
            |_, _, _| Ok(0.0),
            |x| Ok(x.at(x.spec().m_fut)[0]),
        )
        .expect("non-empty controls");
        d.decl = LipschitzDecl::Global(0.0);
        d
    }

    pub fn with_lipschitz(mut self, decl: LipschitzDecl) -> Self {
        self.decl = decl;
        self
    }

    pub fn controls(&self) -> &[Point] {
        &self.controls
    }

    pub fn f(&self, t_idx: usize, x: &GridPath, u: &[f64]) -> Result<Point> {
        (self.f)(t_idx, x, u)
    }

    pub fn g(&self, t_idx: usize, x: &GridPath, u: &[f64]) -> Result<f64> {
        (self.g)(t_idx, x, u)
    }

    pub fn terminal(&self, x: &GridPath) -> Result<f64> {
        (self.terminal)(x)
    }
}

/// `min_u <f(t, x, u), s> + g(t, x, u)`.
pub fn bellman_h(data: &BellmanData, t_idx: usize, x: &GridPath, s: &[f64]) -> Result<f64> {
    if data.controls.is_empty() {
        return Err(Error::EmptyControls);
    }
    let mut best = f64::INFINITY;
    for u in &data.controls {
        let f = data.f(t_idx, x, u)?;
        if f.len() != s.len() {
            return Err(Error::DimensionMismatch { expected: f.len(), got: s.len() });
        }
        let lin: f64 = f.iter().zip(s).map(|(a, b)| a * b).sum();
        best = best.min(lin + data.g(t_idx, x, u)?);
    }
    Ok(best)
}

impl Hamiltonian for BellmanData {
    fn eval(&self, t_idx: usize, x: &GridPath, s: &[f64]) -> Result<f64> {
        bellman_h(self, t_idx, x, s)
    }
    fn lipschitz(&self) -> LipschitzDecl {
        self.decl.clone()
    }
}

/// Deterministic sample of co-vectors on the spheres `|s| = R`: `+-R e_i`
/// plus `extra` random directions per radius.
pub fn sphere_samples(n: usize, radii: &[f64], extra: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &r in radii {
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut s: Point = smallvec::smallvec![0.0; n];
                s[i] = sign * r;
                out.push(s);
            }
        }
        for _ in 0..extra {
            let v: Point = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let len = norm(&v);
            if len > 1e-3 {
                out.push(v.iter().map(|c| c * r / len).collect());
            }
        }
    }
    out
}

/// Empirical path-Lipschitz constant of `H` on one radius shell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShellConstant {
    pub radius: f64,
    pub constant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionA2Report {
    /// Largest normalized quotient over the whole sample.
    pub constant: f64,
    /// Per radius `|s|` present in the sample.
    pub shells: Vec<ShellConstant>,
    /// The normalized quotient keeps rising across shells, faster than the
    /// square root of the radius ratio; a bounded constant cannot do that.
    pub grows_with_radius: bool,
}

/// Distinct stopped paths at node `t`, as member indices.
fn distinct_stopped(stop: &[Vec<usize>], t: usize) -> Vec<usize> {
    let mut v: Vec<usize> = stop[t].clone();
    v.sort_unstable();
    v.dedup();
    v
}

/// `max |H(t,x,s) - H(t,y,s)| / (weight(s) ||x(. ^ t) - y(. ^ t)||)` over
/// nodes, distinct stopped pairs and the given co-vectors, grouped by `|s|`.
fn path_quotients<H: Hamiltonian + ?Sized>(
    h: &H,
    family: &EnumeratedFamily,
    samples: &[Point],
    weight: impl Fn(&[f64]) -> f64 + Sync + Send,
) -> Result<Vec<f64>> {
    let spec = *family.spec();
    let stop = family.stop_table()?;
    for s in samples {
        if s.len() != spec.n {
            return Err(Error::DimensionMismatch { expected: spec.n, got: s.len() });
        }
    }
    let mut worst = vec![0.0_f64; samples.len()];
    for t in 0..=spec.m_fut {
        let ids = distinct_stopped(&stop, t);
        let pairs = (ids.len() as u128) * (ids.len() as u128) * (samples.len() as u128);
        let cap = family.family.cap.saturating_mul(64);
        if pairs > cap as u128 {
            return Err(Error::CapExceeded { requested: pairs, cap });
        }
        let values: Vec<Vec<f64>> = par::try_map_range(ids.len(), |a| {
            samples.iter().map(|s| h.eval(t, &family.paths[ids[a]], s)).collect::<Result<Vec<f64>>>()
        })?;
        let rows = par::try_map_range(ids.len(), |a| -> Result<Vec<f64>> {
            let mut w = vec![0.0_f64; samples.len()];
            for b in 0..ids.len() {
                if a == b {
                    continue;
                }
                let d = stopped_sup_dist(&family.paths[ids[a]], t, &family.paths[ids[b]], t)?;
                if d == 0.0 {
                    continue;
                }
                for (k, s) in samples.iter().enumerate() {
                    let q = (values[a][k] - values[b][k]).abs() / (weight(s) * d);
                    w[k] = w[k].max(q);
                }
            }
            Ok(w)
        })?;
        for r in rows {
            for (k, q) in r.into_iter().enumerate() {
                worst[k] = worst[k].max(q);
            }
        }
    }
    Ok(worst)
}

fn radius_key(s: &[f64]) -> f64 {
    // group radii that differ only by rounding
    let r = norm(s);
    (r * 1e9).round() / 1e9
}

/// Empirical `L_{H,D}` with the `(1 + |s|)` weight, over the given co-vectors.
pub fn check_assumption_a2<H: Hamiltonian + ?Sized>(
    h: &H,
    family: &EnumeratedFamily,
    samples: &[Point],
) -> Result<AssumptionA2Report> {
    let q = path_quotients(h, family, samples, |s| 1.0 + norm(s))?;
    let mut shells: Vec<ShellConstant> = Vec::new();
    for (s, c) in samples.iter().zip(&q) {
        let r = radius_key(s);
        match shells.iter_mut().find(|sh| sh.radius == r) {
            Some(sh) => sh.constant = sh.constant.max(*c),
            None => shells.push(ShellConstant { radius: r, constant: *c }),
        }
    }
    shells.sort_by(|a, b| a.radius.total_cmp(&b.radius));
    let grows_with_radius = match (shells.first(), shells.last()) {
        (Some(lo), Some(hi)) if lo.radius > 0.0 && hi.radius > lo.radius && lo.constant > 0.0 => {
            shells.windows(2).all(|w| w[1].constant >= w[0].constant)
                && hi.constant > (hi.radius / lo.radius).sqrt() * lo.constant
        }
        _ => false,
    };
    Ok(AssumptionA2Report { constant: q.iter().copied().fold(0.0, f64::max), shells, grows_with_radius })
}

/// Empirical constant per ball `B(R)` without the `(1 + |s|)` weight.
pub fn check_assumption_a3<H: Hamiltonian + ?Sized>(
    h: &H,
    family: &EnumeratedFamily,
    samples: &[Point],
    radii: &[f64],
) -> Result<Vec<ShellConstant>> {
    let q = path_quotients(h, family, samples, |_| 1.0)?;
    Ok(radii
        .iter()
        .map(|&r| ShellConstant {
            radius: r,
            constant: samples
                .iter()
                .zip(&q)
                .filter(|(s, _)| norm(s) <= r * (1.0 + 1e-12))
                .map(|(_, c)| *c)
                .fold(0.0, f64::max),
        })
        .collect())
}
