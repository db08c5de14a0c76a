//! Doubling of variables on a finite family: maximize
//!
//! ```text
//! Phi(t, x, tau, y) = phi1(t, x) - phi2(tau, y)
//!                   - alpha (2T - t - tau) - (t - tau)^2 / delta - V^L(t, x, tau, y) / eps
//! ```
//!
//! over `([0, T] x D)^2`, replay the estimates that hold at the maximizer,
//! build the two test functionals and evaluate the Hamiltonian gap that a
//! genuine sub/supersolution pair would have to produce.
//!
//! Everything here is exact on the grid except the final Hamiltonian step,
//! whose continuum argument has no grid analogue: verdicts are diagnostics,
//! not proofs.

use serde::Serialize;

use crate::ci_calculus::{CiPair, Functional};
use crate::control::Hamiltonian;
use crate::error::{Error, Result};
use crate::par;
use crate::path_space::{
    dist, lip_extension, norm, stopped_sup_dist, sup_dist_nodes, EnumeratedFamily, GridPath, Point, PointedPath,
};
use crate::penalty::{penalty_parts, slice_functional, PenaltyParams, PenaltySlice, Side};

pub const REPORT_SCHEMA: &str = "cihj.doubling.v1";

/// One `(eps, delta)` pair together with the `alpha` in force.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DoublingParams {
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoublingConfig {
    /// `(eps, delta)`, strictly decreasing in both coordinates.
    pub schedule: Vec<(f64, f64)>,
    /// `b <= tolerance` counts as "comparison holds"; also the slack on the
    /// terminal condition `phi1(T, .) <= phi2(T, .)`.
    pub tolerance: f64,
}

impl DoublingConfig {
    pub fn new(schedule: Vec<(f64, f64)>, tolerance: f64) -> Result<Self> {
        if schedule.is_empty() {
            return Err(Error::Config("schedule is empty".into()));
        }
        for &(e, d) in &schedule {
            if !(e.is_finite() && e > 0.0 && d.is_finite() && d > 0.0) {
                return Err(Error::Config(format!("schedule entry ({e}, {d}) must be positive and finite")));
            }
        }
        for w in schedule.windows(2) {
            if !(w[1].0 < w[0].0 && w[1].1 < w[0].1) {
                return Err(Error::Config("schedule must decrease strictly in both eps and delta".into()));
            }
        }
        if !(tolerance.is_finite() && tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance must be finite and >= 0, got {tolerance}")));
        }
        Ok(DoublingConfig { schedule, tolerance })
    }

    /// `eps = delta = 2^-k` for `k = k0..k1`.
    pub fn dyadic(k0: i32, k1: i32) -> Self {
        let schedule = (k0..=k1).map(|k| (0.5_f64.powi(k), 0.5_f64.powi(k))).collect();
        DoublingConfig::new(schedule, 1e-12).expect("valid dyadic schedule")
    }
}

/// Discrete modulus of continuity: `omega(theta)` is the largest
/// `|phi(t, x) - phi(tau, y)|` over family points with
/// `|t - tau| + ||x - y||_inf <= theta`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Modulus {
    /// `(theta_k, omega_k)`, both strictly increasing.
    pub breakpoints: Vec<(f64, f64)>,
}

impl Modulus {
    pub fn eval(&self, theta: f64) -> f64 {
        let k = self.breakpoints.partition_point(|&(th, _)| th <= theta);
        if k == 0 {
            0.0
        } else {
            self.breakpoints[k - 1].1
        }
    }

    fn frontier(mut pairs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (th, w) in pairs {
            if w > out.last().map_or(0.0, |l| l.1) {
                if out.last().is_some_and(|l| l.0 == th) {
                    out.pop();
                }
                out.push((th, w));
            }
        }
        out
    }
}

/// `(t_idx, member index)` of one side of a maximizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Maximizer {
    pub x: PointedPath,
    pub x_idx: usize,
    pub y: PointedPath,
    pub y_idx: usize,
    pub value: f64,
    /// Number of quadruples attaining `value` exactly (including this one).
    pub ties: u64,
}

impl Maximizer {
    pub fn t_idx(&self) -> usize {
        self.x.t_idx
    }

    pub fn tau_idx(&self) -> usize {
        self.y.t_idx
    }

    pub fn summary(&self) -> MaximizerSummary {
        MaximizerSummary {
            t_idx: self.x.t_idx,
            t: self.x.time(),
            x_idx: self.x_idx,
            tau_idx: self.y.t_idx,
            tau: self.y.time(),
            y_idx: self.y_idx,
            value: self.value,
            ties: self.ties,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaximizerSummary {
    pub t_idx: usize,
    pub t: f64,
    pub x_idx: usize,
    pub tau_idx: usize,
    pub tau: f64,
    pub y_idx: usize,
    pub value: f64,
    pub ties: u64,
}

/// Margins (bound minus quantity) of the estimates at a maximizer; each is
/// non-negative when the estimate holds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimates {
    /// `Phi(m) - b / 2`
    pub phi_at_least_half_b: f64,
    /// `c delta - (t - tau)^2`
    pub time_gap_delta: f64,
    /// `c eps - V^L`
    pub penalty_eps: f64,
    /// `c eps - ||x(. ^ t) - y(. ^ tau)||^2`
    pub sup_norm_eps: f64,
    /// `c eps - (t - tau)^2`
    pub time_gap_eps: f64,
    /// `phi2(t, x) - phi2(tau, y) + alpha (tau - t) - V^L / eps`
    pub penalty_by_phi2: f64,
    /// `omega1(2 sqrt(c eps)) - |phi1(t, x) - phi1(tau, y)|`
    pub phi1_difference: f64,
    /// `omega2(2 sqrt(c eps)) - |phi2(t, x) - phi2(tau, y)|`
    pub phi2_difference: f64,
    /// `omega2(2 sqrt(c eps)) + alpha sqrt(c eps) - ||x(. ^ t) - y(. ^ tau)||^2 / eps`
    pub improved_sup_norm: f64,
    /// `omega1(T - t) + omega2(T - t) + omega2(2 sqrt(c eps)) - b / 2`
    pub terminal_distance_t: f64,
    /// `omega1(T - tau) + omega2(T - tau) + omega1(2 sqrt(c eps)) - b / 2`
    pub terminal_distance_tau: f64,
}

impl Estimates {
    pub fn named(&self) -> [(&'static str, f64); 11] {
        [
            ("phi_at_least_half_b", self.phi_at_least_half_b),
            ("time_gap_delta", self.time_gap_delta),
            ("penalty_eps", self.penalty_eps),
            ("sup_norm_eps", self.sup_norm_eps),
            ("time_gap_eps", self.time_gap_eps),
            ("penalty_by_phi2", self.penalty_by_phi2),
            ("phi1_difference", self.phi1_difference),
            ("phi2_difference", self.phi2_difference),
            ("improved_sup_norm", self.improved_sup_norm),
            ("terminal_distance_t", self.terminal_distance_t),
            ("terminal_distance_tau", self.terminal_distance_tau),
        ]
    }

    pub fn min_margin(&self) -> f64 {
        self.named().iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min)
    }
}

/// Derivative identities and touching checks of the two test functionals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Step4Ledger {
    pub dt_psi1: f64,
    pub dt_psi2: f64,
    /// `|(dt_psi1 - dt_psi2) + 2 alpha|`
    pub identity_error: f64,
    /// `4 ulp` of the largest term entering the time derivatives.
    pub identity_tolerance: f64,
    pub grad_psi1: Point,
    pub grad_psi2: Point,
    pub gradients_equal: bool,
    /// `8 |x(t) - y(tau)| / eps - |grad psi1|`
    pub gradient_bound_margin: f64,
    /// `min over the family of (phi1 - psi1)(m) - (phi1 - psi1)(t, x)`
    pub touching_psi1_margin: f64,
    /// `min over the family of (phi2 - psi2)(tau, y) - (phi2 - psi2)(m)`
    pub touching_psi2_margin: f64,
    /// Rounding allowance for `touching_psi2_margin`.
    pub touching_psi2_tolerance: f64,
}

impl Step4Ledger {
    pub fn holds(&self) -> bool {
        self.identity_error <= self.identity_tolerance
            && self.gradients_equal
            && self.gradient_bound_margin >= 0.0
            && self.touching_psi1_margin >= 0.0
            && self.touching_psi2_margin >= -self.touching_psi2_tolerance
    }
}

/// `phi1`, `phi2` tabulated on every point `(t, x)` of an enumerated family.
pub struct DoublingProblem<'a> {
    family: &'a EnumeratedFamily,
    params: PenaltyParams,
    phi1: Vec<f64>,
    phi2: Vec<f64>,
}

fn tabulate<F: Functional + ?Sized>(f: &F, family: &EnumeratedFamily) -> Result<Vec<f64>> {
    let n = family.len();
    par::try_map_range((family.spec().m_fut + 1) * n, |a| f.eval(a / n, &family.paths[a % n]))
}

impl<'a> DoublingProblem<'a> {
    pub fn new<F1, F2>(phi1: &F1, phi2: &F2, family: &'a EnumeratedFamily) -> Result<Self>
    where
        F1: Functional + ?Sized,
        F2: Functional + ?Sized,
    {
        let params = PenaltyParams::new(family.family.slope_bound)?;
        Ok(DoublingProblem { family, params, phi1: tabulate(phi1, family)?, phi2: tabulate(phi2, family)? })
    }

    pub fn family(&self) -> &EnumeratedFamily {
        self.family
    }

    fn points(&self) -> usize {
        self.phi1.len()
    }

    fn split(&self, a: usize) -> (usize, usize) {
        (a / self.family.len(), a % self.family.len())
    }

    fn index(&self, t: usize, i: usize) -> usize {
        t * self.family.len() + i
    }

    pub fn phi1_at(&self, t_idx: usize, i: usize) -> f64 {
        self.phi1[self.index(t_idx, i)]
    }

    pub fn phi2_at(&self, t_idx: usize, i: usize) -> f64 {
        self.phi2[self.index(t_idx, i)]
    }

    /// `(b, t_idx, member)` with `b = max phi1 - phi2` over the family.
    pub fn b(&self) -> (f64, usize, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..self.points() {
            let d = self.phi1[a] - self.phi2[a];
            if d > best.0 {
                best = (d, a);
            }
        }
        let (t, i) = self.split(best.1);
        (best.0, t, i)
    }

    /// `c = max phi1(t, x) - phi2(tau, y)` over pairs of family points.
    pub fn c(&self) -> f64 {
        let hi = self.phi1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.phi2.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    /// Largest terminal excess `phi1(T, x) - phi2(T, x)`, with its member.
    pub fn terminal_excess(&self) -> (f64, usize) {
        let m = self.family.spec().m_fut;
        (0..self.family.len())
            .map(|i| (self.phi1_at(m, i) - self.phi2_at(m, i), i))
            .fold((f64::NEG_INFINITY, 0), |acc, v| if v.0 > acc.0 { v } else { acc })
    }

    pub fn penalty_value(&self, t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath) -> Result<f64> {
        Ok(penalty_parts(t_idx, x, tau_idx, y, &self.params)?.vl.v)
    }

    /// `alpha (2T - t - tau) + (t - tau)^2 / delta + vl / eps`
    fn tail(&self, p: &DoublingParams, t_idx: usize, tau_idx: usize, vl: f64) -> f64 {
        let spec = self.family.spec();
        let (t, tau) = (spec.time(t_idx), spec.time(tau_idx));
        let dt = t - tau;
        p.alpha * (2.0 * spec.horizon - t - tau) + dt * dt / p.delta + vl / p.epsilon
    }

    /// `Phi` at two family points, from the tabulated functionals.
    pub fn phi_at(&self, p: &DoublingParams, (t, i): (usize, usize), (tau, j): (usize, usize)) -> Result<f64> {
        let vl = self.penalty_value(t, &self.family.paths[i], tau, &self.family.paths[j])?;
        Ok(self.phi1_at(t, i) - (self.phi2_at(tau, j) + self.tail(p, t, tau, vl)))
    }

    /// Exhaustive argmax of `Phi`; ties go to the lexicographically smallest
    /// `(t, x_idx, tau, y_idx)`.
    pub fn maximize(&self, p: &DoublingParams) -> Result<Maximizer> {
        let n = self.family.len();
        let pts = self.points();
        let total = (pts as u128) * (pts as u128);
        let cap = self.family.family.cap.saturating_mul(self.family.family.cap.max(1));
        if total > cap as u128 {
            return Err(Error::CapExceeded { requested: total, cap });
        }
        let rows = par::try_map_range(pts, |a| -> Result<(f64, usize, u64)> {
            let (t, i) = (a / n, a % n);
            let mut best = (f64::NEG_INFINITY, 0usize, 0u64);
            for b in 0..pts {
                let v = self.phi_at(p, (t, i), (b / n, b % n))?;
                if v > best.0 {
                    best = (v, b, 1);
                } else if v == best.0 {
                    best.2 += 1;
                }
            }
            Ok(best)
        })?;
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize, 0u64);
        for (a, (v, b, ties)) in rows.into_iter().enumerate() {
            if v > best.0 {
                best = (v, a, b, ties);
            } else if v == best.0 {
                best.3 += ties;
            }
        }
        let (value, a, b, ties) = best;
        let ((t, i), (tau, j)) = ((a / n, a % n), (b / n, b % n));
        Ok(Maximizer {
            x: PointedPath::new(t, self.family.paths[i].clone())?,
            x_idx: i,
            y: PointedPath::new(tau, self.family.paths[j].clone())?,
            y_idx: j,
            value,
            ties,
        })
    }

    /// Moduli of continuity of `phi1` and `phi2` on the family.
    pub fn moduli(&self) -> (Modulus, Modulus) {
        let spec = *self.family.spec();
        let last = spec.node_count() - 1;
        let pts = self.points();
        let rows = par::map_range(pts, |a| {
            let (t, i) = self.split(a);
            let mut r1 = Vec::new();
            let mut r2 = Vec::new();
            for b in a + 1..pts {
                let (tau, j) = self.split(b);
                let theta =
                    (spec.time(t) - spec.time(tau)).abs() + sup_dist_nodes(&self.family.paths[i], &self.family.paths[j], last);
                r1.push((theta, (self.phi1[a] - self.phi1[b]).abs()));
                r2.push((theta, (self.phi2[a] - self.phi2[b]).abs()));
            }
            (Modulus::frontier(r1), Modulus::frontier(r2))
        });
        let mut all1 = Vec::new();
        let mut all2 = Vec::new();
        for (r1, r2) in rows {
            all1.extend(r1);
            all2.extend(r2);
        }
        (Modulus { breakpoints: Modulus::frontier(all1) }, Modulus { breakpoints: Modulus::frontier(all2) })
    }

    /// Largest `eps` (by bisection) with
    /// `max(omega1, omega2)(2 sqrt(c eps)) <= b / 4`.
    pub fn eps_star(&self, b: f64, c: f64, w1: &Modulus, w2: &Modulus) -> f64 {
        let ok = |e: f64| {
            let th = 2.0 * (c * e).sqrt();
            w1.eval(th).max(w2.eval(th)) <= b / 4.0
        };
        let diam = w1.breakpoints.last().map_or(0.0, |l| l.0).max(w2.breakpoints.last().map_or(0.0, |l| l.0));
        let hi = (diam * diam / (4.0 * c)).max(f64::MIN_POSITIVE) * 2.0;
        if ok(hi) {
            return hi;
        }
        let (mut lo, mut hi) = (0.0, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn estimates(
        &self,
        p: &DoublingParams,
        m: &Maximizer,
        b: f64,
        c: f64,
        w1: &Modulus,
        w2: &Modulus,
    ) -> Result<Estimates> {
        let spec = *self.family.spec();
        let (t, tau) = (m.t_idx(), m.tau_idx());
        let (ts, taus) = (spec.time(t), spec.time(tau));
        let vl = self.penalty_value(t, &m.x.path, tau, &m.y.path)?;
        let sup = stopped_sup_dist(&m.x.path, t, &m.y.path, tau)?;
        let sup2 = sup * sup;
        let dt2 = (ts - taus) * (ts - taus);
        let root = (c * p.epsilon).sqrt();
        let (p1x, p1y) = (self.phi1_at(t, m.x_idx), self.phi1_at(tau, m.y_idx));
        let (p2x, p2y) = (self.phi2_at(t, m.x_idx), self.phi2_at(tau, m.y_idx));
        let horizon = spec.horizon;
        Ok(Estimates {
            phi_at_least_half_b: m.value - b / 2.0,
            time_gap_delta: c * p.delta - dt2,
            penalty_eps: c * p.epsilon - vl,
            sup_norm_eps: c * p.epsilon - sup2,
            time_gap_eps: c * p.epsilon - dt2,
            penalty_by_phi2: p2x - p2y + p.alpha * (taus - ts) - vl / p.epsilon,
            phi1_difference: w1.eval(2.0 * root) - (p1x - p1y).abs(),
            phi2_difference: w2.eval(2.0 * root) - (p2x - p2y).abs(),
            improved_sup_norm: w2.eval(2.0 * root) + p.alpha * root - sup2 / p.epsilon,
            terminal_distance_t: w1.eval(horizon - ts) + w2.eval(horizon - ts) + w2.eval(2.0 * root) - b / 2.0,
            terminal_distance_tau: w1.eval(horizon - taus) + w2.eval(horizon - taus) + w1.eval(2.0 * root) - b / 2.0,
        })
    }

    /// The test functionals at an interior maximizer, with their ledger.
    pub fn test_functionals(&self, p: &DoublingParams, m: &Maximizer) -> Result<(TestPsi1, TestPsi2, Step4Ledger)> {
        let spec = *self.family.spec();
        let (t, tau) = (m.t_idx(), m.tau_idx());
        if t >= spec.m_fut || tau >= spec.m_fut {
            return Err(Error::NotInterior { t_idx: t, tau_idx: tau });
        }
        let psi1 = TestPsi1 {
            slice: slice_functional(m.y.clone(), Side::Left, self.params),
            phi2_anchor: self.phi2_at(tau, m.y_idx),
            p: *p,
        };
        let psi2 = TestPsi2 {
            slice: slice_functional(m.x.clone(), Side::Right, self.params),
            phi1_anchor: self.phi1_at(t, m.x_idx),
            p: *p,
        };
        let ci1 = psi1.exact_ci(t, &m.x.path).ok_or_else(|| {
            Error::Consistency("left penalty slice is not differentiable at the maximizer".into())
        })?;
        let ci2 = psi2.exact_ci(tau, &m.y.path).ok_or_else(|| {
            Error::Consistency("right penalty slice is not differentiable at the maximizer".into())
        })?;
        let parts = penalty_parts(t, &m.x.path, tau, &m.y.path, &self.params)?;
        let shared = psi1.shared_dt(t, parts.vl.p);
        let identity_tolerance = 4.0 * f64::EPSILON * shared.abs().max(p.alpha).max(ci1.dt.abs()).max(ci2.dt.abs());
        let grad_bound = 8.0 * dist(m.x.path.at(t), m.y.path.at(tau)) / p.epsilon;

        // touching: phi1 - psi1 is Phi(., ., tau, y) term for term
        let n = self.family.len();
        let touch1 = par::try_map_range(self.points(), |a| -> Result<f64> {
            let (s, i) = (a / n, a % n);
            Ok(m.value - (self.phi1_at(s, i) - psi1.eval(s, &self.family.paths[i])?))
        })?;
        let base2 = self.phi2_at(tau, m.y_idx) - psi2.eval(tau, &m.y.path)?;
        let touch2 = par::try_map_range(self.points(), |a| -> Result<f64> {
            let (s, j) = (a / n, a % n);
            Ok((self.phi2_at(s, j) - psi2.eval(s, &self.family.paths[j])?) - base2)
        })?;
        let scale = self.phi1.iter().chain(&self.phi2).fold(0.0_f64, |acc, v| acc.max(v.abs()))
            + psi2.eval(tau, &m.y.path)?.abs();
        Ok((
            psi1.clone(),
            psi2.clone(),
            Step4Ledger {
                dt_psi1: ci1.dt,
                dt_psi2: ci2.dt,
                identity_error: ((ci1.dt - ci2.dt) + 2.0 * p.alpha).abs(),
                identity_tolerance,
                gradients_equal: ci1.grad == ci2.grad,
                gradient_bound_margin: grad_bound - norm(&ci1.grad),
                grad_psi1: ci1.grad,
                grad_psi2: ci2.grad,
                touching_psi1_margin: touch1.into_iter().fold(f64::INFINITY, f64::min),
                touching_psi2_margin: touch2.into_iter().fold(f64::INFINITY, f64::min),
                touching_psi2_tolerance: 8.0 * f64::EPSILON * scale,
            },
        ))
    }
}

/// `psi1(t, x) = phi2(tau^, y^) + alpha (2T - t - tau^) + (t - tau^)^2 / delta + V^L(t, x, tau^, y^) / eps`
#[derive(Clone, Debug)]
pub struct TestPsi1 {
    slice: PenaltySlice,
    phi2_anchor: f64,
    p: DoublingParams,
}

/// `psi2(tau, y) = phi1(t^, x^) - alpha (2T - t^ - tau) - (t^ - tau)^2 / delta - V^L(t^, x^, tau, y) / eps`
#[derive(Clone, Debug)]
pub struct TestPsi2 {
    slice: PenaltySlice,
    phi1_anchor: f64,
    p: DoublingParams,
}

fn tail_terms(p: &DoublingParams, horizon: f64, t: f64, tau: f64, vl: f64) -> f64 {
    let dt = t - tau;
    p.alpha * (2.0 * horizon - t - tau) + dt * dt / p.delta + vl / p.epsilon
}

impl TestPsi1 {
    fn shared_dt(&self, t_idx: usize, pl: f64) -> f64 {
        let spec = self.slice.anchor.path.spec();
        2.0 * (spec.time(t_idx) - self.slice.anchor.time()) / self.p.delta + pl / self.p.epsilon
    }
}

impl Functional for TestPsi1 {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        let spec = x.spec();
        let vl = self.slice.eval(t_idx, x)?;
        Ok(self.phi2_anchor + tail_terms(&self.p, spec.horizon, spec.time(t_idx), self.slice.anchor.time(), vl))
    }

    fn exact_ci(&self, t_idx: usize, x: &GridPath) -> Option<CiPair> {
        let ci = self.slice.exact_ci(t_idx, x)?;
        Some(CiPair {
            dt: self.shared_dt(t_idx, ci.dt) - self.p.alpha,
            grad: ci.grad.iter().map(|q| q / self.p.epsilon).collect(),
        })
    }

    fn claims_non_anticipative(&self) -> bool {
        true
    }
}

impl Functional for TestPsi2 {
    fn eval(&self, tau_idx: usize, y: &GridPath) -> Result<f64> {
        let spec = y.spec();
        let vl = self.slice.eval(tau_idx, y)?;
        Ok(self.phi1_anchor - tail_terms(&self.p, spec.horizon, self.slice.anchor.time(), spec.time(tau_idx), vl))
    }

    fn exact_ci(&self, tau_idx: usize, y: &GridPath) -> Option<CiPair> {
        // the right slice reports (-P^L, -Q^L)
        let ci = self.slice.exact_ci(tau_idx, y)?;
        let spec = y.spec();
        let shared = 2.0 * (self.slice.anchor.time() - spec.time(tau_idx)) / self.p.delta + (-ci.dt) / self.p.epsilon;
        Some(CiPair { dt: shared + self.p.alpha, grad: ci.grad.iter().map(|q| -q / self.p.epsilon).collect() })
    }

    fn claims_non_anticipative(&self) -> bool {
        true
    }
}

/// `Phi` at arbitrary points, evaluating the functionals directly.
pub fn phi_eps_delta<F1, F2>(
    phi1: &F1,
    phi2: &F2,
    p: &DoublingParams,
    slope: f64,
    (t, x): (usize, &GridPath),
    (tau, y): (usize, &GridPath),
) -> Result<f64>
where
    F1: Functional + ?Sized,
    F2: Functional + ?Sized,
{
    if !(p.alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {}", p.alpha)));
    }
    let params = PenaltyParams::new(slope)?;
    let vl = penalty_parts(t, x, tau, y, &params)?.vl.v;
    let spec = x.spec();
    Ok(phi1.eval(t, x)? - (phi2.eval(tau, y)? + tail_terms(p, spec.horizon, spec.time(t), spec.time(tau), vl)))
}

pub fn maximize_phi<F1, F2>(phi1: &F1, phi2: &F2, family: &EnumeratedFamily, p: &DoublingParams) -> Result<Maximizer>
where
    F1: Functional + ?Sized,
    F2: Functional + ?Sized,
{
    DoublingProblem::new(phi1, phi2, family)?.maximize(p)
}

/// Which side of the viscosity definition a touching point belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TouchSide {
    /// `phi - psi` has a local maximum
    Sub,
    /// `phi - psi` has a local minimum
    Super,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaCheck {
    /// Sub: `min_v dt psi + <grad psi, v> + L_phi`; super: `min_v L_phi - (dt psi + <grad psi, v>)`.
    pub derivative_margin: f64,
    /// The same with one-step quotients of `psi` along `z_{t,x,v}` in place of
    /// the derivatives; non-negative whenever the touching holds on the grid.
    pub quotient_margin: f64,
}

impl LemmaCheck {
    pub fn pass(&self) -> bool {
        self.derivative_margin >= 0.0
    }
}

/// Check `dt psi + <grad psi, v> >= -L_phi` (sub) or `<= L_phi` (super) for
/// each probe `v`, after confirming that `phi - psi` touches at `p` along the
/// probe extensions.
pub fn lemma_bounds<F, G>(
    phi: &F,
    psi: &G,
    p: &PointedPath,
    side: TouchSide,
    probes: &[Point],
    lphi: f64,
) -> Result<LemmaCheck>
where
    F: Functional + ?Sized,
    G: Functional + ?Sized,
{
    let spec = *p.path.spec();
    if p.t_idx >= spec.m_fut {
        return Err(Error::AtHorizon);
    }
    let ci = psi
        .exact_ci(p.t_idx, &p.path)
        .ok_or_else(|| Error::TouchingFailed("test functional has no ci-derivative at the point".into()))?;
    let base = phi.eval(p.t_idx, &p.path)? - psi.eval(p.t_idx, &p.path)?;
    let psi0 = psi.eval(p.t_idx, &p.path)?;
    let step = spec.time(p.t_idx + 1) - spec.time(p.t_idx);
    let sign = match side {
        TouchSide::Sub => 1.0,
        TouchSide::Super => -1.0,
    };
    let mut derivative_margin = f64::INFINITY;
    let mut quotient_margin = f64::INFINITY;
    for v in probes {
        let z = lip_extension(p.t_idx, &p.path, v)?;
        let here = phi.eval(p.t_idx + 1, &z)? - psi.eval(p.t_idx + 1, &z)?;
        let slack = 8.0 * f64::EPSILON * (base.abs() + here.abs());
        if sign * (here - base) > slack {
            return Err(Error::TouchingFailed(format!(
                "phi - psi moves by {} along velocity {v:?}",
                here - base
            )));
        }
        let dir: f64 = ci.grad.iter().zip(v).map(|(a, b)| a * b).sum();
        derivative_margin = derivative_margin.min(sign * (ci.dt + dir) + lphi);
        let q = (psi.eval(p.t_idx + 1, &z)? - psi0) / step;
        quotient_margin = quotient_margin.min(sign * q + lphi);
    }
    Ok(LemmaCheck { derivative_margin, quotient_margin })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    ComparisonHolds,
    ContradictionDetected,
    Inconclusive,
}

/// Everything computed at one schedule point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchedulePoint {
    pub epsilon: f64,
    pub delta: f64,
    pub below_eps_star: bool,
    pub maximizer: MaximizerSummary,
    pub estimates: Estimates,
    pub interior_t: bool,
    pub interior_tau: bool,
    pub ledger: Option<Step4Ledger>,
    /// `H(t, x, grad psi1) - H(tau, y, grad psi1)`
    pub hamiltonian_gap: Option<f64>,
    /// `dt psi1 + H(t, x, grad psi1)`; a subsolution needs this `>= 0`.
    pub sub_residual: Option<f64>,
    /// `dt psi2 + H(tau, y, grad psi2)`; a supersolution needs this `<= 0`.
    pub super_residual: Option<f64>,
    pub gap_at_least_two_alpha: bool,
}

impl SchedulePoint {
    /// All estimates non-negative, interior below `eps_*`, ledger holding.
    pub fn margins_hold(&self) -> bool {
        self.estimates.min_margin() >= 0.0
            && (!self.below_eps_star || (self.interior_t && self.interior_tau))
            && self.ledger.as_ref().is_none_or(Step4Ledger::holds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoublingReport {
    pub schema: &'static str,
    pub b: f64,
    pub b_t_idx: usize,
    pub b_x_idx: usize,
    pub alpha: Option<f64>,
    pub c: Option<f64>,
    pub eps_star: Option<f64>,
    pub points: Vec<SchedulePoint>,
    pub verdict: Verdict,
    /// First schedule point with `gap >= 2 alpha` when the verdict is inconclusive.
    pub flagged_point: Option<usize>,
    pub note: &'static str,
}

const GRID_NOTE: &str = "grid-scale diagnostic: estimates are exact on the finite family, the Hamiltonian step is not";

impl DoublingReport {
    pub fn margins_hold(&self) -> bool {
        self.points.iter().all(SchedulePoint::margins_hold)
    }

    pub fn any_gap_flagged(&self) -> bool {
        self.points.iter().any(|p| p.gap_at_least_two_alpha)
    }
}

/// Estimates at every schedule point for a fixed `b > 0`; `None` when the
/// comparison already holds (`b <= tolerance`).
pub fn proof_estimates<F1, F2>(
    phi1: &F1,
    phi2: &F2,
    family: &EnumeratedFamily,
    cfg: &DoublingConfig,
) -> Result<Option<Vec<(Maximizer, Estimates)>>>
where
    F1: Functional + ?Sized,
    F2: Functional + ?Sized,
{
    let prob = DoublingProblem::new(phi1, phi2, family)?;
    let (b, _, _) = prob.b();
    if b <= cfg.tolerance {
        return Ok(None);
    }
    let alpha = b / (4.0 * family.spec().horizon);
    let c = prob.c();
    let (w1, w2) = prob.moduli();
    cfg.schedule
        .iter()
        .map(|&(epsilon, delta)| {
            let p = DoublingParams { epsilon, delta, alpha };
            let m = prob.maximize(&p)?;
            let e = prob.estimates(&p, &m, b, c, &w1, &w2)?;
            Ok((m, e))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Run the full pipeline over the schedule.
pub fn comparison_verdict<F1, F2, H>(
    phi1: &F1,
    phi2: &F2,
    family: &EnumeratedFamily,
    h: &H,
    cfg: &DoublingConfig,
) -> Result<DoublingReport>
where
    F1: Functional + ?Sized,
    F2: Functional + ?Sized,
    H: Hamiltonian + ?Sized,
{
    let prob = DoublingProblem::new(phi1, phi2, family)?;
    let (excess, path_index) = prob.terminal_excess();
    if excess > cfg.tolerance {
        return Err(Error::BoundaryViolation { path_index, gap: excess });
    }
    let (b, b_t, b_i) = prob.b();
    if b <= cfg.tolerance {
        return Ok(DoublingReport {
            schema: REPORT_SCHEMA,
            b,
            b_t_idx: b_t,
            b_x_idx: b_i,
            alpha: None,
            c: None,
            eps_star: None,
            points: Vec::new(),
            verdict: Verdict::ComparisonHolds,
            flagged_point: None,
            note: GRID_NOTE,
        });
    }
    let spec = *family.spec();
    let alpha = b / (4.0 * spec.horizon);
    let c = prob.c();
    let (w1, w2) = prob.moduli();
    let eps_star = prob.eps_star(b, c, &w1, &w2);
    let mut points = Vec::with_capacity(cfg.schedule.len());
    for &(epsilon, delta) in &cfg.schedule {
        let p = DoublingParams { epsilon, delta, alpha };
        let m = prob.maximize(&p)?;
        let estimates = prob.estimates(&p, &m, b, c, &w1, &w2)?;
        let (t, tau) = (m.t_idx(), m.tau_idx());
        let interior_t = t < spec.m_fut;
        let interior_tau = tau < spec.m_fut;
        let (mut ledger, mut gap, mut sub, mut sup) = (None, None, None, None);
        if interior_t && interior_tau {
            let (_, _, l) = prob.test_functionals(&p, &m)?;
            let s = &l.grad_psi1;
            let hx = h.eval(t, &m.x.path, s)?;
            let hy = h.eval(tau, &m.y.path, s)?;
            gap = Some(hx - hy);
            sub = Some(l.dt_psi1 + hx);
            sup = Some(l.dt_psi2 + h.eval(tau, &m.y.path, &l.grad_psi2)?);
            ledger = Some(l);
        }
        points.push(SchedulePoint {
            epsilon,
            delta,
            below_eps_star: epsilon <= eps_star,
            maximizer: m.summary(),
            estimates,
            interior_t,
            interior_tau,
            ledger,
            hamiltonian_gap: gap,
            sub_residual: sub,
            super_residual: sup,
            gap_at_least_two_alpha: gap.is_some_and(|g| g >= 2.0 * alpha),
        });
    }
    let below: Vec<&SchedulePoint> = points.iter().filter(|p| p.below_eps_star).collect();
    let verdict = if !below.is_empty() && below.iter().all(|p| p.gap_at_least_two_alpha) {
        Verdict::ContradictionDetected
    } else {
        Verdict::Inconclusive
    };
    let flagged_point = match verdict {
        Verdict::Inconclusive => points.iter().position(|p| p.gap_at_least_two_alpha),
        _ => None,
    };
    Ok(DoublingReport {
        schema: REPORT_SCHEMA,
        b,
        b_t_idx: b_t,
        b_x_idx: b_i,
        alpha: Some(alpha),
        c: Some(c),
        eps_star: Some(eps_star),
        points,
        verdict,
        flagged_point,
        note: GRID_NOTE,
    })
}

/// Per-schedule margins as CSV rows, ready for plotting.
pub fn write_margins_csv<W: std::io::Write>(report: &DoublingReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epsilon", "delta", "below_eps_star", "t_idx", "tau_idx", "value", "ties"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let names = Estimates::named;
    if let Some(p) = report.points.first() {
        header.extend(names(&p.estimates).iter().map(|(n, _)| n.to_string()));
    }
    header.extend(
        ["identity_error", "gradient_bound_margin", "touching_psi1", "touching_psi2", "hamiltonian_gap", "two_alpha"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for p in &report.points {
        let mut row = vec![
            p.epsilon.to_string(),
            p.delta.to_string(),
            p.below_eps_star.to_string(),
            p.maximizer.t_idx.to_string(),
            p.maximizer.tau_idx.to_string(),
            p.maximizer.value.to_string(),
            p.maximizer.ties.to_string(),
        ];
        row.extend(names(&p.estimates).iter().map(|(_, v)| v.to_string()));
        let l = p.ledger.as_ref();
        row.push(opt(l.map(|l| l.identity_error)));
        row.push(opt(l.map(|l| l.gradient_bound_margin)));
        row.push(opt(l.map(|l| l.touching_psi1_margin)));
        row.push(opt(l.map(|l| l.touching_psi2_margin)));
        row.push(opt(p.hamiltonian_gap));
        row.push(opt(report.alpha.map(|a| 2.0 * a)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
