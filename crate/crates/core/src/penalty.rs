//! The doubled-variable penalty `V^L` and its building blocks.
//!
//! For a slope parameter `L >= 0` and points `(t, x)`, `(tau, y)`:
//!
//! ```text
//! V_1 = (2L^2 + 1)(t - tau)^2 + 2 |x(t) - y(tau)|^2
//! P_1 = 2 (2L^2 + 1)(t - tau)         Q_1 = 4 (x(t) - y(tau))
//! V_2 = max(V_1, max_{xi <= t ^ tau} |x(xi) - y(xi)|^2)
//! V_3 = (V_2 - V_1)^2 / V_2           (P_3, Q_3) = -2 (V_2 - V_1) / V_2 (P_1, Q_1)
//! V^L = V_3 + 2 V_1                   (P^L, Q^L) = (P_3, Q_3) + 2 (P_1, Q_1)
//! ```
//!
//! with `V_3 = P_3 = Q_3 = 0` on the diagonal `(t, x(. ^ t)) = (tau, y(. ^ tau))`.
//! Unlike the plain doubled sup-norm `V_2`, the slices of `V^L` in either
//! variable are ci-differentiable with derivatives `(P^L, Q^L)`.

use serde::Serialize;
use smallvec::smallvec;

use crate::ci_calculus::{CiPair, Functional};
use crate::error::{Error, Result};
use crate::par;
use crate::path_space::{
    dist, norm, same_stopped, stopped_sup_dist, sup_dist_nodes, EnumeratedFamily, GridPath, Point, PointedPath,
};

/// Below this `V_2` the ratio `(V_2 - V_1) / V_2` is clamped to `[0, 1]`.
pub const TINY_V2: f64 = 1e-300;

/// Relative slack on Lipschitz hypotheses checked at grid nodes.
pub const HYPOTHESIS_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PenaltyParams {
    pub l: f64,
}

impl PenaltyParams {
    pub fn new(l: f64) -> Result<Self> {
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::Config(format!("penalty slope L must be finite and >= 0, got {l}")));
        }
        Ok(PenaltyParams { l })
    }

    /// `2 L^2 + 1`.
    pub fn time_weight(&self) -> f64 {
        2.0 * self.l * self.l + 1.0
    }
}

/// `(V, P, Q)` for one of `V_1`, `V_3`, `V^L`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PenaltyEval {
    pub v: f64,
    pub p: f64,
    pub q: Point,
}

impl PenaltyEval {
    fn zero(n: usize) -> Self {
        PenaltyEval { v: 0.0, p: 0.0, q: smallvec![0.0; n] }
    }
}

/// Every intermediate quantity of one `V^L` evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyParts {
    pub v1: PenaltyEval,
    pub v2: f64,
    pub v3: PenaltyEval,
    pub vl: PenaltyEval,
    pub diagonal: bool,
}

fn check_pair(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath) -> Result<()> {
    if x.spec() != y.spec() {
        return Err(Error::SpecMismatch);
    }
    x.spec().check_t_idx(t_idx)?;
    x.spec().check_t_idx(tau_idx)
}

fn v1_unchecked(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath, params: &PenaltyParams) -> PenaltyEval {
    let spec = x.spec();
    let k = params.time_weight();
    let dt = spec.time(t_idx) - spec.time(tau_idx);
    let (xt, ys) = (x.at(t_idx), y.at(tau_idx));
    let diff: Point = xt.iter().zip(ys).map(|(a, b)| a - b).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    PenaltyEval {
        v: k * dt * dt + 2.0 * sq,
        p: 2.0 * k * dt,
        q: diff.iter().map(|d| 4.0 * d).collect(),
    }
}

fn parts_unchecked(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath, params: &PenaltyParams) -> PenaltyParts {
    let n = x.spec().n;
    let v1 = v1_unchecked(t_idx, x, tau_idx, y, params);
    let sup = sup_dist_nodes(x, y, x.spec().global(t_idx.min(tau_idx)));
    let v2 = v1.v.max(sup * sup);
    if same_stopped(x, t_idx, y, tau_idx) {
        return PenaltyParts {
            v1,
            v2,
            v3: PenaltyEval::zero(n),
            vl: PenaltyEval::zero(n),
            diagonal: true,
        };
    }
    let gap = v2 - v1.v;
    let (ratio, v3v) = if v2 < TINY_V2 {
        let r = (gap / v2).clamp(0.0, 1.0);
        (r, (r * gap).min(v2))
    } else {
        (gap / v2, gap * gap / v2)
    };
    let v3 = PenaltyEval {
        v: v3v,
        p: -2.0 * ratio * v1.p,
        q: v1.q.iter().map(|q| -2.0 * ratio * q).collect(),
    };
    let vl = PenaltyEval {
        v: v3.v + 2.0 * v1.v,
        p: v3.p + 2.0 * v1.p,
        q: v3.q.iter().zip(&v1.q).map(|(a, b)| a + 2.0 * b).collect(),
    };
    PenaltyParts { v1, v2, v3, vl, diagonal: false }
}

/// All intermediate values; validates the inputs but skips the cross-check.
pub fn penalty_parts(
    t_idx: usize,
    x: &GridPath,
    tau_idx: usize,
    y: &GridPath,
    params: &PenaltyParams,
) -> Result<PenaltyParts> {
    check_pair(t_idx, x, tau_idx, y)?;
    Ok(parts_unchecked(t_idx, x, tau_idx, y, params))
}

pub fn v1(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath, params: &PenaltyParams) -> Result<PenaltyEval> {
    check_pair(t_idx, x, tau_idx, y)?;
    Ok(v1_unchecked(t_idx, x, tau_idx, y, params))
}

pub fn v2(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath, params: &PenaltyParams) -> Result<f64> {
    Ok(penalty_parts(t_idx, x, tau_idx, y, params)?.v2)
}

pub fn v3(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath, params: &PenaltyParams) -> Result<PenaltyEval> {
    Ok(penalty_parts(t_idx, x, tau_idx, y, params)?.v3)
}

/// Off-diagonal direct form `V^L = V_2 + V_1^2 / V_2`,
/// `(P^L, Q^L) = 2 V_1 / V_2 (P_1, Q_1)`; `None` on the diagonal.
pub fn vl_direct(parts: &PenaltyParts) -> Option<PenaltyEval> {
    if parts.diagonal {
        return None;
    }
    let ratio = parts.v1.v / parts.v2;
    Some(PenaltyEval {
        v: parts.v2 + parts.v1.v * parts.v1.v / parts.v2,
        p: 2.0 * ratio * parts.v1.p,
        q: parts.v1.q.iter().map(|q| 2.0 * ratio * q).collect(),
    })
}

/// Largest deviation between the two forms of `(V^L, P^L, Q^L)`, each
/// measured in units of `f64::EPSILON` times the natural magnitude of the
/// component (`V^L`, `2|P_1|`, `2||Q_1||`).
pub fn two_form_deviation(parts: &PenaltyParts) -> f64 {
    let Some(direct) = vl_direct(parts) else {
        return 0.0;
    };
    let units = |a: f64, b: f64, scale: f64| {
        if a == b {
            0.0
        } else {
            (a - b).abs() / (f64::EPSILON * scale.max(f64::MIN_POSITIVE))
        }
    };
    let dv = units(parts.vl.v, direct.v, direct.v.abs().max(parts.vl.v.abs()));
    let dp = units(parts.vl.p, direct.p, 2.0 * parts.v1.p.abs());
    let qscale = 2.0 * norm(&parts.v1.q);
    let dq = parts.vl.q.iter().zip(&direct.q).map(|(a, b)| units(*a, *b, qscale)).fold(0.0, f64::max);
    dv.max(dp).max(dq)
}

/// Relative error of `V_3 + 2 V_1` against `V_2 + V_1^2 / V_2` off the diagonal.
pub fn two_form_rel_error(parts: &PenaltyParts) -> f64 {
    match vl_direct(parts) {
        None => 0.0,
        Some(d) if parts.vl.v == d.v => 0.0,
        Some(d) => (parts.vl.v - d.v).abs() / d.v.abs(),
    }
}

/// Allowed [`two_form_deviation`] in [`vl`].
pub const CROSS_CHECK_ULPS: f64 = 8.0;

/// `(V^L, P^L, Q^L)` via `V_3 + 2 V_1`, cross-checked against the direct form.
pub fn vl(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath, params: &PenaltyParams) -> Result<PenaltyEval> {
    let parts = penalty_parts(t_idx, x, tau_idx, y, params)?;
    let dev = two_form_deviation(&parts);
    if dev > CROSS_CHECK_ULPS {
        return Err(Error::Consistency(format!(
            "V^L forms disagree by {dev:.1} ulps at t_idx={t_idx}, tau_idx={tau_idx}"
        )));
    }
    Ok(parts.vl)
}

/// Whether `(t, x, tau, y)` satisfies one of the lower-bound conditions: the
/// later path moves by at most `L |t - tau|` from its endpoint over
/// `[t ^ tau, t v tau]`.
pub fn lower_bound_applicable(t_idx: usize, x: &GridPath, tau_idx: usize, y: &GridPath, l: f64) -> bool {
    let spec = x.spec();
    let (early, late, later_path) = if tau_idx >= t_idx { (t_idx, tau_idx, y) } else { (tau_idx, t_idx, x) };
    let budget = l * (spec.time(late) - spec.time(early));
    let end = later_path.at(late);
    (early..=late).all(|k| dist(end, later_path.at(k)) <= budget * (1.0 + HYPOTHESIS_SLACK))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBoundCheck {
    pub applicable: bool,
    /// `V^L - ||x(. ^ t) - y(. ^ tau)||^2`
    pub sup_margin: f64,
    /// `V^L - (t - tau)^2`
    pub time_margin: f64,
}

impl LowerBoundCheck {
    pub fn pass(&self) -> bool {
        !self.applicable || (self.sup_margin >= 0.0 && self.time_margin >= 0.0)
    }
}

pub fn check_lower_bounds(
    t_idx: usize,
    x: &GridPath,
    tau_idx: usize,
    y: &GridPath,
    params: &PenaltyParams,
) -> Result<LowerBoundCheck> {
    let e = vl(t_idx, x, tau_idx, y, params)?;
    Ok(lower_bound_margins(t_idx, x, tau_idx, y, params, e.v))
}

fn lower_bound_margins(
    t_idx: usize,
    x: &GridPath,
    tau_idx: usize,
    y: &GridPath,
    params: &PenaltyParams,
    v: f64,
) -> LowerBoundCheck {
    let spec = x.spec();
    let sup = stopped_sup_dist(x, t_idx, y, tau_idx).unwrap_or(f64::INFINITY);
    let dt = spec.time(t_idx) - spec.time(tau_idx);
    LowerBoundCheck {
        applicable: lower_bound_applicable(t_idx, x, tau_idx, y, params.l),
        sup_margin: v - sup * sup,
        time_margin: v - dt * dt,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeBoundCheck {
    /// `4 (2L^2 + 1) |t - tau| - |P^L|`
    pub p_margin: f64,
    /// `8 ||x(t) - y(tau)|| - ||Q^L||`
    pub q_margin: f64,
}

impl DerivativeBoundCheck {
    pub fn pass(&self) -> bool {
        self.p_margin >= 0.0 && self.q_margin >= 0.0
    }
}

pub fn check_derivative_bounds(
    t_idx: usize,
    x: &GridPath,
    tau_idx: usize,
    y: &GridPath,
    params: &PenaltyParams,
) -> Result<DerivativeBoundCheck> {
    let e = vl(t_idx, x, tau_idx, y, params)?;
    Ok(derivative_margins(t_idx, x, tau_idx, y, params, &e))
}

fn derivative_margins(
    t_idx: usize,
    x: &GridPath,
    tau_idx: usize,
    y: &GridPath,
    params: &PenaltyParams,
    e: &PenaltyEval,
) -> DerivativeBoundCheck {
    let spec = x.spec();
    let dt = spec.time(t_idx) - spec.time(tau_idx);
    let diff: Point = x.at(t_idx).iter().zip(y.at(tau_idx)).map(|(a, b)| 8.0 * (a - b)).collect();
    DerivativeBoundCheck {
        p_margin: 4.0 * params.time_weight() * dt.abs() - e.p.abs(),
        q_margin: norm(&diff) - norm(&e.q),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Side {
    /// `(t, x) -> V^L(t, x, anchor)`
    Left,
    /// `(tau, y) -> V^L(anchor, tau, y)`
    Right,
}

/// One-variable slice of `V^L` with the anchor frozen on the other side.
#[derive(Clone, Debug)]
pub struct PenaltySlice {
    pub anchor: PointedPath,
    pub side: Side,
    pub params: PenaltyParams,
}

pub fn slice_functional(anchor: PointedPath, side: Side, params: PenaltyParams) -> PenaltySlice {
    PenaltySlice { anchor, side, params }
}

impl PenaltySlice {
    /// Where the slice is known to be ci-differentiable: the free time is at
    /// or after the anchor time, or the anchor path moves by at most
    /// `L (xi - t)` on `[t, anchor time]`.
    pub fn hypothesis_holds(&self, t_idx: usize) -> bool {
        let spec = self.anchor.path.spec();
        if t_idx >= spec.m_fut {
            return false;
        }
        let a = self.anchor.t_idx;
        if t_idx >= a {
            return true;
        }
        let base = self.anchor.path.at(t_idx);
        (t_idx..=a).all(|k| {
            let budget = self.params.l * (spec.time(k) - spec.time(t_idx));
            dist(self.anchor.path.at(k), base) <= budget * (1.0 + HYPOTHESIS_SLACK)
        })
    }

    fn evaluate(&self, t_idx: usize, x: &GridPath) -> Result<PenaltyEval> {
        let a = &self.anchor;
        match self.side {
            Side::Left => vl(t_idx, x, a.t_idx, &a.path, &self.params),
            Side::Right => vl(a.t_idx, &a.path, t_idx, x, &self.params),
        }
    }
}

impl Functional for PenaltySlice {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        Ok(self.evaluate(t_idx, x)?.v)
    }

    fn exact_ci(&self, t_idx: usize, x: &GridPath) -> Option<CiPair> {
        if !self.hypothesis_holds(t_idx) {
            return None;
        }
        let e = self.evaluate(t_idx, x).ok()?;
        Some(match self.side {
            Side::Left => CiPair { dt: e.p, grad: e.q },
            Side::Right => CiPair { dt: -e.p, grad: e.q.iter().map(|q| -q).collect() },
        })
    }

    fn claims_non_anticipative(&self) -> bool {
        true
    }
}

/// The plain doubled sup-norm `(t, x) -> max_{xi <= t ^ tau} |x(xi) - y(xi)|^2`
/// against a fixed anchor; not ci-differentiable where the maximum switches.
#[derive(Clone, Debug)]
pub struct NaiveSupPenalty {
    pub anchor: PointedPath,
}

impl Functional for NaiveSupPenalty {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        check_pair(t_idx, x, self.anchor.t_idx, &self.anchor.path)?;
        let s = sup_dist_nodes(x, &self.anchor.path, x.spec().global(t_idx.min(self.anchor.t_idx)));
        Ok(s * s)
    }

    fn claims_non_anticipative(&self) -> bool {
        true
    }
}

/// Distance between two floats in units in the last place.
pub fn ulps_apart(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.is_nan() || b.is_nan() {
        return u64::MAX;
    }
    fn ordered(v: f64) -> i128 {
        let bits = v.to_bits() as i64;
        (if bits < 0 { i64::MIN - bits } else { bits }) as i128
    }
    (ordered(a) - ordered(b)).unsigned_abs().min(u64::MAX as u128) as u64
}

/// Margins of every property at one ordered pair of points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairMargins {
    pub t_idx: usize,
    pub x_idx: usize,
    pub tau_idx: usize,
    pub y_idx: usize,
    pub vl: f64,
    pub p: f64,
    pub min_value: f64,
    pub symmetry_ulps: u64,
    pub non_anticipative: bool,
    pub zero_characterization: bool,
    pub lower_applicable: bool,
    pub lower_sup_margin: f64,
    pub lower_time_margin: f64,
    pub p_margin: f64,
    pub q_margin: f64,
    pub two_form_rel_error: f64,
    pub two_form_ulps: f64,
}

/// Aggregated outcome of a property sweep over all pairs of a family.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PenaltySuiteOutcome {
    pub pairs: u64,
    pub off_diagonal_pairs: u64,
    pub lower_bound_applicable_pairs: u64,
    pub nonnegativity_violations: u64,
    pub symmetry_violations: u64,
    pub non_anticipativity_violations: u64,
    pub zero_characterization_violations: u64,
    pub lower_bound_violations: u64,
    pub derivative_bound_violations: u64,
    pub two_form_violations: u64,
    pub cross_check_failures: u64,
    pub min_value: f64,
    pub max_symmetry_ulps: u64,
    pub min_lower_sup_margin: f64,
    pub min_lower_time_margin: f64,
    pub min_p_margin: f64,
    pub min_q_margin: f64,
    pub max_two_form_rel_error: f64,
    pub max_two_form_ulps: f64,
}

/// Symmetry tolerance in ulps.
pub const SYMMETRY_ULPS: u64 = 4;
/// Two-form tolerance (relative).
pub const TWO_FORM_REL_TOL: f64 = 1e-12;

impl PenaltySuiteOutcome {
    fn empty() -> Self {
        PenaltySuiteOutcome {
            min_value: f64::INFINITY,
            min_lower_sup_margin: f64::INFINITY,
            min_lower_time_margin: f64::INFINITY,
            min_p_margin: f64::INFINITY,
            min_q_margin: f64::INFINITY,
            ..Default::default()
        }
    }

    fn absorb(&mut self, m: &PairMargins) {
        self.pairs += 1;
        if !(m.vl == 0.0 && m.zero_characterization) {
            self.off_diagonal_pairs += 1;
        }
        if m.min_value < 0.0 {
            self.nonnegativity_violations += 1;
        }
        if m.symmetry_ulps > SYMMETRY_ULPS {
            self.symmetry_violations += 1;
        }
        if !m.non_anticipative {
            self.non_anticipativity_violations += 1;
        }
        if !m.zero_characterization {
            self.zero_characterization_violations += 1;
        }
        if m.lower_applicable {
            self.lower_bound_applicable_pairs += 1;
            if m.lower_sup_margin < 0.0 || m.lower_time_margin < 0.0 {
                self.lower_bound_violations += 1;
            }
            self.min_lower_sup_margin = self.min_lower_sup_margin.min(m.lower_sup_margin);
            self.min_lower_time_margin = self.min_lower_time_margin.min(m.lower_time_margin);
        }
        if m.p_margin < 0.0 || m.q_margin < 0.0 {
            self.derivative_bound_violations += 1;
        }
        if m.two_form_rel_error > TWO_FORM_REL_TOL {
            self.two_form_violations += 1;
        }
        if m.two_form_ulps > CROSS_CHECK_ULPS {
            self.cross_check_failures += 1;
        }
        self.min_value = self.min_value.min(m.min_value);
        self.max_symmetry_ulps = self.max_symmetry_ulps.max(m.symmetry_ulps);
        self.min_p_margin = self.min_p_margin.min(m.p_margin);
        self.min_q_margin = self.min_q_margin.min(m.q_margin);
        self.max_two_form_rel_error = self.max_two_form_rel_error.max(m.two_form_rel_error);
        self.max_two_form_ulps = self.max_two_form_ulps.max(m.two_form_ulps);
    }

    fn merge(&mut self, o: &PenaltySuiteOutcome) {
        self.pairs += o.pairs;
        self.off_diagonal_pairs += o.off_diagonal_pairs;
        self.lower_bound_applicable_pairs += o.lower_bound_applicable_pairs;
        self.nonnegativity_violations += o.nonnegativity_violations;
        self.symmetry_violations += o.symmetry_violations;
        self.non_anticipativity_violations += o.non_anticipativity_violations;
        self.zero_characterization_violations += o.zero_characterization_violations;
        self.lower_bound_violations += o.lower_bound_violations;
        self.derivative_bound_violations += o.derivative_bound_violations;
        self.two_form_violations += o.two_form_violations;
        self.cross_check_failures += o.cross_check_failures;
        self.min_value = self.min_value.min(o.min_value);
        self.max_symmetry_ulps = self.max_symmetry_ulps.max(o.max_symmetry_ulps);
        self.min_lower_sup_margin = self.min_lower_sup_margin.min(o.min_lower_sup_margin);
        self.min_lower_time_margin = self.min_lower_time_margin.min(o.min_lower_time_margin);
        self.min_p_margin = self.min_p_margin.min(o.min_p_margin);
        self.min_q_margin = self.min_q_margin.min(o.min_q_margin);
        self.max_two_form_rel_error = self.max_two_form_rel_error.max(o.max_two_form_rel_error);
        self.max_two_form_ulps = self.max_two_form_ulps.max(o.max_two_form_ulps);
    }

    pub fn violations(&self) -> u64 {
        self.nonnegativity_violations
            + self.symmetry_violations
            + self.non_anticipativity_violations
            + self.zero_characterization_violations
            + self.lower_bound_violations
            + self.derivative_bound_violations
            + self.two_form_violations
            + self.cross_check_failures
    }

    pub fn pass(&self) -> bool {
        self.violations() == 0
    }
}

/// Every property at one ordered pair. `stopped` maps `(t, member)` to the
/// member index of the stopped path.
pub fn pair_margins(
    family: &EnumeratedFamily,
    stopped: &[Vec<usize>],
    params: &PenaltyParams,
    (t_idx, i): (usize, usize),
    (tau_idx, j): (usize, usize),
) -> PairMargins {
    let (x, y) = (&family.paths[i], &family.paths[j]);
    let parts = parts_unchecked(t_idx, x, tau_idx, y, params);
    let e = &parts.vl;
    let swapped = parts_unchecked(tau_idx, y, t_idx, x, params).vl;
    let mut sym = ulps_apart(e.v, swapped.v).max(ulps_apart(e.p, -swapped.p));
    for (a, b) in e.q.iter().zip(&swapped.q) {
        sym = sym.max(ulps_apart(*a, -*b));
    }
    let (xs, ys) = (&family.paths[stopped[t_idx][i]], &family.paths[stopped[tau_idx][j]]);
    let on_stopped = parts_unchecked(t_idx, xs, tau_idx, ys, params).vl;
    let diagonal = same_stopped(x, t_idx, y, tau_idx);
    let lower = lower_bound_margins(t_idx, x, tau_idx, y, params, e.v);
    let deriv = derivative_margins(t_idx, x, tau_idx, y, params, e);
    PairMargins {
        t_idx,
        x_idx: i,
        tau_idx,
        y_idx: j,
        vl: e.v,
        p: e.p,
        min_value: e.v.min(parts.v1.v).min(parts.v2).min(parts.v3.v),
        symmetry_ulps: sym,
        non_anticipative: on_stopped == *e,
        zero_characterization: (e.v == 0.0) == diagonal,
        lower_applicable: lower.applicable,
        lower_sup_margin: lower.sup_margin,
        lower_time_margin: lower.time_margin,
        p_margin: deriv.p_margin,
        q_margin: deriv.q_margin,
        two_form_rel_error: two_form_rel_error(&parts),
        two_form_ulps: two_form_deviation(&parts),
    }
}

/// Sweep every ordered pair of points `(t, x), (tau, y)` of the family.
/// `on_row` sees each pair's margins in deterministic order when given.
pub fn penalty_suite(
    family: &EnumeratedFamily,
    params: &PenaltyParams,
    mut on_row: Option<&mut dyn FnMut(&PairMargins)>,
) -> Result<PenaltySuiteOutcome> {
    let stopped = family.stop_table()?;
    let nodes = family.spec().m_fut + 1;
    let points = nodes * family.len();
    let keep_rows = on_row.is_some();
    let partials = par::map_range(points, |a| {
        let left = (a / family.len(), a % family.len());
        let mut agg = PenaltySuiteOutcome::empty();
        let mut rows = Vec::new();
        for b in 0..points {
            let right = (b / family.len(), b % family.len());
            let m = pair_margins(family, &stopped, params, left, right);
            agg.absorb(&m);
            if keep_rows {
                rows.push(m);
            }
        }
        (agg, rows)
    });
    let mut total = PenaltySuiteOutcome::empty();
    for (agg, rows) in &partials {
        total.merge(agg);
        if let Some(f) = on_row.as_mut() {
            for r in rows {
                f(r);
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ci_calculus::{check_non_anticipative, ci_derivative_fd};
    use crate::path_space::{stop, GridSpec, PathFamily, DEFAULT_CAP};

    fn spec_m1() -> GridSpec {
        // nodes -1, 0, 1
        GridSpec::new(1.0, 1.0, 1, 1, 1).unwrap()
    }

    fn p(l: f64) -> PenaltyParams {
        PenaltyParams::new(l).unwrap()
    }

    #[test]
    fn v1_hand_values() {
        // n=1, L=1, t=1, tau=0, x(1)=2, y(0)=0: V = 3*1 + 2*4 = 11, P = 2*3*1 = 6, Q = 4*2 = 8
        let s = spec_m1();
        let x = GridPath::constant(s, &[2.0]).unwrap();
        let y = GridPath::constant(s, &[0.0]).unwrap();
        let e = v1(1, &x, 0, &y, &p(1.0)).unwrap();
        assert_eq!((e.v, e.p, e.q[0]), (11.0, 6.0, 8.0));
        let r = v1(0, &y, 1, &x, &p(1.0)).unwrap();
        assert_eq!((r.v, r.p, r.q[0]), (11.0, -6.0, -8.0));
        let d = v1(1, &x, 1, &x, &p(1.0)).unwrap();
        assert_eq!((d.v, d.p, d.q[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn v2_hand_values() {
        let s = spec_m1();
        let x = GridPath::constant(s, &[2.0]).unwrap();
        let y0 = GridPath::constant(s, &[0.0]).unwrap();
        // max(11, sup over nodes <= 0 of 2^2 = 4)
        assert_eq!(v2(1, &x, 0, &y0, &p(1.0)).unwrap(), 11.0);
        // L=0, t=tau=1, x == 0, y = (3, 3, 0) so y(1) = 0, y(0) = 3: max(0, 9)
        let y = GridPath::scalar(s, &[3.0, 3.0, 0.0]).unwrap();
        assert_eq!(v2(1, &y0, 1, &y, &p(0.0)).unwrap(), 9.0);
        assert_eq!(v2(1, &y, 1, &y, &p(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn v3_hand_values() {
        let s = spec_m1();
        let zero = GridPath::constant(s, &[0.0]).unwrap();
        let y = GridPath::scalar(s, &[3.0, 3.0, 0.0]).unwrap();
        let e = v3(1, &zero, 1, &y, &p(0.0)).unwrap();
        assert_eq!((e.v, e.p, e.q[0]), (9.0, 0.0, 0.0));
        // V_2 = V_1 branch
        let x = GridPath::constant(s, &[2.0]).unwrap();
        let e = v3(1, &x, 0, &zero, &p(1.0)).unwrap();
        assert_eq!((e.v, e.p, e.q[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn vl_hand_values() {
        let s = spec_m1();
        let x = GridPath::constant(s, &[2.0]).unwrap();
        let zero = GridPath::constant(s, &[0.0]).unwrap();
        let e = vl(1, &x, 0, &zero, &p(1.0)).unwrap();
        assert_eq!((e.v, e.p, e.q[0]), (22.0, 12.0, 16.0));
        let parts = penalty_parts(1, &x, 0, &zero, &p(1.0)).unwrap();
        assert_eq!(vl_direct(&parts).unwrap().v, 11.0 + 121.0 / 11.0);
        let y = GridPath::scalar(s, &[3.0, 3.0, 0.0]).unwrap();
        let e = vl(1, &zero, 1, &y, &p(0.0)).unwrap();
        assert_eq!((e.v, e.p, e.q[0]), (9.0, 0.0, 0.0));
        let d = vl(0, &x, 0, &x, &p(1.0)).unwrap();
        assert_eq!((d.v, d.p, d.q[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn v3_estimates_hold() {
        let s = GridSpec::new(1.0, 1.0, 1, 2, 4).unwrap();
        let fam = PathFamily::new(s, 1.0, vec![vec![-1.0], vec![0.0], vec![1.0]], vec![vec![0.0]], None, DEFAULT_CAP)
            .unwrap()
            .members()
            .unwrap();
        for (i, x) in fam.paths.iter().enumerate().step_by(7) {
            for y in fam.paths.iter().skip(i % 5).step_by(11) {
                for t in 0..=4 {
                    for tau in 0..=4 {
                        let parts = penalty_parts(t, x, tau, y, &p(1.0)).unwrap();
                        assert!(parts.v3.v <= parts.v2);
                        assert!(parts.v3.p.abs() <= 2.0 * parts.v1.p.abs());
                        assert!(norm(&parts.v3.q) <= 2.0 * norm(&parts.v1.q));
                    }
                }
            }
        }
    }

    #[test]
    fn lower_bound_examples() {
        let s = spec_m1();
        let zero = GridPath::constant(s, &[0.0]).unwrap();
        let y = GridPath::scalar(s, &[3.0, 3.0, 0.0]).unwrap();
        let c = check_lower_bounds(1, &zero, 1, &y, &p(0.0)).unwrap();
        assert!(c.applicable);
        assert_eq!((c.sup_margin, c.time_margin), (0.0, 9.0));
        assert!(c.pass());
        // y jumps by 3 on [0, 1] with L = 0: condition fails, reported as not applicable
        let c = check_lower_bounds(0, &zero, 1, &y, &p(0.0)).unwrap();
        assert!(!c.applicable);
        assert!(c.pass());
    }

    #[test]
    fn derivative_bound_examples() {
        let s = spec_m1();
        let x = GridPath::constant(s, &[2.0]).unwrap();
        let zero = GridPath::constant(s, &[0.0]).unwrap();
        let c = check_derivative_bounds(1, &x, 0, &zero, &p(1.0)).unwrap();
        assert_eq!((c.p_margin, c.q_margin), (0.0, 0.0));
        let c = check_derivative_bounds(1, &x, 1, &x, &p(1.0)).unwrap();
        assert_eq!((c.p_margin, c.q_margin), (0.0, 0.0));
    }

    #[test]
    fn slice_exact_ci() {
        let s = spec_m1();
        let x = GridPath::constant(s, &[2.0]).unwrap();
        let zero = GridPath::constant(s, &[0.0]).unwrap();
        let left = slice_functional(PointedPath::new(0, zero.clone()).unwrap(), Side::Left, p(1.0));
        // at t = 1 = T there is nothing to differentiate
        assert!(left.exact_ci(1, &x).is_none());
        let s2 = GridSpec::new(1.0, 2.0, 1, 1, 2).unwrap();
        let x2 = GridPath::constant(s2, &[2.0]).unwrap();
        let z2 = GridPath::constant(s2, &[0.0]).unwrap();
        let left = slice_functional(PointedPath::new(0, z2.clone()).unwrap(), Side::Left, p(1.0));
        let ci = left.exact_ci(1, &x2).unwrap();
        assert_eq!((ci.dt, ci.grad[0]), (12.0, 16.0));
        let diag = slice_functional(PointedPath::new(1, x2.clone()).unwrap(), Side::Left, p(1.0));
        let ci = diag.exact_ci(1, &x2).unwrap();
        assert_eq!((ci.dt, ci.grad[0]), (0.0, 0.0));
        let right = slice_functional(PointedPath::new(1, x2.clone()).unwrap(), Side::Right, p(1.0));
        let ci = right.exact_ci(0, &z2).unwrap();
        assert_eq!((ci.dt, ci.grad[0]), (-12.0, -16.0));
    }

    #[test]
    fn slice_hypothesis_requires_slow_anchor() {
        let s = GridSpec::new(0.0, 1.0, 1, 0, 2).unwrap();
        let fast = GridPath::scalar(s, &[0.0, 0.0, 2.0]).unwrap();
        let slice = slice_functional(PointedPath::new(2, fast).unwrap(), Side::Left, p(1.0));
        assert!(!slice.hypothesis_holds(1));
        assert!(!slice.hypothesis_holds(0));
        let slow = GridPath::scalar(s, &[0.0, 0.25, 0.5]).unwrap();
        let slice = slice_functional(PointedPath::new(2, slow).unwrap(), Side::Left, p(1.0));
        assert!(slice.hypothesis_holds(0));
    }

    #[test]
    fn slices_are_non_anticipative() {
        let s = GridSpec::new(1.0, 1.0, 1, 2, 4).unwrap();
        let fam = PathFamily::new(s, 1.0, vec![vec![-1.0], vec![0.0], vec![1.0]], vec![vec![0.0]], None, DEFAULT_CAP)
            .unwrap()
            .members()
            .unwrap();
        let samples: Vec<PointedPath> = fam
            .paths
            .iter()
            .step_by(5)
            .flat_map(|x| (0..=4).map(move |t| PointedPath::new(t, x.clone()).unwrap()))
            .collect();
        for anchor_idx in [0, 100, 364, 728] {
            for side in [Side::Left, Side::Right] {
                let anchor = PointedPath::new(2, fam.paths[anchor_idx].clone()).unwrap();
                let f = slice_functional(anchor, side, p(1.0));
                assert_eq!(check_non_anticipative(&f, &samples).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn fd_matches_slice_derivative() {
        // left slice, t >= anchor time, V_1 >= sup^2 locally
        let mut prev = f64::INFINITY;
        for m in [4, 8, 16, 32] {
            let s = GridSpec::new(1.0, 1.0, 1, 2, m).unwrap();
            let yhat = GridPath::from_fn(s, |t| smallvec![0.5 * t]).unwrap();
            let x = GridPath::from_fn(s, |t| smallvec![1.0 - 0.25 * t]).unwrap();
            let slice = slice_functional(PointedPath::new(m / 4, yhat).unwrap(), Side::Left, p(1.0));
            let pt = PointedPath::new(m / 2, x).unwrap();
            let fd = ci_derivative_fd(&slice, &pt, s.delta()).unwrap();
            let exact = slice.exact_ci(pt.t_idx, &pt.path).unwrap();
            let err = fd.mismatch(&exact);
            assert!(err <= prev / 2.0 * 4.0, "m={m}: {err} vs {prev}");
            prev = err;
        }
        assert!(prev < 0.5);
    }

    #[test]
    fn continuity_at_diagonal() {
        // (t, x, t, x + bump_k) with bumps shrinking to zero: V_3, P_3, Q_3 -> 0
        let s = GridSpec::new(1.0, 1.0, 1, 2, 4).unwrap();
        let x = GridPath::from_fn(s, |t| smallvec![t.sin()]).unwrap();
        let mut prev = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for k in 0..30 {
            let eps = 0.5_f64.powi(k);
            let y = GridPath::from_fn(s, |t| smallvec![t.sin() + eps * (1.0 + t).cos()]).unwrap();
            let e = v3(2, &x, 2, &y, &p(1.0)).unwrap();
            let cur = (e.v, e.p.abs(), norm(&e.q));
            assert!(cur.0 <= prev.0 && cur.1 <= prev.1 && cur.2 <= prev.2);
            prev = cur;
            // also approach in time: (t, x) vs (t + 1 node, stop(x, t))
        }
        assert!(prev.0 < 1e-15 && prev.2 < 1e-7);
        let xs = stop(&x, 2).unwrap();
        let mut prev = f64::INFINITY;
        for m in [4, 8, 16, 32, 64] {
            let f = xs.refine(m / 4).unwrap();
            let t = f.spec().m_fut / 2;
            let e = v3(t, &f, t + 1, &f, &p(1.0)).unwrap();
            let size = e.v + e.p.abs() + norm(&e.q);
            assert!(size <= prev);
            prev = size;
        }
    }

    #[test]
    fn naive_penalty_has_kink() {
        let s = GridSpec::new(0.0, 1.0, 1, 0, 64).unwrap();
        let anchor = PointedPath::new(64, GridPath::constant(s, &[0.0]).unwrap()).unwrap();
        let naive = NaiveSupPenalty { anchor };
        let x = GridPath::constant(s, &[1.0]).unwrap();
        let fd = ci_derivative_fd(&naive, &PointedPath::new(32, x).unwrap(), s.delta()).unwrap();
        // q(1) = 2 + d, q(0) = q(-1) = 0
        let d = s.delta();
        assert!((fd.residual - (1.0 + d / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ulps() {
        assert_eq!(ulps_apart(1.0, 1.0), 0);
        assert_eq!(ulps_apart(1.0, 1.0 + f64::EPSILON), 1);
        assert_eq!(ulps_apart(0.0, -0.0), 0);
        assert_eq!(ulps_apart(f64::MIN_POSITIVE, -f64::MIN_POSITIVE), 2 * f64::MIN_POSITIVE.to_bits());
    }

    #[test]
    fn small_suite_passes() {
        let s = GridSpec::new(0.0, 2.0, 1, 0, 2).unwrap();
        let fam = PathFamily::new(s, 1.0, vec![vec![-1.0], vec![0.0], vec![1.0]], vec![vec![0.0]], None, DEFAULT_CAP)
            .unwrap()
            .members()
            .unwrap();
        let mut rows = 0;
        let out = penalty_suite(&fam, &p(1.0), Some(&mut |_: &PairMargins| rows += 1)).unwrap();
        assert_eq!(out.pairs, 27 * 27);
        assert_eq!(rows, 27 * 27);
        assert!(out.pass(), "{out:?}");
    }
}
