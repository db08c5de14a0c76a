//! Coinvariant derivatives estimated along constant-velocity extensions,
//! non-anticipativity checks and the Lipschitz-type quantity `L_{phi,D}`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;
use crate::path_space::{lip_extension, stop, EnumeratedFamily, GridPath, Point, PointedPath};

/// Exact coinvariant derivatives `(d_t phi, grad phi)` at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct CiPair {
    pub dt: f64,
    pub grad: Point,
}

/// A real functional on `[0, T] x paths`, evaluated at future nodes.
pub trait Functional: Send + Sync {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64>;

    /// Known ci-derivatives, where the functional can supply them.
    fn exact_ci(&self, _t_idx: usize, _x: &GridPath) -> Option<CiPair> {
        None
    }

    fn claims_non_anticipative(&self) -> bool {
        false
    }
}

impl<F: Functional + ?Sized> Functional for &F {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        (**self).eval(t_idx, x)
    }
    fn exact_ci(&self, t_idx: usize, x: &GridPath) -> Option<CiPair> {
        (**self).exact_ci(t_idx, x)
    }
    fn claims_non_anticipative(&self) -> bool {
        (**self).claims_non_anticipative()
    }
}

impl<F: Functional + ?Sized> Functional for Box<F> {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        (**self).eval(t_idx, x)
    }
    fn exact_ci(&self, t_idx: usize, x: &GridPath) -> Option<CiPair> {
        (**self).exact_ci(t_idx, x)
    }
    fn claims_non_anticipative(&self) -> bool {
        (**self).claims_non_anticipative()
    }
}

impl<F: Functional + ?Sized> Functional for Arc<F> {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        (**self).eval(t_idx, x)
    }
    fn exact_ci(&self, t_idx: usize, x: &GridPath) -> Option<CiPair> {
        (**self).exact_ci(t_idx, x)
    }
    fn claims_non_anticipative(&self) -> bool {
        (**self).claims_non_anticipative()
    }
}

type EvalFn = dyn Fn(usize, &GridPath) -> f64 + Send + Sync;
type CiFn = dyn Fn(usize, &GridPath) -> Option<CiPair> + Send + Sync;

/// Functional built from closures.
pub struct FnFunctional {
    eval: Box<EvalFn>,
    exact: Option<Box<CiFn>>,
    non_anticipative: bool,
}

impl FnFunctional {
    pub fn new(eval: impl Fn(usize, &GridPath) -> f64 + Send + Sync + 'static) -> Self {
        FnFunctional { eval: Box::new(eval), exact: None, non_anticipative: false }
    }

    pub fn with_exact_ci(mut self, ci: impl Fn(usize, &GridPath) -> Option<CiPair> + Send + Sync + 'static) -> Self {
        self.exact = Some(Box::new(ci));
        self
    }

    pub fn non_anticipative(mut self, flag: bool) -> Self {
        self.non_anticipative = flag;
        self
    }
}

impl Functional for FnFunctional {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        x.spec().check_t_idx(t_idx)?;
        Ok((self.eval)(t_idx, x))
    }
    fn exact_ci(&self, t_idx: usize, x: &GridPath) -> Option<CiPair> {
        self.exact.as_ref().and_then(|f| f(t_idx, x))
    }
    fn claims_non_anticipative(&self) -> bool {
        self.non_anticipative
    }
}

/// Finite-difference ci-derivative estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CiDerivative {
    pub dt: f64,
    pub grad: Point,
    /// Worst deviation of a probe quotient from the fitted affine model.
    pub residual: f64,
}

impl CiDerivative {
    /// `|dt - exact.dt| + ||grad - exact.grad||`.
    pub fn mismatch(&self, exact: &CiPair) -> f64 {
        let g: f64 = self.grad.iter().zip(&exact.grad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        (self.dt - exact.dt).abs() + g
    }

    /// Verdict "differentiable here": residual within `factor * step * lip`.
    pub fn looks_differentiable(&self, step: f64, local_lip: f64, factor: f64) -> bool {
        self.residual <= factor * step * local_lip.max(1.0)
    }
}

/// Default multiplier in [`CiDerivative::looks_differentiable`].
pub const DIFFERENTIABILITY_FACTOR: f64 = 10.0;

fn step_intervals(spec: &crate::path_space::GridSpec, step: f64) -> Result<usize> {
    let delta = spec.delta();
    let k = (step / delta).round();
    if !(step > 0.0) || k < 1.0 || (k * delta - step).abs() > 1e-9 * delta {
        return Err(Error::StepNotGridMultiple { step, spacing: delta });
    }
    Ok(k as usize)
}

/// One-sided probe quotients
/// `q(v) = [F(t + step, z_{t,x,v}) - F(t, x)] / step` for `v in {0, +-e_i}`;
/// `dt = q(0)`, `grad_i = (q(e_i) - q(-e_i)) / 2`.
pub fn ci_derivative_fd<F: Functional + ?Sized>(f: &F, p: &PointedPath, step: f64) -> Result<CiDerivative> {
    let spec = *p.path.spec();
    spec.check_t_idx(p.t_idx)?;
    if p.t_idx == spec.m_fut {
        return Err(Error::AtHorizon);
    }
    let k = step_intervals(&spec, step)?;
    if p.t_idx + k > spec.m_fut {
        return Err(Error::StepNotGridMultiple { step, spacing: spec.delta() });
    }
    let step = spec.time(p.t_idx + k) - spec.time(p.t_idx);
    let n = spec.n;
    let base = f.eval(p.t_idx, &p.path)?;
    // probe 0 is v = 0, probes 2c+1 / 2c+2 are +e_c / -e_c
    let probe = |j: usize| -> Result<f64> {
        let mut v = vec![0.0; n];
        if j > 0 {
            v[(j - 1) / 2] = if j % 2 == 1 { 1.0 } else { -1.0 };
        }
        let z = lip_extension(p.t_idx, &p.path, &v)?;
        Ok((f.eval(p.t_idx + k, &z)? - base) / step)
    };
    let q = par::try_map_range(2 * n + 1, probe)?;
    let dt = q[0];
    let grad: Point = (0..n).map(|c| (q[2 * c + 1] - q[2 * c + 2]) / 2.0).collect();
    let mut residual: f64 = 0.0;
    for c in 0..n {
        residual = residual.max((q[2 * c + 1] - dt - grad[c]).abs());
        residual = residual.max((q[2 * c + 2] - dt + grad[c]).abs());
    }
    Ok(CiDerivative { dt, grad, residual })
}

/// `max |F(t, x) - F(t, x(. ^ t))|` over the sample.
pub fn check_non_anticipative<F: Functional + ?Sized>(f: &F, samples: &[PointedPath]) -> Result<f64> {
    let devs = par::map_slice(samples, |p| -> Result<f64> {
        let stopped = stop(&p.path, p.t_idx)?;
        Ok((f.eval(p.t_idx, &p.path)? - f.eval(p.t_idx, &stopped)?).abs())
    });
    devs.into_iter().try_fold(0.0_f64, |acc, d| Ok(acc.max(d?)))
}

/// Discrete `L_{phi,D}`: the largest forward quotient
/// `|F(t + delta, z_{t,x,v}) - F(t, x)| / delta` over members, nodes `t < T`,
/// probe velocities and grid lags `delta`.
pub fn lphi_constant<F: Functional + ?Sized>(f: &F, family: &EnumeratedFamily, probes: &[Point]) -> Result<f64> {
    let spec = *family.spec();
    let m = spec.m_fut;
    let evals = (family.len() as u128) * (m as u128) * (probes.len() as u128) * (m as u128);
    let cap = family.family.cap.saturating_mul(64);
    if evals > cap as u128 {
        return Err(Error::CapExceeded { requested: evals, cap });
    }
    for v in probes {
        if v.len() != spec.n {
            return Err(Error::DimensionMismatch { expected: spec.n, got: v.len() });
        }
    }
    let per_path = par::map_range(family.len(), |i| -> Result<f64> {
        let x = &family.paths[i];
        let mut worst: f64 = 0.0;
        for t in 0..m {
            let base = f.eval(t, x)?;
            for v in probes {
                let z = lip_extension(t, x, v)?;
                for lag in 1..=m - t {
                    let delta = spec.time(t + lag) - spec.time(t);
                    worst = worst.max((f.eval(t + lag, &z)? - base).abs() / delta);
                }
            }
        }
        Ok(worst)
    });
    per_path.into_iter().try_fold(0.0_f64, |acc, w| Ok(acc.max(w?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_space::{GridSpec, PathFamily, DEFAULT_CAP};
    use smallvec::smallvec;

    fn spec(m: usize) -> GridSpec {
        GridSpec::new(0.5, 1.0, 1, 1, m).unwrap()
    }

    /// F(t, x) = x(t) * t with exact ci-derivatives (x(t), t).
    fn product() -> FnFunctional {
        FnFunctional::new(|t, x| x.at(t)[0] * x.spec().time(t))
            .with_exact_ci(|t, x| Some(CiPair { dt: x.at(t)[0], grad: smallvec![x.spec().time(t)] }))
            .non_anticipative(true)
    }

    #[test]
    fn constant_functional_has_zero_derivative() {
        let s = spec(4);
        let f = FnFunctional::new(|_, _| 3.0);
        let p = PointedPath::new(1, GridPath::constant(s, &[1.0]).unwrap()).unwrap();
        let d = ci_derivative_fd(&f, &p, s.delta()).unwrap();
        assert_eq!((d.dt, d.grad[0], d.residual), (0.0, 0.0, 0.0));
    }

    #[test]
    fn product_functional_converges() {
        // along z_{t,x,v}: F = (x(t) + v d)(t + d), so q(v) = x(t) + v (t + d):
        // dt = x(t) = 2 exactly, grad = t + d, residual = 0
        let mut errs = Vec::new();
        for m in [4, 8, 16, 32] {
            let s = spec(m);
            let x = GridPath::constant(s, &[2.0]).unwrap();
            let t = m / 2;
            let p = PointedPath::new(t, x).unwrap();
            let d = ci_derivative_fd(&product(), &p, s.delta()).unwrap();
            assert!((d.dt - 2.0).abs() < 1e-12);
            assert!((d.grad[0] - (0.5 + s.delta())).abs() < 1e-12);
            assert!(d.residual < 1e-12);
            let exact = product().exact_ci(t, &p.path).unwrap();
            errs.push(d.mismatch(&exact));
        }
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] / 2.0 * 4.0);
        }
    }

    #[test]
    fn fd_matches_exact_for_smooth_functional() {
        // F = x(t)^2 + t^2: dt = 2t, grad = 2 x(t); q(v) error = d + v^2 d
        let f = FnFunctional::new(|t, x| x.at(t)[0].powi(2) + x.spec().time(t).powi(2));
        let mut prev = f64::INFINITY;
        for m in [4, 8, 16] {
            let s = spec(m);
            let x = GridPath::constant(s, &[1.5]).unwrap();
            let p = PointedPath::new(m / 4, x).unwrap();
            let d = ci_derivative_fd(&f, &p, s.delta()).unwrap();
            let exact = CiPair { dt: 2.0 * 0.25, grad: smallvec![3.0] };
            let err = d.mismatch(&exact);
            assert!((err - s.delta()).abs() < 1e-12, "err {err}");
            assert!(err <= prev / 2.0 * 4.0);
            prev = err;
        }
    }

    #[test]
    fn step_validation() {
        let s = spec(4);
        let p = PointedPath::new(0, GridPath::constant(s, &[0.0]).unwrap()).unwrap();
        let f = FnFunctional::new(|_, _| 0.0);
        assert!(matches!(ci_derivative_fd(&f, &p, 0.1), Err(Error::StepNotGridMultiple { .. })));
        assert!(matches!(ci_derivative_fd(&f, &p, 2.0), Err(Error::StepNotGridMultiple { .. })));
        assert!(ci_derivative_fd(&f, &p, 0.5).is_ok());
        let end = PointedPath::new(4, GridPath::constant(s, &[0.0]).unwrap()).unwrap();
        assert!(matches!(ci_derivative_fd(&f, &end, 0.25), Err(Error::AtHorizon)));
    }

    #[test]
    fn anticipation_detected() {
        let s = spec(4);
        let x = GridPath::from_fn(s, |t| smallvec![t]).unwrap();
        let samples: Vec<PointedPath> = (0..=4).map(|t| PointedPath::new(t, x.clone()).unwrap()).collect();
        let current = FnFunctional::new(|t, x| x.at(t)[0]);
        assert_eq!(check_non_anticipative(&current, &samples).unwrap(), 0.0);
        let terminal = FnFunctional::new(|_, x| x.at(x.spec().m_fut)[0]);
        assert_eq!(check_non_anticipative(&terminal, &samples).unwrap(), 1.0);
    }

    fn unit_family() -> EnumeratedFamily {
        let s = GridSpec::new(0.0, 1.0, 1, 0, 3).unwrap();
        PathFamily::new(s, 1.0, vec![vec![-1.0], vec![0.0], vec![1.0]], vec![vec![0.0]], None, DEFAULT_CAP)
            .unwrap()
            .members()
            .unwrap()
    }

    #[test]
    fn lphi_examples() {
        let fam = unit_family();
        let probes: Vec<Point> = vec![smallvec![-1.0], smallvec![0.0], smallvec![1.0]];
        let constant = FnFunctional::new(|_, _| 7.0);
        assert_eq!(lphi_constant(&constant, &fam, &probes).unwrap(), 0.0);
        let current = FnFunctional::new(|t, x| x.at(t)[0]);
        assert!((lphi_constant(&current, &fam, &probes).unwrap() - 1.0).abs() < 1e-12);
        let time = FnFunctional::new(|t, x| x.spec().time(t));
        assert!((lphi_constant(&time, &fam, &probes).unwrap() - 1.0).abs() < 1e-12);
        let half: Vec<Point> = vec![smallvec![0.5]];
        assert!((lphi_constant(&current, &fam, &half).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lphi_is_subadditive() {
        let fam = unit_family();
        let probes: Vec<Point> = vec![smallvec![-1.0], smallvec![1.0]];
        let a = |t: usize, x: &GridPath| x.at(t)[0].powi(2);
        let b = |t: usize, x: &GridPath| (x.spec().time(t) - x.at(t)[0]).sin();
        let fa = FnFunctional::new(a);
        let fb = FnFunctional::new(b);
        let sum = FnFunctional::new(move |t, x| a(t, x) + b(t, x));
        let la = lphi_constant(&fa, &fam, &probes).unwrap();
        let lb = lphi_constant(&fb, &fam, &probes).unwrap();
        let ls = lphi_constant(&sum, &fam, &probes).unwrap();
        assert!(ls <= la + lb + 1e-12);
    }
}
