//! JSON description of a Bellman problem with affine dynamics
//! `f = A x(t) + D x(t - h) + B u + c` and expression-valued costs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::expr::{Context, Expr};
use super::BellmanData;
use crate::error::{Error, Result};
use crate::path_space::{GridPath, Point, VectorEntry};

pub const PROBLEM_SCHEMA: &str = "cihj.problem.v1";

/// Dynamics coefficients; missing matrices are zero, except `b` which
/// defaults to the identity when control and state dimensions agree.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineDynamics {
    #[serde(default)]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub c: Option<Vec<f64>>,
}

/// One expression for every control, or one per control in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunningCost {
    Shared(String),
    PerControl(Vec<String>),
}

impl Default for RunningCost {
    fn default() -> Self {
        RunningCost::Shared("0".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BellmanProblem {
    #[serde(default)]
    pub schema: Option<String>,
    /// State dimension.
    pub n: usize,
    pub controls: Vec<VectorEntry>,
    #[serde(default)]
    pub dynamics: AffineDynamics,
    #[serde(default)]
    pub running_cost: RunningCost,
    pub terminal: String,
}

fn matrix(name: &str, m: &Option<Vec<Vec<f64>>>, rows: usize, cols: usize) -> Result<Option<Vec<Vec<f64>>>> {
    let Some(m) = m else { return Ok(None) };
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("dynamics.{name} must be {rows}x{cols}")));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("dynamics.{name} has a non-finite entry")));
    }
    Ok(Some(m.clone()))
}

fn mat_vec(m: &[Vec<f64>], v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl BellmanProblem {
    /// The unit-speed problem `f = u`, `U = {-1, 1}`, `g = 0`, `sigma = x(T)`.
    pub fn unit_speed() -> Self {
        BellmanProblem {
            schema: Some(PROBLEM_SCHEMA.into()),
            n: 1,
            controls: vec![VectorEntry::Scalar(-1.0), VectorEntry::Scalar(1.0)],
            dynamics: AffineDynamics::default(),
            running_cost: RunningCost::default(),
            terminal: "x(t)".into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: BellmanProblem = serde_json::from_str(text).map_err(|e| Error::Config(format!("problem file: {e}")))?;
        if let Some(s) = &p.schema {
            if s != PROBLEM_SCHEMA {
                return Err(Error::Config(format!("problem schema `{s}`, expected `{PROBLEM_SCHEMA}`")));
            }
        }
        Ok(p)
    }

    pub fn build(&self) -> Result<BellmanData> {
        let n = self.n;
        if n == 0 {
            return Err(Error::Config("state dimension n must be positive".into()));
        }
        let controls: Vec<Point> = self.controls.iter().cloned().map(|c| Point::from_vec(c.into_vec())).collect();
        if controls.is_empty() {
            return Err(Error::EmptyControls);
        }
        let k = controls[0].len();
        if controls.iter().any(|u| u.len() != k || u.iter().any(|c| !c.is_finite())) {
            return Err(Error::Config("controls must be finite and share one dimension".into()));
        }
        let dy = &self.dynamics;
        let a = matrix("a", &dy.a, n, n)?;
        let d = matrix("d", &dy.d, n, n)?;
        let b = match matrix("b", &dy.b, n, k)? {
            Some(b) => b,
            None if k == n => (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
            None => return Err(Error::Config(format!("dynamics.b is required when controls have dimension {k} != {n}"))),
        };
        let c = match &dy.c {
            Some(c) if c.len() != n => return Err(Error::Config(format!("dynamics.c must have length {n}"))),
            Some(c) => c.clone(),
            None => vec![0.0; n],
        };
        let costs: Vec<Expr> = match &self.running_cost {
            RunningCost::Shared(s) => vec![Expr::parse(s)?; controls.len()],
            RunningCost::PerControl(v) if v.len() == controls.len() => v.iter().map(|s| Expr::parse(s)).collect::<Result<_>>()?,
            RunningCost::PerControl(v) => {
                return Err(Error::Config(format!("{} running costs for {} controls", v.len(), controls.len())))
            }
        };
        for e in &costs {
            e.check_dims(n, k)?;
        }
        let terminal = Expr::parse(&self.terminal)?;
        terminal.check_dims(n, 0)?;

        let table: Arc<Vec<(Point, Expr)>> = Arc::new(controls.iter().cloned().zip(costs).collect());
        let lookup = table.clone();
        BellmanData::new(
            controls,
            move |t, x: &GridPath, u: &[f64]| {
                let spec = x.spec();
                let mut out = c.clone();
                if let Some(a) = &a {
                    mat_vec(a, x.at(t), &mut out);
                }
                if let Some(d) = &d {
                    let delayed = x.value_at((spec.time(t) - spec.h).max(-spec.h));
                    mat_vec(d, &delayed, &mut out);
                }
                mat_vec(&b, u, &mut out);
                Ok(Point::from_vec(out))
            },
            move |t, x, u| {
                let (_, e) = lookup
                    .iter()
                    .find(|(v, _)| v.as_slice() == u)
                    .ok_or_else(|| Error::Config(format!("control {u:?} is not in the control set")))?;
                e.eval(&Context { t_idx: t, path: x, control: u })
            },
            move |x| terminal.eval(&Context { t_idx: x.spec().m_fut, path: x, control: &[] }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::bellman_h;
    use crate::path_space::GridSpec;

    #[test]
    fn unit_speed_from_json() {
        let text = r#"{"schema": "cihj.problem.v1", "n": 1, "controls": [-1, 1], "terminal": "x(t)"}"#;
        let p = BellmanProblem::from_json(text).unwrap();
        assert_eq!(p, BellmanProblem::unit_speed());
        let d = p.build().unwrap();
        let s = GridSpec::new(0.0, 1.0, 1, 0, 2).unwrap();
        let x = GridPath::scalar(s, &[0.0, 0.5, 0.25]).unwrap();
        assert_eq!(d.terminal(&x).unwrap(), 0.25);
        assert_eq!(bellman_h(&d, 1, &x, &[2.0]).unwrap(), -2.0);
    }

    #[test]
    fn affine_dynamics_and_costs() {
        let text = r#"{
            "n": 1,
            "controls": [0, 1],
            "dynamics": {"a": [[2]], "d": [[-1]], "b": [[1]], "c": [0.5]},
            "running_cost": ["x(t)", "u * x(t - h)"],
            "terminal": "max(x(t), 0) + sup"
        }"#;
        let d = BellmanProblem::from_json(text).unwrap().build().unwrap();
        let s = GridSpec::new(1.0, 1.0, 1, 1, 2).unwrap();
        // nodes -1, 0, 0.5, 1
        let x = GridPath::scalar(s, &[3.0, 1.0, 2.0, -0.5]).unwrap();
        // t = 0.5: 2*2 - 1*x(-0.5) + u + 0.5, x(-0.5) = 2
        assert_eq!(d.f(1, &x, &[1.0]).unwrap()[0], 4.0 - 2.0 + 1.0 + 0.5);
        assert_eq!(d.g(1, &x, &[0.0]).unwrap(), 2.0);
        assert_eq!(d.g(1, &x, &[1.0]).unwrap(), 2.0);
        assert_eq!(d.terminal(&x).unwrap(), 0.0 + 3.0);
    }

    #[test]
    fn config_errors() {
        for bad in [
            r#"{"n": 1, "controls": [], "terminal": "0"}"#,
            r#"{"n": 1, "controls": [1], "terminal": "u"}"#,
            r#"{"n": 1, "controls": [1], "terminal": "x[1](t)"}"#,
            r#"{"n": 1, "controls": [1, 2], "running_cost": ["0"], "terminal": "0"}"#,
            r#"{"n": 1, "controls": [[1, 0]], "terminal": "0"}"#,
            r#"{"n": 1, "controls": [1], "dynamics": {"a": [[1, 2]]}, "terminal": "0"}"#,
            r#"{"n": 1, "controls": [1], "terminal": "0", "extra": 1}"#,
            r#"{"schema": "other", "n": 1, "controls": [1], "terminal": "0"}"#,
        ] {
            let r = BellmanProblem::from_json(bad).and_then(|p| p.build().map(|_| ()));
            assert!(r.is_err(), "{bad}");
        }
    }
}
