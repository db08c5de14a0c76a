use std::collections::HashMap;
use std::io::{Read, Write};

use log::debug;
use serde::Serialize;

use super::BellmanData;
use crate::ci_calculus::Functional;
use crate::error::{Error, Result};
use crate::par;
use crate::path_space::{dist, lip_extension, EnumeratedFamily, GridPath, GridSpec, PathKey, Point};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DpOptions {
    /// Largest admissible `|f - v|` between the dynamics and the alphabet
    /// velocity it is projected to.
    pub projection_tolerance: f64,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions { projection_tolerance: 1e-9 }
    }
}

/// Values on the stopped paths of a family, one layer per future node.
///
/// Lookups are by exact stopped-path key; there is no interpolation, so a
/// path outside the family is a [`Error::KeyMiss`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    spec: GridSpec,
    alphabet: Vec<Point>,
    layers: Vec<HashMap<PathKey, f64>>,
}

/// Output of [`solve_dp`].
#[derive(Clone, Debug)]
pub struct DpSolution {
    pub table: ValueTable,
    /// Largest `|f - v|` met while projecting onto the alphabet.
    pub max_projection_defect: f64,
}

fn unique_stopped(family: &EnumeratedFamily, t: usize) -> Vec<(PathKey, GridPath)> {
    let mut seen: HashMap<PathKey, ()> = HashMap::new();
    let mut out = Vec::new();
    for p in &family.paths {
        let k = p.stopped_key(t);
        if seen.insert(k.clone(), ()).is_none() {
            out.push((k, p.clone()));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn nearest(alphabet: &[Point], f: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in alphabet.iter().enumerate() {
        let d = dist(v, f);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl ValueTable {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Velocities the one-step dynamics are projected onto.
    pub fn alphabet(&self) -> &[Point] {
        &self.alphabet
    }

    pub fn layer(&self, t_idx: usize) -> &HashMap<PathKey, f64> {
        &self.layers[t_idx]
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        self.spec.check_t_idx(t_idx)?;
        if x.spec() != &self.spec {
            return Err(Error::SpecMismatch);
        }
        self.layers[t_idx].get(&x.stopped_key(t_idx)).copied().ok_or(Error::KeyMiss { t_idx })
    }

    /// Tabulate a functional on every stopped path of the family.
    pub fn from_functional<F: Functional + ?Sized>(family: &EnumeratedFamily, f: &F) -> Result<Self> {
        let spec = *family.spec();
        let layers = (0..=spec.m_fut)
            .map(|t| {
                let keys = unique_stopped(family, t);
                let vals = par::try_map_range(keys.len(), |i| f.eval(t, &keys[i].1))?;
                Ok(keys.into_iter().map(|(k, _)| k).zip(vals).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ValueTable { spec, alphabet: family.family.future_alphabet(), layers })
    }

    /// Tabulate `(t, x) -> f(t, x(. ^ t))`.
    pub fn from_fn(family: &EnumeratedFamily, f: impl Fn(usize, &GridPath) -> f64 + Send + Sync) -> Result<Self> {
        let spec = *family.spec();
        let layers = (0..=spec.m_fut)
            .map(|t| {
                let keys = unique_stopped(family, t);
                let vals = par::try_map_range(keys.len(), |i| -> Result<f64> {
                    let stopped = crate::path_space::stop(&keys[i].1, t)?;
                    Ok(f(t, &stopped))
                })?;
                Ok(keys.into_iter().map(|(k, _)| k).zip(vals).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ValueTable { spec, alphabet: family.family.future_alphabet(), layers })
    }

    /// `max |value(t, x) - value(t, y)| / ||x(. ^ t) - y(. ^ t)||` over each
    /// layer.
    pub fn path_lipschitz(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (t, layer) in self.layers.iter().enumerate() {
            let entries: Vec<(GridPath, f64)> = layer
                .iter()
                .map(|(k, v)| Ok((GridPath::from_stopped_key(self.spec, k)?, *v)))
                .collect::<Result<_>>()?;
            let rows = par::map_range(entries.len(), |a| {
                let mut w: f64 = 0.0;
                for b in a + 1..entries.len() {
                    let d = crate::path_space::sup_dist_upto(&entries[a].0, &entries[b].0, t).unwrap_or(f64::INFINITY);
                    if d > 0.0 {
                        w = w.max((entries[a].1 - entries[b].1).abs() / d);
                    }
                }
                w
            });
            worst = rows.into_iter().fold(worst, f64::max);
        }
        Ok(worst)
    }

    /// Copy with `delta` added at one entry.
    pub fn perturbed(&self, t_idx: usize, x: &GridPath, delta: f64) -> Result<Self> {
        self.get(t_idx, x)?;
        let mut out = self.clone();
        *out.layers[t_idx].get_mut(&x.stopped_key(t_idx)).expect("entry exists") += delta;
        Ok(out)
    }

    /// `t_idx,time,prefix,value`, with the stopped prefix as `;`-separated
    /// node-major samples; rows sorted by node then key.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_idx", "time", "prefix", "value"])?;
        for (t, layer) in self.layers.iter().enumerate() {
            let mut rows: Vec<(&PathKey, &f64)> = layer.iter().collect();
            rows.sort_by(|a, b| a.0.cmp(b.0));
            for (k, v) in rows {
                let p = GridPath::from_stopped_key(self.spec, k)?;
                let end = (self.spec.global(t) + 1) * self.spec.n;
                let prefix: Vec<String> = p.samples()[..end].iter().map(f64::to_string).collect();
                w.write_record([t.to_string(), self.spec.time(t).to_string(), prefix.join(";"), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(spec: GridSpec, alphabet: Vec<Point>, input: R) -> Result<Self> {
        let mut layers: Vec<HashMap<PathKey, f64>> = vec![HashMap::new(); spec.m_fut + 1];
        let mut r = csv::Reader::from_reader(input);
        for rec in r.records() {
            let rec = rec?;
            let bad = |what: &str| Error::Config(format!("value table row {:?}: {what}", rec.position().map(|p| p.line())));
            if rec.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let t: usize = rec[0].parse().map_err(|_| bad("bad t_idx"))?;
            spec.check_t_idx(t)?;
            let samples: Vec<f64> = rec[2]
                .split(';')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad prefix"))?;
            if samples.len() != (spec.global(t) + 1) * spec.n {
                return Err(bad("prefix length does not match t_idx"));
            }
            let value: f64 = rec[3].parse().map_err(|_| bad("bad value"))?;
            let mut full = samples.clone();
            let last = samples[samples.len() - spec.n..].to_vec();
            while full.len() < spec.node_count() * spec.n {
                full.extend_from_slice(&last);
            }
            let p = GridPath::new(spec, full)?;
            layers[t].insert(p.stopped_key(t), value);
        }
        Ok(ValueTable { spec, alphabet, layers })
    }

    fn one_step(&self, data: &BellmanData, t: usize, x: &GridPath, tolerance: f64) -> Result<(f64, f64)> {
        let dt = self.spec.interval(self.spec.global(t));
        let mut best = f64::INFINITY;
        let mut defect: f64 = 0.0;
        for u in data.controls() {
            let f = data.f(t, x, u)?;
            if f.len() != self.spec.n {
                return Err(Error::DimensionMismatch { expected: self.spec.n, got: f.len() });
            }
            let (vi, d) = nearest(&self.alphabet, &f);
            if d > tolerance {
                return Err(Error::ProjectionDefect { defect: d, limit: tolerance });
            }
            defect = defect.max(d);
            let z = lip_extension(t, x, &self.alphabet[vi])?;
            let next = self.get(t + 1, &z)?;
            best = best.min(data.g(t, x, u)? * dt + next);
        }
        Ok((best, defect))
    }
}

impl Functional for ValueTable {
    fn eval(&self, t_idx: usize, x: &GridPath) -> Result<f64> {
        self.get(t_idx, x)
    }

    fn claims_non_anticipative(&self) -> bool {
        true
    }
}

/// Backward induction over the history tree of the family:
/// `value(T, x) = sigma(x)`,
/// `value(t, x) = min_u [g(t, x, u) dt + value(t + dt, z_{t, x, v(u)})]`
/// where `v(u)` is the alphabet velocity nearest to `f(t, x, u)`.
pub fn solve_dp(data: &BellmanData, family: &EnumeratedFamily, opts: &DpOptions) -> Result<DpSolution> {
    let spec = *family.spec();
    let m = spec.m_fut;
    let mut table = ValueTable {
        spec,
        alphabet: family.family.future_alphabet(),
        layers: vec![HashMap::new(); m + 1],
    };
    let last = unique_stopped(family, m);
    let vals = par::try_map_range(last.len(), |i| data.terminal(&last[i].1))?;
    table.layers[m] = last.into_iter().map(|(k, _)| k).zip(vals).collect();
    let mut max_defect: f64 = 0.0;
    for t in (0..m).rev() {
        let keys = unique_stopped(family, t);
        let stepped = par::try_map_range(keys.len(), |i| {
            let x = crate::path_space::stop(&keys[i].1, t)?;
            table.one_step(data, t, &x, opts.projection_tolerance)
        })?;
        let mut layer = HashMap::with_capacity(keys.len());
        for ((k, _), (v, d)) in keys.into_iter().zip(stepped) {
            max_defect = max_defect.max(d);
            layer.insert(k, v);
        }
        table.layers[t] = layer;
        debug!("dp layer {t}: {} entries", table.layers[t].len());
    }
    Ok(DpSolution { table, max_projection_defect: max_defect })
}

/// [`solve_dp`] on each family of a list.
pub fn solve_dp_families(
    data: &BellmanData,
    families: &[EnumeratedFamily],
    opts: &DpOptions,
) -> Result<Vec<DpSolution>> {
    families.iter().map(|f| solve_dp(data, f, opts)).collect()
}

/// `max |value(t, x) - min_u [g dt + value(t + dt, extension)]|` over the
/// interior layers.
pub fn dpp_residual(table: &ValueTable, data: &BellmanData, opts: &DpOptions) -> Result<f64> {
    let spec = table.spec;
    let mut worst: f64 = 0.0;
    for t in 0..spec.m_fut {
        let entries: Vec<(&PathKey, &f64)> = table.layers[t].iter().collect();
        let res = par::try_map_range(entries.len(), |i| -> Result<f64> {
            let (k, v) = entries[i];
            let x = GridPath::from_stopped_key(spec, k)?;
            let (best, _) = table.one_step(data, t, &x, opts.projection_tolerance)?;
            Ok((v - best).abs())
        })?;
        worst = res.into_iter().fold(worst, f64::max);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ci_calculus::{check_non_anticipative, lphi_constant};
    use crate::path_space::{PathFamily, PointedPath, DEFAULT_CAP};
    use smallvec::smallvec;

    fn family(h: f64, m_past: usize, m_fut: usize) -> EnumeratedFamily {
        let s = GridSpec::new(h, 1.0, 1, m_past, m_fut).unwrap();
        PathFamily::new(s, 1.0, vec![vec![-1.0], vec![0.0], vec![1.0]], vec![vec![0.0]], None, DEFAULT_CAP)
            .unwrap()
            .members()
            .unwrap()
    }

    fn closed_form(t: usize, x: &GridPath) -> f64 {
        let s = x.spec();
        x.at(t)[0] - (s.horizon - s.time(t))
    }

    #[test]
    fn unit_speed_closed_form() {
        for (h, mp, mf) in [(0.0, 0, 4), (1.0, 2, 4), (0.5, 1, 8)] {
            let fam = family(h, mp, mf);
            let sol = solve_dp(&BellmanData::unit_speed(), &fam, &DpOptions::default()).unwrap();
            assert_eq!(sol.max_projection_defect, 0.0);
            for x in &fam.paths {
                for t in 0..=mf {
                    assert_eq!(sol.table.get(t, x).unwrap(), closed_form(t, x));
                }
            }
            assert_eq!(dpp_residual(&sol.table, &BellmanData::unit_speed(), &DpOptions::default()).unwrap(), 0.0);
            let injected = ValueTable::from_fn(&fam, closed_form).unwrap();
            assert_eq!(injected, sol.table);
        }
    }

    #[test]
    fn no_dynamics_returns_terminal_of_stopped_path() {
        let data = BellmanData::new(
            vec![smallvec![0.0]],
            |_, _, _| Ok(smallvec![0.0]),
            |_, _, _| Ok(0.0),
            |x| Ok(x.at(x.spec().m_fut)[0] * 2.0 + x.node(0)[0]),
        )
        .unwrap();
        let fam = family(1.0, 1, 3);
        let sol = solve_dp(&data, &fam, &DpOptions::default()).unwrap();
        for x in &fam.paths {
            for t in 0..=3 {
                let s = crate::path_space::stop(x, t).unwrap();
                assert_eq!(sol.table.get(t, x).unwrap(), data.terminal(&s).unwrap());
            }
        }
    }

    #[test]
    fn table_is_non_anticipative_and_misses_are_typed() {
        let fam = family(0.0, 0, 3);
        let sol = solve_dp(&BellmanData::unit_speed(), &fam, &DpOptions::default()).unwrap();
        let samples: Vec<PointedPath> = fam
            .paths
            .iter()
            .flat_map(|x| (0..=3).map(move |t| PointedPath::new(t, x.clone()).unwrap()))
            .collect();
        assert_eq!(check_non_anticipative(&sol.table, &samples).unwrap(), 0.0);
        let outside = GridPath::scalar(*fam.spec(), &[0.0, 0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(sol.table.eval(2, &outside), Err(Error::KeyMiss { t_idx: 2 })));
    }

    #[test]
    fn perturbation_shows_in_residual() {
        let fam = family(0.0, 0, 3);
        let data = BellmanData::unit_speed();
        let sol = solve_dp(&data, &fam, &DpOptions::default()).unwrap();
        let x = &fam.paths[5];
        let bumped = sol.table.perturbed(1, x, 1.0).unwrap();
        let r = dpp_residual(&bumped, &data, &DpOptions::default()).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn monotone_in_terminal_data() {
        let fam = family(1.0, 1, 3);
        let base = BellmanData::unit_speed();
        let lifted = BellmanData::new(
            base.controls().to_vec(),
            |_, _, u| Ok(Point::from_slice(u)),
            |_, _, _| Ok(0.0),
            |x| Ok(x.at(x.spec().m_fut)[0] + x.at(x.spec().m_fut)[0].abs()),
        )
        .unwrap();
        let a = solve_dp(&base, &fam, &DpOptions::default()).unwrap().table;
        let b = solve_dp(&lifted, &fam, &DpOptions::default()).unwrap().table;
        for x in &fam.paths {
            for t in 0..=3 {
                assert!(b.get(t, x).unwrap() >= a.get(t, x).unwrap());
            }
        }
        let again = solve_dp(&base, &fam, &DpOptions::default()).unwrap().table;
        assert_eq!(a, again);
    }

    #[test]
    fn projection_defect_is_checked() {
        let fam = family(0.0, 0, 2);
        let data = BellmanData::new(
            vec![smallvec![1.0]],
            |_, _, _| Ok(smallvec![0.3]),
            |_, _, _| Ok(0.0),
            |_| Ok(0.0),
        )
        .unwrap();
        assert!(matches!(
            solve_dp(&data, &fam, &DpOptions::default()),
            Err(Error::ProjectionDefect { .. })
        ));
        let loose = DpOptions { projection_tolerance: 0.5 };
        let sol = solve_dp(&data, &fam, &loose).unwrap();
        assert!((sol.max_projection_defect - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lphi_of_table_is_bounded() {
        // one DPP step: |value(t, x) - value(t + dt, z_v)| <= dt (|g| + Lip |f - v|),
        // with |g| <= 1 and |f - v| <= 2 here
        let fam = family(0.0, 0, 3);
        let data = BellmanData::new(
            vec![smallvec![-1.0], smallvec![1.0]],
            |_, _, u| Ok(Point::from_slice(u)),
            |t, x, _| Ok(x.at(t)[0]),
            |x| Ok(x.at(x.spec().m_fut)[0]),
        )
        .unwrap();
        let sol = solve_dp(&data, &fam, &DpOptions::default()).unwrap();
        let probes: Vec<Point> = vec![smallvec![-1.0], smallvec![0.0], smallvec![1.0]];
        let l = lphi_constant(&sol.table, &fam, &probes).unwrap();
        let lip = sol.table.path_lipschitz().unwrap();
        // layer 0 has a single entry; layer 1 carries 1 + 2 dt
        assert!((lip - 5.0 / 3.0).abs() < 1e-12, "{lip}");
        assert!(l.is_finite() && l <= 1.0 + 2.0 * lip + 1e-12, "{l}");
    }

    #[test]
    fn csv_round_trip() {
        let fam = family(1.0, 1, 2);
        let sol = solve_dp(&BellmanData::unit_speed(), &fam, &DpOptions::default()).unwrap();
        let mut buf = Vec::new();
        sol.table.write_csv(&mut buf).unwrap();
        let back = ValueTable::read_csv(*fam.spec(), fam.family.future_alphabet(), buf.as_slice()).unwrap();
        assert_eq!(back, sol.table);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_idx,time,prefix,value\n"));
    }

    #[test]
    fn several_families() {
        let fams = vec![family(0.0, 0, 2), family(1.0, 1, 2)];
        let sols = solve_dp_families(&BellmanData::unit_speed(), &fams, &DpOptions::default()).unwrap();
        assert_eq!(sols.len(), 2);
        for (f, s) in fams.iter().zip(&sols) {
            for x in &f.paths {
                assert_eq!(s.table.get(0, x).unwrap(), closed_form(0, x));
            }
        }
    }
}
