//! Static network model and lossless DC power flow.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Deserialize;

use crate::config::{ensure, parse_toml, ConfigError};

/// Injections must balance to within this many MW before the slack bus
/// absorbs the residual.
pub const BALANCE_TOL_MW: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("network is not connected: bus {0} is unreachable from the slack bus")]
    SingularNetwork(u32),
    #[error("injections do not balance: residual {residual_mw} MW")]
    Imbalance { residual_mw: f64 },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VppKind {
    BulkBattery,
    PemFleet,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: u32,
    /// 1 is the internal control area, 2 the external system.
    pub area: u8,
    pub load_mw: f64,
    #[serde(default)]
    pub renewable_mw: f64,
    /// Piecewise-constant forecast: `[t_s, mw]` pairs, each value holding
    /// from its time onward. Empty means `load_mw` throughout.
    #[serde(default)]
    pub load_profile: Vec<(f64, f64)>,
}

impl Bus {
    /// Scheduled gross load at time `t_s`.
    pub fn load_at(&self, t_s: f64) -> f64 {
        self.load_profile
            .iter()
            .take_while(|(t, _)| *t <= t_s)
            .last()
            .map_or(self.load_mw, |&(_, mw)| mw)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    pub susceptance_pu: f64,
    pub flow_limit_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    /// Scheduled set-point from the economic layer.
    pub p_sched_mw: f64,
    pub ramp_mw_per_min: f64,
    /// Per-unit speed droop on the machine base (`p_max_mw`).
    pub droop_pu: f64,
    pub inertia_h_s: f64,
    /// $/MW²
    pub deviation_cost: f64,
    #[serde(default)]
    pub agc: bool,
    #[serde(default)]
    pub agc_participation: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VppAsset {
    pub id: u32,
    pub bus: u32,
    pub kind: VppKind,
    pub p_ch_max_mw: f64,
    pub p_dis_max_mw: f64,
    pub ramp_ch_mw_per_min: f64,
    pub ramp_dis_mw_per_min: f64,
    pub s_min_mwh: f64,
    pub s_max_mwh: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    pub s0_mwh: f64,
    #[serde(default)]
    pub agc: bool,
    #[serde(default)]
    pub agc_participation: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    base_mva: f64,
    slack_bus: u32,
    #[serde(default)]
    buses: Vec<Bus>,
    #[serde(default)]
    lines: Vec<Line>,
    #[serde(default)]
    generators: Vec<Generator>,
    #[serde(default)]
    vpps: Vec<VppAsset>,
}

/// Validated network. Element order is file order and is the order used by
/// every per-bus / per-line vector in the crate.
#[derive(Debug, Clone)]
pub struct GridModel {
    pub base_mva: f64,
    pub slack_bus: u32,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub vpps: Vec<VppAsset>,
    bus_index: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcFlow {
    pub angles_rad: Vec<f64>,
    pub flows_mw: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineViolation {
    pub line: u32,
    pub overload_mw: f64,
}

impl GridModel {
    pub fn from_toml_str(text: &str) -> Result<Self, GridError> {
        let file: GridFile = parse_toml(text)?;
        Ok(Self::new(
            file.base_mva,
            file.slack_bus,
            file.buses,
            file.lines,
            file.generators,
            file.vpps,
        )?)
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            GridError::Config(c) => GridError::Config(c.within(&path.display().to_string())),
            other => other,
        })
    }

    pub fn new(
        base_mva: f64,
        slack_bus: u32,
        buses: Vec<Bus>,
        lines: Vec<Line>,
        generators: Vec<Generator>,
        vpps: Vec<VppAsset>,
    ) -> Result<Self, ConfigError> {
        ensure(base_mva > 0.0, || "base_mva".into(), "must be positive")?;
        ensure(!buses.is_empty(), || "buses".into(), "at least one bus is required")?;
        let mut bus_index = BTreeMap::new();
        for (k, b) in buses.iter().enumerate() {
            let p = |f: &str| format!("buses[{k}].{f}");
            ensure(bus_index.insert(b.id, k).is_none(), || p("id"), "duplicate bus id")?;
            ensure(b.area == 1 || b.area == 2, || p("area"), "area must be 1 or 2")?;
            ensure(b.load_mw.is_finite(), || p("load_mw"), "must be finite")?;
            ensure(b.renewable_mw.is_finite(), || p("renewable_mw"), "must be finite")?;
            ensure(
                b.load_profile.windows(2).all(|w| w[0].0 < w[1].0),
                || p("load_profile"),
                "times must be strictly increasing",
            )?;
        }
        let known = |id: u32| bus_index.contains_key(&id);
        ensure(known(slack_bus), || "slack_bus".into(), "unknown bus id")?;

        let mut line_ids = BTreeSet::new();
        for (k, l) in lines.iter().enumerate() {
            let p = |f: &str| format!("lines[{k}].{f}");
            ensure(line_ids.insert(l.id), || p("id"), "duplicate line id")?;
            ensure(known(l.from_bus), || p("from_bus"), "unknown bus id")?;
            ensure(known(l.to_bus), || p("to_bus"), "unknown bus id")?;
            ensure(l.from_bus != l.to_bus, || p("to_bus"), "line must join two different buses")?;
            ensure(l.susceptance_pu > 0.0, || p("susceptance_pu"), "must be positive")?;
            ensure(l.flow_limit_mw > 0.0, || p("flow_limit_mw"), "must be positive")?;
        }

        let mut gen_ids = BTreeSet::new();
        for (k, g) in generators.iter().enumerate() {
            let p = |f: &str| format!("generators[{k}].{f}");
            ensure(gen_ids.insert(g.id), || p("id"), "duplicate generator id")?;
            ensure(known(g.bus), || p("bus"), "unknown bus id")?;
            ensure(g.p_max_mw > 0.0, || p("p_max_mw"), "must be positive")?;
            ensure(g.p_min_mw <= g.p_max_mw, || p("p_min_mw"), "exceeds p_max_mw")?;
            ensure(
                g.p_sched_mw >= g.p_min_mw && g.p_sched_mw <= g.p_max_mw,
                || p("p_sched_mw"),
                "outside [p_min_mw, p_max_mw]",
            )?;
            ensure(g.ramp_mw_per_min > 0.0, || p("ramp_mw_per_min"), "must be positive")?;
            ensure(g.droop_pu > 0.0, || p("droop_pu"), "must be positive")?;
            ensure(g.inertia_h_s > 0.0, || p("inertia_h_s"), "must be positive")?;
            ensure(g.deviation_cost >= 0.0, || p("deviation_cost"), "must be non-negative")?;
            ensure(
                (0.0..=1.0).contains(&g.agc_participation),
                || p("agc_participation"),
                "must lie in [0, 1]",
            )?;
        }

        let mut vpp_ids = BTreeSet::new();
        for (k, v) in vpps.iter().enumerate() {
            let p = |f: &str| format!("vpps[{k}].{f}");
            ensure(vpp_ids.insert(v.id), || p("id"), "duplicate vpp id")?;
            ensure(known(v.bus), || p("bus"), "unknown bus id")?;
            ensure(v.p_ch_max_mw >= 0.0, || p("p_ch_max_mw"), "must be non-negative")?;
            ensure(v.p_dis_max_mw >= 0.0, || p("p_dis_max_mw"), "must be non-negative")?;
            ensure(v.ramp_ch_mw_per_min > 0.0, || p("ramp_ch_mw_per_min"), "must be positive")?;
            ensure(v.ramp_dis_mw_per_min > 0.0, || p("ramp_dis_mw_per_min"), "must be positive")?;
            ensure(v.s_min_mwh >= 0.0, || p("s_min_mwh"), "must be non-negative")?;
            ensure(v.s_min_mwh < v.s_max_mwh, || p("s_max_mwh"), "must exceed s_min_mwh")?;
            ensure(
                v.s0_mwh >= v.s_min_mwh && v.s0_mwh <= v.s_max_mwh,
                || p("s0_mwh"),
                "outside [s_min_mwh, s_max_mwh]",
            )?;
            ensure(v.eta_ch > 0.0 && v.eta_ch <= 1.0, || p("eta_ch"), "must lie in (0, 1]")?;
            ensure(v.eta_dis > 0.0 && v.eta_dis <= 1.0, || p("eta_dis"), "must lie in (0, 1]")?;
            ensure(
                (0.0..=1.0).contains(&v.agc_participation),
                || p("agc_participation"),
                "must lie in [0, 1]",
            )?;
        }

        let model = Self {
            base_mva,
            slack_bus,
            buses,
            lines,
            generators,
            vpps,
            bus_index,
        };

        for area in [1u8, 2] {
            let parts: Vec<f64> = model
                .generators
                .iter()
                .filter(|g| g.agc && model.area_of(g.bus) == area)
                .map(|g| g.agc_participation)
                .chain(
                    model
                        .vpps
                        .iter()
                        .filter(|v| v.agc && model.area_of(v.bus) == area)
                        .map(|v| v.agc_participation),
                )
                .collect();
            if !parts.is_empty() {
                let sum: f64 = parts.iter().sum();
                ensure(
                    (sum - 1.0).abs() < 1e-9,
                    || format!("area {area}"),
                    "AGC participation fractions must sum to 1",
                )?;
            }
        }

        if let Some(b) = model.unreachable_bus() {
            return Err(ConfigError::new(
                "lines",
                format!("network is not connected: bus {b} is unreachable from the slack bus"),
            ));
        }
        Ok(model)
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    /// Area of the bus with `id`; panics on an unknown id, which validation
    /// rules out for every id stored in the model.
    pub fn area_of(&self, bus_id: u32) -> u8 {
        self.buses[self.bus_index[&bus_id]].area
    }

    pub fn generator_index(&self, id: u32) -> Option<usize> {
        self.generators.iter().position(|g| g.id == id)
    }

    pub fn vpp_index(&self, id: u32) -> Option<usize> {
        self.vpps.iter().position(|v| v.id == id)
    }

    fn unreachable_bus(&self) -> Option<u32> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            let (a, b) = (self.bus_index[&l.from_bus], self.bus_index[&l.to_bus]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let start = self.bus_index[&self.slack_bus];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.iter().position(|s| !s).map(|k| self.buses[k].id)
    }

    /// Lines whose endpoints lie in different areas.
    pub fn tie_lines(&self) -> Vec<usize> {
        (0..self.lines.len())
            .filter(|&k| self.area_of(self.lines[k].from_bus) != self.area_of(self.lines[k].to_bus))
            .collect()
    }
}

/// Reduced susceptance matrix factorization, reusable across solves on the
/// same topology.
#[derive(Debug, Clone)]
pub struct DcSolver {
    chol: Option<Cholesky<f64, Dyn>>,
    /// position of each bus in the reduced system, `None` for the slack
    reduced: Vec<Option<usize>>,
    from: Vec<usize>,
    to: Vec<usize>,
    b_mw: Vec<f64>,
    base_mva: f64,
}

impl DcSolver {
    pub fn new(model: &GridModel) -> Result<Self, GridError> {
        if let Some(b) = model.unreachable_bus() {
            return Err(GridError::SingularNetwork(b));
        }
        let slack = model.bus_index[&model.slack_bus];
        let n = model.buses.len();
        let mut reduced = vec![None; n];
        let mut k = 0;
        for (i, r) in reduced.iter_mut().enumerate() {
            if i != slack {
                *r = Some(k);
                k += 1;
            }
        }
        let mut bmat = DMatrix::<f64>::zeros(n - 1, n - 1);
        let mut from = Vec::with_capacity(model.lines.len());
        let mut to = Vec::with_capacity(model.lines.len());
        for l in &model.lines {
            let (i, j) = (model.bus_index[&l.from_bus], model.bus_index[&l.to_bus]);
            from.push(i);
            to.push(j);
            let b = l.susceptance_pu;
            if let Some(ri) = reduced[i] {
                bmat[(ri, ri)] += b;
            }
            if let Some(rj) = reduced[j] {
                bmat[(rj, rj)] += b;
            }
            if let (Some(ri), Some(rj)) = (reduced[i], reduced[j]) {
                bmat[(ri, rj)] -= b;
                bmat[(rj, ri)] -= b;
            }
        }
        let chol = if n > 1 {
            Some(Cholesky::new(bmat).ok_or(GridError::SingularNetwork(model.slack_bus))?)
        } else {
            None
        };
        Ok(Self {
            chol,
            reduced,
            from,
            to,
            b_mw: model
                .lines
                .iter()
                .map(|l| l.susceptance_pu * model.base_mva)
                .collect(),
            base_mva: model.base_mva,
        })
    }

    /// Solves for angles and flows given net per-bus injections in MW
    /// (generation positive). Residuals up to [`BALANCE_TOL_MW`] are taken
    /// by the slack bus.
    pub fn solve(&self, injections_mw: &[f64]) -> Result<DcFlow, GridError> {
        let n = self.reduced.len();
        if injections_mw.len() != n {
            return Err(GridError::Dimension {
                expected: n,
                got: injections_mw.len(),
            });
        }
        let residual: f64 = injections_mw.iter().sum();
        if !residual.is_finite() || residual.abs() > BALANCE_TOL_MW {
            return Err(GridError::Imbalance {
                residual_mw: residual,
            });
        }
        let mut angles = vec![0.0; n];
        if let Some(chol) = &self.chol {
            let mut rhs = DVector::<f64>::zeros(n - 1);
            for (i, r) in self.reduced.iter().enumerate() {
                if let Some(r) = r {
                    rhs[*r] = injections_mw[i] / self.base_mva;
                }
            }
            let theta = chol.solve(&rhs);
            for (i, r) in self.reduced.iter().enumerate() {
                if let Some(r) = r {
                    angles[i] = theta[*r];
                }
            }
        }
        let flows = (0..self.from.len())
            .map(|k| self.b_mw[k] * (angles[self.from[k]] - angles[self.to[k]]))
            .collect();
        Ok(DcFlow {
            angles_rad: angles,
            flows_mw: flows,
        })
    }
}

/// One-shot DC power flow; see [`DcSolver::solve`].
pub fn dc_power_flow(model: &GridModel, injections_mw: &[f64]) -> Result<DcFlow, GridError> {
    DcSolver::new(model)?.solve(injections_mw)
}

/// Lines whose absolute flow exceeds the limit, with the excess in MW.
///
/// # Panics
/// If `flows_mw` does not have one entry per line.
pub fn check_line_limits(flows_mw: &[f64], model: &GridModel) -> Vec<LineViolation> {
    assert_eq!(flows_mw.len(), model.lines.len(), "one flow per line");
    model
        .lines
        .iter()
        .zip(flows_mw)
        .filter(|(l, f)| f.abs() > l.flow_limit_mw)
        .map(|(l, f)| LineViolation {
            line: l.id,
            overload_mw: f.abs() - l.flow_limit_mw,
        })
        .collect()
}
