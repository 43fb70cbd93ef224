//! Scenario scripts: which network, which controller, which disturbances.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::{ensure, parse_toml, ConfigError};
use crate::dynamics::DynConfig;
use crate::grid::{GridError, GridModel, VppKind};
use crate::mpc::MpcConfig;
use crate::pem::{EssPopulation, FleetSpec, TclPopulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    DroopOnly,
    Agc,
    Mpc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Adds `delta_mw` to the gross load of `bus`.
    LoadStep { bus: u32, delta_mw: f64 },
    /// Replaces the reference set-point of generator `generator`.
    ReferenceChange { generator: u32, p_ref_mw: f64 },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(from = "RawEvent")]
pub struct Event {
    pub t_s: f64,
    pub kind: EventKind,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawEvent {
    LoadStep { t_s: f64, bus: u32, delta_mw: f64 },
    ReferenceChange { t_s: f64, generator: u32, p_ref_mw: f64 },
}

impl From<RawEvent> for Event {
    fn from(r: RawEvent) -> Self {
        match r {
            RawEvent::LoadStep { t_s, bus, delta_mw } => Event {
                t_s,
                kind: EventKind::LoadStep { bus, delta_mw },
            },
            RawEvent::ReferenceChange {
                t_s,
                generator,
                p_ref_mw,
            } => Event {
                t_s,
                kind: EventKind::ReferenceChange { generator, p_ref_mw },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgcSettings {
    pub integral_gain_per_s: f64,
    pub agc_period_s: f64,
    /// Per-area bias in MW/Hz; the area frequency response when absent.
    pub bias_mw_per_hz: Option<[f64; 2]>,
}

impl Default for AgcSettings {
    fn default() -> Self {
        Self {
            integral_gain_per_s: 0.02,
            agc_period_s: 4.0,
            bias_mw_per_hz: None,
        }
    }
}

/// Device population behind one PEM VPP.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetBinding {
    pub vpp: u32,
    #[serde(default)]
    pub deadband_mw: Option<f64>,
    #[serde(default)]
    pub ess: Vec<EssPopulation>,
    #[serde(default)]
    pub tcl: Vec<TclPopulation>,
}

impl FleetBinding {
    pub fn spec(&self) -> FleetSpec {
        FleetSpec {
            ess: self.ess.clone(),
            tcl: self.tcl.clone(),
        }
    }
}

/// Per-scenario changes to a grid VPP asset.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VppOverride {
    pub id: u32,
    pub eta_ch: Option<f64>,
    pub eta_dis: Option<f64>,
    pub ramp_ch_mw_per_min: Option<f64>,
    pub ramp_dis_mw_per_min: Option<f64>,
    pub s0_mwh: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
    /// Tolerance used for service-duration metrics, MW.
    pub tracking_tol_mw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    /// Network file, relative to the script.
    pub grid: PathBuf,
    pub controller: ControllerKind,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub dynamics: DynConfig,
    #[serde(default)]
    pub agc: AgcSettings,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub fleets: Vec<FleetBinding>,
    #[serde(default)]
    pub vpp_overrides: Vec<VppOverride>,
    #[serde(default)]
    pub output: OutputSettings,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("network: {0}")]
    Grid(#[from] GridError),
}

/// A script together with the network it refers to, overrides applied.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub script: ScenarioScript,
    pub grid: GridModel,
}

impl ScenarioScript {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        parse_toml(text)
    }

    /// Checks everything that does not need the network.
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(self.duration_s >= 1.0, || "duration_s".into(), "must be at least 1 s")?;
        ensure(
            self.duration_s.fract() == 0.0,
            || "duration_s".into(),
            "must be a whole number of seconds",
        )?;
        self.dynamics.validate()?;
        let per_s = 1.0 / self.dynamics.ts_dyn_s;
        ensure(
            (per_s - per_s.round()).abs() < 1e-9,
            || "dynamics.ts_dyn_s".into(),
            "must divide one second",
        )?;
        let a = &self.agc;
        ensure(a.integral_gain_per_s > 0.0, || "agc.integral_gain_per_s".into(), "must be positive")?;
        ensure(
            a.agc_period_s >= 1.0 && a.agc_period_s.fract() == 0.0,
            || "agc.agc_period_s".into(),
            "must be a whole number of seconds",
        )?;
        if let Some(b) = a.bias_mw_per_hz {
            for (i, v) in b.iter().enumerate() {
                ensure(*v > 0.0, || format!("agc.bias_mw_per_hz[{i}]"), "must be positive")?;
            }
        }
        ensure(
            self.mpc.ts_s >= a.agc_period_s && self.mpc.ts_s.fract() == 0.0,
            || "mpc.ts_s".into(),
            "must be a whole number of seconds no shorter than agc.agc_period_s",
        )?;
        for (i, w) in self.events.windows(2).enumerate() {
            ensure(
                w[1].t_s >= w[0].t_s,
                || format!("events[{}].t_s", i + 1),
                "events must be in time order",
            )?;
        }
        for (i, e) in self.events.iter().enumerate() {
            ensure(
                e.t_s >= 0.0 && e.t_s < self.duration_s && e.t_s.fract() == 0.0,
                || format!("events[{i}].t_s"),
                "must be a whole second within the run",
            )?;
        }
        Ok(())
    }

    /// Checks references into `grid` and applies the asset overrides.
    pub fn bind(&self, mut grid: GridModel) -> Result<GridModel, ConfigError> {
        for (i, e) in self.events.iter().enumerate() {
            match &e.kind {
                EventKind::LoadStep { bus, .. } => ensure(
                    grid.bus_index(*bus).is_some(),
                    || format!("events[{i}].bus"),
                    "no such bus in the network",
                )?,
                EventKind::ReferenceChange { generator, .. } => ensure(
                    grid.generator_index(*generator).is_some(),
                    || format!("events[{i}].generator"),
                    "no such generator in the network",
                )?,
            }
        }
        for (i, o) in self.vpp_overrides.iter().enumerate() {
            let p = |f: &str| format!("vpp_overrides[{i}].{f}");
            let Some(k) = grid.vpp_index(o.id) else {
                return Err(ConfigError::new(p("id"), "no such VPP in the network"));
            };
            let v = &mut grid.vpps[k];
            for (name, src, dst) in [
                ("eta_ch", o.eta_ch, &mut v.eta_ch),
                ("eta_dis", o.eta_dis, &mut v.eta_dis),
            ] {
                if let Some(x) = src {
                    ensure(x > 0.0 && x <= 1.0, || p(name), "must lie in (0, 1]")?;
                    *dst = x;
                }
            }
            for (name, src, dst) in [
                ("ramp_ch_mw_per_min", o.ramp_ch_mw_per_min, &mut v.ramp_ch_mw_per_min),
                ("ramp_dis_mw_per_min", o.ramp_dis_mw_per_min, &mut v.ramp_dis_mw_per_min),
            ] {
                if let Some(x) = src {
                    ensure(x > 0.0, || p(name), "must be positive")?;
                    *dst = x;
                }
            }
            if let Some(s0) = o.s0_mwh {
                ensure(
                    (v.s_min_mwh..=v.s_max_mwh).contains(&s0),
                    || p("s0_mwh"),
                    "must lie within the asset's energy bounds",
                )?;
                v.s0_mwh = s0;
            }
        }
        for (i, f) in self.fleets.iter().enumerate() {
            let Some(k) = grid.vpp_index(f.vpp) else {
                return Err(ConfigError::new(format!("fleets[{i}].vpp"), "no such VPP in the network"));
            };
            ensure(
                grid.vpps[k].kind == VppKind::PemFleet,
                || format!("fleets[{i}].vpp"),
                "refers to a VPP that is not a pem_fleet",
            )?;
        }
        for v in grid.vpps.iter().filter(|v| v.kind == VppKind::PemFleet) {
            ensure(
                self.fleets.iter().any(|f| f.vpp == v.id),
                || "fleets".into(),
                &format!("pem_fleet VPP {} has no device population", v.id),
            )?;
        }
        self.mpc.validate(&grid)?;
        Ok(grid)
    }
}

impl Scenario {
    /// Reads a script and its network. Config errors carry the file path.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let where_ = path.display().to_string();
        let script = ScenarioScript::from_toml_str(&text).map_err(|e| e.within(&where_))?;
        script.validate().map_err(|e| e.within(&where_))?;
        let grid_path = path.parent().unwrap_or(Path::new(".")).join(&script.grid);
        let grid = GridModel::load(&grid_path)?;
        let grid = script.bind(grid).map_err(|e| e.within(&where_))?;
        Ok(Self { script, grid })
    }

    pub fn from_parts(script: ScenarioScript, grid: GridModel) -> Result<Self, ConfigError> {
        script.validate()?;
        let grid = script.bind(grid)?;
        Ok(Self { script, grid })
    }
}
