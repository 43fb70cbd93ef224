//! Packetized energy management (PEM) devices and fleets.
//!
//! Device power is signed as consumption: positive while charging or heating,
//! negative while injecting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ensure, ConfigError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    /// Thermostatically controlled load, state in °C.
    Tcl,
    /// Energy storage, state in kWh.
    Ess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Charge,
    Discharge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Charge,
    Discharge,
    Off,
    OptOut,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalParams {
    pub capacitance_kwh_per_c: f64,
    pub resistance_c_per_kw: f64,
    pub ambient_c: f64,
    /// Heat delivered per unit of electrical power.
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PemDeviceConfig {
    pub kind: DeviceKind,
    pub rated_power_kw: f64,
    pub packet_len_charge_s: f64,
    pub packet_len_discharge_s: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub setpoint: f64,
    pub request_rate_max_per_s: f64,
    pub thermal: Option<ThermalParams>,
    pub eta_ch: f64,
    pub eta_dis: f64,
}

impl PemDeviceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(self.rated_power_kw > 0.0, || "rated_power_kw".into(), "must be positive")?;
        ensure(
            self.x_min < self.setpoint && self.setpoint < self.x_max,
            || "setpoint".into(),
            "must lie strictly between x_min and x_max",
        )?;
        ensure(self.packet_len_charge_s > 0.0, || "packet_len_charge_s".into(), "must be positive")?;
        ensure(
            self.packet_len_discharge_s > 0.0,
            || "packet_len_discharge_s".into(),
            "must be positive",
        )?;
        ensure(
            self.request_rate_max_per_s > 0.0,
            || "request_rate_max_per_s".into(),
            "must be positive",
        )?;
        ensure(
            self.eta_ch > 0.0 && self.eta_ch <= 1.0 && self.eta_dis > 0.0 && self.eta_dis <= 1.0,
            || "eta_ch".into(),
            "efficiencies must lie in (0, 1]",
        )?;
        match (self.kind, &self.thermal) {
            (DeviceKind::Tcl, None) => Err(ConfigError::new("thermal", "required for tcl devices")),
            (DeviceKind::Tcl, Some(t)) => ensure(
                t.capacitance_kwh_per_c > 0.0 && t.resistance_c_per_kw > 0.0 && t.efficiency > 0.0,
                || "thermal".into(),
                "capacitance, resistance and efficiency must be positive",
            ),
            (DeviceKind::Ess, _) => Ok(()),
        }
    }

    /// State after holding `power_kw` (signed consumption) for `dt_s`.
    pub fn advance(&self, x: f64, power_kw: f64, dt_s: f64) -> f64 {
        let dt_h = dt_s / 3600.0;
        match (self.kind, &self.thermal) {
            (DeviceKind::Tcl, Some(t)) => {
                let tau_h = t.resistance_c_per_kw * t.capacitance_kwh_per_c;
                let x_ss = t.ambient_c + t.resistance_c_per_kw * t.efficiency * power_kw;
                x_ss + (x - x_ss) * (-dt_h / tau_h).exp()
            }
            _ => {
                if power_kw >= 0.0 {
                    x + dt_h * self.eta_ch * power_kw
                } else {
                    x + dt_h * power_kw / self.eta_dis
                }
            }
        }
    }

    fn packet_power(&self, kind: PacketKind) -> f64 {
        match kind {
            PacketKind::Charge => self.rated_power_kw,
            PacketKind::Discharge => -self.rated_power_kw,
        }
    }

    pub fn packet_len_s(&self, kind: PacketKind) -> f64 {
        match kind {
            PacketKind::Charge => self.packet_len_charge_s,
            PacketKind::Discharge => self.packet_len_discharge_s,
        }
    }

    /// Whether a full packet started at `x` keeps the state inside bounds.
    pub fn packet_fits(&self, x: f64, kind: PacketKind) -> bool {
        let end = self.advance(x, self.packet_power(kind), self.packet_len_s(kind));
        match kind {
            PacketKind::Charge => end <= self.x_max,
            PacketKind::Discharge => end >= self.x_min,
        }
    }
}

/// Request rate `μ(x) = μ0·(x_max − x)/(x − x_min)` for charge, mirrored
/// for discharge. Infinite at the far bound.
pub fn request_rate_per_s(kind: PacketKind, x: f64, cfg: &PemDeviceConfig) -> f64 {
    let (near, far) = match kind {
        PacketKind::Charge => (x - cfg.x_min, cfg.x_max - x),
        PacketKind::Discharge => (cfg.x_max - x, x - cfg.x_min),
    };
    if far <= 0.0 {
        0.0
    } else if near <= 0.0 {
        f64::INFINITY
    } else {
        cfg.request_rate_max_per_s * far / near
    }
}

/// Probability of a request of `kind` within `dt_s`: `1 − exp(−μ(x)·dt)`.
pub fn request_probability(kind: PacketKind, x: f64, cfg: &PemDeviceConfig, dt_s: f64) -> f64 {
    (1.0 - (-request_rate_per_s(kind, x, cfg) * dt_s).exp()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub mode: Mode,
    pub x: f64,
    pub packet_remaining_s: f64,
    pub pending: Option<PacketKind>,
    /// Direction of recovery while opted out.
    pub opt_out_toward: Option<PacketKind>,
    rng: ChaCha8Rng,
}

impl DeviceState {
    /// Device `index` draws from stream `(stream_base << 32) | index` of the
    /// master seed.
    pub fn new(x: f64, master_seed: u64, stream_base: u32, index: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream((u64::from(stream_base) << 32) | u64::from(index));
        Self {
            mode: Mode::Off,
            x,
            packet_remaining_s: 0.0,
            pending: None,
            opt_out_toward: None,
            rng,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceStep {
    pub power_kw: f64,
    pub request: Option<PacketKind>,
    /// Mode entered at the start of the step on a grant.
    pub granted: Option<Mode>,
    /// Mode change at the end of the step, as `(from, to)`.
    pub transition: Option<(Mode, Mode)>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PemError {
    #[error("grant for device {device} which has no pending request")]
    InvalidGrant { device: u32 },
    #[error("grant for unknown device {device}")]
    UnknownDevice { device: u32 },
    #[error("fleet config: {0}")]
    Config(#[from] ConfigError),
}

const TIME_EPS_S: f64 = 1e-9;
const MAX_RATE_PER_S: f64 = 1e6;

/// Advances one device by `dt_s`. `grant` answers the request issued on the
/// previous step; a pending request without a grant is treated as rejected.
/// `device` only labels errors.
pub fn step_device(
    state: &mut DeviceState,
    cfg: &PemDeviceConfig,
    grant: Option<bool>,
    device: u32,
    dt_s: f64,
) -> Result<DeviceStep, PemError> {
    let start = state.mode;
    match (state.pending.take(), grant) {
        (None, Some(_)) => return Err(PemError::InvalidGrant { device }),
        (Some(kind), Some(true)) if state.mode == Mode::Off => {
            state.mode = match kind {
                PacketKind::Charge => Mode::Charge,
                PacketKind::Discharge => Mode::Discharge,
            };
            state.packet_remaining_s = cfg.packet_len_s(kind);
        }
        _ => {}
    }
    let granted = (state.mode != start).then_some(state.mode);
    let running = state.mode;

    let power_kw = match state.mode {
        Mode::Charge => cfg.rated_power_kw,
        Mode::Discharge => -cfg.rated_power_kw,
        Mode::Off => 0.0,
        Mode::OptOut => match (state.opt_out_toward, cfg.kind) {
            (Some(PacketKind::Charge), _) => cfg.rated_power_kw,
            (Some(PacketKind::Discharge), DeviceKind::Ess) => -cfg.rated_power_kw,
            _ => 0.0,
        },
    };
    state.x = cfg.advance(state.x, power_kw, dt_s);

    if matches!(state.mode, Mode::Charge | Mode::Discharge) {
        state.packet_remaining_s -= dt_s;
        if state.packet_remaining_s <= TIME_EPS_S {
            state.packet_remaining_s = 0.0;
            state.mode = Mode::Off;
        }
    }

    if state.mode == Mode::OptOut {
        let back = match state.opt_out_toward {
            Some(PacketKind::Charge) => state.x >= cfg.setpoint,
            _ => state.x <= cfg.setpoint,
        };
        if back {
            state.mode = Mode::Off;
            state.opt_out_toward = None;
        }
    } else if state.x < cfg.x_min || state.x > cfg.x_max {
        state.mode = Mode::OptOut;
        state.packet_remaining_s = 0.0;
        state.opt_out_toward = Some(if cfg.setpoint > state.x {
            PacketKind::Charge
        } else {
            PacketKind::Discharge
        });
    }

    let mut request = None;
    if state.mode == Mode::Off {
        let rate = |kind: PacketKind| {
            let allowed = cfg.kind == DeviceKind::Ess || kind == PacketKind::Charge;
            if allowed && cfg.packet_fits(state.x, kind) {
                request_rate_per_s(kind, state.x, cfg).min(MAX_RATE_PER_S) * dt_s
            } else {
                0.0
            }
        };
        let (rc, rd) = (rate(PacketKind::Charge), rate(PacketKind::Discharge));
        // two competing exponential clocks
        let p_any = 1.0 - (-(rc + rd)).exp();
        let u: f64 = state.rng.random();
        if u < p_any {
            let kind = if u < p_any * rc / (rc + rd) {
                PacketKind::Charge
            } else {
                PacketKind::Discharge
            };
            state.pending = Some(kind);
            request = Some(kind);
        }
    }

    Ok(DeviceStep {
        power_kw,
        request,
        granted,
        transition: (state.mode != running).then_some((running, state.mode)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketRequest {
    pub device: u32,
    pub kind: PacketKind,
    pub t_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grant {
    pub device: u32,
    pub accepted: bool,
    pub t_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
/// Mode change of one device, stamped with the time it takes effect.
pub struct DeviceEvent {
    pub t_s: f64,
    pub device: u32,
    pub from: Mode,
    pub to: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetStep {
    /// Net consumption over the step.
    pub power_mw: f64,
    pub requests: Vec<PacketRequest>,
}

#[derive(Debug, Clone)]
pub struct Fleet {
    pub configs: Vec<PemDeviceConfig>,
    pub states: Vec<DeviceState>,
    pub log: Option<Vec<DeviceEvent>>,
}

impl Fleet {
    pub fn new(configs: Vec<PemDeviceConfig>, initial_x: &[f64], master_seed: u64, stream_base: u32) -> Self {
        assert_eq!(configs.len(), initial_x.len(), "one initial state per device");
        let states = initial_x
            .iter()
            .enumerate()
            .map(|(i, &x)| DeviceState::new(x, master_seed, stream_base, i as u32))
            .collect();
        Self {
            configs,
            states,
            log: None,
        }
    }

    pub fn with_event_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Advances every device over `[t_s, t_s + dt_s)`. Requests are stamped
    /// with the end of the step.
    pub fn step(&mut self, grants: &[Grant], t_s: f64, dt_s: f64) -> Result<FleetStep, PemError> {
        let mut by_device = vec![None; self.states.len()];
        for g in grants {
            let slot = by_device
                .get_mut(g.device as usize)
                .ok_or(PemError::UnknownDevice { device: g.device })?;
            *slot = Some(g.accepted);
        }
        let steps: Vec<Result<DeviceStep, PemError>> = self
            .states
            .par_iter_mut()
            .zip(self.configs.par_iter())
            .zip(by_device.par_iter())
            .enumerate()
            .map(|(i, ((s, c), g))| step_device(s, c, *g, i as u32, dt_s))
            .collect();

        let mut power_kw = 0.0;
        let mut requests = Vec::new();
        for (i, step) in steps.into_iter().enumerate() {
            let step = step?;
            power_kw += step.power_kw;
            if let Some(kind) = step.request {
                requests.push(PacketRequest {
                    device: i as u32,
                    kind,
                    t_s: t_s + dt_s,
                });
            }
            if let Some(log) = self.log.as_mut() {
                if let Some(to) = step.granted {
                    log.push(DeviceEvent {
                        t_s,
                        device: i as u32,
                        from: Mode::Off,
                        to,
                    });
                }
                if let Some((from, to)) = step.transition {
                    log.push(DeviceEvent {
                        t_s: t_s + dt_s,
                        device: i as u32,
                        from,
                        to,
                    });
                }
            }
        }
        Ok(FleetStep {
            power_mw: power_kw / 1000.0,
            requests,
        })
    }

    pub fn mode_counts(&self) -> [usize; 4] {
        let mut n = [0; 4];
        for s in &self.states {
            n[match s.mode {
                Mode::Charge => 0,
                Mode::Discharge => 1,
                Mode::Off => 2,
                Mode::OptOut => 3,
            }] += 1;
        }
        n
    }

    /// Summed device states and bounds, `(Σx, Σx_min, Σx_max)`.
    pub fn energy_sums(&self) -> (f64, f64, f64) {
        self.states
            .iter()
            .zip(&self.configs)
            .fold((0.0, 0.0, 0.0), |a, (s, c)| (a.0 + s.x, a.1 + c.x_min, a.2 + c.x_max))
    }

    pub fn rated_power_mw(&self) -> f64 {
        self.configs.iter().map(|c| c.rated_power_kw).sum::<f64>() / 1000.0
    }
}

/// Homogeneous ESS population with uniformly drawn initial states.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EssPopulation {
    pub count: usize,
    pub rated_power_kw: f64,
    pub x_min_kwh: f64,
    pub x_max_kwh: f64,
    pub setpoint_kwh: f64,
    pub packet_len_s: f64,
    pub request_rate_max_per_s: f64,
    #[serde(default = "one")]
    pub eta_ch: f64,
    #[serde(default = "one")]
    pub eta_dis: f64,
    /// Initial state range as fractions of `[x_min, x_max]`.
    #[serde(default = "full_range")]
    pub initial_fraction: [f64; 2],
}

/// Water-heater style population; thermal parameters drawn uniformly from
/// the given ranges.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TclPopulation {
    pub count: usize,
    pub rated_power_kw: f64,
    pub x_min_c: f64,
    pub x_max_c: f64,
    pub setpoint_c: f64,
    pub packet_len_s: f64,
    pub request_rate_max_per_s: f64,
    pub capacitance_kwh_per_c: [f64; 2],
    pub resistance_c_per_kw: [f64; 2],
    pub ambient_c: f64,
    #[serde(default = "one")]
    pub efficiency: f64,
    #[serde(default = "full_range")]
    pub initial_fraction: [f64; 2],
}

fn one() -> f64 {
    1.0
}

fn full_range() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    #[serde(default)]
    pub ess: Vec<EssPopulation>,
    #[serde(default)]
    pub tcl: Vec<TclPopulation>,
}

impl FleetSpec {
    /// Device configs and initial states. Parameter draws use `seed` on a
    /// stream separate from the request streams.
    pub fn build(&self, seed: u64) -> Result<(Vec<PemDeviceConfig>, Vec<f64>), ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut draw = |r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        let (mut cfgs, mut x0) = (Vec::new(), Vec::new());
        for (p, e) in self.ess.iter().enumerate() {
            let cfg = PemDeviceConfig {
                kind: DeviceKind::Ess,
                rated_power_kw: e.rated_power_kw,
                packet_len_charge_s: e.packet_len_s,
                packet_len_discharge_s: e.packet_len_s,
                x_min: e.x_min_kwh,
                x_max: e.x_max_kwh,
                setpoint: e.setpoint_kwh,
                request_rate_max_per_s: e.request_rate_max_per_s,
                thermal: None,
                eta_ch: e.eta_ch,
                eta_dis: e.eta_dis,
            };
            cfg.validate().map_err(|err| err.within(&format!("fleet.ess[{p}]")))?;
            for _ in 0..e.count {
                let f = draw(e.initial_fraction);
                x0.push(cfg.x_min + f * (cfg.x_max - cfg.x_min));
                cfgs.push(cfg.clone());
            }
        }
        for (p, t) in self.tcl.iter().enumerate() {
            for i in 0..t.count {
                let cfg = PemDeviceConfig {
                    kind: DeviceKind::Tcl,
                    rated_power_kw: t.rated_power_kw,
                    packet_len_charge_s: t.packet_len_s,
                    packet_len_discharge_s: t.packet_len_s,
                    x_min: t.x_min_c,
                    x_max: t.x_max_c,
                    setpoint: t.setpoint_c,
                    request_rate_max_per_s: t.request_rate_max_per_s,
                    thermal: Some(ThermalParams {
                        capacitance_kwh_per_c: draw(t.capacitance_kwh_per_c),
                        resistance_c_per_kw: draw(t.resistance_c_per_kw),
                        ambient_c: t.ambient_c,
                        efficiency: t.efficiency,
                    }),
                    eta_ch: 1.0,
                    eta_dis: 1.0,
                };
                if i == 0 {
                    cfg.validate().map_err(|err| err.within(&format!("fleet.tcl[{p}]")))?;
                }
                let f = draw(t.initial_fraction);
                x0.push(cfg.x_min + f * (cfg.x_max - cfg.x_min));
                cfgs.push(cfg);
            }
        }
        Ok((cfgs, x0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ess() -> PemDeviceConfig {
        PemDeviceConfig {
            kind: DeviceKind::Ess,
            rated_power_kw: 5.0,
            packet_len_charge_s: 300.0,
            packet_len_discharge_s: 300.0,
            x_min: 0.0,
            x_max: 10.0,
            setpoint: 5.0,
            request_rate_max_per_s: 0.1,
            thermal: None,
            eta_ch: 1.0,
            eta_dis: 1.0,
        }
    }

    #[test]
    fn probability_examples() {
        let c = ess();
        assert_eq!(request_probability(PacketKind::Charge, 10.0, &c, 1.0), 0.0);
        let mid = request_probability(PacketKind::Charge, 5.0, &c, 1.0);
        assert!((mid - (1.0 - (-0.1f64).exp())).abs() < 1e-15);
        assert!((mid - 0.0952).abs() < 1e-4);
        assert!(request_probability(PacketKind::Charge, 1e-9, &c, 1.0) > 0.999_999);
        assert_eq!(request_probability(PacketKind::Charge, 0.0, &c, 1.0), 1.0);
        assert_eq!(request_probability(PacketKind::Discharge, 0.0, &c, 1.0), 0.0);
        let d = request_probability(PacketKind::Discharge, 7.5, &c, 1.0);
        let m = request_probability(PacketKind::Charge, 2.5, &c, 1.0);
        assert!((d - m).abs() < 1e-15);
    }

    #[test]
    fn grant_without_request_is_rejected() {
        let c = ess();
        let mut s = DeviceState::new(5.0, 1, 0, 0);
        assert_eq!(
            step_device(&mut s, &c, Some(true), 7, 1.0),
            Err(PemError::InvalidGrant { device: 7 })
        );
    }

    #[test]
    fn packets_that_would_overflow_are_not_requested() {
        let c = ess();
        // 5 kW for 300 s adds 0.4167 kWh
        assert!(c.packet_fits(9.5, PacketKind::Charge));
        assert!(!c.packet_fits(9.6, PacketKind::Charge));
        assert!(!c.packet_fits(0.4, PacketKind::Discharge));
    }
}
