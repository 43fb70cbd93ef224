//! Aggregators: bulk battery model and PEM fleet coordinator.
//!
//! VPP power is signed as consumption: positive charges the asset, negative
//! injects into the grid.

use std::fmt;
use std::str::FromStr;

use crate::grid::{VppAsset, VppKind};
use crate::pem::{Fleet, Grant, PacketKind, PacketRequest, PemError};

#[derive(Debug, Clone, PartialEq)]
pub struct VppState {
    pub asset_id: u32,
    pub p_actual_mw: f64,
    pub p_ref_mw: f64,
    pub soc_mwh: f64,
    pub pending_requests: Vec<PacketRequest>,
    /// Devices in CHARGE, DISCHARGE, OFF and OPT_OUT.
    pub mode_counts: [usize; 4],
}

impl VppState {
    pub fn new(asset: &VppAsset) -> Self {
        Self {
            asset_id: asset.id,
            p_actual_mw: 0.0,
            p_ref_mw: 0.0,
            soc_mwh: asset.s0_mwh,
            pending_requests: Vec::new(),
            mode_counts: [0; 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrantDecision {
    pub request: PacketRequest,
    pub accepted: bool,
    pub decision_time_s: f64,
}

/// Limits used when deciding on packet requests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptPolicy {
    pub packet_mw: f64,
    pub packet_len_s: f64,
    pub deadband_mw: f64,
    pub s_min_mwh: f64,
    pub s_max_mwh: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
}

const SOC_EPS_MWH: f64 = 1e-9;

/// Arrival-order admission: a charge packet is accepted while the tracked
/// power is below `p_ref`, stays within `p_ref + deadband` with the packet,
/// and the projected SOC stays within `S̄`; discharge mirrored.
pub fn decide_requests(
    state: &VppState,
    requests: &[PacketRequest],
    policy: &AcceptPolicy,
    t_s: f64,
) -> Vec<GrantDecision> {
    let mut power = state.p_actual_mw;
    let mut soc = state.soc_mwh;
    let packet_h = policy.packet_len_s / 3600.0;
    requests
        .iter()
        .map(|r| {
            let accepted = match r.kind {
                PacketKind::Charge => {
                    let e = policy.eta_ch * policy.packet_mw * packet_h;
                    let ok = power < state.p_ref_mw
                        && power + policy.packet_mw <= state.p_ref_mw + policy.deadband_mw + 1e-12
                        && soc + e <= policy.s_max_mwh + SOC_EPS_MWH;
                    if ok {
                        power += policy.packet_mw;
                        soc += e;
                    }
                    ok
                }
                PacketKind::Discharge => {
                    let e = policy.packet_mw * packet_h / policy.eta_dis;
                    let ok = power > state.p_ref_mw
                        && power - policy.packet_mw >= state.p_ref_mw - policy.deadband_mw - 1e-12
                        && soc - e >= policy.s_min_mwh - SOC_EPS_MWH;
                    if ok {
                        power -= policy.packet_mw;
                        soc -= e;
                    }
                    ok
                }
            };
            GrantDecision {
                request: *r,
                accepted,
                decision_time_s: t_s,
            }
        })
        .collect()
}

fn ramp_rate_mw_per_s(asset: &VppAsset, from: f64, to: f64) -> f64 {
    let per_min = if from >= 0.0 && to >= 0.0 {
        asset.ramp_ch_mw_per_min
    } else if from <= 0.0 && to <= 0.0 {
        asset.ramp_dis_mw_per_min
    } else {
        asset.ramp_ch_mw_per_min.min(asset.ramp_dis_mw_per_min)
    };
    per_min / 60.0
}

/// Advances the bulk battery by `dt_s`: power slews toward `p_ref` within
/// ramp and power limits, then is cut so SOC lands on its bound instead of
/// crossing it.
pub fn step_bulk_battery(state: &mut VppState, p_ref_mw: f64, dt_s: f64, asset: &VppAsset) {
    state.p_ref_mw = p_ref_mw;
    let p0 = state.p_actual_mw;
    let target = p_ref_mw.clamp(-asset.p_dis_max_mw, asset.p_ch_max_mw);
    let step = ramp_rate_mw_per_s(asset, p0, target) * dt_s;
    let mut p = target.clamp(p0 - step, p0 + step);

    let dt_h = dt_s / 3600.0;
    if p > 0.0 {
        let room = (asset.s_max_mwh - state.soc_mwh).max(0.0);
        p = p.min(room / (dt_h * asset.eta_ch));
    } else if p < 0.0 {
        let room = (state.soc_mwh - asset.s_min_mwh).max(0.0);
        p = p.max(-room * asset.eta_dis / dt_h);
    }
    if p.abs() < 1e-12 {
        p = 0.0;
    }
    state.p_actual_mw = p;
    state.soc_mwh = soc_update(state.soc_mwh, p, dt_h, asset).clamp(asset.s_min_mwh, asset.s_max_mwh);
}

/// `S + Δt·(η_ch·P_ch − P_dis/η_dis)` for signed power `p`.
pub fn soc_update(soc_mwh: f64, p_mw: f64, dt_h: f64, asset: &VppAsset) -> f64 {
    if p_mw >= 0.0 {
        soc_mwh + dt_h * asset.eta_ch * p_mw
    } else {
        soc_mwh + dt_h * p_mw / asset.eta_dis
    }
}

/// Actual power and SOC as a fraction of the usable range.
pub fn report(state: &VppState, asset: &VppAsset) -> (f64, f64) {
    let span = asset.s_max_mwh - asset.s_min_mwh;
    (state.p_actual_mw, (state.soc_mwh - asset.s_min_mwh) / span)
}

/// Power window the asset can follow over the next interval given its SOC,
/// as signed consumption `(min, max)`.
pub fn available_power(state: &VppState, asset: &VppAsset) -> (f64, f64) {
    let full = state.soc_mwh >= asset.s_max_mwh - SOC_EPS_MWH;
    let empty = state.soc_mwh <= asset.s_min_mwh + SOC_EPS_MWH;
    (
        if empty { 0.0 } else { -asset.p_dis_max_mw },
        if full { 0.0 } else { asset.p_ch_max_mw },
    )
}

/// A PEM fleet behind its aggregator.
#[derive(Debug, Clone)]
pub struct PemVpp {
    pub fleet: Fleet,
    pub policy: AcceptPolicy,
    pub decisions: u64,
    pub accepted: u64,
    /// Granted packets still running, as `(end time, signed MW)`.
    active: Vec<(f64, f64)>,
}

impl PemVpp {
    /// Deadband defaults to half a device packet.
    pub fn new(fleet: Fleet, asset: &VppAsset, deadband_mw: Option<f64>) -> Self {
        let first = fleet.configs.first();
        let packet_mw = first.map_or(0.0, |c| c.rated_power_kw / 1000.0);
        let packet_len_s = first.map_or(0.0, |c| c.packet_len_charge_s);
        let (eta_ch, eta_dis) = first.map_or((1.0, 1.0), |c| (c.eta_ch, c.eta_dis));
        Self {
            fleet,
            policy: AcceptPolicy {
                packet_mw,
                packet_len_s,
                deadband_mw: deadband_mw.unwrap_or(0.5 * packet_mw),
                s_min_mwh: asset.s_min_mwh,
                s_max_mwh: asset.s_max_mwh,
                eta_ch,
                eta_dis,
            },
            decisions: 0,
            accepted: 0,
            active: Vec::new(),
        }
    }

    /// Fleet energy mapped onto the asset's `[S̲, S̄]` range.
    pub fn soc_mwh(&self) -> f64 {
        let (x, lo, hi) = self.fleet.energy_sums();
        let frac = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
        self.policy.s_min_mwh + frac * (self.policy.s_max_mwh - self.policy.s_min_mwh)
    }

    /// Decides last period's requests, then advances the fleet. Packets
    /// that finished during the last period are taken out of the measured
    /// power before deciding.
    pub fn step(&mut self, state: &mut VppState, p_ref_mw: f64, t_s: f64, dt_s: f64) -> Result<Vec<GrantDecision>, PemError> {
        state.p_ref_mw = p_ref_mw;
        let ended: f64 = self
            .active
            .iter()
            .filter(|a| a.0 <= t_s + 1e-9)
            .map(|a| a.1)
            .sum();
        self.active.retain(|a| a.0 > t_s + 1e-9);
        let view = VppState {
            p_actual_mw: state.p_actual_mw - ended,
            ..state.clone()
        };
        let decisions = decide_requests(&view, &state.pending_requests, &self.policy, t_s);
        for d in decisions.iter().filter(|d| d.accepted) {
            let mw = match d.request.kind {
                PacketKind::Charge => self.policy.packet_mw,
                PacketKind::Discharge => -self.policy.packet_mw,
            };
            self.active.push((t_s + self.policy.packet_len_s, mw));
        }
        let grants: Vec<Grant> = decisions
            .iter()
            .map(|d| Grant {
                device: d.request.device,
                accepted: d.accepted,
                t_s,
            })
            .collect();
        self.decisions += decisions.len() as u64;
        self.accepted += decisions.iter().filter(|d| d.accepted).count() as u64;
        let out = self.fleet.step(&grants, t_s, dt_s)?;
        state.p_actual_mw = out.power_mw;
        state.pending_requests = out.requests;
        state.soc_mwh = self.soc_mwh();
        state.mode_counts = self.fleet.mode_counts();
        Ok(decisions)
    }
}

/// A grid VPP: either a bulk battery or an aggregated fleet.
#[derive(Debug, Clone)]
pub struct Vpp {
    pub asset: VppAsset,
    pub state: VppState,
    pub fleet: Option<PemVpp>,
}

impl Vpp {
    pub fn battery(asset: VppAsset) -> Self {
        debug_assert_eq!(asset.kind, VppKind::BulkBattery);
        Self {
            state: VppState::new(&asset),
            asset,
            fleet: None,
        }
    }

    pub fn pem(asset: VppAsset, fleet: PemVpp) -> Self {
        let mut state = VppState::new(&asset);
        state.soc_mwh = fleet.soc_mwh();
        state.mode_counts = fleet.fleet.mode_counts();
        Self {
            asset,
            state,
            fleet: Some(fleet),
        }
    }

    pub fn step(&mut self, p_ref_mw: f64, t_s: f64, dt_s: f64) -> Result<(), PemError> {
        match self.fleet.as_mut() {
            Some(f) => f.step(&mut self.state, p_ref_mw, t_s, dt_s).map(|_| ()),
            None => {
                step_bulk_battery(&mut self.state, p_ref_mw, dt_s, &self.asset);
                Ok(())
            }
        }
    }

    pub fn report(&self) -> (f64, f64) {
        report(&self.state, &self.asset)
    }

    pub fn available_power(&self) -> (f64, f64) {
        available_power(&self.state, &self.asset)
    }
}

pub const MESSAGE_VERSION: &str = "pem/1";

/// Line-oriented request/grant records exchanged between fleet and
/// aggregator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Request(PacketRequest),
    Grant(Grant),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MessageError {
    #[error("unsupported message version {0:?}")]
    Version(String),
    #[error("malformed message {0:?}")]
    Malformed(String),
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Request(r) => {
                let kind = match r.kind {
                    PacketKind::Charge => "charge",
                    PacketKind::Discharge => "discharge",
                };
                write!(f, "{MESSAGE_VERSION} request {} {kind} {}", r.device, r.t_s)
            }
            Message::Grant(g) => {
                let verdict = if g.accepted { "accept" } else { "reject" };
                write!(f, "{MESSAGE_VERSION} grant {} {verdict} {}", g.device, g.t_s)
            }
        }
    }
}

impl FromStr for Message {
    type Err = MessageError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = || MessageError::Malformed(line.to_string());
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [version, tag, device, word, t] = parts[..] else {
            return Err(bad());
        };
        if version != MESSAGE_VERSION {
            return Err(MessageError::Version(version.to_string()));
        }
        let device: u32 = device.parse().map_err(|_| bad())?;
        let t_s: f64 = t.parse().map_err(|_| bad())?;
        match (tag, word) {
            ("request", "charge") => Ok(Message::Request(PacketRequest {
                device,
                kind: PacketKind::Charge,
                t_s,
            })),
            ("request", "discharge") => Ok(Message::Request(PacketRequest {
                device,
                kind: PacketKind::Discharge,
                t_s,
            })),
            ("grant", "accept" | "reject") => Ok(Message::Grant(Grant {
                device,
                accepted: word == "accept",
                t_s,
            })),
            _ => Err(bad()),
        }
    }
}
