//! Two-area load-frequency dynamics with governor droop.
//!
//! Machines within an area are coherent: they share one speed deviation.
//! Per machine,
//!
//! ```text
//! 2H·S · dΔω/dt   = P_mech − P_elec − D·S·Δω
//! T_g · dP_valve/dt = P_ref − (S/R)·Δω − P_valve
//! T_t · dP_mech/dt  = P_valve − P_mech
//! ```
//!
//! with `S` the machine base (its `p_max_mw`), and the area's electrical
//! demand split so every machine keeps the common Δω. The tie line obeys
//! `dΔP_tie/dt = T·2πf₀·(Δω₁ − Δω₂)`. All equations are advanced with one
//! forward-Euler step of `ts_dyn_s`.

use serde::Deserialize;

use crate::config::{ensure, ConfigError};
use crate::grid::{Generator, GridModel};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DynError {
    #[error("diverging state after dynamics step ({0})")]
    UnstableStep(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynConfig {
    pub ts_dyn_s: f64,
    pub governor_tc_s: f64,
    pub turbine_tc_s: f64,
    /// Load damping in per unit power (machine base) per per-unit speed.
    pub damping_d_pu: f64,
    pub tie_stiffness_mw_per_rad: f64,
    pub nominal_hz: f64,
}

impl Default for DynConfig {
    fn default() -> Self {
        Self {
            ts_dyn_s: 0.1,
            governor_tc_s: 0.6,
            turbine_tc_s: 0.6,
            damping_d_pu: 2.0,
            tie_stiffness_mw_per_rad: 8.0,
            nominal_hz: 60.0,
        }
    }
}

impl DynConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = |f: &str| format!("dynamics.{f}");
        ensure(self.ts_dyn_s > 0.0, || p("ts_dyn_s"), "must be positive")?;
        ensure(self.governor_tc_s > 0.0, || p("governor_tc_s"), "must be positive")?;
        ensure(self.turbine_tc_s > 0.0, || p("turbine_tc_s"), "must be positive")?;
        ensure(
            self.ts_dyn_s < self.governor_tc_s.min(self.turbine_tc_s) / 5.0,
            || p("ts_dyn_s"),
            "must be below a fifth of the smallest governor/turbine time constant",
        )?;
        ensure(self.damping_d_pu >= 0.0, || p("damping_d_pu"), "must be non-negative")?;
        ensure(
            self.tie_stiffness_mw_per_rad >= 0.0,
            || p("tie_stiffness_mw_per_rad"),
            "must be non-negative",
        )?;
        ensure(self.nominal_hz > 0.0, || p("nominal_hz"), "must be positive")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Machine {
    pub gen_id: u32,
    pub rating_mva: f64,
    pub inertia_h_s: f64,
    pub droop_pu: f64,
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    pub ramp_mw_per_min: f64,
}

impl Machine {
    pub fn from_generator(g: &Generator) -> Self {
        Self {
            gen_id: g.id,
            rating_mva: g.p_max_mw,
            inertia_h_s: g.inertia_h_s,
            droop_pu: g.droop_pu,
            p_min_mw: g.p_min_mw,
            p_max_mw: g.p_max_mw,
            ramp_mw_per_min: g.ramp_mw_per_min,
        }
    }

    /// `2H·S` in MW·s per unit speed.
    pub fn inertia_mw_s(&self) -> f64 {
        2.0 * self.inertia_h_s * self.rating_mva
    }

    /// Primary response `S/R` in MW per unit speed.
    pub fn droop_gain_mw(&self) -> f64 {
        self.rating_mva / self.droop_pu
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineDynState {
    pub delta_omega_pu: f64,
    pub p_mech_mw: f64,
    pub p_valve_mw: f64,
    pub p_ref_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaDynState {
    pub machines: Vec<MachineDynState>,
    /// Export deviation from schedule; area 2 always holds the negation of
    /// area 1.
    pub tie_flow_dev_mw: f64,
    pub freq_hz: f64,
}

impl AreaDynState {
    pub fn delta_omega_pu(&self) -> f64 {
        self.machines.first().map_or(0.0, |m| m.delta_omega_pu)
    }
}

/// Machines grouped by area plus the scheduled interchange.
#[derive(Debug, Clone)]
pub struct TwoAreaSystem {
    pub areas: [Vec<Machine>; 2],
    /// Scheduled export of area 1 (negative when importing).
    pub scheduled_export_mw: f64,
    pub config: DynConfig,
}

impl TwoAreaSystem {
    pub fn new(areas: [Vec<Machine>; 2], scheduled_export_mw: f64, config: DynConfig) -> Self {
        Self {
            areas,
            scheduled_export_mw,
            config,
        }
    }

    /// Groups the grid's generators by area; the interchange schedule is the
    /// area-1 surplus of scheduled generation over scheduled net load at
    /// `t = 0`.
    pub fn from_grid(grid: &GridModel, config: DynConfig) -> Self {
        let mut areas: [Vec<Machine>; 2] = [Vec::new(), Vec::new()];
        for g in &grid.generators {
            areas[(grid.area_of(g.bus) - 1) as usize].push(Machine::from_generator(g));
        }
        let gen1: f64 = grid
            .generators
            .iter()
            .filter(|g| grid.area_of(g.bus) == 1)
            .map(|g| g.p_sched_mw)
            .sum();
        let load1: f64 = grid
            .buses
            .iter()
            .filter(|b| b.area == 1)
            .map(|b| b.load_at(0.0) - b.renewable_mw)
            .sum();
        Self::new(areas, gen1 - load1, config)
    }

    /// Steady state with every machine at `p_mw[area][k]`.
    pub fn equilibrium(&self, p_mw: &[Vec<f64>; 2]) -> [AreaDynState; 2] {
        let area = |a: usize| AreaDynState {
            machines: p_mw[a]
                .iter()
                .map(|&p| MachineDynState {
                    delta_omega_pu: 0.0,
                    p_mech_mw: p,
                    p_valve_mw: p,
                    p_ref_mw: p,
                })
                .collect(),
            tie_flow_dev_mw: 0.0,
            freq_hz: self.config.nominal_hz,
        };
        [area(0), area(1)]
    }

    /// Combined droop and damping response `Σ S/R + Σ D·S` in MW per unit
    /// speed, for one area or (with `None`) the whole interconnection.
    pub fn frequency_response_mw_per_pu(&self, area: Option<usize>) -> f64 {
        let d = self.config.damping_d_pu;
        self.areas
            .iter()
            .enumerate()
            .filter(|(a, _)| area.is_none_or(|x| x == *a))
            .flat_map(|(_, ms)| ms.iter())
            .map(|m| m.droop_gain_mw() + d * m.rating_mva)
            .sum()
    }

    fn area_export(&self, a: usize, state: &AreaDynState) -> f64 {
        let sched = if a == 0 {
            self.scheduled_export_mw
        } else {
            -self.scheduled_export_mw
        };
        sched + state.tie_flow_dev_mw
    }

    /// Per-machine electrical output over the step `before → after` given the
    /// area loads used for it. Sums to each area's load plus export.
    pub fn electrical_output_mw(
        &self,
        before: &[AreaDynState; 2],
        after: &[AreaDynState; 2],
    ) -> [Vec<f64>; 2] {
        let h = self.config.ts_dyn_s;
        let d = self.config.damping_d_pu;
        let area = |a: usize| -> Vec<f64> {
            let (s0, s1) = (&before[a], &after[a]);
            self.areas[a]
                .iter()
                .zip(s0.machines.iter().zip(&s1.machines))
                .map(|(m, (x0, x1))| {
                    x0.p_mech_mw
                        - m.inertia_mw_s() * (x1.delta_omega_pu - x0.delta_omega_pu) / h
                        - d * m.rating_mva * x0.delta_omega_pu
                })
                .collect()
        };
        [area(0), area(1)]
    }
}

/// Speed deviation treated as divergence.
pub const MAX_SPEED_DEV_PU: f64 = 0.5;

/// One forward-Euler step. `electrical_load_mw[a]` is area `a`'s own net
/// demand (loads minus renewables plus storage charging), excluding the
/// interchange, which the model adds.
pub fn step_dynamics(
    sys: &TwoAreaSystem,
    state: &[AreaDynState; 2],
    electrical_load_mw: [f64; 2],
) -> Result<[AreaDynState; 2], DynError> {
    let c = &sys.config;
    let h = c.ts_dyn_s;
    let w0 = 2.0 * std::f64::consts::PI * c.nominal_hz;
    let dw = [state[0].delta_omega_pu(), state[1].delta_omega_pu()];
    let tie_rate = c.tie_stiffness_mw_per_rad * w0 * (dw[0] - dw[1]);
    let tie1 = state[0].tie_flow_dev_mw + h * tie_rate;

    let mut next = state.clone();
    for a in 0..2 {
        let ms = &sys.areas[a];
        let xs = &state[a].machines;
        let m_total: f64 = ms.iter().map(Machine::inertia_mw_s).sum();
        let p_mech: f64 = xs.iter().map(|x| x.p_mech_mw).sum();
        let damping: f64 = ms.iter().map(|m| c.damping_d_pu * m.rating_mva).sum::<f64>() * dw[a];
        let demand = electrical_load_mw[a] + sys.area_export(a, &state[a]);
        let dw_next = if m_total > 0.0 {
            dw[a] + h * (p_mech - demand - damping) / m_total
        } else {
            dw[a]
        };

        for ((m, x), nx) in ms.iter().zip(xs).zip(next[a].machines.iter_mut()) {
            let valve = x.p_valve_mw
                + h * (x.p_ref_mw - m.droop_gain_mw() * dw[a] - x.p_valve_mw) / c.governor_tc_s;
            let mech = x.p_mech_mw + h * (x.p_valve_mw - x.p_mech_mw) / c.turbine_tc_s;
            let max_step = m.ramp_mw_per_min / 60.0 * h;
            let mech = mech
                .clamp(x.p_mech_mw - max_step, x.p_mech_mw + max_step)
                .clamp(m.p_min_mw, m.p_max_mw);
            *nx = MachineDynState {
                delta_omega_pu: dw_next,
                p_mech_mw: mech,
                p_valve_mw: valve.clamp(m.p_min_mw, m.p_max_mw),
                p_ref_mw: x.p_ref_mw,
            };
        }
        next[a].freq_hz = c.nominal_hz * (1.0 + dw_next);
    }
    next[0].tie_flow_dev_mw = tie1;
    next[1].tie_flow_dev_mw = -tie1;

    let finite = next.iter().all(|s| {
        s.freq_hz.is_finite()
            && s.delta_omega_pu().abs() <= MAX_SPEED_DEV_PU
            && s.tie_flow_dev_mw.is_finite()
            && s.machines
                .iter()
                .all(|m| m.delta_omega_pu.is_finite() && m.p_mech_mw.is_finite() && m.p_valve_mw.is_finite())
    });
    if !finite {
        return Err(DynError::UnstableStep(format!(
            "loads {:?} MW, area frequencies {} / {} Hz",
            electrical_load_mw, next[0].freq_hz, next[1].freq_hz
        )));
    }
    Ok(next)
}

/// Weighted mean of `(weight, hz)` pairs.
pub fn weighted_mean_frequency(machines: &[(f64, f64)]) -> f64 {
    let w: f64 = machines.iter().map(|m| m.0).sum();
    machines.iter().map(|(k, f)| k * f).sum::<f64>() / w
}

/// Inertia-weighted (`H·S`) mean of machine frequencies.
///
/// # Panics
/// If the system has no machines.
pub fn mean_frequency(sys: &TwoAreaSystem, state: &[AreaDynState; 2]) -> f64 {
    let pairs: Vec<(f64, f64)> = (0..2)
        .flat_map(|a| {
            sys.areas[a].iter().zip(&state[a].machines).map(move |(m, x)| {
                (
                    m.inertia_h_s * m.rating_mva,
                    sys.config.nominal_hz * (1.0 + x.delta_omega_pu),
                )
            })
        })
        .collect();
    assert!(!pairs.is_empty(), "at least one machine");
    weighted_mean_frequency(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_frequency_examples() {
        assert_eq!(weighted_mean_frequency(&[(1.0, 60.0), (3.0, 60.0)]), 60.0);
        assert!((weighted_mean_frequency(&[(1.0, 59.9), (1.0, 60.1)]) - 60.0).abs() < 1e-12);
        let f = weighted_mean_frequency(&[(2.0, 60.02), (1.0, 59.98), (1.0, 59.98)]);
        assert!((f - 60.0).abs() < 1e-12);
    }

    #[test]
    fn default_config_is_valid_and_fast_steps_are_rejected() {
        assert!(DynConfig::default().validate().is_ok());
        let c = DynConfig {
            ts_dyn_s: 0.2,
            ..DynConfig::default()
        };
        assert_eq!(c.validate().unwrap_err().path, "dynamics.ts_dyn_s");
    }
}
