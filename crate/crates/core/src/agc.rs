//! Area control error and integral secondary control.
//!
//! The controller sees each resource only through [`ResourceLimits`]; storage
//! availability arrives already folded into the power bounds.

use serde::{Deserialize, Serialize};

use crate::config::{ensure, ConfigError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum ResourceId {
    Generator(u32),
    Vpp(u32),
}

impl std::fmt::Display for ResourceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResourceId::Generator(i) => write!(f, "gen{i}"),
            ResourceId::Vpp(i) => write!(f, "vpp{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgcConfig {
    pub bias_mw_per_hz: f64,
    pub integral_gain_per_s: f64,
    pub agc_period_s: f64,
    pub participation: Vec<(ResourceId, f64)>,
}

impl AgcConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(self.bias_mw_per_hz > 0.0, || "agc.bias_mw_per_hz".into(), "must be positive")?;
        ensure(
            self.integral_gain_per_s > 0.0,
            || "agc.integral_gain_per_s".into(),
            "must be positive",
        )?;
        ensure(self.agc_period_s > 0.0, || "agc.agc_period_s".into(), "must be positive")?;
        for (i, (_, a)) in self.participation.iter().enumerate() {
            ensure(
                (0.0..=1.0).contains(a),
                || format!("agc.participation[{i}]"),
                "must lie in [0, 1]",
            )?;
        }
        let sum: f64 = self.participation.iter().map(|p| p.1).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ConfigError::new(
                "agc.participation",
                format!("fractions sum to {sum}, expected 1"),
            ));
        }
        Ok(())
    }
}

/// Operating envelope of one participant for the coming period, as absolute
/// MW around a base operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceLimits {
    pub id: ResourceId,
    pub base_mw: f64,
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    /// Largest set-point change per AGC period.
    pub ramp_up_mw: f64,
    pub ramp_down_mw: f64,
}

impl ResourceLimits {
    /// Admissible deviation interval given the previous deviation. Power
    /// limits win when the ramp window lies outside them.
    fn window(&self, last: f64) -> (f64, f64) {
        let (pl, ph) = (self.p_min_mw - self.base_mw, self.p_max_mw - self.base_mw);
        let (rl, rh) = (last - self.ramp_down_mw, last + self.ramp_up_mw);
        (rl.max(pl).min(ph), rh.min(ph).max(pl))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgcState {
    pub ace_integral_mw_s: f64,
    pub last_commands: Vec<(ResourceId, f64)>,
}

impl AgcState {
    pub fn last_command(&self, id: ResourceId) -> f64 {
        self.last_commands
            .iter()
            .find(|c| c.0 == id)
            .map_or(0.0, |c| c.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgcCommand {
    pub id: ResourceId,
    /// Participation share of the total command before clamping.
    pub requested_mw: f64,
    /// Set-point deviation after clamping and redistribution.
    pub command_mw: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgcError {
    #[error("all AGC participants saturated, {shortfall_mw:.3} MW not dispatched")]
    AllSaturated {
        commands: Vec<AgcCommand>,
        shortfall_mw: f64,
    },
    #[error("no limits supplied for participant {0}")]
    MissingLimits(ResourceId),
}

pub fn compute_ace(freq_dev_hz: f64, tie_dev_mw: f64, config: &AgcConfig) -> f64 {
    tie_dev_mw + config.bias_mw_per_hz * freq_dev_hz
}

const SURPLUS_TOL_MW: f64 = 1e-9;

/// Advances the integral by one period and dispatches the total command.
///
/// On [`AgcError::AllSaturated`] the state is still updated and the clamped
/// commands are carried in the error.
pub fn agc_dispatch(
    state: &mut AgcState,
    ace_mw: f64,
    config: &AgcConfig,
    limits: &[ResourceLimits],
) -> Result<Vec<AgcCommand>, AgcError> {
    let integral = state.ace_integral_mw_s + ace_mw * config.agc_period_s;
    let total = -config.integral_gain_per_s * integral;

    let mut rows = Vec::with_capacity(config.participation.len());
    for &(id, alpha) in &config.participation {
        let lim = limits
            .iter()
            .find(|l| l.id == id)
            .ok_or(AgcError::MissingLimits(id))?;
        let (lo, hi) = lim.window(state.last_command(id));
        let want = alpha * total;
        rows.push((id, want, want.clamp(lo, hi), lo, hi));
    }

    let surplus: f64 = rows.iter().map(|r| r.1 - r.2).sum();
    let mut left = surplus;
    if surplus.abs() > SURPLUS_TOL_MW {
        let room = |r: &(ResourceId, f64, f64, f64, f64)| {
            if surplus > 0.0 {
                r.4 - r.2
            } else {
                r.2 - r.3
            }
        };
        // any participant with room in the needed direction, including
        // units held back only by their own ramp window
        let free: Vec<usize> = (0..rows.len())
            .filter(|&i| room(&rows[i]) > SURPLUS_TOL_MW)
            .collect();
        let headroom: f64 = free.iter().map(|&i| room(&rows[i])).sum();
        if headroom > 0.0 {
            let moved = surplus.abs().min(headroom);
            for &i in &free {
                let share = moved * room(&rows[i]) / headroom;
                let r = &mut rows[i];
                r.2 = (r.2 + share * surplus.signum()).clamp(r.3, r.4);
            }
            left = surplus - moved * surplus.signum();
        }
    }

    let commands: Vec<AgcCommand> = rows
        .iter()
        .map(|r| AgcCommand {
            id: r.0,
            requested_mw: r.1,
            command_mw: r.2,
        })
        .collect();
    state.last_commands = commands.iter().map(|c| (c.id, c.command_mw)).collect();

    let saturated = left.abs() > SURPLUS_TOL_MW;
    // conditional integration: hold the integral while the error would only
    // push further into the saturated direction
    let pushing = -ace_mw * left > 0.0;
    if !(saturated && pushing) {
        state.ace_integral_mw_s = integral;
    }
    if saturated {
        return Err(AgcError::AllSaturated {
            commands,
            shortfall_mw: left,
        });
    }
    Ok(commands)
}
