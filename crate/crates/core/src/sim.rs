//! Multi-rate closed loop.
//!
//! Every second: scripted events at `t`, then the controller that is due
//! (AGC every `agc_period_s` per area, MPC every `mpc.ts_s` over the whole
//! network), then one 1 s VPP step, then `1 / ts_dyn_s` dynamics substeps.
//! Sample `k` covers `[k, k + 1)`.

use std::path::PathBuf;

use vppsim_qp::QpStatus;

use crate::agc::{agc_dispatch, compute_ace, AgcConfig, AgcError, AgcState, ResourceId, ResourceLimits};
use crate::config::ConfigError;
use crate::dynamics::{mean_frequency, step_dynamics, AreaDynState, DynError, TwoAreaSystem};
use crate::grid::{DcSolver, GridError, GridModel, VppKind};
use crate::mpc::{debug_dump, HorizonInputs, MeasuredState, MpcController, MpcError};
use crate::pem::{Fleet, PemError};
use crate::scenario::{ControllerKind, EventKind, Scenario};
use crate::trace::SimTrace;
use crate::vpp::{PemVpp, Vpp};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("network: {0}")]
    Grid(#[from] GridError),
    #[error("unstable at t = {t_s} s: {source}")]
    Unstable { t_s: f64, source: DynError },
    #[error("fleet of VPP {vpp} at t = {t_s} s: {source}")]
    Pem { vpp: u32, t_s: f64, source: PemError },
    #[error("dispatch at t = {t_s} s: {source}")]
    Mpc { t_s: f64, source: MpcError },
    #[error("AGC at t = {t_s} s: {source}")]
    Agc { t_s: f64, source: AgcError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Replaces the script's seed.
    pub seed: Option<u64>,
    /// Directory receiving one text dump per MPC solve.
    pub debug_dumps: Option<PathBuf>,
}

/// Outcome of one MPC solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcRecord {
    pub t_s: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// Largest relative KKT residual of the returned point.
    pub kkt_relative: f64,
    pub kkt_passed: bool,
    /// Largest gap between the SOC encoded in the QP rows and the recursion
    /// applied to the solution; `None` when nothing was solved.
    pub soc_gap_mwh: Option<f64>,
    pub fell_back: bool,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: SimTrace,
    pub diagnostics: Vec<String>,
    pub mpc: Vec<MpcRecord>,
    /// Bulk-battery VPP ids, for plotting.
    pub battery_ids: Vec<u32>,
}

struct AreaAgc {
    config: AgcConfig,
    state: AgcState,
}

fn build_vpps(scenario: &Scenario, seed: u64) -> Result<Vec<Vpp>, SimError> {
    let script = &scenario.script;
    scenario
        .grid
        .vpps
        .iter()
        .map(|a| match a.kind {
            VppKind::BulkBattery => Ok(Vpp::battery(a.clone())),
            VppKind::PemFleet => {
                let binding = script
                    .fleets
                    .iter()
                    .find(|f| f.vpp == a.id)
                    .ok_or_else(|| ConfigError::new("fleets", format!("pem_fleet VPP {} has no device population", a.id)))?;
                let (cfgs, x0) = binding
                    .spec()
                    .build(seed.wrapping_add(u64::from(a.id)))
                    .map_err(|e| e.within(&format!("fleets[vpp = {}]", a.id)))?;
                let fleet = Fleet::new(cfgs, &x0, seed, a.id);
                Ok(Vpp::pem(a.clone(), PemVpp::new(fleet, a, binding.deadband_mw)))
            }
        })
        .collect()
}

fn build_agc(scenario: &Scenario, sys: &TwoAreaSystem) -> Result<Vec<Option<AreaAgc>>, SimError> {
    let grid = &scenario.grid;
    let s = &scenario.script.agc;
    let f0 = scenario.script.dynamics.nominal_hz;
    (0..2)
        .map(|a| {
            let area = (a + 1) as u8;
            let mut participation: Vec<(ResourceId, f64)> = grid
                .generators
                .iter()
                .filter(|g| g.agc && grid.area_of(g.bus) == area)
                .map(|g| (ResourceId::Generator(g.id), g.agc_participation))
                .collect();
            participation.extend(
                grid.vpps
                    .iter()
                    .filter(|v| v.agc && grid.area_of(v.bus) == area)
                    .map(|v| (ResourceId::Vpp(v.id), v.agc_participation)),
            );
            if participation.is_empty() {
                return Ok(None);
            }
            let bias = match s.bias_mw_per_hz {
                Some(b) => b[a],
                None => sys.frequency_response_mw_per_pu(Some(a)) / f0,
            };
            let config = AgcConfig {
                bias_mw_per_hz: bias,
                integral_gain_per_s: s.integral_gain_per_s,
                agc_period_s: s.agc_period_s,
                participation,
            };
            config.validate().map_err(|e| e.within(&format!("agc (area {area})")))?;
            Ok(Some(AreaAgc {
                config,
                state: AgcState::default(),
            }))
        })
        .collect()
}

fn trace_header(grid: &GridModel) -> Vec<String> {
    let mut names = vec!["t_s".to_string(), "freq_hz".into(), "ace_mw".into()];
    names.extend(grid.generators.iter().map(|g| format!("gen{}_mw", g.id)));
    for v in &grid.vpps {
        names.push(format!("vpp{}_mw", v.id));
        names.push(format!("vpp{}_ref_mw", v.id));
        names.push(format!("vpp{}_soc_pct", v.id));
    }
    names.extend(grid.lines.iter().map(|l| format!("line{}_mw", l.id)));
    names.push("net_load_mw".into());
    names
}

/// Runs the scenario to completion and returns the 1 s trace.
pub fn run_scenario(scenario: &Scenario, options: &SimOptions) -> Result<SimOutput, SimError> {
    let script = &scenario.script;
    let grid = &scenario.grid;
    let seed = options.seed.unwrap_or(script.seed);
    let f0 = script.dynamics.nominal_hz;
    let sys = TwoAreaSystem::from_grid(grid, script.dynamics);
    let dc = DcSolver::new(grid)?;

    // generator k in grid order lives at machine slot[k] of area area[k]
    let mut gen_slot = Vec::with_capacity(grid.generators.len());
    let mut counts = [0usize; 2];
    for g in &grid.generators {
        let a = (grid.area_of(g.bus) - 1) as usize;
        gen_slot.push((a, counts[a]));
        counts[a] += 1;
    }
    let mut sched: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (g, &(a, _)) in grid.generators.iter().zip(&gen_slot) {
        sched[a].push(g.p_sched_mw);
    }
    let mut state = sys.equilibrium(&sched);

    let mut vpps = build_vpps(scenario, seed)?;
    let mut agc = match script.controller {
        ControllerKind::Agc => build_agc(scenario, &sys)?,
        _ => vec![None, None],
    };
    let mut mpc = MpcController::new(script.mpc.clone());
    if let Some(dir) = &options.debug_dumps {
        std::fs::create_dir_all(dir).map_err(|source| SimError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }

    let n_bus = grid.buses.len();
    let bus_of_gen: Vec<usize> = grid.generators.iter().map(|g| grid.bus_index(g.bus).unwrap()).collect();
    let bus_of_vpp: Vec<usize> = grid.vpps.iter().map(|v| grid.bus_index(v.bus).unwrap()).collect();
    let area_of_bus: Vec<usize> = grid.buses.iter().map(|b| (b.area - 1) as usize).collect();

    let mut load_delta = vec![0.0; n_bus];
    let mut gen_base: Vec<f64> = grid.generators.iter().map(|g| g.p_sched_mw).collect();
    let mut vpp_ref = vec![0.0; grid.vpps.len()];
    let mut vpp_ref_shown = vec![0.0; grid.vpps.len()];

    let substeps = (1.0 / script.dynamics.ts_dyn_s).round() as usize;
    let duration = script.duration_s as usize;
    let agc_period = script.agc.agc_period_s as usize;
    let mpc_period = script.mpc.ts_s as usize;

    let header = trace_header(grid);
    let width = header.len();
    let mut trace = SimTrace::new(header);
    let mut diagnostics = Vec::new();
    let mut records = Vec::new();
    let mut events = script.events.iter().peekable();
    let mut row = Vec::with_capacity(width);

    let set_ref = |state: &mut [AreaDynState; 2], k: usize, p: f64| {
        let (a, m) = gen_slot[k];
        state[a].machines[m].p_ref_mw = p;
    };

    for step in 0..duration {
        let t = step as f64;

        while let Some(e) = events.next_if(|e| e.t_s <= t) {
            match e.kind {
                EventKind::LoadStep { bus, delta_mw } => {
                    load_delta[grid.bus_index(bus).unwrap()] += delta_mw;
                }
                EventKind::ReferenceChange { generator, p_ref_mw } => {
                    let k = grid.generator_index(generator).unwrap();
                    gen_base[k] = p_ref_mw;
                    match script.controller {
                        ControllerKind::DroopOnly => set_ref(&mut state, k, p_ref_mw),
                        ControllerKind::Agc => {
                            let (a, _) = gen_slot[k];
                            let cmd = agc[a]
                                .as_ref()
                                .map_or(0.0, |x| x.state.last_command(ResourceId::Generator(generator)));
                            set_ref(&mut state, k, p_ref_mw + cmd);
                        }
                        ControllerKind::Mpc => {}
                    }
                }
            }
        }
        let net_load: Vec<f64> = grid
            .buses
            .iter()
            .zip(&load_delta)
            .map(|(b, d)| b.load_at(t) + d - b.renewable_mw)
            .collect();

        let ace = |state: &[AreaDynState; 2], a: usize, cfg: &AgcConfig| {
            compute_ace(state[a].freq_hz - f0, state[a].tie_flow_dev_mw, cfg)
        };

        match script.controller {
            ControllerKind::Agc if step % agc_period == 0 => {
                for a in 0..2 {
                    let Some(ctl) = agc[a].as_mut() else { continue };
                    let ace_mw = ace(&state, a, &ctl.config);
                    let period_min = ctl.config.agc_period_s / 60.0;
                    let limits: Vec<ResourceLimits> = ctl
                        .config
                        .participation
                        .iter()
                        .map(|&(id, _)| match id {
                            ResourceId::Generator(gid) => {
                                let k = grid.generator_index(gid).unwrap();
                                let g = &grid.generators[k];
                                let r = g.ramp_mw_per_min * period_min;
                                ResourceLimits {
                                    id,
                                    base_mw: gen_base[k],
                                    p_min_mw: g.p_min_mw,
                                    p_max_mw: g.p_max_mw,
                                    ramp_up_mw: r,
                                    ramp_down_mw: r,
                                }
                            }
                            ResourceId::Vpp(vid) => {
                                let v = &vpps[grid.vpp_index(vid).unwrap()];
                                // AGC works in injection terms
                                let (lo, hi) = v.available_power();
                                ResourceLimits {
                                    id,
                                    base_mw: 0.0,
                                    p_min_mw: -hi,
                                    p_max_mw: -lo,
                                    ramp_up_mw: v.asset.ramp_dis_mw_per_min * period_min,
                                    ramp_down_mw: v.asset.ramp_ch_mw_per_min * period_min,
                                }
                            }
                        })
                        .collect();
                    let commands = match agc_dispatch(&mut ctl.state, ace_mw, &ctl.config, &limits) {
                        Ok(c) => c,
                        Err(AgcError::AllSaturated { commands, shortfall_mw }) => {
                            diagnostics.push(format!(
                                "t={t} area {}: AGC saturated, {shortfall_mw:.3} MW not dispatched",
                                a + 1
                            ));
                            commands
                        }
                        Err(source) => return Err(SimError::Agc { t_s: t, source }),
                    };
                    for c in commands {
                        match c.id {
                            ResourceId::Generator(gid) => {
                                let k = grid.generator_index(gid).unwrap();
                                set_ref(&mut state, k, gen_base[k] + c.command_mw);
                            }
                            ResourceId::Vpp(vid) => {
                                let j = grid.vpp_index(vid).unwrap();
                                vpp_ref[j] = -c.command_mw;
                                vpp_ref_shown[j] = -c.requested_mw;
                            }
                        }
                    }
                }
            }
            ControllerKind::Mpc if step % mpc_period == 0 => {
                let mut gen_mw = vec![0.0; grid.generators.len()];
                for (k, &(a, m)) in gen_slot.iter().enumerate() {
                    gen_mw[k] = state[a].machines[m].p_mech_mw;
                }
                let measured = MeasuredState {
                    t_s: t,
                    gen_mw,
                    vpp_mw: vpps.iter().map(|v| v.state.p_actual_mw).collect(),
                    soc_mwh: vpps.iter().map(|v| v.state.soc_mwh).collect(),
                };
                let inputs = HorizonInputs::persistence(&net_load, &gen_base, script.mpc.horizon_m + 1);
                let result = mpc
                    .step(grid, &measured, &inputs)
                    .map_err(|source| SimError::Mpc { t_s: t, source })?;
                for d in &result.diagnostics {
                    diagnostics.push(format!("t={t} mpc: {d}"));
                }
                let soc_gap_mwh = result.trajectory.as_ref().map(|traj| {
                    let qp_soc = result.instance.qp_soc(&result.solution.x);
                    let mut gap: f64 = 0.0;
                    for (v, rows) in qp_soc.iter().enumerate() {
                        for (l, s) in rows.iter().enumerate() {
                            gap = gap.max((s - traj.soc[v][l + 1]).abs());
                        }
                    }
                    gap
                });
                records.push(MpcRecord {
                    t_s: t,
                    status: result.solution.status,
                    iterations: result.solution.iterations,
                    kkt_relative: result.solution.kkt.relative.max(),
                    kkt_passed: result.solution.kkt.passed,
                    soc_gap_mwh,
                    fell_back: result.fell_back,
                });
                if let Some(dir) = &options.debug_dumps {
                    let path = dir.join(format!("mpc_t{step:06}.txt"));
                    std::fs::write(&path, debug_dump(&result)).map_err(|source| SimError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                }
                for (k, p) in result.commands.gen_mw.iter().enumerate() {
                    set_ref(&mut state, k, *p);
                }
                vpp_ref.clone_from(&result.commands.vpp_mw);
                vpp_ref_shown.clone_from(&result.commands.vpp_mw);
            }
            _ => {}
        }

        let freq = mean_frequency(&sys, &state);
        let ace_now = match &agc[0] {
            Some(ctl) => ace(&state, 0, &ctl.config),
            None => {
                let bias = script
                    .agc
                    .bias_mw_per_hz
                    .map_or(sys.frequency_response_mw_per_pu(Some(0)) / f0, |b| b[0]);
                state[0].tie_flow_dev_mw + bias * (state[0].freq_hz - f0)
            }
        };
        let soc_pct: Vec<f64> = vpps.iter().map(|v| 100.0 * v.report().1).collect();

        for (j, v) in vpps.iter_mut().enumerate() {
            v.step(vpp_ref[j], t, 1.0).map_err(|source| SimError::Pem {
                vpp: v.asset.id,
                t_s: t,
                source,
            })?;
        }
        let vpp_p: Vec<f64> = vpps.iter().map(|v| v.state.p_actual_mw).collect();

        let mut area_load = [0.0; 2];
        for (b, l) in net_load.iter().enumerate() {
            area_load[area_of_bus[b]] += l;
        }
        for (j, p) in vpp_p.iter().enumerate() {
            area_load[area_of_bus[bus_of_vpp[j]]] += p;
        }

        let mut pe_sum = [vec![0.0; counts[0]], vec![0.0; counts[1]]];
        for i in 0..substeps {
            let next = step_dynamics(&sys, &state, area_load).map_err(|source| SimError::Unstable {
                t_s: t + i as f64 * script.dynamics.ts_dyn_s,
                source,
            })?;
            let pe = sys.electrical_output_mw(&state, &next);
            for a in 0..2 {
                for (s, p) in pe_sum[a].iter_mut().zip(&pe[a]) {
                    *s += p;
                }
            }
            state = next;
        }
        let gen_p: Vec<f64> = gen_slot.iter().map(|&(a, m)| pe_sum[a][m] / substeps as f64).collect();

        let mut inj = vec![0.0; n_bus];
        for (k, p) in gen_p.iter().enumerate() {
            inj[bus_of_gen[k]] += p;
        }
        for (b, l) in net_load.iter().enumerate() {
            inj[b] -= l;
        }
        for (j, p) in vpp_p.iter().enumerate() {
            inj[bus_of_vpp[j]] -= p;
        }
        let flows = dc.solve(&inj)?.flows_mw;

        row.clear();
        row.extend([t, freq, ace_now]);
        row.extend(&gen_p);
        for j in 0..vpps.len() {
            row.extend([vpp_p[j], vpp_ref_shown[j], soc_pct[j]]);
        }
        row.extend(&flows);
        row.push(net_load.iter().sum());
        trace.push_row(&row);
    }

    Ok(SimOutput {
        trace,
        diagnostics,
        mpc: records,
        battery_ids: grid
            .vpps
            .iter()
            .filter(|v| v.kind == VppKind::BulkBattery)
            .map(|v| v.id)
            .collect(),
    })
}
