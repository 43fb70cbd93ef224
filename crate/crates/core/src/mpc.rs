//! Receding-horizon dispatch of generators and VPPs.
//!
//! Per step `l = 0..=M` the decision vector holds every generator output,
//! every VPP's charge and discharge power and every bus angle. SOC is not a
//! variable: `S[l+1]` is the cumulative sum of the storage recursion and is
//! bounded through ranged rows. Line limits and SOC bounds are softened with
//! non-negative slacks priced both linearly (exact penalty) and
//! quadratically.

use std::fmt::Write as _;

use serde::Deserialize;
use vppsim_qp::{
    dump, solve, QpBuilder, QpError, QpProblem, QpSolution, QpStatus, SolverSettings,
};

use crate::config::{ensure, ConfigError};
use crate::grid::{GridModel, VppAsset};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon_m: usize,
    pub ts_s: f64,
    /// Per-generator `c_G` in grid order; the grid's `deviation_cost` when
    /// absent.
    pub deviation_costs: Option<Vec<f64>>,
    pub slack_quadratic: f64,
    pub slack_linear: f64,
    /// `ε` in `ε/P̄·(P_ch² + P_dis²)`, splitting VPP effort by capacity.
    pub vpp_regularization: f64,
    /// Linear price on `P_ch + P_dis`; rules out simultaneous charging and
    /// discharging.
    pub vpp_throughput_cost: f64,
    /// Optional end-of-horizon SOC per VPP (MWh), grid order.
    pub terminal_soc_mwh: Option<Vec<f64>>,
    pub terminal_weight: f64,
    /// Re-solve with each step's direction fixed when a plan charges and
    /// discharges one VPP at once.
    pub exclusive_vpp_modes: bool,
    pub solver_tol: f64,
    pub max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon_m: 30,
            ts_s: 60.0,
            deviation_costs: None,
            slack_quadratic: 1e4,
            slack_linear: 1e4,
            vpp_regularization: 1e-4,
            vpp_throughput_cost: 1e-3,
            terminal_soc_mwh: None,
            terminal_weight: 1e2,
            exclusive_vpp_modes: true,
            solver_tol: 1e-9,
            max_iter: 100,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, grid: &GridModel) -> Result<(), ConfigError> {
        ensure(self.horizon_m >= 2, || "mpc.horizon_m".into(), "must be at least 2")?;
        ensure(self.ts_s > 0.0, || "mpc.ts_s".into(), "must be positive")?;
        if let Some(c) = &self.deviation_costs {
            ensure(
                c.len() == grid.generators.len(),
                || "mpc.deviation_costs".into(),
                "needs one entry per generator",
            )?;
            for (i, v) in c.iter().enumerate() {
                ensure(*v >= 0.0, || format!("mpc.deviation_costs[{i}]"), "must be non-negative")?;
            }
        }
        if let Some(t) = &self.terminal_soc_mwh {
            ensure(
                t.len() == grid.vpps.len(),
                || "mpc.terminal_soc_mwh".into(),
                "needs one entry per VPP",
            )?;
        }
        ensure(self.slack_quadratic > 0.0, || "mpc.slack_quadratic".into(), "must be positive")?;
        ensure(self.slack_linear >= 0.0, || "mpc.slack_linear".into(), "must be non-negative")?;
        ensure(
            self.vpp_throughput_cost >= 0.0,
            || "mpc.vpp_throughput_cost".into(),
            "must be non-negative",
        )?;
        ensure(
            self.vpp_regularization >= 0.0,
            || "mpc.vpp_regularization".into(),
            "must be non-negative",
        )?;
        ensure(self.solver_tol > 0.0, || "mpc.solver_tol".into(), "must be positive")
    }

    fn cost(&self, grid: &GridModel, g: usize) -> f64 {
        self.deviation_costs
            .as_ref()
            .map_or(grid.generators[g].deviation_cost, |c| c[g])
    }
}

/// Plant measurement at the start of an MPC period.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredState {
    pub t_s: f64,
    pub gen_mw: Vec<f64>,
    /// VPP power, consumption positive.
    pub vpp_mw: Vec<f64>,
    pub soc_mwh: Vec<f64>,
}

/// Per-step inputs over the horizon: `[step][bus]` net load (load minus
/// renewables) and `[step][generator]` reference set-points.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonInputs {
    pub net_load_mw: Vec<Vec<f64>>,
    pub gen_ref_mw: Vec<Vec<f64>>,
}

impl HorizonInputs {
    /// Persistence: current values held over `steps` steps.
    pub fn persistence(net_load_mw: &[f64], gen_ref_mw: &[f64], steps: usize) -> Self {
        Self {
            net_load_mw: vec![net_load_mw.to_vec(); steps],
            gen_ref_mw: vec![gen_ref_mw.to_vec(); steps],
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MpcError {
    #[error("forecast covers {got} steps, horizon needs {needed}")]
    ForecastGap { needed: usize, got: usize },
    #[error("measurement has {got} {what}, grid has {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("problem assembly: {0}")]
    Qp(#[from] QpError),
}

/// Column layout of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarIndex {
    pub steps: usize,
    pub n_gen: usize,
    pub n_vpp: usize,
    pub n_bus: usize,
    pub n_line: usize,
}

impl VarIndex {
    fn per_step(&self) -> usize {
        self.n_gen + 2 * self.n_vpp + self.n_bus
    }
    /// Primary variables, excluding slacks.
    pub fn n_primary(&self) -> usize {
        self.per_step() * self.steps
    }
    pub fn n_total(&self) -> usize {
        self.n_primary() + self.steps * (self.n_line + self.n_vpp)
    }
    pub fn pg(&self, l: usize, g: usize) -> usize {
        l * self.per_step() + g
    }
    pub fn pch(&self, l: usize, v: usize) -> usize {
        l * self.per_step() + self.n_gen + v
    }
    pub fn pdis(&self, l: usize, v: usize) -> usize {
        l * self.per_step() + self.n_gen + self.n_vpp + v
    }
    /// Column of `base_mva·θ`; angles are carried in MW-scaled units.
    pub fn theta(&self, l: usize, b: usize) -> usize {
        l * self.per_step() + self.n_gen + 2 * self.n_vpp + b
    }
    pub fn line_slack(&self, l: usize, k: usize) -> usize {
        self.n_primary() + l * self.n_line + k
    }
    pub fn soc_slack(&self, l: usize, v: usize) -> usize {
        self.n_primary() + self.steps * self.n_line + l * self.n_vpp + v
    }
}

/// Assembled QP with the data needed to interpret and re-check it.
#[derive(Debug, Clone)]
pub struct MpcProblemInstance {
    pub measured: MeasuredState,
    pub inputs: HorizonInputs,
    pub index: VarIndex,
    pub qp: QpProblem,
    /// Upper SOC row of `S[l+1]` for each `[l][vpp]`; the row reads
    /// `S[l+1] − S0 − T_s·σ`.
    pub soc_rows: Vec<Vec<usize>>,
    pub ts_s: f64,
    pub costs: Vec<f64>,
    /// Measurements moved into their boxes, `(what, raw, clamped)`.
    pub clamped: Vec<(String, f64, f64)>,
}

fn soc_step_coefs(asset: &VppAsset, ts_h: f64) -> (f64, f64) {
    (ts_h * asset.eta_ch, -ts_h / asset.eta_dis)
}

/// `S[l+1] = S[l] + T_s·(η_ch·P_ch[l] − P_dis[l]/η_dis)`, returning
/// `S[0..=n]`.
pub fn soc_rollout(s0_mwh: f64, p_ch_mw: &[f64], p_dis_mw: &[f64], asset: &VppAsset, ts_s: f64) -> Vec<f64> {
    assert_eq!(p_ch_mw.len(), p_dis_mw.len(), "sequences must have equal length");
    let ts_h = ts_s / 3600.0;
    let mut s = Vec::with_capacity(p_ch_mw.len() + 1);
    s.push(s0_mwh);
    for (c, d) in p_ch_mw.iter().zip(p_dis_mw) {
        let last = *s.last().unwrap();
        s.push(last + ts_h * (asset.eta_ch * c - d / asset.eta_dis));
    }
    s
}

pub fn build_problem(
    grid: &GridModel,
    measured: &MeasuredState,
    inputs: &HorizonInputs,
    config: &MpcConfig,
) -> Result<MpcProblemInstance, MpcError> {
    build_problem_with_modes(grid, measured, inputs, config, None)
}

/// As [`build_problem`], with `modes[l][v]` (true = charging) pinning the
/// opposite direction of that VPP at step `l` to zero.
pub fn build_problem_with_modes(
    grid: &GridModel,
    measured: &MeasuredState,
    inputs: &HorizonInputs,
    config: &MpcConfig,
    modes: Option<&[Vec<bool>]>,
) -> Result<MpcProblemInstance, MpcError> {
    let steps = config.horizon_m + 1;
    let (n_gen, n_vpp, n_bus, n_line) = (
        grid.generators.len(),
        grid.vpps.len(),
        grid.buses.len(),
        grid.lines.len(),
    );
    for (what, expected, got) in [
        ("generator outputs", n_gen, measured.gen_mw.len()),
        ("VPP powers", n_vpp, measured.vpp_mw.len()),
        ("VPP SOCs", n_vpp, measured.soc_mwh.len()),
    ] {
        if expected != got {
            return Err(MpcError::Dimension { what, expected, got });
        }
    }
    let got = inputs.net_load_mw.len().min(inputs.gen_ref_mw.len());
    if got < steps {
        return Err(MpcError::ForecastGap { needed: steps, got });
    }
    for row in inputs.net_load_mw.iter().take(steps) {
        if row.len() != n_bus {
            return Err(MpcError::Dimension {
                what: "bus loads",
                expected: n_bus,
                got: row.len(),
            });
        }
    }

    let ix = VarIndex {
        steps,
        n_gen,
        n_vpp,
        n_bus,
        n_line,
    };
    let ts_min = config.ts_s / 60.0;
    let ts_h = config.ts_s / 3600.0;
    let mut clamped = Vec::new();
    let mut clamp = |what: String, v: f64, lo: f64, hi: f64| {
        let c = v.clamp(lo, hi);
        if c != v {
            clamped.push((what, v, c));
        }
        c
    };

    let gen0: Vec<f64> = grid
        .generators
        .iter()
        .zip(&measured.gen_mw)
        .map(|(g, &p)| clamp(format!("gen{}.p_mw", g.id), p, g.p_min_mw, g.p_max_mw))
        .collect();
    let (ch0, dis0): (Vec<f64>, Vec<f64>) = grid
        .vpps
        .iter()
        .zip(&measured.vpp_mw)
        .map(|(a, &p)| {
            let p = clamp(format!("vpp{}.p_mw", a.id), p, -a.p_dis_max_mw, a.p_ch_max_mw);
            (p.max(0.0), (-p).max(0.0))
        })
        .unzip();
    let soc0: Vec<f64> = grid
        .vpps
        .iter()
        .zip(&measured.soc_mwh)
        .map(|(a, &s)| clamp(format!("vpp{}.soc_mwh", a.id), s, a.s_min_mwh, a.s_max_mwh))
        .collect();

    let mut b = QpBuilder::new(ix.n_total());

    // objective
    for l in 0..steps {
        for g in 0..n_gen {
            let c = config.cost(grid, g);
            let r = inputs.gen_ref_mw[l][g];
            let i = ix.pg(l, g);
            b.p.push((i, i, 2.0 * c));
            b.q[i] += -2.0 * c * r;
            b.offset += c * r * r;
        }
        for (v, a) in grid.vpps.iter().enumerate() {
            let cap = a.p_ch_max_mw.max(a.p_dis_max_mw).max(1e-9);
            let w = 2.0 * config.vpp_regularization / cap;
            b.p.push((ix.pch(l, v), ix.pch(l, v), w));
            b.p.push((ix.pdis(l, v), ix.pdis(l, v), w));
            b.q[ix.pch(l, v)] += config.vpp_throughput_cost;
            b.q[ix.pdis(l, v)] += config.vpp_throughput_cost;
        }
        for k in 0..n_line {
            let i = ix.line_slack(l, k);
            b.p.push((i, i, 2.0 * config.slack_quadratic));
            b.q[i] += config.slack_linear;
        }
        for v in 0..n_vpp {
            let i = ix.soc_slack(l, v);
            b.p.push((i, i, 2.0 * config.slack_quadratic));
            b.q[i] += config.slack_linear;
        }
    }

    // bus balance: Σ P_G − Σ (P_ch − P_dis) − Σ_j b_ij·(ψ_i − ψ_j) = net load
    for l in 0..steps {
        for (bi, bus) in grid.buses.iter().enumerate() {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (g, gen) in grid.generators.iter().enumerate() {
                if gen.bus == bus.id {
                    row.push((ix.pg(l, g), 1.0));
                }
            }
            for (v, a) in grid.vpps.iter().enumerate() {
                if a.bus == bus.id {
                    row.push((ix.pch(l, v), -1.0));
                    row.push((ix.pdis(l, v), 1.0));
                }
            }
            for line in &grid.lines {
                let y = line.susceptance_pu;
                let (f, t) = (grid.bus_index(line.from_bus).unwrap(), grid.bus_index(line.to_bus).unwrap());
                if f == bi {
                    row.push((ix.theta(l, f), -y));
                    row.push((ix.theta(l, t), y));
                } else if t == bi {
                    row.push((ix.theta(l, t), -y));
                    row.push((ix.theta(l, f), y));
                }
            }
            b.add_eq(&row, inputs.net_load_mw[l][bi]);
        }
        let s = grid.bus_index(grid.slack_bus).unwrap();
        b.add_eq(&[(ix.theta(l, s), 1.0)], 0.0);
    }

    // |f| ≤ F + σ, σ ≥ 0
    for l in 0..steps {
        for (k, line) in grid.lines.iter().enumerate() {
            let y = line.susceptance_pu;
            let (f, t) = (grid.bus_index(line.from_bus).unwrap(), grid.bus_index(line.to_bus).unwrap());
            let sl = ix.line_slack(l, k);
            let flow = [(ix.theta(l, f), y), (ix.theta(l, t), -y)];
            b.add_range(&[flow[0], flow[1], (sl, -1.0)], f64::NEG_INFINITY, line.flow_limit_mw);
            b.add_range(&[flow[0], flow[1], (sl, 1.0)], -line.flow_limit_mw, f64::INFINITY);
            b.add_range(&[(sl, 1.0)], 0.0, f64::INFINITY);
        }
    }

    // generator boxes and ramps
    for (g, gen) in grid.generators.iter().enumerate() {
        let r = gen.ramp_mw_per_min * ts_min;
        for l in 0..steps {
            b.add_range(&[(ix.pg(l, g), 1.0)], gen.p_min_mw, gen.p_max_mw);
            if l == 0 {
                b.add_range(&[(ix.pg(0, g), 1.0)], gen0[g] - r, gen0[g] + r);
            } else {
                b.add_range(&[(ix.pg(l, g), 1.0), (ix.pg(l - 1, g), -1.0)], -r, r);
            }
        }
    }

    // VPP boxes, ramps, SOC
    let mut soc_rows = vec![vec![0; n_vpp]; steps];
    for (v, a) in grid.vpps.iter().enumerate() {
        let (rc, rd) = (a.ramp_ch_mw_per_min * ts_min, a.ramp_dis_mw_per_min * ts_min);
        let (kc, kd) = soc_step_coefs(a, ts_h);
        let mut cum: Vec<(usize, f64)> = Vec::new();
        for l in 0..steps {
            let charging = modes.map(|m| m[l][v]);
            let ch_hi = if charging == Some(false) { 0.0 } else { a.p_ch_max_mw };
            let dis_hi = if charging == Some(true) { 0.0 } else { a.p_dis_max_mw };
            b.add_range(&[(ix.pch(l, v), 1.0)], 0.0, ch_hi);
            b.add_range(&[(ix.pdis(l, v), 1.0)], 0.0, dis_hi);
            if l == 0 {
                b.add_range(&[(ix.pch(0, v), 1.0)], ch0[v] - rc, ch0[v] + rc);
                b.add_range(&[(ix.pdis(0, v), 1.0)], dis0[v] - rd, dis0[v] + rd);
            } else {
                b.add_range(&[(ix.pch(l, v), 1.0), (ix.pch(l - 1, v), -1.0)], -rc, rc);
                b.add_range(&[(ix.pdis(l, v), 1.0), (ix.pdis(l - 1, v), -1.0)], -rd, rd);
            }
            cum.push((ix.pch(l, v), kc));
            cum.push((ix.pdis(l, v), kd));
            let sl = ix.soc_slack(l, v);
            // σ in MW over one step, so it prices like line slack
            let mut upper = cum.clone();
            upper.push((sl, -ts_h));
            soc_rows[l][v] = b.add_range(&upper, f64::NEG_INFINITY, a.s_max_mwh - soc0[v]);
            let mut lower = cum.clone();
            lower.push((sl, ts_h));
            b.add_range(&lower, a.s_min_mwh - soc0[v], f64::INFINITY);
            b.add_range(&[(sl, 1.0)], 0.0, f64::INFINITY);
        }
        if let Some(targets) = &config.terminal_soc_mwh {
            // w·(S0 + cᵀx − S*)²
            let w = config.terminal_weight;
            let d = soc0[v] - targets[v];
            for &(i, ci) in &cum {
                b.q[i] += 2.0 * w * d * ci;
                for &(j, cj) in &cum {
                    b.p.push((i, j, 2.0 * w * ci * cj));
                }
            }
            b.offset += w * d * d;
        }
    }

    let qp = b.build()?;
    Ok(MpcProblemInstance {
        measured: MeasuredState {
            t_s: measured.t_s,
            gen_mw: gen0,
            vpp_mw: ch0.iter().zip(&dis0).map(|(c, d)| c - d).collect(),
            soc_mwh: soc0,
        },
        inputs: HorizonInputs {
            net_load_mw: inputs.net_load_mw[..steps].to_vec(),
            gen_ref_mw: inputs.gen_ref_mw[..steps].to_vec(),
        },
        index: ix,
        qp,
        soc_rows,
        ts_s: config.ts_s,
        costs: (0..n_gen).map(|g| config.cost(grid, g)).collect(),
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolutionTrajectory {
    pub pg: Vec<Vec<f64>>,
    pub pch: Vec<Vec<f64>>,
    pub pdis: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub flows: Vec<Vec<f64>>,
    /// `[vpp][0..=steps]` from [`soc_rollout`].
    pub soc: Vec<Vec<f64>>,
    pub line_slack: Vec<Vec<f64>>,
    /// MW over one step.
    pub soc_slack: Vec<Vec<f64>>,
    /// `Σ c_G·(P_G − P_G^r)²` without regularization or penalties.
    pub deviation_cost: f64,
    pub objective: f64,
}

impl MpcProblemInstance {
    pub fn trajectory(&self, grid: &GridModel, x: &[f64]) -> MpcSolutionTrajectory {
        let ix = &self.index;
        let grid_steps = 0..ix.steps;
        let take = |f: &dyn Fn(usize, usize) -> usize, n: usize| -> Vec<Vec<f64>> {
            grid_steps.clone().map(|l| (0..n).map(|i| x[f(l, i)]).collect()).collect()
        };
        let pg = take(&|l, i| ix.pg(l, i), ix.n_gen);
        let pch = take(&|l, i| ix.pch(l, i), ix.n_vpp);
        let pdis = take(&|l, i| ix.pdis(l, i), ix.n_vpp);
        let theta: Vec<Vec<f64>> = take(&|l, i| ix.theta(l, i), ix.n_bus)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v / grid.base_mva).collect())
            .collect();
        let line_slack = take(&|l, i| ix.line_slack(l, i), ix.n_line);
        let soc_slack = take(&|l, i| ix.soc_slack(l, i), ix.n_vpp);
        let flows = theta
            .iter()
            .map(|th| {
                grid.lines
                    .iter()
                    .map(|line| {
                        let (f, t) = (
                            grid.bus_index(line.from_bus).unwrap(),
                            grid.bus_index(line.to_bus).unwrap(),
                        );
                        grid.base_mva * line.susceptance_pu * (th[f] - th[t])
                    })
                    .collect()
            })
            .collect();
        let soc = grid
            .vpps
            .iter()
            .enumerate()
            .map(|(v, a)| {
                let c: Vec<f64> = pch.iter().map(|r| r[v]).collect();
                let d: Vec<f64> = pdis.iter().map(|r| r[v]).collect();
                soc_rollout(self.measured.soc_mwh[v], &c, &d, a, self.ts_s)
            })
            .collect();
        let mut deviation_cost = 0.0;
        for (l, row) in pg.iter().enumerate() {
            for (g, p) in row.iter().enumerate() {
                deviation_cost += self.costs[g] * (p - self.inputs.gen_ref_mw[l][g]).powi(2);
            }
        }
        MpcSolutionTrajectory {
            pg,
            pch,
            pdis,
            theta,
            flows,
            soc,
            line_slack,
            soc_slack,
            deviation_cost,
            objective: self.qp.objective(x),
        }
    }

    /// `S[l+1]` as encoded in the assembled QP rows, `[vpp][l]`.
    pub fn qp_soc(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let gx = self.qp.ineq_matrix().mul_vec(x);
        (0..self.index.n_vpp)
            .map(|v| {
                (0..self.index.steps)
                    .map(|l| {
                        let row = self.soc_rows[l][v];
                        self.measured.soc_mwh[v] + gx[row] + self.ts_s / 3600.0 * x[self.index.soc_slack(l, v)]
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintFamily {
    Balance,
    LineLimit,
    GenBox,
    GenRamp,
    VppBox,
    VppRamp,
    SocBound,
    SlackAngle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub family: ConstraintFamily,
    pub step: usize,
    pub element: usize,
    pub amount: f64,
}

/// Re-evaluates every constraint family from the grid data and the
/// trajectory alone. Soft constraints count as violated when their slack is
/// in use.
pub fn check_trajectory(
    grid: &GridModel,
    measured: &MeasuredState,
    inputs: &HorizonInputs,
    ts_s: f64,
    traj: &MpcSolutionTrajectory,
    tol: f64,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |family, step, element, amount: f64| {
        if amount > tol {
            out.push(Violation {
                family,
                step,
                element,
                amount,
            });
        }
    };
    let ts_min = ts_s / 60.0;
    let slack = grid.bus_index(grid.slack_bus).unwrap();
    for l in 0..traj.pg.len() {
        let mut net = vec![0.0; grid.buses.len()];
        for (g, gen) in grid.generators.iter().enumerate() {
            net[grid.bus_index(gen.bus).unwrap()] += traj.pg[l][g];
        }
        for (v, a) in grid.vpps.iter().enumerate() {
            net[grid.bus_index(a.bus).unwrap()] -= traj.pch[l][v] - traj.pdis[l][v];
        }
        for (k, line) in grid.lines.iter().enumerate() {
            let f = base_flow(grid, line.from_bus, line.to_bus, line.susceptance_pu, &traj.theta[l]);
            net[grid.bus_index(line.from_bus).unwrap()] -= f;
            net[grid.bus_index(line.to_bus).unwrap()] += f;
            flag(ConstraintFamily::LineLimit, l, k, f.abs() - line.flow_limit_mw);
        }
        for (i, n) in net.iter().enumerate() {
            flag(ConstraintFamily::Balance, l, i, (n - inputs.net_load_mw[l][i]).abs());
        }
        flag(ConstraintFamily::SlackAngle, l, slack, traj.theta[l][slack].abs());
        for (g, gen) in grid.generators.iter().enumerate() {
            let p = traj.pg[l][g];
            flag(ConstraintFamily::GenBox, l, g, (gen.p_min_mw - p).max(p - gen.p_max_mw));
            let prev = if l == 0 { measured.gen_mw[g] } else { traj.pg[l - 1][g] };
            flag(ConstraintFamily::GenRamp, l, g, (p - prev).abs() - gen.ramp_mw_per_min * ts_min);
        }
        for (v, a) in grid.vpps.iter().enumerate() {
            let (c, d) = (traj.pch[l][v], traj.pdis[l][v]);
            flag(ConstraintFamily::VppBox, l, v, (-c).max(c - a.p_ch_max_mw));
            flag(ConstraintFamily::VppBox, l, v, (-d).max(d - a.p_dis_max_mw));
            let (c0, d0) = if l == 0 {
                (measured.vpp_mw[v].max(0.0), (-measured.vpp_mw[v]).max(0.0))
            } else {
                (traj.pch[l - 1][v], traj.pdis[l - 1][v])
            };
            flag(ConstraintFamily::VppRamp, l, v, (c - c0).abs() - a.ramp_ch_mw_per_min * ts_min);
            flag(ConstraintFamily::VppRamp, l, v, (d - d0).abs() - a.ramp_dis_mw_per_min * ts_min);
            let s = traj.soc[v][l + 1];
            flag(ConstraintFamily::SocBound, l, v, (a.s_min_mwh - s).max(s - a.s_max_mwh));
        }
    }
    out
}

fn base_flow(grid: &GridModel, from: u32, to: u32, b: f64, theta: &[f64]) -> f64 {
    let (f, t) = (grid.bus_index(from).unwrap(), grid.bus_index(to).unwrap());
    grid.base_mva * b * (theta[f] - theta[t])
}

const MODE_TOL_MW: f64 = 1e-6;

/// Set-points for one MPC period.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcCommands {
    pub gen_mw: Vec<f64>,
    /// Consumption positive.
    pub vpp_mw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MpcDiagnostic {
    ClampedMeasurement { what: String, raw: f64, clamped: f64 },
    Infeasible { description: String },
    SolverFailure { iterations: usize },
    Violations(Vec<Violation>),
}

impl std::fmt::Display for MpcDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MpcDiagnostic::ClampedMeasurement { what, raw, clamped } => {
                write!(f, "measurement {what} = {raw} clamped to {clamped}")
            }
            MpcDiagnostic::Infeasible { description } => {
                write!(f, "infeasible instance, holding last commands: {description}")
            }
            MpcDiagnostic::SolverFailure { iterations } => {
                write!(f, "solver stopped after {iterations} iterations, holding last commands")
            }
            MpcDiagnostic::Violations(v) => write!(f, "{} constraint violations in returned trajectory", v.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcStepResult {
    pub commands: MpcCommands,
    pub instance: MpcProblemInstance,
    pub solution: QpSolution,
    /// Present when the solve was optimal.
    pub trajectory: Option<MpcSolutionTrajectory>,
    pub diagnostics: Vec<MpcDiagnostic>,
    pub fell_back: bool,
}

/// Keeps the last applied commands for fallback.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    pub last: Option<MpcCommands>,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Self {
        Self { config, last: None }
    }

    pub fn step(
        &mut self,
        grid: &GridModel,
        measured: &MeasuredState,
        inputs: &HorizonInputs,
    ) -> Result<MpcStepResult, MpcError> {
        let instance = build_problem(grid, measured, inputs, &self.config)?;
        let result = receding_horizon_step(grid, instance, &self.config, self.last.as_ref());
        self.last = Some(result.commands.clone());
        Ok(result)
    }
}

/// Solves the instance and returns its first-step commands. On an infeasible
/// or unconverged solve the previous commands (or the measurement when none
/// exist) are held.
pub fn receding_horizon_step(
    grid: &GridModel,
    instance: MpcProblemInstance,
    config: &MpcConfig,
    last: Option<&MpcCommands>,
) -> MpcStepResult {
    let settings = SolverSettings {
        tol: config.solver_tol,
        max_iter: config.max_iter,
    };
    let mut instance = instance;
    let mut solution = solve(&instance.qp, &settings);
    if config.exclusive_vpp_modes && solution.status == QpStatus::Optimal {
        let ix = instance.index;
        let x = &solution.x;
        let overlap = (0..ix.steps)
            .any(|l| (0..ix.n_vpp).any(|v| x[ix.pch(l, v)].min(x[ix.pdis(l, v)]) > MODE_TOL_MW));
        if overlap {
            let modes: Vec<Vec<bool>> = (0..ix.steps)
                .map(|l| (0..ix.n_vpp).map(|v| x[ix.pch(l, v)] >= x[ix.pdis(l, v)]).collect())
                .collect();
            let fixed = build_problem_with_modes(
                grid,
                &instance.measured,
                &instance.inputs,
                config,
                Some(&modes),
            );
            if let Ok(mut fixed) = fixed {
                let second = solve(&fixed.qp, &settings);
                if second.status == QpStatus::Optimal {
                    fixed.clamped = std::mem::take(&mut instance.clamped);
                    instance = fixed;
                    solution = second;
                }
            }
        }
    }
    let mut diagnostics: Vec<MpcDiagnostic> = instance
        .clamped
        .iter()
        .map(|(w, r, c)| MpcDiagnostic::ClampedMeasurement {
            what: w.clone(),
            raw: *r,
            clamped: *c,
        })
        .collect();
    if solution.status == QpStatus::Optimal {
        let traj = instance.trajectory(grid, &solution.x);
        let violations = check_trajectory(
            grid,
            &instance.measured,
            &instance.inputs,
            instance.ts_s,
            &traj,
            1e-4,
        );
        if !violations.is_empty() {
            diagnostics.push(MpcDiagnostic::Violations(violations));
        }
        let commands = MpcCommands {
            gen_mw: traj.pg[0].clone(),
            vpp_mw: traj.pch[0].iter().zip(&traj.pdis[0]).map(|(c, d)| c - d).collect(),
        };
        return MpcStepResult {
            commands,
            instance,
            solution,
            trajectory: Some(traj),
            diagnostics,
            fell_back: false,
        };
    }
    diagnostics.push(match (&solution.certificate, solution.status) {
        (Some(c), QpStatus::Infeasible) => MpcDiagnostic::Infeasible {
            description: c.description.clone(),
        },
        (None, QpStatus::Infeasible) => MpcDiagnostic::Infeasible {
            description: String::new(),
        },
        _ => MpcDiagnostic::SolverFailure {
            iterations: solution.iterations,
        },
    });
    let commands = last.cloned().unwrap_or_else(|| MpcCommands {
        gen_mw: instance.measured.gen_mw.clone(),
        vpp_mw: instance.measured.vpp_mw.clone(),
    });
    MpcStepResult {
        commands,
        instance,
        solution,
        trajectory: None,
        diagnostics,
        fell_back: true,
    }
}

/// Plain-text dump of an instance and its solution: the QP in the solver's
/// exchange format followed by the trajectory table.
pub fn debug_dump(result: &MpcStepResult) -> String {
    let mut s = dump(&result.instance.qp);
    let _ = writeln!(s, "# t_s {}", result.instance.measured.t_s);
    let _ = writeln!(s, "# status {:?} iterations {}", result.solution.status, result.solution.iterations);
    if let Some(t) = &result.trajectory {
        let _ = writeln!(s, "# step pg... pch... pdis... soc_next...");
        for l in 0..t.pg.len() {
            let mut row = format!("# {l}");
            for v in t.pg[l].iter().chain(&t.pch[l]).chain(&t.pdis[l]) {
                let _ = write!(row, " {v}");
            }
            for soc in &t.soc {
                let _ = write!(row, " {}", soc[l + 1]);
            }
            let _ = writeln!(s, "{row}");
        }
    }
    s
}
