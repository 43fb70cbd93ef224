use std::path::PathBuf;

use proptest::prelude::*;
use vppsim_core::grid::{GridModel, VppAsset};
use vppsim_core::mpc::{
    build_problem, check_trajectory, receding_horizon_step, soc_rollout, HorizonInputs,
    MeasuredState, MpcConfig, MpcController, MpcDiagnostic,
};

fn five_bus() -> GridModel {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../networks/five_bus.grid");
    GridModel::load(&path).unwrap()
}

/// One bus, one generator (ref 100, cost 1) and one battery.
fn single_bus(gen_ramp: f64, vpp_ramp: f64, s0: f64, s_max: f64, eta: f64) -> GridModel {
    GridModel::from_toml_str(&format!(
        r#"
base_mva = 100.0
slack_bus = 1

[[buses]]
id = 1
area = 1
load_mw = 90.0

[[generators]]
id = 1
bus = 1
p_min_mw = 50.0
p_max_mw = 150.0
p_sched_mw = 100.0
ramp_mw_per_min = {gen_ramp}
droop_pu = 0.05
inertia_h_s = 5.0
deviation_cost = 1.0

[[vpps]]
id = 1
bus = 1
kind = "bulk_battery"
p_ch_max_mw = 50.0
p_dis_max_mw = 50.0
ramp_ch_mw_per_min = {vpp_ramp}
ramp_dis_mw_per_min = {vpp_ramp}
s_min_mwh = 0.0
s_max_mwh = {s_max}
eta_ch = {eta}
eta_dis = {eta}
s0_mwh = {s0}
"#
    ))
    .unwrap()
}

fn cfg(m: usize) -> MpcConfig {
    MpcConfig {
        horizon_m: m,
        ..MpcConfig::default()
    }
}

fn measured(gen: &[f64], vpp: &[f64], soc: &[f64]) -> MeasuredState {
    MeasuredState {
        t_s: 0.0,
        gen_mw: gen.to_vec(),
        vpp_mw: vpp.to_vec(),
        soc_mwh: soc.to_vec(),
    }
}

fn net_loads(grid: &GridModel) -> Vec<f64> {
    grid.buses.iter().map(|b| b.load_at(0.0) - b.renewable_mw).collect()
}

fn refs(grid: &GridModel) -> Vec<f64> {
    grid.generators.iter().map(|g| g.p_sched_mw).collect()
}

fn solve_single(grid: &GridModel, m: usize, meas: &MeasuredState) -> vppsim_core::mpc::MpcStepResult {
    let inputs = HorizonInputs::persistence(&net_loads(grid), &refs(grid), m + 1);
    let inst = build_problem(grid, meas, &inputs, &cfg(m)).unwrap();
    receding_horizon_step(grid, inst, &cfg(m), None)
}

#[test]
fn surplus_goes_into_the_battery() {
    let g = single_bus(100.0, 100.0, 22.5, 45.0, 1.0);
    let r = solve_single(&g, 2, &measured(&[100.0], &[10.0], &[22.5]));
    let t = r.trajectory.unwrap();
    for l in 0..3 {
        assert!((t.pg[l][0] - 100.0).abs() < 1e-3);
        assert!((t.pch[l][0] - t.pdis[l][0] - 10.0).abs() < 1e-3);
    }
    assert!(t.deviation_cost < 1e-5);
    assert!(r.diagnostics.is_empty(), "{:?}", r.diagnostics);
}

#[test]
fn full_battery_leaves_it_to_the_generator() {
    let g = single_bus(100.0, 100.0, 45.0, 45.0, 1.0);
    let r = solve_single(&g, 2, &measured(&[100.0], &[0.0], &[45.0]));
    let t = r.trajectory.unwrap();
    for l in 0..3 {
        assert!((t.pg[l][0] - 90.0).abs() < 1e-3, "{}", t.pg[l][0]);
        assert!(t.pch[l][0].abs() < 1e-3);
    }
    assert!((t.deviation_cost - 3.0 * 100.0).abs() < 0.1);
    assert!(t.soc_slack.iter().flatten().all(|s| *s < 1e-6));
}

#[test]
fn zero_disturbance_keeps_the_schedule() {
    let g = five_bus();
    let soc: Vec<f64> = g.vpps.iter().map(|v| v.s0_mwh).collect();
    let r = solve_single(&g, 30, &measured(&refs(&g), &[0.0, 0.0], &soc));
    assert!(!r.fell_back);
    for (c, s) in r.commands.gen_mw.iter().zip(refs(&g)) {
        assert!((c - s).abs() < 1e-4, "{c} vs {s}");
    }
    for p in &r.commands.vpp_mw {
        assert!(p.abs() < 1e-4);
    }
}

/// Exhaustive search over charging powers on a 0.05 MW grid; P_G follows
/// from the balance.
fn brute_force(grid: &GridModel, gen0: f64, ch0: f64, s0: f64) -> (f64, [f64; 3]) {
    let gen = &grid.generators[0];
    let a = &grid.vpps[0];
    let step = 0.05;
    let vals: Vec<f64> = (0..=240).map(|i| i as f64 * step).collect();
    let mut best = (f64::INFINITY, [0.0; 3]);
    for &p0 in &vals {
        for &p1 in &vals {
            for &p2 in &vals {
                let p = [p0, p1, p2];
                let mut ok = true;
                let (mut g_prev, mut c_prev, mut s) = (gen0, ch0, s0);
                let mut cost = 0.0;
                for &pc in &p {
                    let pg = 90.0 + pc;
                    ok &= (pg - g_prev).abs() <= gen.ramp_mw_per_min + 1e-9;
                    ok &= (pc - c_prev).abs() <= a.ramp_ch_mw_per_min + 1e-9;
                    s += a.eta_ch * pc / 60.0;
                    ok &= s <= a.s_max_mwh + 1e-9;
                    cost += (pg - 100.0).powi(2);
                    g_prev = pg;
                    c_prev = pc;
                }
                if ok && cost < best.0 {
                    best = (cost, p);
                }
            }
        }
    }
    best
}

#[test]
fn binding_ramps_and_energy_match_exhaustive_search() {
    // P_ch[0] ≤ 1 + 3, the 2 MW/min generator ramp caps P_ch[1] at 6 and
    // 0.9·ΣP_ch/60 ≤ 0.25 leaves the rest for the last step
    let g = single_bus(2.0, 3.0, 44.75, 45.0, 0.9);
    let r = solve_single(&g, 2, &measured(&[95.0], &[1.0], &[44.75]));
    let t = r.trajectory.unwrap();
    let (cost, p) = brute_force(&g, 95.0, 1.0, 44.75);
    for l in 0..3 {
        let net = t.pch[l][0] - t.pdis[l][0];
        assert!((net - p[l]).abs() <= 0.05 + 1e-6, "step {l}: {net} vs {}", p[l]);
    }
    assert!(t.deviation_cost <= cost + 1e-6 && t.deviation_cost > cost - 1.0);
    assert!((t.pch[0][0] - 4.0).abs() < 1e-4);
    assert!((t.pch[1][0] - 6.0).abs() < 1e-4);
    assert!((t.pch[2][0] - (0.25 * 60.0 / 0.9 - 10.0)).abs() < 1e-4);
    assert!(t.pdis.iter().flatten().all(|d| *d < 1e-6));
}

#[test]
fn shorter_horizon_gives_same_first_move_when_nothing_binds() {
    let g = five_bus();
    let soc: Vec<f64> = g.vpps.iter().map(|v| v.s0_mwh).collect();
    let mut loads = net_loads(&g);
    loads[2] -= 8.0;
    let meas = measured(&refs(&g), &[0.0, 0.0], &soc);
    let run = |m: usize| {
        let inputs = HorizonInputs::persistence(&loads, &refs(&g), m + 1);
        let inst = build_problem(&g, &meas, &inputs, &cfg(m)).unwrap();
        receding_horizon_step(&g, inst, &cfg(m), None).commands
    };
    let (long, short) = (run(10), run(5));
    for (a, b) in long.gen_mw.iter().chain(&long.vpp_mw).zip(short.gen_mw.iter().chain(&short.vpp_mw)) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

fn battery_asset(eta: f64) -> VppAsset {
    five_bus().vpps[0].clone().with_eta(eta)
}

trait WithEta {
    fn with_eta(self, eta: f64) -> Self;
}
impl WithEta for VppAsset {
    fn with_eta(mut self, eta: f64) -> Self {
        self.eta_ch = eta;
        self.eta_dis = eta;
        self
    }
}

#[test]
fn soc_rollout_examples() {
    let a = battery_asset(1.0);
    let s = soc_rollout(22.5, &[45.0; 30], &[0.0; 30], &a, 60.0);
    assert_eq!(s.len(), 31);
    assert!((s[30] - 45.0).abs() < 1e-9);

    let a = battery_asset(0.9);
    let s = soc_rollout(10.0, &[0.0; 6], &[9.0; 6], &a, 60.0);
    assert!((s[6] - 9.0).abs() < 1e-9);
}

#[test]
fn load_drop_plan_passes_the_independent_checker() {
    let g = five_bus();
    let soc: Vec<f64> = g.vpps.iter().map(|v| v.s0_mwh).collect();
    let mut loads = net_loads(&g);
    loads[2] -= 50.0;
    let meas = measured(&refs(&g), &[0.0, 0.0], &soc);
    let inputs = HorizonInputs::persistence(&loads, &refs(&g), 31);
    let inst = build_problem(&g, &meas, &inputs, &cfg(30)).unwrap();
    assert_eq!(inst.index.n_primary(), (3 + 2 * 2 + 5) * 31);
    let r = receding_horizon_step(&g, inst, &cfg(30), None);
    let t = r.trajectory.as_ref().unwrap();
    let v = check_trajectory(&g, &r.instance.measured, &r.instance.inputs, 60.0, t, 1e-4);
    assert!(v.is_empty(), "{v:?}");
    // the VPPs take the surplus and the generators barely move
    let vpp: f64 = r.commands.vpp_mw.iter().sum();
    assert!(vpp > 20.0, "{vpp}");
    // QP rows and the recursion agree
    let qp_soc = r.instance.qp_soc(&r.solution.x);
    for (v, rows) in qp_soc.iter().enumerate() {
        for (l, s) in rows.iter().enumerate() {
            assert!((s - t.soc[v][l + 1]).abs() < 1e-9);
        }
    }
}

#[test]
fn infeasible_instance_holds_last_commands() {
    // 2 MW/min generator and 1 MW/min battery against a 20 MW surplus
    let g = single_bus(2.0, 1.0, 22.5, 45.0, 1.0);
    let mut ctl = MpcController::new(cfg(2));
    let meas = measured(&[110.0], &[0.0], &[22.5]);
    let inputs = HorizonInputs::persistence(&[90.0], &[100.0], 3);
    let r = ctl.step(&g, &meas, &inputs).unwrap();
    assert!(r.fell_back);
    assert_eq!(r.commands.gen_mw, vec![110.0]);
    assert!(r
        .diagnostics
        .iter()
        .any(|d| matches!(d, MpcDiagnostic::Infeasible { .. } | MpcDiagnostic::SolverFailure { .. })));
}

#[test]
fn out_of_box_measurement_is_clamped_and_reported() {
    let g = single_bus(100.0, 100.0, 22.5, 45.0, 1.0);
    let r = solve_single(&g, 2, &measured(&[160.0], &[0.0], &[46.0]));
    assert!(r.diagnostics.iter().any(|d| matches!(d, MpcDiagnostic::ClampedMeasurement { .. })));
    assert_eq!(r.instance.measured.gen_mw, vec![150.0]);
    assert_eq!(r.instance.measured.soc_mwh, vec![45.0]);
}

#[test]
fn short_forecast_is_rejected() {
    let g = single_bus(100.0, 100.0, 22.5, 45.0, 1.0);
    let inputs = HorizonInputs::persistence(&[90.0], &[100.0], 2);
    let e = build_problem(&g, &measured(&[100.0], &[0.0], &[22.5]), &inputs, &cfg(2)).unwrap_err();
    assert!(e.to_string().contains("3"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn plans_satisfy_constraints_and_soc_rows(
        d3 in -60.0f64..60.0,
        d4 in -30.0f64..30.0,
        soc1 in 0.0f64..45.0,
        soc2 in 1.0f64..26.0,
        p1 in -20.0f64..20.0,
    ) {
        let g = five_bus();
        let mut loads = net_loads(&g);
        loads[2] += d3;
        loads[3] += d4;
        let meas = measured(&refs(&g), &[p1, 0.0], &[soc1, soc2]);
        let inputs = HorizonInputs::persistence(&loads, &refs(&g), 11);
        let inst = build_problem(&g, &meas, &inputs, &cfg(10)).unwrap();
        let r = receding_horizon_step(&g, inst, &cfg(10), None);
        prop_assert!(!r.fell_back, "{:?}", r.diagnostics);
        let t = r.trajectory.as_ref().unwrap();
        let v = check_trajectory(&g, &r.instance.measured, &r.instance.inputs, 60.0, t, 1e-4);
        prop_assert!(v.is_empty(), "{:?}", v);
        let qp_soc = r.instance.qp_soc(&r.solution.x);
        for (v, rows) in qp_soc.iter().enumerate() {
            for (l, s) in rows.iter().enumerate() {
                prop_assert!((s - t.soc[v][l + 1]).abs() < 1e-9);
            }
        }
    }
}

