use std::path::PathBuf;

use proptest::prelude::*;
use vppsim_core::dynamics::{
    mean_frequency, step_dynamics, AreaDynState, DynConfig, TwoAreaSystem,
};
use vppsim_core::grid::GridModel;

fn five_bus() -> GridModel {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../networks/five_bus.grid");
    GridModel::load(&path).unwrap()
}

fn setup(grid: &GridModel) -> (TwoAreaSystem, [AreaDynState; 2], [f64; 2]) {
    let sys = TwoAreaSystem::from_grid(grid, DynConfig::default());
    let sched = [
        sys.areas[0].iter().map(|m| grid.generators.iter().find(|g| g.id == m.gen_id).unwrap().p_sched_mw).collect(),
        sys.areas[1].iter().map(|m| grid.generators.iter().find(|g| g.id == m.gen_id).unwrap().p_sched_mw).collect(),
    ];
    let state = sys.equilibrium(&sched);
    let load = |a: u8| -> f64 {
        grid.buses
            .iter()
            .filter(|b| b.area == a)
            .map(|b| b.load_mw - b.renewable_mw)
            .sum()
    };
    (sys, state, [load(1), load(2)])
}

fn run(sys: &TwoAreaSystem, mut s: [AreaDynState; 2], load: [f64; 2], steps: usize) -> Vec<[AreaDynState; 2]> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        s = step_dynamics(sys, &s, load).unwrap();
        out.push(s.clone());
    }
    out
}

#[test]
fn scheduled_dispatch_is_a_fixed_point() {
    let g = five_bus();
    let (sys, s0, load) = setup(&g);
    assert!((sys.scheduled_export_mw + 54.5).abs() < 1e-9);
    let traj = run(&sys, s0.clone(), load, 600);
    let last = traj.last().unwrap();
    for a in 0..2 {
        assert!((last[a].freq_hz - 60.0).abs() < 1e-12);
        assert!(last[a].tie_flow_dev_mw.abs() < 1e-9);
        for (x, y) in last[a].machines.iter().zip(&s0[a].machines) {
            assert!((x.p_mech_mw - y.p_mech_mw).abs() < 1e-9);
        }
    }
}

#[test]
fn droop_steady_state_matches_closed_form() {
    let g = five_bus();
    let (sys, s0, mut load) = setup(&g);
    load[0] += 10.0;
    let traj = run(&sys, s0, load, 3000);
    let last = traj.last().unwrap();

    // Σ S/R + D·Σ S over all machines, from the grid file directly
    let beta: f64 = g
        .generators
        .iter()
        .map(|gen| gen.p_max_mw / gen.droop_pu + 2.0 * gen.p_max_mw)
        .sum();
    let expected_hz = -10.0 / beta * 60.0;
    assert!((expected_hz + 0.0077922).abs() < 1e-6);
    for a in 0..2 {
        let dev = last[a].freq_hz - 60.0;
        assert!((dev - expected_hz).abs() < 0.01 * expected_hz.abs(), "{dev} vs {expected_hz}");
    }
    let f = mean_frequency(&sys, last) - 60.0;
    assert!((f - expected_hz).abs() < 0.01 * expected_hz.abs());

    // the external area's share flows over the tie into area 1
    let area2_share: f64 = 3000.0 / 0.05 + 2.0 * 3000.0;
    let tie_expected = 10.0 * area2_share / beta;
    assert!((last[1].tie_flow_dev_mw - tie_expected).abs() < 0.01 * tie_expected);
}

#[test]
fn more_external_inertia_gives_a_shallower_nadir() {
    let g = five_bus();
    let nadir = |scale: f64| {
        let mut g = g.clone();
        for gen in g.generators.iter_mut().filter(|x| x.bus == 5) {
            gen.inertia_h_s *= scale;
        }
        let (sys, s0, mut load) = setup(&g);
        load[0] += 10.0;
        run(&sys, s0, load, 600)
            .iter()
            .map(|s| s[0].freq_hz)
            .fold(f64::INFINITY, f64::min)
    };
    let (base, heavy) = (nadir(1.0), nadir(10.0));
    assert!(base < 60.0 && heavy < 60.0);
    assert!(heavy > base, "nadir {heavy} should be above {base}");
}

#[test]
fn electrical_outputs_account_for_load_and_interchange() {
    let g = five_bus();
    let (sys, mut s, mut load) = setup(&g);
    load[0] += 25.0;
    for _ in 0..200 {
        let next = step_dynamics(&sys, &s, load).unwrap();
        let pe = sys.electrical_output_mw(&s, &next);
        let export1 = sys.scheduled_export_mw + s[0].tie_flow_dev_mw;
        assert!((pe[0].iter().sum::<f64>() - (load[0] + export1)).abs() < 1e-8);
        assert!((pe[1].iter().sum::<f64>() - (load[1] - export1)).abs() < 1e-8);
        s = next;
    }
}

#[test]
fn diverging_parameters_are_reported() {
    let g = five_bus();
    let (mut sys, s0, mut load) = setup(&g);
    sys.config.tie_stiffness_mw_per_rad = 1e9;
    load[0] += 10.0;
    let mut s = s0;
    let mut failed = false;
    for _ in 0..2000 {
        match step_dynamics(&sys, &s, load) {
            Ok(n) => s = n,
            Err(_) => {
                failed = true;
                break;
            }
        }
    }
    assert!(failed);
}

proptest! {
    #[test]
    fn tie_deviation_stays_antisymmetric(step in -40.0f64..40.0, area in 0usize..2, n in 1usize..400) {
        let g = five_bus();
        let (sys, s0, mut load) = setup(&g);
        load[area] += step;
        let traj = run(&sys, s0, load, n);
        for s in &traj {
            prop_assert_eq!(s[0].tie_flow_dev_mw, -s[1].tie_flow_dev_mw);
        }
    }

    #[test]
    fn frequency_moves_against_load(step in 1.0f64..5.0) {
        let g = five_bus();
        let (sys, s0, mut load) = setup(&g);
        load[0] += step;
        let up = run(&sys, s0.clone(), load, 100);
        load[0] -= 2.0 * step;
        let down = run(&sys, s0, load, 100);
        prop_assert!(up[10][0].freq_hz < 60.0 && down[10][0].freq_hz > 60.0);
        for (a, b) in up.iter().zip(&down) {
            prop_assert!(((a[0].freq_hz - 60.0) + (b[0].freq_hz - 60.0)).abs() < 1e-9, "{} {}", a[0].freq_hz, b[0].freq_hz);
        }
    }
}
