use proptest::prelude::*;
use vppsim_core::grid::{VppAsset, VppKind};
use vppsim_core::pem::{DeviceKind, Fleet, PacketKind, PacketRequest, PemDeviceConfig};
use vppsim_core::vpp::{
    available_power, decide_requests, report, step_bulk_battery, AcceptPolicy, PemVpp, Vpp,
    VppState,
};

fn battery(eta: f64, ramp: f64) -> VppAsset {
    VppAsset {
        id: 1,
        bus: 3,
        kind: VppKind::BulkBattery,
        p_ch_max_mw: 50.0,
        p_dis_max_mw: 50.0,
        ramp_ch_mw_per_min: ramp,
        ramp_dis_mw_per_min: ramp,
        s_min_mwh: 0.0,
        s_max_mwh: 45.0,
        eta_ch: eta,
        eta_dis: eta,
        s0_mwh: 22.5,
        agc: true,
        agc_participation: 1.0,
    }
}

fn policy(deadband: f64) -> AcceptPolicy {
    AcceptPolicy {
        packet_mw: 0.005,
        packet_len_s: 300.0,
        deadband_mw: deadband,
        s_min_mwh: 1.0,
        s_max_mwh: 26.0,
        eta_ch: 1.0,
        eta_dis: 1.0,
    }
}

fn charge_requests(n: u32) -> Vec<PacketRequest> {
    (0..n)
        .map(|device| PacketRequest {
            device,
            kind: PacketKind::Charge,
            t_s: 0.0,
        })
        .collect()
}

fn fleet_state(p_ref: f64, soc: f64) -> VppState {
    VppState {
        asset_id: 2,
        p_actual_mw: 0.0,
        p_ref_mw: p_ref,
        soc_mwh: soc,
        pending_requests: Vec::new(),
        mode_counts: [0; 4],
    }
}

#[test]
fn zero_reference_rejects_everything() {
    let d = decide_requests(&fleet_state(0.0, 10.0), &charge_requests(50), &policy(0.0), 1.0);
    assert!(d.iter().all(|g| !g.accepted));
    assert!(d.iter().all(|g| g.decision_time_s == 1.0));
}

#[test]
fn prefix_up_to_the_reference_is_accepted() {
    // 1600 packets of 5 kW = 8 MW requested against a 5 MW reference
    let d = decide_requests(&fleet_state(5.0, 10.0), &charge_requests(1600), &policy(0.0), 0.0);
    let accepted: Vec<bool> = d.iter().map(|g| g.accepted).collect();
    assert!(accepted[..1000].iter().all(|&a| a));
    assert!(accepted[1000..].iter().all(|&a| !a));
}

#[test]
fn full_fleet_rejects_charging() {
    let d = decide_requests(&fleet_state(5.0, 26.0), &charge_requests(10), &policy(0.005), 0.0);
    assert!(d.iter().all(|g| !g.accepted));
}

#[test]
fn battery_soc_arithmetic() {
    let a = battery(0.9, 1e6);
    let mut s = VppState::new(&a);
    s.p_actual_mw = 45.0;
    step_bulk_battery(&mut s, 45.0, 60.0, &a);
    assert!((s.soc_mwh - 23.175).abs() < 1e-12);
    assert_eq!(report(&VppState::new(&a), &a).1, 0.5);

    s.soc_mwh = 45.0;
    step_bulk_battery(&mut s, 10.0, 1.0, &a);
    assert_eq!(s.p_actual_mw, 0.0);
    assert_eq!(report(&s, &a).1, 1.0);
    assert_eq!(available_power(&s, &a), (-50.0, 0.0));
}

#[test]
fn lossless_battery_fills_in_exactly_thirty_minutes() {
    let a = battery(1.0, 1e9);
    let mut s = VppState::new(&a);
    // t_sat = (S̄ − S0)/(η·P) = 22.5/45 h
    let t_sat = ((a.s_max_mwh - a.s0_mwh) / (a.eta_ch * 45.0) * 3600.0).round() as usize;
    assert_eq!(t_sat, 1800);
    for k in 0..t_sat {
        step_bulk_battery(&mut s, 45.0, 1.0, &a);
        assert!(s.p_actual_mw > 44.0, "power cut early at {k}");
    }
    assert!((s.soc_mwh - 45.0).abs() < 1e-9);
    step_bulk_battery(&mut s, 45.0, 1.0, &a);
    assert_eq!(s.p_actual_mw, 0.0);
}

fn ess_fleet(n: usize, seed: u64, rate: f64) -> Fleet {
    let cfg = PemDeviceConfig {
        kind: DeviceKind::Ess,
        rated_power_kw: 5.0,
        packet_len_charge_s: 300.0,
        packet_len_discharge_s: 300.0,
        x_min: 0.5,
        x_max: 13.0,
        setpoint: 6.75,
        request_rate_max_per_s: rate,
        thermal: None,
        eta_ch: 0.95,
        eta_dis: 0.95,
    };
    let x0: Vec<f64> = (0..n).map(|i| 3.0 + 7.0 * i as f64 / n as f64).collect();
    Fleet::new(vec![cfg; n], &x0, seed, 2)
}

fn fleet_asset() -> VppAsset {
    VppAsset {
        id: 2,
        bus: 4,
        kind: VppKind::PemFleet,
        p_ch_max_mw: 5.0,
        p_dis_max_mw: 5.0,
        ramp_ch_mw_per_min: 5.0,
        ramp_dis_mw_per_min: 5.0,
        s_min_mwh: 1.0,
        s_max_mwh: 26.0,
        eta_ch: 0.95,
        eta_dis: 0.95,
        s0_mwh: 13.5,
        agc: true,
        agc_participation: 0.1,
    }
}

#[test]
fn fleet_tracks_its_reference() {
    let asset = fleet_asset();
    let pem = PemVpp::new(ess_fleet(2000, 4, 1.0 / 30.0), &asset, None);
    let mut v = Vpp::pem(asset, pem);
    // 2 MW from a 10 MW fleet with eager devices: enough requests arrive to
    // replace every packet that ends
    let reference = |t: usize| if t < 1800 { 2.0 } else { -2.0 };
    let mut errs = Vec::new();
    for t in 0..3600 {
        v.step(reference(t), t as f64, 1.0).unwrap();
        errs.push(v.state.p_actual_mw - reference(t));
    }
    let pem = v.fleet.as_ref().unwrap();
    let tol = pem.policy.deadband_mw.max(pem.policy.packet_mw) + 1e-9;
    // 5-min windows after each reference settles
    for start in [300usize, 600, 900, 1200, 2100, 2400, 2700, 3000, 3300] {
        let w = &errs[start..start + 300];
        let mean = w.iter().map(|e| e.abs()).sum::<f64>() / 300.0;
        assert!(mean <= tol, "window at {start}: {mean}");
    }
}

#[test]
fn accepted_power_never_exceeds_reference_plus_deadband() {
    let asset = fleet_asset();
    let mut pem = PemVpp::new(ess_fleet(500, 9, 1.0 / 120.0), &asset, None);
    let mut state = VppState::new(&asset);
    for t in 0..1200 {
        let p_ref = 1.0 + (t as f64 / 200.0).sin();
        let d = pem.step(&mut state, p_ref, t as f64, 1.0).unwrap();
        let charged = d.iter().any(|g| g.accepted && g.request.kind == PacketKind::Charge);
        let discharged = d.iter().any(|g| g.accepted && g.request.kind == PacketKind::Discharge);
        // no device is near its bounds, so every change in power comes from
        // packets the aggregator granted
        assert_eq!(state.mode_counts[3], 0);
        if charged {
            assert!(state.p_actual_mw <= p_ref + 0.005 + 0.005 + 1e-9);
        }
        if discharged {
            assert!(state.p_actual_mw >= p_ref - 0.005 - 0.005 - 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn battery_respects_ramp_and_soc_bounds(
        refs in proptest::collection::vec(-80.0f64..80.0, 1..60),
        hold in 1usize..400,
        soc0 in 0.0f64..45.0,
        eta in 0.8f64..1.0,
    ) {
        let a = battery(eta, 20.0);
        let mut s = VppState::new(&a);
        s.soc_mwh = soc0;
        let step_max = 20.0 / 60.0;
        for r in refs {
            for _ in 0..hold {
                let (p0, soc) = (s.p_actual_mw, s.soc_mwh);
                step_bulk_battery(&mut s, r, 1.0, &a);
                prop_assert!(s.soc_mwh >= a.s_min_mwh && s.soc_mwh <= a.s_max_mwh);
                prop_assert!(s.p_actual_mw >= -50.0 && s.p_actual_mw <= 50.0);
                let cut = (s.p_actual_mw > 0.0 && (s.soc_mwh - a.s_max_mwh).abs() < 1e-9)
                    || (s.p_actual_mw < 0.0 && (s.soc_mwh - a.s_min_mwh).abs() < 1e-9)
                    || (s.p_actual_mw == 0.0 && (soc >= a.s_max_mwh - 1e-9 || soc <= a.s_min_mwh + 1e-9))
                    || (p0 != 0.0 && (soc - a.s_max_mwh).abs() < 1e-3 || (soc - a.s_min_mwh).abs() < 1e-3);
                prop_assert!(cut || (s.p_actual_mw - p0).abs() <= step_max + 1e-9,
                    "jump {} -> {} at soc {}", p0, s.p_actual_mw, soc);
            }
        }
    }

    #[test]
    fn decisions_are_a_conservative_prefix(
        p_ref in -3.0f64..3.0,
        p_actual in -3.0f64..3.0,
        kinds in proptest::collection::vec(any::<bool>(), 0..400),
        soc in 1.0f64..26.0,
    ) {
        let mut st = fleet_state(p_ref, soc);
        st.p_actual_mw = p_actual;
        let reqs: Vec<PacketRequest> = kinds
            .iter()
            .enumerate()
            .map(|(i, &c)| PacketRequest {
                device: i as u32,
                kind: if c { PacketKind::Charge } else { PacketKind::Discharge },
                t_s: 0.0,
            })
            .collect();
        let pol = policy(0.005);
        let d = decide_requests(&st, &reqs, &pol, 0.0);
        prop_assert_eq!(d.len(), reqs.len());
        let mut p = p_actual;
        let mut s = soc;
        for g in &d {
            if g.accepted {
                let sign = if g.request.kind == PacketKind::Charge { 1.0 } else { -1.0 };
                p += sign * pol.packet_mw;
                s += sign * pol.packet_mw * 300.0 / 3600.0;
                if sign > 0.0 {
                    prop_assert!(p <= p_ref + pol.deadband_mw + 1e-9);
                } else {
                    prop_assert!(p >= p_ref - pol.deadband_mw - 1e-9);
                }
                prop_assert!(s <= pol.s_max_mwh + 1e-9 && s >= pol.s_min_mwh - 1e-9);
            }
        }
    }
}
