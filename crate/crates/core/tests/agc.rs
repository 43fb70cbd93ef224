use proptest::prelude::*;
use vppsim_core::agc::{
    agc_dispatch, AgcConfig, AgcError, AgcState, ResourceId, ResourceLimits,
};

const G1: ResourceId = ResourceId::Generator(1);
const G2: ResourceId = ResourceId::Generator(2);
const B1: ResourceId = ResourceId::Vpp(1);

fn cfg(part: Vec<(ResourceId, f64)>) -> AgcConfig {
    AgcConfig {
        bias_mw_per_hz: 400.0,
        integral_gain_per_s: 0.02,
        agc_period_s: 4.0,
        participation: part,
    }
}

fn lim(id: ResourceId, lo: f64, hi: f64, ramp: f64) -> ResourceLimits {
    ResourceLimits {
        id,
        base_mw: 0.0,
        p_min_mw: lo,
        p_max_mw: hi,
        ramp_up_mw: ramp,
        ramp_down_mw: ramp,
    }
}

#[test]
fn sustained_error_is_integrated_out() {
    let c = cfg(vec![(G1, 1.0)]);
    let limits = [lim(G1, -500.0, 500.0, 500.0)];
    let mut s = AgcState::default();
    let mut cmd = 0.0;
    // c[k] = c[k-1] − K_I·T·(50 + c[k-1])  ⇒  c[k] = −50·(1 − (1 − K_I·T)^k)
    let r: f64 = 1.0 - 0.02 * 4.0;
    for k in 1..=150 {
        let ace = 50.0 + cmd;
        let out = agc_dispatch(&mut s, ace, &c, &limits).unwrap();
        assert!(out[0].command_mw < cmd);
        cmd = out[0].command_mw;
        let closed = -50.0 * (1.0 - r.powi(k));
        assert!((cmd - closed).abs() < 1e-9, "step {k}: {cmd} vs {closed}");
    }
    assert!((50.0 + cmd).abs() < 0.5);
}

#[test]
fn full_battery_surplus_moves_to_generator() {
    let c = cfg(vec![(G2, 0.0), (B1, 0.9), (ResourceId::Vpp(2), 0.1)]);
    let mut s = AgcState {
        ace_integral_mw_s: 50.0 / 0.02,
        last_commands: vec![(G2, 0.0), (B1, -45.0), (ResourceId::Vpp(2), -5.0)],
    };
    // battery full: no charging allowed
    let limits = [
        lim(G2, -90.0, 120.0, 1e3),
        lim(B1, 0.0, 50.0, 1e3),
        lim(ResourceId::Vpp(2), -5.0, 5.0, 1e3),
    ];
    let out = agc_dispatch(&mut s, 0.0, &c, &limits).unwrap();
    assert_eq!(out[1].command_mw, 0.0);
    assert!((out[1].requested_mw + 45.0).abs() < 1e-9);
    assert!((out[2].command_mw + 5.0).abs() < 1e-9);
    assert!((out[0].command_mw + 45.0).abs() < 1e-9);
}

#[test]
fn ramp_limited_generator_takes_over_across_periods() {
    let c = cfg(vec![(G2, 0.0), (B1, 0.9), (ResourceId::Vpp(2), 0.1)]);
    let mut s = AgcState {
        ace_integral_mw_s: 50.0 / 0.02,
        last_commands: vec![(G2, 0.0), (B1, -45.0), (ResourceId::Vpp(2), -5.0)],
    };
    let limits = [
        lim(G2, -90.0, 120.0, 1.0),
        lim(B1, 0.0, 50.0, 1e3),
        lim(ResourceId::Vpp(2), -5.0, 5.0, 1e3),
    ];
    let mut g2 = Vec::new();
    for _ in 0..60 {
        let out = match agc_dispatch(&mut s, 0.0, &c, &limits) {
            Ok(o) => o,
            Err(AgcError::AllSaturated { commands, .. }) => commands,
            Err(e) => panic!("{e}"),
        };
        g2.push(out[0].command_mw);
    }
    // one ramp step per period until the battery's share is covered
    for (k, w) in g2.windows(2).enumerate().take(40) {
        assert!((w[1] - w[0] + 1.0).abs() < 1e-9, "period {k}: {w:?}");
    }
    assert!((g2[59] + 45.0).abs() < 1e-9);
}

#[test]
fn integral_is_frozen_while_everything_saturates() {
    let c = cfg(vec![(G1, 0.5), (G2, 0.5)]);
    let limits = [lim(G1, -10.0, 10.0, 2.0), lim(G2, -10.0, 10.0, 2.0)];
    let mut s = AgcState::default();
    let mut cmd = 0.0;
    let mut peak = 0.0f64;
    let mut saturated = 0;
    for _ in 0..2000 {
        let ace = 100.0 + cmd;
        let out = match agc_dispatch(&mut s, ace, &c, &limits) {
            Ok(o) => o,
            Err(AgcError::AllSaturated { commands, shortfall_mw }) => {
                saturated += 1;
                assert!(shortfall_mw < 0.0);
                commands
            }
            Err(e) => panic!("{e}"),
        };
        cmd = out.iter().map(|o| o.command_mw).sum();
        peak = peak.max(s.ace_integral_mw_s.abs());
    }
    assert!(saturated > 1900);
    assert!((cmd + 20.0).abs() < 1e-9);
    // the integral stops where the total command first exceeded capacity
    assert!(peak < 20.0 / 0.02 + 100.0 * 4.0);

    // and recovers as soon as the disturbance reverses
    let out = match agc_dispatch(&mut s, -5.0, &c, &limits) {
        Ok(o) => o,
        // ramp-limited on the way back
        Err(AgcError::AllSaturated { commands, shortfall_mw }) if shortfall_mw > 0.0 => commands,
        Err(e) => panic!("{e}"),
    };
    assert!(out.iter().map(|o| o.command_mw).sum::<f64>() > -20.0);
}

#[test]
fn missing_limits_are_reported() {
    let c = cfg(vec![(G1, 1.0)]);
    let err = agc_dispatch(&mut AgcState::default(), 1.0, &c, &[]).unwrap_err();
    assert_eq!(err, AgcError::MissingLimits(G1));
}

fn resources() -> impl Strategy<Value = (Vec<(ResourceId, f64)>, Vec<ResourceLimits>)> {
    proptest::collection::vec((0.0f64..1.0, 1.0f64..80.0, 1.0f64..80.0, 0.5f64..20.0), 1..5).prop_map(
        |v| {
            let w: f64 = v.iter().map(|x| x.0).sum::<f64>().max(1e-9);
            let part = v
                .iter()
                .enumerate()
                .map(|(i, x)| (ResourceId::Generator(i as u32), if w > 1e-9 { x.0 / w } else { 1.0 }))
                .collect();
            let lims = v
                .iter()
                .enumerate()
                .map(|(i, x)| lim(ResourceId::Generator(i as u32), -x.1, x.2, x.3))
                .collect();
            (part, lims)
        },
    )
}

proptest! {
    #[test]
    fn dispatch_respects_windows_and_conserves_the_total(
        (part, lims) in resources(),
        aces in proptest::collection::vec(-200.0f64..200.0, 1..40),
    ) {
        let c = cfg(part);
        let mut s = AgcState::default();
        for ace in aces {
            let before = s.clone();
            let integral = s.ace_integral_mw_s + ace * c.agc_period_s;
            let (out, short) = match agc_dispatch(&mut s, ace, &c, &lims) {
                Ok(o) => (o, 0.0),
                Err(AgcError::AllSaturated { commands, shortfall_mw }) => (commands, shortfall_mw),
                Err(e) => panic!("{e}"),
            };
            for (o, l) in out.iter().zip(&lims) {
                let last = before.last_command(o.id);
                prop_assert!(o.command_mw >= l.p_min_mw - 1e-9 && o.command_mw <= l.p_max_mw + 1e-9);
                let within_ramp = o.command_mw >= last - l.ramp_down_mw - 1e-9
                    && o.command_mw <= last + l.ramp_up_mw + 1e-9;
                let outside_power = last < l.p_min_mw || last > l.p_max_mw;
                prop_assert!(within_ramp || outside_power);
            }
            let sent: f64 = out.iter().map(|o| o.command_mw).sum();
            let total = -c.integral_gain_per_s * integral;
            prop_assert!((sent + short - total).abs() < 1e-6 * (1.0 + total.abs()));
        }
    }

    #[test]
    fn steps_within_capacity_are_regulated(step in -60.0f64..60.0, (part, _) in resources()) {
        let c = cfg(part.clone());
        let lims: Vec<ResourceLimits> = part.iter().map(|p| lim(p.0, -100.0, 100.0, 5.0)).collect();
        let mut s = AgcState::default();
        let mut cmd = 0.0;
        for _ in 0..150 {
            let out = agc_dispatch(&mut s, step + cmd, &c, &lims).unwrap();
            cmd = out.iter().map(|o| o.command_mw).sum();
        }
        prop_assert!((step + cmd).abs() < 0.5);
    }
}
