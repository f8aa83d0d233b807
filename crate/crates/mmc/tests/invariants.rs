use std::f64::consts::PI;

use mmc::phasors::{Phasor, SequenceSet};
use mmc::plant::{clamp_halfbridge, ArmCommand, PlantParams};
use mmc::refcalc::{assemble_m, grid_current_ref, is_singular, solve_ac_additive, MethodId};
use mmc::scenario::{holding_setpoints, make_internal_singular, ScenarioSpec, Setpoints};
use mmc::simrunner::{TripCause, TripMonitor};
use proptest::prelude::*;

fn phasor(max: f64) -> impl Strategy<Value = Phasor> {
    (0.0..max, -PI..PI).prop_map(|(m, a)| Phasor::polar(m, a))
}

fn seq(max: f64) -> impl Strategy<Value = SequenceSet> {
    (phasor(max), phasor(max), phasor(max)).prop_map(|(a, b, c)| SequenceSet::new(a, b, c))
}

proptest! {
    #[test]
    fn internal_singular_construction_equalises_differential_voltage(
        u in phasor(1.0), f in phasor(0.5).prop_filter("nonzero", |f| f.mag() > 1e-3)
    ) {
        let s = make_internal_singular(u, f);
        let z = PlantParams::default().z_eq_nominal().phasor();
        let sp = holding_setpoints(f);
        let i = grid_current_ref(sp.p, sp.q, Phasor::new(1.0, 0.0)).unwrap();
        prop_assert!((i - f / z).mag() < 1e-12);
        // U_diff⁺ = U_g⁺ + Z_eq·I, U_diff⁻ = U_g⁻ with no negative current.
        let diff_pos = s.pos + z * i;
        prop_assert!((diff_pos - s.neg).mag() < 1e-12);
    }

    #[test]
    fn scenario_text_round_trips(pre in seq(1.2), fault in seq(1.2),
                                 p in -1.0..1.0f64, q in -1.0..1.0f64,
                                 tf in 0.1..2.0f64, len in 0.1..3.0f64, tail in 0.1..2.0f64) {
        let mut s = ScenarioSpec::new("probe", &pre, &fault, Setpoints { p, q, p_fault: None, q_fault: Some(0.1) });
        s.fault.t_fault = tf;
        s.fault.t_clear = tf + len;
        s.run.duration = tf + len + tail;
        let text = s.to_toml();
        let back = ScenarioSpec::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn clamp_stays_inside_the_stack(cmd in proptest::array::uniform6(-5.0..5.0f64),
                                    avail in proptest::array::uniform6(0.0..4.0f64)) {
        let c = ArmCommand { u_u: [cmd[0], cmd[1], cmd[2]], u_l: [cmd[3], cmd[4], cmd[5]] };
        let a = ArmCommand { u_u: [avail[0], avail[1], avail[2]], u_l: [avail[3], avail[4], avail[5]] };
        let (out, flags) = clamp_halfbridge(c, &a);
        for k in 0..3 {
            prop_assert!(out.u_u[k] >= 0.0 && out.u_u[k] <= a.u_u[k]);
            prop_assert!(out.u_l[k] >= 0.0 && out.u_l[k] <= a.u_l[k]);
            prop_assert_eq!(flags.upper[k], out.u_u[k] != c.u_u[k]);
        }
    }

    #[test]
    fn diff_sum_split_inverts(ud in proptest::array::uniform3(-2.0..2.0f64),
                              us in proptest::array::uniform3(0.0..4.0f64)) {
        let c = ArmCommand::from_diff_sum(ud, us);
        for k in 0..3 {
            prop_assert!((c.u_diff()[k] - ud[k]).abs() < 1e-14);
            prop_assert!((c.u_sum()[k] - us[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn direct_solution_is_linear_in_the_request(u in seq(1.2), i in seq(1.2),
                                               pv in proptest::array::uniform3(-0.5..0.5f64),
                                               k in -3.0..3.0f64) {
        let m = assemble_m(&u, &i, mmc::plant::Z_ARM_NOMINAL, true);
        prop_assume!(!is_singular(&m));
        let (a, _) = solve_ac_additive(MethodId::M4, &m, pv, [0.3; 3], 0.0).unwrap();
        let (b, _) = solve_ac_additive(MethodId::M4, &m, pv.map(|x| k * x), [0.3; 3], 0.0).unwrap();
        for j in 0..3 {
            prop_assert!((b.x[j] - k * a.x[j]).abs() <= 1e-9 * (1.0 + a.x[j].abs() * k.abs()));
        }
    }

    #[test]
    fn monitor_ignores_bounded_currents_and_ripple(
        currents in proptest::collection::vec(proptest::array::uniform6(-1.99..1.99f64), 50),
        ripple in 0.0..0.45f64,
    ) {
        let e = 0.0135;
        let mut m = TripMonitor::new(e, 50e-6, 10);
        for (j, c) in currents.iter().enumerate() {
            let phase = 2.0 * PI * (j % 10) as f64 / 10.0;
            let en = e * (1.0 + ripple * phase.sin());
            let r = m.check([c[0], c[1], c[2]], [c[3], c[4], c[5]], [en; 3], [en; 3]);
            prop_assert_eq!(r, None);
        }
    }

    #[test]
    fn monitor_trips_on_sustained_overcurrent(level in 2.01..10.0f64, arm in 0usize..6) {
        let e = 0.0135;
        let mut m = TripMonitor::new(e, 50e-6, 10);
        let mut cur = [0.0; 6];
        cur[arm] = if arm % 2 == 0 { level } else { -level };
        let mut hit = None;
        for j in 0..25 {
            if let Some(c) = m.check([cur[0], cur[1], cur[2]], [cur[3], cur[4], cur[5]], [e; 3], [e; 3]) {
                hit = Some((j, c));
                break;
            }
        }
        prop_assert_eq!(hit, Some((19, TripCause::Overcurrent)));
    }
}
