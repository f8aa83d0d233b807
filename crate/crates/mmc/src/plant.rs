//! Averaged three-phase MMC: six controllable arm voltage sources, each with
//! an aggregated capacitor energy, arm reactors, a grid Thevenin source behind
//! `Z_s`, and a stiff DC bus.
//!
//! Voltages are in pu of the phase RMS base `U_LL/√3`, currents in pu of
//! `S/(3·U_LL/√3)`, powers in pu of the per-phase rating `S/3`, and energies
//! in pu·s on the same power base. The AC neutral floats, so zero-sequence
//! grid current cannot flow.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::phasors::{
    fortescue, Impedance, Phasor, SequenceSet, SlidingMean, SlidingPhasor, ThreePhase,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub s_base_mva: f64,
    /// Line-to-line RMS.
    pub u_g_nom_kv: f64,
    /// Pole to pole.
    pub u_dc_kv: f64,
    pub z_s: Impedance,
    pub z_arm_upper: [Impedance; 3],
    pub z_arm_lower: [Impedance; 3],
    pub n_arm: u32,
    pub c_sm_mf: f64,
    pub f_nom: f64,
}

/// Arm impedance of the reference design, also what the controllers assume.
pub const Z_ARM_NOMINAL: Impedance = Impedance::new(0.01, 0.15);

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            s_base_mva: 1000.0,
            u_g_nom_kv: 325.0,
            u_dc_kv: 640.0,
            z_s: Impedance::new(0.005, 0.18),
            z_arm_upper: [Z_ARM_NOMINAL; 3],
            z_arm_lower: [Z_ARM_NOMINAL; 3],
            n_arm: 433,
            c_sm_mf: 9.5,
            f_nom: 50.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("s_base_mva", self.s_base_mva),
            ("u_g_nom_kv", self.u_g_nom_kv),
            ("u_dc_kv", self.u_dc_kv),
            ("c_sm_mf", self.c_sm_mf),
            ("f_nom", self.f_nom),
            ("n_arm", self.n_arm as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let arms = self.z_arm_upper.iter().chain(&self.z_arm_lower);
        for z in std::iter::once(&self.z_s).chain(arms) {
            if !(z.r >= 0.0 && z.x > 0.0 && z.r.is_finite() && z.x.is_finite()) {
                return Err(Error::Config(format!(
                    "impedance {z:?} needs R ≥ 0 and X > 0"
                )));
            }
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f_nom
    }

    /// Phase RMS voltage base in kV.
    pub fn v_base_kv(&self) -> f64 {
        self.u_g_nom_kv / 3f64.sqrt()
    }

    /// Current base in kA.
    pub fn i_base_ka(&self) -> f64 {
        self.s_base_mva / (3.0 * self.v_base_kv())
    }

    pub fn z_base_ohm(&self) -> f64 {
        self.u_g_nom_kv * self.u_g_nom_kv / self.s_base_mva
    }

    pub fn u_dc(&self) -> f64 {
        self.u_dc_kv / self.v_base_kv()
    }

    /// Aggregated arm capacitance `C_sm/N` in pu·s.
    pub fn c_arm(&self) -> f64 {
        let c_si = self.c_sm_mf * 1e-3 / self.n_arm as f64;
        let v = self.v_base_kv() * 1e3;
        c_si * v * v / (self.s_base_mva * 1e6 / 3.0)
    }

    /// Energy of one arm charged to the full DC voltage.
    pub fn nominal_arm_energy(&self) -> f64 {
        0.5 * self.c_arm() * self.u_dc().powi(2)
    }

    /// Largest voltage an arm can insert with energy `e`.
    pub fn available_voltage(&self, e: f64) -> f64 {
        (2.0 * e.max(0.0) / self.c_arm()).sqrt()
    }

    /// Series impedance seen by the grid current with nominal arms.
    pub fn z_eq_nominal(&self) -> Impedance {
        self.z_s + Z_ARM_NOMINAL.scaled(0.5)
    }

    pub fn with_arm_multipliers(mut self, upper: [f64; 3], lower: [f64; 3]) -> Self {
        for k in 0..3 {
            self.z_arm_upper[k] = Z_ARM_NOMINAL.scaled(upper[k]);
            self.z_arm_lower[k] = Z_ARM_NOMINAL.scaled(lower[k]);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MmcState {
    pub t: f64,
    pub i_s: [f64; 3],
    pub i_sum: [f64; 3],
    pub e_u: [f64; 3],
    pub e_l: [f64; 3],
}

impl MmcState {
    pub fn i_upper(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.i_s[k] / 2.0 + self.i_sum[k])
    }

    pub fn i_lower(&self) -> [f64; 3] {
        std::array::from_fn(|k| -self.i_s[k] / 2.0 + self.i_sum[k])
    }

    pub fn is_finite(&self) -> bool {
        self.i_s
            .iter()
            .chain(&self.i_sum)
            .chain(&self.e_u)
            .chain(&self.e_l)
            .all(|v| v.is_finite())
    }

    fn axpy(&self, h: f64, d: &StateRate) -> MmcState {
        MmcState {
            t: self.t + h,
            i_s: std::array::from_fn(|k| self.i_s[k] + h * d.i_s[k]),
            i_sum: std::array::from_fn(|k| self.i_sum[k] + h * d.i_sum[k]),
            e_u: std::array::from_fn(|k| self.e_u[k] + h * d.e_u[k]),
            e_l: std::array::from_fn(|k| self.e_l[k] + h * d.e_l[k]),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StateRate {
    pub i_s: [f64; 3],
    pub i_sum: [f64; 3],
    pub e_u: [f64; 3],
    pub e_l: [f64; 3],
}

impl StateRate {
    fn combine(k: [&StateRate; 4]) -> StateRate {
        let mix = |f: fn(&StateRate) -> [f64; 3]| -> [f64; 3] {
            std::array::from_fn(|i| {
                (f(k[0])[i] + 2.0 * f(k[1])[i] + 2.0 * f(k[2])[i] + f(k[3])[i]) / 6.0
            })
        };
        StateRate {
            i_s: mix(|r| r.i_s),
            i_sum: mix(|r| r.i_sum),
            e_u: mix(|r| r.e_u),
            e_l: mix(|r| r.e_l),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ArmCommand {
    pub u_u: [f64; 3],
    pub u_l: [f64; 3],
}

impl ArmCommand {
    /// Upper arm `−u_diff + u_sum/2`, lower arm `u_diff + u_sum/2`.
    pub fn from_diff_sum(u_diff: [f64; 3], u_sum: [f64; 3]) -> Self {
        ArmCommand {
            u_u: std::array::from_fn(|k| -u_diff[k] + u_sum[k] / 2.0),
            u_l: std::array::from_fn(|k| u_diff[k] + u_sum[k] / 2.0),
        }
    }

    pub fn u_diff(&self) -> [f64; 3] {
        std::array::from_fn(|k| (self.u_l[k] - self.u_u[k]) / 2.0)
    }

    pub fn u_sum(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.u_u[k] + self.u_l[k])
    }
}

/// Which arms hit a limit in [`clamp_halfbridge`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClampFlags {
    pub upper: [bool; 3],
    pub lower: [bool; 3],
}

impl ClampFlags {
    pub fn any(&self) -> bool {
        self.upper.iter().chain(&self.lower).any(|&f| f)
    }
}

/// Limits every arm to `[0, available]`; a half-bridge stack cannot insert a
/// negative voltage and cannot exceed its capacitor voltage.
pub fn clamp_halfbridge(cmd: ArmCommand, available: &ArmCommand) -> (ArmCommand, ClampFlags) {
    let mut out = cmd;
    let mut flags = ClampFlags::default();
    let clamp = |v: f64, hi: f64, flag: &mut bool| {
        let c = v.clamp(0.0, hi.max(0.0));
        *flag = c != v;
        c
    };
    for k in 0..3 {
        out.u_u[k] = clamp(cmd.u_u[k], available.u_u[k], &mut flags.upper[k]);
        out.u_l[k] = clamp(cmd.u_l[k], available.u_l[k], &mut flags.lower[k]);
    }
    (out, flags)
}

/// Per-arm insertion limit from the stored energies.
pub fn available_voltages(params: &PlantParams, state: &MmcState) -> ArmCommand {
    ArmCommand {
        u_u: state.e_u.map(|e| params.available_voltage(e)),
        u_l: state.e_l.map(|e| params.available_voltage(e)),
    }
}

/// Time derivative of the state for an already clamped command.
///
/// Each phase contributes two loop equations, DC+ pole to neutral through
/// the upper arm and neutral to DC− pole through the lower arm. The floating
/// neutral voltage is whatever keeps the three grid currents summing to zero.
pub fn derivatives(
    params: &PlantParams,
    state: &MmcState,
    cmd: &ArmCommand,
    grid: [f64; 3],
    u_dc: f64,
) -> StateRate {
    let w = params.omega();
    let (ls, rs) = (params.z_s.inductance(w), params.z_s.r);
    let iu = state.i_upper();
    let il = state.i_lower();
    let mut g = [0.0; 3];
    let mut h = [0.0; 3];
    let mut det = [0.0; 3];
    let mut b = [[0.0; 2]; 3];
    for k in 0..3 {
        let zu = params.z_arm_upper[k];
        let zl = params.z_arm_lower[k];
        let (lu, ll) = (zu.inductance(w), zl.inductance(w));
        let drop_s = rs * state.i_s[k] + grid[k];
        let bu = u_dc / 2.0 - cmd.u_u[k] - zu.r * iu[k] - drop_s;
        let bl = u_dc / 2.0 - cmd.u_l[k] - zl.r * il[k] + drop_s;
        det[k] = lu * ll + ls * (lu + ll);
        g[k] = (lu + ll) / det[k];
        h[k] = (ll * bu - lu * bl) / det[k];
        b[k] = [bu, bl];
    }
    let u_n = h.iter().sum::<f64>() / g.iter().sum::<f64>();
    let mut d = StateRate::default();
    for k in 0..3 {
        let lu = params.z_arm_upper[k].inductance(w);
        let ll = params.z_arm_lower[k].inductance(w);
        let [bu, bl] = b[k];
        d.i_s[k] = h[k] - u_n * g[k];
        d.i_sum[k] =
            ((ll + 2.0 * ls) * bu + (lu + 2.0 * ls) * bl - u_n * (ll - lu)) / (2.0 * det[k]);
        d.e_u[k] = cmd.u_u[k] * iu[k];
        d.e_l[k] = cmd.u_l[k] * il[k];
    }
    d
}

/// One classical RK4 step with the command held and the grid source
/// evaluated at the stage times.
pub fn step_rk4(
    params: &PlantParams,
    state: &MmcState,
    cmd: &ArmCommand,
    dt: f64,
    u_dc: f64,
    grid: impl Fn(f64) -> [f64; 3],
) -> MmcState {
    let t = state.t;
    let k1 = derivatives(params, state, cmd, grid(t), u_dc);
    let s2 = state.axpy(dt / 2.0, &k1);
    let k2 = derivatives(params, &s2, cmd, grid(t + dt / 2.0), u_dc);
    let s3 = state.axpy(dt / 2.0, &k2);
    let k3 = derivatives(params, &s3, cmd, grid(t + dt / 2.0), u_dc);
    let s4 = state.axpy(dt, &k3);
    let k4 = derivatives(params, &s4, cmd, grid(t + dt), u_dc);
    let mut next = state.axpy(dt, &StateRate::combine([&k1, &k2, &k3, &k4]));
    // Keep the time grid exact instead of accumulating dt.
    next.t = t + dt;
    next
}

/// Instantaneous quantities the controllers and the trip monitor look at.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Measurement {
    pub i_s: [f64; 3],
    pub i_sum: [f64; 3],
    pub i_u: [f64; 3],
    pub i_l: [f64; 3],
    pub u_diff: [f64; 3],
    pub u_sum: [f64; 3],
    pub e_u: [f64; 3],
    pub e_l: [f64; 3],
    pub e_total: f64,
    pub i_dc: f64,
}

pub fn measure(state: &MmcState, cmd: &ArmCommand) -> Measurement {
    Measurement {
        i_s: state.i_s,
        i_sum: state.i_sum,
        i_u: state.i_upper(),
        i_l: state.i_lower(),
        u_diff: cmd.u_diff(),
        u_sum: cmd.u_sum(),
        e_u: state.e_u,
        e_l: state.e_l,
        e_total: state.e_u.iter().chain(&state.e_l).sum(),
        i_dc: state.i_sum.iter().sum(),
    }
}

/// Windowed view of the converter over the last fundamental period.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowedMeasurement {
    pub u_g: SequenceSet,
    pub i_s: SequenceSet,
    pub u_diff: SequenceSet,
    pub i_sum: SequenceSet,
    pub i_sum_dc: [f64; 3],
    pub i_dc_ac: Phasor,
    pub i_dc_dc: f64,
    /// Mean `u_diff·i_s` per phase, the power each leg hands to the grid.
    pub p_ac: [f64; 3],
    pub e_u: [f64; 3],
    pub e_l: [f64; 3],
}

impl WindowedMeasurement {
    pub fn e_vert(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.e_u[k] - self.e_l[k])
    }

    pub fn e_leg(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.e_u[k] + self.e_l[k])
    }
}

/// Sliding one-period windows over every measured channel.
#[derive(Clone, Debug)]
pub struct Meter {
    u_g: [SlidingPhasor; 3],
    i_s: [SlidingPhasor; 3],
    u_diff: [SlidingPhasor; 3],
    i_sum: [SlidingPhasor; 3],
    i_dc: SlidingPhasor,
    p_ac: [SlidingMean; 3],
    e_u: [SlidingMean; 3],
    e_l: [SlidingMean; 3],
}

/// Waveforms over the period before `t = 0`, used to start the windows
/// already settled.
pub struct History<'a> {
    pub u_g: &'a dyn Fn(usize, f64) -> f64,
    pub i_s: &'a dyn Fn(usize, f64) -> f64,
    pub u_diff: &'a dyn Fn(usize, f64) -> f64,
    pub i_sum: &'a dyn Fn(usize, f64) -> f64,
    pub e_u: [f64; 3],
    pub e_l: [f64; 3],
}

impl Meter {
    pub fn new(n: usize, dt: f64, hist: &History<'_>) -> Self {
        let proto = SlidingPhasor::new(n);
        let bank = |f: &dyn Fn(usize, f64) -> f64| -> [SlidingPhasor; 3] {
            std::array::from_fn(|k| {
                let mut s = proto.sibling();
                s.prefill(dt, |t| f(k, t));
                s
            })
        };
        let mut i_dc = proto.sibling();
        i_dc.prefill(dt, |t| (0..3).map(|k| (hist.i_sum)(k, t)).sum());
        let p_ac = std::array::from_fn(|k| {
            let mut m = SlidingMean::new(n, 0.0);
            for i in 0..n {
                let t = (i as f64 - n as f64) * dt;
                m.push((hist.u_diff)(k, t) * (hist.i_s)(k, t));
            }
            m
        });
        Meter {
            u_g: bank(hist.u_g),
            i_s: bank(hist.i_s),
            u_diff: bank(hist.u_diff),
            i_sum: bank(hist.i_sum),
            i_dc,
            p_ac,
            e_u: hist.e_u.map(|e| SlidingMean::new(n, e)),
            e_l: hist.e_l.map(|e| SlidingMean::new(n, e)),
        }
    }

    /// Adds one sample per channel. `u_diff` is the differential voltage
    /// actually inserted over the step that produced `m`.
    pub fn push(&mut self, m: &Measurement, u_g: [f64; 3], u_diff: [f64; 3]) {
        for k in 0..3 {
            self.u_g[k].push(u_g[k]);
            self.i_s[k].push(m.i_s[k]);
            self.u_diff[k].push(u_diff[k]);
            self.i_sum[k].push(m.i_sum[k]);
            self.p_ac[k].push(u_diff[k] * m.i_s[k]);
            self.e_u[k].push(m.e_u[k]);
            self.e_l[k].push(m.e_l[k]);
        }
        self.i_dc.push(m.i_dc);
    }

    pub fn snapshot(&self) -> WindowedMeasurement {
        let seq = |w: &[SlidingPhasor; 3]| {
            fortescue(ThreePhase::new(w[0].phasor(), w[1].phasor(), w[2].phasor()))
        };
        WindowedMeasurement {
            u_g: seq(&self.u_g),
            i_s: seq(&self.i_s),
            u_diff: seq(&self.u_diff),
            i_sum: seq(&self.i_sum),
            i_sum_dc: std::array::from_fn(|k| self.i_sum[k].mean()),
            i_dc_ac: self.i_dc.phasor(),
            i_dc_dc: self.i_dc.mean(),
            p_ac: std::array::from_fn(|k| self.p_ac[k].mean()),
            e_u: std::array::from_fn(|k| self.e_u[k].mean()),
            e_l: std::array::from_fn(|k| self.e_l[k].mean()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasors::{synthesize, PHASE_SHIFT};
    use approx::assert_relative_eq;

    #[test]
    fn per_unit_bases() {
        let p = PlantParams::default();
        assert_relative_eq!(p.v_base_kv(), 187.638, epsilon = 1e-3);
        assert_relative_eq!(p.i_base_ka(), 1.7765, epsilon = 1e-4);
        assert_relative_eq!(p.z_base_ohm(), 105.625, epsilon = 1e-9);
        assert_relative_eq!(p.u_dc(), 3.41081, epsilon = 1e-5);
        // ½·(9.5 mF/433)·(640 kV)² over a 333.3 MW base.
        let e_si = 0.5 * 9.5e-3 / 433.0 * 640e3f64.powi(2);
        assert_relative_eq!(
            p.nominal_arm_energy(),
            e_si / (1e9 / 3.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            p.available_voltage(p.nominal_arm_energy()),
            p.u_dc(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = PlantParams::default();
        p.n_arm = 0;
        assert!(p.validate().is_err());
        let mut p = PlantParams::default();
        p.z_arm_lower[1].r = -0.1;
        assert!(p.validate().is_err());
        assert!(PlantParams::default().validate().is_ok());
    }

    #[test]
    fn zero_everything_is_stationary() {
        let p = PlantParams::default();
        let d = derivatives(
            &p,
            &MmcState::default(),
            &ArmCommand::default(),
            [0.0; 3],
            0.0,
        );
        assert_eq!(d, StateRate::default());
    }

    #[test]
    fn clamp_contract() {
        let avail = ArmCommand {
            u_u: [3.0; 3],
            u_l: [3.0; 3],
        };
        let mut cmd = ArmCommand {
            u_u: [1.0; 3],
            u_l: [2.0; 3],
        };
        let (out, f) = clamp_halfbridge(cmd, &avail);
        assert_eq!(out, cmd);
        assert!(!f.any());
        cmd.u_u[1] = -0.02;
        cmd.u_l[2] = 3.6;
        let (out, f) = clamp_halfbridge(cmd, &avail);
        assert_eq!(out.u_u[1], 0.0);
        assert_eq!(out.u_l[2], 3.0);
        assert!(f.upper[1] && f.lower[2]);
        assert_eq!(f.upper.iter().chain(&f.lower).filter(|&&x| x).count(), 2);
    }

    #[test]
    fn arm_currents_reconstruct() {
        let s = MmcState {
            i_s: [0.3, -0.1, -0.2],
            i_sum: [0.25, 0.3, 0.1],
            ..Default::default()
        };
        for k in 0..3 {
            assert!((s.i_upper()[k] - s.i_lower()[k] - s.i_s[k]).abs() < 1e-15);
            assert!(((s.i_upper()[k] + s.i_lower()[k]) / 2.0 - s.i_sum[k]).abs() < 1e-15);
        }
    }

    /// Injects the phasor steady state of a balanced operating point and
    /// checks the model's derivative equals the analytic one.
    #[test]
    fn phasor_steady_state_is_a_solution() {
        let p = PlantParams::default();
        let w = p.omega();
        let ug = Phasor::new(1.0, 0.0);
        let is = Phasor::polar_deg(1.0, 18.19);
        let udiff = ug + p.z_eq_nominal().phasor() * is;
        let idc = (udiff * is.conj()).re / p.u_dc();
        let usum = p.u_dc() - 2.0 * Z_ARM_NOMINAL.r * idc;
        for n in 0..40 {
            let t = n as f64 * 0.5e-3;
            let mut st = MmcState {
                t,
                ..Default::default()
            };
            let mut grid = [0.0; 3];
            let mut diff = [0.0; 3];
            for k in 0..3 {
                st.i_s[k] = synthesize(is, w, t, PHASE_SHIFT[k]);
                st.i_sum[k] = idc;
                st.e_u[k] = 0.01;
                st.e_l[k] = 0.01;
                grid[k] = synthesize(ug, w, t, PHASE_SHIFT[k]);
                diff[k] = synthesize(udiff, w, t, PHASE_SHIFT[k]);
            }
            let cmd = ArmCommand::from_diff_sum(diff, [usum; 3]);
            let d = derivatives(&p, &st, &cmd, grid, p.u_dc());
            for k in 0..3 {
                let exact = synthesize(is * Phasor::new(0.0, w), w, t, PHASE_SHIFT[k]);
                assert!(
                    (d.i_s[k] - exact).abs() < 1e-6,
                    "phase {k}: {} vs {exact}",
                    d.i_s[k]
                );
                assert!(d.i_sum[k].abs() < 1e-6);
                assert_eq!(d.e_u[k], cmd.u_u[k] * st.i_upper()[k]);
                assert_eq!(d.e_l[k], cmd.u_l[k] * st.i_lower()[k]);
            }
        }
    }

    #[test]
    fn grid_currents_stay_zero_sequence_free() {
        let p =
            PlantParams::default().with_arm_multipliers([0.95, 0.99, 1.02], [1.03, 1.015, 1.025]);
        let st = MmcState {
            i_s: [0.5, -0.2, -0.3],
            i_sum: [0.3, 0.2, 0.1],
            e_u: [0.01; 3],
            e_l: [0.01; 3],
            t: 0.0,
        };
        let cmd = ArmCommand {
            u_u: [1.0, 2.0, 0.5],
            u_l: [2.5, 0.7, 1.9],
        };
        let d = derivatives(&p, &st, &cmd, [0.8, -0.3, -0.5], p.u_dc());
        assert!(
            d.i_s.iter().sum::<f64>().abs() < 1e-9 * d.i_s.iter().map(|v| v.abs()).sum::<f64>()
        );
    }
}
