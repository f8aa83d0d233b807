//! Closed-loop controllers: grid current, additive current, and the six
//! energy loops with their notch filters.
//!
//! Both current loops work on instantaneous signals. Each has a proportional
//! path and integrators in the positive- and negative-sequence rotating
//! frames (the additive loop adds a DC integrator per phase), so sinusoidal
//! references of either sequence are tracked without a steady-state error.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::phasors::{synthesize, Impedance, SequenceSet, PHASE_SHIFT};
use crate::refcalc::{AdditiveCurrentRefs, PowerTargets};

/// Closed-loop bandwidths in rad/s.
pub const GRID_CURRENT_BW: f64 = 500.0;
pub const ADDITIVE_CURRENT_BW: f64 = 300.0;
pub const ENERGY_BW: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiState {
    pub kp: f64,
    pub ki: f64,
    pub integrator: f64,
    pub lo: f64,
    pub hi: f64,
    pub saturated: bool,
}

impl PiState {
    pub fn new(kp: f64, ki: f64) -> Self {
        PiState::with_limits(kp, ki, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn with_limits(kp: f64, ki: f64, lo: f64, hi: f64) -> Self {
        PiState {
            kp,
            ki,
            integrator: 0.0,
            lo,
            hi,
            saturated: false,
        }
    }

    /// The integrator only runs while the previous output was inside limits.
    pub fn update(&mut self, error: f64, dt: f64) -> f64 {
        if !self.saturated {
            self.integrator += self.ki * error * dt;
        }
        let raw = self.kp * error + self.integrator;
        let out = raw.clamp(self.lo, self.hi);
        self.saturated = out != raw;
        out
    }

    pub fn reset(&mut self) {
        self.integrator = 0.0;
        self.saturated = false;
    }
}

/// Discrete notch biquad (bilinear transform of `(s² + ω₀²)/(s² + Bs + ω₀²)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NotchState {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl NotchState {
    pub fn new(center_hz: f64, bandwidth_hz: f64, dt: f64) -> Self {
        let w0 = 2.0 * PI * center_hz * dt;
        let q = center_hz / bandwidth_hz;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha;
        NotchState {
            center_hz,
            bandwidth_hz,
            b: [1.0 / a0, -2.0 * cw / a0, 1.0 / a0],
            a: [-2.0 * cw / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    /// Transposed direct form II.
    pub fn filter(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }

    /// Magnitude of the pole pair.
    pub fn pole_radius(&self) -> f64 {
        self.a[1].abs().sqrt()
    }

    /// `|H(e^{jωdt})|` at frequency `f`.
    pub fn gain(&self, f: f64, dt: f64) -> f64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * f * dt);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        (num / den).norm()
    }

    /// Starts the filter settled at a constant input.
    pub fn settle_at(&mut self, x: f64) {
        // At rest y = x, so z0 = x − b0·x and z1 = b2·x − a1·x.
        self.z[1] = self.b[2] * x - self.a[1] * x;
        self.z[0] = x - self.b[0] * x;
    }
}

/// 50 Hz then 100 Hz notch on one signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NotchPair {
    pub first: NotchState,
    pub second: NotchState,
}

impl NotchPair {
    pub fn new(f_nom: f64, bandwidth_hz: f64, dt: f64) -> Self {
        NotchPair {
            first: NotchState::new(f_nom, bandwidth_hz, dt),
            second: NotchState::new(2.0 * f_nom, bandwidth_hz, dt),
        }
    }

    pub fn filter(&mut self, x: f64) -> f64 {
        self.second.filter(self.first.filter(x))
    }

    pub fn settle_at(&mut self, x: f64) {
        self.first.settle_at(x);
        self.second.settle_at(x);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyRefs {
    pub e_total: f64,
    pub e_ab: f64,
    pub e_ac: f64,
    pub e_vert: [f64; 3],
}

impl EnergyRefs {
    /// All six arms at `e_arm`, no differences.
    pub fn uniform(e_arm: f64) -> Self {
        EnergyRefs {
            e_total: 6.0 * e_arm,
            e_ab: 0.0,
            e_ac: 0.0,
            e_vert: [0.0; 3],
        }
    }
}

/// Six PI loops on energy errors, each followed by a 50/100 Hz notch pair.
#[derive(Clone, Debug)]
pub struct EnergyController {
    pub total: PiState,
    pub ab: PiState,
    pub ac: PiState,
    pub vert: [PiState; 3],
    notches: [NotchPair; 6],
}

impl EnergyController {
    /// First-order target against the integrating plant `dE/dt = P`:
    /// `kp = ω`, with the integral zero a decade below at `ω/10`.
    pub fn new(bandwidth: f64, f_nom: f64, dt: f64) -> Self {
        let pi = PiState::new(bandwidth, bandwidth * bandwidth / 10.0);
        EnergyController {
            total: pi,
            ab: pi,
            ac: pi,
            vert: [pi; 3],
            notches: [NotchPair::new(f_nom, 10.0, dt); 6],
        }
    }

    /// Energy loops on the six arm energies. Positive `p_total` charges the
    /// converter; positive `p_vert` moves energy into the upper arm.
    pub fn energy_loops(
        &mut self,
        e_u: [f64; 3],
        e_l: [f64; 3],
        refs: &EnergyRefs,
        dt: f64,
    ) -> PowerTargets {
        let leg: [f64; 3] = std::array::from_fn(|k| e_u[k] + e_l[k]);
        let total: f64 = leg.iter().sum();
        let raw = [
            self.total.update(refs.e_total - total, dt),
            // Too much energy in leg a relative to b means less DC power into a.
            self.ab.update(refs.e_ab - (leg[0] - leg[1]), dt),
            self.ac.update(refs.e_ac - (leg[0] - leg[2]), dt),
            self.vert[0].update(refs.e_vert[0] - (e_u[0] - e_l[0]), dt),
            self.vert[1].update(refs.e_vert[1] - (e_u[1] - e_l[1]), dt),
            self.vert[2].update(refs.e_vert[2] - (e_u[2] - e_l[2]), dt),
        ];
        let f: [f64; 6] = std::array::from_fn(|i| self.notches[i].filter(raw[i]));
        PowerTargets {
            p_total: f[0],
            p_ab: f[1],
            p_ac: f[2],
            p_vert: [f[3], f[4], f[5]],
        }
    }
}

/// Proportional gain plus integrators in the positive and negative rotating
/// frames, acting on a complex space vector.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DualFramePi {
    pub kp: f64,
    pub ki: f64,
    pub pos: Complex64,
    pub neg: Complex64,
}

impl DualFramePi {
    pub fn new(kp: f64, ki: f64) -> Self {
        DualFramePi {
            kp,
            ki,
            ..Default::default()
        }
    }

    pub fn update(&mut self, e: Complex64, wt: f64, dt: f64) -> Complex64 {
        let rot = Complex64::from_polar(1.0, wt);
        self.pos += self.ki * dt * e * rot.conj();
        self.neg += self.ki * dt * e * rot;
        self.kp * e + self.pos * rot + self.neg * rot.conj()
    }
}

/// Amplitude-invariant Clarke transform to a complex space vector.
pub fn clarke(x: [f64; 3]) -> Complex64 {
    let a = Complex64::from_polar(1.0, 2.0 * PI / 3.0);
    (x[0] + a * x[1] + a * a * x[2]) * (2.0 / 3.0)
}

/// Inverse Clarke, zero-sequence free.
pub fn inverse_clarke(v: Complex64) -> [f64; 3] {
    let a = Complex64::from_polar(1.0, 2.0 * PI / 3.0);
    [v.re, (v * a * a).re, (v * a).re]
}

/// Instantaneous three-phase waveforms of a sequence set at angle `ωt`.
pub fn sequence_waveforms(seq: &SequenceSet, omega: f64, t: f64) -> [f64; 3] {
    std::array::from_fn(|k| {
        synthesize(seq.pos, omega, t, PHASE_SHIFT[k])
            + synthesize(seq.neg, omega, t, -PHASE_SHIFT[k])
    })
}

/// Grid current tracking with grid-voltage and impedance feedforward.
#[derive(Clone, Copy, Debug)]
pub struct GridCurrentController {
    pub z_eq: Impedance,
    pub omega: f64,
    pub pi: DualFramePi,
}

impl GridCurrentController {
    pub fn new(z_eq: Impedance, omega: f64) -> Self {
        let kp = GRID_CURRENT_BW * z_eq.inductance(omega);
        GridCurrentController {
            z_eq,
            omega,
            pi: DualFramePi::new(kp, kp * GRID_CURRENT_BW / 10.0),
        }
    }

    /// Differential voltage command. `i_ref` is the current reference set
    /// (negative sequence normally zero) and `u_g` the measured instantaneous
    /// grid voltages.
    pub fn grid_current_loop(
        &mut self,
        i_s: [f64; 3],
        i_ref: &SequenceSet,
        u_g: [f64; 3],
        t: f64,
        dt: f64,
    ) -> [f64; 3] {
        let wt = self.omega * t;
        let reference = sequence_waveforms(i_ref, self.omega, t);
        // Voltage across Z_eq needed for the reference, written per sequence.
        let drop = SequenceSet::new(
            self.z_eq.phasor() * i_ref.pos,
            self.z_eq.phasor() * i_ref.neg,
            crate::phasors::Phasor::ZERO,
        );
        let ff = sequence_waveforms(&drop, self.omega, t);
        let e = clarke(reference) - clarke(i_s);
        let fb = inverse_clarke(self.pi.update(e, wt, dt));
        std::array::from_fn(|k| u_g[k] + ff[k] + fb[k])
    }
}

/// Additive current tracking: per-phase DC integrator plus dual-frame
/// integrators for the AC sequences and a zero-sequence AC integrator.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveCurrentController {
    pub z_arm: Impedance,
    pub omega: f64,
    pub kp: f64,
    pub ki: f64,
    pub dc: [f64; 3],
    pub ac: DualFramePi,
    pub zero: Complex64,
}

impl AdditiveCurrentController {
    /// Tuned against `2·Z_arm`, the impedance the additive voltage drives.
    pub fn new(z_arm: Impedance, omega: f64) -> Self {
        let kp = ADDITIVE_CURRENT_BW * 2.0 * z_arm.inductance(omega);
        let ki = kp * ADDITIVE_CURRENT_BW / 10.0;
        AdditiveCurrentController {
            z_arm,
            omega,
            kp,
            ki,
            dc: [0.0; 3],
            ac: DualFramePi::new(kp, ki),
            zero: Complex64::default(),
        }
    }

    /// Additive voltage command `u_sum` per phase.
    pub fn additive_current_loop(
        &mut self,
        i_sum: [f64; 3],
        refs: &AdditiveCurrentRefs,
        u_dc: f64,
        t: f64,
        dt: f64,
    ) -> [f64; 3] {
        let wt = self.omega * t;
        let ac_ref = refs.ac();
        let reference: [f64; 3] = {
            let w = sequence_waveforms(&ac_ref, self.omega, t);
            std::array::from_fn(|k| refs.i_dc[k] + w[k])
        };
        let drop = SequenceSet::new(
            self.z_arm.phasor() * ac_ref.pos * 2.0,
            self.z_arm.phasor() * ac_ref.neg * 2.0,
            crate::phasors::Phasor::ZERO,
        );
        let ff_ac = sequence_waveforms(&drop, self.omega, t);
        let e: [f64; 3] = std::array::from_fn(|k| reference[k] - i_sum[k]);
        let e0 = (e[0] + e[1] + e[2]) / 3.0;
        let rot = Complex64::from_polar(1.0, wt);
        self.zero += self.ki * dt * e0 * rot.conj();
        let zero_fb = 2.0 * (self.zero * rot).re;
        // The proportional path sits in the dual-frame part; only the
        // zero-sequence integrators are added on top of it.
        let ac_fb = inverse_clarke(self.ac.update(clarke(e), wt, dt));
        std::array::from_fn(|k| {
            self.dc[k] += self.ki * dt * e[k];
            let fb = ac_fb[k] + self.kp * e0 + zero_fb + self.dc[k];
            u_dc - 2.0 * self.z_arm.r * refs.i_dc[k] - ff_ac[k] - fb
        })
    }
}

/// Arm commands from the loop outputs, with `U_diff0DC` taken from the
/// upper arms and added to the lower arms.
pub fn arm_commands(u_diff: [f64; 3], u_sum: [f64; 3], u0dc: f64) -> crate::plant::ArmCommand {
    let mut cmd = crate::plant::ArmCommand::from_diff_sum(u_diff, u_sum);
    for k in 0..3 {
        cmd.u_u[k] -= u0dc;
        cmd.u_l[k] += u0dc;
    }
    cmd
}
