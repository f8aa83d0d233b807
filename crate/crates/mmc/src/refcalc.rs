//! Current references: grid current, DC additive currents, the DC
//! zero-sequence differential voltage `U_diff0DC`, and the AC additive
//! currents that move energy between the upper and lower arm of each leg.
//!
//! The vertical power of leg `k` is the mean of `p_u − p_l`,
//!
//! ```text
//! P_u→l = −2·Re(U_diff·conj(I_sum)) + ½·Re(U_sum·conj(I_s)) − 2·U_diff0DC·I_dc
//! ```
//!
//! evaluated with the per-phase phasors of each quantity. Cancelling the AC
//! part of `u_sum` against the arm impedance (`U_sum = −2·Z_arm·I_sum`) and
//! forcing the positive additive current to be in phase with the reference
//! (`sin φ_sum⁺ = 0`) leaves three unknowns and the 3×3 system `M·x = P`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::phasors::{Impedance, Phasor, SequenceSet, PHASE_SHIFT, TWO_PI_3};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Grid voltage guard for the current reference.
pub const EPS_V: f64 = 0.01;
/// Mean DC additive current guard for `U_diff0DC`.
pub const EPS_I: f64 = 1e-3;
/// Saturation of the commanded `U_diff0DC`.
pub const U0DC_SAT: f64 = 0.1;
/// Relative determinant threshold for declaring `M` singular.
pub const SINGULAR_DELTA: f64 = 1e-6;
/// Relative singular value cut for the truncated pseudoinverse.
pub const PINV_RTOL: f64 = 1e-6;

/// The five reference-calculation methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    /// Grid voltage sequences, direct inverse, no `U_diff0DC`.
    M0,
    /// Grid voltage sequences, truncated pseudoinverse, `U_diff0DC`.
    M1,
    /// Differential voltage sequences, direct inverse, `U_diff0DC`.
    M2,
    /// Differential voltage sequences, truncated pseudoinverse, `U_diff0DC`.
    M3,
    /// Differential voltage sequences with the arm impedance terms, direct inverse, `U_diff0DC`.
    M4,
}

impl MethodId {
    pub const ALL: [MethodId; 5] = [
        MethodId::M0,
        MethodId::M1,
        MethodId::M2,
        MethodId::M3,
        MethodId::M4,
    ];

    pub fn voltage_source(self) -> VoltageSource {
        match self {
            MethodId::M0 | MethodId::M1 => VoltageSource::Grid,
            _ => VoltageSource::Differential,
        }
    }

    pub fn includes_zarm(self) -> bool {
        self == MethodId::M4
    }

    pub fn uses_pinv(self) -> bool {
        matches!(self, MethodId::M1 | MethodId::M3)
    }

    pub fn uses_u0dc(self) -> bool {
        self != MethodId::M0
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::M0 => "M0",
            MethodId::M1 => "M1",
            MethodId::M2 => "M2",
            MethodId::M3 => "M3",
            MethodId::M4 => "M4",
        }
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`, expected M0..M4")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoltageSource {
    Grid,
    Differential,
}

/// Outputs of the energy controllers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PowerTargets {
    pub p_vert: [f64; 3],
    pub p_total: f64,
    pub p_ab: f64,
    pub p_ac: f64,
}

impl PowerTargets {
    pub fn is_finite(&self) -> bool {
        self.p_vert.iter().all(|v| v.is_finite())
            && self.p_total.is_finite()
            && self.p_ab.is_finite()
            && self.p_ac.is_finite()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdditiveCurrentRefs {
    pub i_sum_pos: Phasor,
    pub i_sum_neg: Phasor,
    pub i_dc: [f64; 3],
    /// `[I⁻cos φ⁻, I⁻sin φ⁻, I⁺cos φ⁺]`.
    pub x: [f64; 3],
}

impl AdditiveCurrentRefs {
    pub fn from_solution(x: Vec3, i_dc: [f64; 3]) -> Self {
        AdditiveCurrentRefs {
            i_sum_neg: Phasor::new(x[0], x[1]),
            // A real phasor: angle 0 for x₃ ≥ 0 and π otherwise.
            i_sum_pos: Phasor::new(x[2], 0.0),
            i_dc,
            x: [x[0], x[1], x[2]],
        }
    }

    pub fn ac(&self) -> SequenceSet {
        SequenceSet::new(self.i_sum_pos, self.i_sum_neg, Phasor::ZERO)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveDiagnostics {
    pub det_m: f64,
    /// 2-norm condition number of `M`.
    pub condition: f64,
    pub singular_flag: bool,
    pub method_used: MethodId,
    pub pseudoinverse_used: bool,
    /// Rank kept by the pseudoinverse (3 on the direct path).
    pub rank: usize,
}

/// Positive-sequence grid current for power setpoints `(P, Q)` at the
/// measured positive-sequence voltage. `P` and `Q` are on the converter
/// rating, so `|I| = |S|/|U|`. The negative-sequence reference is zero.
pub fn grid_current_ref(p_set: f64, q_set: f64, u_g_pos: Phasor) -> Result<Phasor, Error> {
    if !(u_g_pos.mag() > EPS_V) {
        return Err(Error::VoltageTooLow(u_g_pos.mag()));
    }
    Ok((Phasor::new(p_set, q_set) / u_g_pos).conj())
}

/// Splits total and horizontal leg powers into per-phase DC currents.
pub fn dc_additive_refs(p_total: f64, p_ab: f64, p_ac: f64, u_dc: f64) -> Result<[f64; 3], Error> {
    if !(u_dc > 0.0) {
        return Err(Error::Config(format!("u_dc must be positive, got {u_dc}")));
    }
    let pa = (p_total + p_ab + p_ac) / 3.0;
    Ok([pa / u_dc, (pa - p_ab) / u_dc, (pa - p_ac) / u_dc])
}

/// Zero-sequence DC differential voltage that would carry the whole
/// requested vertical power through the DC additive currents.
pub fn compute_udiff0dc(p_vert: [f64; 3], i_dc: [f64; 3]) -> Result<f64, Error> {
    let i0 = i_dc.iter().sum::<f64>() / 3.0;
    if !(i0.abs() > EPS_I) {
        return Err(Error::CurrentTooLow(i0));
    }
    Ok(p_vert.iter().sum::<f64>() / (3.0 * i0))
}

/// PI with output clamp; the integrator holds while the output is clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Udiff0dcRegulator {
    pub kp: f64,
    pub ki: f64,
    pub limit: f64,
    pub integrator: f64,
    pub saturated: bool,
}

impl Default for Udiff0dcRegulator {
    fn default() -> Self {
        Udiff0dcRegulator {
            kp: 0.25,
            ki: 12.0,
            limit: U0DC_SAT,
            integrator: 0.0,
            saturated: false,
        }
    }
}

impl Udiff0dcRegulator {
    /// One update on the error `0 − measured`.
    pub fn regulate(&mut self, measured: f64, dt: f64) -> f64 {
        let e = -measured;
        if !self.saturated {
            self.integrator += self.ki * e * dt;
        }
        let raw = self.kp * e + self.integrator;
        let out = raw.clamp(-self.limit, self.limit);
        self.saturated = out != raw;
        out
    }
}

/// Geometry of the sequence phasors as magnitudes and angles.
struct Polar {
    u1: f64,
    t1: f64,
    u2: f64,
    t2: f64,
    i1: f64,
    f1: f64,
    i2: f64,
    f2: f64,
    z: f64,
    rho: f64,
}

impl Polar {
    fn new(u: &SequenceSet, i_s: &SequenceSet, z: Impedance) -> Self {
        Polar {
            u1: u.pos.mag(),
            t1: u.pos.angle(),
            u2: u.neg.mag(),
            t2: u.neg.angle(),
            i1: i_s.pos.mag(),
            f1: i_s.pos.angle(),
            i2: i_s.neg.mag(),
            f2: i_s.neg.angle(),
            z: z.mag(),
            rho: z.angle(),
        }
    }
}

/// Voltage sequences the method plugs into `M`.
pub fn method_voltages(
    source: VoltageSource,
    grid: &SequenceSet,
    diff: &SequenceSet,
) -> SequenceSet {
    match source {
        VoltageSource::Grid => *grid,
        VoltageSource::Differential => *diff,
    }
}

/// The reduced power matrix in closed form. Rows are phases a, b, c; columns
/// multiply `[I⁻cos φ⁻, I⁻sin φ⁻, I⁺cos φ⁺]`. `u` holds whichever voltage
/// sequences the method uses; without the arm impedance every `Z_arm` term is
/// dropped, which also removes the grid current.
pub fn assemble_m(
    u: &SequenceSet,
    i_s: &SequenceSet,
    z_arm: Impedance,
    include_zarm: bool,
) -> Mat3 {
    let g = Polar::new(u, i_s, z_arm);
    let (c, s) = (f64::cos, f64::sin);
    let Polar {
        u1,
        t1,
        u2,
        t2,
        i1,
        f1,
        i2,
        f2,
        rho,
        ..
    } = g;
    let z = if include_zarm { g.z } else { 0.0 };
    let p3 = TWO_PI_3;
    let p6 = PI / 6.0;

    let m11 = z * (-i1 * c(rho - f1) - i2 * c(rho - f2)) - 2.0 * u1 * c(t1) - 2.0 * u2 * c(t2);
    let m12 = z * (i1 * s(rho - f1) + i2 * s(rho - f2)) - 2.0 * u1 * s(t1) - 2.0 * u2 * s(t2);
    let m13 = m11;
    let m21 =
        z * (-i1 * c(rho - f1 - p3) - i2 * c(rho - f2)) - 2.0 * u1 * c(t1 + p3) - 2.0 * u2 * c(t2);
    let m22 =
        z * (-i1 * c(rho - f1 - p6) + i2 * s(rho - f2)) - 2.0 * u1 * c(t1 + p6) - 2.0 * u2 * s(t2);
    let m23 =
        z * (-i1 * c(rho - f1) - i2 * c(rho - f2 + p3)) - 2.0 * u2 * c(t2 - p3) - 2.0 * u1 * c(t1);
    let m31 =
        z * (-i1 * c(rho - f1 + p3) - i2 * c(rho - f2)) - 2.0 * u1 * c(t1 - p3) - 2.0 * u2 * c(t2);
    let m32 =
        z * (i1 * c(rho - f1 + p6) + i2 * s(rho - f2)) + 2.0 * u1 * c(t1 - p6) - 2.0 * u2 * s(t2);
    let m33 =
        z * (-i1 * c(rho - f1) - i2 * c(rho - f2 - p3)) - 2.0 * u2 * c(t2 + p3) - 2.0 * u1 * c(t1);

    Mat3::new(m11, m12, m13, m21, m22, m23, m31, m32, m33)
}

/// Closed-form determinant for `U_diff⁺ = U_diff⁻` and `I_s⁻ = 0`.
pub fn det_closed_form(u_diff_pos: Phasor, i_s_pos: Phasor, z_arm: Impedance) -> f64 {
    let (u, t) = (u_diff_pos.mag(), u_diff_pos.angle());
    let (i, f) = (i_s_pos.mag(), i_s_pos.angle());
    let (z, rho) = (z_arm.mag(), z_arm.angle());
    let r3 = 3f64.sqrt();
    -3.0 * z.powi(3) * i.powi(3) * r3 * (rho - f).cos() / 2.0
        - 3.0 * u * r3 * i * i * z * z * (2.0 * rho - 2.0 * f + t).cos()
        - 6.0 * i * r3 * u * u * z * (2.0 * t + rho - f).cos()
        - 6.0 * i * (rho - f).cos() * r3 * u * u * z
        - 6.0 * i * i * t.cos() * r3 * u * z * z
}

/// Product of the row norms; `|det M|` can never exceed it.
fn row_norm_product(m: &Mat3) -> f64 {
    (0..3).map(|r| m.row(r).norm()).product()
}

/// Whether `M` counts as singular under the scale-free determinant test.
pub fn is_singular(m: &Mat3) -> bool {
    m.determinant().abs() <= SINGULAR_DELTA * row_norm_product(m)
}

/// `adj(M)·b/det(M)`; non-finite when `M` is exactly singular.
pub fn solve_adjugate(m: &Mat3, b: &Vec3) -> Vec3 {
    let det = m.determinant();
    let a = |r: usize, c: usize| m[(r, c)];
    let adj = Mat3::new(
        a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1),
        a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2),
        a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1),
        a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2),
        a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0),
        a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2),
        a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0),
        a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1),
        a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0),
    );
    adj * b / det
}

/// Minimum-norm least-squares solution keeping singular values above
/// `rtol·σ_max`. Returns the solution and the kept rank.
pub fn solve_truncated_pinv(m: &Mat3, b: &Vec3, rtol: f64) -> (Vec3, usize) {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let smax = svd.singular_values.max();
    let mut x = Vec3::zeros();
    let mut rank = 0;
    for i in 0..3 {
        let s = svd.singular_values[i];
        if smax > 0.0 && s > rtol * smax {
            rank += 1;
            let coef = u.column(i).dot(b) / s;
            x += vt.row(i).transpose() * coef;
        }
    }
    (x, rank)
}

fn condition(m: &Mat3) -> f64 {
    let s = m.singular_values();
    let (hi, lo) = (s.max(), s.min());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Solves for the AC additive currents. The right-hand side is the vertical
/// power request plus what `U_diff0DC` already moves through the DC
/// currents, `b = P + 2·U_diff0DC·I_dc`; Method 0 ignores `U_diff0DC`.
pub fn solve_ac_additive(
    method: MethodId,
    m: &Mat3,
    p_vert: [f64; 3],
    i_dc: [f64; 3],
    u0dc: f64,
) -> Result<(AdditiveCurrentRefs, SolveDiagnostics), Error> {
    solve_ac_additive_with(method, m, p_vert, i_dc, u0dc, PINV_RTOL)
}

/// [`solve_ac_additive`] with the pseudoinverse cut of Methods 1 and 3 given
/// explicitly, relative to `σ_max`.
pub fn solve_ac_additive_with(
    method: MethodId,
    m: &Mat3,
    p_vert: [f64; 3],
    i_dc: [f64; 3],
    u0dc: f64,
    pinv_rtol: f64,
) -> Result<(AdditiveCurrentRefs, SolveDiagnostics), Error> {
    let finite = m.iter().all(|v| v.is_finite())
        && p_vert.iter().chain(&i_dc).all(|v| v.is_finite())
        && u0dc.is_finite();
    if !finite {
        return Err(Error::NonFinite("solve_ac_additive"));
    }
    let u0 = if method.uses_u0dc() { u0dc } else { 0.0 };
    let b = Vec3::from_fn(|k, _| p_vert[k] + 2.0 * u0 * i_dc[k]);
    let singular = is_singular(m);
    let (x, rank) = if method.uses_pinv() {
        solve_truncated_pinv(m, &b, pinv_rtol)
    } else {
        // Methods 0 and 2 keep the raw near-singular answer on purpose. For
        // Method 4 a singular M would be a modelling error, reported through
        // the flag rather than a panic inside a running simulation.
        (solve_adjugate(m, &b), 3)
    };
    let diag = SolveDiagnostics {
        det_m: m.determinant(),
        condition: condition(m),
        singular_flag: singular,
        method_used: method,
        pseudoinverse_used: method.uses_pinv(),
        rank,
    };
    Ok((AdditiveCurrentRefs::from_solution(x, i_dc), diag))
}

/// Per-phase phasor of a sequence set (positive and negative parts only).
fn leg(seq: &SequenceSet, k: usize) -> Phasor {
    let s = PHASE_SHIFT[k];
    seq.pos.rotate(s) + seq.neg.rotate(-s)
}

/// Vertical power of each leg from the full sequence description of the
/// differential and additive quantities.
pub fn vertical_power_forward(
    u_diff: &SequenceSet,
    i_s: &SequenceSet,
    u_sum: &SequenceSet,
    i_sum: &SequenceSet,
    u0dc: f64,
    i_dc: [f64; 3],
) -> [f64; 3] {
    std::array::from_fn(|k| {
        let ud = leg(u_diff, k);
        let isum = leg(i_sum, k);
        let us = leg(u_sum, k);
        let is = leg(i_s, k);
        -2.0 * (ud * isum.conj()).re + 0.5 * (us * is.conj()).re - 2.0 * u0dc * i_dc[k]
    })
}

/// Vertical power after cancelling the AC additive voltage against the arm
/// impedance, for any additive current (not only `sin φ_sum⁺ = 0`).
pub fn vertical_power_reduced(
    u: &SequenceSet,
    i_s: &SequenceSet,
    z_arm: Impedance,
    i_sum: &SequenceSet,
    u0dc: f64,
    i_dc: [f64; 3],
) -> [f64; 3] {
    let z = z_arm.phasor();
    std::array::from_fn(|k| {
        let isum = leg(i_sum, k);
        -2.0 * (leg(u, k) * isum.conj()).re
            - (z * isum * leg(i_s, k).conj()).re
            - 2.0 * u0dc * i_dc[k]
    })
}

/// Zero-seq-free AC additive voltage that the arm impedance would need.
pub fn sum_voltage_from_impedance(i_sum: &SequenceSet, z_arm: Impedance) -> SequenceSet {
    let z = z_arm.phasor() * -2.0;
    SequenceSet::new(z * i_sum.pos, z * i_sum.neg, Phasor::ZERO)
}
