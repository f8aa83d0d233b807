//! Phasor algebra, symmetrical components and single-bin waveform analysis.
//!
//! Phasors are RMS quantities. A phasor `X∠θ` corresponds to the waveform
//! `x(t) = √2·X·cos(ωt + θ)`; the √2 only shows up in [`synthesize`] and
//! [`extract_phasor`].

use std::f64::consts::{PI, SQRT_2};
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// 120° in radians.
pub const TWO_PI_3: f64 = 2.0 * PI / 3.0;

/// Phase shift of each phase in a positive-sequence set: a = 0, b = −120°, c = +120°.
pub const PHASE_SHIFT: [f64; 3] = [0.0, -TWO_PI_3, TWO_PI_3];

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Phasor {
    pub re: f64,
    pub im: f64,
}

impl Phasor {
    pub const ZERO: Phasor = Phasor { re: 0.0, im: 0.0 };

    pub const fn new(re: f64, im: f64) -> Self {
        Phasor { re, im }
    }

    pub fn polar(mag: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Phasor::new(mag * c, mag * s)
    }

    pub fn polar_deg(mag: f64, deg: f64) -> Self {
        Phasor::polar(mag, deg.to_radians())
    }

    pub fn mag(self) -> f64 {
        self.re.hypot(self.im)
    }

    /// Angle in (−π, π]. The zero phasor has angle 0.
    pub fn angle(self) -> f64 {
        wrap_angle(self.im.atan2(self.re))
    }

    pub fn angle_deg(self) -> f64 {
        self.angle().to_degrees()
    }

    pub fn conj(self) -> Self {
        Phasor::new(self.re, -self.im)
    }

    /// Rotates by `angle` radians.
    pub fn rotate(self, angle: f64) -> Self {
        self * Phasor::polar(1.0, angle)
    }

    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

impl From<Complex64> for Phasor {
    fn from(c: Complex64) -> Self {
        Phasor::new(c.re, c.im)
    }
}

impl From<Phasor> for Complex64 {
    fn from(p: Phasor) -> Self {
        p.to_complex()
    }
}

impl Add for Phasor {
    type Output = Phasor;
    fn add(self, o: Phasor) -> Phasor {
        Phasor::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Phasor {
    type Output = Phasor;
    fn sub(self, o: Phasor) -> Phasor {
        Phasor::new(self.re - o.re, self.im - o.im)
    }
}

impl Neg for Phasor {
    type Output = Phasor;
    fn neg(self) -> Phasor {
        Phasor::new(-self.re, -self.im)
    }
}

impl Mul for Phasor {
    type Output = Phasor;
    fn mul(self, o: Phasor) -> Phasor {
        Phasor::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

impl Mul<f64> for Phasor {
    type Output = Phasor;
    fn mul(self, k: f64) -> Phasor {
        Phasor::new(self.re * k, self.im * k)
    }
}

impl Div for Phasor {
    type Output = Phasor;
    fn div(self, o: Phasor) -> Phasor {
        (self.to_complex() / o.to_complex()).into()
    }
}

impl Div<f64> for Phasor {
    type Output = Phasor;
    fn div(self, k: f64) -> Phasor {
        Phasor::new(self.re / k, self.im / k)
    }
}

/// The rotation operator 1∠120°.
pub fn alpha() -> Phasor {
    Phasor::new(-0.5, 3f64.sqrt() / 2.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThreePhase {
    pub a: Phasor,
    pub b: Phasor,
    pub c: Phasor,
}

impl ThreePhase {
    pub fn new(a: Phasor, b: Phasor, c: Phasor) -> Self {
        ThreePhase { a, b, c }
    }

    pub fn from_array(p: [Phasor; 3]) -> Self {
        ThreePhase::new(p[0], p[1], p[2])
    }

    pub fn to_array(self) -> [Phasor; 3] {
        [self.a, self.b, self.c]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceSet {
    pub pos: Phasor,
    pub neg: Phasor,
    pub zero: Phasor,
}

impl SequenceSet {
    pub fn new(pos: Phasor, neg: Phasor, zero: Phasor) -> Self {
        SequenceSet { pos, neg, zero }
    }

    /// A balanced positive-sequence set.
    pub fn balanced(pos: Phasor) -> Self {
        SequenceSet::new(pos, Phasor::ZERO, Phasor::ZERO)
    }

    /// Phasor of phase `k` (0 = a) built from the positive and negative
    /// sequences only, i.e. what a three-wire connection can carry.
    pub fn phase(&self, k: usize) -> Phasor {
        let s = PHASE_SHIFT[k];
        self.pos.rotate(s) + self.neg.rotate(-s) + self.zero
    }

    pub fn is_finite(&self) -> bool {
        self.pos.is_finite() && self.neg.is_finite() && self.zero.is_finite()
    }
}

pub fn fortescue(abc: ThreePhase) -> SequenceSet {
    let a = alpha();
    let a2 = a * a;
    SequenceSet {
        pos: (abc.a + a * abc.b + a2 * abc.c) / 3.0,
        neg: (abc.a + a2 * abc.b + a * abc.c) / 3.0,
        zero: (abc.a + abc.b + abc.c) / 3.0,
    }
}

pub fn inverse_fortescue(seq: SequenceSet) -> ThreePhase {
    let a = alpha();
    let a2 = a * a;
    ThreePhase {
        a: seq.zero + seq.pos + seq.neg,
        b: seq.zero + a2 * seq.pos + a * seq.neg,
        c: seq.zero + a * seq.pos + a2 * seq.neg,
    }
}

/// Instantaneous value `√2·X·cos(ωt + θ + shift)`.
pub fn synthesize(ph: Phasor, omega: f64, t: f64, shift: f64) -> f64 {
    let arg = omega * t + shift;
    let (s, c) = arg.sin_cos();
    SQRT_2 * (ph.re * c - ph.im * s)
}

/// Fundamental phasor and mean of a one-period window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Spectrum {
    pub ac: Phasor,
    pub dc: f64,
}

/// Projects a one-period window sampled every `dt` onto the fundamental.
///
/// The first sample is taken to sit at `t = 0`, or at any whole number of
/// periods; the phasor angle is referred to that instant.
pub fn extract_phasor(window: &[f64], omega: f64, dt: f64) -> Result<Spectrum, Error> {
    let n = samples_per_period(omega, dt)?;
    if window.len() != n {
        return Err(Error::WindowLength {
            expected: n,
            got: window.len(),
        });
    }
    let step = 2.0 * PI / n as f64;
    let (mut re, mut im, mut dc) = (0.0, 0.0, 0.0);
    for (i, &x) in window.iter().enumerate() {
        let (s, c) = (step * i as f64).sin_cos();
        re += x * c;
        im -= x * s;
        dc += x;
    }
    let k = SQRT_2 / n as f64;
    Ok(Spectrum {
        ac: Phasor::new(re * k, im * k),
        dc: dc / n as f64,
    })
}

/// Number of samples in one period; fails unless the period is a whole
/// number of steps.
pub fn samples_per_period(omega: f64, dt: f64) -> Result<usize, Error> {
    if !(omega > 0.0 && dt > 0.0) {
        return Err(Error::Config(format!(
            "need ω > 0 and dt > 0, got ω = {omega}, dt = {dt}"
        )));
    }
    let exact = 2.0 * PI / (omega * dt);
    let n = exact.round();
    if n < 4.0 || (exact - n).abs() > 1e-6 * n {
        return Err(Error::Config(format!(
            "dt = {dt} s does not divide the fundamental period into whole steps"
        )));
    }
    Ok(n as usize)
}

/// Sliding one-period DFT at the fundamental, plus the window mean.
///
/// Sample `n` is assumed to be taken at `t = n·dt`, so phasor angles are
/// referred to the absolute time origin. The running sums are rebuilt from
/// the buffer once per period to stop rounding drift.
#[derive(Clone, Debug)]
pub struct SlidingPhasor {
    buf: Vec<f64>,
    cos: std::sync::Arc<[f64]>,
    sin: std::sync::Arc<[f64]>,
    idx: usize,
    re: f64,
    im: f64,
    sum: f64,
}

impl SlidingPhasor {
    pub fn new(n: usize) -> Self {
        let step = 2.0 * PI / n as f64;
        let cos: Vec<f64> = (0..n).map(|i| (step * i as f64).cos()).collect();
        let sin: Vec<f64> = (0..n).map(|i| (step * i as f64).sin()).collect();
        SlidingPhasor::with_tables(n, cos.into(), sin.into())
    }

    fn with_tables(n: usize, cos: std::sync::Arc<[f64]>, sin: std::sync::Arc<[f64]>) -> Self {
        SlidingPhasor {
            buf: vec![0.0; n],
            cos,
            sin,
            idx: 0,
            re: 0.0,
            im: 0.0,
            sum: 0.0,
        }
    }

    /// A window sharing the trig tables of `self`, with an empty buffer.
    pub fn sibling(&self) -> Self {
        SlidingPhasor::with_tables(self.buf.len(), self.cos.clone(), self.sin.clone())
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Fills the window as if `f(t)` had been sampled over the period before
    /// `t = 0`.
    pub fn prefill(&mut self, dt: f64, f: impl Fn(f64) -> f64) {
        let n = self.buf.len();
        for i in 0..n {
            self.buf[i] = f((i as f64 - n as f64) * dt);
        }
        self.idx = 0;
        self.rebuild();
    }

    pub fn push(&mut self, x: f64) {
        let i = self.idx;
        let old = self.buf[i];
        self.buf[i] = x;
        let d = x - old;
        self.re += d * self.cos[i];
        self.im -= d * self.sin[i];
        self.sum += d;
        self.idx += 1;
        if self.idx == self.buf.len() {
            self.idx = 0;
            self.rebuild();
        }
    }

    fn rebuild(&mut self) {
        let (mut re, mut im, mut sum) = (0.0, 0.0, 0.0);
        for (i, &x) in self.buf.iter().enumerate() {
            re += x * self.cos[i];
            im -= x * self.sin[i];
            sum += x;
        }
        self.re = re;
        self.im = im;
        self.sum = sum;
    }

    pub fn phasor(&self) -> Phasor {
        let k = SQRT_2 / self.buf.len() as f64;
        Phasor::new(self.re * k, self.im * k)
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.buf.len() as f64
    }
}

/// Plain sliding mean over a fixed number of samples.
#[derive(Clone, Debug)]
pub struct SlidingMean {
    buf: Vec<f64>,
    idx: usize,
    sum: f64,
}

impl SlidingMean {
    pub fn new(n: usize, init: f64) -> Self {
        SlidingMean {
            buf: vec![init; n],
            idx: 0,
            sum: init * n as f64,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.sum += x - self.buf[self.idx];
        self.buf[self.idx] = x;
        self.idx += 1;
        if self.idx == self.buf.len() {
            self.idx = 0;
            self.sum = self.buf.iter().sum();
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.buf.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impedance {
    pub r: f64,
    pub x: f64,
}

impl Impedance {
    pub const fn new(r: f64, x: f64) -> Self {
        Impedance { r, x }
    }

    pub fn mag(self) -> f64 {
        self.r.hypot(self.x)
    }

    /// Impedance angle ρ.
    pub fn angle(self) -> f64 {
        self.x.atan2(self.r)
    }

    pub fn phasor(self) -> Phasor {
        Phasor::new(self.r, self.x)
    }

    pub fn scaled(self, k: f64) -> Self {
        Impedance::new(self.r * k, self.x * k)
    }

    /// Inductance in pu·s at angular frequency `omega`.
    pub fn inductance(self, omega: f64) -> f64 {
        self.x / omega
    }
}

impl Add for Impedance {
    type Output = Impedance;
    fn add(self, o: Impedance) -> Impedance {
        Impedance::new(self.r + o.r, self.x + o.x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const W: f64 = 2.0 * PI * 50.0;

    fn close(a: Phasor, b: Phasor, tol: f64) -> bool {
        (a - b).mag() <= tol
    }

    #[test]
    fn balanced_set_is_pure_positive() {
        let abc = ThreePhase::new(
            Phasor::polar_deg(1.0, 0.0),
            Phasor::polar_deg(1.0, -120.0),
            Phasor::polar_deg(1.0, 120.0),
        );
        let s = fortescue(abc);
        assert!(close(s.pos, Phasor::new(1.0, 0.0), 1e-12));
        assert!(s.neg.mag() < 1e-12 && s.zero.mag() < 1e-12);
    }

    #[test]
    fn common_mode_set_is_pure_zero() {
        let one = Phasor::new(1.0, 0.0);
        let s = fortescue(ThreePhase::new(one, one, one));
        assert!(close(s.zero, one, 1e-12));
        assert!(s.pos.mag() < 1e-12 && s.neg.mag() < 1e-12);
    }

    #[test]
    fn single_phase_splits_in_thirds() {
        let s = fortescue(ThreePhase::new(
            Phasor::new(1.0, 0.0),
            Phasor::ZERO,
            Phasor::ZERO,
        ));
        let third = Phasor::new(1.0 / 3.0, 0.0);
        assert!(close(s.pos, third, 1e-15));
        assert!(close(s.neg, third, 1e-15));
        assert!(close(s.zero, third, 1e-15));
    }

    #[test]
    fn inverse_of_unit_sequences() {
        let abc = inverse_fortescue(SequenceSet::balanced(Phasor::new(1.0, 0.0)));
        assert!(close(abc.b, Phasor::polar_deg(1.0, -120.0), 1e-12));
        assert!(close(abc.c, Phasor::polar_deg(1.0, 120.0), 1e-12));
        let one = Phasor::new(1.0, 0.0);
        let abc = inverse_fortescue(SequenceSet::new(Phasor::ZERO, Phasor::ZERO, one));
        for p in abc.to_array() {
            assert!(close(p, one, 1e-15));
        }
    }

    #[test]
    fn phase_helper_matches_inverse_transform() {
        let s = SequenceSet::new(
            Phasor::polar_deg(0.8, 10.0),
            Phasor::polar_deg(0.3, -70.0),
            Phasor::polar_deg(0.1, 33.0),
        );
        let abc = inverse_fortescue(s).to_array();
        for k in 0..3 {
            assert!(close(s.phase(k), abc[k], 1e-14));
        }
    }

    #[test]
    fn synthesis_samples() {
        assert_abs_diff_eq!(
            synthesize(Phasor::new(1.0, 0.0), W, 0.0, 0.0),
            SQRT_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            synthesize(Phasor::polar_deg(1.0, 90.0), W, 0.0, 0.0),
            0.0,
            epsilon = 1e-12
        );
        let p = Phasor::polar_deg(0.56, 25.49);
        assert_abs_diff_eq!(
            synthesize(p, W, 0.0, 0.0),
            SQRT_2 * 0.56 * 25.49f64.to_radians().cos(),
            epsilon = 1e-12
        );
    }

    fn window(f: impl Fn(f64) -> f64, n: usize, dt: f64, t0: f64) -> Vec<f64> {
        (0..n).map(|i| f(t0 + i as f64 * dt)).collect()
    }

    #[test]
    fn extraction_of_own_synthesis() {
        let dt = 50e-6;
        let x = Phasor::new(1.0, 0.0);
        let w = window(|t| synthesize(x, W, t, 0.0), 400, dt, 0.0);
        let s = extract_phasor(&w, W, dt).unwrap();
        assert!(close(s.ac, x, 1e-9));
        assert!(s.dc.abs() < 1e-12);
    }

    #[test]
    fn extraction_of_constant() {
        let s = extract_phasor(&[0.5; 400], W, 50e-6).unwrap();
        assert!(s.ac.mag() < 1e-12);
        assert_abs_diff_eq!(s.dc, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn extraction_rejects_second_harmonic() {
        let dt = 50e-6;
        let x = Phasor::polar_deg(1.0, 30.0);
        let h = Phasor::new(0.2, 0.0);
        let w = window(
            |t| synthesize(x, W, t, 0.0) + synthesize(h, 2.0 * W, t, 0.0),
            400,
            dt,
            0.0,
        );
        assert!(close(extract_phasor(&w, W, dt).unwrap().ac, x, 1e-9));
    }

    #[test]
    fn extraction_rejects_wrong_length() {
        assert!(matches!(
            extract_phasor(&[0.0; 399], W, 50e-6),
            Err(Error::WindowLength {
                expected: 400,
                got: 399
            })
        ));
        assert!(samples_per_period(W, 30e-6).is_err());
    }

    #[test]
    fn sliding_window_tracks_a_step() {
        let dt = 50e-6;
        let before = Phasor::polar_deg(1.0, 0.0);
        let after = Phasor::polar_deg(0.4, -50.0);
        let mut s = SlidingPhasor::new(400);
        s.prefill(dt, |t| synthesize(before, W, t, 0.0));
        assert!(close(s.phasor(), before, 1e-12));
        for n in 0..1000 {
            let t = n as f64 * dt;
            let p = if n < 300 { before } else { after };
            s.push(synthesize(p, W, t, 0.0) + 0.25);
        }
        assert!(close(s.phasor(), after, 1e-12));
        assert_abs_diff_eq!(s.mean(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn wrap_convention() {
        assert_abs_diff_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_eq!(Phasor::new(-1.0, -0.0).angle(), PI);
    }

    fn phasor() -> impl Strategy<Value = Phasor> {
        (0.0..2.0f64, -PI..PI).prop_map(|(m, a)| Phasor::polar(m, a))
    }

    fn seq() -> impl Strategy<Value = SequenceSet> {
        (phasor(), phasor(), phasor()).prop_map(|(p, n, z)| SequenceSet::new(p, n, z))
    }

    proptest! {
        #[test]
        fn fortescue_round_trip(s in seq()) {
            let back = fortescue(inverse_fortescue(s));
            prop_assert!(close(back.pos, s.pos, 1e-12));
            prop_assert!(close(back.neg, s.neg, 1e-12));
            prop_assert!(close(back.zero, s.zero, 1e-12));
            let abc = inverse_fortescue(s);
            let again = inverse_fortescue(fortescue(abc));
            for (x, y) in abc.to_array().iter().zip(again.to_array()) {
                prop_assert!(close(*x, y, 1e-12));
            }
        }

        #[test]
        fn polar_round_trip(p in phasor()) {
            let q = Phasor::polar(p.mag(), p.angle());
            prop_assert!((q - p).mag() <= 1e-12 * p.mag().max(1e-300));
        }

        #[test]
        fn synthesis_is_linear(s in seq(), t in 0.0..0.04f64) {
            let abc = inverse_fortescue(s).to_array();
            for k in 0..3 {
                let whole = synthesize(abc[k], W, t, 0.0);
                let parts = synthesize(s.pos, W, t, PHASE_SHIFT[k])
                    + synthesize(s.neg, W, t, -PHASE_SHIFT[k])
                    + synthesize(s.zero, W, t, 0.0);
                prop_assert!((whole - parts).abs() < 1e-12);
            }
        }

        #[test]
        fn extraction_inverts_synthesis(x in phasor(), periods in 0u32..5) {
            let dt = 50e-6;
            let t0 = periods as f64 * 0.02;
            let w = window(|t| synthesize(x, W, t, 0.0), 400, dt, t0);
            let s = extract_phasor(&w, W, dt).unwrap();
            prop_assert!(close(s.ac, x, 1e-9));
        }
    }
}
