//! Numeric cross-checks of the reference calculation against independent
//! oracles. Every check draws its points from a fixed seed.

use std::f64::consts::PI;

use mmc::phasors::{synthesize, Impedance, Phasor, SequenceSet, PHASE_SHIFT};
use mmc::refcalc::{
    assemble_m, det_closed_form, is_singular, solve_ac_additive, solve_truncated_pinv,
    sum_voltage_from_impedance, vertical_power_forward, Mat3, MethodId, Vec3, PINV_RTOL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEED: u64 = 0x6d6d_6373;
const SAMPLES: usize = 1000;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub samples: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error < self.tolerance
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "name": self.name,
            "samples": self.samples,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "passed": self.passed(),
        })
    }
}

/// Which entry of the assembled `M` to perturb, for the negative control.
#[derive(Clone, Copy, Debug, Default)]
pub struct Corruption(pub Option<(usize, usize)>);

impl Corruption {
    fn m(self, u: &SequenceSet, i: &SequenceSet, z: Impedance, zarm: bool) -> Mat3 {
        let mut m = assemble_m(u, i, z, zarm);
        if let Some((r, c)) = self.0 {
            m[(r, c)] += 0.1 * (1.0 + m[(r, c)].abs());
        }
        m
    }
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn new(salt: u64) -> Self {
        Draw(ChaCha8Rng::seed_from_u64(SEED ^ salt))
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    fn phasor(&mut self, max: f64) -> Phasor {
        let m = self.range(0.0, max);
        Phasor::polar(m, self.range(-PI, PI))
    }

    fn seq(&mut self, max: f64) -> SequenceSet {
        SequenceSet::new(self.phasor(max), self.phasor(max), Phasor::ZERO)
    }

    fn zarm(&mut self) -> Impedance {
        Impedance::new(self.range(0.0, 0.05), self.range(0.02, 0.3))
    }
}

fn wave(s: &SequenceSet, omega: f64, t: f64, k: usize) -> f64 {
    synthesize(s.pos, omega, t, PHASE_SHIFT[k]) + synthesize(s.neg, omega, t, -PHASE_SHIFT[k])
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Phasor-form vertical power against the period average of
/// `u_u·i_u − u_l·i_l` built from arm waveforms.
pub fn vertical_power_waveform() -> Check {
    let mut d = Draw::new(1);
    let omega = 2.0 * PI * 50.0;
    let n = 400;
    let dt = 2.0 * PI / omega / n as f64;
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES {
        let (ud, is, us, isum) = (d.seq(1.2), d.seq(1.2), d.seq(0.3), d.seq(0.3));
        let u0 = d.range(-0.1, 0.1);
        let i_dc = [d.range(-0.5, 0.5), d.range(-0.5, 0.5), d.range(-0.5, 0.5)];
        let u_dc = d.range(2.0, 4.0);
        let phasor = vertical_power_forward(&ud, &is, &us, &isum, u0, i_dc);
        let avg: [f64; 3] = std::array::from_fn(|k| {
            let mut acc = 0.0;
            for j in 0..n {
                let t = j as f64 * dt;
                let u_diff = wave(&ud, omega, t, k) + u0;
                let u_sum = u_dc + wave(&us, omega, t, k);
                let i_s = wave(&is, omega, t, k);
                let i_sum = i_dc[k] + wave(&isum, omega, t, k);
                let (u_u, u_l) = (u_sum / 2.0 - u_diff, u_sum / 2.0 + u_diff);
                let (i_u, i_l) = (i_s / 2.0 + i_sum, -i_s / 2.0 + i_sum);
                acc += u_u * i_u - u_l * i_l;
            }
            acc / n as f64
        });
        let err: Vec<f64> = (0..3).map(|k| avg[k] - phasor[k]).collect();
        worst = worst.max(max_abs(&err) / max_abs(&phasor).max(1e-12));
    }
    Check {
        name: "vertical_power_waveform",
        samples: SAMPLES,
        max_error: worst,
        tolerance: 1e-6,
    }
}

/// `M·x − 2·U0·I_dc` against the full vertical power with the additive
/// voltage replaced by `−2·Z_arm·I_sum`.
pub fn impedance_substitution(corrupt: Corruption) -> Check {
    let mut d = Draw::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES {
        let (ud, is, z) = (d.seq(1.2), d.seq(1.2), d.zarm());
        let x = [d.range(-0.5, 0.5), d.range(-0.5, 0.5), d.range(-0.5, 0.5)];
        let u0 = d.range(-0.1, 0.1);
        let i_dc = [d.range(-0.5, 0.5), d.range(-0.5, 0.5), d.range(-0.5, 0.5)];
        let isum = SequenceSet::new(
            Phasor::new(x[2], 0.0),
            Phasor::new(x[0], x[1]),
            Phasor::ZERO,
        );
        let us = sum_voltage_from_impedance(&isum, z);
        let full = vertical_power_forward(&ud, &is, &us, &isum, u0, i_dc);
        let m = corrupt.m(&ud, &is, z, true);
        let mx = m * Vec3::from(x);
        let err: Vec<f64> = (0..3)
            .map(|k| mx[k] - 2.0 * u0 * i_dc[k] - full[k])
            .collect();
        worst = worst.max(max_abs(&err) / max_abs(&full).max(1e-12));
    }
    Check {
        name: "impedance_substitution",
        samples: SAMPLES,
        max_error: worst,
        tolerance: 1e-9,
    }
}

/// Closed-form determinant at internal-singular points against the numeric
/// one, scaled by the row-norm product that bounds `|det M|`.
pub fn determinant_closed_form(corrupt: Corruption) -> Check {
    let mut d = Draw::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES {
        let u = Phasor::polar(d.range(0.1, 1.2), d.range(-PI, PI));
        let i = Phasor::polar(d.range(0.05, 1.5), d.range(-PI, PI));
        let z = d.zarm();
        let m = corrupt.m(
            &SequenceSet::new(u, u, Phasor::ZERO),
            &SequenceSet::balanced(i),
            z,
            true,
        );
        let numeric = m.determinant();
        let closed = det_closed_form(u, i, z);
        let scale: f64 = (0..3).map(|r| m.row(r).norm()).product();
        worst = worst.max((numeric - closed).abs() / numeric.abs().max(1e-6 * scale));
    }
    // The determinant vanishes with the grid current.
    let u = Phasor::polar(0.56, 0.44);
    let z = Impedance::new(0.01, 0.15);
    let at = |i: f64| {
        corrupt.m(
            &SequenceSet::new(u, u, Phasor::ZERO),
            &SequenceSet::balanced(Phasor::polar(i, 0.1)),
            z,
            true,
        )
    };
    let zero = at(0.0).determinant().abs();
    // det is linear in a small current, so 1e-9 pu leaves about 1e-9 of it.
    let ratio = at(1e-9).determinant().abs() / at(1.0).determinant().abs();
    worst = worst.max(zero).max(ratio);
    Check {
        name: "determinant_closed_form",
        samples: SAMPLES + 3,
        max_error: worst,
        tolerance: 1e-6,
    }
}

/// Residual of every method's solve wherever `M` is regular.
pub fn solve_residual(corrupt: Corruption) -> Check {
    let mut d = Draw::new(4);
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for j in 0..SAMPLES {
        let method = MethodId::ALL[j % 5];
        let (u, is, z) = (d.seq(1.2), d.seq(1.2), d.zarm());
        let pv = [d.range(-0.5, 0.5), d.range(-0.5, 0.5), d.range(-0.5, 0.5)];
        let i_dc = [d.range(0.05, 0.5), d.range(0.05, 0.5), d.range(0.05, 0.5)];
        let u0 = d.range(-0.1, 0.1);
        let m = corrupt.m(&u, &is, z, method.includes_zarm());
        if is_singular(&m) {
            continue;
        }
        used += 1;
        let Ok((r, _)) = solve_ac_additive(method, &m, pv, i_dc, u0) else {
            worst = f64::INFINITY;
            continue;
        };
        let u0 = if method.uses_u0dc() { u0 } else { 0.0 };
        let b = Vec3::from_fn(|k, _| pv[k] + 2.0 * u0 * i_dc[k]);
        worst = worst.max((m * Vec3::from(r.x) - b).norm() / b.norm().max(1e-300));
    }
    Check {
        name: "solve_residual",
        samples: used,
        max_error: worst,
        tolerance: 1e-10,
    }
}

/// At exactly singular `M` the pseudoinverse answer is orthogonal to the
/// null space, so no shorter vector gives the same product.
pub fn pinv_minimum_norm(corrupt: Corruption) -> Check {
    let mut d = Draw::new(5);
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES {
        let u = Phasor::polar(d.range(0.1, 1.2), d.range(-PI, PI));
        let is = d.seq(1.2);
        let m = corrupt.m(
            &SequenceSet::new(u, u, Phasor::ZERO),
            &is,
            Impedance::new(0.01, 0.15),
            false,
        );
        let b = Vec3::new(d.range(-0.5, 0.5), d.range(-0.5, 0.5), d.range(-0.5, 0.5));
        let (x, _) = solve_truncated_pinv(&m, &b, PINV_RTOL);
        // Rows 1 and 2 span the row space; their cross product is the null
        // direction.
        let null = m.row(1).transpose().cross(&m.row(2).transpose());
        let null = if null.norm() > 0.0 {
            null / null.norm()
        } else {
            null
        };
        worst = worst.max(x.dot(&null).abs() / x.norm().max(1e-12));
    }
    Check {
        name: "pinv_minimum_norm",
        samples: SAMPLES,
        max_error: worst,
        tolerance: 1e-9,
    }
}

pub fn all(corrupt: Corruption) -> Vec<Check> {
    vec![
        vertical_power_waveform(),
        impedance_substitution(corrupt),
        determinant_closed_form(corrupt),
        solve_residual(corrupt),
        pinv_minimum_norm(corrupt),
    ]
}
