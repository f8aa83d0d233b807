//! Operating points and fault events.
//!
//! Sags follow the seven-type ABC classification applied at the converter
//! bus, with the characteristic magnitude `h` and a unit positive-sequence
//! factor. At `h = 0` every type reaches `|U⁺| = |U⁻|`, which is where the
//! naive power matrix loses rank. Internal singular sags instead pick the
//! negative sequence so that the converter's differential voltages match.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::phasors::{fortescue, Phasor, SequenceSet, ThreePhase};
use crate::plant::PlantParams;
use crate::refcalc::MethodId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SagType {
    C,
    D,
    E,
    F,
    G,
}

impl SagType {
    pub const ALL: [SagType; 5] = [SagType::C, SagType::D, SagType::E, SagType::F, SagType::G];

    pub fn letter(self) -> char {
        match self {
            SagType::C => 'c',
            SagType::D => 'd',
            SagType::E => 'e',
            SagType::F => 'f',
            SagType::G => 'g',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SagClass {
    pub kind: SagType,
    pub h: f64,
}

impl SagClass {
    pub fn new(kind: SagType, h: f64) -> Result<Self, Error> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::Config(format!(
                "sag magnitude h = {h} outside [0, 1]"
            )));
        }
        Ok(SagClass { kind, h })
    }

    /// The class at its singular point.
    pub fn singular(kind: SagType) -> Self {
        SagClass { kind, h: 0.0 }
    }

    /// Phase voltages of the sag.
    pub fn phases(&self) -> ThreePhase {
        let h = self.h;
        let r3 = 3f64.sqrt();
        let p = Phasor::new;
        let (a, b, c) = match self.kind {
            SagType::C => (p(1.0, 0.0), p(-0.5, -r3 / 2.0 * h), p(-0.5, r3 / 2.0 * h)),
            SagType::D => (p(h, 0.0), p(-h / 2.0, -r3 / 2.0), p(-h / 2.0, r3 / 2.0)),
            SagType::E => (
                p(1.0, 0.0),
                p(-h / 2.0, -r3 / 2.0 * h),
                p(-h / 2.0, r3 / 2.0 * h),
            ),
            SagType::F => {
                let q = (2.0 + h) / 12f64.sqrt();
                (p(h, 0.0), p(-h / 2.0, -q), p(-h / 2.0, q))
            }
            SagType::G => {
                let m = (2.0 + h) / 3.0;
                (
                    p(m, 0.0),
                    p(-m / 2.0, -r3 / 2.0 * h),
                    p(-m / 2.0, r3 / 2.0 * h),
                )
            }
        };
        ThreePhase::new(a, b, c)
    }
}

/// Grid sequences of a sag; at `h = 0` they satisfy `|U⁺| = |U⁻|`.
pub fn sag_sequences(class: SagClass) -> SequenceSet {
    let s = fortescue(class.phases());
    // The classification is built from exact thirds; clean the rounding so
    // that equal sequences compare equal.
    let clean = |p: Phasor| Phasor::new(round_ulps(p.re), round_ulps(p.im));
    SequenceSet::new(clean(s.pos), clean(s.neg), clean(s.zero))
}

fn round_ulps(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if (r - v).abs() < 1e-14 {
        r
    } else {
        v
    }
}

/// Grid sag of the given type at its singular point.
pub fn make_ac_singular(kind: SagType) -> SequenceSet {
    sag_sequences(SagClass::singular(kind))
}

/// `U_g⁻ = U_g⁺ + internal_factor`, no zero sequence. With the grid current
/// held at `internal_factor / Z_eq` this makes `U_diff⁺ = U_diff⁻`.
pub fn make_internal_singular(u_g_pos: Phasor, internal_factor: Phasor) -> SequenceSet {
    SequenceSet::new(u_g_pos, u_g_pos + internal_factor, Phasor::ZERO)
}

/// Internal singular version of a sag type: the type's positive sequence and
/// zero sequence are kept, and the negative sequence is rotated with it so
/// that the differential voltages have equal magnitude.
pub fn make_internal_singular_of(kind: SagType, internal_factor: Phasor) -> SequenceSet {
    let s = make_ac_singular(kind);
    let ratio = s.neg / s.pos;
    SequenceSet::new(s.pos, ratio * (s.pos + internal_factor), s.zero)
}

/// Internal factor of the reference study.
pub fn reference_internal_factor() -> Phasor {
    Phasor::polar_deg(0.24, 87.75)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviationLevel {
    None,
    FivePct,
    TenPct,
}

/// Per-arm impedance multipliers relative to the nominal arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmMultipliers {
    pub upper: [f64; 3],
    pub lower: [f64; 3],
}

impl Default for ArmMultipliers {
    fn default() -> Self {
        ArmMultipliers {
            upper: [1.0; 3],
            lower: [1.0; 3],
        }
    }
}

pub fn make_impedance_study(level: DeviationLevel) -> ArmMultipliers {
    match level {
        DeviationLevel::None => ArmMultipliers::default(),
        DeviationLevel::FivePct => ArmMultipliers {
            upper: [1.0 - 0.05, 1.0 - 0.01, 1.0 + 0.02],
            lower: [1.0 + 0.03, 1.0 + 0.015, 1.0 + 0.025],
        },
        DeviationLevel::TenPct => ArmMultipliers {
            upper: [1.0 - 0.015, 1.0 - 0.1, 1.0 + 0.13],
            lower: [1.0 + 0.05, 1.0 + 0.1, 1.0 - 0.08],
        },
    }
}

/// A phasor as written in scenario files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarPhasor {
    pub mag: f64,
    pub deg: f64,
}

impl PolarPhasor {
    pub fn from_phasor(p: Phasor) -> Self {
        PolarPhasor {
            mag: p.mag(),
            deg: p.angle_deg(),
        }
    }

    pub fn phasor(self) -> Phasor {
        Phasor::polar_deg(self.mag, self.deg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarSequences {
    pub pos: PolarPhasor,
    #[serde(default)]
    pub neg: PolarPhasor,
    #[serde(default)]
    pub zero: PolarPhasor,
}

impl PolarSequences {
    pub fn from_sequences(s: &SequenceSet) -> Self {
        PolarSequences {
            pos: PolarPhasor::from_phasor(s.pos),
            neg: PolarPhasor::from_phasor(s.neg),
            zero: PolarPhasor::from_phasor(s.zero),
        }
    }

    pub fn sequences(&self) -> SequenceSet {
        SequenceSet::new(self.pos.phasor(), self.neg.phasor(), self.zero.phasor())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    pub t_fault: f64,
    pub t_clear: f64,
    pub pos: PolarPhasor,
    #[serde(default)]
    pub neg: PolarPhasor,
    #[serde(default)]
    pub zero: PolarPhasor,
}

impl FaultSection {
    pub fn sequences(&self) -> SequenceSet {
        SequenceSet::new(self.pos.phasor(), self.neg.phasor(), self.zero.phasor())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setpoints {
    pub p: f64,
    pub q: f64,
    /// Fault setpoints; when absent the pre-fault positive-sequence current
    /// is held through the fault.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_fault: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_fault: Option<f64>,
}

/// Declarative description of one simulated event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub run: RunSection,
    pub grid: PolarSequences,
    pub fault: FaultSection,
    pub setpoints: Setpoints,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impedances: Option<ArmMultipliers>,
}

impl ScenarioSpec {
    pub fn new(name: &str, pre: &SequenceSet, fault: &SequenceSet, setpoints: Setpoints) -> Self {
        ScenarioSpec {
            run: RunSection {
                name: name.to_string(),
                duration: 7.0,
                method: None,
            },
            grid: PolarSequences::from_sequences(pre),
            fault: {
                let f = PolarSequences::from_sequences(fault);
                FaultSection {
                    t_fault: 2.0,
                    t_clear: 5.0,
                    pos: f.pos,
                    neg: f.neg,
                    zero: f.zero,
                }
            },
            setpoints,
            impedances: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.run.name
    }

    pub fn pre_fault(&self) -> SequenceSet {
        self.grid.sequences()
    }

    pub fn fault_grid(&self) -> SequenceSet {
        self.fault.sequences()
    }

    pub fn validate(&self) -> Result<(), Error> {
        let (tf, tc, d) = (self.fault.t_fault, self.fault.t_clear, self.run.duration);
        if !(0.0 < tf && tf < tc && tc < d) {
            return Err(Error::Config(format!(
                "need 0 < t_fault < t_clear < duration, got {tf}, {tc}, {d}"
            )));
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "bad scenario name `{}`",
                self.run.name
            )));
        }
        let finite = [self.setpoints.p, self.setpoints.q]
            .iter()
            .all(|v| v.is_finite())
            && self.pre_fault().is_finite()
            && self.fault_grid().is_finite();
        if !finite {
            return Err(Error::Config("non-finite value in scenario".into()));
        }
        if let Some(m) = &self.impedances {
            if m.upper
                .iter()
                .chain(&m.lower)
                .any(|v| !(*v > 0.0 && v.is_finite()))
            {
                return Err(Error::Config(
                    "impedance multipliers must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn plant(&self) -> PlantParams {
        let m = self.impedances.unwrap_or_default();
        PlantParams::default().with_arm_multipliers(m.upper, m.lower)
    }

    /// Active and reactive setpoints in force at time `t`, given the
    /// pre-fault current to hold when no fault setpoints are given.
    pub fn setpoints_at(&self, t: f64) -> (f64, f64) {
        let sp = &self.setpoints;
        if !self.in_fault(t) {
            return (sp.p, sp.q);
        }
        match (sp.p_fault, sp.q_fault) {
            (Some(p), Some(q)) => (p, q),
            (p, q) => {
                let i = (Phasor::new(sp.p, sp.q) / self.pre_fault().pos).conj();
                let s = self.fault_grid().pos * i.conj();
                (p.unwrap_or(s.re), q.unwrap_or(s.im))
            }
        }
    }

    pub fn in_fault(&self, t: f64) -> bool {
        t >= self.fault.t_fault && t < self.fault.t_clear
    }

    pub fn grid_at(&self, t: f64) -> SequenceSet {
        if self.in_fault(t) {
            self.fault_grid()
        } else {
            self.pre_fault()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        ScenarioSpec::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Setpoints that hold the grid current at `internal_factor/Z_eq` before and
/// during the fault.
pub fn holding_setpoints(internal_factor: Phasor) -> Setpoints {
    let z_eq = PlantParams::default().z_eq_nominal().phasor();
    let i = internal_factor / z_eq;
    // S = U·conj(I) at the 1 pu pre-fault voltage.
    let s = i.conj();
    Setpoints {
        p: s.re,
        q: s.im,
        p_fault: None,
        q_fault: None,
    }
}

pub fn balanced() -> ScenarioSpec {
    let pre = SequenceSet::balanced(Phasor::new(1.0, 0.0));
    ScenarioSpec::new(
        "balanced",
        &pre,
        &pre,
        holding_setpoints(reference_internal_factor()),
    )
}

pub fn ac_singular(kind: SagType) -> ScenarioSpec {
    let pre = SequenceSet::balanced(Phasor::new(1.0, 0.0));
    let name = format!("ac_singular_{}", kind.letter());
    ScenarioSpec::new(
        &name,
        &pre,
        &make_ac_singular(kind),
        holding_setpoints(reference_internal_factor()),
    )
}

pub fn internal_singular(kind: SagType) -> ScenarioSpec {
    let pre = SequenceSet::balanced(Phasor::new(1.0, 0.0));
    let f = reference_internal_factor();
    let name = format!("internal_singular_{}", kind.letter());
    ScenarioSpec::new(
        &name,
        &pre,
        &make_internal_singular_of(kind, f),
        holding_setpoints(f),
    )
}

pub fn impedance_study(level: DeviationLevel) -> ScenarioSpec {
    let mut s = internal_singular(SagType::D);
    let (tag, m) = match level {
        DeviationLevel::None => ("0", make_impedance_study(level)),
        DeviationLevel::FivePct => ("5", make_impedance_study(level)),
        DeviationLevel::TenPct => ("10", make_impedance_study(level)),
    };
    s.run.name = format!("impedance_{tag}");
    s.impedances = Some(m);
    s
}

/// The five grid-singular and five internal-singular sags.
pub fn canonical() -> Vec<ScenarioSpec> {
    SagType::ALL
        .iter()
        .map(|&k| ac_singular(k))
        .chain(SagType::ALL.iter().map(|&k| internal_singular(k)))
        .collect()
}

/// Everything shipped as scenario files.
pub fn shipped() -> Vec<ScenarioSpec> {
    let mut v = canonical();
    v.push(balanced());
    v.push(impedance_study(DeviationLevel::FivePct));
    v.push(impedance_study(DeviationLevel::TenPct));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasors::inverse_fortescue;

    fn at(p: Phasor, re: f64, im: f64) -> bool {
        (p - Phasor::new(re, im)).mag() < 1e-12
    }

    #[test]
    fn type_c_singular_point() {
        let s = make_ac_singular(SagType::C);
        assert_eq!(s.pos, s.neg);
        assert!(at(s.pos, 0.5, 0.0));
        assert!((inverse_fortescue(s).a.mag() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_type_reaches_equal_magnitudes() {
        let third = 1.0 / 3.0;
        let expect = [
            (SagType::C, 0.5, 0.5, 0.0),
            (SagType::D, 0.5, -0.5, 0.0),
            (SagType::E, third, third, third),
            (SagType::F, third, -third, 0.0),
            (SagType::G, third, third, 0.0),
        ];
        for (k, pos, neg, zero) in expect {
            let s = make_ac_singular(k);
            assert!(at(s.pos, pos, 0.0), "{k:?} pos {:?}", s.pos);
            assert!(at(s.neg, neg, 0.0), "{k:?} neg {:?}", s.neg);
            assert!(at(s.zero, zero, 0.0), "{k:?} zero {:?}", s.zero);
            assert_eq!(s.pos.mag(), s.neg.mag());
            let back = fortescue(inverse_fortescue(s));
            assert!((back.pos - s.pos).mag() < 1e-12 && (back.neg - s.neg).mag() < 1e-12);
        }
    }

    #[test]
    fn h_one_is_no_sag() {
        for k in SagType::ALL {
            let s = sag_sequences(SagClass::new(k, 1.0).unwrap());
            assert!(
                at(s.pos, 1.0, 0.0) && s.neg.mag() < 1e-12 && s.zero.mag() < 1e-12,
                "{k:?}"
            );
        }
        assert!(SagClass::new(SagType::C, 1.5).is_err());
    }

    #[test]
    fn internal_singular_reference_values() {
        let f = reference_internal_factor();
        let s = make_internal_singular(Phasor::new(0.5, 0.0), f);
        assert_eq!(s.neg, s.pos + f);
        let z_eq = PlantParams::default().z_eq_nominal().phasor();
        let i = f / z_eq;
        let ud_pos = s.pos + z_eq * i;
        assert!((ud_pos - s.neg).mag() < 1e-15);
        // Close to the quoted 0.56∠25.49°; the exact map of the quoted
        // inputs lands at 25.2°.
        assert!((ud_pos.mag() - 0.56).abs() < 0.01);
        assert!((ud_pos.angle_deg() - 25.49).abs() < 0.5);
        assert_eq!(
            make_internal_singular(Phasor::new(0.5, 0.0), Phasor::ZERO).neg,
            Phasor::new(0.5, 0.0)
        );
    }

    #[test]
    fn impedance_levels() {
        assert_eq!(make_impedance_study(DeviationLevel::FivePct).upper[0], 0.95);
        assert_eq!(make_impedance_study(DeviationLevel::TenPct).upper[2], 1.13);
        assert_eq!(
            make_impedance_study(DeviationLevel::None),
            ArmMultipliers::default()
        );
        let p = impedance_study(DeviationLevel::FivePct).plant();
        assert!((p.z_arm_upper[0].x - 0.95 * crate::plant::Z_ARM_NOMINAL.x).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip_and_strictness() {
        for s in shipped() {
            let text = s.to_toml();
            assert_eq!(ScenarioSpec::from_toml(&text).unwrap(), s);
        }
        let mut text = balanced().to_toml();
        text = text.replace("[setpoints]", "[setpoints]\nbogus = 1.0");
        let err = ScenarioSpec::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn timing_is_validated() {
        let mut s = balanced();
        s.fault.t_clear = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn held_current_through_fault() {
        let s = internal_singular(SagType::C);
        let i_pre = (Phasor::new(s.setpoints.p, s.setpoints.q) / s.pre_fault().pos).conj();
        let (p, q) = s.setpoints_at(3.0);
        let i_fault = (Phasor::new(p, q) / s.fault_grid().pos).conj();
        assert!((i_pre - i_fault).mag() < 1e-14);
        assert!((i_pre.mag() - 0.9404).abs() < 1e-3);
    }
}
