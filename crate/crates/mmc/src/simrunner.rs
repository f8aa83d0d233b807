//! Fixed-step closed loop: plant, controllers and reference calculation,
//! fault scheduling, trip detection, traces and run metrics.

use std::io::Write;

use rayon::prelude::*;

use crate::control::{
    arm_commands, AdditiveCurrentController, EnergyController, EnergyRefs, GridCurrentController,
    ENERGY_BW,
};
use crate::error::Error;
use crate::phasors::{
    samples_per_period, synthesize, Phasor, SequenceSet, SlidingMean, PHASE_SHIFT,
};
use crate::plant::{
    available_voltages, clamp_halfbridge, measure, step_rk4, ArmCommand, History, Meter, MmcState,
    PlantParams, WindowedMeasurement, Z_ARM_NOMINAL,
};
use crate::refcalc::{
    assemble_m, compute_udiff0dc, dc_additive_refs, grid_current_ref, method_voltages,
    solve_ac_additive_with, AdditiveCurrentRefs, MethodId, SolveDiagnostics, Udiff0dcRegulator,
};
use crate::scenario::ScenarioSpec;

pub const DEFAULT_DT: f64 = 50e-6;
pub const DEFAULT_DECIMATION: usize = 20;
/// Arm current trip level and how long it must persist.
pub const TRIP_CURRENT: f64 = 2.0;
pub const TRIP_SUSTAIN: f64 = 1e-3;
/// Allowed arm energy band relative to nominal.
pub const TRIP_ENERGY_BAND: (f64, f64) = (0.5, 1.5);
/// Vertical energy band for settling, relative to nominal arm energy, and
/// how long it must hold.
pub const SETTLE_BAND: f64 = 0.02;
pub const SETTLE_HOLD: f64 = 0.5;
/// Singular value cut of the pseudoinverse inside the loop, relative to
/// `σ_max`. Closed-loop `M` rarely gets near exact singularity, so a cut at
/// round-off level would make Methods 1 and 3 behave like 0 and 2.
pub const LOOP_PINV_RTOL: f64 = 0.4;

/// How the commanded `U_diff0DC` enters the AC additive current solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum U0dcWiring {
    /// The AC currents deliver the full vertical request and `U_diff0DC`
    /// acts on top of them; what the AC channel cannot reach is made up by
    /// the regulator driving `U_diff0DC`.
    Parallel,
    /// The AC currents are solved for `P + 2·U_diff0DC·I_dc`, cancelling what
    /// `U_diff0DC` moves.
    Compensated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub method: MethodId,
    pub dt: f64,
    /// Log every `decimation`-th step; 1 logs every step.
    pub decimation: usize,
    pub wiring: U0dcWiring,
    /// Singular value cut used by Methods 1 and 3 inside the loop.
    pub pinv_rtol: f64,
}

impl SimConfig {
    pub fn new(method: MethodId) -> Self {
        SimConfig {
            method,
            dt: DEFAULT_DT,
            decimation: DEFAULT_DECIMATION,
            wiring: U0dcWiring::Parallel,
            pinv_rtol: LOOP_PINV_RTOL,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.dt > 0.0 && self.dt <= 100e-6) {
            return Err(Error::Config(format!(
                "dt = {} s outside (0, 100 µs]",
                self.dt
            )));
        }
        if self.decimation == 0 {
            return Err(Error::Config("decimation must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub i_s: [f64; 3],
    pub i_sum: [f64; 3],
    pub i_dc: f64,
    pub u_u: [f64; 3],
    pub u_l: [f64; 3],
    pub e_u: [f64; 3],
    pub e_l: [f64; 3],
    pub e_vert: [f64; 3],
    pub u0dc: f64,
    pub det_m: f64,
    pub singular: bool,
    pub arm_clamped: bool,
    pub u0dc_saturated: bool,
    pub tripped: bool,
}

pub const TRACE_HEADER: &str = "t,i_s_a,i_s_b,i_s_c,i_sum_a,i_sum_b,i_sum_c,i_dc,\
u_u_a,u_u_b,u_u_c,u_l_a,u_l_b,u_l_c,e_u_a,e_u_b,e_u_c,e_l_a,e_l_b,e_l_c,\
e_vert_a,e_vert_b,e_vert_c,u0dc,det_m,singular,arm_clamped,u0dc_saturated,tripped";

impl TraceRecord {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut line = format!("{}", self.t);
        let floats = self
            .i_s
            .iter()
            .chain(&self.i_sum)
            .chain(std::iter::once(&self.i_dc))
            .chain(&self.u_u)
            .chain(&self.u_l)
            .chain(&self.e_u)
            .chain(&self.e_l)
            .chain(&self.e_vert)
            .chain([&self.u0dc, &self.det_m]);
        for v in floats {
            line.push(',');
            line.push_str(&v.to_string());
        }
        for b in [
            self.singular,
            self.arm_clamped,
            self.u0dc_saturated,
            self.tripped,
        ] {
            line.push_str(if b { ",1" } else { ",0" });
        }
        writeln!(w, "{line}")
    }

    /// Parses a line written by [`TraceRecord::write_csv`].
    pub fn parse_csv(line: &str) -> Result<Self, Error> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 29 {
            return Err(Error::Parse(format!(
                "trace line has {} fields, expected 29",
                f.len()
            )));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| Error::Parse(format!("field {i}: {e}")))
        };
        let flag = |i: usize| match f[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Parse(format!("field {i}: bad flag `{other}`"))),
        };
        let tri = |i: usize| -> Result<[f64; 3], Error> { Ok([num(i)?, num(i + 1)?, num(i + 2)?]) };
        Ok(TraceRecord {
            t: num(0)?,
            i_s: tri(1)?,
            i_sum: tri(4)?,
            i_dc: num(7)?,
            u_u: tri(8)?,
            u_l: tri(11)?,
            e_u: tri(14)?,
            e_l: tri(17)?,
            e_vert: tri(20)?,
            u0dc: num(23)?,
            det_m: num(24)?,
            singular: flag(25)?,
            arm_clamped: flag(26)?,
            u0dc_saturated: flag(27)?,
            tripped: flag(28)?,
        })
    }

    pub fn i_upper(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.i_s[k] / 2.0 + self.i_sum[k])
    }

    pub fn i_lower(&self) -> [f64; 3] {
        std::array::from_fn(|k| -self.i_s[k] / 2.0 + self.i_sum[k])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripCause {
    Overcurrent,
    EnergyBound,
    NumericalDivergence,
}

impl TripCause {
    pub fn as_str(self) -> &'static str {
        match self {
            TripCause::Overcurrent => "overcurrent",
            TripCause::EnergyBound => "energy_bound",
            TripCause::NumericalDivergence => "numerical_divergence",
        }
    }
}

/// Protection: sustained arm overcurrent, a period-averaged arm energy out
/// of band, or a non-finite state.
///
/// The energy band applies to one-period means, so the natural 50/100 Hz
/// ripple (about ±25% of nominal at rated current) does not count as a
/// violation; the means start from nominal.
#[derive(Clone, Debug)]
pub struct TripMonitor {
    e_lo: f64,
    e_hi: f64,
    sustain_steps: usize,
    over: usize,
    e_avg: [SlidingMean; 6],
}

impl TripMonitor {
    pub fn new(nominal_energy: f64, dt: f64, window: usize) -> Self {
        TripMonitor {
            e_lo: TRIP_ENERGY_BAND.0 * nominal_energy,
            e_hi: TRIP_ENERGY_BAND.1 * nominal_energy,
            sustain_steps: ((TRIP_SUSTAIN / dt).round() as usize).max(1),
            over: 0,
            e_avg: std::array::from_fn(|_| SlidingMean::new(window, nominal_energy)),
        }
    }

    /// Feeds one step; call once per step from the first one on.
    pub fn check(
        &mut self,
        i_u: [f64; 3],
        i_l: [f64; 3],
        e_u: [f64; 3],
        e_l: [f64; 3],
    ) -> Option<TripCause> {
        let all = i_u.iter().chain(&i_l).chain(&e_u).chain(&e_l);
        if all.clone().any(|v| !v.is_finite()) {
            return Some(TripCause::NumericalDivergence);
        }
        for (m, e) in self.e_avg.iter_mut().zip(e_u.iter().chain(&e_l)) {
            m.push(*e);
        }
        let out = self.e_avg.iter().any(|m| {
            let e = m.mean();
            e < self.e_lo || e > self.e_hi
        });
        if i_u.iter().chain(&i_l).any(|i| i.abs() > TRIP_CURRENT) {
            self.over += 1;
        } else {
            self.over = 0;
        }
        if out {
            return Some(TripCause::EnergyBound);
        }
        (self.over >= self.sustain_steps).then_some(TripCause::Overcurrent)
    }
}

/// Replays the trip monitor over a full-rate trace that starts at `t = 0`.
pub fn trip_from_trace(
    records: &[TraceRecord],
    nominal_energy: f64,
    dt: f64,
    window: usize,
) -> Option<(f64, TripCause)> {
    let mut m = TripMonitor::new(nominal_energy, dt, window);
    records.iter().find_map(|r| {
        m.check(r.i_upper(), r.i_lower(), r.e_u, r.e_l)
            .map(|c| (r.t, c))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub scenario: String,
    pub method: MethodId,
    pub tripped: bool,
    pub trip_time: Option<f64>,
    pub trip_cause: Option<TripCause>,
    /// Period-averaged `E_u − E_l` per phase at the end of the run.
    pub vert_mismatch_end: [f64; 3],
    pub max_abs_u0dc: f64,
    /// Fraction of steps with `U_diff0DC` clamped.
    pub u0dc_saturation_duty: f64,
    /// Longest unbroken stretch with `U_diff0DC` clamped, in seconds.
    pub u0dc_longest_saturation: f64,
    /// Seconds from clearance until the vertical energies stay settled.
    pub settling_time: Option<f64>,
    pub u0dc_end: f64,
    pub arm_energy_end: [f64; 6],
    pub leg_energy_end: [f64; 3],
    pub i_sum_neg_end: f64,
    /// Largest `|I_dc,50Hz|·√2 / |I_dc|` over the settled windows.
    pub idc_ripple_ratio: f64,
    /// `|U_diff⁺ − U_diff⁻|` just before clearance.
    pub udiff_gap_fault_end: f64,
    /// Largest period-averaged `|E_u − E_l|` per phase while faulted.
    pub peak_vert_fault: [f64; 3],
    pub min_arm_voltage: f64,
    pub singular_steps: usize,
    pub nominal_arm_energy: f64,
    pub end_time: f64,
}

pub const RESULT_HEADER: &str = "scenario,method,tripped,trip_time,trip_cause,\
vert_mismatch_a,vert_mismatch_b,vert_mismatch_c,max_abs_u0dc,u0dc_saturation_duty,\
u0dc_longest_saturation,settling_time,u0dc_end,e_u_a,e_u_b,e_u_c,e_l_a,e_l_b,e_l_c,\
i_sum_neg_end,idc_ripple_ratio,udiff_gap_fault_end,peak_vert_fault_a,peak_vert_fault_b,\
peak_vert_fault_c,min_arm_voltage,singular_steps,end_time";

impl RunResult {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut cols = vec![
            self.scenario.clone(),
            self.method.to_string(),
            (self.tripped as u8).to_string(),
            opt(self.trip_time),
            self.trip_cause
                .map(|c| c.as_str().to_string())
                .unwrap_or_default(),
        ];
        cols.extend(self.vert_mismatch_end.iter().map(|v| v.to_string()));
        cols.push(self.max_abs_u0dc.to_string());
        cols.push(self.u0dc_saturation_duty.to_string());
        cols.push(self.u0dc_longest_saturation.to_string());
        cols.push(opt(self.settling_time));
        cols.push(self.u0dc_end.to_string());
        cols.extend(self.arm_energy_end.iter().map(|v| v.to_string()));
        cols.push(self.i_sum_neg_end.to_string());
        cols.push(self.idc_ripple_ratio.to_string());
        cols.push(self.udiff_gap_fault_end.to_string());
        cols.extend(self.peak_vert_fault.iter().map(|v| v.to_string()));
        cols.push(self.min_arm_voltage.to_string());
        cols.push(self.singular_steps.to_string());
        cols.push(self.end_time.to_string());
        cols.join(",")
    }
}

/// One closed-loop simulation instance.
pub struct Simulation {
    spec: ScenarioSpec,
    params: PlantParams,
    cfg: SimConfig,
    u_dc: f64,
    omega: f64,
    e_nom: f64,
    state: MmcState,
    applied: ArmCommand,
    meter: Meter,
    energy: EnergyController,
    energy_refs: EnergyRefs,
    grid_ctl: GridCurrentController,
    add_ctl: AdditiveCurrentController,
    u0_reg: Udiff0dcRegulator,
    u0dc: f64,
    /// Half-period mean of the AC power per phase, fed forward to the DC refs.
    p_ff: [SlidingMean; 3],
    /// Pre-fault grid current, held while the fault is in the windows.
    i_pre: Phasor,
    i_s_ref: Phasor,
    monitor: TripMonitor,
    step: u64,
    steps_total: u64,
    stats: Stats,
}

#[derive(Clone, Debug, Default)]
struct Stats {
    max_abs_u0dc: f64,
    sat_steps: u64,
    sat_run: u64,
    sat_longest: u64,
    singular_steps: usize,
    min_arm_voltage: f64,
    settle_since: Option<f64>,
    settled_at: Option<f64>,
    idc_ripple: f64,
    udiff_gap: f64,
    peak_vert_fault: [f64; 3],
    last: WindowedMeasurement,
}

/// Smallest `n` with `n·dt ≥ t` (to within rounding).
fn step_index(t: f64, dt: f64) -> u64 {
    (t / dt - 1e-9).ceil().max(0.0) as u64
}

impl Simulation {
    pub fn new(spec: &ScenarioSpec, cfg: SimConfig) -> Result<Self, Error> {
        spec.validate()?;
        cfg.validate()?;
        let params = spec.plant();
        params.validate()?;
        let omega = params.omega();
        let n = samples_per_period(omega, cfg.dt)?;
        let u_dc = params.u_dc();
        let e_nom = params.nominal_arm_energy();
        let z_eq = params.z_eq_nominal();

        // Start in the pre-fault steady state.
        let pre = spec.pre_fault();
        let (p, q) = spec.setpoints_at(0.0);
        let i_s = grid_current_ref(p, q, pre.pos)?;
        let is_seq = SequenceSet::balanced(i_s);
        let ud_seq = SequenceSet::new(pre.pos + z_eq.phasor() * i_s, pre.neg, Phasor::ZERO);
        let i_dc: [f64; 3] =
            std::array::from_fn(|k| (ud_seq.phase(k) * is_seq.phase(k).conj()).re / u_dc);
        let wave = |s: SequenceSet| {
            move |k: usize, t: f64| {
                synthesize(s.pos, omega, t, PHASE_SHIFT[k])
                    + synthesize(s.neg, omega, t, -PHASE_SHIFT[k])
            }
        };
        let (wg, ws, wd) = (wave(pre), wave(is_seq), wave(ud_seq));
        let wsum = |k: usize, _t: f64| i_dc[k];
        let hist = History {
            u_g: &wg,
            i_s: &ws,
            u_diff: &wd,
            i_sum: &wsum,
            e_u: [e_nom; 3],
            e_l: [e_nom; 3],
        };
        let meter = Meter::new(n, cfg.dt, &hist);
        let state = MmcState {
            t: 0.0,
            i_s: std::array::from_fn(|k| ws(k, 0.0)),
            i_sum: i_dc,
            e_u: [e_nom; 3],
            e_l: [e_nom; 3],
        };
        let steps_total = step_index(spec.run.duration, cfg.dt);
        // Per-phase power is a mean plus a 100 Hz term, so half a period
        // is enough to average it.
        let p_ff = std::array::from_fn(|k| {
            let mut m = SlidingMean::new(n / 2, 0.0);
            for i in 0..n / 2 {
                let t = (i as f64 - (n / 2) as f64) * cfg.dt;
                m.push(wd(k, t) * ws(k, t));
            }
            m
        });
        Ok(Simulation {
            spec: spec.clone(),
            cfg,
            u_dc,
            omega,
            e_nom,
            state,
            applied: ArmCommand::default(),
            meter,
            energy: EnergyController::new(ENERGY_BW, params.f_nom, cfg.dt),
            energy_refs: EnergyRefs::uniform(e_nom),
            grid_ctl: GridCurrentController::new(z_eq, omega),
            add_ctl: AdditiveCurrentController::new(Z_ARM_NOMINAL, omega),
            u0_reg: Udiff0dcRegulator::default(),
            u0dc: 0.0,
            p_ff,
            i_pre: i_s,
            i_s_ref: i_s,
            monitor: TripMonitor::new(e_nom, cfg.dt, n),
            step: 0,
            steps_total,
            stats: Stats {
                min_arm_voltage: f64::INFINITY,
                ..Default::default()
            },
            params,
        })
    }

    pub fn state(&self) -> &MmcState {
        &self.state
    }

    pub fn windowed(&self) -> WindowedMeasurement {
        self.meter.snapshot()
    }

    fn grid_voltages(&self, t: f64) -> [f64; 3] {
        let s = self.spec.grid_at(t);
        std::array::from_fn(|k| {
            synthesize(s.pos, self.omega, t, PHASE_SHIFT[k])
                + synthesize(s.neg, self.omega, t, -PHASE_SHIFT[k])
                + synthesize(s.zero, self.omega, t, 0.0)
        })
    }

    /// Without fault setpoints the pre-fault current is held through the
    /// fault and for one window after clearance, so the grid current does
    /// not follow the sliding `|U_g⁺|` estimate while it is stale.
    fn holds_current(&self, step: u64, fault: u64, clear: u64, window: u64) -> bool {
        let sp = &self.spec.setpoints;
        sp.p_fault.is_none() && sp.q_fault.is_none() && step >= fault && step < clear + window
    }

    /// Runs to the end or to a trip, handing every decimated record to `sink`.
    pub fn run(mut self, sink: &mut dyn FnMut(&TraceRecord)) -> RunResult {
        let dt = self.cfg.dt;
        let t_fault = self.spec.fault.t_fault;
        let t_clear = self.spec.fault.t_clear;
        let fault_step = step_index(t_fault, dt);
        let clear_step = step_index(t_clear, dt);
        // Ripple checks skip this long after each event.
        let quiet = step_index(0.5, dt);
        let hold_steps = samples_per_period(self.omega, dt).expect("validated") as u64;
        let settle_hold = SETTLE_HOLD;
        let mut trip: Option<(f64, TripCause)> = None;

        while self.step <= self.steps_total {
            let t = self.step as f64 * dt;
            self.state.t = t;
            let u_g = self.grid_voltages(t);
            let m = measure(&self.state, &self.applied);
            if self.step > 0 {
                self.meter.push(&m, u_g, self.applied.u_diff());
            }
            let w = self.meter.snapshot();

            let cause = self.monitor.check(m.i_u, m.i_l, m.e_u, m.e_l);

            // Control.
            if self.holds_current(self.step, fault_step, clear_step, hold_steps) {
                self.i_s_ref = self.i_pre;
            } else {
                let (p_set, q_set) = self.spec.setpoints_at(t);
                if let Ok(i) = grid_current_ref(p_set, q_set, w.u_g.pos) {
                    self.i_s_ref = i;
                }
            }
            let targets = self
                .energy
                .energy_loops(w.e_u, w.e_l, &self.energy_refs, dt);
            if self.step > 0 {
                let ud = self.applied.u_diff();
                for k in 0..3 {
                    self.p_ff[k].push(ud[k] * m.i_s[k]);
                }
            }
            let ff: [f64; 3] = std::array::from_fn(|k| self.p_ff[k].mean());
            let i_dc = dc_additive_refs(
                ff.iter().sum::<f64>() + targets.p_total,
                ff[0] - ff[1] + targets.p_ab,
                ff[0] - ff[2] + targets.p_ac,
                self.u_dc,
            )
            .expect("u_dc > 0");
            if self.cfg.method.uses_u0dc() {
                if let Ok(raw) = compute_udiff0dc(targets.p_vert, i_dc) {
                    self.u0dc = self.u0_reg.regulate(raw, dt);
                }
            }
            let method = self.cfg.method;
            let volts = method_voltages(method.voltage_source(), &w.u_g, &w.u_diff);
            let mat = assemble_m(&volts, &w.i_s, Z_ARM_NOMINAL, method.includes_zarm());
            let u0_rhs = match self.cfg.wiring {
                U0dcWiring::Parallel => 0.0,
                U0dcWiring::Compensated => self.u0dc,
            };
            let (refs, diag) = match solve_ac_additive_with(
                method,
                &mat,
                targets.p_vert,
                i_dc,
                u0_rhs,
                self.cfg.pinv_rtol,
            ) {
                Ok(r) => r,
                // Non-finite inputs: carry NaN forward so the divergence is
                // seen by the monitor and lands in the trace.
                Err(_) => (
                    AdditiveCurrentRefs::from_solution([f64::NAN; 3].into(), i_dc),
                    SolveDiagnostics {
                        det_m: mat.determinant(),
                        condition: f64::NAN,
                        singular_flag: false,
                        method_used: method,
                        pseudoinverse_used: method.uses_pinv(),
                        rank: 0,
                    },
                ),
            };
            let refs = if refs.x.iter().all(|v| v.is_finite()) {
                refs
            } else {
                AdditiveCurrentRefs::from_solution([f64::NAN; 3].into(), i_dc)
            };
            let i_ref = SequenceSet::balanced(self.i_s_ref);
            let u_diff = self.grid_ctl.grid_current_loop(m.i_s, &i_ref, u_g, t, dt);
            let u_sum = self
                .add_ctl
                .additive_current_loop(m.i_sum, &refs, self.u_dc, t, dt);
            let cmd = arm_commands(u_diff, u_sum, self.u0dc);
            let (applied, flags) =
                clamp_halfbridge(cmd, &available_voltages(&self.params, &self.state));
            // A NaN command leaves the clamp as NaN; the state then diverges
            // and the monitor reports it on the next step.
            self.applied = applied;

            // Bookkeeping.
            let s = &mut self.stats;
            s.max_abs_u0dc = s.max_abs_u0dc.max(self.u0dc.abs());
            if self.u0_reg.saturated && method.uses_u0dc() {
                s.sat_steps += 1;
                s.sat_run += 1;
                s.sat_longest = s.sat_longest.max(s.sat_run);
            } else {
                s.sat_run = 0;
            }
            s.singular_steps += diag.singular_flag as usize;
            for v in applied.u_u.iter().chain(&applied.u_l) {
                s.min_arm_voltage = s.min_arm_voltage.min(*v);
            }
            let settled_window = (self.step >= fault_step + quiet && self.step < clear_step)
                || self.step >= clear_step + quiet;
            if settled_window && w.i_dc_dc.abs() > 1e-6 {
                s.idc_ripple = s
                    .idc_ripple
                    .max(std::f64::consts::SQRT_2 * w.i_dc_ac.mag() / w.i_dc_dc.abs());
            }
            if self.step < clear_step {
                s.udiff_gap = (w.u_diff.pos - w.u_diff.neg).mag();
            }
            let ev = w.e_vert();
            if self.step >= fault_step && self.step < clear_step {
                for k in 0..3 {
                    s.peak_vert_fault[k] = s.peak_vert_fault[k].max(ev[k].abs());
                }
            }
            if self.step >= clear_step {
                if ev.iter().all(|e| e.abs() < SETTLE_BAND * self.e_nom) {
                    let since = *s.settle_since.get_or_insert(t);
                    if s.settled_at.is_none() && t - since >= settle_hold {
                        s.settled_at = Some(since - t_clear);
                    }
                } else {
                    s.settle_since = None;
                }
            }
            s.last = w;

            let rec = TraceRecord {
                t,
                i_s: m.i_s,
                i_sum: m.i_sum,
                i_dc: m.i_dc,
                u_u: applied.u_u,
                u_l: applied.u_l,
                e_u: m.e_u,
                e_l: m.e_l,
                e_vert: std::array::from_fn(|k| m.e_u[k] - m.e_l[k]),
                u0dc: self.u0dc,
                det_m: diag.det_m,
                singular: diag.singular_flag,
                arm_clamped: flags.any(),
                u0dc_saturated: self.u0_reg.saturated && method.uses_u0dc(),
                tripped: cause.is_some(),
            };
            if let Some(c) = cause {
                trip = Some((t, c));
                sink(&rec);
                break;
            }
            if self.step % self.cfg.decimation as u64 == 0 {
                sink(&rec);
            }
            if self.step == self.steps_total {
                break;
            }
            let next = step_rk4(
                &self.params,
                &self.state,
                &self.applied,
                dt,
                self.u_dc,
                |tt| {
                    let s = self.spec.grid_at(t);
                    std::array::from_fn(|k| {
                        synthesize(s.pos, self.omega, tt, PHASE_SHIFT[k])
                            + synthesize(s.neg, self.omega, tt, -PHASE_SHIFT[k])
                            + synthesize(s.zero, self.omega, tt, 0.0)
                    })
                },
            );
            self.state = next;
            self.step += 1;
        }
        self.finish(trip)
    }

    fn finish(self, trip: Option<(f64, TripCause)>) -> RunResult {
        let s = &self.stats;
        let w = &s.last;
        let dt = self.cfg.dt;
        let steps = (self.step + 1) as f64;
        let leg = w.e_leg();
        RunResult {
            scenario: self.spec.name().to_string(),
            method: self.cfg.method,
            tripped: trip.is_some(),
            trip_time: trip.map(|t| t.0),
            trip_cause: trip.map(|t| t.1),
            vert_mismatch_end: w.e_vert(),
            max_abs_u0dc: s.max_abs_u0dc,
            u0dc_saturation_duty: s.sat_steps as f64 / steps,
            u0dc_longest_saturation: s.sat_longest as f64 * dt,
            settling_time: s.settled_at,
            u0dc_end: self.u0dc,
            arm_energy_end: [w.e_u[0], w.e_u[1], w.e_u[2], w.e_l[0], w.e_l[1], w.e_l[2]],
            leg_energy_end: leg,
            i_sum_neg_end: w.i_sum.neg.mag(),
            idc_ripple_ratio: s.idc_ripple,
            udiff_gap_fault_end: s.udiff_gap,
            peak_vert_fault: s.peak_vert_fault,
            min_arm_voltage: s.min_arm_voltage,
            singular_steps: s.singular_steps,
            nominal_arm_energy: self.e_nom,
            end_time: self.step as f64 * dt,
        }
    }
}

/// Runs one scenario and collects the decimated trace.
pub fn run(spec: &ScenarioSpec, cfg: SimConfig) -> Result<(RunResult, Vec<TraceRecord>), Error> {
    let sim = Simulation::new(spec, cfg)?;
    let mut trace = Vec::new();
    let r = sim.run(&mut |rec| trace.push(*rec));
    Ok((r, trace))
}

/// Runs one scenario without keeping a trace.
pub fn run_summary(spec: &ScenarioSpec, cfg: SimConfig) -> Result<RunResult, Error> {
    Ok(Simulation::new(spec, cfg)?.run(&mut |_| {}))
}

#[derive(Clone, Debug)]
pub struct BatchCell {
    pub scenario: ScenarioSpec,
    pub method: MethodId,
}

/// Runs every cell on a pool of `parallelism` threads. Results come back in
/// cell order and do not depend on the thread count.
pub fn batch(
    cells: &[BatchCell],
    base: SimConfig,
    parallelism: usize,
) -> Vec<Result<RunResult, Error>> {
    let job = |c: &BatchCell| {
        run_summary(
            &c.scenario,
            SimConfig {
                method: c.method,
                ..base
            },
        )
    };
    match rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
    {
        Ok(pool) => pool.install(|| cells.par_iter().map(job).collect()),
        Err(_) => cells.iter().map(job).collect(),
    }
}

/// Writes the result table.
pub fn write_results(w: &mut impl Write, rows: &[RunResult]) -> std::io::Result<()> {
    writeln!(w, "{RESULT_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn write_trace(w: &mut impl Write, records: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in records {
        r.write_csv(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monitor_contract() {
        let e = 0.0135;
        let mut m = TripMonitor::new(e, 50e-6, 400);
        assert_eq!(m.check([0.5; 3], [0.5; 3], [e; 3], [e; 3]), None);
        let mut hit = None;
        for i in 0..40 {
            if let Some(c) = m.check([2.5, 0.0, 0.0], [0.5; 3], [e; 3], [e; 3]) {
                hit = Some((i, c));
                break;
            }
        }
        let (i, c) = hit.expect("2.5 pu for 2 ms trips");
        assert_eq!(c, TripCause::Overcurrent);
        assert_eq!(i + 1, 20);
        let mut m = TripMonitor::new(e, 50e-6, 4);
        for _ in 0..3 {
            assert_eq!(m.check([0.5; 3], [0.5; 3], [0.4 * e, e, e], [e; 3]), None);
        }
        assert_eq!(
            m.check([0.5; 3], [0.5; 3], [0.4 * e, e, e], [e; 3]),
            Some(TripCause::EnergyBound)
        );
        // Ripple that averages to nominal is fine.
        let mut m = TripMonitor::new(e, 50e-6, 4);
        for k in 0..40 {
            let x = if k % 2 == 0 { 1.6 * e } else { 0.4 * e };
            assert_eq!(m.check([0.5; 3], [0.5; 3], [x; 3], [e; 3]), None);
        }
        assert_eq!(
            m.check([f64::NAN, 0.0, 0.0], [0.5; 3], [e; 3], [e; 3]),
            Some(TripCause::NumericalDivergence)
        );
    }

    #[test]
    fn short_overcurrent_does_not_trip() {
        let e = 0.0135;
        let mut m = TripMonitor::new(e, 50e-6, 400);
        for i in 0..100 {
            let i_u = if i % 10 < 5 {
                [2.5, 0.0, 0.0]
            } else {
                [0.0; 3]
            };
            assert_eq!(m.check(i_u, [0.0; 3], [e; 3], [e; 3]), None);
        }
    }

    #[test]
    fn trace_line_round_trip() {
        let r = TraceRecord {
            t: 0.00105,
            i_s: [0.1, -0.2, 0.1],
            i_sum: [0.3, 0.31, 0.29],
            i_dc: 0.9,
            u_u: [1.0, 2.0, 3.0],
            u_l: [0.5, 0.25, 0.125],
            e_u: [0.0134, 0.0135, 0.0136],
            e_l: [0.0135; 3],
            e_vert: [-1e-4, 0.0, 1e-4],
            u0dc: -0.1,
            det_m: 1.5e-17,
            singular: true,
            arm_clamped: false,
            u0dc_saturated: true,
            tripped: false,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(TraceRecord::parse_csv(&line).unwrap(), r);
        assert_eq!(TRACE_HEADER.split(',').count(), 29);
        assert_eq!(RESULT_HEADER.split(',').count(), 28);
    }

    #[test]
    fn config_limits() {
        let mut c = SimConfig::new(MethodId::M4);
        assert!(c.validate().is_ok());
        c.dt = 200e-6;
        assert!(c.validate().is_err());
    }
}
