use mmc::scenario::{self, SagType};
use mmc::simrunner::{
    batch, run, run_summary, trip_from_trace, BatchCell, SimConfig, TraceRecord, TripCause,
};
use mmc::{MethodId, ScenarioSpec};

fn short(mut spec: ScenarioSpec) -> ScenarioSpec {
    spec.run.duration = 1.2;
    spec.fault.t_fault = 0.4;
    spec.fault.t_clear = 1.0;
    spec
}

fn window(cfg: &SimConfig) -> usize {
    (0.02 / cfg.dt).round() as usize
}

#[test]
fn trip_is_a_function_of_the_trace() {
    let spec = short(scenario::ac_singular(SagType::C));
    let mut cfg = SimConfig::new(MethodId::M0);
    cfg.decimation = 1;
    let (r, trace) = run(&spec, cfg).unwrap();
    assert!(r.tripped);
    let replay = trip_from_trace(&trace, r.nominal_arm_energy, cfg.dt, window(&cfg));
    assert_eq!(replay.map(|x| x.0), r.trip_time);
    assert_eq!(replay.map(|x| x.1), r.trip_cause);
    assert!(trace.last().unwrap().tripped);

    // Same answer from the CSV text.
    let mut buf = Vec::new();
    mmc::simrunner::write_trace(&mut buf, &trace).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let parsed: Vec<TraceRecord> = text
        .lines()
        .skip(1)
        .map(|l| TraceRecord::parse_csv(l).unwrap())
        .collect();
    assert_eq!(
        trip_from_trace(&parsed, r.nominal_arm_energy, cfg.dt, window(&cfg)),
        replay
    );
}

#[test]
fn surviving_trace_replays_clean() {
    let spec = short(scenario::internal_singular(SagType::C));
    let mut cfg = SimConfig::new(MethodId::M4);
    cfg.decimation = 1;
    let (r, trace) = run(&spec, cfg).unwrap();
    assert!(!r.tripped);
    assert_eq!(
        trip_from_trace(&trace, r.nominal_arm_energy, cfg.dt, window(&cfg)),
        None
    );
}

#[test]
fn trace_has_fixed_stride() {
    let spec = short(scenario::balanced());
    let cfg = SimConfig::new(MethodId::M2);
    let (r, trace) = run(&spec, cfg).unwrap();
    assert!(!r.tripped);
    let stride = cfg.dt * cfg.decimation as f64;
    assert_eq!(
        trace.len(),
        1 + (spec.run.duration / stride).round() as usize
    );
    for (i, rec) in trace.iter().enumerate() {
        assert!((rec.t - i as f64 * stride).abs() < 1e-9);
        for k in 0..3 {
            assert_eq!(rec.e_vert[k], rec.e_u[k] - rec.e_l[k]);
        }
    }
    assert_eq!(r.end_time, trace.last().unwrap().t);
}

#[test]
fn single_cell_batch_equals_run() {
    let spec = short(scenario::internal_singular(SagType::D));
    let cfg = SimConfig::new(MethodId::M2);
    let cells = [BatchCell {
        scenario: spec.clone(),
        method: MethodId::M2,
    }];
    let b = batch(&cells, SimConfig::new(MethodId::M0), 2);
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].as_ref().unwrap(), &run(&spec, cfg).unwrap().0);
    assert_eq!(b[0].as_ref().unwrap(), &run_summary(&spec, cfg).unwrap());
}

#[test]
fn batch_reports_errors_without_aborting() {
    let good = short(scenario::balanced());
    let mut bad = good.clone();
    bad.fault.t_clear = 0.1;
    let cells = [
        BatchCell {
            scenario: bad,
            method: MethodId::M4,
        },
        BatchCell {
            scenario: good,
            method: MethodId::M4,
        },
    ];
    let out = batch(&cells, SimConfig::new(MethodId::M0), 2);
    assert!(out[0].is_err());
    assert!(out[1].as_ref().is_ok_and(|r| !r.tripped));
}

#[test]
fn method_two_trips_fast_at_the_internal_singular_point() {
    let spec = short(scenario::internal_singular(SagType::C));
    let r = run_summary(&spec, SimConfig::new(MethodId::M2)).unwrap();
    let t = r.trip_time.expect("method 2 trips");
    assert!(
        t > spec.fault.t_fault && t - spec.fault.t_fault < 0.15,
        "{t}"
    );
    assert!(matches!(
        r.trip_cause,
        Some(TripCause::Overcurrent | TripCause::EnergyBound)
    ));
}

#[test]
fn rejects_coarse_steps() {
    let mut cfg = SimConfig::new(MethodId::M4);
    cfg.dt = 150e-6;
    assert!(run_summary(&scenario::balanced(), cfg).is_err());
}
