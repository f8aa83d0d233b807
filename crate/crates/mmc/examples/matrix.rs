//! Prints the trip/survive matrix for every canonical scenario and method.
//!
//! `cargo run --release -p mmc --example matrix [compensated]`

use mmc::refcalc::MethodId;
use mmc::scenario::canonical;
use mmc::simrunner::{batch, BatchCell, SimConfig, U0dcWiring};

fn main() {
    let mut base = SimConfig::new(MethodId::M0);
    if std::env::args().any(|a| a == "compensated") {
        base.wiring = U0dcWiring::Compensated;
    }
    let mut scen = canonical();
    scen.push(mmc::scenario::balanced());
    let cells: Vec<BatchCell> = scen
        .into_iter()
        .flat_map(|s| {
            MethodId::ALL.iter().map(move |&method| BatchCell {
                scenario: s.clone(),
                method,
            })
        })
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    for r in batch(&cells, base, threads) {
        let r = r.expect("scenario runs");
        let e = r.nominal_arm_energy;
        let trip = match (r.trip_time, r.trip_cause) {
            (Some(t), Some(c)) => format!("TRIP {:.4}s {}", t, c.as_str()),
            _ => "ok".into(),
        };
        println!(
            "{:<8} {}  {:<28} vert_end% {:>7.2} {:>7.2} {:>7.2}  u0max {:.3} sat {:.3}s settle {:?} peakA% {:.1} isneg {:.3} ripple {:.3}",
            r.scenario,
            r.method,
            trip,
            100.0 * r.vert_mismatch_end[0] / e,
            100.0 * r.vert_mismatch_end[1] / e,
            100.0 * r.vert_mismatch_end[2] / e,
            r.max_abs_u0dc,
            r.u0dc_longest_saturation,
            r.settling_time.map(|t| (t * 1000.0).round() / 1000.0),
            100.0 * r.peak_vert_fault[0] / e,
            r.i_sum_neg_end,
            r.idc_ripple_ratio,
        );
    }
}
