use std::path::Path;

use mmc::phasors::fortescue;
use mmc::scenario::{shipped, ScenarioSpec};

fn dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios"))
}

#[test]
fn shipped_files_match_the_builders() {
    let specs = shipped();
    assert_eq!(specs.len(), 13);
    for spec in &specs {
        let path = dir().join(format!("{}.toml", spec.name()));
        let text =
            std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(
            text,
            spec.to_toml(),
            "{} is stale, regenerate with the write_scenarios example",
            path.display()
        );
        assert_eq!(&ScenarioSpec::load(&path).unwrap(), spec);
    }
    let on_disk = std::fs::read_dir(dir()).unwrap().filter(|e| {
        e.as_ref()
            .unwrap()
            .path()
            .extension()
            .is_some_and(|x| x == "toml")
    });
    assert_eq!(on_disk.count(), specs.len());
}

#[test]
fn every_file_round_trips() {
    for spec in shipped() {
        let back = ScenarioSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_toml(), spec.to_toml());
    }
}

#[test]
fn grid_singular_files_have_equal_sequences() {
    for spec in shipped()
        .iter()
        .filter(|s| s.name().starts_with("ac_singular"))
    {
        let f = spec.fault_grid();
        assert!((f.pos.mag() - f.neg.mag()).abs() < 1e-12, "{}", spec.name());
        // The phase voltages behind the sequences stay within 1 pu.
        let abc = mmc::phasors::inverse_fortescue(f);
        for p in abc.to_array() {
            assert!(p.mag() <= 1.0 + 1e-12);
        }
        let again = fortescue(abc);
        assert!((again.pos - f.pos).mag() < 1e-12);
    }
}

#[test]
fn unknown_keys_and_bad_timing_are_rejected() {
    let base = shipped()[0].to_toml();
    let extra = base.replace("[run]\n", "[run]\ncolour = \"red\"\n");
    assert!(ScenarioSpec::from_toml(&extra).is_err());
    let late = base.replace("t_clear = 5.0", "t_clear = 9.0");
    assert!(ScenarioSpec::from_toml(&late).is_err());
    let extra_section = format!("{base}\n[plotting]\nx = 1\n");
    assert!(ScenarioSpec::from_toml(&extra_section).is_err());
}
