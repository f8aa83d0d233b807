//! `mmc-sim`: run one scenario, a method × scenario batch, or the numeric
//! self-checks.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 verification failure. A converter trip is a result, not an error.

mod verify;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmc::simrunner::{
    batch, write_results, BatchCell, RunResult, Simulation, RESULT_HEADER, TRACE_HEADER,
};
use mmc::{Error, MethodId, ScenarioSpec, SimConfig};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "mmc-sim",
    version,
    about = "Averaged MMC simulator under singular voltage sags"
)]
struct Cli {
    /// Print a machine-readable report on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one scenario with one method.
    Run(RunArgs),
    /// Simulate every method on every scenario and tabulate trips.
    Batch(BatchArgs),
    /// Cross-check the reference calculation against its oracles.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Integration step, e.g. `50us`, `0.05ms` or `5e-5`.
    #[arg(long, default_value = "50us")]
    dt: String,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Log every n-th step.
    #[arg(long, default_value_t = mmc::simrunner::DEFAULT_DECIMATION)]
    decimation: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// M0..M4; defaults to the scenario's `run.method`, then M4.
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct BatchArgs {
    /// Comma separated, e.g. `M0,M4`.
    #[arg(long, default_value = "M0,M1,M2,M3,M4")]
    methods: String,
    /// Glob of scenario files; the ten built-in sags when absent.
    #[arg(long)]
    scenarios: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Perturb one entry `ROW,COL` of every assembled matrix.
    #[arg(long, hide = true, value_name = "ROW,COL")]
    corrupt_m: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Verify,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Verify => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

/// Parses a duration with an optional `s`, `ms`, `us` or `µs` suffix.
fn parse_dt(text: &str) -> Result<f64, Failure> {
    let t = text.trim();
    // Dividing keeps `50us` bit-equal to `5e-5`.
    let (num, per_second) = [("µs", 1e6), ("us", 1e6), ("ms", 1e3), ("s", 1.0)]
        .iter()
        .find_map(|(suffix, k)| t.strip_suffix(suffix).map(|n| (n, *k)))
        .unwrap_or((t, 1.0));
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("--dt `{text}` is not a duration")))?;
    let dt = v / per_second;
    if !(1e-6..=100e-6).contains(&dt) {
        return Err(Failure::Usage(format!(
            "--dt {text} outside the allowed range 1us..=100us"
        )));
    }
    Ok(dt)
}

fn config(method: MethodId, c: &Common) -> Result<SimConfig, Failure> {
    let mut cfg = SimConfig::new(method);
    cfg.dt = parse_dt(&c.dt)?;
    cfg.decimation = c.decimation;
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn summary_json(r: &RunResult) -> serde_json::Value {
    json!({
        "scenario": r.scenario,
        "method": r.method.as_str(),
        "tripped": r.tripped,
        "trip_time": r.trip_time,
        "trip_cause": r.trip_cause.map(|c| c.as_str()),
        "vert_mismatch_end": r.vert_mismatch_end,
        "max_abs_u0dc": r.max_abs_u0dc,
        "u0dc_saturation_duty": r.u0dc_saturation_duty,
        "settling_time": r.settling_time,
    })
}

fn verdict(r: &RunResult) -> String {
    match (r.trip_time, r.trip_cause) {
        (Some(t), Some(c)) => format!("trip {t:.4}s {}", c.as_str()),
        _ => "survive".into(),
    }
}

fn cmd_run(a: &RunArgs, json_out: bool) -> Result<(), Failure> {
    let spec = ScenarioSpec::load(&a.scenario)?;
    let method = match (&a.method, spec.run.method) {
        (Some(m), _) => m.parse()?,
        (None, Some(m)) => m,
        (None, None) => MethodId::M4,
    };
    let cfg = config(method, &a.common)?;
    let sim = Simulation::new(&spec, cfg)?;
    std::fs::create_dir_all(&a.common.out).map_err(io_err(&a.common.out))?;
    let stem = format!("{}_{}", spec.name(), method);
    let trace_path = a.common.out.join(format!("{stem}.trace.csv"));
    let result_path = a.common.out.join(format!("{stem}.result.csv"));

    let mut trace = create(&trace_path)?;
    writeln!(trace, "{TRACE_HEADER}").map_err(io_err(&trace_path))?;
    let mut failed = None;
    let result = sim.run(&mut |rec| {
        if failed.is_none() {
            failed = rec.write_csv(&mut trace).err();
        }
    });
    if let Some(e) = failed {
        return Err(io_err(&trace_path)(e));
    }
    trace.flush().map_err(io_err(&trace_path))?;
    let mut out = create(&result_path)?;
    write_results(&mut out, std::slice::from_ref(&result)).map_err(io_err(&result_path))?;
    out.flush().map_err(io_err(&result_path))?;

    if json_out {
        println!("{}", summary_json(&result));
    } else {
        println!(
            "{} {}: {}",
            result.scenario,
            result.method,
            verdict(&result)
        );
        println!(
            "wrote {} and {}",
            trace_path.display(),
            result_path.display()
        );
    }
    Ok(())
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("MMC_SIM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!(
                "MMC_SIM_THREADS=`{v}` is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn scenarios(pattern: Option<&str>) -> Result<Vec<ScenarioSpec>, Failure> {
    let Some(pat) = pattern else {
        return Ok(mmc::scenario::canonical());
    };
    let paths = glob::glob(pat).map_err(|e| Failure::Usage(format!("--scenarios `{pat}`: {e}")))?;
    let mut files: Vec<PathBuf> = paths
        .filter_map(Result::ok)
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Usage(format!(
            "--scenarios `{pat}` matched no files"
        )));
    }
    files
        .iter()
        .map(|p| ScenarioSpec::load(p).map_err(Failure::from))
        .collect()
}

/// Result-table row for a run that could not be carried out.
fn error_row(scenario: &str, method: MethodId, e: &Error) -> String {
    let cols = RESULT_HEADER.split(',').count();
    let msg = e.to_string().replace([',', '\n'], ";");
    let mut row = vec![
        scenario.to_string(),
        method.to_string(),
        String::new(),
        String::new(),
        format!("error: {msg}"),
    ];
    row.resize(cols, String::new());
    row.join(",")
}

fn render_table(
    names: &[String],
    methods: &[MethodId],
    cells: &[Result<RunResult, Error>],
) -> String {
    let w = names.iter().map(String::len).max().unwrap_or(8).max(8);
    let mut s = format!("{:<w$}", "scenario");
    for m in methods {
        s.push_str(&format!("  {:<20}", m.as_str()));
    }
    s.push('\n');
    for (i, name) in names.iter().enumerate() {
        s.push_str(&format!("{name:<w$}"));
        for j in 0..methods.len() {
            let cell = match &cells[i * methods.len() + j] {
                Ok(r) => verdict(r)
                    .replace(" energy_bound", " E")
                    .replace(" overcurrent", " I")
                    .replace(" numerical_divergence", " N"),
                Err(_) => "error".into(),
            };
            s.push_str(&format!("  {cell:<20}"));
        }
        s.push('\n');
    }
    s.push_str("trip causes: E energy bound, I overcurrent, N numerical divergence\n");
    s
}

fn cmd_batch(a: &BatchArgs, json_out: bool) -> Result<(), Failure> {
    let methods: Vec<MethodId> = a
        .methods
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse::<MethodId>())
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(Failure::Usage("--methods is empty".into()));
    }
    let specs = scenarios(a.scenarios.as_deref())?;
    let base = config(methods[0], &a.common)?;
    let parallelism = threads()?;
    let cells: Vec<BatchCell> = specs
        .iter()
        .flat_map(|s| {
            methods.iter().map(move |&method| BatchCell {
                scenario: s.clone(),
                method,
            })
        })
        .collect();
    let results = batch(&cells, base, parallelism);

    std::fs::create_dir_all(&a.common.out).map_err(io_err(&a.common.out))?;
    let csv_path = a.common.out.join("comparison.csv");
    let mut csv = create(&csv_path)?;
    let mut text = format!("{RESULT_HEADER}\n");
    for (c, r) in cells.iter().zip(&results) {
        match r {
            Ok(r) => text.push_str(&r.csv_row()),
            Err(e) => text.push_str(&error_row(c.scenario.name(), c.method, e)),
        }
        text.push('\n');
    }
    csv.write_all(text.as_bytes())
        .and_then(|_| csv.flush())
        .map_err(io_err(&csv_path))?;
    let names: Vec<String> = specs.iter().map(|s| s.name().to_string()).collect();
    let table = render_table(&names, &methods, &results);
    let table_path = a.common.out.join("comparison.txt");
    std::fs::write(&table_path, &table).map_err(io_err(&table_path))?;

    if json_out {
        let rows: Vec<serde_json::Value> = cells
            .iter()
            .zip(&results)
            .map(|(c, r)| match r {
                Ok(r) => summary_json(r),
                Err(e) => json!({"scenario": c.scenario.name(), "method": c.method.as_str(), "error": e.to_string()}),
            })
            .collect();
        println!("{}", json!({ "results": rows }));
    } else {
        print!("{table}");
    }
    Ok(())
}

fn parse_entry(text: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("--corrupt-m `{text}`: expected ROW,COL in 0..3"));
    let (r, c) = text.split_once(',').ok_or_else(bad)?;
    let (r, c): (usize, usize) = (
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    );
    if r > 2 || c > 2 {
        return Err(bad());
    }
    Ok((r, c))
}

fn cmd_verify(a: &VerifyArgs, json_out: bool) -> Result<(), Failure> {
    let corrupt = verify::Corruption(a.corrupt_m.as_deref().map(parse_entry).transpose()?);
    let checks = verify::all(corrupt);
    let ok = checks.iter().all(verify::Check::passed);
    if json_out {
        let list: Vec<serde_json::Value> = checks.iter().map(verify::Check::to_json).collect();
        println!("{}", json!({ "passed": ok, "checks": list }));
    } else {
        for c in &checks {
            println!(
                "{} {:<26} max_error {:>10.3e}  tolerance {:.0e}  samples {}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_error,
                c.tolerance,
                c.samples
            );
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Run(a) => cmd_run(a, cli.json),
        Command::Batch(a) => cmd_batch(a, cli.json),
        Command::Verify(a) => cmd_verify(a, cli.json),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Io(m) => eprintln!("mmc-sim: {m}"),
                Failure::Verify => eprintln!("mmc-sim: verification failed"),
            }
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations() {
        assert_eq!(parse_dt("50us").unwrap(), 50e-6);
        assert_eq!(parse_dt("50µs").unwrap(), 50e-6);
        assert_eq!(parse_dt("0.025ms").unwrap(), 25e-6);
        assert_eq!(parse_dt("5e-5").unwrap(), 50e-6);
        assert_eq!(parse_dt(" 100us ").unwrap(), 100e-6);
        assert_eq!(parse_dt("1us").unwrap(), 1e-6);
        for bad in ["200us", "0.5us", "0", "-50us", "50 parsecs", ""] {
            assert!(matches!(parse_dt(bad), Err(Failure::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn matrix_entries() {
        assert_eq!(parse_entry("1,2").unwrap(), (1, 2));
        assert!(parse_entry("3,0").is_err());
        assert!(parse_entry("1").is_err());
    }
}
