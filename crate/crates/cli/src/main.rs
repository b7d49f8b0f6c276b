use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trigsim::scenario::{
    self, check_expectations, parse_assignment, Scenario, ScenarioError, TraceSetting,
};

const EXIT_ASSERT: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_FAULT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "trigsim",
    version,
    about = "Simulate GPU-triggered and GPU-initiated NIC coordination"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and print its results.
    Run(RunArgs),
    /// Parse and check a scenario without running it.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file; the `.toml` extension may be omitted.
    #[arg(value_name = "SCENARIO", required_unless_present = "scenario")]
    path: Option<PathBuf>,
    #[arg(long, value_name = "PATH", conflicts_with = "path")]
    scenario: Option<PathBuf>,
    /// Override a scenario key, e.g. `--set monitor.poll_interval_ns=500` or `--set phases=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Run once per value and emit one CSV row per point, e.g. `--sweep ranks=2,4,8`.
    #[arg(long, value_name = "KEY=V1,V2,..")]
    sweep: Option<String>,
    /// Write the event trace here.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Write results here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Check the scenario's [expect] table; exit 1 if any entry fails.
    #[arg(long)]
    assert: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Validate(c) => validate(c),
    };
    match r {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                ScenarioError::Fault(_) => EXIT_FAULT,
                _ => EXIT_INPUT,
            })
        }
    }
}

fn resolve(c: &Common) -> Result<PathBuf, ScenarioError> {
    let p = c
        .scenario
        .as_ref()
        .or(c.path.as_ref())
        .expect("clap requires a scenario");
    if p.is_file() {
        return Ok(p.clone());
    }
    let with_ext = p.with_extension("toml");
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    Err(ScenarioError::Parse(format!(
        "{}: no such scenario file",
        p.display()
    )))
}

fn load(c: &Common, extra: &[(String, String)]) -> Result<Scenario, ScenarioError> {
    let path = resolve(c)?;
    let text = fs::read_to_string(&path)
        .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
    let mut overrides = c
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    overrides.extend_from_slice(extra);
    let mut s = scenario::load(&text, &overrides).map_err(|e| match e {
        ScenarioError::Parse(m) => ScenarioError::Parse(format!("{}: {m}", path.display())),
        e => e,
    })?;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn validate(c: Common) -> Result<u8, ScenarioError> {
    let s = load(&c, &[])?;
    let errs = s.validate();
    if !errs.is_empty() {
        return Err(ScenarioError::Invalid(errs));
    }
    println!("ok: {}", s.name.as_deref().unwrap_or("scenario"));
    Ok(0)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), ScenarioError> {
    match out {
        Some(p) => {
            fs::write(p, text).map_err(|e| ScenarioError::Parse(format!("{}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_trace(path: &Path, out: &scenario::ScenarioOutput) -> Result<(), ScenarioError> {
    let io = |e: std::io::Error| ScenarioError::Parse(format!("{}: {e}", path.display()));
    let f = fs::File::create(path).map_err(io)?;
    match &out.trace {
        Some(t) => t.write_text(std::io::BufWriter::new(f)).map_err(io),
        None => {
            eprintln!("note: this workload runs many simulations and records no single trace");
            Ok(())
        }
    }
}

fn run(a: RunArgs) -> Result<u8, ScenarioError> {
    if let Some(sweep) = &a.sweep {
        return run_sweep(&a, sweep);
    }
    let mut s = load(&a.common, &[])?;
    if a.trace.is_some() && s.trace == TraceSetting::Off {
        s.trace = TraceSetting::Full;
    }
    let out = s.run()?;
    if let Some(p) = &a.trace {
        write_trace(p, &out)?;
    }
    let text = match a.format {
        Format::Text => {
            let mut t = format!("status={}\n", out.metrics.status);
            for l in out.metrics.summary_lines() {
                t.push_str(&l);
                t.push('\n');
            }
            if let Some(table) = &out.table {
                t.push('\n');
                t.push_str(&table.to_csv());
            }
            t
        }
        Format::Csv => out.to_csv(),
        Format::Json => out.to_json() + "\n",
    };
    emit(&a.out, &text)?;
    if let Some(f) = &out.fault {
        eprintln!("fault: {f}");
    }
    let mut code = 0;
    if a.assert {
        let results = check_expectations(&s.expect, &out.metrics);
        for r in &results {
            eprintln!("{} {}", if r.ok { "PASS" } else { "FAIL" }, r.detail);
        }
        if results.iter().any(|r| !r.ok) {
            code = EXIT_ASSERT;
        }
    }
    if out.fault.is_some() && code == 0 && !s.expect.contains_key("status") {
        code = EXIT_FAULT;
    }
    Ok(code)
}

fn run_sweep(a: &RunArgs, sweep: &str) -> Result<u8, ScenarioError> {
    let (key, values) = parse_assignment(sweep)?;
    let mut rows = Vec::new();
    let mut columns = BTreeSet::new();
    let mut failed = false;
    for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let s = load(&a.common, &[(key.clone(), v.to_string())])?;
        let out = s.run()?;
        if a.assert {
            failed |= check_expectations(&s.expect, &out.metrics)
                .iter()
                .any(|r| !r.ok);
        }
        columns.extend(out.metrics.values.keys().cloned());
        rows.push((v.to_string(), out.metrics));
    }
    let mut w = String::new();
    w.push_str(&key);
    w.push_str(",status");
    for c in &columns {
        w.push(',');
        w.push_str(c);
    }
    w.push('\n');
    for (v, m) in &rows {
        w.push_str(v);
        w.push(',');
        w.push_str(&m.status);
        for c in &columns {
            w.push(',');
            if let Some(x) = m.values.get(c) {
                w.push_str(&x.to_string());
            }
        }
        w.push('\n');
    }
    emit(&a.out, &w)?;
    Ok(if failed { EXIT_ASSERT } else { 0 })
}
