//! `mocp` command line: validate specs, run scenarios, print the strategy
//! matrix.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use mocp::engine::{run_matrix, run_scenario, validate};
use mocp::{CompAutomatonSpec, MonitorSpec, RunError, ScenarioScript, SpecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Run,
    Validate,
    Matrix,
}

#[derive(Debug, Parser)]
#[command(name = "mocp", about = "Monitor-oriented compensation programming simulator")]
struct Cli {
    /// Scenario script (required in run mode).
    #[arg(long)]
    scenario: Option<PathBuf>,

    /// Compensating automaton spec file; repeatable.
    #[arg(long = "automata", required = true)]
    automata: Vec<PathBuf>,

    /// Trigger monitor spec file; repeatable.
    #[arg(long = "monitors", required = true)]
    monitors: Vec<PathBuf>,

    /// Retry threshold before a fail event escalates to an error channel.
    #[arg(long = "retries", default_value_t = 3)]
    retries: u32,

    /// Overrides the scenario's seed (flips the pay/book interleaving).
    #[arg(long)]
    seed: Option<u64>,

    /// Report output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Mode::Run)]
    mode: Mode,
}

// Exit codes: 0 success, 1 spec error, 2 scenario runtime fault, 3 I/O error.
const EXIT_SPEC: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_IO: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MOCP_LOG")).init();
    let cli = Cli::parse();
    if cli.retries < 1 {
        eprintln!("error: --retries must be at least 1");
        return ExitCode::from(EXIT_SPEC);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn io(e: impl std::fmt::Display, path: &PathBuf) -> Self {
        CliError { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        CliError { code: EXIT_SPEC, message: e.to_string() }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        let code = match e {
            RunError::Spec(_) => EXIT_SPEC,
            _ => EXIT_RUNTIME,
        };
        CliError { code, message: e.to_string() }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut ca_specs = Vec::new();
    for p in &cli.automata {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(e, p))?;
        ca_specs.push(CompAutomatonSpec::from_json(&text)?);
    }
    let mut mon_specs = Vec::new();
    for p in &cli.monitors {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(e, p))?;
        mon_specs.push(MonitorSpec::from_json(&text)?);
    }

    match cli.mode {
        Mode::Validate => {
            let lints = validate(ca_specs, mon_specs)?;
            for l in &lints {
                println!("lint: {l}");
            }
            println!("ok: {} automata, {} monitors", cli.automata.len(), cli.monitors.len());
            Ok(())
        }
        Mode::Matrix => {
            let rows = run_matrix(&ca_specs, &mon_specs, cli.retries)?;
            let mut out = String::new();
            for (class, error, expr) in rows {
                let rendered = expr.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
                out.push_str(&format!("({class}, {error}) -> {rendered}\n"));
            }
            write_out(cli, &out)
        }
        Mode::Run => {
            let path = cli.scenario.as_ref().ok_or_else(|| CliError {
                code: EXIT_IO,
                message: "run mode needs --scenario".into(),
            })?;
            let text = fs::read_to_string(path).map_err(|e| CliError::io(e, path))?;
            let mut script = ScenarioScript::from_json(&text)?;
            if let Some(seed) = cli.seed {
                script.seed = seed;
            }
            let report = run_scenario(&script, ca_specs, mon_specs, cli.retries)?;
            let rendered = report.render();
            write_out(cli, &rendered)?;
            if !report.fault_log.is_empty() {
                return Err(CliError {
                    code: EXIT_RUNTIME,
                    message: format!("{} compensation fault(s) reported", report.fault_log.len()),
                });
            }
            Ok(())
        }
    }
}

fn write_out(cli: &Cli, text: &str) -> Result<(), CliError> {
    match &cli.out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(e, p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
