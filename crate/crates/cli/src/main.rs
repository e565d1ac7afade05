use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use iro_core::codec::layout_manifest;
use iro_core::dram::parse_fault_schedule;
use iro_core::oram::{Oram, OramConfig, Scheme};
use iro_core::sim::{self, Outcome};

#[derive(Parser)]
#[command(name = "iro", version, about = "Secure and reliable Ring ORAM simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a trace and print a statistics report.
    Simulate {
        #[arg(long)]
        scheme: Option<Scheme>,
        /// `R <hex>` / `W <hex>` per line.
        #[arg(long, conflicts_with = "synthetic")]
        trace: Option<PathBuf>,
        /// `uniform|zipfian,<requests>,<footprint>`
        #[arg(long)]
        synthetic: Option<String>,
        /// Flat `key = value` file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fault schedule, one injection per line.
        #[arg(long)]
        faults: Option<PathBuf>,
        /// `kind@op[:block[:block]]`, comma separated.
        #[arg(long)]
        attack: Option<String>,
        #[arg(long, value_enum, default_value = "json")]
        report: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the DRAM layout and field manifests, then exit.
        #[arg(long)]
        dump_layout: bool,
        /// Print remapped buckets to stderr after the run.
        #[arg(long)]
        list_remap: bool,
    },
    /// Write a synthetic trace.
    Generate {
        #[arg(long, default_value = "uniform")]
        kind: String,
        #[arg(short, long)]
        n: usize,
        #[arg(long)]
        footprint: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("iro: {msg}");
    ExitCode::from(1)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), String> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read(p: &PathBuf) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.cmd {
        Cmd::Generate { kind, n, footprint, seed, out } => {
            let kind = match kind.parse() {
                Ok(k) => k,
                Err(e) => return fail(e),
            };
            let t = sim::generate_trace(kind, n, footprint, seed);
            match emit(&out, &sim::format_trace(&t)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Cmd::Simulate { scheme, trace, synthetic, config, seed, faults, attack, report, out, dump_layout, list_remap } => {
            let mut cfg = match &config {
                Some(p) => match read(p).map_err(|e| e.to_string()).and_then(|t| sim::parse_config(&t).map_err(|e| e.to_string())) {
                    Ok(c) => c,
                    Err(e) => return fail(e),
                },
                None => OramConfig::default(),
            };
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if dump_layout {
                let oram = match Oram::new(cfg) {
                    Ok(o) => o,
                    Err(e) => return fail(e),
                };
                let levels = oram.must_geometry().map_or(5, |g| g.must_levels);
                let text = format!("{}{}", oram.layout().manifest(oram.geometry()), layout_manifest(levels));
                return match emit(&out, &text) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => fail(e),
                };
            }
            let requests = match (&trace, &synthetic) {
                (Some(p), _) => match read(p).and_then(|t| sim::parse_trace(&t).map_err(|e| e.to_string())) {
                    Ok(t) => t,
                    Err(e) => return fail(e),
                },
                (None, Some(spec)) => match sim::parse_synthetic(spec) {
                    Ok((kind, n, fp)) => sim::generate_trace(kind, n, fp, cfg.seed),
                    Err(e) => return fail(e),
                },
                (None, None) => return fail("give --trace or --synthetic"),
            };
            let schedule = match &faults {
                Some(p) => match read(p).and_then(|t| parse_fault_schedule(&t).map_err(|e| e.to_string())) {
                    Ok(f) => f,
                    Err(e) => return fail(e),
                },
                None => Vec::new(),
            };
            let attacks = match attack.as_deref().map(sim::parse_attacks).transpose() {
                Ok(a) => a.unwrap_or_default(),
                Err(e) => return fail(e),
            };
            let outcome: Outcome = match sim::run(&cfg, &requests, &schedule, &attacks) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("iro: {e}");
                    return ExitCode::from(e.exit_code() as u8);
                }
            };
            let text = match report {
                Format::Json => outcome.report.to_json() + "\n",
                Format::Csv => outcome.report.to_csv(),
            };
            if let Err(e) = emit(&out, &text) {
                return fail(e);
            }
            if list_remap {
                eprintln!("remapped buckets: {}", outcome.remapped.len());
                for (bucket, spare) in &outcome.remapped {
                    eprintln!("{bucket} -> spare {spare}");
                }
            }
            if let Some(e) = &outcome.error {
                eprintln!("iro: {e}");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
    }
}
