use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use surveychat_core::ExportShape;
use surveychat_sim::{export_cli, run_simulation, verify_report, RunOptions, SimReport, SimScript};

/// Scripted participants, run verification and offline export.
#[derive(Parser, Debug)]
#[command(name = "surveychat-sim", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drive a running daemon with simulated participants.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        target: String,
        #[arg(long, default_value_t = 10)]
        concurrency: usize,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Allow running against a daemon whose backend is a paid model.
        #[arg(long = "live-i-understand-costs")]
        live: bool,
    },
    /// Check a report against a per-turn export. Exits 1 on violations.
    Verify {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        export: PathBuf,
    },
    /// Export CSV straight from the database file.
    Export {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, value_parser = parse_shape)]
        shape: ExportShape,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<ExportShape, String> {
    s.parse()
}

#[tokio::main]
async fn main() -> Result<ExitCode> {
    surveychat_cli::init_logging("warn");
    match Args::parse().command {
        Command::Simulate {
            script,
            target,
            concurrency,
            out,
            live,
        } => {
            let text = std::fs::read_to_string(&script)
                .with_context(|| format!("reading {}", script.display()))?;
            let script = SimScript::from_json(&text)?;
            let options = RunOptions {
                allow_live: live,
                ..RunOptions::default()
            };
            let report = run_simulation(&script, &target, concurrency, &options).await?;
            std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            let lat = report.message_latencies();
            let p = |q: f64| {
                lat.get(((lat.len() as f64 - 1.0) * q).round() as usize)
                    .copied()
                    .unwrap_or(0.0)
            };
            println!(
                "{} sessions, {} messages ok, {:.0} ms; message latency p50 {:.1} ms p95 {:.1} ms; report {}",
                report.sessions.len(),
                report.successful_messages(),
                report.elapsed_ms,
                p(0.5),
                p(0.95),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { report, export } => {
            let report: SimReport = serde_json::from_slice(&std::fs::read(&report)?)
                .with_context(|| format!("parsing {}", report.display()))?;
            let csv = std::fs::read(&export)?;
            let violations = verify_report(&report, &csv)?;
            for v in &violations {
                println!("{v}");
            }
            if violations.is_empty() {
                println!("ok: {} rows, no violations", report.expected_rows());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{} violation(s)", violations.len());
                Ok(ExitCode::from(1))
            }
        }
        Command::Export { db, shape, out } => {
            export_cli(&db, shape, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
