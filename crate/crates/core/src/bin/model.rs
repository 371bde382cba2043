use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mcomm::harness::ReportFormat;
use mcomm::model::{hit_rates, load_calibration, model_rows, ModelRow, DEFAULT_COMPLETIONS};

/// Simulates the shared-memory-bus model at one hit rate or over a sweep.
#[derive(Parser, Debug)]
#[command(name = "model")]
struct Args {
    /// Core counts, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    cores: Vec<usize>,
    /// Cache hit rate in [0, 1].
    #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
    hit_rate: Option<f64>,
    /// from:to:steps
    #[arg(long)]
    sweep: Option<String>,
    /// Calibration TOML file.
    #[arg(long)]
    calibration: PathBuf,
    /// Overrides the calibration's target rate, messages/s.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Simulated completions at target rate per point.
    #[arg(long, default_value_t = DEFAULT_COMPLETIONS)]
    completions: f64,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    #[arg(long)]
    out: PathBuf,
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [from, to, steps] = parts[..] else { return Err(format!("sweep `{s}` is not from:to:steps")) };
    let bad = |e: &dyn std::fmt::Display| format!("sweep `{s}`: {e}");
    Ok((from.parse().map_err(|e| bad(&e))?, to.parse().map_err(|e| bad(&e))?, steps.parse().map_err(|e| bad(&e))?))
}

fn render(rows: &[ModelRow], format: ReportFormat) -> Result<String, String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows).map_err(|e| e.to_string()),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| e.to_string())?;
            }
            String::from_utf8(w.into_inner().map_err(|e| e.to_string())?).map_err(|e| e.to_string())
        }
    }
}

fn run(args: &Args) -> Result<(), String> {
    let mut cal = load_calibration(&args.calibration).map_err(|e| e.to_string())?;
    if let Some(t) = args.target {
        cal.target_rate = t;
    }
    let rates = match (&args.sweep, args.hit_rate) {
        (Some(s), _) => {
            let (from, to, steps) = parse_sweep(s)?;
            hit_rates(from, to, steps).map_err(|e| e.to_string())?
        }
        (None, Some(h)) => vec![h],
        (None, None) => unreachable!("clap requires one"),
    };
    let rows = model_rows(&cal, &args.cores, &rates, args.completions, args.seed).map_err(|e| e.to_string())?;
    let text = render(&rows, args.format)?;
    std::fs::write(&args.out, text).map_err(|e| format!("cannot write {}: {e}", args.out.display()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("model: {e}");
            ExitCode::from(2)
        }
    }
}
