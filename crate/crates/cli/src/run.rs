use std::fs;
use std::path::Path;

use serde::Serialize;

use secagg_compress::flsim::{run_experiment, ExperimentConfig, RunResult};

use crate::Failure;

pub const RESULTS_CSV: &str = "results.csv";
pub const CODEBOOKS_CSV: &str = "codebooks.csv";
pub const TRACE_JSON: &str = "trace.json";

#[derive(Serialize)]
struct Trace<'a> {
    config: &'a ExperimentConfig,
    runs: &'a [RunResult],
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let io = |e: csv::Error| Failure::failed(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Failure::failed(format!("{}: {e}", path.display())))
}

pub fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_experiment(&cfg)?;
    fs::create_dir_all(out).map_err(|e| Failure::failed(format!("{}: {e}", out.display())))?;
    write_csv(&out.join(RESULTS_CSV), &report.rows)?;
    write_csv(&out.join(CODEBOOKS_CSV), &report.downlink)?;
    let trace = serde_json::to_string_pretty(&Trace {
        config: &cfg,
        runs: &report.runs,
    })
    .map_err(|e| Failure::failed(e.to_string()))?;
    fs::write(out.join(TRACE_JSON), trace).map_err(|e| Failure::failed(e.to_string()))?;

    for row in &report.rows {
        println!(
            "{:<10} {:<26} {:>9.3} KB {:>8.2}x  acc {:>6.2} ± {:.2}  overflow {:.3}%",
            row.scheme, row.params, row.uplink_kb, row.compression_factor, row.accuracy_mean, row.accuracy_std, row.overflow_pct
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
