//! Merges evaluation directories into side-by-side tables.
//!
//! `cargo run --release --example report_tables [work_dir]`
//!
//! Reads the `eval-train` and `eval-test` directories written by the
//! `evaluate` example plus the training logs, and writes three TSV files
//! into `<work_dir>/report`.

use std::fs;
use std::path::PathBuf;

use cdface::report::{aperture_table, loss_curve_table, merge_metric_tables, read_apertures, read_report};
use cdface::trainer::RunLog;

fn main() -> anyhow::Result<()> {
    let work = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/cdface-demo".into());
    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    for name in ["eval-train", "eval-test"] {
        let dir = work.join(name);
        metrics.push((name.to_string(), read_report(&dir)?));
        curves.push((name.to_string(), read_apertures(&dir)?));
    }
    let mut logs = Vec::new();
    for stage in ["prior", "query"] {
        let path = work.join(stage).join("log.jsonl");
        if path.exists() {
            logs.push((stage.to_string(), RunLog::read(&path)?));
        }
    }

    let out = work.join("report");
    fs::create_dir_all(&out)?;
    let merged = merge_metric_tables(&metrics);
    fs::write(out.join("metrics.tsv"), &merged)?;
    fs::write(out.join("aperture_curves.tsv"), aperture_table(&curves))?;
    fs::write(out.join("loss_curves.tsv"), loss_curve_table(&logs))?;
    print!("{merged}");
    println!("tables written to {}", out.display());
    Ok(())
}
