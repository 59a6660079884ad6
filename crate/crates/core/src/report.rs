//! Plots-as-data: merged metric tables, aperture curves and loss curves as
//! tab-separated text, plus the on-disk layout of an evaluation run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{ApertureTable, MetricReport};
use crate::trainer::{Evaluation, LogRecord};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TSV: &str = "report.tsv";
pub const APERTURES_TSV: &str = "apertures.tsv";
pub const CLIPS_TSV: &str = "clips.tsv";

/// One column per run: `metric  unit  <run>...`. Missing entries are `NA`.
pub fn merge_metric_tables(runs: &[(String, MetricReport)]) -> String {
    let names: BTreeSet<&String> = runs.iter().flat_map(|(_, r)| r.metrics.keys()).collect();
    let mut out = String::from("metric\tunit");
    for (label, _) in runs {
        let _ = write!(out, "\t{label}");
    }
    out.push('\n');
    for name in names {
        let unit = runs
            .iter()
            .find_map(|(_, r)| r.metrics.get(name).map(|m| m.unit.as_str()))
            .unwrap_or("");
        let _ = write!(out, "{name}\t{unit}");
        for (_, r) in runs {
            match r.metrics.get(name) {
                Some(m) => {
                    let _ = write!(out, "\t{:.9e}", m.value);
                }
                None => out.push_str("\tNA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Long table `run  clip  label  frame  time_s  aperture`.
pub fn aperture_table(runs: &[(String, Vec<(String, ApertureTable)>)]) -> String {
    let mut out = String::from("run\tclip\tlabel\tframe\ttime_s\taperture\n");
    for (run, clips) in runs {
        for (clip, table) in clips {
            for line in table.to_tsv().lines().skip(1) {
                let _ = writeln!(out, "{run}\t{clip}\t{line}");
            }
        }
    }
    out
}

/// Long table `run  phase  epoch  steps  term  value`.
pub fn loss_curve_table(runs: &[(String, Vec<LogRecord>)]) -> String {
    let mut out = String::from("run\tphase\tepoch\tsteps\tterm\tvalue\n");
    for (run, records) in runs {
        for r in records {
            for (k, v) in &r.values {
                let _ = writeln!(out, "{run}\t{}\t{}\t{}\t{k}\t{v:.9e}", r.phase, r.epoch, r.steps);
            }
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `report.tsv`, `clips.tsv` (per-clip metrics) and
/// `apertures.tsv` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&eval.report).expect("report serializes");
    write(&dir.join(REPORT_JSON), &(json + "\n"))?;
    write(&dir.join(REPORT_TSV), &eval.report.to_tsv())?;
    let per_clip: Vec<(String, MetricReport)> = eval.clips.iter().map(|c| (c.clip.clone(), c.report.clone())).collect();
    write(&dir.join(CLIPS_TSV), &merge_metric_tables(&per_clip))?;
    let curves: Vec<(String, ApertureTable)> = eval.clips.iter().map(|c| (c.clip.clone(), c.apertures.clone())).collect();
    write(&dir.join(APERTURES_TSV), &aperture_table(&[("eval".to_string(), curves)]))?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<MetricReport> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads the `apertures.tsv` of an evaluation directory back into
/// per-clip tables.
pub fn read_apertures(dir: &Path) -> Result<Vec<(String, ApertureTable)>> {
    let path = dir.join(APERTURES_TSV);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut clips: Vec<(String, ApertureTable)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format(&path, format!("line {}: expected 6 columns", n + 1));
        if cols.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let (clip, label, frame, time, value) = (cols[1], cols[2], num(cols[3])?, num(cols[4])?, num(cols[5])?);
        if clips.last().map(|(c, _)| c.as_str()) != Some(clip) {
            clips.push((
                clip.to_string(),
                ApertureTable {
                    fps: 0.0,
                    labels: Vec::new(),
                    curves: Vec::new(),
                },
            ));
        }
        let table = &mut clips.last_mut().expect("pushed above").1;
        if table.labels.last().map(String::as_str) != Some(label) {
            table.push(label, Vec::new());
        }
        if frame > 0.0 && time > 0.0 {
            table.fps = frame / time;
        }
        table.curves.last_mut().expect("pushed above").push(value);
    }
    Ok(clips)
}
