//! Accuracy and diversity metrics over full-face vertex sequences.
//!
//! All distances are Euclidean. Per-vertex errors use the three coordinates
//! of one vertex; sequence distances (APD, MPD and their regional variants)
//! use the whole flattened `T × 3V` (or region) difference.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{lip_aperture, FaceTemplate, MotionSequence, Region, RegionPartition};
use crate::tensor::Matrix;

fn same_shape(a: &MotionSequence, b: &MotionSequence) -> Result<()> {
    if a.offsets().shape() != b.offsets().shape() {
        return Err(Error::shape(format!(
            "sequences differ in shape: {:?} vs {:?}",
            a.offsets().shape(),
            b.offsets().shape()
        )));
    }
    if !a.width().is_multiple_of(3) {
        return Err(Error::shape(format!("width {} is not 3V", a.width())));
    }
    Ok(())
}

fn vertex_error(a: &[f64], b: &[f64], v: usize) -> f64 {
    let d = |k: usize| a[3 * v + k] - b[3 * v + k];
    (d(0) * d(0) + d(1) * d(1) + d(2) * d(2)).sqrt()
}

fn check_partition(m: &MotionSequence, part: &RegionPartition) -> Result<()> {
    if m.width() != 3 * part.vertex_count() {
        return Err(Error::shape(format!(
            "width {} does not match partition 3V = {}",
            m.width(),
            3 * part.vertex_count()
        )));
    }
    Ok(())
}

/// Lip vertex error: mean over frames of the worst lip vertex.
pub fn lve(pred: &MotionSequence, gt: &MotionSequence, part: &RegionPartition) -> Result<f64> {
    same_shape(pred, gt)?;
    check_partition(gt, part)?;
    let total: f64 = (0..gt.frames())
        .map(|t| {
            part.lip_indices()
                .iter()
                .map(|&v| vertex_error(pred.frame(t), gt.frame(t), v))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / gt.frames() as f64)
}

/// Mean vertex error over every frame and vertex.
pub fn mve(pred: &MotionSequence, gt: &MotionSequence) -> Result<f64> {
    same_shape(pred, gt)?;
    let v = gt.width() / 3;
    let total: f64 = (0..gt.frames())
        .map(|t| (0..v).map(|i| vertex_error(pred.frame(t), gt.frame(t), i)).sum::<f64>())
        .sum();
    Ok(total / (gt.frames() * v) as f64)
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn magnitude_std(m: &MotionSequence, v: usize) -> f64 {
    let zero = vec![0.0; m.width()];
    let mags: Vec<f64> = (0..m.frames()).map(|t| vertex_error(m.frame(t), &zero, v)).collect();
    population_std(&mags)
}

/// Upper-face dynamics deviation: mean over upper vertices of
/// `std_t ‖pred_v,t‖ − std_t ‖gt_v,t‖` (population std over time; signed).
pub fn fdd(pred: &MotionSequence, gt: &MotionSequence, part: &RegionPartition) -> Result<f64> {
    same_shape(pred, gt)?;
    check_partition(gt, part)?;
    let upper = part.upper_indices();
    let total: f64 = upper
        .iter()
        .map(|&v| magnitude_std(pred, v) - magnitude_std(gt, v))
        .sum();
    Ok(total / upper.len() as f64)
}

fn check_samples(samples: &[Matrix], min: usize) -> Result<()> {
    if samples.len() < min {
        return Err(Error::invalid(format!(
            "need at least {min} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.shape() != samples[0].shape()) {
        return Err(Error::shape("samples differ in length or width"));
    }
    Ok(())
}

fn sequence_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn apd_matrices(samples: &[Matrix]) -> Result<f64> {
    check_samples(samples, 2)?;
    let s = samples.len();
    let mut total = 0.0;
    for i in 0..s {
        for j in (i + 1)..s {
            total += 2.0 * sequence_distance(&samples[i], &samples[j]);
        }
    }
    Ok(total / (s * (s - 1)) as f64)
}

fn mpd_matrices(samples: &[Matrix]) -> Result<f64> {
    check_samples(samples, 2)?;
    let mut best = f64::INFINITY;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            best = best.min(sequence_distance(&samples[i], &samples[j]));
        }
    }
    Ok(best)
}

fn offsets(samples: &[MotionSequence]) -> Vec<Matrix> {
    samples.iter().map(|s| s.offsets().clone()).collect()
}

fn region_offsets(samples: &[MotionSequence], part: &RegionPartition, region: Region) -> Result<Vec<Matrix>> {
    let cols = part.columns(region);
    samples
        .iter()
        .map(|s| {
            check_partition(s, part)?;
            Ok(s.offsets().gather_cols(&cols))
        })
        .collect()
}

/// Average pairwise distance over ordered pairs of distinct samples.
pub fn apd(samples: &[MotionSequence]) -> Result<f64> {
    apd_matrices(&offsets(samples))
}

/// APD over upper-face coordinates only.
pub fn upd(samples: &[MotionSequence], part: &RegionPartition) -> Result<f64> {
    apd_matrices(&region_offsets(samples, part, Region::Upper)?)
}

/// APD over lip coordinates only.
pub fn lpd(samples: &[MotionSequence], part: &RegionPartition) -> Result<f64> {
    apd_matrices(&region_offsets(samples, part, Region::Lip)?)
}

/// Distance between the closest two samples.
pub fn mpd(samples: &[MotionSequence]) -> Result<f64> {
    mpd_matrices(&offsets(samples))
}

/// Mean LVE of every sample against the one ground truth.
pub fn alve(samples: &[MotionSequence], gt: &MotionSequence, part: &RegionPartition) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut total = 0.0;
    for s in samples {
        total += lve(s, gt, part)?;
    }
    Ok(total / samples.len() as f64)
}

/// Lip-aperture curve of every sample, one row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApertureTable {
    pub fps: f64,
    pub labels: Vec<String>,
    pub curves: Vec<Vec<f64>>,
}

impl ApertureTable {
    pub fn push(&mut self, label: impl Into<String>, curve: Vec<f64>) {
        self.labels.push(label.into());
        self.curves.push(curve);
    }

    /// Tab-separated long table: `label  frame  time_s  aperture`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\tframe\ttime_s\taperture\n");
        for (label, curve) in self.labels.iter().zip(&self.curves) {
            for (t, a) in curve.iter().enumerate() {
                let _ = writeln!(out, "{label}\t{t}\t{:.6}\t{a:.9}", t as f64 / self.fps);
            }
        }
        out
    }
}

pub fn aperture_curves(
    samples: &[MotionSequence],
    template: &FaceTemplate,
    part: &RegionPartition,
) -> Result<ApertureTable> {
    let fps = samples.first().map_or(0.0, |s| s.fps());
    let mut table = ApertureTable {
        fps,
        labels: Vec::new(),
        curves: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        table.push(format!("sample{i}"), lip_aperture(s, template, part)?);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub unit: String,
}

/// Named metric values with units, plus the context they were computed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, MetricValue>,
    pub sample_count: usize,
    pub clip_count: usize,
    pub lip_vertices: usize,
    pub upper_vertices: usize,
}

pub const MESH_UNITS: &str = "mesh units";

impl MetricReport {
    pub fn new(sample_count: usize, part: &RegionPartition) -> Self {
        Self {
            metrics: BTreeMap::new(),
            sample_count,
            clip_count: 0,
            lip_vertices: part.lip_indices().len(),
            upper_vertices: part.upper_count(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64, unit: &str) {
        self.metrics.insert(
            name.to_string(),
            MetricValue {
                value,
                unit: unit.to_string(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.value)
    }

    /// Tab-separated `metric  value  unit` table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\tunit\n");
        for (k, m) in &self.metrics {
            let _ = writeln!(out, "{k}\t{:.9e}\t{}", m.value, m.unit);
        }
        out
    }

    /// Human-readable block.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "samples per clip: {}\nclips: {}\nlip vertices: {}\nupper vertices: {}\n",
            self.sample_count, self.clip_count, self.lip_vertices, self.upper_vertices
        );
        for (k, m) in &self.metrics {
            let _ = writeln!(out, "{k:>6} = {:.6e} {}", m.value, m.unit);
        }
        out
    }
}

/// Running mean of per-clip reports into a corpus-level report.
pub fn average_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no reports to average"))?;
    let mut out = first.clone();
    out.clip_count = reports.len();
    for (name, value) in out.metrics.iter_mut() {
        let mut total = 0.0;
        for r in reports {
            total += r
                .metrics
                .get(name)
                .ok_or_else(|| Error::invalid(format!("report lacks metric {name}")))?
                .value;
        }
        value.value = total / reports.len() as f64;
    }
    Ok(out)
}
