//! Face template, lip/upper-face partition, region views and closure masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Neutral face: `3V` flat coordinates in mesh units.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTemplate {
    vertices: Vec<f64>,
}

impl FaceTemplate {
    pub fn new(vertices: Vec<f64>) -> Result<Self> {
        if vertices.is_empty() || !vertices.len().is_multiple_of(3) {
            return Err(Error::shape(format!(
                "template needs 3·V coordinates, got {}",
                vertices.len()
            )));
        }
        if !vertices.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("template has non-finite coordinates"));
        }
        Ok(Self { vertices })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn vertices(&self) -> &[f64] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> [f64; 3] {
        [self.vertices[3 * v], self.vertices[3 * v + 1], self.vertices[3 * v + 2]]
    }
}

/// Disjoint lip / upper-face vertex split plus the vertex pair whose
/// distance defines lip aperture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    lip_indices: Vec<usize>,
    upper_indices: Vec<usize>,
    /// (upper-lip vertex, lower-lip vertex)
    closure_pair: (usize, usize),
}

impl RegionPartition {
    pub fn new(
        vertex_count: usize,
        mut lip_indices: Vec<usize>,
        mut upper_indices: Vec<usize>,
        closure_pair: (usize, usize),
    ) -> Result<Self> {
        lip_indices.sort_unstable();
        upper_indices.sort_unstable();
        let mut seen = vec![0u8; vertex_count];
        for &v in lip_indices.iter().chain(&upper_indices) {
            if v >= vertex_count {
                return Err(Error::Index(format!(
                    "vertex {v} outside a {vertex_count}-vertex face"
                )));
            }
            seen[v] += 1;
        }
        if let Some(v) = seen.iter().position(|&c| c != 1) {
            return Err(Error::invalid(format!(
                "vertex {v} must belong to exactly one region"
            )));
        }
        if lip_indices.is_empty() || upper_indices.is_empty() {
            return Err(Error::invalid("both regions need at least one vertex"));
        }
        let (a, b) = closure_pair;
        if lip_indices.binary_search(&a).is_err() || lip_indices.binary_search(&b).is_err() {
            return Err(Error::invalid(format!(
                "closure pair ({a}, {b}) must be lip vertices"
            )));
        }
        Ok(Self {
            lip_indices,
            upper_indices,
            closure_pair,
        })
    }

    /// Re-checks the invariants, e.g. after deserialization.
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        Self::new(
            vertex_count,
            self.lip_indices.clone(),
            self.upper_indices.clone(),
            self.closure_pair,
        )
        .map(|_| ())
    }

    pub fn vertex_count(&self) -> usize {
        self.lip_indices.len() + self.upper_indices.len()
    }

    pub fn lip_indices(&self) -> &[usize] {
        &self.lip_indices
    }

    pub fn upper_indices(&self) -> &[usize] {
        &self.upper_indices
    }

    pub fn closure_pair(&self) -> (usize, usize) {
        self.closure_pair
    }

    pub fn upper_count(&self) -> usize {
        self.upper_indices.len()
    }

    pub fn region_indices(&self, region: Region) -> &[usize] {
        match region {
            Region::Lip => &self.lip_indices,
            Region::Upper => &self.upper_indices,
        }
    }

    /// Flat coordinate columns (`3v, 3v+1, 3v+2`) of a region, in order.
    pub fn columns(&self, region: Region) -> Vec<usize> {
        self.region_indices(region)
            .iter()
            .flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2])
            .collect()
    }

    pub fn width(&self, region: Region) -> usize {
        3 * self.region_indices(region).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Lip,
    Upper,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Lip => "lip",
            Region::Upper => "upper",
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lip" => Ok(Region::Lip),
            "upper" => Ok(Region::Upper),
            other => Err(Error::invalid(format!("unknown region {other:?}"))),
        }
    }
}

/// `T × width` offsets over the template (full face: width `3V`).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    offsets: Matrix,
    fps: f64,
    subject_id: Option<String>,
}

impl MotionSequence {
    pub fn new(offsets: Matrix, fps: f64) -> Result<Self> {
        if offsets.rows() == 0 {
            return Err(Error::invalid("motion needs at least one frame"));
        }
        if !offsets.is_finite() {
            return Err(Error::invalid("motion has non-finite offsets"));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            offsets,
            fps,
            subject_id: None,
        })
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject_id = Some(subject.into());
        self
    }

    pub fn offsets(&self) -> &Matrix {
        &self.offsets
    }

    pub fn into_offsets(self) -> Matrix {
        self.offsets
    }

    pub fn frames(&self) -> usize {
        self.offsets.rows()
    }

    pub fn width(&self) -> usize {
        self.offsets.cols()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn subject_id(&self) -> Option<&str> {
        self.subject_id.as_deref()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.offsets.row(t)
    }
}

/// Per-frame binary gate: `true` where the lips are open.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureMask {
    values: Vec<bool>,
    threshold: f64,
}

impl ClosureMask {
    pub fn from_values(values: Vec<bool>, threshold: f64) -> Self {
        Self { values, threshold }
    }

    pub fn all_open(len: usize) -> Self {
        Self {
            values: vec![true; len],
            threshold: 0.0,
        }
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `m_t` as 0/1 weights.
    pub fn weights(&self) -> Vec<f64> {
        self.values.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn closed_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &m)| !m).map(|(t, _)| t)
    }
}

fn check_vertex_width(motion: &MotionSequence, template: &FaceTemplate) -> Result<()> {
    if motion.width() != template.vertices().len() {
        return Err(Error::shape(format!(
            "motion width {} does not match template 3V = {}",
            motion.width(),
            template.vertices().len()
        )));
    }
    Ok(())
}

/// Distance between the closure-pair vertices of `template + offsets`, per frame.
pub fn lip_aperture(
    motion: &MotionSequence,
    template: &FaceTemplate,
    part: &RegionPartition,
) -> Result<Vec<f64>> {
    check_vertex_width(motion, template)?;
    let (a, b) = part.closure_pair();
    let v = template.vertex_count();
    if a >= v || b >= v {
        return Err(Error::Index(format!(
            "closure pair ({a}, {b}) outside a {v}-vertex template"
        )));
    }
    let (ta, tb) = (template.vertex(a), template.vertex(b));
    Ok((0..motion.frames())
        .map(|t| {
            let f = motion.frame(t);
            (0..3)
                .map(|k| {
                    let pa = ta[k] + f[3 * a + k];
                    let pb = tb[k] + f[3 * b + k];
                    (pa - pb) * (pa - pb)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// `m_t = 1` iff `aperture[t] > ε` (strict).
pub fn closure_mask(aperture: &[f64], epsilon: f64) -> Result<ClosureMask> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("ε must be positive, got {epsilon}")));
    }
    if let Some(t) = aperture.iter().position(|a| !a.is_finite()) {
        return Err(Error::invalid(format!("non-finite aperture at frame {t}")));
    }
    Ok(ClosureMask {
        values: aperture.iter().map(|&d| d > epsilon).collect(),
        threshold: epsilon,
    })
}

/// Lip and upper-face views of a full-face motion (pure column selection).
pub fn split_regions(
    motion: &MotionSequence,
    part: &RegionPartition,
) -> Result<(MotionSequence, MotionSequence)> {
    if motion.width() != 3 * part.vertex_count() {
        return Err(Error::shape(format!(
            "motion width {} does not match partition 3V = {}",
            motion.width(),
            3 * part.vertex_count()
        )));
    }
    let view = |region| {
        let offsets = motion.offsets().gather_cols(&part.columns(region));
        MotionSequence {
            offsets,
            fps: motion.fps,
            subject_id: motion.subject_id.clone(),
        }
    };
    Ok((view(Region::Lip), view(Region::Upper)))
}

/// Inverse of [`split_regions`].
pub fn merge_regions(
    lip: &MotionSequence,
    upper: &MotionSequence,
    part: &RegionPartition,
) -> Result<MotionSequence> {
    if lip.frames() != upper.frames() {
        return Err(Error::shape(format!(
            "lip has {} frames, upper has {}",
            lip.frames(),
            upper.frames()
        )));
    }
    if lip.width() != part.width(Region::Lip) || upper.width() != part.width(Region::Upper) {
        return Err(Error::shape("region widths do not match partition"));
    }
    let mut full = Matrix::zeros(lip.frames(), 3 * part.vertex_count());
    for (region, view) in [(Region::Lip, lip), (Region::Upper, upper)] {
        let cols = part.columns(region);
        for t in 0..view.frames() {
            let src = view.frame(t);
            let dst = full.row_mut(t);
            for (&c, &x) in cols.iter().zip(src) {
                dst[c] = x;
            }
        }
    }
    Ok(MotionSequence {
        offsets: full,
        fps: lip.fps,
        subject_id: lip.subject_id.clone(),
    })
}
