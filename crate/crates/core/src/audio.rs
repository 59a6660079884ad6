//! Audio feature providers and time alignment to the motion frame rate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `T_a × d_a` feature track at its native rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    features: Matrix,
    native_rate: f64,
    source_tag: String,
}

impl AudioFeatureSequence {
    pub fn new(features: Matrix, native_rate: f64, source_tag: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::invalid("feature track needs at least one frame and one dimension"));
        }
        if !features.is_finite() {
            return Err(Error::invalid("feature track has non-finite entries"));
        }
        if !(native_rate > 0.0 && native_rate.is_finite()) {
            return Err(Error::invalid(format!("feature rate must be positive, got {native_rate}")));
        }
        Ok(Self {
            features,
            native_rate,
            source_tag: source_tag.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn native_rate(&self) -> f64 {
        self.native_rate
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.native_rate
    }

    /// Configuration error unless the feature width is `d_a`.
    pub fn check_dim(&self, d_a: usize) -> Result<()> {
        if self.dim() != d_a {
            return Err(Error::config(format!(
                "features have d_a = {}, model expects {d_a}",
                self.dim()
            )));
        }
        Ok(())
    }
}

pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &'static str;

    /// Features for the source at `path`.
    fn extract(&self, path: &Path) -> Result<AudioFeatureSequence>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Reads the phoneme-embedding track stored in a corpus clip.
    #[default]
    Synthetic,
    /// Reads a feature container written by [`save_features`].
    Precomputed,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "precomputed" => Ok(Self::Precomputed),
            other => Err(Error::config(format!("unknown feature provider {other:?}"))),
        }
    }
}

pub fn provider(kind: ProviderKind) -> Box<dyn FeatureProvider> {
    match kind {
        ProviderKind::Synthetic => Box::new(SyntheticProvider),
        ProviderKind::Precomputed => Box::new(PrecomputedProvider),
    }
}

/// Looks a provider up by name.
pub fn provider_by_name(name: &str) -> Result<Box<dyn FeatureProvider>> {
    Ok(provider(name.parse()?))
}

pub struct SyntheticProvider;

pub const CLIP_AUDIO_ARRAY: &str = "audio";
pub const FEATURE_KIND: &str = "features";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RateMeta {
    fps: f64,
}

impl FeatureProvider for SyntheticProvider {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn extract(&self, path: &Path) -> Result<AudioFeatureSequence> {
        let c = Container::read(path)?;
        c.expect_kind(crate::corpus::CLIP_KIND)?;
        let meta: RateMeta = c.meta()?;
        AudioFeatureSequence::new(c.matrix(CLIP_AUDIO_ARRAY)?, meta.fps, self.name())
    }
}

pub struct PrecomputedProvider;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureMeta {
    rate: f64,
    d_a: usize,
    source: String,
}

impl FeatureProvider for PrecomputedProvider {
    fn name(&self) -> &'static str {
        "precomputed"
    }

    fn extract(&self, path: &Path) -> Result<AudioFeatureSequence> {
        load_features(path)
    }
}

pub fn save_features(dir: &Path, f: &AudioFeatureSequence) -> Result<()> {
    let meta = FeatureMeta {
        rate: f.native_rate,
        d_a: f.dim(),
        source: f.source_tag.clone(),
    };
    ContainerWriter::new(FEATURE_KIND)
        .meta(&meta)?
        .matrix("features", &f.features)
        .write(dir)?;
    Ok(())
}

pub fn load_features(dir: &Path) -> Result<AudioFeatureSequence> {
    let c = Container::read(dir)?;
    c.expect_kind(FEATURE_KIND)?;
    let meta: FeatureMeta = c.meta()?;
    let features = c.matrix("features")?;
    if features.cols() != meta.d_a {
        return Err(Error::format(dir, format!("manifest d_a {} vs array width {}", meta.d_a, features.cols())));
    }
    AudioFeatureSequence::new(features, meta.rate, meta.source)
}

/// Linear interpolation along time to exactly `target_t` rows. The first and
/// last rows map onto the first and last source frames.
pub fn align_to_motion(f: &AudioFeatureSequence, target_fps: f64, target_t: usize) -> Result<Matrix> {
    if target_t == 0 {
        return Err(Error::invalid("target length must be at least one frame"));
    }
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(Error::invalid(format!("target fps must be positive, got {target_fps}")));
    }
    let src = f.features();
    let ta = src.rows();
    if ta == target_t {
        return Ok(src.clone());
    }
    let mut out = Matrix::zeros(target_t, src.cols());
    let denom = target_t.saturating_sub(1).max(1) as f64;
    for i in 0..target_t {
        let pos = (i * (ta - 1)) as f64 / denom;
        let lo = (pos.floor() as usize).min(ta - 1);
        let hi = (lo + 1).min(ta - 1);
        let w = pos - lo as f64;
        let (a, b) = (src.row(lo), src.row(hi));
        for (o, (x, y)) in out.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
            *o = x + w * (y - x);
        }
    }
    Ok(out)
}

/// Rejects a requested motion length whose duration at `fps` disagrees with
/// the feature track by more than one frame on either side.
pub fn check_duration(f: &AudioFeatureSequence, fps: f64, target_t: usize) -> Result<()> {
    let want = target_t as f64 / fps;
    let slack = 1.0 / fps + 1.0 / f.native_rate();
    if (want - f.duration()).abs() > slack + 1e-9 {
        return Err(Error::invalid(format!(
            "{target_t} frames at {fps} fps ({want:.3} s) do not match {:.3} s of audio features",
            f.duration()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(rows: Vec<Vec<f64>>) -> AudioFeatureSequence {
        AudioFeatureSequence::new(Matrix::from_rows(&rows).unwrap(), 25.0, "test").unwrap()
    }

    #[test]
    fn identity_and_constant() {
        let f = track(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(&align_to_motion(&f, 25.0, 2).unwrap(), f.features());
        let c = track(vec![vec![0.7]; 4]);
        let out = align_to_motion(&c, 25.0, 9).unwrap();
        assert_eq!(out.rows(), 9);
        assert!(out.data().iter().all(|&x| x == 0.7));
    }

    #[test]
    fn ramp_interpolation() {
        let f = track(vec![vec![0.0], vec![1.0], vec![2.0]]);
        let out = align_to_motion(&f, 25.0, 5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(align_to_motion(&f, 25.0, 0).is_err());
    }

    #[test]
    fn feature_round_trip_and_dim_check() {
        let dir = tempfile::tempdir().unwrap();
        let f = track(vec![vec![0.25, -1.5], vec![3.0, 0.125]]);
        save_features(dir.path(), &f).unwrap();
        let back = provider_by_name("precomputed").unwrap().extract(dir.path()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.check_dim(3).unwrap_err().exit_code(), 2);
        assert!(provider_by_name("wav2vec").is_err());
    }

    #[test]
    fn duration_check() {
        let f = AudioFeatureSequence::new(Matrix::zeros(50, 2), 50.0, "t").unwrap();
        assert!(check_duration(&f, 25.0, 25).is_ok());
        assert!(check_duration(&f, 25.0, 40).is_err());
    }

    proptest! {
        #[test]
        fn alignment_is_idempotent_and_bounded(vals in prop::collection::vec(-3.0f64..3.0, 2..12), t in 1usize..30) {
            let f = AudioFeatureSequence::new(Matrix::column_vector(vals.clone()), 25.0, "p").unwrap();
            let once = align_to_motion(&f, 25.0, t).unwrap();
            let again = align_to_motion(&AudioFeatureSequence::new(once.clone(), 25.0, "p").unwrap(), 25.0, t).unwrap();
            prop_assert_eq!(&once, &again);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &x in once.data() {
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
            if t > 1 {
                prop_assert_eq!(once.get(0, 0), vals[0]);
                prop_assert_eq!(once.get(t - 1, 0), *vals.last().unwrap());
            }
        }
    }
}
