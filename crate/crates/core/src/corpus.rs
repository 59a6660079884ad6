//! Procedural talking-face corpus with known one-to-many structure.
//!
//! Every sentence (a phoneme timeline and its embedding track, standing in
//! for audio) is rendered under every speaking style. Styles change lip
//! amplitude, lip timing, how much of the opening is carried by the upper
//! lip, mouth spreading and the whole upper-face expression, so the same
//! "audio" maps to several valid motions. Plosive frames close the lips
//! exactly (zero aperture) under every style.
//!
//! Faces are abstract vertex clouds: a lip strip made of an upper-lip row and
//! a lower-lip row that coincide at rest, plus an upper-face grid above.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::CLIP_AUDIO_ARRAY;
use crate::container::{round_to_f32, Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::geometry::{
    closure_mask, lip_aperture, split_regions, ClosureMask, FaceTemplate, MotionSequence, RegionPartition,
};
use crate::metrics;
use crate::tensor::Matrix;

pub const CLIP_KIND: &str = "clip";
pub const CORPUS_KIND: &str = "corpus";
pub const EXTERNAL_KIND: &str = "external-clip";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub styles: usize,
    pub sentences: usize,
    pub vertices: usize,
    pub fps: f64,
    /// Closure threshold in mesh units.
    pub epsilon: f64,
    pub frames: usize,
    pub audio_dim: usize,
    pub phonemes: usize,
    pub plosives: usize,
    /// Fraction of sentences (taken from the end) held out for testing.
    pub holdout: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            styles: 2,
            sentences: 20,
            vertices: 30,
            fps: 25.0,
            epsilon: 0.05,
            frames: 32,
            audio_dim: 8,
            phonemes: 10,
            plosives: 3,
            holdout: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vertices < 6 {
            return Err(Error::config(format!("need at least 6 vertices, got {}", self.vertices)));
        }
        if self.styles < 2 {
            return Err(Error::config(format!("need at least 2 styles, got {}", self.styles)));
        }
        if self.sentences == 0 || self.frames < 2 || self.audio_dim == 0 {
            return Err(Error::config("sentences, frames (≥ 2) and audio_dim must be positive"));
        }
        if self.plosives == 0 || self.plosives >= self.phonemes {
            return Err(Error::config("need at least one plosive and one open phoneme"));
        }
        if !(self.fps > 0.0 && self.epsilon > 0.0 && self.epsilon < 0.2) {
            return Err(Error::config("fps must be positive and epsilon in (0, 0.2)"));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::config("holdout must be in [0, 1)"));
        }
        Ok(())
    }

    /// Lip strip width (vertices per lip row).
    pub fn lip_row(&self) -> usize {
        (self.vertices / 5).max(1)
    }

    pub fn test_sentences(&self) -> usize {
        ((self.sentences as f64 * self.holdout).round() as usize).min(self.sentences - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeSpec {
    pub id: usize,
    pub embedding: Vec<f64>,
    /// Target lip opening in mesh units; 0 for plosives.
    pub aperture_target: f64,
    /// Mouth-corner spreading, signed.
    pub spread: f64,
    pub duration_frames: usize,
}

impl PhonemeSpec {
    pub fn is_plosive(&self, epsilon: f64) -> bool {
        self.aperture_target <= epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub id: usize,
    /// Scales every lip opening.
    pub lip_amplitude: f64,
    /// Trailing smoothing window of the opening, in frames.
    pub lip_window: usize,
    /// Share of the opening carried by the upper lip.
    pub upper_lip_share: f64,
    pub spread_gain: f64,
    /// Per-basis response to speech energy.
    pub expression_gain: Vec<f64>,
    /// Per-basis idle oscillation amplitude.
    pub idle_amplitude: Vec<f64>,
    pub idle_phase: Vec<f64>,
    pub idle_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSegment {
    pub phoneme: usize,
    pub start: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusClip {
    pub name: String,
    pub sentence: usize,
    pub style: usize,
    pub split: Split,
    /// Frame-aligned phoneme-embedding track.
    pub audio: Matrix,
    pub motion: MotionSequence,
    pub mask_gt: ClosureMask,
    pub timeline: Vec<PhonemeSegment>,
}

impl CorpusClip {
    pub fn subject(&self) -> String {
        style_subject(self.style)
    }

    pub fn frames(&self) -> usize {
        self.motion.frames()
    }
}

pub fn style_subject(style: usize) -> String {
    format!("style{style}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClipMeta {
    name: String,
    fps: f64,
    sentence: usize,
    style: usize,
    subject: String,
    split: Split,
    epsilon: f64,
    timeline: Vec<PhonemeSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    pub sentence: usize,
    pub style: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusMeta {
    config: CorpusConfig,
    partition: RegionPartition,
    phonemes: Vec<PhonemeSpec>,
    styles: Vec<StyleSpec>,
    clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub template: FaceTemplate,
    pub partition: RegionPartition,
    pub phonemes: Vec<PhonemeSpec>,
    pub styles: Vec<StyleSpec>,
    pub clips: Vec<CorpusClip>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn clip(&self, name: &str) -> Option<&CorpusClip> {
        self.clips.iter().find(|c| c.name == name)
    }

    /// All style renditions of one sentence, in style order.
    pub fn renditions(&self, sentence: usize) -> Vec<&CorpusClip> {
        self.clips.iter().filter(|c| c.sentence == sentence).collect()
    }

    /// Average pairwise distance among the style renditions of a sentence.
    pub fn inter_style_apd(&self, sentence: usize) -> Result<f64> {
        let motions: Vec<MotionSequence> = self.renditions(sentence).iter().map(|c| c.motion.clone()).collect();
        metrics::apd(&motions)
    }

    pub fn subjects(&self) -> Vec<String> {
        (0..self.styles.len()).map(style_subject).collect()
    }

    pub fn fps(&self) -> f64 {
        self.config.fps
    }
}

/// Lip strip of `2·w` vertices followed by an upper-face grid.
pub fn build_face(cfg: &CorpusConfig) -> Result<(FaceTemplate, RegionPartition)> {
    let v = cfg.vertices;
    let w = cfg.lip_row();
    let mut verts = Vec::with_capacity(3 * v);
    for _row in 0..2 {
        for k in 0..w {
            let x = lip_x(k, w);
            verts.extend_from_slice(&[x, 0.0, -0.2 * x * x]);
        }
    }
    let upper = v - 2 * w;
    let cols = (upper as f64).sqrt().ceil() as usize;
    for i in 0..upper {
        let (r, c) = (i / cols, i % cols);
        let x = if cols > 1 { -1.0 + 2.0 * c as f64 / (cols - 1) as f64 } else { 0.0 };
        verts.extend_from_slice(&[x, 0.5 + 0.4 * r as f64, -0.1 * x * x]);
    }
    let template = FaceTemplate::new(verts.into_iter().map(|x| f64::from(x as f32)).collect())?;
    let mid = w / 2;
    let part = RegionPartition::new(v, (0..2 * w).collect(), (2 * w..v).collect(), (mid, w + mid))?;
    Ok((template, part))
}

fn lip_x(k: usize, w: usize) -> f64 {
    if w > 1 {
        -1.0 + 2.0 * k as f64 / (w - 1) as f64
    } else {
        0.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn make_phonemes(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<PhonemeSpec> {
    (0..cfg.phonemes)
        .map(|id| {
            let plosive = id < cfg.plosives;
            PhonemeSpec {
                id,
                embedding: (0..cfg.audio_dim).map(|_| uniform(rng, -1.0, 1.0)).collect(),
                aperture_target: if plosive { 0.0 } else { uniform(rng, 0.45, 1.0) },
                spread: if plosive { 0.0 } else { uniform(rng, -0.3, 0.4) },
                duration_frames: if plosive { 2 } else { rng.gen_range(2..=4) },
            }
        })
        .collect()
}

const EXPRESSION_BASES: usize = 3;

fn make_styles(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<StyleSpec> {
    let n = cfg.styles;
    (0..n)
        .map(|id| {
            let f = id as f64 / (n - 1) as f64;
            StyleSpec {
                id,
                lip_amplitude: 0.75 + 0.5 * f,
                lip_window: 1 + id % 2,
                upper_lip_share: 0.2 + 0.3 * f,
                spread_gain: 0.1 + 0.15 * f,
                expression_gain: (0..EXPRESSION_BASES)
                    .map(|k| {
                        let sign = if (id + k) % 2 == 0 { 1.0 } else { -1.0 };
                        sign * uniform(rng, 0.4, 0.8)
                    })
                    .collect(),
                idle_amplitude: (0..EXPRESSION_BASES).map(|_| uniform(rng, 0.15, 0.3)).collect(),
                idle_phase: (0..EXPRESSION_BASES)
                    .map(|_| uniform(rng, 0.0, std::f64::consts::TAU))
                    .collect(),
                idle_hz: 0.6 + 0.5 * f,
            }
        })
        .collect()
}

fn make_timeline(cfg: &CorpusConfig, phonemes: &[PhonemeSpec], rng: &mut ChaCha8Rng) -> Vec<PhonemeSegment> {
    let mut out = Vec::new();
    let mut t = 0;
    let mut since_plosive = 0;
    while t < cfg.frames {
        // a plosive at least every third phoneme
        let plosive = since_plosive >= 2 || rng.gen_bool(0.3);
        let id = if plosive {
            rng.gen_range(0..cfg.plosives)
        } else {
            rng.gen_range(cfg.plosives..cfg.phonemes)
        };
        since_plosive = if plosive { 0 } else { since_plosive + 1 };
        let frames = phonemes[id].duration_frames.min(cfg.frames - t);
        out.push(PhonemeSegment {
            phoneme: id,
            start: t,
            frames,
        });
        t += frames;
    }
    out
}

fn per_frame(timeline: &[PhonemeSegment]) -> Vec<usize> {
    timeline
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.phoneme, s.frames))
        .collect()
}

fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            xs[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
        })
        .collect()
}

struct Scene<'a> {
    cfg: &'a CorpusConfig,
    part: &'a RegionPartition,
    template: &'a FaceTemplate,
    phonemes: &'a [PhonemeSpec],
    basis: &'a Matrix,
}

impl Scene<'_> {
    fn render(&self, frames: &[usize], style: &StyleSpec) -> Matrix {
        let cfg = self.cfg;
        let t_len = frames.len();
        let w = cfg.lip_row();
        let mid = lip_x(w / 2, w);
        let targets: Vec<f64> = frames.iter().map(|&p| self.phonemes[p].aperture_target).collect();
        let spreads: Vec<f64> = frames.iter().map(|&p| self.phonemes[p].spread).collect();
        let mut opening = trailing_mean(&targets, style.lip_window);
        for (o, &p) in opening.iter_mut().zip(frames) {
            if self.phonemes[p].is_plosive(cfg.epsilon) {
                *o = 0.0;
            } else {
                *o *= style.lip_amplitude;
            }
        }
        let spread = trailing_mean(&spreads, style.lip_window);
        let energy = trailing_mean(&targets, 3);

        let mut m = Matrix::zeros(t_len, 3 * cfg.vertices);
        for t in 0..t_len {
            let row = m.row_mut(t);
            for k in 0..w {
                let x = lip_x(k, w);
                let profile = 1.0 - 0.25 * (x - mid).abs();
                let sx = style.spread_gain * spread[t] * x;
                let up = 3 * k;
                let lo = 3 * (w + k);
                row[up] = sx;
                row[lo] = sx;
                row[up + 1] = style.upper_lip_share * opening[t] * profile;
                row[lo + 1] = -(1.0 - style.upper_lip_share) * opening[t] * profile;
            }
            let time = t as f64 / cfg.fps;
            for (b, basis) in (0..EXPRESSION_BASES).map(|b| (b, self.basis.row(b))) {
                let idle = style.idle_amplitude[b]
                    * (std::f64::consts::TAU * style.idle_hz * time + style.idle_phase[b]).sin();
                let c = style.expression_gain[b] * energy[t] + idle;
                for (j, &u) in self.part.upper_indices().iter().enumerate() {
                    for d in 0..3 {
                        row[3 * u + d] += c * basis[3 * j + d];
                    }
                }
            }
        }
        round_to_f32(&m)
    }

    fn clip(&self, sentence: usize, style: &StyleSpec, timeline: &[PhonemeSegment], split: Split) -> Result<CorpusClip> {
        let frames = per_frame(timeline);
        let audio = Matrix::from_rows(
            &frames
                .iter()
                .map(|&p| self.phonemes[p].embedding.clone())
                .collect::<Vec<_>>(),
        )?;
        let motion = MotionSequence::new(self.render(&frames, style), self.cfg.fps)?.with_subject(style_subject(style.id));
        let aperture = lip_aperture(&motion, self.template, self.part)?;
        let mask_gt = closure_mask(&aperture, self.cfg.epsilon)?;
        Ok(CorpusClip {
            name: format!("s{sentence:03}_style{}", style.id),
            sentence,
            style: style.id,
            split,
            audio: round_to_f32(&audio),
            motion,
            mask_gt,
            timeline: timeline.to_vec(),
        })
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (template, partition) = build_face(cfg)?;
    let phonemes = make_phonemes(cfg, &mut rng);
    let styles = make_styles(cfg, &mut rng);
    let upper_width = 3 * partition.upper_count();
    let basis = Matrix::from_vec(
        EXPRESSION_BASES,
        upper_width,
        (0..EXPRESSION_BASES * upper_width).map(|_| uniform(&mut rng, -0.3, 0.3)).collect(),
    )?;
    let scene = Scene {
        cfg,
        part: &partition,
        template: &template,
        phonemes: &phonemes,
        basis: &basis,
    };
    let first_test = cfg.sentences - cfg.test_sentences();
    let mut clips = Vec::new();
    for s in 0..cfg.sentences {
        let timeline = make_timeline(cfg, &phonemes, &mut rng);
        let split = if s >= first_test { Split::Test } else { Split::Train };
        for style in &styles {
            clips.push(scene.clip(s, style, &timeline, split)?);
        }
    }
    let corpus = Corpus {
        config: cfg.clone(),
        template,
        partition,
        phonemes,
        styles,
        clips,
    };
    self_check(&corpus)?;
    Ok(corpus)
}

/// Every pair of styles must differ on every sentence, and all renditions of
/// a sentence must share one closure mask.
fn self_check(corpus: &Corpus) -> Result<()> {
    for s in 0..corpus.config.sentences {
        let r = corpus.renditions(s);
        for i in 0..r.len() {
            for j in (i + 1)..r.len() {
                if r[i].motion == r[j].motion {
                    return Err(Error::Contract(format!("styles {i} and {j} coincide on sentence {s}")));
                }
                if r[i].mask_gt != r[j].mask_gt {
                    return Err(Error::Contract(format!("styles {i} and {j} close differently on sentence {s}")));
                }
            }
        }
    }
    Ok(())
}

pub fn save_clip(dir: &Path, clip: &CorpusClip) -> Result<()> {
    let meta = ClipMeta {
        name: clip.name.clone(),
        fps: clip.motion.fps(),
        sentence: clip.sentence,
        style: clip.style,
        subject: clip.subject(),
        split: clip.split,
        epsilon: clip.mask_gt.threshold(),
        timeline: clip.timeline.clone(),
    };
    ContainerWriter::new(CLIP_KIND)
        .meta(&meta)?
        .matrix("motion", clip.motion.offsets())
        .matrix(CLIP_AUDIO_ARRAY, &clip.audio)
        .matrix("mask", &Matrix::column_vector(clip.mask_gt.weights()))
        .write(dir)?;
    Ok(())
}

pub fn load_clip(dir: &Path) -> Result<CorpusClip> {
    let c = Container::read(dir)?;
    c.expect_kind(CLIP_KIND)?;
    let meta: ClipMeta = c.meta()?;
    let motion = c.matrix("motion")?;
    let audio = c.matrix(CLIP_AUDIO_ARRAY)?;
    let mask = c.matrix("mask")?;
    let t = motion.rows();
    if audio.rows() != t || mask.rows() != t || mask.cols() != 1 {
        return Err(Error::format(
            dir,
            format!(
                "arrays disagree on frame count: motion {t}, audio {}, mask {}×{}",
                audio.rows(),
                mask.rows(),
                mask.cols()
            ),
        ));
    }
    let values = mask
        .data()
        .iter()
        .map(|&m| match m {
            x if x == 1.0 => Ok(true),
            x if x == 0.0 => Ok(false),
            other => Err(Error::format(dir, format!("mask entry {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorpusClip {
        name: meta.name,
        sentence: meta.sentence,
        style: meta.style,
        split: meta.split,
        audio,
        motion: MotionSequence::new(motion, meta.fps)?.with_subject(meta.subject),
        mask_gt: ClosureMask::from_values(values, meta.epsilon),
        timeline: meta.timeline,
    })
}

pub fn clip_dir(root: &Path, name: &str) -> PathBuf {
    root.join("clips").join(name)
}

pub fn save_corpus(root: &Path, corpus: &Corpus) -> Result<()> {
    let meta = CorpusMeta {
        config: corpus.config.clone(),
        partition: corpus.partition.clone(),
        phonemes: corpus.phonemes.clone(),
        styles: corpus.styles.clone(),
        clips: corpus
            .clips
            .iter()
            .map(|c| ClipEntry {
                name: c.name.clone(),
                sentence: c.sentence,
                style: c.style,
                split: c.split,
            })
            .collect(),
    };
    for clip in &corpus.clips {
        save_clip(&clip_dir(root, &clip.name), clip)?;
    }
    ContainerWriter::new(CORPUS_KIND)
        .meta(&meta)?
        .matrix("template", &Matrix::row_vector(corpus.template.vertices().to_vec()))
        .write(root)?;
    Ok(())
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let c = Container::read(root)?;
    c.expect_kind(CORPUS_KIND)?;
    let meta: CorpusMeta = c.meta()?;
    let template = FaceTemplate::new(c.matrix("template")?.into_vec())?;
    meta.partition
        .validate(template.vertex_count())
        .map_err(|e| Error::format(root, e.to_string()))?;
    let mut clips = Vec::with_capacity(meta.clips.len());
    for entry in &meta.clips {
        let clip = load_clip(&clip_dir(root, &entry.name))?;
        if clip.motion.width() != template.vertices().len() {
            return Err(Error::format(
                clip_dir(root, &entry.name),
                format!("motion width {} vs template 3V {}", clip.motion.width(), template.vertices().len()),
            ));
        }
        clips.push(clip);
    }
    Ok(Corpus {
        config: meta.config,
        template,
        partition: meta.partition,
        phonemes: meta.phonemes,
        styles: meta.styles,
        clips,
    })
}

/// Lip/upper view of a clip plus the inputs the querier needs.
pub fn clip_regions(clip: &CorpusClip, part: &RegionPartition) -> Result<(MotionSequence, MotionSequence)> {
    split_regions(&clip.motion, part)
}

/// Mesh layouts of the two public datasets this toolkit's format mirrors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalLayout {
    Biwi,
    Vocaset,
}

impl ExternalLayout {
    pub fn vertex_count(self) -> usize {
        match self {
            ExternalLayout::Biwi => 23370,
            ExternalLayout::Vocaset => 5023,
        }
    }

    pub fn fps(self) -> f64 {
        match self {
            ExternalLayout::Biwi => 25.0,
            ExternalLayout::Vocaset => 60.0,
        }
    }
}

impl std::str::FromStr for ExternalLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biwi" => Ok(Self::Biwi),
            "vocaset" => Ok(Self::Vocaset),
            other => Err(Error::config(format!("unknown dataset layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMeta {
    pub name: String,
    pub fps: f64,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalClip {
    pub name: String,
    pub motion: MotionSequence,
}

/// Writes one clip in the layout [`load_external_dataset_stub`] reads.
pub fn save_external_clip(dir: &Path, name: &str, motion: &MotionSequence) -> Result<()> {
    let meta = ExternalMeta {
        name: name.to_string(),
        fps: motion.fps(),
        subject: motion.subject_id().unwrap_or("unknown").to_string(),
    };
    ContainerWriter::new(EXTERNAL_KIND)
        .meta(&meta)?
        .matrix("motion", motion.offsets())
        .write(dir)?;
    Ok(())
}

/// Iterates over the clip containers under `root` (sorted by directory name),
/// checking vertex count and frame rate against `layout`. Only the tensor
/// layout is checked here; real recordings of either dataset have not been
/// run through this loader.
pub fn load_external_dataset_stub(
    layout: ExternalLayout,
    root: &Path,
) -> Result<impl Iterator<Item = Result<ExternalClip>>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::container::MANIFEST).is_file())
        .collect();
    dirs.sort();
    Ok(dirs.into_iter().map(move |dir| {
        let c = Container::read(&dir)?;
        c.expect_kind(EXTERNAL_KIND)?;
        let meta: ExternalMeta = c.meta()?;
        let motion = c.matrix("motion")?;
        let v = layout.vertex_count();
        if motion.cols() != 3 * v {
            return Err(Error::format(
                &dir,
                format!("{layout:?} clips have {v} vertices, found {}", motion.cols() / 3),
            ));
        }
        if meta.fps != layout.fps() {
            return Err(Error::format(&dir, format!("{layout:?} clips run at {} fps, found {}", layout.fps(), meta.fps)));
        }
        Ok(ExternalClip {
            name: meta.name,
            motion: MotionSequence::new(motion, meta.fps)?.with_subject(meta.subject),
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;

    fn small() -> CorpusConfig {
        CorpusConfig {
            sentences: 5,
            frames: 24,
            ..Default::default()
        }
    }

    #[test]
    fn face_layout() {
        let cfg = small();
        let (template, part) = build_face(&cfg).unwrap();
        assert_eq!(template.vertex_count(), 30);
        assert_eq!(part.lip_indices().len(), 12);
        assert_eq!(part.upper_count(), 18);
        let (a, b) = part.closure_pair();
        assert_eq!(template.vertex(a), template.vertex(b));
        let six = CorpusConfig { vertices: 6, ..small() };
        let (_, part) = build_face(&six).unwrap();
        assert_eq!(part.lip_indices().len(), 2);
        assert!(CorpusConfig { vertices: 5, ..small() }.validate().is_err());
        assert!(CorpusConfig { styles: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn masks_agree_with_geometry_and_plosives_close() {
        let c = generate_corpus(&small()).unwrap();
        for clip in &c.clips {
            let ap = lip_aperture(&clip.motion, &c.template, &c.partition).unwrap();
            assert_eq!(closure_mask(&ap, c.config.epsilon).unwrap(), clip.mask_gt);
            let frames = per_frame(&clip.timeline);
            for (t, &p) in frames.iter().enumerate() {
                let plosive = c.phonemes[p].is_plosive(c.config.epsilon);
                assert_eq!(!clip.mask_gt.values()[t], plosive, "frame {t} of {}", clip.name);
                if plosive {
                    assert_eq!(ap[t], 0.0);
                }
            }
            assert!(clip.mask_gt.closed_frames().count() > 0);
        }
    }

    #[test]
    fn styles_share_timing_but_differ_in_motion() {
        let c = generate_corpus(&small()).unwrap();
        for s in 0..c.config.sentences {
            let r = c.renditions(s);
            assert_eq!(r.len(), 2);
            let a = lip_aperture(&r[0].motion, &c.template, &c.partition).unwrap();
            let b = lip_aperture(&r[1].motion, &c.template, &c.partition).unwrap();
            assert!(pearson(&a, &b) > 0.9, "sentence {s}");
            assert_eq!(r[0].mask_gt, r[1].mask_gt);
            let uppers: Vec<MotionSequence> =
                r.iter().map(|c2| clip_regions(c2, &c.partition).unwrap().1).collect();
            assert!(metrics::apd(&uppers).unwrap() > 0.0);
            assert_eq!(r[0].audio, r[1].audio);
            assert!(c.inter_style_apd(s).unwrap() > 0.0);
        }
        assert_eq!(c.partition.width(Region::Upper), 54);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn holdout_takes_last_sentences() {
        let c = generate_corpus(&CorpusConfig::default()).unwrap();
        let test: Vec<usize> = c.split(Split::Test).map(|x| x.sentence).collect();
        assert_eq!(test, vec![16, 16, 17, 17, 18, 18, 19, 19]);
        assert_eq!(c.split(Split::Train).count(), 32);
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let cfg = small();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_corpus(d1.path(), &generate_corpus(&cfg).unwrap()).unwrap();
        save_corpus(d2.path(), &generate_corpus(&cfg).unwrap()).unwrap();
        for entry in walk(d1.path()) {
            let rel = entry.strip_prefix(d1.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(d2.path().join(rel)).unwrap(), "{rel:?}");
        }
        let loaded = load_corpus(d1.path()).unwrap();
        assert_eq!(loaded, generate_corpus(&cfg).unwrap());
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn clip_round_trip_and_shape_errors() {
        let c = generate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_clip(dir.path(), &c.clips[0]).unwrap();
        assert_eq!(load_clip(dir.path()).unwrap(), c.clips[0]);

        // rewrite the mask with a wrong frame count but a valid checksum
        let bad = ContainerWriter::new(CLIP_KIND)
            .meta(&Container::read(dir.path()).unwrap().manifest.meta)
            .unwrap()
            .matrix("motion", c.clips[0].motion.offsets())
            .matrix(CLIP_AUDIO_ARRAY, &c.clips[0].audio)
            .matrix("mask", &Matrix::zeros(3, 1));
        let dir2 = tempfile::tempdir().unwrap();
        bad.write(dir2.path()).unwrap();
        assert!(matches!(load_clip(dir2.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn external_stub_checks_layout() {
        let dir = tempfile::tempdir().unwrap();
        let biwi = MotionSequence::new(Matrix::zeros(2, 3 * 23370), 25.0).unwrap();
        save_external_clip(&dir.path().join("a"), "a", &biwi).unwrap();
        let clips: Vec<_> = load_external_dataset_stub(ExternalLayout::Biwi, dir.path())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].motion.width(), 70110);
        let mut it = load_external_dataset_stub(ExternalLayout::Vocaset, dir.path()).unwrap();
        assert!(it.next().unwrap().is_err());

        let voca_dir = tempfile::tempdir().unwrap();
        let voca = MotionSequence::new(Matrix::zeros(3, 3 * 5023), 60.0).unwrap();
        save_external_clip(&voca_dir.path().join("v"), "v", &voca).unwrap();
        let n = load_external_dataset_stub(ExternalLayout::Vocaset, voca_dir.path()).unwrap().count();
        assert_eq!(n, 1);
        let wrong_fps = tempfile::tempdir().unwrap();
        save_external_clip(&wrong_fps.path().join("w"), "w", &MotionSequence::new(Matrix::zeros(1, 3 * 5023), 30.0).unwrap()).unwrap();
        assert!(load_external_dataset_stub(ExternalLayout::Vocaset, wrong_fps.path()).unwrap().next().unwrap().is_err());
    }
}
