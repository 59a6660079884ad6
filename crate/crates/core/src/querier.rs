//! Autoregressive code queriers.
//!
//! The lip querier reads its own motion history (self-attention) and the
//! audio features (cross-attention) and emits `N^l` latent codes per frame
//! through `N^l` independent linear heads over a shared trunk. The upper-face
//! querier additionally cross-attends to the past frames of one lip sample
//! and emits `N^u` codes per lip sample. Codes are decoded to motion by the
//! frozen prior decoders.
//!
//! Row `τ` of a trunk predicts frame `τ`. Its input is a learned start vector
//! followed by the embedded history frames `0..τ-1`; audio attention sees
//! frames `0..=τ` only, so every prediction is causal in both streams.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codebook::{straight_through, RegionPrior};
use crate::error::{Error, Result};
use crate::geometry::{merge_regions, MotionSequence, RegionPartition};
use crate::nn::{attention_bias, head_slopes, sinusoidal_positions, Attend, AttnMask, Block, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Matrix;

/// How predicted codes are turned into decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeDecode {
    /// Decode the nearest codebook tokens; gradients reach the codes through
    /// the straight-through estimator.
    #[default]
    StraightThrough,
    /// Decode the raw predicted codes.
    Continuous,
}

/// Which lip track the upper querier reads during teacher-forced training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipStream {
    /// The (detached) teacher-forced prediction of lip sample `i`.
    #[default]
    Predicted,
    /// The ground-truth lip track for every lip sample.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerierConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub audio_dim: usize,
    /// `N^l`
    pub lip_samples: usize,
    /// `N^u`
    pub upper_samples: usize,
    /// Linear recency bias on audio attention.
    pub recency_bias: bool,
    pub decode: CodeDecode,
    pub lip_stream: LipStream,
    /// Style row used for subjects absent from the style table.
    pub fallback_style: usize,
}

impl Default for QuerierConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 128,
            audio_dim: 8,
            lip_samples: 5,
            upper_samples: 3,
            recency_bias: true,
            decode: CodeDecode::StraightThrough,
            lip_stream: LipStream::Predicted,
            fallback_style: 0,
        }
    }
}

impl QuerierConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("audio_dim", self.audio_dim),
            ("lip_samples", self.lip_samples),
            ("upper_samples", self.upper_samples),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config("model_dim must be divisible by heads"));
        }
        Ok(())
    }
}

/// One learnable embedding per training subject.
#[derive(Debug, Clone)]
pub struct StyleTable {
    param: ParamId,
    subjects: Vec<String>,
}

impl StyleTable {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, subjects: Vec<String>, dim: usize) -> Result<Self> {
        use rand::Rng;
        if subjects.is_empty() {
            return Err(Error::config("style table needs at least one subject"));
        }
        let data = (0..subjects.len() * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let param = store.add(name, Matrix::from_vec(subjects.len(), dim, data)?);
        Ok(Self { param, subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn index(&self, subject: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s == subject)
    }

    /// Row for `subject`, or `fallback` when the subject is unknown.
    pub fn resolve(&self, subject: Option<&str>, fallback: usize) -> Result<usize> {
        match subject.and_then(|s| self.index(s)) {
            Some(i) => Ok(i),
            None if fallback < self.len() => Ok(fallback),
            None => Err(Error::config(format!(
                "fallback style {fallback} outside a {}-entry style table",
                self.len()
            ))),
        }
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, style: usize) -> Result<Var> {
        if style >= self.len() {
            return Err(Error::Index(format!("style {style} outside a {}-entry table", self.len())));
        }
        let table = g.param(store, self.param);
        Ok(g.gather_rows(table, &[style]))
    }
}

/// Start vector plus linear embedding of a history track.
#[derive(Debug, Clone)]
struct History {
    start: ParamId,
    embed: Linear,
    width: usize,
}

impl History {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, dim: usize) -> Self {
        Self {
            start: store.add(format!("{name}.start"), Matrix::zeros(1, dim)),
            embed: Linear::new(store, rng, &format!("{name}.embed"), width, dim),
            width,
        }
    }

    /// `(rows + 1) × dim`: start row then embedded history rows, plus positions.
    fn sequence(&self, g: &mut Graph, store: &ParamStore, history: &Matrix, dim: usize) -> Result<Var> {
        if history.rows() > 0 && history.cols() != self.width {
            return Err(Error::shape(format!(
                "history width {} vs expected {}",
                history.cols(),
                self.width
            )));
        }
        let start = g.param(store, self.start);
        let x = if history.rows() == 0 {
            start
        } else {
            let h = g.constant(history.clone());
            let h = self.embed.forward(g, store, h);
            g.concat_rows(&[start, h])
        };
        let pos = g.constant(sinusoidal_positions(history.rows() + 1, dim));
        Ok(g.add(x, pos))
    }
}

/// Shared temporal trunk of one region querier.
#[derive(Debug, Clone)]
struct Trunk {
    own: History,
    lip: Option<History>,
    audio_in: Linear,
    style: StyleTable,
    blocks: Vec<Block>,
    norm: LayerNorm,
    dim: usize,
    slopes: Vec<f64>,
}

impl Trunk {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &QuerierConfig,
        own_width: usize,
        lip_width: Option<usize>,
        subjects: Vec<String>,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let own = History::new(store, rng, &format!("{name}.own"), own_width, d);
        let lip = lip_width.map(|w| History::new(store, rng, &format!("{name}.lip"), w, d));
        let audio_in = Linear::new(store, rng, &format!("{name}.audio_in"), cfg.audio_dim, d);
        let style = StyleTable::new(store, rng, &format!("{name}.style"), subjects, d)?;
        let streams = if lip.is_some() { 2 } else { 1 };
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, rng, &format!("{name}.block{i}"), d, cfg.heads, cfg.ffn_dim, true, streams))
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.out_norm"), d);
        Ok(Self {
            own,
            lip,
            audio_in,
            style,
            blocks,
            norm,
            dim: d,
            slopes: head_slopes(cfg.heads, cfg.recency_bias),
        })
    }

    /// Hidden states for frames `0..=history.rows()`.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: &Matrix,
        lip_history: Option<&Matrix>,
        audio: Var,
        style: usize,
    ) -> Result<Var> {
        let t = history.rows() + 1;
        let ta = g.value(audio).rows();
        if t > ta {
            return Err(Error::shape(format!("step {t} beyond {ta} audio frames")));
        }
        let x = self.own.sequence(g, store, history, self.dim)?;
        let s = self.style.embed(g, store, style)?;
        let mut x = g.add_row(x, s);

        let a = self.audio_in.forward(g, store, audio);
        let apos = g.constant(sinusoidal_positions(ta, self.dim));
        let a = g.add(a, apos);
        let audio_bias: Vec<Matrix> = self
            .slopes
            .iter()
            .map(|&s| attention_bias(t, ta, AttnMask::Causal, s))
            .collect();
        let causal: Vec<Matrix> = self.slopes.iter().map(|_| attention_bias(t, t, AttnMask::Causal, 0.0)).collect();

        let lip_mem = match (&self.lip, lip_history) {
            (Some(h), Some(lh)) => {
                if lh.rows() != history.rows() {
                    return Err(Error::shape(format!(
                        "lip history has {} frames, upper history {}",
                        lh.rows(),
                        history.rows()
                    )));
                }
                Some(h.sequence(g, store, lh, self.dim)?)
            }
            (None, None) => None,
            _ => return Err(Error::invalid("lip history given to a querier without a lip stream or vice versa")),
        };
        for block in &self.blocks {
            let mut cross = Vec::with_capacity(2);
            if let Some(m) = lip_mem {
                cross.push(Attend {
                    memory: m,
                    biases: &causal,
                });
            }
            cross.push(Attend {
                memory: a,
                biases: &audio_bias,
            });
            x = block.forward(g, store, x, &causal, &cross);
        }
        Ok(self.norm.forward(g, store, x))
    }
}

/// Region querier: trunk plus one linear head per sample.
#[derive(Debug, Clone)]
pub struct RegionQuerier {
    trunk: Trunk,
    heads: Vec<Linear>,
    code_width: usize,
    prefix: String,
}

impl RegionQuerier {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &QuerierConfig,
        prior: &RegionPrior,
        lip_width: Option<usize>,
        samples: usize,
        subjects: Vec<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        let trunk = Trunk::new(store, rng, &format!("{prefix}.trunk"), cfg, prior.width(), lip_width, subjects)?;
        let code_width = prior.config().code_width();
        let heads = (0..samples)
            .map(|i| Linear::new(store, rng, &format!("{prefix}.head{i}"), cfg.model_dim, code_width))
            .collect();
        Ok(Self {
            trunk,
            heads,
            code_width,
            prefix: prefix.to_string(),
        })
    }

    pub fn samples(&self) -> usize {
        self.heads.len()
    }

    pub fn code_width(&self) -> usize {
        self.code_width
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn styles(&self) -> &StyleTable {
        &self.trunk.style
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, i: usize, hidden: Var) -> Var {
        self.heads[i].forward(g, store, hidden)
    }

    /// Teacher-forced codes of every head: `T × h·d` each.
    fn all_heads(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: &Matrix,
        lip_history: Option<&Matrix>,
        audio: Var,
        style: usize,
    ) -> Result<Vec<Var>> {
        let hidden = self.trunk.forward(g, store, history, lip_history, audio, style)?;
        Ok((0..self.samples()).map(|i| self.head(g, store, i, hidden)).collect())
    }

    /// Code of head `i` for the frame after `history`.
    fn next_code(
        &self,
        store: &ParamStore,
        i: usize,
        history: &Matrix,
        lip_history: Option<&Matrix>,
        audio: &Matrix,
        style: usize,
    ) -> Result<Matrix> {
        let mut g = Graph::inference();
        let a = g.constant(audio.clone());
        let hidden = self.trunk.forward(&mut g, store, history, lip_history, a, style)?;
        let last = g.slice_rows(hidden, history.rows(), 1);
        let code = self.head(&mut g, store, i, last);
        Ok(g.value(code).clone())
    }
}

pub type LipQuerier = RegionQuerier;
pub type UpperQuerier = RegionQuerier;

fn empty(width: usize) -> Matrix {
    Matrix::zeros(0, width)
}

fn check_histories(histories: &[Matrix], expected: usize) -> Result<usize> {
    if histories.len() != expected {
        return Err(Error::invalid(format!("expected {expected} histories, got {}", histories.len())));
    }
    let len = histories[0].rows();
    if histories.iter().any(|h| h.rows() != len) {
        return Err(Error::shape("histories differ in length"));
    }
    Ok(len)
}

/// Everything needed to roll out or train the two queriers on top of frozen
/// priors.
#[derive(Debug, Clone)]
pub struct CdfaceModel {
    pub config: QuerierConfig,
    pub partition: RegionPartition,
    pub lip_prior: RegionPrior,
    pub upper_prior: RegionPrior,
    pub lip: LipQuerier,
    pub upper: UpperQuerier,
}

pub const LIP_QUERIER: &str = "query.lip";
pub const UPPER_QUERIER: &str = "query.upper";

impl CdfaceModel {
    /// Registers both queriers (under `query.lip` / `query.upper`) next to
    /// already registered priors.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: QuerierConfig,
        partition: RegionPartition,
        lip_prior: RegionPrior,
        upper_prior: RegionPrior,
        subjects: Vec<String>,
    ) -> Result<Self> {
        config.validate()?;
        let lip = RegionQuerier::build(store, rng, LIP_QUERIER, &config, &lip_prior, None, config.lip_samples, subjects.clone())?;
        let upper = RegionQuerier::build(
            store,
            rng,
            UPPER_QUERIER,
            &config,
            &upper_prior,
            Some(lip_prior.width()),
            config.upper_samples,
            subjects,
        )?;
        Ok(Self {
            config,
            partition,
            lip_prior,
            upper_prior,
            lip,
            upper,
        })
    }

    pub fn style_index(&self, subject: Option<&str>) -> Result<usize> {
        self.lip.styles().resolve(subject, self.config.fallback_style)
    }

    fn check_audio(&self, audio: &Matrix) -> Result<()> {
        if audio.cols() != self.config.audio_dim {
            return Err(Error::config(format!(
                "audio features have d_a = {}, model expects {}",
                audio.cols(),
                self.config.audio_dim
            )));
        }
        Ok(())
    }

    /// Decoder input for predicted codes under the configured decode mode.
    fn decoder_input(&self, g: &mut Graph, store: &ParamStore, prior: &RegionPrior, codes: Var) -> Result<Var> {
        match self.config.decode {
            CodeDecode::Continuous => Ok(codes),
            CodeDecode::StraightThrough => {
                let (q, _) = prior.codebook(store).quantize_flat(g.value(codes))?;
                let q = g.constant(q);
                Ok(straight_through(g, codes, q))
            }
        }
    }

    fn decode_graph(&self, g: &mut Graph, store: &ParamStore, prior: &RegionPrior, codes: Var) -> Result<Var> {
        let input = self.decoder_input(g, store, prior, codes)?;
        Ok(prior.decode(g, store, input))
    }

    fn decode_plain(&self, store: &ParamStore, prior: &RegionPrior, codes: &Matrix) -> Result<Matrix> {
        let mut g = Graph::inference();
        let c = g.constant(codes.clone());
        let out = self.decode_graph(&mut g, store, prior, c)?;
        Ok(g.value(out).clone())
    }

    /// One lip step: `N^l` codes for the frame after the (equal-length)
    /// histories. Head `i` reads history `i`.
    pub fn query_lip_step(&self, store: &ParamStore, histories: &[Matrix], audio: &Matrix, style: usize) -> Result<Vec<Matrix>> {
        self.check_audio(audio)?;
        check_histories(histories, self.lip.samples())?;
        histories
            .iter()
            .enumerate()
            .map(|(i, h)| self.lip.next_code(store, i, h, None, audio, style))
            .collect()
    }

    /// One upper step conditioned on one lip sample's past frames.
    pub fn query_upper_step(
        &self,
        store: &ParamStore,
        histories: &[Matrix],
        lip_history: &Matrix,
        audio: &Matrix,
        style: usize,
    ) -> Result<Vec<Matrix>> {
        self.check_audio(audio)?;
        let len = check_histories(histories, self.upper.samples())?;
        if lip_history.rows() != len {
            return Err(Error::shape(format!(
                "lip history has {} frames, upper histories {len}",
                lip_history.rows()
            )));
        }
        histories
            .iter()
            .enumerate()
            .map(|(j, h)| self.upper.next_code(store, j, h, Some(lip_history), audio, style))
            .collect()
    }

    fn roll_region(
        &self,
        store: &ParamStore,
        querier: &RegionQuerier,
        prior: &RegionPrior,
        head: usize,
        lip_track: Option<&Matrix>,
        audio: &Matrix,
        style: usize,
        t_len: usize,
    ) -> Result<(Matrix, Matrix)> {
        let mut codes = empty(querier.code_width());
        let mut motion = empty(prior.width());
        for t in 0..t_len {
            let lip_hist = lip_track.map(|l| l.slice_rows(0, t));
            let code = querier.next_code(store, head, &motion, lip_hist.as_ref(), audio, style)?;
            codes = Matrix::concat_rows(&[&codes, &code]);
            let decoded = self.decode_plain(store, prior, &codes)?;
            motion = Matrix::concat_rows(&[&motion, &decoded.slice_rows(t, 1)]);
        }
        Ok((codes, motion))
    }

    fn check_rollout(&self, audio: &Matrix, t_len: usize, nl: usize, nu: usize) -> Result<()> {
        self.check_audio(audio)?;
        if t_len == 0 {
            return Err(Error::invalid("rollout needs at least one frame"));
        }
        if audio.rows() != t_len {
            return Err(Error::shape(format!(
                "audio aligned to {} frames, rollout asks for {t_len}",
                audio.rows()
            )));
        }
        if nl == 0 || nl > self.lip.samples() || nu == 0 || nu > self.upper.samples() {
            return Err(Error::invalid(format!(
                "(N^l, N^u) = ({nl}, {nu}) outside the trained ({}, {})",
                self.lip.samples(),
                self.upper.samples()
            )));
        }
        Ok(())
    }

    /// Lip rollout of heads `0..nl`.
    pub fn rollout_lip(&self, store: &ParamStore, audio: &Matrix, style: usize, nl: usize, fps: f64) -> Result<CodeSampleSet> {
        self.check_rollout(audio, audio.rows(), nl, 1)?;
        let mut set = CodeSampleSet::default();
        for i in 0..nl {
            let (codes, motion) = self.roll_region(store, &self.lip, &self.lip_prior, i, None, audio, style, audio.rows())?;
            set.push(codes, MotionSequence::new(motion, fps)?, Lineage { lip: i, upper: None });
        }
        Ok(set)
    }

    /// Upper rollouts of heads `0..nu` on top of the given lip samples.
    pub fn rollout_upper(
        &self,
        store: &ParamStore,
        lips: &CodeSampleSet,
        audio: &Matrix,
        style: usize,
        nu: usize,
    ) -> Result<CodeSampleSet> {
        let mut set = CodeSampleSet::default();
        for (lip, lineage) in lips.decoded.iter().zip(&lips.lineage) {
            for j in 0..nu {
                let (codes, motion) = self.roll_region(
                    store,
                    &self.upper,
                    &self.upper_prior,
                    j,
                    Some(lip.offsets()),
                    audio,
                    style,
                    audio.rows(),
                )?;
                set.push(codes, MotionSequence::new(motion, lip.fps())?, Lineage { lip: lineage.lip, upper: Some(j) });
            }
        }
        Ok(set)
    }

    /// Full autoregressive synthesis of `nl · nu` full-face samples,
    /// ordered lip-major (`i · nu + j`).
    pub fn rollout(
        &self,
        store: &ParamStore,
        audio: &Matrix,
        style: usize,
        nl: usize,
        nu: usize,
        t_len: usize,
        fps: f64,
    ) -> Result<Rollout> {
        self.check_rollout(audio, t_len, nl, nu)?;
        let lip = self.rollout_lip(store, audio, style, nl, fps)?;
        let upper = self.rollout_upper(store, &lip, audio, style, nu)?;
        self.assemble(lip, upper)
    }

    /// One shared lip track and `nu` upper variants on top of it.
    pub fn control(
        &self,
        store: &ParamStore,
        audio: &Matrix,
        style: usize,
        lip: LipSource,
        nu: usize,
        fps: f64,
    ) -> Result<Rollout> {
        self.check_rollout(audio, audio.rows(), 1, nu)?;
        let lip_set = match lip {
            LipSource::Sample(k) => {
                if k >= self.lip.samples() {
                    return Err(Error::invalid(format!("lip sample {k} outside {} heads", self.lip.samples())));
                }
                let (codes, motion) =
                    self.roll_region(store, &self.lip, &self.lip_prior, k, None, audio, style, audio.rows())?;
                let mut s = CodeSampleSet::default();
                s.push(codes, MotionSequence::new(motion, fps)?, Lineage { lip: k, upper: None });
                s
            }
            LipSource::Codes(codes) => {
                if codes.rows() != audio.rows() || codes.cols() != self.lip.code_width() {
                    return Err(Error::shape(format!(
                        "lip codes {:?} vs expected {}×{}",
                        codes.shape(),
                        audio.rows(),
                        self.lip.code_width()
                    )));
                }
                let motion = self.decode_plain(store, &self.lip_prior, &codes)?;
                let mut s = CodeSampleSet::default();
                s.push(codes, MotionSequence::new(motion, fps)?, Lineage { lip: 0, upper: None });
                s
            }
        };
        let upper = self.rollout_upper(store, &lip_set, audio, style, nu)?;
        self.assemble(lip_set, upper)
    }

    fn assemble(&self, lip: CodeSampleSet, upper: CodeSampleSet) -> Result<Rollout> {
        let mut faces = Vec::with_capacity(upper.len());
        for (u, lineage) in upper.decoded.iter().zip(&upper.lineage) {
            let parent = lip
                .lineage
                .iter()
                .position(|l| l.lip == lineage.lip)
                .expect("upper samples come from listed lip samples");
            faces.push(merge_regions(&lip.decoded[parent], u, &self.partition)?);
        }
        Ok(Rollout { lip, upper, faces })
    }

    /// Teacher-forced pass over a ground-truth clip. Both queriers read
    /// ground-truth histories; the upper querier's lip stream follows
    /// [`LipStream`].
    pub fn teacher_forced_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        gt_lip: &Matrix,
        gt_upper: &Matrix,
        audio: &Matrix,
        style: usize,
        stages: Stages,
    ) -> Result<ForwardSets> {
        self.check_audio(audio)?;
        let t = gt_lip.rows();
        if gt_upper.rows() != t || audio.rows() != t {
            return Err(Error::shape(format!(
                "frame counts differ: lip {t}, upper {}, audio {}",
                gt_upper.rows(),
                audio.rows()
            )));
        }
        if t == 0 {
            return Err(Error::invalid("clip needs at least one frame"));
        }
        let a = g.constant(audio.clone());
        let lip_hist = gt_lip.slice_rows(0, t - 1);
        let lip_codes = self.lip.all_heads(g, store, &lip_hist, None, a, style)?;
        let mut lip_motion = Vec::with_capacity(lip_codes.len());
        for &c in &lip_codes {
            lip_motion.push(self.decode_graph(g, store, &self.lip_prior, c)?);
        }
        let mut upper_codes = Vec::new();
        let mut upper_motion = Vec::new();
        if stages.upper {
            let upper_hist = gt_upper.slice_rows(0, t - 1);
            for &lm in &lip_motion {
                let stream = match self.config.lip_stream {
                    LipStream::Predicted => g.value(lm).slice_rows(0, t - 1),
                    LipStream::GroundTruth => lip_hist.clone(),
                };
                let codes = self.upper.all_heads(g, store, &upper_hist, Some(&stream), a, style)?;
                let mut motions = Vec::with_capacity(codes.len());
                for &c in &codes {
                    motions.push(self.decode_graph(g, store, &self.upper_prior, c)?);
                }
                upper_codes.push(codes);
                upper_motion.push(motions);
            }
        }
        Ok(ForwardSets {
            lip_codes,
            lip_motion,
            upper_codes,
            upper_motion,
        })
    }
}

/// Which querier stages a teacher-forced pass builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub upper: bool,
}

/// Graph handles of a teacher-forced pass: `N^l` lip sets and, per lip
/// sample, `N^u` upper sets.
#[derive(Debug, Clone)]
pub struct ForwardSets {
    pub lip_codes: Vec<Var>,
    pub lip_motion: Vec<Var>,
    pub upper_codes: Vec<Vec<Var>>,
    pub upper_motion: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Lip parent `i`.
    pub lip: usize,
    /// Upper head `j` (absent for lip samples).
    pub upper: Option<usize>,
}

/// `N` parallel code sequences and their decoded region motions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodeSampleSet {
    pub codes: Vec<Matrix>,
    pub decoded: Vec<MotionSequence>,
    pub lineage: Vec<Lineage>,
}

impl CodeSampleSet {
    pub fn push(&mut self, codes: Matrix, decoded: MotionSequence, lineage: Lineage) {
        self.codes.push(codes);
        self.decoded.push(decoded);
        self.lineage.push(lineage);
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Codes and decoded motions agree in length and lineage is in range.
    pub fn validate(&self, nl: usize, nu: usize) -> Result<()> {
        if self.codes.len() != self.decoded.len() || self.codes.len() != self.lineage.len() {
            return Err(Error::Contract("sample set components differ in count".into()));
        }
        for ((c, d), l) in self.codes.iter().zip(&self.decoded).zip(&self.lineage) {
            if c.rows() != d.frames() {
                return Err(Error::Contract("codes and decoded motion differ in length".into()));
            }
            if l.lip >= nl || l.upper.is_some_and(|j| j >= nu) {
                return Err(Error::Contract(format!("lineage {l:?} outside ({nl}, {nu})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub lip: CodeSampleSet,
    pub upper: CodeSampleSet,
    pub faces: Vec<MotionSequence>,
}

/// Lip track source for control mode.
#[derive(Debug, Clone, PartialEq)]
pub enum LipSource {
    /// Roll out lip head `k`.
    Sample(usize),
    /// Decode the given `T × h·d` lip codes.
    Codes(Matrix),
}
