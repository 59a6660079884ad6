//! Two-stage training (region priors, then code queriers on frozen priors),
//! checkpoints, run logs and evaluation.
//!
//! Every run is a pure function of its configuration, the corpus and the
//! seed: clip order is shuffled per epoch from a seeded generator, gradients
//! are averaged in a fixed order and all state lives in `f32` so checkpoints
//! reload exactly.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codebook::{vq_terms, Context, PriorConfig, RegionPrior};
use crate::container::{ArrayF32, Container, ContainerWriter};
use crate::corpus::{Corpus, CorpusClip, Split};
use crate::error::{Error, Result};
use crate::geometry::{closure_mask, lip_aperture, split_regions, ClosureMask, FaceTemplate, MotionSequence, Region, RegionPartition};
use crate::losses::{
    code_regularizer_term, diversity_term, lip_diversity_term, lip_reconstruction_term, min_reconstruction_term,
    total_losses, LossBreakdown, LossWeights, MinScope, RegionTerms,
};
use crate::metrics::{self, ApertureTable, MetricReport, MESH_UNITS};
use crate::nn::{AdamW, AdamWConfig, ParamId, ParamStore};
use crate::querier::{CdfaceModel, CodeDecode, ForwardSets, QuerierConfig, Rollout, Stages, LIP_QUERIER, UPPER_QUERIER};
use crate::tensor::Matrix;

pub const LIP_PRIOR: &str = "prior.lip";
pub const UPPER_PRIOR: &str = "prior.upper";
pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionScope {
    #[default]
    Both,
    Lip,
    Upper,
}

impl RegionScope {
    pub fn regions(self) -> Vec<Region> {
        match self {
            RegionScope::Both => vec![Region::Lip, Region::Upper],
            RegionScope::Lip => vec![Region::Lip],
            RegionScope::Upper => vec![Region::Upper],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySchedule {
    /// Lip querier first, then the upper querier with the lip querier frozen.
    #[default]
    Sequential,
    /// Both objectives summed and optimized together.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorStage {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PriorStage {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryStage {
    /// Epochs per querier (each of the two in sequential mode).
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: QuerySchedule,
    /// Gate lip diversity with the closure mask and add the closed-frame
    /// reconstruction term. Off means an all-open mask.
    pub closure_mask: bool,
    pub min_scope: MinScope,
}

impl Default for QueryStage {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            schedule: QuerySchedule::Sequential,
            closure_mask: true,
            min_scope: MinScope::PerFrame,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub regions: RegionScope,
    /// Codebook size, token dim and tokens per frame live here.
    pub prior_model: PriorConfig,
    /// Sample counts and audio width live here.
    pub querier: QuerierConfig,
    pub weights: LossWeights,
    pub prior: PriorStage,
    pub query: QueryStage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regions: RegionScope::Both,
            prior_model: PriorConfig::default(),
            querier: QuerierConfig::default(),
            weights: LossWeights::BIWI,
            prior: PriorStage::default(),
            query: QueryStage::default(),
        }
    }
}

impl TrainConfig {
    /// Small configuration sized for the synthetic corpus.
    /// Sizes and schedules for the synthetic corpus.
    ///
    /// The prior decoder sees one latent per frame, the queriers decode raw
    /// codes, and the regularizer weight sits at a quarter of the
    /// reconstruction weight. With unsquared norms a code parked on a token
    /// only moves once the reconstruction pull on it exceeds `λ_rg`, so a
    /// heavier regularizer can hold a lip code on a slightly open token
    /// through a closure.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.prior_model = PriorConfig {
            codebook_size: 64,
            latent_dim: 8,
            latent_count: 1,
            model_dim: 32,
            heads: 2,
            layers: 1,
            ffn_dim: 64,
            decoder_context: Context::Window(0),
            encoder_out_gain: 0.1,
            ..PriorConfig::default()
        };
        c.querier = QuerierConfig {
            model_dim: 48,
            heads: 2,
            layers: 2,
            ffn_dim: 64,
            audio_dim: 8,
            lip_samples: 2,
            upper_samples: 2,
            decode: CodeDecode::Continuous,
            ..QuerierConfig::default()
        };
        c.weights = LossWeights {
            diversity_lip: 0.02,
            diversity_upper: 0.02,
            reconstruction_lip: 1.0,
            reconstruction_upper: 1.0,
            regularizer: 0.25,
            epsilon: 0.05,
        };
        c.prior.epochs = 200;
        c.prior.batch_size = 4;
        c.prior.optimizer.lr = 3e-3;
        c.query.epochs = 300;
        c.query.batch_size = 4;
        c.query.optimizer.lr = 2e-3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.prior_model.validate()?;
        self.querier.validate()?;
        self.weights.validate()?;
        if self.prior.batch_size == 0 || self.query.batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        for (name, lr) in [("prior", self.prior.optimizer.lr), ("query", self.query.optimizer.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} learning rate must be positive")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: u64,
    pub values: BTreeMap<String, f64>,
}

/// Append-only JSONL log, also kept in memory.
#[derive(Debug, Default)]
pub struct RunLog {
    path: Option<PathBuf>,
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        Self {
            path: Some(path.into()),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        log::info!("{} epoch {} {:?}", record.phase, record.epoch, record.values);
        self.records.push(record);
        Ok(())
    }

    pub fn tail(&self, n: usize) -> Vec<LogRecord> {
        self.records[self.records.len().saturating_sub(n)..].to_vec()
    }

    pub fn read(path: &Path) -> Result<Vec<LogRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prior,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    config: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    stage: Stage,
    config: TrainConfig,
    partition: RegionPartition,
    template: Vec<f64>,
    subjects: Vec<String>,
    fps: f64,
    progress: BTreeMap<String, usize>,
    optimizers: BTreeMap<String, OptimizerMeta>,
    prior_checksum: String,
    log_tail: Vec<LogRecord>,
}

/// Saved optimizer of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamWConfig,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

/// Parameters, optimizer state and run context.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub partition: RegionPartition,
    pub template: FaceTemplate,
    pub subjects: Vec<String>,
    pub fps: f64,
    /// Completed epochs per phase.
    pub progress: BTreeMap<String, usize>,
    pub optimizers: BTreeMap<String, OptimizerState>,
    pub params: BTreeMap<String, ArrayF32>,
    /// Hash of every prior parameter.
    pub prior_checksum: String,
    pub log_tail: Vec<LogRecord>,
}

const LOG_TAIL: usize = 20;

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            stage: self.stage,
            config: self.config.clone(),
            partition: self.partition.clone(),
            template: self.template.vertices().to_vec(),
            subjects: self.subjects.clone(),
            fps: self.fps,
            progress: self.progress.clone(),
            optimizers: self
                .optimizers
                .iter()
                .map(|(k, o)| {
                    (
                        k.clone(),
                        OptimizerMeta {
                            step: o.step,
                            config: o.config,
                        },
                    )
                })
                .collect(),
            prior_checksum: self.prior_checksum.clone(),
            log_tail: self.log_tail.clone(),
        };
        let mut w = ContainerWriter::new(CHECKPOINT_KIND).meta(&meta)?;
        for (name, a) in &self.params {
            w = w.array(format!("param/{name}"), a.clone());
        }
        for (phase, o) in &self.optimizers {
            for (name, (m, v)) in &o.moments {
                let (rows, cols) = self.params[name].shape();
                w = w.array(format!("adam/{phase}/m/{name}"), ArrayF32 { rows, cols, data: m.clone() });
                w = w.array(format!("adam/{phase}/v/{name}"), ArrayF32 { rows, cols, data: v.clone() });
            }
        }
        w.write(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::read(dir)?;
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = c.meta()?;
        let mut params = BTreeMap::new();
        let mut optimizers: BTreeMap<String, OptimizerState> = meta
            .optimizers
            .iter()
            .map(|(k, o)| {
                (
                    k.clone(),
                    OptimizerState {
                        step: o.step,
                        config: o.config,
                        moments: BTreeMap::new(),
                    },
                )
            })
            .collect();
        let names: Vec<String> = c.names().map(str::to_string).collect();
        for name in &names {
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p.to_string(), c.array(name)?.clone());
            }
        }
        for name in &names {
            if let Some(rest) = name.strip_prefix("adam/") {
                let (phase, rest) = rest
                    .split_once('/')
                    .ok_or_else(|| Error::format(dir, format!("bad optimizer array {name}")))?;
                let Some(pname) = rest.strip_prefix("m/") else { continue };
                let m = c.array(name)?.data.clone();
                let v = c.array(&format!("adam/{phase}/v/{pname}"))?.data.clone();
                optimizers
                    .get_mut(phase)
                    .ok_or_else(|| Error::format(dir, format!("moments for unknown phase {phase}")))?
                    .moments
                    .insert(pname.to_string(), (m, v));
            }
        }
        Ok(Self {
            stage: meta.stage,
            config: meta.config,
            partition: meta.partition,
            template: FaceTemplate::new(meta.template)?,
            subjects: meta.subjects,
            fps: meta.fps,
            progress: meta.progress,
            optimizers,
            params,
            prior_checksum: meta.prior_checksum,
            log_tail: meta.log_tail,
        })
    }

    fn capture(&mut self, store: &ParamStore) {
        self.params = store
            .ids()
            .map(|id| {
                let (rows, cols) = store.shape(id);
                (
                    store.name(id).to_string(),
                    ArrayF32 {
                        rows,
                        cols,
                        data: store.raw(id).to_vec(),
                    },
                )
            })
            .collect();
    }

    fn capture_optimizer(&mut self, phase: &str, opt: &AdamW, store: &ParamStore) {
        let moments = store
            .ids()
            .filter_map(|id| opt.moments(id).map(|(m, v)| (store.name(id).to_string(), (m.to_vec(), v.to_vec()))))
            .collect();
        self.optimizers.insert(
            phase.to_string(),
            OptimizerState {
                step: opt.step,
                config: opt.config,
                moments,
            },
        );
    }

    fn restore_optimizer(&self, phase: &str, config: AdamWConfig, store: &ParamStore) -> AdamW {
        let mut opt = AdamW::new(config);
        if let Some(s) = self.optimizers.get(phase) {
            opt.step = s.step;
            for (name, (m, v)) in &s.moments {
                if let Some(id) = store.find(name) {
                    opt.set_moments(id, m.clone(), v.clone());
                }
            }
        }
        opt
    }

    /// Copies every stored parameter whose name starts with `prefix` into
    /// `store`; all of them must exist there with the same shape.
    fn restore_params(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, a) in self.params.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let id = store
                .find(name)
                .ok_or_else(|| Error::config(format!("checkpoint parameter {name} has no place in the model")))?;
            if store.shape(id) != a.shape() {
                return Err(Error::config(format!(
                    "parameter {name} is {:?} in the checkpoint, {:?} in the model",
                    a.shape(),
                    store.shape(id)
                )));
            }
            store.set_raw(id, &a.data)?;
            n += 1;
        }
        Ok(n)
    }

    /// Rebuilds the priors with the stored weights.
    pub fn priors(&self) -> Result<(ParamStore, Priors)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let priors = build_priors(&mut store, &mut rng, &self.config.prior_model, &self.partition)?;
        let n = self.restore_params(&mut store, "prior.")?;
        if n != store.len() {
            return Err(Error::config(format!("checkpoint holds {n} of {} prior parameters", store.len())));
        }
        Ok((store, priors))
    }

    /// Rebuilds the full model with the stored weights (query checkpoints).
    pub fn model(&self) -> Result<(ParamStore, CdfaceModel)> {
        if self.stage != Stage::Query {
            return Err(Error::config("checkpoint holds priors only; run train-query first"));
        }
        let mut store = ParamStore::new();
        let model = build_model(&mut store, &self.config, &self.partition, self.subjects.clone())?;
        let n = self.restore_params(&mut store, "")?;
        if n != store.len() {
            return Err(Error::config(format!("checkpoint holds {n} of {} parameters", store.len())));
        }
        store.set_frozen_prefix("prior.", true);
        Ok((store, model))
    }

    /// Hash of all parameters (priors and queriers).
    pub fn checksum(&self) -> String {
        let mut store = ParamStore::new();
        for (name, a) in &self.params {
            let m = Matrix::from_vec(a.rows, a.cols, vec![0.0; a.rows * a.cols]).expect("shape");
            let id = store.add(name.clone(), m);
            store.set_raw(id, &a.data).expect("same shape");
        }
        store.checksum("")
    }
}

impl ArrayF32 {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
pub struct Priors {
    pub lip: RegionPrior,
    pub upper: RegionPrior,
}

impl Priors {
    pub fn get(&self, region: Region) -> &RegionPrior {
        match region {
            Region::Lip => &self.lip,
            Region::Upper => &self.upper,
        }
    }
}

pub fn build_priors(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &PriorConfig,
    part: &RegionPartition,
) -> Result<Priors> {
    let lip = RegionPrior::new(store, rng, LIP_PRIOR, Region::Lip, part.width(Region::Lip), *cfg)?;
    let upper = RegionPrior::new(store, rng, UPPER_PRIOR, Region::Upper, part.width(Region::Upper), *cfg)?;
    Ok(Priors { lip, upper })
}

/// Priors plus queriers, initialized from `config.seed`.
pub fn build_model(
    store: &mut ParamStore,
    config: &TrainConfig,
    part: &RegionPartition,
    subjects: Vec<String>,
) -> Result<CdfaceModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let priors = build_priors(store, &mut rng, &config.prior_model, part)?;
    CdfaceModel::new(store, &mut rng, config.querier.clone(), part.clone(), priors.lip, priors.upper, subjects)
}

fn check_corpus(corpus: &Corpus, config: &TrainConfig) -> Result<()> {
    if corpus.split(Split::Train).next().is_none() {
        return Err(Error::config("corpus has no training clips"));
    }
    let d_a = corpus.clips[0].audio.cols();
    if d_a != config.querier.audio_dim {
        return Err(Error::config(format!(
            "corpus audio has d_a = {d_a}, config expects {}",
            config.querier.audio_dim
        )));
    }
    Ok(())
}

fn train_clips(corpus: &Corpus) -> Vec<&CorpusClip> {
    corpus.split(Split::Train).collect()
}

fn epoch_order(seed: u64, phase: &str, epoch: usize, n: usize) -> Vec<usize> {
    let tag: u64 = phase.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x1000_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn region_view(clip: &CorpusClip, part: &RegionPartition, region: Region) -> Matrix {
    clip.motion.offsets().gather_cols(&part.columns(region))
}

/// Prior objective for one clip: `(total, reconstruction, codebook, commitment, token ids)`.
pub fn prior_loss(
    g: &mut Graph,
    store: &ParamStore,
    prior: &RegionPrior,
    x: &Matrix,
) -> Result<(Var, [f64; 3], Vec<usize>)> {
    let xv = g.constant(x.clone());
    let pass = prior.forward(g, store, xv)?;
    let (rec, cb, commit) = vq_terms(g, xv, pass.x_hat, pass.z, pass.q);
    let terms = [g.value(rec).item(), g.value(cb).item(), g.value(commit).item()];
    let total = g.add_all(&[rec, cb, commit]);
    Ok((total, terms, pass.token_ids))
}

/// Trains the priors of `config.regions` for `config.prior.epochs` epochs
/// in total, continuing from `resume` when given.
pub fn train_prior(config: &TrainConfig, corpus: &Corpus, resume: Option<&Checkpoint>, log: &mut RunLog) -> Result<Checkpoint> {
    config.validate()?;
    check_corpus(corpus, config)?;
    let part = &corpus.partition;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let priors = build_priors(&mut store, &mut rng, &config.prior_model, part)?;
    let mut ckpt = Checkpoint {
        stage: Stage::Prior,
        config: config.clone(),
        partition: part.clone(),
        template: corpus.template.clone(),
        subjects: corpus.subjects(),
        fps: corpus.fps(),
        progress: BTreeMap::new(),
        optimizers: BTreeMap::new(),
        params: BTreeMap::new(),
        prior_checksum: String::new(),
        log_tail: Vec::new(),
    };
    if let Some(r) = resume {
        if r.stage != Stage::Prior || r.config.prior_model != config.prior_model || r.partition != *part {
            return Err(Error::config("resume checkpoint does not match this prior configuration"));
        }
        r.restore_params(&mut store, "prior.")?;
        ckpt.progress = r.progress.clone();
        ckpt.optimizers = r.optimizers.clone();
    }
    let clips = train_clips(corpus);
    for region in config.regions.regions() {
        let prior = priors.get(region);
        let phase = prior.prefix().to_string();
        let done = ckpt.progress.get(&phase).copied().unwrap_or(0);
        let mut opt = match resume {
            Some(r) => r.restore_optimizer(&phase, config.prior.optimizer, &store),
            None => AdamW::new(config.prior.optimizer),
        };
        let xs: Vec<Matrix> = clips.iter().map(|c| region_view(c, part, region)).collect();
        for epoch in done..config.prior.epochs {
            let order = epoch_order(config.seed, &phase, epoch, xs.len());
            let mut sums = [0.0; 4];
            let mut usage = vec![0usize; config.prior_model.codebook_size];
            for batch in order.chunks(config.prior.batch_size) {
                let mut grads = Vec::with_capacity(batch.len());
                for &i in batch {
                    let mut g = Graph::new();
                    let (total, terms, ids) = prior_loss(&mut g, &store, prior, &xs[i])?;
                    sums[0] += g.value(total).item();
                    for k in 0..3 {
                        sums[k + 1] += terms[k];
                    }
                    for id in ids {
                        usage[id] += 1;
                    }
                    let gr = g.backward(total);
                    grads.push(AdamW::collect(&g, &gr, &store));
                }
                opt.apply(&mut store, &AdamW::average(grads));
            }
            let n = xs.len() as f64;
            let mut values = BTreeMap::new();
            values.insert("loss".into(), sums[0] / n);
            values.insert("reconstruction".into(), sums[1] / n);
            values.insert("codebook".into(), sums[2] / n);
            values.insert("commitment".into(), sums[3] / n);
            values.insert("codes_used".into(), usage.iter().filter(|&&u| u > 0).count() as f64);
            log.push(LogRecord {
                phase: phase.clone(),
                epoch: epoch + 1,
                steps: opt.step,
                values,
            })?;
            ckpt.progress.insert(phase.clone(), epoch + 1);
        }
        ckpt.capture_optimizer(&phase, &opt, &store);
    }
    ckpt.capture(&store);
    ckpt.prior_checksum = store.checksum("prior.");
    ckpt.log_tail = log.tail(LOG_TAIL);
    Ok(ckpt)
}

/// Mean per-vertex RMS reconstruction error of a prior over clips.
pub fn prior_rms(store: &ParamStore, prior: &RegionPrior, clips: &[&CorpusClip], part: &RegionPartition) -> Result<f64> {
    let mut total = 0.0;
    for c in clips {
        let x = MotionSequence::new(region_view(c, part, prior.region()), c.motion.fps())?;
        let y = prior.encode_decode(store, &x)?;
        total += crate::codebook::per_vertex_rms(x.offsets(), y.offsets());
    }
    Ok(total / clips.len() as f64)
}

/// Closure mask used for training on one clip.
pub fn training_mask(clip: &CorpusClip, template: &FaceTemplate, part: &RegionPartition, w: &LossWeights, enabled: bool) -> Result<ClosureMask> {
    if !enabled {
        return Ok(ClosureMask::all_open(clip.frames()));
    }
    closure_mask(&lip_aperture(&clip.motion, template, part)?, w.epsilon)
}

/// Builds the region loss terms of a teacher-forced pass.
#[allow(clippy::too_many_arguments)]
pub fn query_terms(
    g: &mut Graph,
    store: &ParamStore,
    model: &CdfaceModel,
    sets: &ForwardSets,
    gt_lip: &Matrix,
    gt_upper: &Matrix,
    mask: &ClosureMask,
    weights: &LossWeights,
    scope: MinScope,
) -> Result<(RegionTerms, Option<RegionTerms>)> {
    let gl = g.constant(gt_lip.clone());
    let lip_div = if sets.lip_motion.len() >= 2 && weights.diversity_lip > 0.0 {
        Some(lip_diversity_term(g, &sets.lip_motion, mask)?)
    } else {
        None
    };
    let lip = RegionTerms {
        diversity: lip_div,
        reconstruction: lip_reconstruction_term(g, &sets.lip_motion, gl, mask, scope)?,
        regularizer: code_regularizer_term(g, &sets.lip_codes, &model.lip_prior.codebook(store))?,
    };
    if sets.upper_motion.is_empty() {
        return Ok((lip, None));
    }
    let gu = g.constant(gt_upper.clone());
    let mut div = Vec::new();
    let mut rec = Vec::new();
    for set in &sets.upper_motion {
        if set.len() >= 2 && weights.diversity_upper > 0.0 {
            div.push(diversity_term(g, set)?);
        }
        rec.push(min_reconstruction_term(g, set, gu, scope)?);
    }
    let codes: Vec<Var> = sets.upper_codes.iter().flatten().copied().collect();
    let upper = RegionTerms {
        diversity: if div.is_empty() { None } else { Some(g.add_all(&div)) },
        reconstruction: g.add_all(&rec),
        regularizer: code_regularizer_term(g, &codes, &model.upper_prior.codebook(store))?,
    };
    Ok((lip, Some(upper)))
}

/// Which objective a query phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueryPhase {
    Lip,
    Upper,
    Joint,
}

impl QueryPhase {
    fn name(self) -> &'static str {
        match self {
            QueryPhase::Lip => LIP_QUERIER,
            QueryPhase::Upper => UPPER_QUERIER,
            QueryPhase::Joint => "query.joint",
        }
    }
}

/// Teacher-forced losses of one clip: the scalar to optimize in `phase`
/// and the full breakdown.
fn clip_query_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &CdfaceModel,
    config: &TrainConfig,
    template: &FaceTemplate,
    clip: &CorpusClip,
    phase: QueryPhase,
) -> Result<(Var, LossBreakdown)> {
    let (lip, upper) = split_regions(&clip.motion, &model.partition)?;
    let mask = training_mask(clip, template, &model.partition, &config.weights, config.query.closure_mask)?;
    let style = model.style_index(clip.motion.subject_id())?;
    let stages = Stages {
        upper: phase != QueryPhase::Lip,
    };
    let sets = model.teacher_forced_forward(g, store, lip.offsets(), upper.offsets(), &clip.audio, style, stages)?;
    let (lt, ut) = query_terms(
        g,
        store,
        model,
        &sets,
        lip.offsets(),
        upper.offsets(),
        &mask,
        &config.weights,
        config.query.min_scope,
    )?;
    let zero = g.constant(Matrix::scalar(0.0));
    let ut = ut.unwrap_or(RegionTerms {
        diversity: None,
        reconstruction: zero,
        regularizer: zero,
    });
    let (ll, lu, breakdown) = total_losses(g, &lt, &ut, &config.weights);
    let loss = match phase {
        QueryPhase::Lip => ll,
        QueryPhase::Upper => lu,
        QueryPhase::Joint => g.add(ll, lu),
    };
    Ok((loss, breakdown))
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.lip_diversity += b.lip_diversity;
    acc.lip_reconstruction += b.lip_reconstruction;
    acc.lip_regularizer += b.lip_regularizer;
    acc.upper_diversity += b.upper_diversity;
    acc.upper_reconstruction += b.upper_reconstruction;
    acc.upper_regularizer += b.upper_regularizer;
}

fn scale_breakdown(b: &mut LossBreakdown, s: f64) {
    for v in [
        &mut b.lip_diversity,
        &mut b.lip_reconstruction,
        &mut b.lip_regularizer,
        &mut b.upper_diversity,
        &mut b.upper_reconstruction,
        &mut b.upper_regularizer,
    ] {
        *v *= s;
    }
}

fn breakdown_values(b: &LossBreakdown, w: &LossWeights) -> BTreeMap<String, f64> {
    let (ll, lu) = b.totals(w);
    [
        ("L_lip", ll),
        ("L_upper", lu),
        ("lip_diversity", b.lip_diversity),
        ("lip_reconstruction", b.lip_reconstruction),
        ("lip_regularizer", b.lip_regularizer),
        ("upper_diversity", b.upper_diversity),
        ("upper_reconstruction", b.upper_reconstruction),
        ("upper_regularizer", b.upper_regularizer),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Mean teacher-forced loss breakdown over `clips` (no parameter update).
pub fn mean_query_losses(ckpt: &Checkpoint, clips: &[&CorpusClip]) -> Result<LossBreakdown> {
    let (store, model) = ckpt.model()?;
    let mut acc = LossBreakdown::default();
    for clip in clips {
        let mut g = Graph::inference();
        let (_, b) = clip_query_loss(&mut g, &store, &model, &ckpt.config, &ckpt.template, clip, QueryPhase::Joint)?;
        add_breakdown(&mut acc, &b);
    }
    scale_breakdown(&mut acc, 1.0 / clips.len() as f64);
    Ok(acc)
}

/// Trains the queriers on top of the frozen priors of `priors`, continuing
/// from `resume` (a query checkpoint) when given. Fails if any prior
/// parameter changes.
pub fn train_query(
    config: &TrainConfig,
    corpus: &Corpus,
    priors: &Checkpoint,
    resume: Option<&Checkpoint>,
    log: &mut RunLog,
) -> Result<Checkpoint> {
    config.validate()?;
    check_corpus(corpus, config)?;
    if priors.config.prior_model != config.prior_model {
        return Err(Error::config("prior checkpoint was trained with a different prior_model section"));
    }
    if priors.partition != corpus.partition {
        return Err(Error::config("prior checkpoint and corpus use different region partitions"));
    }
    let part = &corpus.partition;
    let mut store = ParamStore::new();
    let model = build_model(&mut store, config, part, corpus.subjects())?;
    priors.restore_params(&mut store, "prior.")?;
    let mut ckpt = Checkpoint {
        stage: Stage::Query,
        config: config.clone(),
        partition: part.clone(),
        template: corpus.template.clone(),
        subjects: corpus.subjects(),
        fps: corpus.fps(),
        progress: BTreeMap::new(),
        optimizers: BTreeMap::new(),
        params: BTreeMap::new(),
        prior_checksum: String::new(),
        log_tail: Vec::new(),
    };
    if let Some(r) = resume {
        if r.stage != Stage::Query || r.config != *config {
            return Err(Error::config("resume checkpoint does not match this query configuration"));
        }
        r.restore_params(&mut store, "")?;
        ckpt.progress = r.progress.clone();
        ckpt.optimizers = r.optimizers.clone();
    }
    store.set_frozen_prefix("prior.", true);
    let frozen_hash = store.checksum("prior.");
    if frozen_hash != priors.prior_checksum {
        return Err(Error::Contract("prior weights differ from the prior checkpoint".into()));
    }
    let phases = match config.query.schedule {
        QuerySchedule::Sequential => vec![QueryPhase::Lip, QueryPhase::Upper],
        QuerySchedule::Joint => vec![QueryPhase::Joint],
    };
    let clips = train_clips(corpus);
    for phase in phases {
        let name = phase.name();
        store.set_frozen_prefix(LIP_QUERIER, phase == QueryPhase::Upper);
        let done = ckpt.progress.get(name).copied().unwrap_or(0);
        let mut opt = match resume {
            Some(r) => r.restore_optimizer(name, config.query.optimizer, &store),
            None => AdamW::new(config.query.optimizer),
        };
        for epoch in done..config.query.epochs {
            let order = epoch_order(config.seed, name, epoch, clips.len());
            let mut acc = LossBreakdown::default();
            for batch in order.chunks(config.query.batch_size) {
                let mut grads = Vec::with_capacity(batch.len());
                for &i in batch {
                    let mut g = Graph::new();
                    let (loss, b) = clip_query_loss(&mut g, &store, &model, config, &corpus.template, clips[i], phase)?;
                    add_breakdown(&mut acc, &b);
                    let gr = g.backward(loss);
                    grads.push(AdamW::collect(&g, &gr, &store));
                }
                opt.apply(&mut store, &AdamW::average(grads));
            }
            if store.checksum("prior.") != frozen_hash {
                return Err(Error::Contract("prior parameters changed during query training".into()));
            }
            scale_breakdown(&mut acc, 1.0 / clips.len() as f64);
            log.push(LogRecord {
                phase: name.to_string(),
                epoch: epoch + 1,
                steps: opt.step,
                values: breakdown_values(&acc, &config.weights),
            })?;
            ckpt.progress.insert(name.to_string(), epoch + 1);
        }
        ckpt.capture_optimizer(name, &opt, &store);
    }
    store.set_frozen_prefix(LIP_QUERIER, false);
    ckpt.capture(&store);
    ckpt.prior_checksum = frozen_hash;
    ckpt.log_tail = log.tail(LOG_TAIL);
    Ok(ckpt)
}

/// Per-clip evaluation output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEvaluation {
    pub clip: String,
    pub report: MetricReport,
    pub apertures: ApertureTable,
    pub rollout: Rollout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub clips: Vec<ClipEvaluation>,
}

/// Frames where the lips are closed in the ground truth but some sample's
/// aperture exceeds `limit`, counted per sample.
pub fn closure_violations(
    samples: &[MotionSequence],
    gt_mask: &ClosureMask,
    template: &FaceTemplate,
    part: &RegionPartition,
    limit: f64,
) -> Result<usize> {
    let mut n = 0;
    for s in samples {
        let ap = lip_aperture(s, template, part)?;
        n += gt_mask.closed_frames().filter(|&t| ap[t] > limit).count();
    }
    Ok(n)
}

/// Accuracy and diversity metrics of one clip's samples.
///
/// LVE, MVE and FDD use sample 0; ALVE averages LVE over all samples. With a
/// single sample the diversity metrics compare it with itself and are 0.
pub fn clip_metrics(
    samples: &[MotionSequence],
    gt: &MotionSequence,
    gt_mask: &ClosureMask,
    template: &FaceTemplate,
    part: &RegionPartition,
    epsilon: f64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let pairable: Vec<MotionSequence> = if samples.len() == 1 {
        vec![samples[0].clone(), samples[0].clone()]
    } else {
        samples.to_vec()
    };
    let mut r = MetricReport::new(samples.len(), part);
    r.clip_count = 1;
    r.insert("LVE", metrics::lve(&samples[0], gt, part)?, MESH_UNITS);
    r.insert("MVE", metrics::mve(&samples[0], gt)?, MESH_UNITS);
    r.insert("FDD", metrics::fdd(&samples[0], gt, part)?, MESH_UNITS);
    r.insert("ALVE", metrics::alve(samples, gt, part)?, MESH_UNITS);
    r.insert("APD", metrics::apd(&pairable)?, MESH_UNITS);
    r.insert("UPD", metrics::upd(&pairable, part)?, MESH_UNITS);
    r.insert("LPD", metrics::lpd(&pairable, part)?, MESH_UNITS);
    r.insert("MPD", metrics::mpd(&pairable)?, MESH_UNITS);
    let v = closure_violations(samples, gt_mask, template, part, 2.0 * epsilon)?;
    r.insert("CLOSURE_VIOLATIONS", v as f64, "sample-frames");
    Ok(r)
}

fn evaluate_clip(
    ckpt: &Checkpoint,
    store: &ParamStore,
    model: &CdfaceModel,
    clip: &CorpusClip,
    nl: usize,
    nu: usize,
) -> Result<ClipEvaluation> {
    let style = model.style_index(clip.motion.subject_id())?;
    let audio = crate::audio::AudioFeatureSequence::new(clip.audio.clone(), clip.motion.fps(), "synthetic")?;
    let aligned = crate::audio::align_to_motion(&audio, clip.motion.fps(), clip.frames())?;
    let rollout = model.rollout(store, &aligned, style, nl, nu, clip.frames(), clip.motion.fps())?;
    let report = clip_metrics(
        &rollout.faces,
        &clip.motion,
        &clip.mask_gt,
        &ckpt.template,
        &ckpt.partition,
        ckpt.config.weights.epsilon,
    )?;
    let mut apertures = metrics::aperture_curves(&rollout.faces, &ckpt.template, &ckpt.partition)?;
    apertures.push("ground_truth", lip_aperture(&clip.motion, &ckpt.template, &ckpt.partition)?);
    Ok(ClipEvaluation {
        clip: clip.name.clone(),
        report,
        apertures,
        rollout,
    })
}

/// Rolls out `nl · nu` samples per clip of `split` and aggregates metrics.
/// Clips are spread over `threads` workers; results keep clip order.
pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus, split: Split, nl: usize, nu: usize, threads: usize) -> Result<Evaluation> {
    let (store, model) = ckpt.model()?;
    let clips: Vec<&CorpusClip> = corpus.split(split).collect();
    if clips.is_empty() {
        return Err(Error::config(format!("corpus has no {split:?} clips")));
    }
    let threads = threads.clamp(1, clips.len());
    let chunk = clips.len().div_ceil(threads);
    let results: Vec<Result<Vec<ClipEvaluation>>> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| {
                let (store, model) = (&store, &model);
                s.spawn(move || part.iter().map(|c| evaluate_clip(ckpt, store, model, c, nl, nu)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(clips.len());
    for r in results {
        out.extend(r?);
    }
    let reports: Vec<MetricReport> = out.iter().map(|c| c.report.clone()).collect();
    let mut report = metrics::average_reports(&reports)?;
    if let Some(v) = report.metrics.get_mut("CLOSURE_VIOLATIONS") {
        v.value *= reports.len() as f64;
    }
    Ok(Evaluation { report, clips: out })
}

/// Parameter ids under a prefix, in registration order.
pub fn params_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            sentences: 4,
            frames: 12,
            vertices: 10,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::toy();
        c.prior_model.codebook_size = 8;
        c.prior_model.latent_dim = 4;
        c.prior_model.model_dim = 8;
        c.prior_model.ffn_dim = 16;
        c.querier.model_dim = 8;
        c.querier.ffn_dim = 16;
        c.querier.layers = 1;
        c.prior.epochs = 3;
        c.query.epochs = 2;
        c.query.batch_size = 2;
        c
    }

    #[test]
    fn shipped_configs_parse() {
        let toy = TrainConfig::from_toml(include_str!("../../../configs/toy.toml")).unwrap();
        assert_eq!(toy, TrainConfig::toy());
        let smoke = TrainConfig::from_toml(include_str!("../../../configs/smoke.toml")).unwrap();
        assert_eq!(smoke.querier, toy.querier);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig::toy();
        let text = c.to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("seed = \"x\"").is_err());
        let partial = TrainConfig::from_toml("seed = 5\n[querier]\nlip_samples = 1\n").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.querier.lip_samples, 1);
        assert_eq!(partial.weights, LossWeights::BIWI);
        let mut bad = c.clone();
        bad.prior.batch_size = 0;
        assert!(TrainConfig::from_toml(&bad.to_toml()).is_err());
    }

    #[test]
    fn resumed_prior_training_matches_uninterrupted_run() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.regions = RegionScope::Lip;
        let full = train_prior(&cfg, &corpus, None, &mut RunLog::in_memory()).unwrap();
        let mut short = cfg.clone();
        short.prior.epochs = 2;
        let first = train_prior(&short, &corpus, None, &mut RunLog::in_memory()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        first.save(dir.path()).unwrap();
        let reloaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(reloaded, first);
        let mut log = RunLog::in_memory();
        let resumed = train_prior(&cfg, &corpus, Some(&reloaded), &mut log).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].epoch, 3);
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.checksum(), full.checksum());
    }

    #[test]
    fn query_training_keeps_priors_frozen_and_round_trips() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let priors = train_prior(&cfg, &corpus, None, &mut RunLog::in_memory()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("log.jsonl");
        let mut log = RunLog::to_file(&log_path);
        let q = train_query(&cfg, &corpus, &priors, None, &mut log).unwrap();
        for (name, a) in &priors.params {
            assert_eq!(&q.params[name], a, "{name}");
        }
        assert_eq!(q.prior_checksum, priors.prior_checksum);
        assert_eq!(RunLog::read(&log_path).unwrap(), log.records);
        assert_eq!(log.records.len(), 4);
        assert!(log.records.iter().all(|r| r.values.contains_key("lip_diversity")));

        let ckdir = dir.path().join("ck");
        q.save(&ckdir).unwrap();
        let back = Checkpoint::load(&ckdir).unwrap();
        let (s1, m1) = q.model().unwrap();
        let (s2, m2) = back.model().unwrap();
        let clip = &corpus.clips[0];
        let r1 = m1.rollout(&s1, &clip.audio, 0, 2, 2, clip.frames(), 25.0).unwrap();
        let r2 = m2.rollout(&s2, &clip.audio, 0, 2, 2, clip.frames(), 25.0).unwrap();
        assert_eq!(r1, r2);

        // a tampered prior is rejected
        let mut tampered = priors.clone();
        tampered.prior_checksum = "0".repeat(64);
        assert!(matches!(
            train_query(&cfg, &corpus, &tampered, None, &mut RunLog::in_memory()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn evaluation_report_is_complete() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.prior.epochs = 1;
        cfg.query.epochs = 1;
        let priors = train_prior(&cfg, &corpus, None, &mut RunLog::in_memory()).unwrap();
        assert!(priors.model().is_err());
        let q = train_query(&cfg, &corpus, &priors, None, &mut RunLog::in_memory()).unwrap();
        let e1 = evaluate(&q, &corpus, Split::Test, 2, 2, 1).unwrap();
        let e2 = evaluate(&q, &corpus, Split::Test, 2, 2, 3).unwrap();
        assert_eq!(e1, e2);
        for k in ["LVE", "MVE", "FDD", "ALVE", "APD", "UPD", "LPD", "MPD", "CLOSURE_VIOLATIONS"] {
            assert!(e1.report.metrics.contains_key(k), "{k}");
        }
        assert!(e1.report.metrics.values().all(|m| !m.unit.is_empty()));
        assert_eq!(e1.report.sample_count, 4);
        let single = evaluate(&q, &corpus, Split::Test, 1, 1, 1).unwrap();
        assert_eq!(single.report.get("APD"), Some(0.0));
        assert_eq!(single.report.get("MPD"), Some(0.0));
    }

    #[test]
    fn self_comparison_metrics_vanish() {
        let corpus = tiny_corpus();
        let c = &corpus.clips[0];
        let r = clip_metrics(std::slice::from_ref(&c.motion), &c.motion, &c.mask_gt, &corpus.template, &corpus.partition, 0.05).unwrap();
        for k in ["LVE", "MVE", "FDD", "CLOSURE_VIOLATIONS"] {
            assert_eq!(r.get(k), Some(0.0), "{k}");
        }
    }
}
