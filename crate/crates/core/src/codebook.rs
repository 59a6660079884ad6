//! Vector-quantized region priors.
//!
//! Each face region owns an (encoder, codebook, decoder) triple. The encoder
//! maps a `T × width` motion to `T` latent frames of `h × d` (stored flat as
//! `T × h·d`), every embedding is snapped to its nearest codebook token, and
//! the decoder maps the quantized frames back to motion. Training uses the
//! straight-through estimator: the decoder sees `z + sg(q - z)`, whose value
//! is `q` while its gradient passes to `z` unchanged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{MotionSequence, Region};
use crate::nn::{attention_bias, head_slopes, AttnMask, Block, Linear, ParamId, ParamStore};
use crate::tensor::{l2_distance, Matrix};

/// `K × d` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    tokens: Matrix,
    region: Region,
}

/// `h × d` latent embeddings for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub embeddings: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFrame {
    pub embeddings: Matrix,
    pub token_ids: Vec<usize>,
}

impl Codebook {
    pub fn new(tokens: Matrix, region: Region) -> Result<Self> {
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::invalid("codebook needs at least one token"));
        }
        if !tokens.is_finite() {
            return Err(Error::invalid("codebook has non-finite entries"));
        }
        Ok(Self { tokens, region })
    }

    /// Uniform entries in `[-1/K, 1/K]`.
    pub fn random(size: usize, dim: usize, region: Region, rng: &mut ChaCha8Rng) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("codebook needs at least one token"));
        }
        let a = 1.0 / size as f64;
        let data = (0..size * dim).map(|_| rng.gen_range(-a..=a)).collect();
        Self::new(Matrix::from_vec(size, dim, data)?, region)
    }

    pub fn size(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn token(&self, k: usize) -> &[f64] {
        self.tokens.row(k)
    }

    /// Index of the closest token; the lowest index wins ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self
                .token(k)
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    pub fn quantize(&self, z: &LatentFrame) -> Result<QuantizedFrame> {
        if z.embeddings.cols() != self.dim() {
            return Err(Error::shape(format!(
                "latent dim {} vs codebook dim {}",
                z.embeddings.cols(),
                self.dim()
            )));
        }
        let token_ids: Vec<usize> = (0..z.embeddings.rows())
            .map(|r| self.nearest(z.embeddings.row(r)))
            .collect();
        Ok(QuantizedFrame {
            embeddings: self.tokens.gather_rows(&token_ids),
            token_ids,
        })
    }

    /// Quantizes a flat `T × h·d` code sequence; ids are frame-major.
    pub fn quantize_flat(&self, codes: &Matrix) -> Result<(Matrix, Vec<usize>)> {
        let d = self.dim();
        if !codes.cols().is_multiple_of(d) {
            return Err(Error::shape(format!(
                "code width {} is not a multiple of d = {d}",
                codes.cols()
            )));
        }
        let h = codes.cols() / d;
        let mut out = Matrix::zeros(codes.rows(), codes.cols());
        let mut ids = Vec::with_capacity(codes.rows() * h);
        for t in 0..codes.rows() {
            for e in 0..h {
                let k = self.nearest(&codes.row(t)[e * d..(e + 1) * d]);
                ids.push(k);
                out.row_mut(t)[e * d..(e + 1) * d].copy_from_slice(self.token(k));
            }
        }
        Ok((out, ids))
    }

    /// Token usage counts over a list of ids.
    pub fn usage(&self, ids: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.size()];
        for &k in ids {
            hist[k] += 1;
        }
        hist
    }
}

/// Breakdown of the VQ-VAE objective for one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLoss {
    pub reconstruction: f64,
    /// `‖sg(z) − q‖²`, moves the codebook only.
    pub codebook: f64,
    /// `‖z − sg(q)‖²`, moves the encoder only.
    pub commitment: f64,
}

impl VqLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

fn sq_dist(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖x − x̂‖² + ‖sg(z) − q‖² + ‖z − sg(q)‖²` as plain values.
pub fn vq_loss(x: &Matrix, x_hat: &Matrix, z: &Matrix, q: &Matrix) -> Result<VqLoss> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!("x {:?} vs x̂ {:?}", x.shape(), x_hat.shape())));
    }
    if z.shape() != q.shape() {
        return Err(Error::shape(format!("z {:?} vs q {:?}", z.shape(), q.shape())));
    }
    let latent = sq_dist(z, q);
    Ok(VqLoss {
        reconstruction: sq_dist(x, x_hat),
        codebook: latent,
        commitment: latent,
    })
}

/// Graph form of [`vq_loss`]: returns (reconstruction, codebook, commitment)
/// scalars with stop-gradient placed as in the objective.
pub fn vq_terms(g: &mut Graph, x: Var, x_hat: Var, z: Var, q: Var) -> (Var, Var, Var) {
    let sq_sum = |g: &mut Graph, a: Var, b: Var| {
        let d = g.sub(a, b);
        let d2 = g.mul(d, d);
        g.sum(d2)
    };
    let rec = sq_sum(g, x, x_hat);
    let z_sg = g.detach(z);
    let cb = sq_sum(g, z_sg, q);
    let q_sg = g.detach(q);
    let commit = sq_sum(g, z, q_sg);
    (rec, cb, commit)
}

/// `z + sg(q − z)`: forward value `q`, identity gradient to `z`.
pub fn straight_through(g: &mut Graph, z: Var, q: Var) -> Var {
    let diff = g.sub(q, z);
    let diff = g.detach(diff);
    g.add(z, diff)
}

/// Temporal context of the prior's self-attention stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "radius")]
pub enum Context {
    /// Attend over the whole sequence.
    Sequence,
    /// Attend to frames within `± radius`.
    Window(usize),
    /// Attend to the current and earlier frames only.
    Causal,
}

impl Context {
    fn mask(self) -> AttnMask {
        match self {
            Context::Sequence => AttnMask::Full,
            Context::Window(r) => AttnMask::Window(r),
            Context::Causal => AttnMask::Causal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Codebook size `K`.
    pub codebook_size: usize,
    /// Token dimension `d`.
    pub latent_dim: usize,
    /// Embeddings per frame `h`.
    pub latent_count: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub encoder_context: Context,
    pub decoder_context: Context,
    /// Gain on the encoder output projection's initial weights.
    pub encoder_out_gain: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            latent_dim: 64,
            latent_count: 1,
            model_dim: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 128,
            encoder_context: Context::Sequence,
            decoder_context: Context::Causal,
            encoder_out_gain: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn code_width(&self) -> usize {
        self.latent_count * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("codebook_size", self.codebook_size),
            ("latent_dim", self.latent_dim),
            ("latent_count", self.latent_count),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
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

/// Outputs of one prior forward pass.
pub struct PriorPass {
    pub z: Var,
    /// Quantized codes, gradient-connected to the codebook.
    pub q: Var,
    pub x_hat: Var,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RegionPrior {
    region: Region,
    width: usize,
    config: PriorConfig,
    prefix: String,
    enc_in: Linear,
    enc_blocks: Vec<Block>,
    enc_out: Linear,
    codebook: ParamId,
    dec_in: Linear,
    dec_blocks: Vec<Block>,
    dec_out: Linear,
}

impl RegionPrior {
    /// Registers the prior's parameters under `{prefix}.` in `store`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        region: Region,
        width: usize,
        config: PriorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let enc_in = Linear::new(store, rng, &format!("{prefix}.enc.in"), width, c.model_dim);
        let enc_blocks = (0..c.layers)
            .map(|i| {
                Block::new(store, rng, &format!("{prefix}.enc.block{i}"), c.model_dim, c.heads, c.ffn_dim, true, 0)
            })
            .collect();
        let enc_out = Linear::with_gain(
            store,
            rng,
            &format!("{prefix}.enc.out"),
            c.model_dim,
            c.code_width(),
            c.encoder_out_gain,
        );
        let cb = Codebook::random(c.codebook_size, c.latent_dim, region, rng)?;
        let codebook = store.add(format!("{prefix}.codebook"), cb.tokens);
        let dec_in = Linear::new(store, rng, &format!("{prefix}.dec.in"), c.code_width(), c.model_dim);
        let dec_blocks = (0..c.layers)
            .map(|i| {
                Block::new(store, rng, &format!("{prefix}.dec.block{i}"), c.model_dim, c.heads, c.ffn_dim, true, 0)
            })
            .collect();
        let dec_out = Linear::new(store, rng, &format!("{prefix}.dec.out"), c.model_dim, width);
        Ok(Self {
            region,
            width,
            config,
            prefix: prefix.to_string(),
            enc_in,
            enc_blocks,
            enc_out,
            codebook,
            dec_in,
            dec_blocks,
            dec_out,
        })
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Parameter-name prefix of the decoder half (plus codebook).
    pub fn decoder_prefix(&self) -> String {
        format!("{}.dec", self.prefix)
    }

    pub fn codebook_param(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self, store: &ParamStore) -> Codebook {
        Codebook {
            tokens: store.value(self.codebook),
            region: self.region,
        }
    }

    fn stack(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        blocks: &[Block],
        context: Context,
    ) -> Var {
        let t = g.value(x).rows();
        let pos = g.constant(crate::nn::sinusoidal_positions(t, self.config.model_dim));
        let mut h = g.add(x, pos);
        let bias = attention_bias(t, t, context.mask(), 0.0);
        let biases: Vec<Matrix> = head_slopes(self.config.heads, false).iter().map(|_| bias.clone()).collect();
        for block in blocks {
            h = block.forward(g, store, h, &biases, &[]);
        }
        h
    }

    /// `T × width` → `T × h·d`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.enc_in.forward(g, store, x);
        let h = self.stack(g, store, h, &self.enc_blocks, self.config.encoder_context);
        self.enc_out.forward(g, store, h)
    }

    /// `T × h·d` → `T × width`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, codes: Var) -> Var {
        let h = self.dec_in.forward(g, store, codes);
        let h = self.stack(g, store, h, &self.dec_blocks, self.config.decoder_context);
        self.dec_out.forward(g, store, h)
    }

    /// Nearest-token lookup as a graph node (gradient flows to the codebook).
    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, codes: &Matrix) -> Result<(Var, Vec<usize>)> {
        let cb = self.codebook(store);
        let (_, ids) = cb.quantize_flat(codes)?;
        let tokens = g.param(store, self.codebook);
        let rows = g.gather_rows(tokens, &ids);
        // regroup the (T·h) × d rows into T × h·d
        let t = codes.rows();
        let h = self.config.latent_count;
        let q = if h == 1 {
            rows
        } else {
            let mut frames = Vec::with_capacity(t);
            for f in 0..t {
                let parts: Vec<Var> = (0..h).map(|e| g.slice_rows(rows, f * h + e, 1)).collect();
                frames.push(g.concat_cols(&parts));
            }
            g.concat_rows(&frames)
        };
        Ok((q, ids))
    }

    /// Full VQ-VAE pass with a straight-through quantizer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<PriorPass> {
        if g.value(x).cols() != self.width {
            return Err(Error::shape(format!(
                "{} prior expects width {}, got {}",
                self.region.name(),
                self.width,
                g.value(x).cols()
            )));
        }
        let z = self.encode(g, store, x);
        let z_val = g.value(z).clone();
        let (q, token_ids) = self.lookup(g, store, &z_val)?;
        let st = straight_through(g, z, q);
        let x_hat = self.decode(g, store, st);
        Ok(PriorPass { z, q, x_hat, token_ids })
    }

    /// Encoder → quantize → decoder, inference only.
    pub fn encode_decode(&self, store: &ParamStore, motion: &MotionSequence) -> Result<MotionSequence> {
        let mut g = Graph::inference();
        let x = g.constant(motion.offsets().clone());
        let pass = self.forward(&mut g, store, x)?;
        MotionSequence::new(g.value(pass.x_hat).clone(), motion.fps())
    }

    /// Token ids of a motion's frames (frame-major).
    pub fn tokenize(&self, store: &ParamStore, motion: &Matrix) -> Result<Vec<usize>> {
        let mut g = Graph::inference();
        let x = g.constant(motion.clone());
        let z = self.encode(&mut g, store, x);
        let (_, ids) = self.codebook(store).quantize_flat(g.value(z))?;
        Ok(ids)
    }

    /// Decodes plain codes (inference).
    pub fn decode_codes(&self, store: &ParamStore, codes: &Matrix) -> Matrix {
        let mut g = Graph::inference();
        let c = g.constant(codes.clone());
        let out = self.decode(&mut g, store, c);
        g.value(out).clone()
    }
}

/// Per-vertex RMS error between two region motions of equal shape.
pub fn per_vertex_rms(a: &Matrix, b: &Matrix) -> f64 {
    let verts = a.cols() / 3;
    let mut total = 0.0;
    for t in 0..a.rows() {
        for v in 0..verts {
            let d = l2_distance(&a.row(t)[3 * v..3 * v + 3], &b.row(t)[3 * v..3 * v + 3]);
            total += d * d;
        }
    }
    (total / (a.rows() * verts) as f64).sqrt()
}
