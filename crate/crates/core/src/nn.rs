//! Parameters, layers and the optimizer.
//!
//! Parameters live in a [`ParamStore`] as `f32` master copies; graphs see
//! them widened to `f64`. Keeping the stored precision equal to the on-disk
//! precision means a checkpoint round-trip reproduces every later forward
//! pass bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a parameter. Names are unique paths like `lip.encoder.in.w`.
    pub fn add(&mut self, name: impl Into<String>, init: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            rows: init.rows(),
            cols: init.cols(),
            data: init.data().iter().map(|&v| v as f32).collect(),
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn value(&self, id: ParamId) -> Matrix {
        let e = &self.entries[id.0];
        Matrix::from_vec(e.rows, e.cols, e.data.iter().map(|&v| f64::from(v)).collect())
            .expect("stored shape is consistent")
    }

    pub fn raw(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].data
    }

    pub fn set_raw(&mut self, id: ParamId, data: &[f32]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if data.len() != e.data.len() {
            return Err(Error::shape(format!(
                "parameter {} holds {} values, got {}",
                e.name,
                e.data.len(),
                data.len()
            )));
        }
        e.data.copy_from_slice(data);
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// SHA-256 over names and raw bytes of every parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Matrix {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized above")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        Self::with_gain(store, rng, name, din, dout, 1.0)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, din, dout, gain));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, dout));
        Self { w, b }
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.shape(self.w).1
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, 1e-5);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let h = g.mul_row(n, gamma);
        g.add_row(h, beta)
    }
}

/// Which key positions a query position may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Query `t` sees keys `0..=t`.
    Causal,
    /// Query `t` sees keys within `t ± radius`.
    Window(usize),
}

const MASKED: f64 = -1e9;

/// Additive attention bias: mask plus an optional linear recency penalty
/// (`-slope · (t - τ)` for keys `τ ≤ t`).
pub fn attention_bias(tq: usize, tk: usize, mask: AttnMask, slope: f64) -> Matrix {
    let mut m = Matrix::zeros(tq, tk);
    for t in 0..tq {
        for tau in 0..tk {
            let allowed = match mask {
                AttnMask::Full => true,
                AttnMask::Causal => tau <= t,
                AttnMask::Window(r) => tau + r >= t && tau <= t + r,
            };
            let v = if !allowed {
                MASKED
            } else if tau <= t {
                -slope * (t - tau) as f64
            } else {
                -slope * (tau - t) as f64
            };
            m.set(t, tau, v);
        }
    }
    m
}

/// Recency slopes per head, geometric as in ALiBi; zero when disabled.
pub fn head_slopes(heads: usize, enabled: bool) -> Vec<f64> {
    (0..heads)
        .map(|h| {
            if enabled {
                2f64.powf(-(h as f64 + 1.0) * 4.0 / heads as f64)
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(dim.is_multiple_of(heads), "model width must divide into heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `biases` holds one additive `tq × tk` bias per head.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        memory: Var,
        biases: &[Matrix],
    ) -> Var {
        assert_eq!(biases.len(), self.heads, "one bias per head");
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for (h, bias) in biases.iter().enumerate() {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let b = g.constant(bias.clone());
            let scores = g.add(scores, b);
            let att = g.softmax_rows(scores);
            outs.push(g.matmul(att, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, store, cat)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm residual block: optional self-attention, any number of
/// cross-attention sublayers (applied in order), then a feed-forward layer.
#[derive(Debug, Clone)]
pub struct Block {
    self_attn: Option<(LayerNorm, MultiHeadAttention)>,
    cross: Vec<(LayerNorm, MultiHeadAttention)>,
    ffn: (LayerNorm, FeedForward),
}

/// Attention input for one sublayer: memory sequence and per-head biases.
pub struct Attend<'a> {
    pub memory: Var,
    pub biases: &'a [Matrix],
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        with_self: bool,
        cross_streams: usize,
    ) -> Self {
        let self_attn = with_self.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.self_norm"), dim),
                MultiHeadAttention::new(store, rng, &format!("{name}.self"), dim, heads),
            )
        });
        let cross = (0..cross_streams)
            .map(|i| {
                (
                    LayerNorm::new(store, &format!("{name}.cross{i}_norm"), dim),
                    MultiHeadAttention::new(store, rng, &format!("{name}.cross{i}"), dim, heads),
                )
            })
            .collect();
        let ffn = (
            LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
            FeedForward::new(store, rng, &format!("{name}.ffn"), dim, hidden),
        );
        Self { self_attn, cross, ffn }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        self_biases: &[Matrix],
        cross: &[Attend<'_>],
    ) -> Var {
        assert_eq!(cross.len(), self.cross.len(), "cross-attention stream count");
        let mut x = x;
        if let Some((norm, attn)) = &self.self_attn {
            let h = norm.forward(g, store, x);
            let h = attn.forward(g, store, h, h, self_biases);
            x = g.add(x, h);
        }
        for ((norm, attn), stream) in self.cross.iter().zip(cross) {
            let h = norm.forward(g, store, x);
            let h = attn.forward(g, store, h, stream.memory, stream.biases);
            x = g.add(x, h);
        }
        let (norm, ffn) = &self.ffn;
        let h = norm.forward(g, store, x);
        let h = ffn.forward(g, store, h);
        g.add(x, h)
    }
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f32` like the
/// parameters so optimizer state checkpoints round-trip exactly.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Collects gradients of every trainable parameter bound in `graph`.
    pub fn collect(graph: &Graph, grads: &Gradients, store: &ParamStore) -> Vec<(ParamId, Matrix)> {
        graph
            .bound_params()
            .filter(|&(id, _)| !store.is_frozen(id))
            .filter_map(|(id, v)| grads.wrt(v).map(|g| (id, g.clone())))
            .collect()
    }

    /// Averages several gradient lists (one per batch item).
    pub fn average(batches: Vec<Vec<(ParamId, Matrix)>>) -> Vec<(ParamId, Matrix)> {
        let n = batches.len() as f64;
        let mut acc: std::collections::BTreeMap<ParamId, Matrix> = Default::default();
        for list in batches {
            for (id, g) in list {
                match acc.get_mut(&id) {
                    Some(m) => m.add_assign(&g),
                    None => {
                        acc.insert(id, g);
                    }
                }
            }
        }
        acc.into_iter().map(|(id, g)| (id, g.map(|x| x / n))).collect()
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let clip = if c.clip_norm > 0.0 {
            let total: f64 = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
            let norm = total.sqrt();
            if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 }
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let n = grad.data().len();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; n]);
            let p = &mut store.entries[id.0].data;
            for i in 0..n {
                let g = grad.data()[i] * clip;
                let mi = c.beta1 * f64::from(m[i]) + (1.0 - c.beta1) * g;
                let vi = c.beta2 * f64::from(v[i]) + (1.0 - c.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let pi = f64::from(p[i]);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + c.weight_decay * pi;
                p[i] = (pi - c.lr * update) as f32;
            }
        }
    }

    /// Moment buffers by parameter, for checkpointing.
    pub fn moments(&self, id: ParamId) -> Option<(&[f32], &[f32])> {
        match (self.m.get(id.0), self.v.get(id.0)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<f32>, v: Vec<f32>) {
        if self.m.len() <= id.0 {
            self.m.resize(id.0 + 1, None);
            self.v.resize(id.0 + 1, None);
        }
        self.m[id.0] = Some(m);
        self.v[id.0] = Some(v);
    }
}
