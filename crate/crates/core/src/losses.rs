//! Diversity, min-of-N reconstruction, closure-aware lip terms, code
//! regularizers and their weighted assembly.
//!
//! Each term has a graph builder (`*_term`, used for training and gradient
//! checks) and a plain-value wrapper with the same semantics. All norms are
//! unsquared Euclidean norms of flattened frame (or code) vectors. Minima are
//! taken per frame; ties resolve to the first candidate in index order
//! (pairs in lexicographic `(i, j)` order), which is also where the
//! subgradient goes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::geometry::ClosureMask;
use crate::tensor::Matrix;

/// Where the minimum of the min-of-N reconstruction is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinScope {
    /// Best sample chosen independently at every frame.
    #[default]
    PerFrame,
    /// One best sample for the whole sequence.
    PerSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diversity_lip: f64,
    pub diversity_upper: f64,
    pub reconstruction_lip: f64,
    pub reconstruction_upper: f64,
    pub regularizer: f64,
    /// Closure threshold ε in mesh units.
    pub epsilon: f64,
}

impl LossWeights {
    /// `(0.2, 0.2, 10, 10, 20, 0.01)`
    pub const BIWI: LossWeights = LossWeights {
        diversity_lip: 0.2,
        diversity_upper: 0.2,
        reconstruction_lip: 10.0,
        reconstruction_upper: 10.0,
        regularizer: 20.0,
        epsilon: 0.01,
    };

    /// `(0.02, 0.02, 1, 1, 1, 0.005)`
    pub const VOCASET: LossWeights = LossWeights {
        diversity_lip: 0.02,
        diversity_upper: 0.02,
        reconstruction_lip: 1.0,
        reconstruction_upper: 1.0,
        regularizer: 1.0,
        epsilon: 0.005,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.diversity_lip,
            self.diversity_upper,
            self.reconstruction_lip,
            self.reconstruction_upper,
            self.regularizer,
            self.epsilon,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// The same weights with both diversity terms switched off.
    pub fn without_diversity(mut self) -> Self {
        self.diversity_lip = 0.0;
        self.diversity_upper = 0.0;
        self
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::BIWI
    }
}

fn check_samples(g: &Graph, samples: &[Var], min: usize) -> Result<(usize, usize)> {
    if samples.len() < min {
        return Err(Error::invalid(format!(
            "need at least {min} samples, got {}",
            samples.len()
        )));
    }
    let shape = g.value(samples[0]).shape();
    if let Some(bad) = samples.iter().find(|&&s| g.value(s).shape() != shape) {
        return Err(Error::shape(format!(
            "sample shapes differ: {:?} vs {:?}",
            shape,
            g.value(*bad).shape()
        )));
    }
    Ok(shape)
}

/// Selects the per-row minimum of a `T × C` matrix (first index on ties).
fn row_argmin(m: &Matrix) -> Vec<(usize, usize)> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = c;
                }
            }
            (r, best)
        })
        .collect()
}

/// Ordered pair list `(i, j)`, `i < j`.
pub fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// `−Σ_t min_{i≠j} ‖x̂ᵢ_t − x̂ⱼ_t‖`
pub fn diversity_term(g: &mut Graph, samples: &[Var]) -> Result<Var> {
    check_samples(g, samples, 2)?;
    let cols: Vec<Var> = pairs(samples.len())
        .into_iter()
        .map(|(i, j)| {
            let d = g.sub(samples[i], samples[j]);
            g.row_norm(d)
        })
        .collect();
    let dists = if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols) };
    let at = row_argmin(g.value(dists));
    let picked = g.pick(dists, &at);
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// `Σ_t min_i ‖x_t − x̂ᵢ_t‖` (or the per-sequence variant).
pub fn min_reconstruction_term(g: &mut Graph, samples: &[Var], gt: Var, scope: MinScope) -> Result<Var> {
    let shape = check_samples(g, samples, 1)?;
    if g.value(gt).shape() != shape {
        return Err(Error::shape(format!(
            "ground truth {:?} vs samples {:?}",
            g.value(gt).shape(),
            shape
        )));
    }
    let cols: Vec<Var> = samples
        .iter()
        .map(|&s| {
            let d = g.sub(gt, s);
            g.row_norm(d)
        })
        .collect();
    let dists = if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols) };
    match scope {
        MinScope::PerFrame => {
            let at = row_argmin(g.value(dists));
            let picked = g.pick(dists, &at);
            Ok(g.sum(picked))
        }
        MinScope::PerSequence => {
            let per_sample = g.transpose(dists);
            let ones = g.constant(Matrix::filled(shape.0, 1, 1.0));
            let totals = g.matmul(per_sample, ones);
            let at = row_argmin(&g.value(totals).transpose());
            let picked = g.pick(totals, &[(at[0].1, 0)]);
            Ok(g.sum(picked))
        }
    }
}

fn mask_column(g: &mut Graph, mask: &ClosureMask, frames: usize, invert: bool) -> Result<Var> {
    if mask.len() != frames {
        return Err(Error::shape(format!(
            "mask covers {} frames, samples have {frames}",
            mask.len()
        )));
    }
    let w = mask
        .weights()
        .into_iter()
        .map(|m| if invert { 1.0 - m } else { m })
        .collect();
    Ok(g.constant(Matrix::column_vector(w)))
}

/// Diversity over mask-scaled lip predictions `x̂ᵢ_t · m_t`.
pub fn lip_diversity_term(g: &mut Graph, samples: &[Var], mask: &ClosureMask) -> Result<Var> {
    let (t, _) = check_samples(g, samples, 2)?;
    let m = mask_column(g, mask, t, false)?;
    let masked: Vec<Var> = samples.iter().map(|&s| g.mul_col(s, m)).collect();
    diversity_term(g, &masked)
}

/// Min-of-N reconstruction plus `(1/N) Σᵢ Σ_t ‖(x_t − x̂ᵢ_t)(1 − m_t)‖`.
pub fn lip_reconstruction_term(
    g: &mut Graph,
    samples: &[Var],
    gt: Var,
    mask: &ClosureMask,
    scope: MinScope,
) -> Result<Var> {
    let base = min_reconstruction_term(g, samples, gt, scope)?;
    let t = g.value(gt).rows();
    let closed = mask_column(g, mask, t, true)?;
    let mut terms = Vec::with_capacity(samples.len());
    for &s in samples {
        let d = g.sub(gt, s);
        let d = g.mul_col(d, closed);
        let n = g.row_norm(d);
        terms.push(g.sum(n));
    }
    let closure = g.add_all(&terms);
    let closure = g.scale(closure, 1.0 / samples.len() as f64);
    Ok(g.add(base, closure))
}

/// `(Σᵢ L_d(setᵢ), Σᵢ L_rc(setᵢ))` over lip parents `i`.
pub fn upper_terms(g: &mut Graph, sets: &[Vec<Var>], gt: Var, scope: MinScope) -> Result<(Option<Var>, Var)> {
    if sets.is_empty() {
        return Err(Error::invalid("need at least one upper sample set"));
    }
    let mut div = Vec::new();
    let mut rec = Vec::new();
    for set in sets {
        if set.len() >= 2 {
            div.push(diversity_term(g, set)?);
        }
        rec.push(min_reconstruction_term(g, set, gt, scope)?);
    }
    let rec = g.add_all(&rec);
    let div = if div.is_empty() { None } else { Some(g.add_all(&div)) };
    Ok((div, rec))
}

/// `Σ ‖ẑ − sg(q)‖` over every embedding of every predicted code sequence,
/// with `q` the nearest token under `codebook`.
pub fn code_regularizer_term(g: &mut Graph, codes: &[Var], codebook: &Codebook) -> Result<Var> {
    let d = codebook.dim();
    let mut terms = Vec::with_capacity(codes.len());
    for &z in codes {
        let (q, _) = codebook.quantize_flat(g.value(z))?;
        let q = g.constant(q);
        let diff = g.sub(z, q);
        let h = g.value(z).cols() / d;
        for e in 0..h {
            let part = g.slice_cols(diff, e * d, d);
            let n = g.row_norm(part);
            terms.push(g.sum(n));
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("no codes to regularize"));
    }
    Ok(g.add_all(&terms))
}

fn with_constants<T>(mats: &[&Matrix], f: impl FnOnce(&mut Graph, &[Var]) -> Result<T>) -> Result<T> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = mats.iter().map(|m| g.constant((*m).clone())).collect();
    f(&mut g, &vars)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

pub fn diversity_loss(samples: &[Matrix]) -> Result<f64> {
    let refs: Vec<&Matrix> = samples.iter().collect();
    with_constants(&refs, |g, vars| {
        let v = diversity_term(g, vars)?;
        Ok(scalar(g, v))
    })
}

pub fn min_reconstruction_loss(samples: &[Matrix], gt: &Matrix, scope: MinScope) -> Result<f64> {
    let mut refs: Vec<&Matrix> = samples.iter().collect();
    refs.push(gt);
    with_constants(&refs, |g, vars| {
        let (gt, s) = vars.split_last().expect("gt appended");
        let v = min_reconstruction_term(g, s, *gt, scope)?;
        Ok(scalar(g, v))
    })
}

pub fn lip_diversity_loss(samples: &[Matrix], mask: &ClosureMask) -> Result<f64> {
    let refs: Vec<&Matrix> = samples.iter().collect();
    with_constants(&refs, |g, vars| {
        let v = lip_diversity_term(g, vars, mask)?;
        Ok(scalar(g, v))
    })
}

pub fn lip_reconstruction_loss(samples: &[Matrix], gt: &Matrix, mask: &ClosureMask, scope: MinScope) -> Result<f64> {
    let mut refs: Vec<&Matrix> = samples.iter().collect();
    refs.push(gt);
    with_constants(&refs, |g, vars| {
        let (gt, s) = vars.split_last().expect("gt appended");
        let v = lip_reconstruction_term(g, s, *gt, mask, scope)?;
        Ok(scalar(g, v))
    })
}

/// `(L_d^u, L_rc^u)`; the diversity part is 0 when every set has one sample.
pub fn upper_losses(sets: &[Vec<Matrix>], gt: &Matrix, scope: MinScope) -> Result<(f64, f64)> {
    let mut g = Graph::inference();
    let vars: Vec<Vec<Var>> = sets
        .iter()
        .map(|set| set.iter().map(|m| g.constant(m.clone())).collect())
        .collect();
    let gt = g.constant(gt.clone());
    let (div, rec) = upper_terms(&mut g, &vars, gt, scope)?;
    Ok((div.map_or(0.0, |d| scalar(&g, d)), scalar(&g, rec)))
}

pub fn code_regularizer(codes: &[Matrix], codebook: &Codebook) -> Result<f64> {
    let refs: Vec<&Matrix> = codes.iter().collect();
    with_constants(&refs, |g, vars| {
        let v = code_regularizer_term(g, vars, codebook)?;
        Ok(scalar(g, v))
    })
}

/// Every term of both region objectives, as logged per step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lip_diversity: f64,
    pub lip_reconstruction: f64,
    pub lip_regularizer: f64,
    pub upper_diversity: f64,
    pub upper_reconstruction: f64,
    pub upper_regularizer: f64,
}

impl LossBreakdown {
    /// `(L^l, L^u)` as the weighted sums of the breakdown.
    pub fn totals(&self, w: &LossWeights) -> (f64, f64) {
        (
            w.diversity_lip * self.lip_diversity
                + w.reconstruction_lip * self.lip_reconstruction
                + w.regularizer * self.lip_regularizer,
            w.diversity_upper * self.upper_diversity
                + w.reconstruction_upper * self.upper_reconstruction
                + w.regularizer * self.upper_regularizer,
        )
    }
}

/// Region term handles inside one graph; `None` means the term is absent
/// (e.g. diversity with a single sample).
#[derive(Debug, Clone, Copy)]
pub struct RegionTerms {
    pub diversity: Option<Var>,
    pub reconstruction: Var,
    pub regularizer: Var,
}

/// `λ_d·L_d + λ_rc·L_rc + λ_rg·L_rg` for one region.
pub fn weighted_total(g: &mut Graph, terms: &RegionTerms, lambda_d: f64, lambda_rc: f64, lambda_rg: f64) -> Var {
    let rc = g.scale(terms.reconstruction, lambda_rc);
    let rg = g.scale(terms.regularizer, lambda_rg);
    let mut total = g.add(rc, rg);
    if let Some(d) = terms.diversity {
        if lambda_d != 0.0 {
            let d = g.scale(d, lambda_d);
            total = g.add(total, d);
        }
    }
    total
}

/// Graph-level `(L^l, L^u)` with the breakdown read back from the values.
pub fn total_losses(
    g: &mut Graph,
    lip: &RegionTerms,
    upper: &RegionTerms,
    w: &LossWeights,
) -> (Var, Var, LossBreakdown) {
    let breakdown = LossBreakdown {
        lip_diversity: lip.diversity.map_or(0.0, |v| g.value(v).item()),
        lip_reconstruction: g.value(lip.reconstruction).item(),
        lip_regularizer: g.value(lip.regularizer).item(),
        upper_diversity: upper.diversity.map_or(0.0, |v| g.value(v).item()),
        upper_reconstruction: g.value(upper.reconstruction).item(),
        upper_regularizer: g.value(upper.regularizer).item(),
    };
    let ll = weighted_total(g, lip, w.diversity_lip, w.reconstruction_lip, w.regularizer);
    let lu = weighted_total(g, upper, w.diversity_upper, w.reconstruction_upper, w.regularizer);
    (ll, lu, breakdown)
}
