//! Triplet ranking, pair classification, XNOR pair-label and contrastive
//! losses, in plain-value form and as graph builders.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probability clamp applied before the logarithm of the classification loss.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Negative = 0,
    Positive = 1,
}

impl PairLabel {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(PairLabel::Negative),
            1 => Ok(PairLabel::Positive),
            _ => Err(Error::InvalidArgument(format!("pair label must be 0 or 1, got {v}"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    pub fn apply(self, values: &[f64]) -> f64 {
        let s: f64 = values.iter().sum();
        match self {
            Reduction::Sum => s,
            Reduction::Mean if values.is_empty() => 0.0,
            Reduction::Mean => s / values.len() as f64,
        }
    }

    /// Per-sample weight of one term in a batch of `n`.
    pub fn weight(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Triplet margin.
    pub alpha: f64,
    /// Contrastive margin.
    pub margin: f64,
    pub reduction: Reduction,
    pub lambda_rnk: f64,
    pub lambda_cls: f64,
    pub lambda_cts: f64,
    /// L2-normalise embeddings before the triplet loss.
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            margin: 1.0,
            reduction: Reduction::Mean,
            lambda_rnk: 1.0,
            lambda_cls: 1.0,
            lambda_cts: 1.0,
            normalize_embeddings: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("margin", self.margin),
            ("lambda_rnk", self.lambda_rnk),
            ("lambda_cls", self.lambda_cls),
            ("lambda_cts", self.lambda_cts),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_dims<T: Real>(op: &'static str, ts: &[&Tensor<T>]) -> Result<()> {
    let n = ts[0].len();
    if ts.iter().any(|t| t.len() != n) {
        let dims: Vec<usize> = ts.iter().map(|t| t.len()).collect();
        return Err(Error::shape(op, format!("dimension mismatch {dims:?}")));
    }
    Ok(())
}

fn sq_dist<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum()
}

/// `max(0, |a-p|² - |a-n|² + alpha)` for one triplet.
pub fn triplet_loss<T: Real>(anchor: &Tensor<T>, positive: &Tensor<T>, negative: &Tensor<T>, alpha: f64) -> Result<f64> {
    check_dims("triplet_loss", &[anchor, positive, negative])?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("triplet margin must be >= 0, got {alpha}")));
    }
    Ok((sq_dist(anchor, positive) - sq_dist(anchor, negative) + alpha).max(0.0))
}

/// Binary cross-entropy `-ln p(y|x)` on a two-way probability vector.
pub fn classification_loss<T: Real>(probs: &Tensor<T>, y: PairLabel) -> Result<f64> {
    if probs.len() != 2 {
        return Err(Error::shape("classification_loss", format!("expects 2 probabilities, got {:?}", probs.shape())));
    }
    let p = probs.data()[y.index()].as_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(-p.ln())
}

/// The classification loss with the logarithm dropped: `-p(y|x)`.
/// Kept only for comparison with [`classification_loss`].
pub fn classification_loss_without_log<T: Real>(probs: &Tensor<T>, y: PairLabel) -> Result<f64> {
    if probs.len() != 2 {
        return Err(Error::shape("classification_loss", format!("expects 2 probabilities, got {:?}", probs.shape())));
    }
    Ok(-probs.data()[y.index()].as_f64())
}

/// 1 when both pair labels agree.
pub fn xnor_label(a: PairLabel, b: PairLabel) -> PairLabel {
    if a == b {
        PairLabel::Positive
    } else {
        PairLabel::Negative
    }
}

/// `y·½d² + (1-y)·½max(0, m-d)²` with `d = |a-b|₂`.
pub fn contrastive_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>, y: PairLabel, margin: f64) -> Result<f64> {
    check_dims("contrastive_loss", &[a, b])?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("contrastive margin must be >= 0, got {margin}")));
    }
    let d = sq_dist(a, b).sqrt();
    Ok(match y {
        PairLabel::Positive => 0.5 * d * d,
        PairLabel::Negative => 0.5 * (margin - d).max(0.0).powi(2),
    })
}

/// Individual (already reduced) loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub triplet: Option<f64>,
    pub classification: Option<f64>,
    pub contrastive: Option<f64>,
}

/// `λ_rnk·L_trp + λ_cls·L_cls + λ_cts·L_cts` over the terms present.
pub fn combine(terms: &LossTerms, cfg: &LossConfig) -> f64 {
    terms.triplet.map_or(0.0, |v| cfg.lambda_rnk * v)
        + terms.classification.map_or(0.0, |v| cfg.lambda_cls * v)
        + terms.contrastive.map_or(0.0, |v| cfg.lambda_cts * v)
}

// Graph builders. Each returns a scalar node.

pub fn triplet_node<T: Real>(g: &mut Graph<T>, anchor: NodeId, positive: NodeId, negative: NodeId, alpha: f64) -> Result<NodeId> {
    let d_ap = g.sq_euclidean(anchor, positive, "trp.d_ap")?;
    let d_an = g.sq_euclidean(anchor, negative, "trp.d_an")?;
    let diff = g.sub(d_ap, d_an, "trp.diff")?;
    let shifted = g.add_scalar(diff, alpha, "trp.margin")?;
    g.relu(shifted, "trp.hinge")
}

/// Cross-entropy on a softmax2 output node.
pub fn classification_node<T: Real>(g: &mut Graph<T>, probs: NodeId, y: PairLabel, label: &str) -> Result<NodeId> {
    g.neg_log_at(probs, y.index(), PROB_EPS, label)
}

pub fn contrastive_node<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId, y: PairLabel, margin: f64) -> Result<NodeId> {
    let d = g.euclidean(a, b, "cts.d")?;
    let base = match y {
        PairLabel::Positive => d,
        PairLabel::Negative => {
            let neg = g.scale(d, -1.0, "cts.neg_d")?;
            let gap = g.add_scalar(neg, margin, "cts.gap")?;
            g.relu(gap, "cts.hinge")?
        }
    };
    let sq = g.square(base, "cts.sq")?;
    g.scale(sq, 0.5, "cts.loss")
}
