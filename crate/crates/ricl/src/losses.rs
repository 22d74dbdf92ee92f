//! Scalar training objectives and their input gradients: cross-entropy,
//! generalized cross-entropy, the sigmoid preference loss, and the
//! multi-positive contrastive loss.
//!
//! Each function returns the loss value together with the gradient w.r.t.
//! its direct inputs; callers route those gradients into
//! [`crate::nn::backward`] through the matching [`crate::nn::UpstreamGrads`]
//! channel. All softmax/log-sigmoid arithmetic uses max-subtraction or
//! softplus forms, so values stay finite for any finite input.

use crate::error::{Result, RiclError};
use crate::nn::logsumexp;

/// Floor applied to probabilities inside `p^(q-1)` so the generalized
/// cross-entropy gradient stays finite when a class probability underflows.
const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_class(len: usize, y: usize, what: &str) -> Result<()> {
    if y >= len {
        return Err(RiclError::InvalidArgument(format!(
            "{what}: class {y} out of range for {len} classes"
        )));
    }
    Ok(())
}

/// Cross-entropy `-log p(y)` with gradient w.r.t. the log-probabilities.
#[derive(Debug, Clone)]
pub struct CeLoss {
    pub value: f64,
    pub d_log_probs: Vec<f64>,
}

pub fn cross_entropy(log_probs: &[f64], y: usize) -> Result<CeLoss> {
    check_class(log_probs.len(), y, "cross_entropy")?;
    let mut d_log_probs = vec![0.0; log_probs.len()];
    d_log_probs[y] = -1.0;
    Ok(CeLoss {
        value: -log_probs[y],
        d_log_probs,
    })
}

/// Generalized cross-entropy `(1 - p_y^q) / q` with gradient w.r.t. the
/// probability vector. Interpolates cross-entropy (q -> 0) and mean absolute
/// error (q = 1); values lie in `[0, 1/q]`.
#[derive(Debug, Clone)]
pub struct GceLoss {
    pub value: f64,
    pub d_probs: Vec<f64>,
}

pub fn gce_loss(probs: &[f64], y: usize, q: f64) -> Result<GceLoss> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(RiclError::InvalidArgument(format!(
            "gce_loss: q {q} must lie in (0, 1]"
        )));
    }
    check_class(probs.len(), y, "gce_loss")?;
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !p.is_finite() || *p < -1e-9) || (total - 1.0).abs() > 1e-6 {
        return Err(RiclError::InvalidArgument(
            "gce_loss: probs is not a distribution".into(),
        ));
    }
    let p = probs[y].max(0.0);
    let value = (1.0 - p.powf(q)) / q;
    let mut d_probs = vec![0.0; probs.len()];
    d_probs[y] = -p.max(PROB_FLOOR).powf(q - 1.0);
    Ok(GceLoss { value, d_probs })
}

/// Preference loss `-sum_j log sigmoid(log p(y) - log p(alt_j))` with
/// gradients w.r.t. the preferred and each rejected log-probability.
#[derive(Debug, Clone)]
pub struct IpoLoss {
    pub value: f64,
    pub d_log_p_y: f64,
    pub d_log_p_alts: Vec<f64>,
}

pub fn ipo_loss(log_p_y: f64, log_p_alts: &[f64]) -> Result<IpoLoss> {
    if log_p_alts.is_empty() {
        return Err(RiclError::Empty("ipo_loss: alternatives".into()));
    }
    let valid = |v: f64| v.is_finite() && v <= 1e-9;
    if !valid(log_p_y) || log_p_alts.iter().any(|v| !valid(*v)) {
        return Err(RiclError::InvalidArgument(
            "ipo_loss: log-probabilities must be finite and <= 0".into(),
        ));
    }
    let mut value = 0.0;
    let mut d_log_p_y = 0.0;
    let mut d_log_p_alts = Vec::with_capacity(log_p_alts.len());
    for alt in log_p_alts {
        let delta = log_p_y - alt;
        value += softplus(-delta);
        let s = sigmoid(-delta);
        d_log_p_y -= s;
        d_log_p_alts.push(s);
    }
    Ok(IpoLoss {
        value,
        d_log_p_y,
        d_log_p_alts,
    })
}

/// Multi-positive contrastive loss over one anchor, with gradients w.r.t.
/// every participating embedding.
#[derive(Debug, Clone)]
pub struct NclLoss {
    pub value: f64,
    pub d_anchor: Vec<f64>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `-log( sum_j exp(sim(a, p_j)/tau) / (sum_z exp(sim(a, z)/tau) + sum_j exp(sim(a, p_j)/tau)) )`
///
/// Embeddings are expected unit-norm or zero, so similarity is the plain dot
/// product (cosine for unit vectors, 0 against a zero vector). With no
/// negatives the loss is 0.
pub fn ncl_loss(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<NclLoss> {
    if positives.is_empty() {
        return Err(RiclError::Empty("ncl_loss: positives".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(RiclError::InvalidArgument(format!(
            "ncl_loss: tau {tau} must be positive"
        )));
    }
    let dim = anchor.len();
    for (what, set) in [("positives", positives), ("negatives", negatives)] {
        if let Some(bad) = set.iter().find(|v| v.len() != dim) {
            return Err(RiclError::ShapeMismatch(format!(
                "ncl_loss: {what} dim {} vs anchor {dim}",
                bad.len()
            )));
        }
    }
    let dot = |b: &[f64]| -> f64 { anchor.iter().zip(b).map(|(x, y)| x * y).sum() };
    let pos_logits: Vec<f64> = positives.iter().map(|p| dot(p) / tau).collect();
    let neg_logits: Vec<f64> = negatives.iter().map(|n| dot(n) / tau).collect();
    let mut all_logits = pos_logits.clone();
    all_logits.extend_from_slice(&neg_logits);

    let lse_pos = logsumexp(&pos_logits);
    let lse_all = logsumexp(&all_logits);
    let value = lse_all - lse_pos;

    // d value / d sim: softmax over the full set minus (for positives) the
    // softmax over the positive set, all divided by tau.
    let mut d_anchor = vec![0.0; dim];
    let mut d_positives = Vec::with_capacity(positives.len());
    for (j, p) in positives.iter().enumerate() {
        let ds = ((pos_logits[j] - lse_all).exp() - (pos_logits[j] - lse_pos).exp()) / tau;
        for (da, pk) in d_anchor.iter_mut().zip(p) {
            *da += ds * pk;
        }
        d_positives.push(anchor.iter().map(|a| ds * a).collect());
    }
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for (z, n) in negatives.iter().enumerate() {
        let ds = (neg_logits[z] - lse_all).exp() / tau;
        for (da, nk) in d_anchor.iter_mut().zip(n) {
            *da += ds * nk;
        }
        d_negatives.push(anchor.iter().map(|a| ds * a).collect());
    }
    Ok(NclLoss {
        value,
        d_anchor,
        d_positives,
        d_negatives,
    })
}
