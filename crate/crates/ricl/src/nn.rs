//! Hashed n-gram features and a two-layer MLP text classifier with exact
//! hand-derived gradients. Both the purifier and the primary model are
//! instances of [`ModelParams`].
//!
//! The forward map for a document `x` with hashed features `(idx_i, w_i)`:
//!
//! ```text
//! e      = sum_i w_i * E[idx_i]            (bag of hashed n-gram embeddings)
//! h      = tanh(W1^T e + b1)
//! logits = W2^T h + b2
//! f(x)   = h / ||h||_2                     (zero vector when ||h|| = 0)
//! ```
//!
//! `log_probs = logits - logsumexp(logits)` so `exp(log_probs)` is the
//! class distribution, and `f(x)` is the representation used by the
//! contrastive loss (unit norm, so cosine similarity is a dot product).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RiclError};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded FNV-1a over a byte stream. Hand-rolled so hashed feature indices
/// are stable across platforms and toolchain versions.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashing configuration shared by everything that featurizes text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    pub hash_dim: usize,
    pub seed: u64,
}

impl FeatureConfig {
    pub fn featurize<S: AsRef<str>>(&self, tokens: &[S]) -> Result<FeatureVector> {
        featurize(tokens, self.hash_dim, self.seed)
    }
}

/// Sparse hashed unigram + bigram counts for one document.
///
/// `indices` are strictly increasing and below the hash dimension; each
/// weight is the (positive) count of grams landing in that bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

impl FeatureVector {
    /// Sum of all gram counts (unigrams + bigrams).
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Hashes a token sequence into unigram + bigram bucket counts.
///
/// Identical `(tokens, hash_dim, seed)` always produce identical output.
pub fn featurize<S: AsRef<str>>(tokens: &[S], hash_dim: usize, seed: u64) -> Result<FeatureVector> {
    if tokens.is_empty() {
        return Err(RiclError::Empty("featurize: token list".into()));
    }
    if hash_dim == 0 || hash_dim > u32::MAX as usize {
        return Err(RiclError::InvalidArgument(format!(
            "featurize: hash_dim {hash_dim} out of range"
        )));
    }
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    let mut bucket = |bytes: &[u8], counts: &mut BTreeMap<u32, f64>| {
        let idx = (fnv1a(seed, bytes) % hash_dim as u64) as u32;
        *counts.entry(idx).or_insert(0.0) += 1.0;
    };
    let mut scratch = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        scratch.clear();
        scratch.push(b'1');
        scratch.push(0x1f);
        scratch.extend_from_slice(tok.as_ref().as_bytes());
        bucket(&scratch, &mut counts);
        if i + 1 < tokens.len() {
            scratch[0] = b'2';
            scratch.push(0x1f);
            scratch.extend_from_slice(tokens[i + 1].as_ref().as_bytes());
            bucket(&scratch, &mut counts);
        }
    }
    let mut indices = Vec::with_capacity(counts.len());
    let mut weights = Vec::with_capacity(counts.len());
    for (idx, w) in counts {
        indices.push(idx);
        weights.push(w);
    }
    Ok(FeatureVector { indices, weights })
}

/// Parameters of one classifier (embedding table + hidden layer + head).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hash_dim: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub n_classes: usize,
    /// `[hash_dim x d_emb]`, row-major by bucket.
    pub embedding: Vec<f64>,
    /// `[d_emb x d_hid]`, row-major by embedding coordinate.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[d_hid x n_classes]`, row-major by hidden unit.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters (uniform output distribution).
    pub fn zeros(hash_dim: usize, d_emb: usize, d_hid: usize, n_classes: usize) -> Self {
        ModelParams {
            hash_dim,
            d_emb,
            d_hid,
            n_classes,
            embedding: vec![0.0; hash_dim * d_emb],
            w1: vec![0.0; d_emb * d_hid],
            b1: vec![0.0; d_hid],
            w2: vec![0.0; d_hid * n_classes],
            b2: vec![0.0; n_classes],
        }
    }

    /// Seeded uniform(-0.05, 0.05) initialization.
    pub fn init(hash_dim: usize, d_emb: usize, d_hid: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect()
        };
        ModelParams {
            hash_dim,
            d_emb,
            d_hid,
            n_classes,
            embedding: draw(hash_dim * d_emb, &mut rng),
            w1: draw(d_emb * d_hid, &mut rng),
            b1: draw(d_hid, &mut rng),
            w2: draw(d_hid * n_classes, &mut rng),
            b2: draw(n_classes, &mut rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// One forward evaluation: raw logits, normalized log-probabilities, and the
/// unit-norm representation vector.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl ForwardOutput {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    /// Argmax class, ties broken by lowest index.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct ForwardState {
    e: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
    norm: f64,
}

fn forward_state(params: &ModelParams, x: &FeatureVector) -> Result<ForwardState> {
    if x.indices.len() != x.weights.len() {
        return Err(RiclError::ShapeMismatch(
            "feature indices/weights length".into(),
        ));
    }
    let (d_emb, d_hid, n_classes) = (params.d_emb, params.d_hid, params.n_classes);
    let mut e = vec![0.0; d_emb];
    for (idx, w) in x.indices.iter().zip(&x.weights) {
        let idx = *idx as usize;
        if idx >= params.hash_dim {
            return Err(RiclError::InvalidArgument(format!(
                "feature index {idx} >= hash_dim {}",
                params.hash_dim
            )));
        }
        let row = &params.embedding[idx * d_emb..(idx + 1) * d_emb];
        for (ej, rj) in e.iter_mut().zip(row) {
            *ej += w * rj;
        }
    }
    let mut h = params.b1.clone();
    for (j, ej) in e.iter().enumerate() {
        if *ej != 0.0 {
            let row = &params.w1[j * d_hid..(j + 1) * d_hid];
            for (hk, wk) in h.iter_mut().zip(row) {
                *hk += ej * wk;
            }
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(RiclError::NonFinite("forward: pre-activation".into()));
    }
    for hk in &mut h {
        *hk = hk.tanh();
    }
    let mut logits = params.b2.clone();
    for (k, hk) in h.iter().enumerate() {
        let row = &params.w2[k * n_classes..(k + 1) * n_classes];
        for (zc, wc) in logits.iter_mut().zip(row) {
            *zc += hk * wc;
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(RiclError::NonFinite("forward: logits".into()));
    }
    let lse = logsumexp(&logits);
    let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ForwardState {
        e,
        h,
        logits,
        log_probs,
        norm,
    })
}

/// Evaluates the classifier on one feature vector.
pub fn forward(params: &ModelParams, x: &FeatureVector) -> Result<ForwardOutput> {
    let st = forward_state(params, x)?;
    let embedding = if st.norm > 0.0 {
        st.h.iter().map(|v| v / st.norm).collect()
    } else {
        log::debug!("forward: zero hidden activation, emitting zero embedding");
        vec![0.0; params.d_hid]
    };
    Ok(ForwardOutput {
        logits: st.logits,
        log_probs: st.log_probs,
        embedding,
    })
}

/// Gradients flowing into a forward output. Any combination of the three
/// channels may be set; unset channels contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct UpstreamGrads {
    pub logits: Option<Vec<f64>>,
    pub log_probs: Option<Vec<f64>>,
    pub embedding: Option<Vec<f64>>,
}

impl UpstreamGrads {
    pub fn on_logits(v: Vec<f64>) -> Self {
        UpstreamGrads {
            logits: Some(v),
            ..Default::default()
        }
    }

    pub fn on_log_probs(v: Vec<f64>) -> Self {
        UpstreamGrads {
            log_probs: Some(v),
            ..Default::default()
        }
    }

    pub fn on_embedding(v: Vec<f64>) -> Self {
        UpstreamGrads {
            embedding: Some(v),
            ..Default::default()
        }
    }
}

/// Gradient of a scalar loss w.r.t. every parameter tensor. The embedding
/// gradient is sparse: only buckets touched by the batch carry rows, kept in
/// a `BTreeMap` so accumulation and application stay in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub d_emb: usize,
    pub embedding: BTreeMap<u32, Vec<f64>>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            d_emb: params.d_emb,
            embedding: BTreeMap::new(),
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            w2: vec![0.0; params.w2.len()],
            b2: vec![0.0; params.b2.len()],
        }
    }

    /// Elementwise accumulation of another gradient.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (idx, row) in &other.embedding {
            let dst = self
                .embedding
                .entry(*idx)
                .or_insert_with(|| vec![0.0; self.d_emb]);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += s;
            }
        }
        for (d, s) in self.w1.iter_mut().zip(&other.w1) {
            *d += s;
        }
        for (d, s) in self.b1.iter_mut().zip(&other.b1) {
            *d += s;
        }
        for (d, s) in self.w2.iter_mut().zip(&other.w2) {
            *d += s;
        }
        for (d, s) in self.b2.iter_mut().zip(&other.b2) {
            *d += s;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.embedding.values_mut() {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        for v in self
            .w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
        {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding
            .values()
            .flat_map(|r| r.iter())
            .chain(&self.w1)
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite())
    }

    /// Reads the gradient entry for one flattened parameter coordinate,
    /// using the same ordering as [`flat_param_len`]/`get_flat_param`.
    pub fn flat_entry(&self, params: &ModelParams, flat_idx: usize) -> f64 {
        let ne = params.embedding.len();
        let n1 = params.w1.len();
        let nb1 = params.b1.len();
        let n2 = params.w2.len();
        if flat_idx < ne {
            let row = (flat_idx / params.d_emb) as u32;
            let col = flat_idx % params.d_emb;
            self.embedding.get(&row).map_or(0.0, |r| r[col])
        } else if flat_idx < ne + n1 {
            self.w1[flat_idx - ne]
        } else if flat_idx < ne + n1 + nb1 {
            self.b1[flat_idx - ne - n1]
        } else if flat_idx < ne + n1 + nb1 + n2 {
            self.w2[flat_idx - ne - n1 - nb1]
        } else {
            self.b2[flat_idx - ne - n1 - nb1 - n2]
        }
    }
}

/// Mutable view of one flattened parameter coordinate of a model, ordered as
/// embedding, w1, b1, w2, b2. Used by finite-difference oracles.
pub fn flat_param_mut(params: &mut ModelParams, flat_idx: usize) -> &mut f64 {
    let ne = params.embedding.len();
    let n1 = params.w1.len();
    let nb1 = params.b1.len();
    let n2 = params.w2.len();
    if flat_idx < ne {
        &mut params.embedding[flat_idx]
    } else if flat_idx < ne + n1 {
        &mut params.w1[flat_idx - ne]
    } else if flat_idx < ne + n1 + nb1 {
        &mut params.b1[flat_idx - ne - n1]
    } else if flat_idx < ne + n1 + nb1 + n2 {
        &mut params.w2[flat_idx - ne - n1 - nb1]
    } else {
        &mut params.b2[flat_idx - ne - n1 - nb1 - n2]
    }
}

/// Computes exact gradients of a scalar loss w.r.t. every parameter, given
/// the loss gradients w.r.t. the forward outputs.
pub fn backward(
    params: &ModelParams,
    x: &FeatureVector,
    upstream: &UpstreamGrads,
) -> Result<ParamGrads> {
    let (d_emb, d_hid, n_classes) = (params.d_emb, params.d_hid, params.n_classes);
    for (name, grad, want) in [
        ("logits", &upstream.logits, n_classes),
        ("log_probs", &upstream.log_probs, n_classes),
        ("embedding", &upstream.embedding, d_hid),
    ] {
        if let Some(g) = grad {
            if g.len() != want {
                return Err(RiclError::ShapeMismatch(format!(
                    "upstream {name}: got {}, expected {want}",
                    g.len()
                )));
            }
        }
    }
    let st = forward_state(params, x)?;
    let mut grads = ParamGrads::zeros_like(params);

    // Fold the log-softmax jacobian into the logits gradient:
    // d log_probs[c] / d logits[k] = delta_ck - p_k.
    let mut gz = upstream.logits.clone().unwrap_or_else(|| vec![0.0; n_classes]);
    if let Some(glp) = &upstream.log_probs {
        let total: f64 = glp.iter().sum();
        for (k, gzk) in gz.iter_mut().enumerate() {
            *gzk += glp[k] - st.log_probs[k].exp() * total;
        }
    }

    let mut gh = vec![0.0; d_hid];
    for (k, hk) in st.h.iter().enumerate() {
        let row = &params.w2[k * n_classes..(k + 1) * n_classes];
        let mut acc = 0.0;
        for (c, gzc) in gz.iter().enumerate() {
            grads.w2[k * n_classes + c] = hk * gzc;
            acc += row[c] * gzc;
        }
        gh[k] = acc;
    }
    grads.b2.copy_from_slice(&gz);

    // Normalized-embedding path: f = h / ||h||; at ||h|| = 0 the output is
    // pinned to the zero vector, so no gradient flows.
    if let Some(gf) = &upstream.embedding {
        if st.norm > 0.0 {
            let f: Vec<f64> = st.h.iter().map(|v| v / st.norm).collect();
            let fdot: f64 = f.iter().zip(gf).map(|(a, b)| a * b).sum();
            for k in 0..d_hid {
                gh[k] += (gf[k] - f[k] * fdot) / st.norm;
            }
        }
    }

    let ghpre: Vec<f64> = gh
        .iter()
        .zip(&st.h)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    grads.b1.copy_from_slice(&ghpre);

    let mut ge = vec![0.0; d_emb];
    for (j, ej) in st.e.iter().enumerate() {
        let row = &params.w1[j * d_hid..(j + 1) * d_hid];
        let mut acc = 0.0;
        for (k, gk) in ghpre.iter().enumerate() {
            grads.w1[j * d_hid + k] = ej * gk;
            acc += row[k] * gk;
        }
        ge[j] = acc;
    }

    for (idx, w) in x.indices.iter().zip(&x.weights) {
        let row = grads
            .embedding
            .entry(*idx)
            .or_insert_with(|| vec![0.0; d_emb]);
        for (r, g) in row.iter_mut().zip(&ge) {
            *r += w * g;
        }
    }
    Ok(grads)
}

/// In-place SGD update: `params <- params - lr * grads`.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(RiclError::InvalidArgument(format!(
            "sgd_step: lr {lr} must be finite and nonnegative"
        )));
    }
    if !grads.is_finite() {
        return Err(RiclError::NonFinite("sgd_step: gradients".into()));
    }
    for (idx, row) in &grads.embedding {
        let base = *idx as usize * params.d_emb;
        for (j, g) in row.iter().enumerate() {
            params.embedding[base + j] -= lr * g;
        }
    }
    for (p, g) in params.w1.iter_mut().zip(&grads.w1) {
        *p -= lr * g;
    }
    for (p, g) in params.b1.iter_mut().zip(&grads.b1) {
        *p -= lr * g;
    }
    for (p, g) in params.w2.iter_mut().zip(&grads.w2) {
        *p -= lr * g;
    }
    for (p, g) in params.b2.iter_mut().zip(&grads.b2) {
        *p -= lr * g;
    }
    Ok(())
}
