//! Token-level augmentations feeding the contrastive positives: synonym
//! replacement, random insertion, random swap, and random deletion. One
//! variant per operation, each deterministically seeded from the augment
//! seed and the sample id.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RiclError};
use crate::subseed;

/// Number of augmentation operations applied per sample.
pub const NUM_AUGMENTATIONS: usize = 4;

/// Common function words skipped by synonym replacement. Sorted, so
/// membership checks can binary-search.
static STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "also", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "him",
    "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "me", "more", "most",
    "my", "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our",
    "out", "over", "own", "same", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "why", "will", "with", "would", "you", "your",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Token-to-synonyms lookup, loadable from a flat `token TAB syn,syn` file.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    map: BTreeMap<String, Vec<String>>,
}

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a table from symmetric (base, variant) pairs.
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (a, b) in pairs {
            map.entry(a.clone()).or_default().push(b.clone());
            map.entry(b).or_default().push(a);
        }
        SynonymTable { map }
    }

    pub fn insert(&mut self, token: String, synonyms: Vec<String>) {
        self.map.insert(token, synonyms);
    }

    pub fn get(&self, token: &str) -> Option<&[String]> {
        self.map.get(token).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Reads `token TAB comma,separated,synonyms` lines; `#` starts a
    /// comment.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut map = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, rest) = line.split_once('\t').ok_or_else(|| {
                RiclError::InvalidArgument(format!(
                    "synonym table line {}: expected TAB separator",
                    lineno + 1
                ))
            })?;
            let syns: Vec<String> = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if syns.is_empty() {
                return Err(RiclError::InvalidArgument(format!(
                    "synonym table line {}: no synonyms for {token}",
                    lineno + 1
                )));
            }
            map.insert(token.to_string(), syns);
        }
        Ok(SynonymTable { map })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (token, syns) in &self.map {
            writeln!(w, "{token}\t{}", syns.join(","))?;
        }
        Ok(())
    }
}

/// Augmentation rates and seeding.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Fraction of eligible tokens touched by replacement and insertion.
    pub op_rate: f64,
    /// Fraction of length used to size the number of swaps.
    pub swap_rate: f64,
    /// Per-token deletion probability.
    pub delete_prob: f64,
    pub seed: u64,
    pub table: SynonymTable,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            op_rate: 0.1,
            swap_rate: 0.1,
            delete_prob: 0.1,
            seed: 0,
            table: SynonymTable::new(),
        }
    }
}

fn frac_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).ceil() as usize
}

/// Replaces `ceil(alpha * n_nonstop)` randomly chosen non-stopword tokens
/// with a uniformly chosen synonym; tokens without a table entry are
/// skipped. Length is preserved.
pub fn synonym_replace<R: Rng>(
    tokens: &[String],
    alpha: f64,
    table: &SynonymTable,
    rng: &mut R,
) -> Vec<String> {
    let mut out: Vec<String> = tokens.to_vec();
    if alpha <= 0.0 || table.is_empty() {
        return out;
    }
    let mut candidates: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !is_stopword(t))
        .map(|(i, _)| i)
        .collect();
    let n_pick = frac_count(alpha, candidates.len()).min(candidates.len());
    candidates.shuffle(rng);
    for idx in candidates.into_iter().take(n_pick) {
        if let Some(syns) = table.get(&out[idx]) {
            out[idx] = syns[rng.gen_range(0..syns.len())].clone();
        }
    }
    out
}

/// Inserts synonyms of `ceil(alpha * n)` randomly selected tokens at uniform
/// positions; selections without synonyms are skipped.
pub fn random_insert<R: Rng>(
    tokens: &[String],
    alpha: f64,
    table: &SynonymTable,
    rng: &mut R,
) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(RiclError::Empty("random_insert: tokens".into()));
    }
    let mut out: Vec<String> = tokens.to_vec();
    let n_ins = frac_count(alpha, tokens.len());
    for _ in 0..n_ins {
        let source = &tokens[rng.gen_range(0..tokens.len())];
        if let Some(syns) = table.get(source) {
            let syn = syns[rng.gen_range(0..syns.len())].clone();
            let pos = rng.gen_range(0..=out.len());
            out.insert(pos, syn);
        }
    }
    Ok(out)
}

/// Performs `n_swaps` independent position-pair swaps; the token multiset is
/// preserved. Inputs shorter than two tokens come back unchanged.
pub fn random_swap<R: Rng>(tokens: &[String], n_swaps: usize, rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = tokens.to_vec();
    if out.len() < 2 {
        return out;
    }
    for _ in 0..n_swaps {
        let i = rng.gen_range(0..out.len());
        let j = rng.gen_range(0..out.len());
        out.swap(i, j);
    }
    out
}

/// Drops each token independently with probability `p`; if everything is
/// dropped, one uniformly chosen token survives.
pub fn random_delete<R: Rng>(tokens: &[String], p: f64, rng: &mut R) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RiclError::InvalidArgument(format!(
            "random_delete: p {p} must lie in [0, 1]"
        )));
    }
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    for t in tokens {
        if !rng.gen_bool(p) {
            out.push(t.clone());
        }
    }
    if out.is_empty() && !tokens.is_empty() {
        out.push(tokens[rng.gen_range(0..tokens.len())].clone());
    }
    Ok(out)
}

/// Produces the four augmented variants of a sample, each from its own RNG
/// stream derived from `(cfg.seed, sample_id, op index)`, so variants are a
/// deterministic function of the inputs.
pub fn augment_all(
    tokens: &[String],
    cfg: &AugmentConfig,
    sample_id: u64,
) -> Result<Vec<Vec<String>>> {
    if tokens.is_empty() {
        return Err(RiclError::Empty("augment_all: tokens".into()));
    }
    let mut op_rng =
        |op: u64| ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "augment", &[sample_id, op]));
    let n_swaps = frac_count(cfg.swap_rate, tokens.len());
    let variants = vec![
        synonym_replace(tokens, cfg.op_rate, &cfg.table, &mut op_rng(0)),
        random_insert(tokens, cfg.op_rate, &cfg.table, &mut op_rng(1))?,
        random_swap(tokens, n_swaps, &mut op_rng(2)),
        random_delete(tokens, cfg.delete_prob, &mut op_rng(3))?,
    ];
    debug_assert_eq!(variants.len(), NUM_AUGMENTATIONS);
    Ok(variants)
}
