//! Builds the interactive continual-learning stream: synthetic corpus
//! generation, task partitioning, blurry boundaries, symmetric label noise,
//! and delivery of samples into delay buffers.
//!
//! The construction order is: partition classes into tasks, hold out clean
//! test splits, inject blur (secondary-class samples moved between tasks),
//! inject label noise, then stream tasks in the configured order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::SynonymTable;
use crate::error::{Result, RiclError};
use crate::nn::{forward, FeatureConfig, ModelParams};
use crate::subseed;

/// One streamed instance. `y` is the (possibly corrupted) human label the
/// learners see; `y_true` exists only for evaluation and oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub tokens: Vec<String>,
    pub y_true: usize,
    pub y: usize,
    /// Model-generated label, filled when the sample arrives in a delay
    /// buffer.
    pub y_model: Option<usize>,
    pub task_id: usize,
    pub is_noisy: bool,
}

/// One task of the sequence: its primary classes, any secondary classes
/// injected by blur, and the training samples it streams.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    pub primary_classes: Vec<usize>,
    pub secondary_classes: Vec<usize>,
    pub samples: Vec<Sample>,
    /// Measured fraction of secondary-class samples after blur.
    pub secondary_fraction: f64,
}

impl TaskSpec {
    fn recompute_secondary(&mut self) {
        let primary: std::collections::BTreeSet<usize> =
            self.primary_classes.iter().copied().collect();
        let mut secondary: std::collections::BTreeSet<usize> = Default::default();
        let mut n_secondary = 0usize;
        for s in &self.samples {
            if !primary.contains(&s.y_true) {
                secondary.insert(s.y_true);
                n_secondary += 1;
            }
        }
        self.secondary_classes = secondary.into_iter().collect();
        self.secondary_fraction = if self.samples.is_empty() {
            0.0
        } else {
            n_secondary as f64 / self.samples.len() as f64
        };
    }

    /// Classes present in this task (primary plus secondary).
    pub fn class_set(&self) -> Vec<usize> {
        let mut set: Vec<usize> = self
            .primary_classes
            .iter()
            .chain(&self.secondary_classes)
            .copied()
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// Stream construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Blur rate r: target fraction of each task made of other tasks'
    /// classes.
    pub blur_rate: f64,
    /// Symmetric label-noise rate.
    pub noise_rate: f64,
    /// Delay buffer size M.
    pub delay_buffer_size: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_tasks: 5,
            classes_per_task: 4,
            blur_rate: 0.1,
            noise_rate: 0.2,
            delay_buffer_size: 200,
            seed: 7,
        }
    }
}

/// A labeled corpus: tokenized documents plus the label-name table
/// (indices assigned in first-seen order).
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub docs: Vec<CorpusDoc>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CorpusDoc {
    pub tokens: Vec<String>,
    pub label: usize,
}

impl LabeledCorpus {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Lowercase whitespace tokenizer used for external corpora.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

/// Generates a linearly separable synthetic corpus: each class mixes its own
/// keyword tokens (60% of positions) with a shared background vocabulary,
/// and every token type has a paired surface variant recorded in the
/// returned synonym table.
pub fn generate_synthetic_corpus(
    num_classes: usize,
    docs_per_class: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<(LabeledCorpus, SynonymTable)> {
    if num_classes == 0 || docs_per_class == 0 || vocab_size == 0 {
        return Err(RiclError::InvalidArgument(
            "generate_synthetic_corpus: all arguments must be >= 1".into(),
        ));
    }
    if vocab_size < num_classes {
        return Err(RiclError::InvalidArgument(format!(
            "generate_synthetic_corpus: vocab_size {vocab_size} < num_classes {num_classes}"
        )));
    }
    let kw_per_class = (vocab_size / (2 * num_classes)).clamp(1, 12);
    let n_background = vocab_size.saturating_sub(kw_per_class * num_classes);

    let keyword = |c: usize, i: usize| format!("k{c}_{i}");
    let background = |j: usize| format!("b{j}");
    let variant = |base: &str| format!("{base}v");

    let mut pairs = Vec::new();
    for c in 0..num_classes {
        for i in 0..kw_per_class {
            pairs.push(keyword(c, i));
        }
    }
    for j in 0..n_background {
        pairs.push(background(j));
    }
    let table = SynonymTable::from_pairs(
        pairs
            .iter()
            .map(|base| (base.clone(), variant(base))),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "corpus", &[]));
    let mut docs = Vec::with_capacity(num_classes * docs_per_class);
    for c in 0..num_classes {
        for _ in 0..docs_per_class {
            let len = rng.gen_range(12..=24);
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len {
                let base = if n_background == 0 || rng.gen_bool(0.6) {
                    keyword(c, rng.gen_range(0..kw_per_class))
                } else {
                    background(rng.gen_range(0..n_background))
                };
                tokens.push(if rng.gen_bool(0.5) { variant(&base) } else { base });
            }
            docs.push(CorpusDoc { tokens, label: c });
        }
    }
    let labels = (0..num_classes).map(|c| format!("class_{c}")).collect();
    Ok((LabeledCorpus { docs, labels }, table))
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    text: String,
    label: String,
}

/// Writes a corpus as JSONL, one `{"text", "label"}` object per line.
pub fn save_corpus(corpus: &LabeledCorpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in &corpus.docs {
        let line = CorpusLine {
            text: doc.tokens.join(" "),
            label: corpus.labels[doc.label].clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads a JSONL corpus, assigning label indices in first-seen order.
pub fn load_corpus(path: &Path) -> Result<LabeledCorpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels: Vec<String> = Vec::new();
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| {
            RiclError::InvalidArgument(format!("corpus line {}: {e}", lineno + 1))
        })?;
        let tokens = tokenize(&parsed.text);
        if tokens.is_empty() {
            return Err(RiclError::Empty(format!(
                "corpus line {}: empty document",
                lineno + 1
            )));
        }
        let label = match labels.iter().position(|l| *l == parsed.label) {
            Some(i) => i,
            None => {
                labels.push(parsed.label);
                labels.len() - 1
            }
        };
        docs.push(CorpusDoc { tokens, label });
    }
    if docs.is_empty() {
        return Err(RiclError::Empty("corpus file".into()));
    }
    Ok(LabeledCorpus { docs, labels })
}

/// Partitions corpus classes into tasks by seeded shuffle without
/// replacement: each class is primary in exactly one task.
pub fn partition_tasks(corpus: &LabeledCorpus, cfg: &StreamConfig) -> Result<Vec<TaskSpec>> {
    let needed = cfg.num_tasks * cfg.classes_per_task;
    if needed == 0 {
        return Err(RiclError::InvalidArgument(
            "partition_tasks: num_tasks and classes_per_task must be >= 1".into(),
        ));
    }
    if corpus.num_classes() < needed {
        return Err(RiclError::InvalidArgument(format!(
            "partition_tasks: corpus has {} classes but {} tasks x {} classes are required",
            corpus.num_classes(),
            cfg.num_tasks,
            cfg.classes_per_task
        )));
    }
    let mut class_ids: Vec<usize> = (0..corpus.num_classes()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "partition", &[]));
    class_ids.shuffle(&mut rng);
    class_ids.truncate(needed);

    let mut tasks: Vec<TaskSpec> = class_ids
        .chunks(cfg.classes_per_task)
        .enumerate()
        .map(|(task_id, chunk)| {
            let mut primary: Vec<usize> = chunk.to_vec();
            primary.sort_unstable();
            TaskSpec {
                task_id,
                primary_classes: primary,
                secondary_classes: Vec::new(),
                samples: Vec::new(),
                secondary_fraction: 0.0,
            }
        })
        .collect();

    let mut class_to_task = vec![usize::MAX; corpus.num_classes()];
    for task in &tasks {
        for c in &task.primary_classes {
            class_to_task[*c] = task.task_id;
        }
    }
    for (doc_id, doc) in corpus.docs.iter().enumerate() {
        let t = class_to_task[doc.label];
        if t == usize::MAX {
            continue; // class not selected for any task
        }
        tasks[t].samples.push(Sample {
            id: doc_id as u64,
            tokens: doc.tokens.clone(),
            y_true: doc.label,
            y: doc.label,
            y_model: None,
            task_id: t,
            is_noisy: false,
        });
    }
    for task in &tasks {
        if task.samples.is_empty() {
            return Err(RiclError::Empty(format!(
                "partition_tasks: task {} received no samples",
                task.task_id
            )));
        }
    }
    Ok(tasks)
}

/// Splits off a clean test fraction per task (before blur and noise).
/// Returns the held-out splits indexed by task id.
pub fn hold_out_test(
    tasks: &mut [TaskSpec],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(RiclError::InvalidArgument(format!(
            "hold_out_test: fraction {fraction} must lie in [0, 1)"
        )));
    }
    let mut splits = Vec::with_capacity(tasks.len());
    for task in tasks.iter_mut() {
        let n_test = ((task.samples.len() as f64) * fraction).round() as usize;
        let n_test = n_test.min(task.samples.len().saturating_sub(1));
        let mut rng =
            ChaCha8Rng::seed_from_u64(subseed(seed, "holdout", &[task.task_id as u64]));
        let mut idx: Vec<usize> = (0..task.samples.len()).collect();
        idx.shuffle(&mut rng);
        let test_idx: std::collections::BTreeSet<usize> =
            idx.into_iter().take(n_test).collect();
        let mut test = Vec::with_capacity(n_test);
        let mut train = Vec::with_capacity(task.samples.len() - n_test);
        for (i, s) in task.samples.drain(..).enumerate() {
            if test_idx.contains(&i) {
                test.push(s);
            } else {
                train.push(s);
            }
        }
        task.samples = train;
        splits.push(test);
    }
    Ok(splits)
}

/// Injects blurry boundaries: for each task in order, samples of other
/// tasks' primary classes are moved in (without replacement) until the
/// secondary fraction of the task approximates `r`. Total sample count is
/// conserved; a sample moved into a task is gone from its origin.
pub fn apply_blur(tasks: &mut Vec<TaskSpec>, r: f64, seed: u64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(RiclError::InvalidArgument(format!(
            "apply_blur: blur rate {r} must lie in [0, 1)"
        )));
    }
    for task in tasks.iter_mut() {
        task.recompute_secondary();
    }
    if r == 0.0 || tasks.len() < 2 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "blur", &[]));
    for t in 0..tasks.len() {
        let primary_count = tasks[t].samples.len();
        let wanted = (r / (1.0 - r) * primary_count as f64).round() as usize;
        if wanted == 0 {
            continue;
        }
        // Candidates: samples still sitting in their own primary task.
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for (u, other) in tasks.iter().enumerate() {
            if u == t {
                continue;
            }
            for (i, s) in other.samples.iter().enumerate() {
                if other.primary_classes.binary_search(&s.y_true).is_ok() {
                    candidates.push((u, i));
                }
            }
        }
        let take = wanted.min(candidates.len());
        candidates.shuffle(&mut rng);
        let mut chosen: Vec<(usize, usize)> = candidates.into_iter().take(take).collect();
        // Remove from origin tasks in descending index order so positions
        // stay valid.
        chosen.sort_unstable_by(|a, b| b.cmp(a));
        for (u, i) in chosen {
            let mut s = tasks[u].samples.remove(i);
            s.task_id = t;
            tasks[t].samples.push(s);
        }
    }
    for task in tasks.iter_mut() {
        task.recompute_secondary();
    }
    Ok(())
}

/// Flips each label independently with probability `rho` to a uniformly
/// chosen other class present in the same task. Tokens and `y_true` are
/// untouched; `is_noisy` records the oracle flag.
pub fn inject_noise(tasks: &mut [TaskSpec], rho: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(RiclError::InvalidArgument(format!(
            "inject_noise: noise rate {rho} must lie in [0, 1]"
        )));
    }
    if rho == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "noise", &[]));
    for task in tasks.iter_mut() {
        let classes = task.class_set();
        if classes.len() < 2 {
            return Err(RiclError::InvalidArgument(format!(
                "inject_noise: task {} has a single class; cannot flip labels",
                task.task_id
            )));
        }
        for s in task.samples.iter_mut() {
            if rng.gen_bool(rho) {
                let others: Vec<usize> =
                    classes.iter().copied().filter(|c| *c != s.y_true).collect();
                s.y = others[rng.gen_range(0..others.len())];
            } else {
                s.y = s.y_true;
            }
            s.is_noisy = s.y != s.y_true;
        }
    }
    Ok(())
}

/// The assembled stream: task samples concatenated in task order, consumed
/// in fixed-size delay buffers.
#[derive(Debug, Clone)]
pub struct StreamState {
    samples: Vec<Sample>,
    cursor: usize,
    /// Cumulative sample count at the end of each streamed task.
    boundaries: Vec<usize>,
    delay_buffer_size: usize,
}

/// Concatenates tasks in `order`, shuffling each task's samples with a
/// task-specific seed.
pub fn build_stream(
    mut tasks: Vec<TaskSpec>,
    order: &[usize],
    delay_buffer_size: usize,
    seed: u64,
) -> Result<StreamState> {
    if delay_buffer_size == 0 {
        return Err(RiclError::InvalidArgument(
            "build_stream: delay_buffer_size must be >= 1".into(),
        ));
    }
    let mut seen = vec![false; tasks.len()];
    for t in order {
        if *t >= tasks.len() || seen[*t] {
            return Err(RiclError::InvalidArgument(format!(
                "build_stream: order is not a permutation of 0..{}",
                tasks.len()
            )));
        }
        seen[*t] = true;
    }
    if order.len() != tasks.len() {
        return Err(RiclError::InvalidArgument(
            "build_stream: order length differs from task count".into(),
        ));
    }
    let mut samples = Vec::new();
    let mut boundaries = Vec::with_capacity(order.len());
    for (pos, t) in order.iter().enumerate() {
        let mut batch = std::mem::take(&mut tasks[*t].samples);
        let mut rng =
            ChaCha8Rng::seed_from_u64(subseed(seed, "stream-order", &[pos as u64, *t as u64]));
        batch.shuffle(&mut rng);
        samples.extend(batch);
        boundaries.push(samples.len());
    }
    Ok(StreamState {
        samples,
        cursor: 0,
        boundaries,
        delay_buffer_size,
    })
}

impl StreamState {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.samples.len()
    }

    /// Cumulative end position of each streamed task, in stream order.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// All samples in stream order (for audit dumps).
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Yields the next delay buffer (up to M samples), filling `y_model`
    /// with the supplied primary model's argmax prediction at arrival time.
    /// Returns `None` once the stream is exhausted; the final buffer may be
    /// short.
    pub fn next_delay_buffer(
        &mut self,
        model: &ModelParams,
        feat: &FeatureConfig,
    ) -> Result<Option<Vec<Sample>>> {
        if self.is_exhausted() {
            return Ok(None);
        }
        let end = (self.cursor + self.delay_buffer_size).min(self.samples.len());
        let mut chunk = Vec::with_capacity(end - self.cursor);
        for i in self.cursor..end {
            let mut s = self.samples[i].clone();
            let x = feat.featurize(&s.tokens)?;
            let out = forward(model, &x)?;
            let pred = out.predicted_class();
            s.y_model = Some(pred);
            self.samples[i].y_model = Some(pred);
            chunk.push(s);
        }
        self.cursor = end;
        Ok(Some(chunk))
    }
}

/// Dumps samples as JSONL with all fields, for audit.
pub fn dump_stream(samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
