//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers, parsed without external dependencies. Unknown keys
//! are rejected and every diagnostic names the offending key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, RiclError};
use crate::purifier::PurifierConfig;
use crate::stream::StreamConfig;
use crate::trainer::TrainPhaseConfig;

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ricl,
    Seqft,
    Er,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ricl => "ricl",
            Method::Seqft => "seqft",
            Method::Er => "er",
        }
    }
}

/// Component toggles for ablation runs (meaningful only with `method=ricl`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub tcp: bool,
    pub ncl: bool,
    pub ipo: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            tcp: true,
            ncl: true,
            ipo: true,
        }
    }
}

/// Corpus source: an external JSONL file, or the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub synonym_table: Option<PathBuf>,
    pub docs_per_class: usize,
    pub vocab_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: None,
            synonym_table: None,
            docs_per_class: 150,
            vocab_size: 400,
        }
    }
}

/// Classifier dimensions shared by the purifier and primary model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub hash_dim: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub hash_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hash_dim: 1 << 15,
            d_emb: 64,
            d_hid: 128,
            hash_seed: 0,
        }
    }
}

/// Augmentation rates (the synonym table rides along from the corpus).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRates {
    pub op_rate: f64,
    pub swap_rate: f64,
    pub delete_prob: f64,
}

impl Default for AugmentRates {
    fn default() -> Self {
        AugmentRates {
            op_rate: 0.1,
            swap_rate: 0.1,
            delete_prob: 0.1,
        }
    }
}

/// Buffer capacities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferConfig {
    pub clean_capacity: usize,
    pub noisy_capacity: usize,
    pub replay_capacity: usize,
    pub admission_stop: bool,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            clean_capacity: 200,
            noisy_capacity: 400,
            replay_capacity: 800,
            admission_stop: false,
        }
    }
}

/// Run orchestration: seeds, task order, outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task_order: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub test_fraction: f64,
    pub dump_stream: bool,
    pub dump_buffers: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task_order: Vec::new(), // filled to identity during validation
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
            test_fraction: 0.2,
            dump_stream: false,
            dump_buffers: false,
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub ablations: AblationFlags,
    pub stream: StreamConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub purifier: PurifierConfig,
    pub train: TrainPhaseConfig,
    pub augment: AugmentRates,
    pub buffers: BufferConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            method: Method::Ricl,
            ablations: AblationFlags::default(),
            stream: StreamConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            purifier: PurifierConfig::default(),
            train: TrainPhaseConfig::default(),
            augment: AugmentRates::default(),
            buffers: BufferConfig::default(),
            run: RunConfig::default(),
        };
        cfg.run.task_order = (0..cfg.stream.num_tasks).collect();
        cfg
    }
}

fn cfg_err(key: &str, reason: impl Into<String>) -> RiclError {
    RiclError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| cfg_err(key, format!("expected a nonnegative integer, got `{v}`")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| cfg_err(key, format!("expected a nonnegative integer, got `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| cfg_err(key, format!("expected a number, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list<T, F: Fn(&str, &str) -> Result<T>>(key: &str, v: &str, f: F) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

/// Parses configuration text, applying defaults for absent keys and
/// rejecting unknown ones, then validates.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.run.task_order = Vec::new(); // re-derive unless given explicitly
    let mut section = String::new();
    let mut ablation_keys_set: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                cfg_err(
                    &format!("line {}", lineno + 1),
                    format!("malformed section header `{line}`"),
                )
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            cfg_err(
                &format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let key = key.trim();
        let value = value.trim();
        let qual = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        match (section.as_str(), key) {
            ("", "method") => {
                cfg.method = match value {
                    "ricl" => Method::Ricl,
                    "seqft" => Method::Seqft,
                    "er" => Method::Er,
                    _ => return Err(cfg_err(&qual, format!("unknown method `{value}`"))),
                };
            }
            ("ablations", "tcp") => {
                cfg.ablations.tcp = parse_bool(&qual, value)?;
                ablation_keys_set.push(qual);
            }
            ("ablations", "ncl") => {
                cfg.ablations.ncl = parse_bool(&qual, value)?;
                ablation_keys_set.push(qual);
            }
            ("ablations", "ipo") => {
                cfg.ablations.ipo = parse_bool(&qual, value)?;
                ablation_keys_set.push(qual);
            }
            ("stream", "num_tasks") => cfg.stream.num_tasks = parse_usize(&qual, value)?,
            ("stream", "classes_per_task") => {
                cfg.stream.classes_per_task = parse_usize(&qual, value)?
            }
            ("stream", "blur_rate") => cfg.stream.blur_rate = parse_f64(&qual, value)?,
            ("stream", "noise_rate") => cfg.stream.noise_rate = parse_f64(&qual, value)?,
            ("stream", "delay_buffer_size") => {
                cfg.stream.delay_buffer_size = parse_usize(&qual, value)?
            }
            ("stream", "seed") => cfg.stream.seed = parse_u64(&qual, value)?,
            ("corpus", "path") => cfg.corpus.path = opt_path(value),
            ("corpus", "synonym_table") => cfg.corpus.synonym_table = opt_path(value),
            ("corpus", "docs_per_class") => {
                cfg.corpus.docs_per_class = parse_usize(&qual, value)?
            }
            ("corpus", "vocab_size") => cfg.corpus.vocab_size = parse_usize(&qual, value)?,
            ("model", "hash_dim") => cfg.model.hash_dim = parse_usize(&qual, value)?,
            ("model", "d_emb") => cfg.model.d_emb = parse_usize(&qual, value)?,
            ("model", "d_hid") => cfg.model.d_hid = parse_usize(&qual, value)?,
            ("model", "hash_seed") => cfg.model.hash_seed = parse_u64(&qual, value)?,
            ("purifier", "epochs") => cfg.purifier.epochs = parse_usize(&qual, value)?,
            ("purifier", "lr") => cfg.purifier.lr = parse_f64(&qual, value)?,
            ("purifier", "gce_q") => cfg.purifier.gce_q = parse_f64(&qual, value)?,
            ("purifier", "batch_size") => cfg.purifier.batch_size = parse_usize(&qual, value)?,
            ("train", "lr_ncl") => cfg.train.lr_ncl = parse_f64(&qual, value)?,
            ("train", "lr_sft") => cfg.train.lr_sft = parse_f64(&qual, value)?,
            ("train", "lr_ipo") => cfg.train.lr_ipo = parse_f64(&qual, value)?,
            ("train", "alternatives") => cfg.train.alternatives = parse_usize(&qual, value)?,
            ("train", "batch_size") => cfg.train.batch_size = parse_usize(&qual, value)?,
            ("train", "epochs") => cfg.train.epochs = parse_usize(&qual, value)?,
            ("train", "replay_mix") => cfg.train.replay_mix = parse_f64(&qual, value)?,
            ("train", "tau") => cfg.train.tau = parse_f64(&qual, value)?,
            ("train", "freeze_pairs") => cfg.train.freeze_pairs = parse_bool(&qual, value)?,
            ("train", "alt_from_primary") => {
                cfg.train.alt_from_primary = parse_bool(&qual, value)?
            }
            ("augment", "op_rate") => cfg.augment.op_rate = parse_f64(&qual, value)?,
            ("augment", "swap_rate") => cfg.augment.swap_rate = parse_f64(&qual, value)?,
            ("augment", "delete_prob") => cfg.augment.delete_prob = parse_f64(&qual, value)?,
            ("buffers", "clean_capacity") => {
                cfg.buffers.clean_capacity = parse_usize(&qual, value)?
            }
            ("buffers", "noisy_capacity") => {
                cfg.buffers.noisy_capacity = parse_usize(&qual, value)?
            }
            ("buffers", "replay_capacity") => {
                cfg.buffers.replay_capacity = parse_usize(&qual, value)?
            }
            ("buffers", "admission_stop") => {
                cfg.buffers.admission_stop = parse_bool(&qual, value)?
            }
            ("run", "task_order") => {
                cfg.run.task_order = parse_list(&qual, value, parse_usize)?
            }
            ("run", "seeds") => cfg.run.seeds = parse_list(&qual, value, parse_u64)?,
            ("run", "output_dir") => {
                cfg.run.output_dir =
                    opt_path(value).ok_or_else(|| cfg_err(&qual, "must not be empty"))?
            }
            ("run", "test_fraction") => cfg.run.test_fraction = parse_f64(&qual, value)?,
            ("run", "dump_stream") => cfg.run.dump_stream = parse_bool(&qual, value)?,
            ("run", "dump_buffers") => cfg.run.dump_buffers = parse_bool(&qual, value)?,
            _ => return Err(cfg_err(&qual, "unknown key")),
        }
    }
    if cfg.method != Method::Ricl {
        if let Some(k) = ablation_keys_set.first() {
            return Err(cfg_err(
                k,
                format!("ablation flags are only valid with method=ricl, not {}", cfg.method.as_str()),
            ));
        }
    }
    validate(&mut cfg)?;
    Ok(cfg)
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        cfg_err(
            "config",
            format!("cannot read {}: {e}", path.display()),
        )
    })?;
    parse_config_str(&text)
}

fn validate(cfg: &mut ExperimentConfig) -> Result<()> {
    let s = &cfg.stream;
    if s.num_tasks == 0 {
        return Err(cfg_err("stream.num_tasks", "must be >= 1"));
    }
    if s.classes_per_task == 0 {
        return Err(cfg_err("stream.classes_per_task", "must be >= 1"));
    }
    if !(0.0..1.0).contains(&s.blur_rate) {
        return Err(cfg_err(
            "stream.blur_rate",
            format!("{} is outside [0, 1)", s.blur_rate),
        ));
    }
    if !(0.0..=1.0).contains(&s.noise_rate) {
        return Err(cfg_err(
            "stream.noise_rate",
            format!("{} is outside [0, 1]", s.noise_rate),
        ));
    }
    if s.delay_buffer_size == 0 {
        return Err(cfg_err("stream.delay_buffer_size", "must be >= 1"));
    }
    if cfg.corpus.docs_per_class == 0 {
        return Err(cfg_err("corpus.docs_per_class", "must be >= 1"));
    }
    if cfg.corpus.vocab_size == 0 {
        return Err(cfg_err("corpus.vocab_size", "must be >= 1"));
    }
    for (key, v) in [
        ("model.hash_dim", cfg.model.hash_dim),
        ("model.d_emb", cfg.model.d_emb),
        ("model.d_hid", cfg.model.d_hid),
        ("purifier.batch_size", cfg.purifier.batch_size),
        ("train.batch_size", cfg.train.batch_size),
        ("train.alternatives", cfg.train.alternatives),
    ] {
        if v == 0 {
            return Err(cfg_err(key, "must be >= 1"));
        }
    }
    for (key, v) in [
        ("purifier.lr", cfg.purifier.lr),
        ("train.lr_ncl", cfg.train.lr_ncl),
        ("train.lr_sft", cfg.train.lr_sft),
        ("train.lr_ipo", cfg.train.lr_ipo),
        ("train.tau", cfg.train.tau),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(cfg_err(key, format!("{v} must be positive")));
        }
    }
    if !(0.0 < cfg.purifier.gce_q && cfg.purifier.gce_q <= 1.0) {
        return Err(cfg_err(
            "purifier.gce_q",
            format!("{} is outside (0, 1]", cfg.purifier.gce_q),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.train.replay_mix) {
        return Err(cfg_err(
            "train.replay_mix",
            format!("{} is outside [0, 1]", cfg.train.replay_mix),
        ));
    }
    for (key, v) in [
        ("augment.op_rate", cfg.augment.op_rate),
        ("augment.swap_rate", cfg.augment.swap_rate),
        ("augment.delete_prob", cfg.augment.delete_prob),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(cfg_err(key, format!("{v} is outside [0, 1]")));
        }
    }
    if !(0.0..1.0).contains(&cfg.run.test_fraction) {
        return Err(cfg_err(
            "run.test_fraction",
            format!("{} is outside [0, 1)", cfg.run.test_fraction),
        ));
    }
    if cfg.run.seeds.is_empty() {
        return Err(cfg_err("run.seeds", "must list at least one seed"));
    }
    if cfg.run.task_order.is_empty() {
        cfg.run.task_order = (0..cfg.stream.num_tasks).collect();
    }
    if cfg.run.task_order.len() != cfg.stream.num_tasks {
        return Err(cfg_err(
            "run.task_order",
            format!(
                "has {} entries but stream.num_tasks is {}",
                cfg.run.task_order.len(),
                cfg.stream.num_tasks
            ),
        ));
    }
    let mut seen = vec![false; cfg.stream.num_tasks];
    for t in &cfg.run.task_order {
        if *t >= cfg.stream.num_tasks || seen[*t] {
            return Err(cfg_err(
                "run.task_order",
                format!("is not a permutation of 0..{}", cfg.stream.num_tasks),
            ));
        }
        seen[*t] = true;
    }
    Ok(())
}

fn fmt_opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes a configuration to the same text format `parse_config_str`
/// reads; parsing the output yields an equal configuration.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut kv = |s: &mut String, k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv(&mut out, "method", cfg.method.as_str().to_string());
    out.push_str("\n[ablations]\n");
    if cfg.method == Method::Ricl {
        kv(&mut out, "tcp", cfg.ablations.tcp.to_string());
        kv(&mut out, "ncl", cfg.ablations.ncl.to_string());
        kv(&mut out, "ipo", cfg.ablations.ipo.to_string());
    }
    out.push_str("\n[stream]\n");
    kv(&mut out, "num_tasks", cfg.stream.num_tasks.to_string());
    kv(
        &mut out,
        "classes_per_task",
        cfg.stream.classes_per_task.to_string(),
    );
    kv(&mut out, "blur_rate", cfg.stream.blur_rate.to_string());
    kv(&mut out, "noise_rate", cfg.stream.noise_rate.to_string());
    kv(
        &mut out,
        "delay_buffer_size",
        cfg.stream.delay_buffer_size.to_string(),
    );
    kv(&mut out, "seed", cfg.stream.seed.to_string());
    out.push_str("\n[corpus]\n");
    kv(&mut out, "path", fmt_opt_path(&cfg.corpus.path));
    kv(
        &mut out,
        "synonym_table",
        fmt_opt_path(&cfg.corpus.synonym_table),
    );
    kv(
        &mut out,
        "docs_per_class",
        cfg.corpus.docs_per_class.to_string(),
    );
    kv(&mut out, "vocab_size", cfg.corpus.vocab_size.to_string());
    out.push_str("\n[model]\n");
    kv(&mut out, "hash_dim", cfg.model.hash_dim.to_string());
    kv(&mut out, "d_emb", cfg.model.d_emb.to_string());
    kv(&mut out, "d_hid", cfg.model.d_hid.to_string());
    kv(&mut out, "hash_seed", cfg.model.hash_seed.to_string());
    out.push_str("\n[purifier]\n");
    kv(&mut out, "epochs", cfg.purifier.epochs.to_string());
    kv(&mut out, "lr", cfg.purifier.lr.to_string());
    kv(&mut out, "gce_q", cfg.purifier.gce_q.to_string());
    kv(&mut out, "batch_size", cfg.purifier.batch_size.to_string());
    out.push_str("\n[train]\n");
    kv(&mut out, "lr_ncl", cfg.train.lr_ncl.to_string());
    kv(&mut out, "lr_sft", cfg.train.lr_sft.to_string());
    kv(&mut out, "lr_ipo", cfg.train.lr_ipo.to_string());
    kv(&mut out, "alternatives", cfg.train.alternatives.to_string());
    kv(&mut out, "batch_size", cfg.train.batch_size.to_string());
    kv(&mut out, "epochs", cfg.train.epochs.to_string());
    kv(&mut out, "replay_mix", cfg.train.replay_mix.to_string());
    kv(&mut out, "tau", cfg.train.tau.to_string());
    kv(&mut out, "freeze_pairs", cfg.train.freeze_pairs.to_string());
    kv(
        &mut out,
        "alt_from_primary",
        cfg.train.alt_from_primary.to_string(),
    );
    out.push_str("\n[augment]\n");
    kv(&mut out, "op_rate", cfg.augment.op_rate.to_string());
    kv(&mut out, "swap_rate", cfg.augment.swap_rate.to_string());
    kv(&mut out, "delete_prob", cfg.augment.delete_prob.to_string());
    out.push_str("\n[buffers]\n");
    kv(
        &mut out,
        "clean_capacity",
        cfg.buffers.clean_capacity.to_string(),
    );
    kv(
        &mut out,
        "noisy_capacity",
        cfg.buffers.noisy_capacity.to_string(),
    );
    kv(
        &mut out,
        "replay_capacity",
        cfg.buffers.replay_capacity.to_string(),
    );
    kv(
        &mut out,
        "admission_stop",
        cfg.buffers.admission_stop.to_string(),
    );
    out.push_str("\n[run]\n");
    kv(&mut out, "task_order", fmt_list(&cfg.run.task_order));
    kv(&mut out, "seeds", fmt_list(&cfg.run.seeds));
    kv(
        &mut out,
        "output_dir",
        cfg.run.output_dir.display().to_string(),
    );
    kv(
        &mut out,
        "test_fraction",
        cfg.run.test_fraction.to_string(),
    );
    kv(&mut out, "dump_stream", cfg.run.dump_stream.to_string());
    kv(&mut out, "dump_buffers", cfg.run.dump_buffers.to_string());
    out
}

/// Per-section key listing, used by the CLI help output.
pub fn known_keys() -> BTreeMap<&'static str, Vec<&'static str>> {
    let mut m = BTreeMap::new();
    m.insert("", vec!["method"]);
    m.insert("ablations", vec!["tcp", "ncl", "ipo"]);
    m.insert(
        "stream",
        vec![
            "num_tasks",
            "classes_per_task",
            "blur_rate",
            "noise_rate",
            "delay_buffer_size",
            "seed",
        ],
    );
    m.insert(
        "corpus",
        vec!["path", "synonym_table", "docs_per_class", "vocab_size"],
    );
    m.insert("model", vec!["hash_dim", "d_emb", "d_hid", "hash_seed"]);
    m.insert("purifier", vec!["epochs", "lr", "gce_q", "batch_size"]);
    m.insert(
        "train",
        vec![
            "lr_ncl",
            "lr_sft",
            "lr_ipo",
            "alternatives",
            "batch_size",
            "epochs",
            "replay_mix",
            "tau",
            "freeze_pairs",
            "alt_from_primary",
        ],
    );
    m.insert("augment", vec!["op_rate", "swap_rate", "delete_prob"]);
    m.insert(
        "buffers",
        vec![
            "clean_capacity",
            "noisy_capacity",
            "replay_capacity",
            "admission_stop",
        ],
    );
    m.insert(
        "run",
        vec![
            "task_order",
            "seeds",
            "output_dir",
            "test_fraction",
            "dump_stream",
            "dump_buffers",
        ],
    );
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_applies_defaults() {
        let cfg = parse_config_str("method = ricl\n").unwrap();
        assert_eq!(cfg.method, Method::Ricl);
        assert_eq!(cfg.stream.num_tasks, 5);
        assert_eq!(cfg.train.alternatives, 5);
        assert_eq!(cfg.buffers.replay_capacity, 800);
        assert_eq!(cfg.run.task_order, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.run.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn out_of_range_noise_rate_names_the_key() {
        let err = parse_config_str("method = ricl\n[stream]\nnoise_rate = 1.5\n").unwrap_err();
        match err {
            RiclError::Config { key, .. } => assert_eq!(key, "stream.noise_rate"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_name() {
        let err = parse_config_str("method = ricl\n[stream]\nnum_task = 3\n").unwrap_err();
        match err {
            RiclError::Config { key, .. } => assert_eq!(key, "stream.num_task"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ablations_require_ricl() {
        let err = parse_config_str("method = seqft\n[ablations]\ntcp = false\n").unwrap_err();
        match err {
            RiclError::Config { key, .. } => assert_eq!(key, "ablations.tcp"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn task_order_must_be_permutation() {
        let err =
            parse_config_str("method = ricl\n[run]\ntask_order = 0,1,1,3,4\n").unwrap_err();
        match err {
            RiclError::Config { key, .. } => assert_eq!(key, "run.task_order"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_config() {
        let text = "
method = ricl
[ablations]
ipo = false
[stream]
num_tasks = 3
classes_per_task = 2
blur_rate = 0.05
noise_rate = 0.4
delay_buffer_size = 50
seed = 99
[model]
hash_dim = 4096
d_emb = 32
d_hid = 48
[train]
lr_sft = 0.25
replay_mix = 0.3
[run]
task_order = 2,0,1
seeds = 5,6
output_dir = out/exp1
test_fraction = 0.25
";
        let cfg = parse_config_str(text).unwrap();
        let round = parse_config_str(&serialize_config(&cfg)).unwrap();
        assert_eq!(cfg, round);
    }

    #[test]
    fn seqft_round_trip() {
        let cfg = parse_config_str("method = seqft\n").unwrap();
        let round = parse_config_str(&serialize_config(&cfg)).unwrap();
        assert_eq!(cfg, round);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config_str("# a comment\n\nmethod = er\n# another\n").unwrap();
        assert_eq!(cfg.method, Method::Er);
    }
}
