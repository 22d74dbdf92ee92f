//! Experiment orchestration: builds the stream for each seed, runs the
//! selected method through the engine, records the accuracy matrix at task
//! boundaries, and writes run artifacts (matrix CSV, cycle-report JSONL,
//! per-method summary CSV).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::augment::{AugmentConfig, SynonymTable};
use crate::config::{ExperimentConfig, Method};
use crate::error::{Result, RiclError};
use crate::metrics::{af, ap, evaluate, AccuracyMatrix};
use crate::nn::FeatureConfig;
use crate::stream::{
    apply_blur, build_stream, generate_synthetic_corpus, hold_out_test, inject_noise,
    load_corpus, partition_tasks, Sample,
};
use crate::subseed;
use crate::trainer::{CycleReport, Engine, EngineConfig, PipelineFlags};

/// Maps the configured method and ablation flags onto pipeline switches.
pub fn method_flags(cfg: &ExperimentConfig) -> PipelineFlags {
    match cfg.method {
        Method::Seqft => PipelineFlags::seqft(),
        Method::Er => PipelineFlags::er(),
        Method::Ricl => PipelineFlags {
            tcp: cfg.ablations.tcp,
            ncl: cfg.ablations.ncl,
            ipo: cfg.ablations.ipo,
            replay: true,
        },
    }
}

/// Stable label used in artifact filenames and summaries.
pub fn method_label(cfg: &ExperimentConfig) -> String {
    match cfg.method {
        Method::Seqft => "seqft".to_string(),
        Method::Er => "er".to_string(),
        Method::Ricl => {
            let mut label = "ricl".to_string();
            if !cfg.ablations.tcp {
                label.push_str("_no_tcp");
            }
            if !cfg.ablations.ncl {
                label.push_str("_no_ncl");
            }
            if !cfg.ablations.ipo {
                label.push_str("_no_ipo");
            }
            label
        }
    }
}

/// Everything produced by one (method, seed) run.
#[derive(Debug)]
pub struct RunArtifacts {
    pub seed: u64,
    pub ap: f64,
    pub af: f64,
    pub matrix: AccuracyMatrix,
    pub reports: Vec<CycleReport>,
    pub matrix_csv: String,
    pub cycles_jsonl: String,
    pub stream_jsonl: Option<String>,
    pub buffers_jsonl: Option<String>,
}

#[derive(Serialize)]
struct BufferDumpLine {
    cycle: usize,
    pending_clean: Vec<u64>,
    pending_noisy: Vec<u64>,
    r_clean: Vec<u64>,
    r_noisy: Vec<u64>,
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs one seed of the configured method end to end: corpus, stream,
/// training cycles, and the accuracy matrix recorded after each completed
/// task.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    let (corpus, generated_table) = match &cfg.corpus.path {
        Some(path) => (load_corpus(path)?, None),
        None => {
            let n_classes = cfg.stream.num_tasks * cfg.stream.classes_per_task;
            let (corpus, table) = generate_synthetic_corpus(
                n_classes,
                cfg.corpus.docs_per_class,
                cfg.corpus.vocab_size,
                subseed(seed, "corpus", &[]),
            )?;
            (corpus, Some(table))
        }
    };
    let table = match (&cfg.corpus.synonym_table, generated_table) {
        (Some(path), _) => SynonymTable::load(path)?,
        (None, Some(table)) => table,
        (None, None) => SynonymTable::new(),
    };

    let mut stream_cfg = cfg.stream.clone();
    stream_cfg.seed = subseed(seed, "stream", &[]);
    let mut tasks = partition_tasks(&corpus, &stream_cfg)?;
    let tests = hold_out_test(&mut tasks, cfg.run.test_fraction, stream_cfg.seed)?;
    apply_blur(&mut tasks, stream_cfg.blur_rate, stream_cfg.seed)?;
    inject_noise(&mut tasks, stream_cfg.noise_rate, stream_cfg.seed)?;
    let mut stream = build_stream(
        tasks,
        &cfg.run.task_order,
        stream_cfg.delay_buffer_size,
        stream_cfg.seed,
    )?;

    let feat = FeatureConfig {
        hash_dim: cfg.model.hash_dim,
        seed: cfg.model.hash_seed,
    };
    let engine_cfg = EngineConfig {
        flags: method_flags(cfg),
        feat,
        d_emb: cfg.model.d_emb,
        d_hid: cfg.model.d_hid,
        n_classes: corpus.num_classes(),
        train: cfg.train.clone(),
        purifier: cfg.purifier.clone(),
        augment: AugmentConfig {
            op_rate: cfg.augment.op_rate,
            swap_rate: cfg.augment.swap_rate,
            delete_prob: cfg.augment.delete_prob,
            seed: subseed(seed, "augment", &[]),
            table,
        },
        clean_capacity: cfg.buffers.clean_capacity,
        noisy_capacity: cfg.buffers.noisy_capacity,
        replay_capacity: cfg.buffers.replay_capacity,
        admission_stop: cfg.buffers.admission_stop,
        seed: subseed(seed, "engine", &[]),
    };
    let mut engine = Engine::new(engine_cfg);

    let boundaries: Vec<usize> = stream.boundaries().to_vec();
    let mut matrix = AccuracyMatrix::new(cfg.stream.num_tasks);
    let mut next_boundary = 0usize;
    let mut reports = Vec::new();
    let mut buffer_lines: Vec<BufferDumpLine> = Vec::new();

    while let Some(report) = engine.process_cycle(&mut stream)? {
        if cfg.run.dump_buffers {
            buffer_lines.push(BufferDumpLine {
                cycle: report.cycle,
                pending_clean: engine.pending_clean_ids(),
                pending_noisy: engine.pending_noisy_ids(),
                r_clean: engine.r_clean.ids_in_order(),
                r_noisy: engine.r_noisy.ids_in_order(),
            });
        }
        reports.push(report);
        while next_boundary < boundaries.len() && stream.consumed() >= boundaries[next_boundary] {
            let mut row = Vec::with_capacity(next_boundary + 1);
            for j in 0..=next_boundary {
                let task_id = cfg.run.task_order[j];
                row.push(evaluate(&engine.model, &feat, &tests[task_id])?);
            }
            matrix.record_row(row)?;
            next_boundary += 1;
        }
        log::debug!(
            "cycle {} done (consumed {}/{})",
            reports.len() - 1,
            stream.consumed(),
            stream.len()
        );
    }

    let ap_value = ap(&matrix)?;
    let af_value = if cfg.stream.num_tasks >= 2 {
        af(&matrix)?
    } else {
        0.0
    };
    let matrix_csv = matrix.to_csv()?;
    let cycles_jsonl = jsonl(reports.iter())?;
    let stream_jsonl = if cfg.run.dump_stream {
        Some(jsonl(stream.samples().iter())?)
    } else {
        None
    };
    let buffers_jsonl = if cfg.run.dump_buffers {
        Some(jsonl(buffer_lines.iter())?)
    } else {
        None
    };
    Ok(RunArtifacts {
        seed,
        ap: ap_value,
        af: af_value,
        matrix,
        reports,
        matrix_csv,
        cycles_jsonl,
        stream_jsonl,
        buffers_jsonl,
    })
}

/// AP/AF for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub ap: f64,
    pub af: f64,
}

/// Aggregated results of one method over its seeds (population std).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub label: String,
    pub results: Vec<SeedResult>,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub af_mean: f64,
    pub af_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(label: &str, results: Vec<SeedResult>) -> ExperimentSummary {
    let aps: Vec<f64> = results.iter().map(|r| r.ap).collect();
    let afs: Vec<f64> = results.iter().map(|r| r.af).collect();
    let (ap_mean, ap_std) = mean_std(&aps);
    let (af_mean, af_std) = mean_std(&afs);
    ExperimentSummary {
        label: label.to_string(),
        results,
        ap_mean,
        ap_std,
        af_mean,
        af_std,
    }
}

/// Runs every configured seed, writes artifacts under the output directory,
/// and returns the aggregate summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    run_experiment_in(cfg, &cfg.run.output_dir)
}

/// Like [`run_experiment`] with an explicit output directory.
pub fn run_experiment_in(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    let label = method_label(cfg);
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join(format!("config_{label}.txt")),
        crate::config::serialize_config(cfg),
    )?;
    let mut results = Vec::with_capacity(cfg.run.seeds.len());
    let mut summary_csv = String::from("method,seed,ap,af\n");
    for seed in &cfg.run.seeds {
        let artifacts = run_single(cfg, *seed)
            .map_err(|e| e.in_context(format!("method {label}, seed {seed}")))?;
        log::info!(
            "{label} seed {seed}: AP {:.2} AF {:.2}",
            artifacts.ap,
            artifacts.af
        );
        fs::write(
            out_dir.join(format!("matrix_{label}_seed{seed}.csv")),
            &artifacts.matrix_csv,
        )?;
        fs::write(
            out_dir.join(format!("cycles_{label}_seed{seed}.jsonl")),
            &artifacts.cycles_jsonl,
        )?;
        if let Some(dump) = &artifacts.stream_jsonl {
            fs::write(out_dir.join(format!("stream_{label}_seed{seed}.jsonl")), dump)?;
        }
        if let Some(dump) = &artifacts.buffers_jsonl {
            fs::write(
                out_dir.join(format!("buffers_{label}_seed{seed}.jsonl")),
                dump,
            )?;
        }
        let _ = writeln!(
            summary_csv,
            "{label},{seed},{:.4},{:.4}",
            artifacts.ap, artifacts.af
        );
        results.push(SeedResult {
            seed: *seed,
            ap: artifacts.ap,
            af: artifacts.af,
        });
    }
    fs::write(out_dir.join(format!("summary_{label}.csv")), &summary_csv)?;
    Ok(summarize(&label, results))
}

/// One row of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub tcp: bool,
    pub ncl: bool,
    pub ipo: bool,
    pub summary: ExperimentSummary,
}

/// Runs the four-configuration ablation grid (all on, then each component
/// removed in turn) and writes `ablation.csv` alongside the run artifacts.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    if cfg.method != Method::Ricl {
        return Err(RiclError::Config {
            key: "method".to_string(),
            reason: "ablate requires method=ricl".to_string(),
        });
    }
    let grid = [
        (true, true, true),
        (true, true, false),
        (true, false, true),
        (false, true, true),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    let mut csv = String::from("tcp,ncl,ipo,ap_mean,ap_std,af_mean,af_std\n");
    for (tcp, ncl, ipo) in grid {
        let mut sub = cfg.clone();
        sub.ablations.tcp = tcp;
        sub.ablations.ncl = ncl;
        sub.ablations.ipo = ipo;
        let summary = run_experiment(&sub)?;
        let _ = writeln!(
            csv,
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            tcp as u8, ncl as u8, ipo as u8, summary.ap_mean, summary.ap_std, summary.af_mean,
            summary.af_std
        );
        rows.push(AblationRow {
            tcp,
            ncl,
            ipo,
            summary,
        });
    }
    fs::create_dir_all(&cfg.run.output_dir)?;
    fs::write(cfg.run.output_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}

/// Builds a markdown table of AP/AF per method from the `summary_*.csv`
/// files in a run directory.
pub fn report_dir(dir: &Path) -> Result<String> {
    let mut summaries: Vec<ExperimentSummary> = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("summary_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    for path in entries {
        let text = fs::read_to_string(&path)?;
        let mut results = Vec::new();
        let mut label = String::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(RiclError::InvalidArgument(format!(
                    "malformed summary row in {}: `{line}`",
                    path.display()
                )));
            }
            label = fields[0].to_string();
            results.push(SeedResult {
                seed: fields[1].parse().map_err(|_| {
                    RiclError::InvalidArgument(format!("bad seed in {}", path.display()))
                })?,
                ap: fields[2].parse().map_err(|_| {
                    RiclError::InvalidArgument(format!("bad ap in {}", path.display()))
                })?,
                af: fields[3].parse().map_err(|_| {
                    RiclError::InvalidArgument(format!("bad af in {}", path.display()))
                })?,
            });
        }
        if !results.is_empty() {
            summaries.push(summarize(&label, results));
        }
    }
    if summaries.is_empty() {
        return Err(RiclError::Empty(format!(
            "no summary_*.csv files under {}",
            dir.display()
        )));
    }
    let mut md = String::from("| method | seeds | AP | AF |\n|---|---|---|---|\n");
    for s in &summaries {
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
            s.label,
            s.results.len(),
            s.ap_mean,
            s.ap_std,
            s.af_mean,
            s.af_std
        );
    }
    Ok(md)
}

/// Convenience view of the samples a run would stream, used by audits and
/// examples.
pub fn build_eval_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<Sample>>> {
    let corpus = match &cfg.corpus.path {
        Some(path) => load_corpus(path)?,
        None => {
            let n_classes = cfg.stream.num_tasks * cfg.stream.classes_per_task;
            generate_synthetic_corpus(
                n_classes,
                cfg.corpus.docs_per_class,
                cfg.corpus.vocab_size,
                subseed(seed, "corpus", &[]),
            )?
            .0
        }
    };
    let mut stream_cfg = cfg.stream.clone();
    stream_cfg.seed = subseed(seed, "stream", &[]);
    let mut tasks = partition_tasks(&corpus, &stream_cfg)?;
    hold_out_test(&mut tasks, cfg.run.test_fraction, stream_cfg.seed)
}
