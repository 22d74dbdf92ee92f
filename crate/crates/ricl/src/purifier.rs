//! Temporal consistency-aware purifier: trains a dedicated classifier with
//! generalized cross-entropy on each delay buffer, routes arrivals to the
//! clean/noisy partitions by confidence-margin sign, and promotes samples
//! whose margin sign agrees between the arrival-time purifier and the
//! next-cycle purifier.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::buffers::BoundedBuffer;
use crate::error::{Result, RiclError};
use crate::losses::gce_loss;
use crate::nn::{backward, forward, sgd_step, FeatureConfig, ModelParams, ParamGrads, UpstreamGrads};
use crate::stream::Sample;

/// Purifier training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PurifierConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Generalized cross-entropy exponent q.
    pub gce_q: f64,
    pub batch_size: usize,
}

impl Default for PurifierConfig {
    fn default() -> Self {
        PurifierConfig {
            epochs: 5,
            lr: 1e-4,
            gce_q: 0.7,
            batch_size: 16,
        }
    }
}

/// Confidence margins of one sample at arrival and (once available) at the
/// recheck cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRecord {
    pub sample_id: u64,
    pub conf_at_arrival: f64,
    pub conf_at_recheck: Option<f64>,
}

/// Arrival-time routing target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalRoute {
    Clean,
    Noisy,
}

/// Recheck-time decision for a buffered sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecheckOutcome {
    PromoteClean,
    PromoteNoisy,
    Discard,
}

/// Confidence margin: the labeled class's logit minus the highest competing
/// logit. Nonnegative exactly when the label is an argmax of the logits.
pub fn confidence(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(RiclError::InvalidArgument(
            "confidence: need at least two classes".into(),
        ));
    }
    if y >= logits.len() {
        return Err(RiclError::InvalidArgument(format!(
            "confidence: class {y} out of range for {} classes",
            logits.len()
        )));
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != y)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - best_other)
}

/// Sign-agreement rule for temporal consistency: both margins nonnegative
/// promotes clean, both negative promotes noisy, a sign flip discards.
pub fn recheck_outcome(conf_arrival: f64, conf_recheck: f64) -> RecheckOutcome {
    match (conf_arrival >= 0.0, conf_recheck >= 0.0) {
        (true, true) => RecheckOutcome::PromoteClean,
        (false, false) => RecheckOutcome::PromoteNoisy,
        _ => RecheckOutcome::Discard,
    }
}

/// Mean generalized cross-entropy of the purifier over a buffer, evaluated
/// without updating parameters.
pub fn mean_gce(
    params: &ModelParams,
    feat: &FeatureConfig,
    buffer: &[Sample],
    q: f64,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(RiclError::Empty("mean_gce: buffer".into()));
    }
    let mut total = 0.0;
    for s in buffer {
        let x = feat.featurize(&s.tokens)?;
        let out = forward(params, &x)?;
        total += gce_loss(&out.probs(), s.y, q)?.value;
    }
    Ok(total / buffer.len() as f64)
}

/// Runs `epochs` full passes of minibatch SGD minimizing generalized
/// cross-entropy on `(x, y)` pairs, warm-starting from the given parameters.
/// Returns the per-epoch mean losses (measured as each batch is visited).
pub fn train_purifier<R: Rng>(
    params: &mut ModelParams,
    feat: &FeatureConfig,
    buffer: &[Sample],
    cfg: &PurifierConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(RiclError::Empty("train_purifier: buffer".into()));
    }
    if cfg.batch_size == 0 {
        return Err(RiclError::InvalidArgument(
            "train_purifier: batch_size must be >= 1".into(),
        ));
    }
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(params);
            for i in batch {
                let s = &buffer[*i];
                let x = feat.featurize(&s.tokens)?;
                let out = forward(params, &x)?;
                let probs = out.probs();
                let loss = gce_loss(&probs, s.y, cfg.gce_q)?;
                epoch_total += loss.value;
                // Chain d/d probs through p = exp(log_probs):
                // d/d log_probs[y] = d_probs[y] * p_y.
                let mut d_log_probs = vec![0.0; probs.len()];
                d_log_probs[s.y] = loss.d_probs[s.y] * probs[s.y];
                let g = backward(params, &x, &UpstreamGrads::on_log_probs(d_log_probs))?;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(params, &grads, cfg.lr)?;
        }
        epoch_losses.push(epoch_total / buffer.len() as f64);
    }
    Ok(epoch_losses)
}

/// Scores one arrival with the current purifier and routes it by margin
/// sign (a margin of exactly zero routes clean).
pub fn route_at_arrival(
    params: &ModelParams,
    feat: &FeatureConfig,
    sample: &Sample,
) -> Result<(ArrivalRoute, ConfidenceRecord)> {
    let x = feat.featurize(&sample.tokens)?;
    let out = forward(params, &x)?;
    let conf = confidence(&out.logits, sample.y)?;
    let route = if conf >= 0.0 {
        ArrivalRoute::Clean
    } else {
        ArrivalRoute::Noisy
    };
    Ok((
        route,
        ConfidenceRecord {
            sample_id: sample.id,
            conf_at_arrival: conf,
            conf_at_recheck: None,
        },
    ))
}

/// Counts from one recheck cycle, plus the oracle tallies needed for
/// precision/recall reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PromotionReport {
    pub promoted_clean: usize,
    pub promoted_noisy: usize,
    pub discarded: usize,
    /// Samples promoted to the noisy replay buffer that are truly noisy.
    pub noisy_true_positives: usize,
    /// Total samples rechecked this cycle.
    pub rechecked: usize,
    /// Truly noisy samples among those rechecked.
    pub rechecked_truly_noisy: usize,
}

impl PromotionReport {
    /// Precision of noisy identification (None when nothing was promoted
    /// noisy).
    pub fn noisy_precision(&self) -> Option<f64> {
        (self.promoted_noisy > 0)
            .then(|| self.noisy_true_positives as f64 / self.promoted_noisy as f64)
    }

    /// Recall of noisy identification over the rechecked samples.
    pub fn noisy_recall(&self) -> Option<f64> {
        (self.rechecked_truly_noisy > 0)
            .then(|| self.noisy_true_positives as f64 / self.rechecked_truly_noisy as f64)
    }

    pub fn merge(&mut self, other: &PromotionReport) {
        self.promoted_clean += other.promoted_clean;
        self.promoted_noisy += other.promoted_noisy;
        self.discarded += other.discarded;
        self.noisy_true_positives += other.noisy_true_positives;
        self.rechecked += other.rechecked;
        self.rechecked_truly_noisy += other.rechecked_truly_noisy;
    }
}

/// Recomputes confidence for every sample pending in the clean/noisy delay
/// partitions with the newer purifier, promotes sign-consistent samples to
/// the replay buffers (when provided), and clears the partitions.
#[allow(clippy::too_many_arguments)]
pub fn recheck_and_promote<R: Rng>(
    new_params: &ModelParams,
    feat: &FeatureConfig,
    pending_clean: &mut BoundedBuffer,
    pending_noisy: &mut BoundedBuffer,
    records: &mut BTreeMap<u64, ConfidenceRecord>,
    mut replays: Option<(&mut BoundedBuffer, &mut BoundedBuffer)>,
    rng: &mut R,
) -> Result<PromotionReport> {
    let mut report = PromotionReport::default();
    let pending: Vec<Sample> = pending_clean
        .items()
        .iter()
        .chain(pending_noisy.items())
        .cloned()
        .collect();
    for s in pending {
        let record = records.get_mut(&s.id).ok_or_else(|| {
            RiclError::InvalidArgument(format!("recheck: no arrival record for sample {}", s.id))
        })?;
        let x = feat.featurize(&s.tokens)?;
        let out = forward(new_params, &x)?;
        let conf_new = confidence(&out.logits, s.y)?;
        record.conf_at_recheck = Some(conf_new);
        report.rechecked += 1;
        if s.is_noisy {
            report.rechecked_truly_noisy += 1;
        }
        match recheck_outcome(record.conf_at_arrival, conf_new) {
            RecheckOutcome::PromoteClean => {
                report.promoted_clean += 1;
                if let Some((r_clean, _)) = replays.as_mut() {
                    r_clean.push(s, rng)?;
                }
            }
            RecheckOutcome::PromoteNoisy => {
                report.promoted_noisy += 1;
                if s.is_noisy {
                    report.noisy_true_positives += 1;
                }
                if let Some((_, r_noisy)) = replays.as_mut() {
                    r_noisy.push(s, rng)?;
                }
            }
            RecheckOutcome::Discard => {
                report.discarded += 1;
            }
        }
    }
    pending_clean.clear();
    pending_noisy.clear();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{generate_synthetic_corpus, inject_noise, partition_tasks, StreamConfig};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_with(id: u64, y: usize, is_noisy: bool, tokens: &[&str]) -> Sample {
        Sample {
            id,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            y_true: y,
            y,
            y_model: None,
            task_id: 0,
            is_noisy,
        }
    }

    #[test]
    fn confidence_margin_examples() {
        assert_eq!(confidence(&[2.0, 1.0, 0.0], 0).unwrap(), 1.0);
        assert_eq!(confidence(&[2.0, 1.0, 0.0], 1).unwrap(), -1.0);
        // Tie at the top: margin 0 routes clean.
        assert_eq!(confidence(&[3.0, 3.0, 0.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn confidence_rejects_degenerate_inputs() {
        assert!(confidence(&[1.0], 0).is_err());
        assert!(confidence(&[1.0, 2.0], 5).is_err());
    }

    #[test]
    fn confidence_sign_matches_argmax_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        for _ in 0..500 {
            let n = rng.gen_range(2..8);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rng.gen_range(0..n);
            let conf = confidence(&logits, y).unwrap();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let is_argmax = logits[y] == max;
            assert_eq!(conf >= 0.0, is_argmax, "logits {logits:?} y {y}");
        }
    }

    #[test]
    fn route_by_margin_sign() {
        // Head bias alone controls the margin for an all-zero hidden layer.
        let mut params = ModelParams::zeros(64, 4, 4, 3);
        let feat = FeatureConfig {
            hash_dim: 64,
            seed: 0,
        };
        params.b2 = vec![1.0, 0.0, 0.0];
        let s = sample_with(1, 0, false, &["a", "b"]);
        let (route, rec) = route_at_arrival(&params, &feat, &s).unwrap();
        assert_eq!(route, ArrivalRoute::Clean);
        assert!(rec.conf_at_arrival > 0.0);

        let s_bad = sample_with(2, 1, true, &["a", "b"]);
        let (route, rec) = route_at_arrival(&params, &feat, &s_bad).unwrap();
        assert_eq!(route, ArrivalRoute::Noisy);
        assert!(rec.conf_at_arrival < 0.0);
    }

    #[test]
    fn zero_purifier_routes_clean_at_boundary() {
        let params = ModelParams::zeros(64, 4, 4, 3);
        let feat = FeatureConfig {
            hash_dim: 64,
            seed: 0,
        };
        let s = sample_with(3, 2, false, &["x"]);
        let (route, rec) = route_at_arrival(&params, &feat, &s).unwrap();
        assert_eq!(rec.conf_at_arrival, 0.0);
        assert_eq!(route, ArrivalRoute::Clean);
    }

    #[test]
    fn recheck_rule_branches() {
        assert_eq!(recheck_outcome(2.0, 0.3), RecheckOutcome::PromoteClean);
        assert_eq!(recheck_outcome(-1.0, -0.1), RecheckOutcome::PromoteNoisy);
        assert_eq!(recheck_outcome(-1.0, 1.0), RecheckOutcome::Discard);
        assert_eq!(recheck_outcome(1.0, -1.0), RecheckOutcome::Discard);
        // Zero counts as clean on both sides.
        assert_eq!(recheck_outcome(0.0, 0.0), RecheckOutcome::PromoteClean);
    }

    #[test]
    fn train_zero_epochs_is_identity() {
        let mut params = ModelParams::init(128, 4, 6, 3, 2);
        let before = params.clone();
        let feat = FeatureConfig {
            hash_dim: 128,
            seed: 0,
        };
        let buffer = vec![sample_with(1, 0, false, &["a", "b"])];
        let cfg = PurifierConfig {
            epochs: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let losses = train_purifier(&mut params, &feat, &buffer, &cfg, &mut rng).unwrap();
        assert!(losses.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn train_rejects_empty_buffer() {
        let mut params = ModelParams::init(128, 4, 6, 3, 2);
        let feat = FeatureConfig {
            hash_dim: 128,
            seed: 0,
        };
        let cfg = PurifierConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(train_purifier(&mut params, &feat, &[], &cfg, &mut rng).is_err());
    }

    fn separable_buffer(n_classes: usize, per_class: usize, noise: f64) -> Vec<Sample> {
        let (corpus, _) =
            generate_synthetic_corpus(n_classes, per_class, 20 * n_classes, 5).unwrap();
        let cfg = StreamConfig {
            num_tasks: 1,
            classes_per_task: n_classes,
            seed: 5,
            ..Default::default()
        };
        let mut tasks = partition_tasks(&corpus, &cfg).unwrap();
        inject_noise(&mut tasks, noise, 5).unwrap();
        tasks.remove(0).samples
    }

    #[test]
    fn train_reduces_loss_and_fits_separable_data() {
        let buffer = separable_buffer(4, 40, 0.0);
        let feat = FeatureConfig {
            hash_dim: 2048,
            seed: 0,
        };
        let mut params = ModelParams::init(2048, 32, 32, 4, 3);
        let cfg = PurifierConfig {
            epochs: 20,
            lr: 0.5,
            gce_q: 0.7,
            batch_size: 16,
        };
        let before = mean_gce(&params, &feat, &buffer, cfg.gce_q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        train_purifier(&mut params, &feat, &buffer, &cfg, &mut rng).unwrap();
        let after = mean_gce(&params, &feat, &buffer, cfg.gce_q).unwrap();
        assert!(after <= before, "loss rose from {before} to {after}");

        // Training accuracy must exceed 95% on the clean separable set.
        let mut correct = 0;
        for s in &buffer {
            let x = feat.featurize(&s.tokens).unwrap();
            let out = forward(&params, &x).unwrap();
            if out.predicted_class() == s.y {
                correct += 1;
            }
        }
        let acc = correct as f64 / buffer.len() as f64;
        assert!(acc > 0.95, "training accuracy {acc} <= 0.95");
    }

    #[test]
    fn recheck_partitions_and_conserves() {
        // Purifier whose bias prefers class 0: samples labeled 0 keep
        // positive margins, everything else keeps negative margins.
        let mut params = ModelParams::zeros(64, 4, 4, 3);
        params.b2 = vec![1.0, 0.0, 0.0];
        let feat = FeatureConfig {
            hash_dim: 64,
            seed: 0,
        };
        let mut pending_clean = BoundedBuffer::new(10);
        let mut pending_noisy = BoundedBuffer::new(10);
        let mut records = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);

        // Arrival records: two consistent-clean, one consistent-noisy, one
        // sign flip (arrived noisy, now clean).
        let arrivals = [
            (1u64, 0usize, 1.0, false),
            (2, 0, 0.5, false),
            (3, 1, -0.5, true),
            (4, 0, -0.2, true),
        ];
        for (id, y, conf, is_noisy) in arrivals {
            let s = sample_with(id, y, is_noisy, &["w"]);
            records.insert(
                id,
                ConfidenceRecord {
                    sample_id: id,
                    conf_at_arrival: conf,
                    conf_at_recheck: None,
                },
            );
            if conf >= 0.0 {
                pending_clean.push(s, &mut rng).unwrap();
            } else {
                pending_noisy.push(s, &mut rng).unwrap();
            }
        }

        let mut r_clean = BoundedBuffer::new(10);
        let mut r_noisy = BoundedBuffer::new(10);
        let report = recheck_and_promote(
            &params,
            &feat,
            &mut pending_clean,
            &mut pending_noisy,
            &mut records,
            Some((&mut r_clean, &mut r_noisy)),
            &mut rng,
        )
        .unwrap();

        assert_eq!(report.promoted_clean, 2);
        assert_eq!(report.promoted_noisy, 1);
        assert_eq!(report.discarded, 1);
        assert_eq!(
            report.promoted_clean + report.promoted_noisy + report.discarded,
            report.rechecked
        );
        assert_eq!(report.noisy_true_positives, 1);
        assert!(pending_clean.is_empty() && pending_noisy.is_empty());
        assert!(r_clean.contains_id(1) && r_clean.contains_id(2));
        assert!(r_noisy.contains_id(3));
        assert!(!r_clean.contains_id(4) && !r_noisy.contains_id(4));
        // Recheck confidences were recorded.
        assert!(records[&1].conf_at_recheck.is_some());
    }
}
