//! Supervised pretraining: batches of (query, dataset, label) samples, the
//! prefix cross-entropy objective, AdamW updates with global-norm clipping,
//! and train/validation tracking with periodic parameter snapshots.
//!
//! Losses are reported per readout (the summed prefix loss divided by the
//! number of trained prefixes) so curves are comparable across context
//! lengths; an untrained model therefore starts at ln(num_actions).
//!
//! Determinism: sample order, in-context shuffles, and gradient reduction
//! are all derived from the config seed and reduced in index order, so a
//! run's parameter trajectory is bit-reproducible regardless of how many
//! worker threads assemble the batches.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{PretrainSample, PretrainSpec};
use crate::model::{prefix_loss, ModelError, ModelState};
use crate::numerics::{clip_global_norm, AdamW, NumericsError, Rng, Tensor};

/// Gradients are rescaled to this global L2 norm when they exceed it.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("sample source is empty")]
    EmptySource,
    #[error(
        "non-finite loss {loss} at step {step}; parameters rolled back to the \
         last snapshot (step {snapshot_step})"
    )]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        snapshot_step: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Hyperparameters and bookkeeping knobs for one pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Passes over the training split. `max_steps`, when set, caps the total
    /// optimizer steps regardless of epochs — the fixed-step-budget mode for
    /// lazily generated sets.
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Leading fraction of the sample indices used for training; the rest is
    /// the validation split. Enumerable task families hand out tasks in
    /// contiguous index blocks, so the validation tail holds out whole tasks.
    pub train_fraction: f64,
    /// Shuffle each sample's in-context rows every epoch (skipped for
    /// order-sensitive dataset kinds, which veto it at the source).
    pub shuffle_in_context: bool,
    pub seed: u64,
    /// Validate (and snapshot parameters) every this many steps.
    pub eval_every: usize,
    /// Cap on how many validation samples are scored per evaluation.
    #[serde(default)]
    pub val_samples: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.eval_every < 1 {
            return Err(TrainError::BadConfig("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where training samples come from. Implementations must hand out the same
/// sample for the same index every time.
pub trait SampleSource: Sync {
    fn len(&self) -> u64;
    fn get(&self, index: u64) -> PretrainSample;
    /// Whether shuffling a sample's dataset rows preserves its meaning.
    fn shuffles_in_context(&self) -> bool {
        true
    }
}

impl SampleSource for PretrainSpec {
    fn len(&self) -> u64 {
        self.num_samples
    }

    fn get(&self, index: u64) -> PretrainSample {
        self.sample(index)
    }

    fn shuffles_in_context(&self) -> bool {
        self.shuffles_for_training()
    }
}

/// A materialized sample set (e.g. read back from a JSONL archive).
pub struct InMemorySamples {
    pub samples: Vec<PretrainSample>,
    /// Set false when the rows came from an order-sensitive source.
    pub shuffle_rows: bool,
}

impl SampleSource for InMemorySamples {
    fn len(&self) -> u64 {
        self.samples.len() as u64
    }

    fn get(&self, index: u64) -> PretrainSample {
        self.samples[index as usize].clone()
    }

    fn shuffles_in_context(&self) -> bool {
        self.shuffle_rows
    }
}

/// One logged step: `train_loss` is the batch's mean per-readout loss
/// (absent on the initial row), `val_loss` the validation mean where
/// evaluated, `seconds` the wall clock since the run started.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

/// The run's full trace.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub steps_run: usize,
    pub final_val_loss: Option<f64>,
    pub wall_seconds: f64,
}

/// Minimizes the mean per-readout prefix loss of `model` over the training
/// split of `source`.
///
/// On a non-finite batch loss the model is rolled back to the last snapshot
/// (taken at every validation point) and [`TrainError::NonFiniteLoss`] is
/// returned; the caller still holds a usable model.
pub fn pretrain(
    model: &mut ModelState,
    source: &dyn SampleSource,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let total = source.len();
    if total == 0 {
        return Err(TrainError::EmptySource);
    }
    let n_train = (((total as f64) * config.train_fraction).floor() as u64).max(1);
    let val_range = n_train..total;
    let shuffle_rows = config.shuffle_in_context && source.shuffles_in_context();

    let sizes: Vec<usize> = model.parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay, &sizes);

    let start = Instant::now();
    let mut report = TrainReport::default();

    let initial_val = validation_loss(model, source, val_range.clone(), config.val_samples)?;
    report.rows.push(TrainRow {
        step: 0,
        train_loss: None,
        val_loss: initial_val,
        seconds: start.elapsed().as_secs_f64(),
    });
    report.final_val_loss = initial_val;

    let mut snapshot = model.clone();
    let mut snapshot_step = 0usize;
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<u64> = (0..n_train).collect();
        Rng::new(config.seed).derive(1).derive(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let per_sample: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|&index| {
                    sample_gradient(model, source, index, epoch, shuffle_rows, config.seed)
                })
                .collect::<Result<_>>()?;

            let batch_loss =
                per_sample.iter().map(|(l, _)| *l).sum::<f64>() / per_sample.len() as f64;
            if !batch_loss.is_finite() {
                *model = snapshot;
                return Err(TrainError::NonFiniteLoss {
                    step: step + 1,
                    loss: batch_loss,
                    snapshot_step,
                });
            }

            // Reduce gradients in sample-index order, then step the
            // optimizer on the extracted parameter tensors.
            let scale = 1.0 / per_sample.len() as f64;
            let mut weights: Vec<Tensor> = model
                .parameters_mut()
                .iter_mut()
                .map(|(_, t)| std::mem::replace(t, Tensor::zeros(&[1])))
                .collect();
            for w in &mut weights {
                w.zero_grad();
            }
            for (_, grads) in &per_sample {
                for (w, g) in weights.iter_mut().zip(grads) {
                    w.accumulate_grad_scaled(g, scale);
                }
            }
            clip_global_norm(&mut weights, GRAD_CLIP_NORM);
            optimizer.step(&mut weights);
            for ((_, slot), w) in model.parameters_mut().iter_mut().zip(weights) {
                *slot = w;
            }

            step += 1;
            let mut row = TrainRow {
                step,
                train_loss: Some(batch_loss),
                val_loss: None,
                seconds: start.elapsed().as_secs_f64(),
            };
            if step % config.eval_every == 0 {
                let val = validation_loss(model, source, val_range.clone(), config.val_samples)?;
                if val.is_some() {
                    row.val_loss = val;
                    report.final_val_loss = val;
                }
                snapshot = model.clone();
                snapshot_step = step;
                row.seconds = start.elapsed().as_secs_f64();
            }
            report.rows.push(row);

            if config.max_steps.is_some_and(|cap| step >= cap) {
                break 'epochs;
            }
        }
    }

    if step > 0 && report.rows.last().is_some_and(|r| r.val_loss.is_none()) {
        let val = validation_loss(model, source, val_range, config.val_samples)?;
        if val.is_some() {
            let last = report.rows.last_mut().expect("at least the initial row");
            last.val_loss = val;
            last.seconds = start.elapsed().as_secs_f64();
            report.final_val_loss = val;
        }
    }

    report.steps_run = step;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean per-readout prefix loss over (a cap-limited prefix of) the validation
/// index range; `None` when the range is empty.
pub fn validation_loss(
    model: &ModelState,
    source: &dyn SampleSource,
    val_range: std::ops::Range<u64>,
    cap: Option<u64>,
) -> Result<Option<f64>> {
    let end = match cap {
        Some(cap) => val_range.end.min(val_range.start.saturating_add(cap)),
        None => val_range.end,
    };
    if end <= val_range.start {
        return Ok(None);
    }
    let losses: Vec<f64> = (val_range.start..end)
        .into_par_iter()
        .map(|index| -> Result<f64> {
            let sample = source.get(index);
            let seq = model.config().build_sequence(
                &sample.query,
                &sample.dataset,
                sample.history.as_deref(),
            )?;
            let predictions = model.predict_prefixes(&seq)?;
            let readouts = trained_readouts(model, seq.num_context());
            Ok(prefix_loss(
                &predictions,
                sample.label,
                model.config().include_prefix_zero,
            ) / readouts as f64)
        })
        .collect::<Result<_>>()?;
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

fn trained_readouts(model: &ModelState, num_context: usize) -> usize {
    let readouts = num_context + usize::from(model.config().include_prefix_zero);
    readouts.max(1)
}

fn sample_gradient(
    model: &ModelState,
    source: &dyn SampleSource,
    index: u64,
    epoch: usize,
    shuffle_rows: bool,
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut sample = source.get(index);
    if shuffle_rows && sample.dataset.len() > 1 {
        Rng::new(seed)
            .derive(2)
            .derive(epoch as u64)
            .derive(index)
            .shuffle(&mut sample.dataset);
    }
    let seq = model.config().build_sequence(
        &sample.query,
        &sample.dataset,
        sample.history.as_deref(),
    )?;
    let readouts = trained_readouts(model, seq.num_context());

    let mut tape = crate::numerics::Tape::new();
    let bound = model.bind(&mut tape);
    let summed = model.loss_node(&mut tape, &bound, &seq, sample.label)?;
    let loss = tape.scale(summed, 1.0 / readouts as f64);
    tape.backward(loss)?;
    let value = tape.values(loss)[0];
    let grads = bound
        .iter()
        .map(|&id| tape.grad(id).expect("bound parameters are watched").to_vec())
        .collect();
    Ok((value, grads))
}

/// Writes the report as CSV with header `step,train_loss,val_loss,seconds`;
/// absent losses become empty cells. All numeric cells except `seconds` are
/// deterministic for a given config and source.
pub fn write_train_csv(report: &TrainReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,train_loss,val_loss,seconds")?;
    for row in &report.rows {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{:.3}",
            row.step,
            fmt(row.train_loss),
            fmt(row.val_loss),
            row.seconds
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatasetKind, TaskFamilyConfig};
    use crate::environments::{BanditTask, RewardNoise, State, Task};
    use crate::model::{ModelConfig, StateEncoding};

    fn tiny_model(embed: usize, layers: usize, actions: usize, max_context: usize) -> ModelState {
        let config = ModelConfig {
            state_dim: 1,
            action_dim: actions,
            embed_dim: embed,
            n_layers: layers,
            n_heads: 2,
            max_context,
            include_prefix_zero: true,
            state_encoding: StateEncoding::Unit,
            with_history: false,
        };
        ModelState::new(config, &Rng::new(5)).unwrap()
    }

    fn bernoulli_task(means: Vec<f64>) -> Task {
        Task::Bandit(BanditTask {
            means,
            noise: RewardNoise::Bernoulli,
            linear: None,
        })
    }

    fn two_task_spec(num_samples: u64, seed: u64) -> PretrainSpec {
        PretrainSpec {
            family: TaskFamilyConfig::Finite {
                tasks: vec![
                    bernoulli_task(vec![0.9, 0.1]),
                    bernoulli_task(vec![0.1, 0.9]),
                ],
            },
            kind: DatasetKind::EnvUniformSa,
            num_samples,
            context_length: 8,
            with_history: false,
            seed,
        }
    }

    fn base_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 1,
            max_steps: None,
            train_fraction: 0.75,
            shuffle_in_context: true,
            seed,
            eval_every: 50,
            val_samples: None,
        }
    }

    fn parameter_bits(model: &ModelState) -> Vec<Vec<u64>> {
        model
            .parameters()
            .iter()
            .map(|(_, t)| t.values().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn config_validation_rejects_degenerate_fields() {
        let mut config = base_config(1);
        config.batch_size = 0;
        assert!(config.validate().is_err());
        let mut config = base_config(1);
        config.train_fraction = 1.0;
        assert!(config.validate().is_err());
        let mut config = base_config(1);
        config.learning_rate = 0.0;
        assert!(config.validate().is_err());
        let mut config = base_config(1);
        config.eval_every = 0;
        assert!(config.validate().is_err());
        assert!(base_config(1).validate().is_ok());
    }

    #[test]
    fn zero_epochs_change_nothing_and_report_only_the_initial_validation() {
        let mut model = tiny_model(8, 1, 2, 8);
        let before = parameter_bits(&model);
        let spec = two_task_spec(64, 3);
        let mut config = base_config(4);
        config.epochs = 0;
        let report = pretrain(&mut model, &spec, &config).unwrap();
        assert_eq!(parameter_bits(&model), before);
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].step, 0);
        assert!(report.rows[0].train_loss.is_none());
        assert!(report.rows[0].val_loss.is_some());
        assert_eq!(report.steps_run, 0);
    }

    #[test]
    fn an_untrained_model_scores_ln_k_per_readout() {
        let model = tiny_model(8, 1, 5, 6);
        let spec = PretrainSpec {
            family: TaskFamilyConfig::GaussianBandit {
                num_arms: 5,
                sigma: 0.3,
            },
            kind: DatasetKind::DirichletMix,
            num_samples: 40,
            context_length: 6,
            with_history: false,
            seed: 6,
        };
        let val = validation_loss(&model, &spec, 0..40, None).unwrap().unwrap();
        // Zeroed head => exactly uniform predictions at every prefix.
        assert!(
            (val - 5.0f64.ln()).abs() < 1e-12,
            "untrained per-readout loss {val} should equal ln 5"
        );
    }

    #[test]
    fn a_point_mass_family_trains_to_near_zero_loss() {
        // One task with deterministic Bernoulli rewards: the optimal arm is
        // constant, so the target conditional is a point mass and the loss
        // floor is zero.
        let spec = PretrainSpec {
            family: TaskFamilyConfig::Finite {
                tasks: vec![bernoulli_task(vec![1.0, 0.0])],
            },
            kind: DatasetKind::EnvUniformSa,
            num_samples: 256,
            context_length: 6,
            with_history: false,
            seed: 7,
        };
        let mut model = tiny_model(16, 2, 2, 6);
        let mut config = base_config(8);
        config.epochs = 40;
        config.max_steps = Some(2000);
        config.eval_every = 100;
        let report = pretrain(&mut model, &spec, &config).unwrap();
        let final_val = report.final_val_loss.unwrap();
        assert!(
            final_val < 0.05,
            "validation loss {final_val} should fall below 0.05 nats"
        );
        // The deployed policy picks the constant optimal arm.
        let sample = spec.sample(0);
        assert_eq!(
            model.act_offline(&State::Unit, &sample.dataset).unwrap(),
            0
        );
    }

    #[test]
    fn training_losses_fall_on_a_two_task_family() {
        let spec = two_task_spec(512, 9);
        let mut model = tiny_model(16, 2, 2, 8);
        let mut config = base_config(10);
        config.epochs = 12;
        let report = pretrain(&mut model, &spec, &config).unwrap();

        let losses: Vec<f64> = report.rows.iter().filter_map(|r| r.train_loss).collect();
        assert!(losses.len() > 40);
        let first = losses[0];
        let tail = &losses[losses.len() - 20..];
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            tail_mean < 0.95 * first,
            "trailing mean {tail_mean} should undercut the first batch loss {first}"
        );
        // The two tasks are symmetric and identifiable from a few rows, so a
        // converging model beats the uniform-guess floor of ln 2.
        assert!(tail_mean < 2.0f64.ln());

        // Round-trip the trained weights and check bit-identical deployment.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let restored = ModelState::load(&path).unwrap();
        let sample = spec.sample(500);
        let a = model
            .action_distribution(&sample.query, &sample.dataset, None)
            .unwrap();
        let b = restored
            .action_distribution(&sample.query, &sample.dataset, None)
            .unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let spec = two_task_spec(128, 11);
        let mut config = base_config(12);
        config.max_steps = Some(5);
        config.epochs = 1;

        let mut model_a = tiny_model(8, 1, 2, 8);
        let mut model_b = model_a.clone();
        let report_a = pretrain(&mut model_a, &spec, &config).unwrap();
        let report_b = pretrain(&mut model_b, &spec, &config).unwrap();

        assert_eq!(parameter_bits(&model_a), parameter_bits(&model_b));
        let losses = |r: &TrainReport| {
            r.rows
                .iter()
                .filter_map(|row| row.train_loss.map(f64::to_bits))
                .collect::<Vec<_>>()
        };
        assert_eq!(losses(&report_a), losses(&report_b));
    }

    #[test]
    fn row_shuffling_resamples_prefixes_but_not_the_full_context_prediction() {
        // Shuffling decides which rows land in each readout's prefix, so it
        // changes the supervision at intermediate prefixes; the deployed
        // (full-context) prediction treats the rows as a set and must not
        // move at all.
        let spec = PretrainSpec {
            family: TaskFamilyConfig::GaussianBandit {
                num_arms: 3,
                sigma: 0.3,
            },
            kind: DatasetKind::DirichletMix,
            num_samples: 64,
            context_length: 6,
            with_history: false,
            seed: 13,
        };
        // Give the readout head real weights so every prefix contributes a
        // distinct loss term (the zero-initialized head predicts uniformly
        // regardless of context, which would mask the difference).
        let mut model = tiny_model(8, 1, 3, 6);
        let mut head_rng = Rng::new(99);
        for (name, tensor) in model.parameters_mut() {
            if name.starts_with("head.") {
                for w in tensor.values_mut() {
                    *w = 0.3 * head_rng.normal();
                }
            }
        }

        let (loss_shuffled, _) = sample_gradient(&model, &spec, 0, 0, true, 14).unwrap();
        let (loss_ordered, _) = sample_gradient(&model, &spec, 0, 0, false, 14).unwrap();
        assert_ne!(
            loss_shuffled.to_bits(),
            loss_ordered.to_bits(),
            "permuting rows must change which prefixes see which rows"
        );

        let sample = spec.sample(0);
        let mut permuted = sample.dataset.clone();
        permuted.reverse();
        let a = model
            .action_distribution(&sample.query, &sample.dataset, None)
            .unwrap();
        let b = model.action_distribution(&sample.query, &permuted, None).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn doubling_the_sample_budget_does_not_hurt_held_out_loss() {
        // Paired comparison on a common probe set so the check is not
        // dominated by validation-sampling noise.
        let probe = two_task_spec(512, 1000);
        let mut deltas = Vec::new();
        for seed in 0..3u64 {
            let mut probe_losses = Vec::new();
            for n in [128u64, 256] {
                let spec = two_task_spec(n, 20 + seed);
                let mut model = tiny_model(8, 1, 2, 8);
                let mut config = base_config(30 + seed);
                config.max_steps = Some(300);
                config.epochs = 100;
                pretrain(&mut model, &spec, &config).unwrap();
                let loss = validation_loss(&model, &probe, 0..512, None)
                    .unwrap()
                    .unwrap();
                probe_losses.push(loss);
            }
            deltas.push(probe_losses[1] - probe_losses[0]);
        }
        deltas.sort_by(f64::total_cmp);
        assert!(
            deltas[1] <= 0.03,
            "doubling the sample budget should not hurt held-out loss \
             beyond noise; paired deltas {deltas:?}"
        );
    }

    #[test]
    fn exploding_steps_roll_back_to_the_last_snapshot() {
        let spec = two_task_spec(64, 15);
        let mut model = tiny_model(8, 1, 2, 8);
        let before = parameter_bits(&model);
        let mut config = base_config(16);
        config.learning_rate = 1e200;
        config.epochs = 5;
        config.eval_every = 1000;
        let err = pretrain(&mut model, &spec, &config).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step, snapshot_step, .. } => {
                assert!(step >= 2, "the first step still sees finite weights");
                assert_eq!(snapshot_step, 0);
            }
            other => panic!("expected a non-finite-loss abort, got {other}"),
        }
        assert_eq!(
            parameter_bits(&model),
            before,
            "model must roll back to the initial snapshot"
        );
    }

    #[test]
    fn max_steps_caps_the_run_exactly() {
        let spec = two_task_spec(128, 17);
        let mut model = tiny_model(8, 1, 2, 8);
        let mut config = base_config(18);
        config.epochs = 100;
        config.max_steps = Some(3);
        let report = pretrain(&mut model, &spec, &config).unwrap();
        assert_eq!(report.steps_run, 3);
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows.last().unwrap().val_loss.is_some());
    }

    #[test]
    fn validation_cap_scores_exactly_the_leading_samples() {
        let spec = two_task_spec(64, 19);
        let model = tiny_model(8, 1, 2, 8);
        let capped = validation_loss(&model, &spec, 48..64, Some(8))
            .unwrap()
            .unwrap();
        let manual = validation_loss(&model, &spec, 48..56, None).unwrap().unwrap();
        assert_eq!(capped.to_bits(), manual.to_bits());
        assert!(validation_loss(&model, &spec, 64..64, None).unwrap().is_none());
    }

    #[test]
    fn train_csv_has_the_documented_shape() {
        let report = TrainReport {
            rows: vec![
                TrainRow {
                    step: 0,
                    train_loss: None,
                    val_loss: Some(1.5),
                    seconds: 0.1,
                },
                TrainRow {
                    step: 1,
                    train_loss: Some(1.25),
                    val_loss: None,
                    seconds: 0.2,
                },
            ],
            steps_run: 1,
            final_val_loss: Some(1.5),
            wall_seconds: 0.2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        write_train_csv(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,train_loss,val_loss,seconds");
        assert_eq!(lines[1], "0,,1.5,0.100");
        assert_eq!(lines[2], "1,1.25,,0.200");
    }
}
