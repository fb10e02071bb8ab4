//! Staged training loop, checkpointing, and inference.
//!
//! Every training batch runs the same update order:
//!
//! 1. forward pass over the noisy minibatch producing per-sample losses;
//! 2. re-weighting-net update on a clean minibatch (main nets frozen);
//! 3. prediction heads step with sample weights from the re-weighting net;
//! 4. projected per-sample overparameter step;
//! 5. encoder step.
//!
//! The per-batch update order is recorded in a trace so tests can assert
//! the staging. All randomness (shuffling, clean sampling, dropout) is
//! derived from `(seed, epoch, batch)` streams, which makes checkpoint
//! resume bit-identical to an uninterrupted run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EventSequence};
use crate::error::{Error, Result};
use crate::losses::{
    cce_loss_vec, combined_loss, gce_loss_vec, time_loss_vec, OverParamEntry, OverParams,
    ReweightNet, SampleKey, REWEIGHT_HIDDEN,
};
use crate::metrics::{macro_f1, rmse, IntensityTrace};
use crate::model::{HawkesNet, ModelConfig};
use crate::rng;
use crate::tensor::optim::{clip_global_norm, Adam, AdamState};
use crate::tensor::store::TensorStore;
use crate::tensor::{concat, Tensor};

const SALT_MODEL: u64 = 1;
const SALT_REWEIGHT: u64 = 2;
const SALT_OVERPARAM: u64 = 3;
const SALT_SHUFFLE: u64 = 4;
const SALT_CLEAN: u64 = 5;
const SALT_DROPOUT: u64 = 6;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Base learning rate tau.
    pub lr: f64,
    /// Overparameter learning-rate multipliers; effective rate is
    /// `tau_m * lr` (resp. `tau_n * lr`).
    pub tau_m: f64,
    pub tau_n: f64,
    pub epochs: usize,
    pub gce_beta: f64,
    pub clean_batch_size: usize,
    pub seed: u64,
    pub use_gce: bool,
    pub use_overparam: bool,
    pub use_reweight: bool,
    /// Epochs of plain cross-entropy before the generalized loss takes
    /// over. The bounded robust gradient cannot recover from confidently
    /// wrong early states, so the run starts in the fast-converging limit.
    pub gce_warmup_epochs: usize,
    pub grad_clip: f64,
    pub reweight_hidden: usize,
    /// Learning rate of the re-weighting net's plain-gradient update. Its
    /// drift sets how fast sample weights specialize; the step size tracks
    /// the loss magnitude, so weight variation settles as the model fits.
    pub reweight_lr: f64,
    /// Relative weight decay of the re-weighting net toward its
    /// initialization (uniform 0.5 weights). Balances the one-directional
    /// pressure of the clean objective, so the sample-weight tilt reaches a
    /// stationary point instead of saturating the sigmoid.
    pub reweight_decay: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-3,
            tau_m: 10.0,
            tau_n: 10.0,
            epochs: 30,
            gce_beta: 0.7,
            clean_batch_size: 16,
            seed: 0,
            use_gce: true,
            use_overparam: true,
            use_reweight: true,
            gce_warmup_epochs: 8,
            grad_clip: 5.0,
            reweight_hidden: REWEIGHT_HIDDEN,
            reweight_lr: 1e-3,
            reweight_decay: 10.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The non-robust ablation: plain cross-entropy, plain absolute-error
    /// time loss, no re-weighting.
    pub fn ablation(mut self) -> Self {
        self.use_gce = false;
        self.use_overparam = false;
        self.use_reweight = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.clean_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.tau_m >= 0.0) || !(self.tau_n >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.gce_beta > 0.0 && self.gce_beta <= 1.0) {
            return Err(Error::Config(format!(
                "gce_beta {} outside (0, 1]",
                self.gce_beta
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.model.validate()
    }
}

/// One epoch's history row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_v: f64,
    pub train_loss_t: f64,
    pub sigma_v_mean: f64,
    pub sigma_t_mean: f64,
    pub val_f1: f64,
    pub val_rmse: f64,
}

/// `|delta sigma|` between consecutive epochs: the weight-variation series.
pub fn sigma_delta_series(history: &[EpochRecord]) -> Vec<f64> {
    history
        .windows(2)
        .map(|w| {
            (w[1].sigma_v_mean - w[0].sigma_v_mean).abs()
                + (w[1].sigma_t_mean - w[0].sigma_t_mean).abs()
        })
        .collect()
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out =
        String::from("epoch,train_loss_v,train_loss_t,sigma_v_mean,sigma_t_mean,val_f1,val_rmse\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss_v,
            r.train_loss_t,
            r.sigma_v_mean,
            r.sigma_t_mean,
            r.val_f1,
            r.val_rmse
        ));
    }
    out
}

/// Serializable training snapshot. `over_params` and optimizer moments are
/// training-only state; inference checkpoints drop them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub max_gap: f64,
    pub model: TensorStore,
    pub reweight: TensorStore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub over_params: Option<Vec<OverParamEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimState>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimState {
    pub heads: AdamState,
    pub encoder: AdamState,
}

impl Checkpoint {
    /// Inference form: overparameters and optimizer moments removed.
    pub fn strip_training_state(mut self) -> Checkpoint {
        self.over_params = None;
        self.optim = None;
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let w = std::io::BufWriter::new(file);
        serde_json::to_writer(w, self).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let r = std::io::BufReader::new(file);
        let ckpt: Checkpoint = serde_json::from_reader(r).map_err(|e| Error::MalformedInput {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

/// Everything a training run owns.
pub struct TrainState {
    pub config: TrainConfig,
    pub model: HawkesNet,
    pub reweight: ReweightNet,
    pub over_params: OverParams,
    pub max_gap: f64,
    pub epoch: usize,
    adam_heads: Adam,
    adam_encoder: Adam,
    /// Update order of the most recent batch, for staging assertions.
    pub last_update_trace: Vec<&'static str>,
    /// Number of batches whose gradient norm exceeded the clip cap.
    pub clip_events: usize,
}

/// Per-batch tensors for all prefix samples of a set of sequences.
struct BatchData {
    logits: Tensor,
    time_pred: Tensor,
    mark_targets: Vec<usize>,
    /// (N, 1) normalized gap targets in [0, 1].
    gap_targets: Tensor,
    keys: Vec<SampleKey>,
}

/// Dropout stream for one (epoch, batch); shared by the reference-loop
/// equality tests.
pub fn batch_dropout_rng(seed: u64, epoch: usize, batch_idx: usize) -> ChaCha8Rng {
    rng::stream(seed, &[SALT_DROPOUT, epoch as u64, batch_idx as u64])
}

/// (N, 2) re-weighting-net input: detached per-sample losses, each column
/// scaled by its batch mean. Relative losses keep the net's input
/// distribution stationary while the absolute loss scale moves over
/// training.
fn relative_loss_pairs(loss_v: &Tensor, loss_t: &Tensor) -> Result<Tensor> {
    let mean = |t: &Tensor| t.values().iter().sum::<f64>() / t.len() as f64;
    let lv = loss_v.detach();
    let lt = loss_t.detach();
    let mv = mean(&lv).max(1e-12);
    let mt = mean(&lt).max(1e-12);
    concat(&[&lv.scale(1.0 / mv), &lt.scale(1.0 / mt)], 1)
}

impl TrainState {
    pub fn new(config: TrainConfig, max_gap: f64) -> Result<TrainState> {
        config.validate()?;
        if !(max_gap > 0.0) {
            return Err(Error::Config(format!(
                "max_gap must be positive, got {max_gap}"
            )));
        }
        let mut model_rng = rng::stream(config.seed, &[SALT_MODEL]);
        let model = HawkesNet::new(&config.model, &mut model_rng)?;
        let mut rw_rng = rng::stream(config.seed, &[SALT_REWEIGHT]);
        let reweight = ReweightNet::new(config.reweight_hidden, &mut rw_rng)?;
        let mut heads_params = model.event_head_params();
        heads_params.extend(model.time_head_params());
        let adam_heads = Adam::new(heads_params, config.lr);
        let adam_encoder = Adam::new(model.encoder_params(), config.lr);
        Ok(TrainState {
            config,
            model,
            reweight,
            over_params: OverParams::default(),
            max_gap,
            epoch: 0,
            adam_heads,
            adam_encoder,
            last_update_trace: Vec::new(),
            clip_events: 0,
        })
    }

    /// Initialize overparameters for every prediction target of the
    /// training set.
    pub fn init_over_params(&mut self, train: &Dataset) {
        let mut rng = rng::stream(self.config.seed, &[SALT_OVERPARAM]);
        self.over_params = OverParams::init(train, &mut rng);
    }

    fn model_params(&self) -> Vec<Tensor> {
        let mut p = self.model.encoder_params();
        p.extend(self.model.event_head_params());
        p.extend(self.model.time_head_params());
        p
    }

    /// Forward all prefix positions of `seqs`, concatenated into one batch.
    /// Sequences shorter than 2 events contribute nothing.
    fn forward_batch(
        &self,
        seqs: &[&EventSequence],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<BatchData>> {
        let mut logit_parts = Vec::new();
        let mut time_parts = Vec::new();
        let mut mark_targets = Vec::new();
        let mut gap_values = Vec::new();
        let mut keys = Vec::new();
        for seq in seqs {
            let l = seq.len();
            if l < 2 {
                continue;
            }
            let fwd = self.model.forward(seq, dropout_rng.as_deref_mut())?;
            logit_parts.push(fwd.logits.slice_axis(0, 0, l - 1)?);
            time_parts.push(fwd.time_pred.slice_axis(0, 0, l - 1)?);
            for pos in 0..l - 1 {
                mark_targets.push(seq.events[pos + 1].mark);
                let gap = seq.events[pos + 1].time - seq.events[pos].time;
                gap_values.push((gap / self.max_gap).clamp(0.0, 1.0));
                keys.push((seq.id.clone(), pos));
            }
        }
        if keys.is_empty() {
            return Ok(None);
        }
        let logit_refs: Vec<&Tensor> = logit_parts.iter().collect();
        let time_refs: Vec<&Tensor> = time_parts.iter().collect();
        let n = keys.len();
        Ok(Some(BatchData {
            logits: concat(&logit_refs, 0)?,
            time_pred: concat(&time_refs, 0)?,
            mark_targets,
            gap_targets: Tensor::from_vec(vec![n, 1], gap_values)?,
            keys,
        }))
    }

    fn event_loss(&self, batch: &BatchData) -> Result<Tensor> {
        if self.config.use_gce && self.epoch >= self.config.gce_warmup_epochs {
            gce_loss_vec(&batch.logits, &batch.mark_targets, self.config.gce_beta)
        } else {
            cce_loss_vec(&batch.logits, &batch.mark_targets)
        }
    }

    /// Time loss with the overparameterized residual attached when enabled.
    /// Returns the loss vector plus the batch (m, n) tensors for the
    /// projected update.
    fn time_loss(&self, batch: &BatchData) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
        if self.config.use_overparam {
            let (m, n) = self.over_params.batch_tensors(&batch.keys)?;
            let one_minus_t = batch.gap_targets.neg().add_scalar(1.0);
            let p = m
                .mul(&m)?
                .mul(&batch.gap_targets)?
                .sub(&n.mul(&n)?.mul(&one_minus_t)?)?;
            let loss = time_loss_vec(&batch.time_pred, Some(&p), &batch.gap_targets)?;
            Ok((loss, Some((m, n))))
        } else {
            let loss = time_loss_vec(&batch.time_pred, None, &batch.gap_targets)?;
            Ok((loss, None))
        }
    }

    /// Algorithm stage: update the re-weighting net on one clean minibatch
    /// with the main networks frozen, by minimizing the weighted clean loss.
    fn reweight_step(&mut self, clean: &Dataset, epoch: usize, batch_idx: usize) -> Result<()> {
        let mut order: Vec<usize> = (0..clean.len()).collect();
        let mut pick_rng = rng::stream(
            self.config.seed,
            &[SALT_CLEAN, epoch as u64, batch_idx as u64],
        );
        order.shuffle(&mut pick_rng);
        order.truncate(self.config.clean_batch_size);
        let seqs: Vec<&EventSequence> = order.iter().map(|&i| &clean.sequences[i]).collect();
        // Main nets run in eval mode here; their parameters are frozen for
        // this stage, so no tape is needed on their side.
        let Some(batch) = self.forward_batch(&seqs, None)? else {
            return Ok(());
        };
        let loss_v = self.event_loss(&batch)?.detach();
        // Clean samples carry no overparameters: the plain time loss.
        let loss_t = time_loss_vec(&batch.time_pred, None, &batch.gap_targets)?.detach();
        let pairs = relative_loss_pairs(&loss_v, &loss_t)?;
        let sigma = self.reweight.forward(&pairs)?;
        let sigma_v = sigma.slice_axis(1, 0, 1)?;
        let sigma_t = sigma.slice_axis(1, 1, 2)?;
        let clean_objective = combined_loss(&loss_v, &loss_t, &sigma_v, &sigma_t)?;
        let params = self.reweight.params();
        for p in &params {
            p.zero_grad();
        }
        clean_objective.backward()?;
        // Decay applies to the zero-initialized output layer only (the
        // last two parameters), pulling the weight map back toward the
        // uniform 0.5 it started from; the hidden layer keeps its scale.
        let shrink = 1.0 - self.config.reweight_lr * self.config.reweight_decay;
        let decay_from = params.len().saturating_sub(2);
        for (i, p) in params.iter().enumerate() {
            if let Some(grad) = p.grad() {
                let keep = if i >= decay_from { shrink } else { 1.0 };
                let mut vals = p.values();
                for (v, g) in vals.iter_mut().zip(&grad) {
                    *v = keep * *v - self.config.reweight_lr * g;
                }
                p.set_values(&vals);
            }
            p.zero_grad();
        }
        Ok(())
    }

    /// One full staged update on a noisy minibatch. Returns per-batch means
    /// (loss_v, loss_t, sigma_v, sigma_t) weighted by sample count, or None
    /// for a batch with no usable samples.
    pub fn train_batch(
        &mut self,
        seqs: &[&EventSequence],
        clean: &Dataset,
        epoch: usize,
        batch_idx: usize,
    ) -> Result<Option<(f64, f64, f64, f64, usize)>> {
        self.last_update_trace.clear();

        let mut dropout_rng = batch_dropout_rng(self.config.seed, epoch, batch_idx);
        let Some(batch) = self.forward_batch(seqs, Some(&mut dropout_rng))? else {
            return Ok(None);
        };
        let n = batch.keys.len();

        let loss_v = self.event_loss(&batch)?;
        let (loss_t, over_tensors) = self.time_loss(&batch)?;

        // Stage: re-weighting net on clean data, before its weights are
        // consumed below.
        let (sigma_v, sigma_t, raw_sigma_v, raw_sigma_t) = if self.config.use_reweight {
            self.reweight_step(clean, epoch, batch_idx)?;
            self.last_update_trace.push("reweight");
            let pairs = relative_loss_pairs(&loss_v, &loss_t)?;
            let sigma = self.reweight.forward(&pairs)?.detach();
            let raw_v = sigma.slice_axis(1, 0, 1)?;
            let raw_t = sigma.slice_axis(1, 1, 2)?;
            // Applied weights are rescaled to batch mean 1 per task and
            // winsorized into [0.2, 5]: the per-sample tilt (the
            // noise-filtering signal) is preserved, while the raw sigmoid
            // scale, which decays toward zero under the alternating update,
            // can neither stall the model, starve one task, nor collapse
            // training onto a handful of low-loss samples.
            let mean = |t: &Tensor| t.values().iter().sum::<f64>() / t.len() as f64;
            let scale_v = mean(&raw_v).max(1e-12);
            let scale_t = mean(&raw_t).max(1e-12);
            (
                raw_v.scale(1.0 / scale_v).clamp(0.5, 2.0),
                raw_t.scale(1.0 / scale_t).clamp(0.5, 2.0),
                raw_v,
                raw_t,
            )
        } else {
            let ones = Tensor::from_vec(vec![n, 1], vec![1.0; n])?;
            (ones.clone(), ones.clone(), ones.clone(), ones)
        };

        let objective = combined_loss(&loss_v, &loss_t, &sigma_v, &sigma_t)?;
        let objective_value = objective.item();
        if !objective_value.is_finite() {
            let ids: Vec<&str> = seqs.iter().map(|s| s.id.as_str()).collect();
            return Err(Error::TrainAbort(format!(
                "non-finite loss {objective_value} at epoch {epoch} batch {batch_idx}; \
                 sequences {ids:?}; loss_v head {:?}; loss_t head {:?}",
                &loss_v.values()[..loss_v.len().min(4)],
                &loss_t.values()[..loss_t.len().min(4)],
            )));
        }

        let params = self.model_params();
        for p in &params {
            p.zero_grad();
        }
        objective.backward()?;
        let norm = clip_global_norm(&params, self.config.grad_clip);
        if norm > self.config.grad_clip {
            self.clip_events += 1;
        }

        // Stage 1: prediction heads.
        self.adam_heads.step();
        self.last_update_trace.push("heads");
        // Stage 2: projected overparameter step.
        if let Some((m, n_t)) = &over_tensors {
            self.over_params.apply_update(
                &batch.keys,
                m,
                n_t,
                self.config.tau_m * self.config.lr,
                self.config.tau_n * self.config.lr,
            );
            self.last_update_trace.push("overparams");
        }
        // Stage 3: encoder.
        self.adam_encoder.step();
        self.last_update_trace.push("encoder");
        for p in &params {
            p.zero_grad();
        }

        let mean = |t: &Tensor| t.values().iter().sum::<f64>() / t.len() as f64;
        Ok(Some((
            mean(&loss_v),
            mean(&loss_t),
            mean(&raw_sigma_v),
            mean(&raw_sigma_t),
            n,
        )))
    }

    /// One pass over the training set in seeded shuffled order.
    pub fn train_epoch(&mut self, train: &Dataset, clean: &Dataset) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training set is empty".into()));
        }
        if self.config.use_reweight && clean.is_empty() {
            return Err(Error::Config(
                "re-weighting enabled but the clean set is empty".into(),
            ));
        }
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::stream(self.config.seed, &[SALT_SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut count = 0usize;
        for (batch_idx, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let seqs: Vec<&EventSequence> = chunk.iter().map(|&i| &train.sequences[i]).collect();
            if let Some((lv, lt, sv, st, n)) = self.train_batch(&seqs, clean, epoch, batch_idx)? {
                sums.0 += lv * n as f64;
                sums.1 += lt * n as f64;
                sums.2 += sv * n as f64;
                sums.3 += st * n as f64;
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::EmptyDataset(
                "no trainable samples (all sequences shorter than 2 events)".into(),
            ));
        }
        self.epoch += 1;
        let c = count as f64;
        Ok(EpochStats {
            loss_v: sums.0 / c,
            loss_t: sums.1 / c,
            sigma_v: sums.2 / c,
            sigma_t: sums.3 / c,
            samples: count,
        })
    }

    pub fn to_checkpoint(&self, include_training_state: bool) -> Checkpoint {
        let mut model_store = TensorStore::new();
        for (name, t) in self.model.named_params() {
            model_store.insert(name, &t);
        }
        let mut rw_store = TensorStore::new();
        for (name, t) in self.reweight.named_params("reweight") {
            rw_store.insert(name, &t);
        }
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            max_gap: self.max_gap,
            model: model_store,
            reweight: rw_store,
            over_params: Some(self.over_params.to_entries()),
            optim: Some(OptimState {
                heads: self.adam_heads.state(),
                encoder: self.adam_encoder.state(),
            }),
        };
        if include_training_state {
            ckpt
        } else {
            ckpt.strip_training_state()
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
        let mut state = TrainState::new(ckpt.config.clone(), ckpt.max_gap)?;
        state.epoch = ckpt.epoch;
        for (name, t) in state.model.named_params() {
            ckpt.model.load_into(&name, &t)?;
        }
        for (name, t) in state.reweight.named_params("reweight") {
            ckpt.reweight.load_into(&name, &t)?;
        }
        if let Some(entries) = &ckpt.over_params {
            state.over_params = OverParams::from_entries(entries.clone());
        }
        if let Some(optim) = &ckpt.optim {
            state.adam_heads.load_state(optim.heads.clone());
            state.adam_encoder.load_state(optim.encoder.clone());
        }
        Ok(state)
    }

    /// Greedy next-event prediction from the last position of `seq`.
    /// Overparameters are never consulted.
    pub fn predict_next(&self, seq: &EventSequence) -> Result<(usize, f64)> {
        if seq.is_empty() {
            return Err(Error::Domain("predict_next on empty sequence".into()));
        }
        let fwd = self.model.forward(seq, None)?;
        let l = seq.len();
        let k = self.config.model.num_types;
        let logits = fwd.logits.values();
        let row = &logits[(l - 1) * k..l * k];
        let mark = argmax(row);
        let gap_norm = fwd.time_pred.values()[l - 1];
        let gap = (gap_norm * self.max_gap).max(0.0);
        Ok((mark, seq.events[l - 1].time + gap))
    }

    /// Score every prefix position of every sequence: macro F1 over
    /// next-mark predictions and RMSE over denormalized next-gap estimates.
    pub fn evaluate(&self, data: &Dataset) -> Result<EvalOutcome> {
        let k = self.config.model.num_types;
        let mut pred_marks = Vec::new();
        let mut true_marks = Vec::new();
        let mut pred_gaps = Vec::new();
        let mut true_gaps = Vec::new();
        for seq in &data.sequences {
            let l = seq.len();
            if l < 2 {
                continue;
            }
            let fwd = self.model.forward(seq, None)?;
            let logits = fwd.logits.values();
            let times = fwd.time_pred.values();
            for pos in 0..l - 1 {
                pred_marks.push(argmax(&logits[pos * k..(pos + 1) * k]));
                true_marks.push(seq.events[pos + 1].mark);
                pred_gaps.push((times[pos] * self.max_gap).max(0.0));
                true_gaps.push(seq.events[pos + 1].time - seq.events[pos].time);
            }
        }
        if pred_marks.is_empty() {
            return Err(Error::EmptyDataset(
                "no scoreable positions (all sequences shorter than 2 events)".into(),
            ));
        }
        Ok(EvalOutcome {
            f1: macro_f1(&pred_marks, &true_marks, k)?,
            rmse: rmse(&pred_gaps, &true_gaps)?,
            samples: pred_marks.len(),
        })
    }

    /// Flattened (mu, alpha, gamma) outputs over a probe dataset.
    pub fn intensity_trace(&self, probe: &Dataset) -> Result<IntensityTrace> {
        let jsonl = crate::dataset::to_jsonl_string(probe);
        let probe_hash = crate::hashing::fnv1a64_hex(jsonl.as_bytes());
        let mut values = Vec::new();
        for seq in &probe.sequences {
            let fwd = self.model.forward(seq, None)?;
            values.extend(fwd.mu.values());
            values.extend(fwd.alpha.values());
            values.extend(fwd.gamma.values());
        }
        Ok(IntensityTrace { probe_hash, values })
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss_v: f64,
    pub loss_t: f64,
    pub sigma_v: f64,
    pub sigma_t: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub f1: f64,
    pub rmse: f64,
    pub samples: usize,
}

/// A finished run: final state, best-validation checkpoint, history.
pub struct TrainResult {
    pub state: TrainState,
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Train for `config.epochs` epochs, tracking validation metrics each epoch
/// and keeping the best-validation checkpoint (highest F1, earliest on ties).
pub fn fit(
    config: TrainConfig,
    noisy_train: &Dataset,
    clean: &Dataset,
    val: &Dataset,
) -> Result<TrainResult> {
    config.validate()?;
    if noisy_train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if config.use_reweight && clean.is_empty() {
        return Err(Error::Config(
            "re-weighting enabled but the clean set is empty".into(),
        ));
    }
    let max_gap = match noisy_train.max_gap {
        Some(g) if g > 0.0 => g,
        _ => noisy_train.observed_max_gap(),
    };
    let mut state = TrainState::new(config.clone(), max_gap)?;
    if config.use_overparam {
        state.init_over_params(noisy_train);
    }

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Checkpoint = state.to_checkpoint(true);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    for _ in 0..config.epochs {
        let epoch = state.epoch;
        let stats = state.train_epoch(noisy_train, clean)?;
        let val_outcome = state.evaluate(val)?;
        history.push(EpochRecord {
            epoch,
            train_loss_v: stats.loss_v,
            train_loss_t: stats.loss_t,
            sigma_v_mean: stats.sigma_v,
            sigma_t_mean: stats.sigma_t,
            val_f1: val_outcome.f1,
            val_rmse: val_outcome.rmse,
        });
        if val_outcome.f1 > best_f1 {
            best_f1 = val_outcome.f1;
            best_epoch = epoch;
            best = state.to_checkpoint(true);
        }
    }
    Ok(TrainResult {
        state,
        best,
        best_epoch,
        history,
    })
}
