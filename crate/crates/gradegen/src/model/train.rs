//! Training loop: Adam with warmup, length-bucketed batching, and the
//! two-stage schedule that first trains only the complexity embedding and
//! then fine-tunes everything.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::net::{gradients, loss, forward, Batch};
use crate::model::params::{GroupChecksums, Parameters};
use crate::model::{EncodedExample, ModelConfig};

/// Optimizer and loop settings. `max_steps` caps the total step count
/// across all epochs; `checkpoint_every` records parameter checksums at
/// that step interval (and always at the final step).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_tokens_per_batch: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            peak_lr: 3e-4,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_tokens_per_batch: 2048,
            epochs: 3,
            max_steps: None,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::BadModelConfig {
                reason: "warmup_steps must be at least 1".to_string(),
            });
        }
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err(Error::BadModelConfig {
                reason: format!("peak_lr {} must be finite and non-negative", self.peak_lr),
            });
        }
        if self.max_tokens_per_batch == 0 {
            return Err(Error::BadModelConfig {
                reason: "max_tokens_per_batch must be at least 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then inverse square-root decay. Steps are
/// 1-based; the peak is reached exactly at `warmup_steps`.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

/// Adam moments, shaped like the parameters they optimize.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> AdamState {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Which parameter groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only the complexity embedding matrix; everything else is frozen.
    ComplexityOnly,
}

fn adam_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdamState,
    cfg: &TrainConfig,
    trainable: Trainable,
) {
    state.t += 1;
    let lr = learning_rate(cfg, state.t);
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);

    let mut p_groups = params.groups_mut();
    let g_groups = grads.groups();
    let mut m_groups = state.m.groups_mut();
    let mut v_groups = state.v.groups_mut();
    for i in 0..p_groups.len() {
        let (name, p) = &mut p_groups[i];
        if trainable == Trainable::ComplexityOnly && name != "complexity_embeddings" {
            continue;
        }
        let g = g_groups[i].1;
        let m = &mut *m_groups[i].1;
        let v = &mut *v_groups[i].1;
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Buckets samples by length and packs them greedily so that
/// `(max src len + max tgt len) · batch size` stays within the token cap.
/// A single sample larger than the cap still gets its own batch.
pub fn make_batches(
    samples: &[EncodedExample],
    max_tokens: usize,
    pad_id: u32,
    special_cid: u16,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| (samples[i].tgt_ids.len(), samples[i].src_ids.len(), i));

    let mut batches = Vec::new();
    let mut group: Vec<&EncodedExample> = Vec::new();
    let mut max_src = 0usize;
    let mut max_tgt = 0usize;
    for &i in &order {
        let s = &samples[i];
        let new_src = max_src.max(s.src_ids.len());
        let new_tgt = max_tgt.max(s.tgt_ids.len());
        let cost = (new_src + new_tgt) * (group.len() + 1);
        if !group.is_empty() && cost > max_tokens {
            batches.push(close_group(&group, pad_id, special_cid)?);
            group.clear();
            max_src = 0;
            max_tgt = 0;
        }
        max_src = max_src.max(s.src_ids.len());
        max_tgt = max_tgt.max(s.tgt_ids.len());
        group.push(s);
    }
    if !group.is_empty() {
        batches.push(close_group(&group, pad_id, special_cid)?);
    }
    Ok(batches)
}

fn close_group(group: &[&EncodedExample], pad_id: u32, special_cid: u16) -> Result<Batch> {
    let owned: Vec<EncodedExample> = group.iter().map(|s| (*s).clone()).collect();
    Batch::from_samples(&owned, pad_id, special_cid)
}

/// What a training run produced: the final parameters, the per-step
/// training losses, one validation loss per epoch, and checksum snapshots
/// at checkpoint steps.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: Parameters,
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub checkpoints: Vec<(u64, GroupChecksums)>,
    pub steps: u64,
}

/// Initializes from the seed and trains all groups.
pub fn train(
    config: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    pad_id: u32,
    special_cid: u16,
) -> Result<TrainResult> {
    let params = Parameters::init(config, cfg.seed)?;
    train_from(params, cfg, train_set, valid_set, pad_id, special_cid, Trainable::All)
}

/// Trains from the given starting parameters. Gradient computation always
/// covers every group; `trainable` only gates which groups the optimizer
/// writes back, so frozen groups stay bit-identical.
pub fn train_from(
    mut params: Parameters,
    cfg: &TrainConfig,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    pad_id: u32,
    special_cid: u16,
    trainable: Trainable,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batches = make_batches(train_set, cfg.max_tokens_per_batch, pad_id, special_cid)?;
    let valid_batches = if valid_set.is_empty() {
        Vec::new()
    } else {
        make_batches(valid_set, cfg.max_tokens_per_batch, pad_id, special_cid)?
    };

    let mut state = AdamState::new(&params);
    // A separate stream for batch order, so batching noise never interacts
    // with initialization draws.
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9));
    let mut train_losses = Vec::new();
    let mut valid_losses = Vec::new();
    let mut checkpoints: Vec<(u64, GroupChecksums)> = Vec::new();

    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut order_rng);
        for &bi in &order {
            let (grads, batch_nll) = gradients(&params, &batches[bi])?;
            if !batch_nll.is_finite() {
                return Err(Error::NonFiniteLoss { step: state.t + 1 });
            }
            adam_step(&mut params, &grads, &mut state, cfg, trainable);
            train_losses.push(batch_nll);
            if let Some(every) = cfg.checkpoint_every {
                if every > 0 && state.t % every == 0 {
                    checkpoints.push((state.t, params.checksums()));
                }
            }
            if let Some(max) = cfg.max_steps {
                if state.t >= max {
                    break 'epochs;
                }
            }
        }
        if !valid_batches.is_empty() {
            valid_losses.push(corpus_loss(&params, &valid_batches)?);
        }
    }
    if checkpoints.last().map(|(t, _)| *t) != Some(state.t) && cfg.checkpoint_every.is_some() {
        checkpoints.push((state.t, params.checksums()));
    }
    Ok(TrainResult {
        params,
        train_losses,
        valid_losses,
        checkpoints,
        steps: state.t,
    })
}

/// Token-weighted mean NLL over a batch list: the exact corpus mean, not a
/// mean of batch means.
pub fn corpus_loss(params: &Parameters, batches: &[Batch]) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for batch in batches {
        let logits = forward(params, batch)?;
        let value = loss(&logits, &batch.labels, &batch.tgt_lens)?;
        let n = batch.num_label_tokens();
        sum += value * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::AllPositionsPadded);
    }
    Ok(sum / tokens as f64)
}

/// Results of both stages; `params` are the stage-2 outputs (or stage 1's
/// when stage 2 is skipped).
#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub params: Parameters,
    pub stage1: TrainResult,
    pub stage2: TrainResult,
}

/// The fine-tuning schedule: stage 1 trains only the complexity embedding
/// with every other group frozen, stage 2 unfreezes everything. The
/// starting parameters may lack a complexity matrix (a trained prompt
/// model); a zero matrix is attached. Each stage starts with fresh
/// optimizer moments.
pub fn train_two_stage(
    pretrained: &Parameters,
    cfg: &TrainConfig,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    pad_id: u32,
    special_cid: u16,
    stage1_steps: u64,
    stage2_steps: u64,
) -> Result<TwoStageResult> {
    let start = pretrained.to_variant(crate::model::Variant::Ce);
    let stage1 = if stage1_steps > 0 {
        let mut c = cfg.clone();
        c.max_steps = Some(stage1_steps);
        c.epochs = usize::try_from(stage1_steps).unwrap_or(usize::MAX).max(1);
        train_from(
            start.clone(),
            &c,
            train_set,
            valid_set,
            pad_id,
            special_cid,
            Trainable::ComplexityOnly,
        )?
    } else {
        empty_result(start)
    };
    let stage2 = if stage2_steps > 0 {
        let mut c = cfg.clone();
        c.max_steps = Some(stage2_steps);
        c.epochs = usize::try_from(stage2_steps).unwrap_or(usize::MAX).max(1);
        train_from(
            stage1.params.clone(),
            &c,
            train_set,
            valid_set,
            pad_id,
            special_cid,
            Trainable::All,
        )?
    } else {
        empty_result(stage1.params.clone())
    };
    Ok(TwoStageResult {
        params: stage2.params.clone(),
        stage1,
        stage2,
    })
}

fn empty_result(params: Parameters) -> TrainResult {
    TrainResult {
        params,
        train_losses: Vec::new(),
        valid_losses: Vec::new(),
        checkpoints: Vec::new(),
        steps: 0,
    }
}
