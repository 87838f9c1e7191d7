//! Reconstruction pre-training, generative fine-tuning and the optimizer.
//!
//! Both stages share one step shape: every sample of a batch is run on its
//! own tape (in parallel when allowed), per-sample gradients are summed in
//! batch order, and a single AdamW update is applied to the trainable
//! parameters. The loss trajectory is therefore a pure function of the seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::{Bound, Decoder};
use crate::engine::{answer_loss, materialize_taped, propagate_taped, RampConfig};
use crate::error::{RampError, Result};
use crate::exec::Exec;
use crate::graph::{ego_subgraph, EgoParams, EgoSubgraph, TextRichGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_nodes: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Parameter-name prefixes that stay fixed.
    pub freeze: Vec<String>,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_frac: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Neighborhood sampled around each pre-training node.
    pub ego: EgoParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 200,
            batch_nodes: 8,
            learning_rate: 3e-4,
            seed: 0,
            freeze: Vec::new(),
            early_stop_patience: 3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            ego: EgoParams { hops: 1, max_size: 8 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RampError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(RampError::Config("steps must be at least 1".into()));
        }
        if self.batch_nodes == 0 {
            return Err(RampError::Config("batch_nodes must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(RampError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(RampError::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(RampError::Config("weight_decay and clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    /// Linear warmup over the first `warmup_frac` of steps, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((self.warmup_frac * self.steps as f64).ceil() as usize).max(1);
        self.learning_rate * ((step + 1) as f64 / warm as f64).min(1.0)
    }
}

/// Per-parameter trainability; every prefix must match something.
pub fn trainable_mask(dec: &Decoder, freeze: &[String]) -> Result<Vec<bool>> {
    for prefix in freeze {
        if !dec.names().iter().any(|n| n.starts_with(prefix.as_str())) {
            return Err(RampError::Config(format!("freeze entry `{prefix}` matches no parameter")));
        }
    }
    Ok(dec
        .names()
        .iter()
        .map(|n| !freeze.iter().any(|p| n.starts_with(p.as_str())))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(dec: &Decoder) -> Self {
        AdamState {
            step: 0,
            m: dec.params().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: dec.params().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// One AdamW update with decoupled weight decay. Parameters with
    /// `trainable[i] == false` or no gradient are left untouched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], trainable: &[bool], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref().filter(|_| trainable[i]) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + 1e-8) + cfg.weight_decay * *w);
            }
        }
    }
}

/// Loss and per-parameter gradients of one sample, computed on a private
/// tape.
pub fn sample_gradients<F>(dec: &Decoder, trainable: &[bool], loss_fn: F) -> Result<(f64, Vec<Option<Vec<f64>>>)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = dec.bind(&mut tape, |i| trainable[i]);
    let loss = loss_fn(&mut tape, &bound)?;
    let value = tape.value(loss).data()[0];
    let vars = bound.vars().to_vec();
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .map(|&v| grads.take(v).map(Tensor::into_data))
        .collect();
    Ok((value, out))
}

/// Sums per-sample gradients in order and scales by `1/n`.
fn reduce_gradients(per_sample: Vec<Vec<Option<Vec<f64>>>>) -> Vec<Option<Vec<f64>>> {
    let n = per_sample.len() as f64;
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for sample in iter {
        for (a, g) in acc.iter_mut().zip(sample) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    for g in acc.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x /= n);
    }
    acc
}

fn clip(grads: &mut [Option<Vec<f64>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
}

/// Runs every sample's loss, reduces gradients and applies one update.
/// Returns the per-sample losses in batch order.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T, F>(
    dec: &mut Decoder,
    opt: &mut AdamState,
    batch: &[T],
    trainable: &[bool],
    lr: f64,
    cfg: &TrainConfig,
    exec: Exec,
    loss_fn: F,
) -> Result<Vec<f64>>
where
    T: Sync,
    F: Fn(&Decoder, &mut Tape, &Bound, &T) -> Result<Var> + Sync + Send,
{
    let frozen: &Decoder = dec;
    let results = exec.try_map(batch, |sample| sample_gradients(frozen, trainable, |tape, bound| loss_fn(frozen, tape, bound, sample)))?;
    let (losses, grads): (Vec<f64>, Vec<_>) = results.into_iter().unzip();
    let mut grads = reduce_gradients(grads);
    clip(&mut grads, cfg.clip_norm);
    opt.update(dec.params_mut(), &grads, trainable, lr, cfg);
    Ok(losses)
}

/// Marks the first token of a reconstruction target; reconstruction sees no
/// text in its context.
pub fn recon_query(dec: &Decoder) -> Vec<u32> {
    vec![dec.config().eos_token_id]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconTask {
    SelfRecon,
    NbrRecon,
}

impl ReconTask {
    pub fn name(self) -> &'static str {
        match self {
            ReconTask::SelfRecon => "self",
            ReconTask::NbrRecon => "nbr",
        }
    }
}

/// Each task with probability one half.
pub fn sample_pretrain_task<R: Rng + ?Sized>(rng: &mut R) -> ReconTask {
    if rng.gen::<bool>() {
        ReconTask::SelfRecon
    } else {
        ReconTask::NbrRecon
    }
}

/// Target's members-only neighbors, sorted by id.
pub fn recon_neighbors(sub: &EgoSubgraph) -> Vec<usize> {
    let t = sub.target_index();
    let mut nbrs: Vec<usize> = sub.neighbors[t]
        .iter()
        .copied()
        .filter(|&j| Some(j) != sub.prompt_index() && j != t)
        .collect();
    nbrs.sort_by(|&a, &b| sub.nodes[a].id.cmp(&sub.nodes[b].id));
    nbrs.dedup();
    nbrs
}

/// The task actually executed: neighbor reconstruction of an isolated
/// target falls back to self reconstruction.
pub fn effective_task(task: ReconTask, sub: &EgoSubgraph) -> ReconTask {
    if task == ReconTask::NbrRecon && recon_neighbors(sub).is_empty() {
        ReconTask::SelfRecon
    } else {
        task
    }
}

/// Teacher-forced reconstruction of the target's text from the final-round
/// states of itself (self) or its neighbors (nbr).
pub fn recon_loss_taped(
    dec: &Decoder,
    tape: &mut Tape,
    bound: &Bound,
    sub: &EgoSubgraph,
    cfg: &RampConfig,
    task: ReconTask,
) -> Result<Var> {
    let target = &sub.nodes[sub.target_index()];
    if target.tokens.is_empty() {
        return Err(RampError::Precondition(format!("node `{}` has no text to reconstruct", target.id)));
    }
    let ctx_nodes = match effective_task(task, sub) {
        ReconTask::SelfRecon => vec![sub.target_index()],
        ReconTask::NbrRecon => recon_neighbors(sub),
    };
    let memory = propagate_taped(dec, tape, bound, sub, cfg, Some(&ctx_nodes))?;
    let ctx = materialize_taped(dec, tape, bound, &memory, cfg.mp_rounds, &ctx_nodes)?;
    answer_loss(dec, tape, bound, &ctx, &recon_query(dec), &target.tokens)
}

fn recon_value(dec: &Decoder, sub: &EgoSubgraph, cfg: &RampConfig, task: ReconTask) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = dec.bind_frozen(&mut tape);
    let loss = recon_loss_taped(dec, &mut tape, &bound, sub, cfg, task)?;
    Ok(tape.value(loss).data()[0])
}

pub fn self_recon_loss(dec: &Decoder, sub: &EgoSubgraph, cfg: &RampConfig) -> Result<f64> {
    recon_value(dec, sub, cfg, ReconTask::SelfRecon)
}

pub fn nbr_recon_loss(dec: &Decoder, sub: &EgoSubgraph, cfg: &RampConfig) -> Result<f64> {
    recon_value(dec, sub, cfg, ReconTask::NbrRecon)
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub task: String,
    pub node: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub sub: EgoSubgraph,
    pub task: ReconTask,
}

/// Draws the samples of pre-training step `step` from `nodes`, uniformly
/// with replacement.
pub fn pretrain_batch(graph: &TextRichGraph, nodes: &[String], cfg: &TrainConfig, step: usize) -> Result<Vec<PretrainSample>> {
    if nodes.is_empty() {
        return Err(RampError::Precondition("no pre-training nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    (0..cfg.batch_nodes)
        .map(|_| {
            let id = &nodes[rng.gen_range(0..nodes.len())];
            let task = sample_pretrain_task(&mut rng);
            let sub = ego_subgraph(graph, id, cfg.ego, rng.gen(), None)?;
            Ok(PretrainSample {
                task: effective_task(task, &sub),
                sub,
            })
        })
        .collect()
}

fn diverged(step: usize, what: &str, e: RampError) -> RampError {
    match e {
        RampError::NonFinite { op } => RampError::Diverged(format!("step {step}: {what}: non-finite value in `{op}`")),
        other => other,
    }
}

/// Fixed-budget reconstruction pre-training. Returns the mean batch loss of
/// every step.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    dec: &mut Decoder,
    opt: &mut AdamState,
    graph: &TextRichGraph,
    nodes: &[String],
    ramp: &RampConfig,
    cfg: &TrainConfig,
    exec: Exec,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    ramp.validate()?;
    let trainable = trainable_mask(dec, &cfg.freeze)?;
    let mut means = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = Instant::now();
        let batch = pretrain_batch(graph, nodes, cfg, step)?;
        let lr = cfg.lr_at(step);
        let losses = train_step(dec, opt, &batch, &trainable, lr, cfg, exec, |d, tape, bound, s| {
            recon_loss_taped(d, tape, bound, &s.sub, ramp, s.task)
        })
        .map_err(|e| diverged(step, "pre-training", e))?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        for (s, &loss) in batch.iter().zip(&losses) {
            log(&LogRecord {
                step,
                stage: Stage::Pretrain,
                task: s.task.name().into(),
                node: s.sub.target.clone(),
                loss,
                lr,
                wall_ms,
            });
        }
        means.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(means)
}

/// A generative fine-tuning example: context from `sub`, then `query`,
/// trained to continue with `answer`.
#[derive(Debug, Clone)]
pub struct FinetuneSample {
    pub sub: EgoSubgraph,
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
}

/// Full pipeline loss: propagate, materialize the target's cache, score the
/// answer.
pub fn finetune_loss_taped(dec: &Decoder, tape: &mut Tape, bound: &Bound, sample: &FinetuneSample, cfg: &RampConfig) -> Result<Var> {
    let target = [sample.sub.target_index()];
    let memory = propagate_taped(dec, tape, bound, &sample.sub, cfg, Some(&target))?;
    let ctx = materialize_taped(dec, tape, bound, &memory, cfg.mp_rounds, &target)?;
    answer_loss(dec, tape, bound, &ctx, &sample.query, &sample.answer)
}

/// One fine-tuning update over `batch`; returns the mean loss.
pub fn finetune_step(
    dec: &mut Decoder,
    opt: &mut AdamState,
    batch: &[FinetuneSample],
    ramp: &RampConfig,
    cfg: &TrainConfig,
    step: usize,
    exec: Exec,
) -> Result<f64> {
    let trainable = trainable_mask(dec, &cfg.freeze)?;
    let losses = train_step(dec, opt, batch, &trainable, cfg.lr_at(step), cfg, exec, |d, tape, bound, s| {
        finetune_loss_taped(d, tape, bound, s, ramp)
    })
    .map_err(|e| diverged(step, "fine-tuning", e))?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneOutcome {
    pub step_losses: Vec<f64>,
    /// Validation score after each completed epoch.
    pub val_scores: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Epoch-based fine-tuning under a total step budget. After each epoch the
/// model is scored by `validate`; the best-scoring parameters are restored
/// at the end and training stops after `early_stop_patience` epochs without
/// improvement.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    dec: &mut Decoder,
    opt: &mut AdamState,
    samples: &[FinetuneSample],
    ramp: &RampConfig,
    cfg: &TrainConfig,
    exec: Exec,
    validate: &mut dyn FnMut(&Decoder) -> Result<f64>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    ramp.validate()?;
    if samples.is_empty() {
        return Err(RampError::Precondition("no fine-tuning samples".into()));
    }
    let trainable = trainable_mask(dec, &cfg.freeze)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut outcome = FinetuneOutcome {
        step_losses: Vec::new(),
        val_scores: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    'epochs: while step < cfg.steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_nodes) {
            if step == cfg.steps {
                break;
            }
            let start = Instant::now();
            let batch: Vec<FinetuneSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let lr = cfg.lr_at(step);
            let losses = train_step(dec, opt, &batch, &trainable, lr, cfg, exec, |d, tape, bound, s| {
                finetune_loss_taped(d, tape, bound, s, ramp)
            })
            .map_err(|e| diverged(step, "fine-tuning", e))?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            for (s, &loss) in batch.iter().zip(&losses) {
                log(&LogRecord {
                    step,
                    stage: Stage::Finetune,
                    task: "answer".into(),
                    node: s.sub.target.clone(),
                    loss,
                    lr,
                    wall_ms,
                });
            }
            outcome.step_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
            step += 1;
        }
        let score = validate(dec)?;
        let epoch = outcome.val_scores.len();
        outcome.val_scores.push(score);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, dec.params().to_vec()));
            outcome.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                outcome.stopped_early = true;
                break 'epochs;
            }
        }
    }
    if let Some((_, params)) = best {
        dec.params_mut().clone_from_slice(&params);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::graph::NodeRecord;

    fn tiny() -> Decoder {
        Decoder::new(
            DecoderConfig {
                d_model: 8,
                d_ff: 16,
                max_positions: 64,
                ..DecoderConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn task_frequencies_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let selfs = (0..n).filter(|_| sample_pretrain_task(&mut rng) == ReconTask::SelfRecon).count();
        let f = selfs as f64 / n as f64;
        assert!((0.47..=0.53).contains(&f), "{f}");
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = TrainConfig {
            steps: 100,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 2e-4).abs() < 1e-15);
        assert!((cfg.lr_at(4) - 1e-3).abs() < 1e-15);
        assert_eq!(cfg.lr_at(50), 1e-3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr·sign(g) (plus decay).
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Some(vec![0.3, -4.0, 0.0])];
        let mut st = AdamState {
            step: 0,
            m: vec![vec![0.0; 3]],
            v: vec![vec![0.0; 3]],
        };
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        st.update(&mut p, &grads, &[true], 0.1, &cfg);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.9).abs() < 1e-6 && d[2] == 0.5);
    }

    #[test]
    fn unknown_freeze_prefix_is_rejected() {
        let dec = tiny();
        assert!(trainable_mask(&dec, &["nope".into()]).is_err());
        let mask = trainable_mask(&dec, &["layers.0.".into()]).unwrap();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 12);
    }

    #[test]
    fn isolated_target_falls_back_to_self() {
        let g = TextRichGraph::new(vec![NodeRecord::new("a", "lonely text", None)], vec![]).unwrap();
        let sub = ego_subgraph(&g, "a", EgoParams::default(), 0, None).unwrap();
        assert_eq!(effective_task(ReconTask::NbrRecon, &sub), ReconTask::SelfRecon);
        let cfg = RampConfig::default();
        let dec = tiny();
        assert_eq!(nbr_recon_loss(&dec, &sub, &cfg).unwrap(), self_recon_loss(&dec, &sub, &cfg).unwrap());
    }
}
