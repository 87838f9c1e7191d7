//! Measurement protocol: reconstruction perplexity, classification as
//! generation, shuffle robustness, the propagation-depth ablation and the
//! latency scaling comparison against a flat graph-to-text serialization.
//!
//! Every report separates deterministic content from timings so that two
//! runs with the same seed can be compared byte for byte after
//! [`EvalReport::canonical`].

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::decoder::{Decoder, KvCache, TapeKv};
use crate::engine::{answer_loss, materialize_kv, propagate, RampConfig};
use crate::error::{RampError, Result};
use crate::exec::Exec;
use crate::graph::{cross_node_shuffle, ego_subgraph, shuffle_neighbor_order, EgoParams, EgoSubgraph, TextRichGraph};
use crate::tokenizer::{detokenize, tokenize};
use crate::training::{effective_task, recon_loss_taped, recon_query, FinetuneSample, ReconTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub wall_time_s: f64,
    /// Deterministic extra fields (skip counts, spreads, per-node output).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, serde_json::Value>,
    /// Timing-derived fields; dropped by [`EvalReport::canonical`].
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    fn new(metric: impl Into<String>, value: f64, samples: usize, seed: u64, fingerprint: &str, start: Instant) -> Self {
        EvalReport {
            metric: metric.into(),
            value,
            samples,
            seed,
            fingerprint: fingerprint.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
            details: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, v: impl Serialize) -> Self {
        self.details.insert(key.into(), serde_json::to_value(v).expect("serializable"));
        self
    }

    /// The report without anything that depends on wall-clock time.
    pub fn canonical(&self) -> EvalReport {
        EvalReport {
            wall_time_s: 0.0,
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// CSV with one row per report: metric, value, samples, seed, fingerprint.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("metric,value,samples,seed,fingerprint\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{},{}\n", r.metric, r.value, r.samples, r.seed, r.fingerprint));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PplMode {
    #[serde(rename = "self")]
    SelfRecon,
    Nbr,
}

/// Settings shared by the evaluation entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext<'a> {
    pub ramp: RampConfig,
    pub ego: EgoParams,
    pub seed: u64,
    pub fingerprint: &'a str,
    pub exec: Exec,
}

fn sample_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// Token-weighted reconstruction perplexity over `nodes`. In `nbr` mode
/// nodes without neighbors are skipped and counted.
pub fn perplexity(dec: &Decoder, graph: &TextRichGraph, nodes: &[String], mode: PplMode, ctx: &EvalContext) -> Result<EvalReport> {
    let start = Instant::now();
    let task = match mode {
        PplMode::SelfRecon => ReconTask::SelfRecon,
        PplMode::Nbr => ReconTask::NbrRecon,
    };
    let idx: Vec<usize> = (0..nodes.len()).collect();
    let per_node = ctx.exec.try_map(&idx, |&k| -> Result<Option<(f64, usize)>> {
        let sub = ego_subgraph(graph, &nodes[k], ctx.ego, sample_seed(ctx.seed, k), None)?;
        if effective_task(task, &sub) != task {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = dec.bind_frozen(&mut tape);
        let loss = recon_loss_taped(dec, &mut tape, &bound, &sub, &ctx.ramp, task)?;
        Ok(Some((tape.value(loss).data()[0], sub.nodes[0].tokens.len())))
    })?;
    let scored: Vec<(f64, usize)> = per_node.iter().flatten().copied().collect();
    let skipped = per_node.len() - scored.len();
    let tokens: usize = scored.iter().map(|s| s.1).sum();
    if tokens == 0 {
        return Err(RampError::Contract("perplexity over an empty evaluation set".into()));
    }
    let nll = scored.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / tokens as f64;
    let metric = match mode {
        PplMode::SelfRecon => "ppl_self",
        PplMode::Nbr => "ppl_nbr",
    };
    Ok(EvalReport::new(metric, nll.exp(), scored.len(), ctx.seed, ctx.fingerprint, start)
        .with("mean_nll", nll)
        .with("tokens", tokens)
        .with("skipped", skipped))
}

/// Plain next-token perplexity of node texts with no summaries in context.
pub fn raw_lm_perplexity(dec: &Decoder, graph: &TextRichGraph, nodes: &[String], ctx: &EvalContext) -> Result<EvalReport> {
    let start = Instant::now();
    let per_node = ctx.exec.try_map(nodes, |id| -> Result<(f64, usize)> {
        let node = graph.node(id).ok_or_else(|| RampError::Lookup(id.clone()))?;
        let mut tape = Tape::new();
        let bound = dec.bind_frozen(&mut tape);
        let loss = answer_loss(dec, &mut tape, &bound, &TapeKv::empty(), &recon_query(dec), &node.tokens)?;
        Ok((tape.value(loss).data()[0], node.tokens.len()))
    })?;
    let tokens: usize = per_node.iter().map(|s| s.1).sum();
    if tokens == 0 {
        return Err(RampError::Contract("perplexity over an empty evaluation set".into()));
    }
    let nll = per_node.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / tokens as f64;
    Ok(EvalReport::new("ppl_raw_lm", nll.exp(), per_node.len(), ctx.seed, ctx.fingerprint, start)
        .with("mean_nll", nll)
        .with("tokens", tokens))
}

/// Question plus option list, answered by generating the label.
pub fn classification_query(labels: &[String]) -> String {
    format!("Which class? Options: {}. Answer:", labels.join(", "))
}

pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Classification samples for `ids`: ego-subgraph with the prompt node,
/// query, and the label followed by EOS as the answer.
pub fn classification_samples(
    dec: &Decoder,
    graph: &TextRichGraph,
    ids: &[String],
    labels: &[String],
    ego: EgoParams,
    seed: u64,
) -> Result<Vec<FinetuneSample>> {
    let query = classification_query(labels);
    ids.iter()
        .enumerate()
        .map(|(k, id)| {
            let node = graph.node(id).ok_or_else(|| RampError::Lookup(id.clone()))?;
            let label = node
                .label
                .as_ref()
                .ok_or_else(|| RampError::Validation(format!("node `{id}` has no label")))?;
            let sub = ego_subgraph(graph, id, ego, sample_seed(seed, k), Some(&query))?;
            let mut answer = tokenize(label);
            answer.push(dec.config().eos_token_id);
            Ok(FinetuneSample {
                sub,
                query: tokenize(&query),
                answer,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub node: String,
    pub expected: String,
    pub generated: String,
    pub correct: bool,
    /// No EOS within the generation budget; counted incorrect.
    pub overlong: bool,
}

/// Generated answer for one sample through the full pipeline.
pub fn predict(dec: &Decoder, sub: &EgoSubgraph, query: &[u32], ramp: &RampConfig, max_new: usize, exec: Exec) -> Result<(String, bool)> {
    let target = [sub.target_index()];
    let memory = propagate(dec, sub, ramp, Some(&target), exec)?;
    let kv = materialize_kv(dec, &memory, ramp.mp_rounds, &target)?;
    let (tokens, finished) = dec.generate_until_eos(&kv, query, max_new)?;
    Ok((detokenize(&tokens), finished))
}

pub fn predictions(dec: &Decoder, samples: &[FinetuneSample], ramp: &RampConfig, max_new: usize, exec: Exec) -> Result<Vec<Prediction>> {
    exec.try_map(samples, |s| {
        let expected = detokenize(&s.answer);
        let (generated, finished) = predict(dec, &s.sub, &s.query, ramp, max_new, Exec::Sequential)?;
        Ok(Prediction {
            node: s.sub.target.clone(),
            correct: finished && normalize_label(&generated) == normalize_label(&expected),
            overlong: !finished,
            expected,
            generated,
        })
    })
}

pub fn accuracy(preds: &[Prediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64
}

pub fn classify_accuracy(dec: &Decoder, samples: &[FinetuneSample], max_new: usize, ctx: &EvalContext) -> Result<EvalReport> {
    let start = Instant::now();
    if samples.is_empty() {
        return Err(RampError::Contract("classification over an empty evaluation set".into()));
    }
    let preds = predictions(dec, samples, &ctx.ramp, max_new, ctx.exec)?;
    let overlong = preds.iter().filter(|p| p.overlong).count();
    Ok(EvalReport::new("accuracy", accuracy(&preds), preds.len(), ctx.seed, ctx.fingerprint, start)
        .with("mp_rounds", ctx.ramp.mp_rounds)
        .with("overlong", overlong)
        .with("predictions", &preds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShuffleKind {
    NeighborOrder,
    CrossNode,
}

pub fn shuffle_samples(samples: &[FinetuneSample], kind: ShuffleKind, seed: u64) -> Vec<FinetuneSample> {
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let sub = match kind {
                ShuffleKind::NeighborOrder => shuffle_neighbor_order(&s.sub, sample_seed(seed, k)),
                ShuffleKind::CrossNode => cross_node_shuffle(&s.sub, sample_seed(seed, k)).0,
            };
            FinetuneSample { sub, ..s.clone() }
        })
        .collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracy under a structural perturbation, one run per seed; reports mean,
/// sample standard deviation and the delta against the unshuffled accuracy.
pub fn shuffle_experiment(
    dec: &Decoder,
    samples: &[FinetuneSample],
    kind: ShuffleKind,
    seeds: &[u64],
    max_new: usize,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let start = Instant::now();
    if samples.is_empty() || seeds.is_empty() {
        return Err(RampError::Contract("shuffle experiment needs samples and seeds".into()));
    }
    let base = accuracy(&predictions(dec, samples, &ctx.ramp, max_new, ctx.exec)?);
    let runs = seeds
        .iter()
        .map(|&s| Ok(accuracy(&predictions(dec, &shuffle_samples(samples, kind, s), &ctx.ramp, max_new, ctx.exec)?)))
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&runs);
    let metric = match kind {
        ShuffleKind::NeighborOrder => "shuffle_neighbor_order",
        ShuffleKind::CrossNode => "shuffle_cross_node",
    };
    Ok(EvalReport::new(metric, mean, samples.len(), ctx.seed, ctx.fingerprint, start)
        .with("std", std)
        .with("baseline", base)
        .with("delta", mean - base)
        .with("runs", &runs)
        .with("seeds", seeds))
}

/// One accuracy row per propagation depth. The decoders must share their
/// architecture and the ramp settings may differ only in `mp_rounds`.
pub fn mp_ablation(models: &[(&Decoder, RampConfig)], samples: &[FinetuneSample], max_new: usize, ctx: &EvalContext) -> Result<Vec<EvalReport>> {
    let Some((first, first_ramp)) = models.first() else {
        return Err(RampError::Contract("ablation needs at least one model".into()));
    };
    for (dec, ramp) in models {
        if dec.config() != first.config() {
            return Err(RampError::Contract("ablation models differ in decoder configuration".into()));
        }
        if (RampConfig { mp_rounds: 0, ..ramp.clone() }) != (RampConfig { mp_rounds: 0, ..first_ramp.clone() }) {
            return Err(RampError::Contract("ablation models differ beyond mp_rounds".into()));
        }
    }
    models
        .iter()
        .map(|(dec, ramp)| {
            let c = EvalContext { ramp: ramp.clone(), ..ctx.clone() };
            let mut r = classify_accuracy(dec, samples, max_new, &c)?;
            r.metric = format!("accuracy_mp{}", ramp.mp_rounds);
            Ok(r)
        })
        .collect()
}

/// Flat serialization of every member's text plus an adjacency listing,
/// followed by the query.
pub fn graph_to_text(sub: &EgoSubgraph, query: &str) -> String {
    let m = sub.member_count();
    let mut s = String::new();
    for (k, node) in sub.members().iter().enumerate() {
        s.push_str(&format!("[{k}] {}\n", detokenize(&node.tokens)));
    }
    let edges: Vec<String> = sub
        .edge_set()
        .into_iter()
        .filter(|&(a, b)| a < m && b < m)
        .map(|(a, b)| format!("{a}-{b}"))
        .collect();
    s.push_str(&format!("edges: {}\n", edges.join(" ")));
    s.push_str(query);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineAnswer {
    pub answer: String,
    pub finished: bool,
    pub sequence_len: usize,
    pub wall_time_s: f64,
}

/// Single decoder pass over the flat serialization, then greedy generation.
/// An overlong serialization is a capacity error.
pub fn graph_to_text_baseline(dec: &Decoder, sub: &EgoSubgraph, query: &str, max_new: usize) -> Result<BaselineAnswer> {
    let start = Instant::now();
    let prompt = tokenize(&graph_to_text(sub, query));
    if prompt.len() + max_new > dec.config().max_positions {
        return Err(RampError::Capacity(format!(
            "graph-to-text sequence of {} tokens (+{max_new} to generate) exceeds {} positions",
            prompt.len(),
            dec.config().max_positions
        )));
    }
    let (tokens, finished) = dec.generate_until_eos(&KvCache::empty(), &prompt, max_new)?;
    Ok(BaselineAnswer {
        answer: detokenize(&tokens),
        finished,
        sequence_len: prompt.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Plain forward helper used for length accounting in tests.
pub fn serialized_len(sub: &EgoSubgraph, query: &str) -> usize {
    tokenize(&graph_to_text(sub, query)).len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: usize,
    pub hi: usize,
    pub samples: usize,
    pub ramp_accuracy: f64,
    pub mean_members: f64,
    pub mean_baseline_len: f64,
    /// Median over timed reps of the summed per-sample wall time.
    pub ramp_median_s: f64,
    pub baseline_median_s: f64,
    pub ramp_normalized: f64,
    pub baseline_normalized: f64,
    pub ramp_times_s: Vec<f64>,
    pub baseline_times_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSpec {
    pub buckets: Vec<(usize, usize)>,
    pub per_bucket: usize,
    pub reps: usize,
    pub max_new: usize,
    pub hops: usize,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec {
            buckets: vec![(1, 5), (6, 10), (11, 20), (21, 40)],
            per_bucket: 4,
            reps: 3,
            max_new: 8,
            hops: 3,
        }
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Targets whose ego-subgraph (capped at the bucket's upper bound) has a
/// member count inside the bucket, in node order.
pub fn bucket_samples(
    graph: &TextRichGraph,
    candidates: &[String],
    bucket: (usize, usize),
    spec: &ScalingSpec,
    labels: &[String],
    seed: u64,
) -> Result<Vec<EgoSubgraph>> {
    let query = classification_query(labels);
    let mut out = Vec::new();
    for (k, id) in candidates.iter().enumerate() {
        if out.len() == spec.per_bucket {
            break;
        }
        let ego = EgoParams { hops: spec.hops, max_size: bucket.1 };
        let sub = ego_subgraph(graph, id, ego, sample_seed(seed, k), Some(&query))?;
        if (bucket.0..=bucket.1).contains(&sub.member_count()) {
            out.push(sub);
        }
    }
    Ok(out)
}

/// Per-bucket latency of RAMP and the graph-to-text baseline, each
/// normalized to its own smallest non-empty bucket. Timing runs are serial.
/// Returns the report plus one notice per skipped (empty) bucket.
pub fn scaling_benchmark(
    dec: &Decoder,
    graph: &TextRichGraph,
    candidates: &[String],
    labels: &[String],
    spec: &ScalingSpec,
    ctx: &EvalContext,
) -> Result<(EvalReport, Vec<String>)> {
    let start = Instant::now();
    let query = classification_query(labels);
    let query_tokens = tokenize(&query);
    let mut rows: Vec<BucketRow> = Vec::new();
    let mut notices = Vec::new();
    for &bucket in &spec.buckets {
        let subs = bucket_samples(graph, candidates, bucket, spec, labels, ctx.seed)?;
        if subs.is_empty() {
            notices.push(format!("bucket {}-{}: no samples, skipped", bucket.0, bucket.1));
            continue;
        }
        let mut correct = 0;
        let mut lens = 0;
        let mut ramp_times = Vec::new();
        let mut base_times = Vec::new();
        // Rep 0 is a discarded warm-up.
        for rep in 0..=spec.reps {
            let mut ramp_t = 0.0;
            let mut base_t = 0.0;
            for sub in &subs {
                let t = Instant::now();
                let (answer, finished) = predict(dec, sub, &query_tokens, &ctx.ramp, spec.max_new, Exec::Sequential)?;
                ramp_t += t.elapsed().as_secs_f64();
                let b = graph_to_text_baseline(dec, sub, &query, spec.max_new)?;
                base_t += b.wall_time_s;
                if rep == 0 {
                    let label = sub.nodes[0].label.as_deref().unwrap_or("");
                    correct += usize::from(finished && normalize_label(&answer) == normalize_label(label));
                    lens += b.sequence_len;
                }
            }
            if rep > 0 {
                ramp_times.push(ramp_t);
                base_times.push(base_t);
            }
        }
        let n = subs.len();
        rows.push(BucketRow {
            lo: bucket.0,
            hi: bucket.1,
            samples: n,
            ramp_accuracy: correct as f64 / n as f64,
            mean_members: subs.iter().map(|s| s.member_count()).sum::<usize>() as f64 / n as f64,
            mean_baseline_len: lens as f64 / n as f64,
            ramp_median_s: median(&ramp_times),
            baseline_median_s: median(&base_times),
            ramp_normalized: 0.0,
            baseline_normalized: 0.0,
            ramp_times_s: ramp_times,
            baseline_times_s: base_times,
        });
    }
    if rows.is_empty() {
        return Err(RampError::Precondition("no bucket has samples".into()));
    }
    let (r0, b0) = (rows[0].ramp_median_s, rows[0].baseline_median_s);
    for r in &mut rows {
        r.ramp_normalized = r.ramp_median_s / r0;
        r.baseline_normalized = r.baseline_median_s / b0;
    }
    let last = rows.last().expect("non-empty");
    let value = last.ramp_normalized;
    let deterministic: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "lo": r.lo, "hi": r.hi, "samples": r.samples,
                "ramp_accuracy": r.ramp_accuracy, "mean_members": r.mean_members,
                "mean_baseline_len": r.mean_baseline_len,
            })
        })
        .collect();
    let mut report = EvalReport::new("scaling", value, rows.iter().map(|r| r.samples).sum(), ctx.seed, ctx.fingerprint, start)
        .with("buckets", deterministic)
        .with("notices", &notices);
    // The headline value is a latency ratio, so it lives with the timings.
    report.value = 0.0;
    report.timings.insert("ramp_largest_normalized".into(), value.into());
    report
        .timings
        .insert("baseline_largest_normalized".into(), last.baseline_normalized.into());
    report.timings.insert("rows".into(), serde_json::to_value(&rows).expect("serializable"));
    Ok((report, notices))
}

/// Normalized series for plotting: `bucket,method,normalized`.
pub fn scaling_plot_csv(report: &EvalReport) -> Result<String> {
    let rows: Vec<BucketRow> = serde_json::from_value(
        report
            .timings
            .get("rows")
            .cloned()
            .ok_or_else(|| RampError::Contract("report has no scaling rows".into()))?,
    )
    .map_err(|e| RampError::Contract(e.to_string()))?;
    let mut out = String::from("bucket,method,normalized\n");
    for r in &rows {
        out.push_str(&format!("{}-{},ramp,{}\n", r.lo, r.hi, r.ramp_normalized));
        out.push_str(&format!("{}-{},graph_to_text,{}\n", r.lo, r.hi, r.baseline_normalized));
    }
    Ok(out)
}
