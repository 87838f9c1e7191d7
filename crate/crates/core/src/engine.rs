//! Raw-text anchored message passing.
//!
//! * Round 0 compresses each node: `tokens(X_i) ++ [SUMMARY; n_i]` is run
//!   through the decoder and the final hidden states at the placeholder
//!   positions become `S_i^(0)`, with `n_i = ⌈ρ·L_i⌉`.
//! * Round `ℓ → ℓ+1` runs the decoder over
//!   `S_j1 ‖ … ‖ S_jm ‖ X_i ‖ S_i^(ℓ) ‖ [SUMMARY; n_i]` and reads `S_i^(ℓ+1)`
//!   off the fresh placeholders. Compact mode drops the `X_i` segment.
//! * After the last round, key/value rows are extracted from a forward over
//!   the injected final states and used as generation context.
//!
//! Rounds are synchronous: every forward of round `ℓ+1` reads only round `ℓ`
//! states, so nodes within a round are independent.
//!
//! Two executions share the per-node forward: a taped one (one tape for a
//! whole sample, used for losses) and a detached one (one tape per node
//! forward, used for inference and free to run nodes in parallel). Both
//! perform the same arithmetic and agree bit for bit.

use std::io::{Read, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::{Bound, Decoder, InputItem, KvCache, LogitRows, Segment, TapeKv};
use crate::error::{RampError, Result};
use crate::exec::Exec;
use crate::graph::EgoSubgraph;
use crate::tensor::Tensor;
use crate::tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborOrder {
    AsStored,
    SeededShuffle { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampConfig {
    pub rho: f64,
    pub mp_rounds: usize,
    pub compact: bool,
    pub neighbor_order: NeighborOrder,
}

impl Default for RampConfig {
    fn default() -> Self {
        RampConfig {
            rho: 0.1,
            mp_rounds: 2,
            compact: false,
            neighbor_order: NeighborOrder::AsStored,
        }
    }
}

impl RampConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(RampError::Config(format!("rho {} outside (0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// `⌈ρ·L⌉`, at least one. Products within 1e-9 of an integer count as that
/// integer so decimal ratios such as 0.1 behave as written.
pub fn summary_count(rho: f64, len: usize) -> usize {
    let x = rho * len as f64;
    ((x - 1e-9).ceil() as usize).max(1)
}

/// One node's summary vectors at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryState {
    pub node: String,
    pub round: usize,
    pub vectors: Tensor,
}

/// Per-round summary states of every node of a subgraph. `S` is a detached
/// [`Tensor`] or a [`Var`] on the tape of the sample being trained.
#[derive(Debug, Clone)]
pub struct MemoryTable<S> {
    node_ids: Vec<String>,
    rounds: Vec<Vec<Option<S>>>,
}

impl<S> MemoryTable<S> {
    pub fn new(node_ids: Vec<String>) -> Self {
        MemoryTable {
            node_ids,
            rounds: Vec::new(),
        }
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    /// Number of materialized rounds (round indices `0..rounds()`).
    pub fn rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn last_round(&self) -> Option<usize> {
        self.rounds.len().checked_sub(1)
    }

    pub fn get(&self, round: usize, node: usize) -> Result<&S> {
        self.rounds
            .get(round)
            .and_then(|r| r.get(node))
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                RampError::Contract(format!(
                    "no memory entry for node `{}` at round {round}",
                    self.node_ids.get(node).map_or("?", String::as_str)
                ))
            })
    }

    pub fn contains(&self, round: usize, node: usize) -> bool {
        self.get(round, node).is_ok()
    }

    pub fn is_complete(&self, round: usize) -> bool {
        self.rounds
            .get(round)
            .is_some_and(|r| r.len() == self.node_ids.len() && r.iter().all(Option::is_some))
    }

    /// Appends the next round in one batch.
    pub fn push_round(&mut self, states: Vec<Option<S>>) {
        assert_eq!(states.len(), self.node_ids.len(), "round must cover every node slot");
        self.rounds.push(states);
    }
}

impl MemoryTable<Tensor> {
    pub fn state(&self, round: usize, node: usize) -> Result<SummaryState> {
        Ok(SummaryState {
            node: self.node_ids[node].clone(),
            round,
            vectors: self.get(round, node)?.clone(),
        })
    }
}

impl MemoryTable<Var> {
    pub fn detach(&self, tape: &Tape) -> MemoryTable<Tensor> {
        MemoryTable {
            node_ids: self.node_ids.clone(),
            rounds: self
                .rounds
                .iter()
                .map(|r| r.iter().map(|s| s.map(|v| tape.value(v).clone())).collect())
                .collect(),
        }
    }
}

/// Symbolic layout of one decoder input.
#[derive(Debug, Clone, PartialEq)]
pub enum Piece {
    Tokens(Vec<u32>),
    /// Summary state of a subgraph node at the round being read.
    State(usize),
    Placeholders(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    pub pieces: Vec<Piece>,
    /// Positions whose final hidden states become the node's next state.
    pub readout: Range<usize>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.readout.end
    }

    pub fn is_empty(&self) -> bool {
        self.readout.end == 0
    }
}

/// Summary counts of every subgraph node under `rho`.
pub fn summary_counts(sub: &EgoSubgraph, rho: f64) -> Result<Vec<usize>> {
    sub.nodes
        .iter()
        .map(|n| {
            if n.tokens.is_empty() {
                Err(RampError::Precondition(format!("node `{}` has empty text", n.id)))
            } else {
                Ok(summary_count(rho, n.tokens.len()))
            }
        })
        .collect()
}

/// Round-0 input: `tokens(X_i) ++ [SUMMARY; n_i]`.
pub fn assemble_init(tokens: &[u32], rho: f64) -> Result<AssembledInput> {
    if tokens.is_empty() {
        return Err(RampError::Precondition("compression needs at least one token".into()));
    }
    let n = summary_count(rho, tokens.len());
    Ok(AssembledInput {
        pieces: vec![Piece::Tokens(tokens.to_vec()), Piece::Placeholders(n)],
        readout: tokens.len()..tokens.len() + n,
    })
}

/// Neighbor order used when assembling node `node`'s input at `round`.
pub fn ordered_neighbors(sub: &EgoSubgraph, node: usize, round: usize, cfg: &RampConfig) -> Vec<usize> {
    let mut list = sub.neighbors[node].clone();
    if let NeighborOrder::SeededShuffle { seed } = cfg.neighbor_order {
        let mix = seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((round as u64) << 48);
        list.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    }
    list
}

/// Input for advancing `node` from `round` to `round + 1`.
pub fn assemble_input<S>(
    sub: &EgoSubgraph,
    node: usize,
    memory: &MemoryTable<S>,
    round: usize,
    cfg: &RampConfig,
) -> Result<AssembledInput> {
    let counts = summary_counts(sub, cfg.rho)?;
    let mut pieces = Vec::new();
    let mut len = 0;
    for j in ordered_neighbors(sub, node, round, cfg) {
        memory.get(round, j)?;
        pieces.push(Piece::State(j));
        len += counts[j];
    }
    if !cfg.compact {
        let text = &sub.nodes[node].tokens;
        pieces.push(Piece::Tokens(text.clone()));
        len += text.len();
    }
    memory.get(round, node)?;
    pieces.push(Piece::State(node));
    len += counts[node];
    let n = counts[node];
    pieces.push(Piece::Placeholders(n));
    Ok(AssembledInput {
        pieces,
        readout: len..len + n,
    })
}

/// Turns pieces into tape segments; adjacent token runs are merged.
fn to_segments(pieces: &[Piece], mut resolve: impl FnMut(usize) -> Var) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::with_capacity(pieces.len());
    for p in pieces {
        let tokens: Vec<u32> = match p {
            Piece::State(j) => {
                out.push(Segment::Vectors(resolve(*j)));
                continue;
            }
            Piece::Tokens(t) => t.clone(),
            Piece::Placeholders(n) => vec![tokenizer::SUMMARY; *n],
        };
        if let Some(Segment::Tokens(prev)) = out.last_mut() {
            prev.extend(tokens);
        } else {
            out.push(Segment::Tokens(tokens));
        }
    }
    out
}

fn run_assembled(
    dec: &Decoder,
    tape: &mut Tape,
    bound: &Bound,
    input: &AssembledInput,
    resolve: impl FnMut(usize) -> Var,
    node_id: &str,
) -> Result<Var> {
    let segments = to_segments(&input.pieces, resolve);
    let out = dec
        .forward_on(tape, bound, &TapeKv::empty(), &segments, LogitRows::None)
        .map_err(|e| match e {
            RampError::Capacity(m) => RampError::Capacity(format!("node `{node_id}`: {m}")),
            other => other,
        })?;
    tape.slice_rows(out.hidden, input.readout.start, input.readout.end)
}

/// Decoder input of `input` as plain items, for inspection and the
/// detached decoder API.
pub fn to_items(dec: &Decoder, input: &AssembledInput, memory: &MemoryTable<Tensor>, round: usize) -> Result<Vec<InputItem>> {
    let mut items = Vec::with_capacity(input.len());
    for p in &input.pieces {
        match p {
            Piece::Tokens(t) => items.extend(t.iter().map(|&t| InputItem::Token(t))),
            Piece::Placeholders(n) => items.extend((0..*n).map(|_| InputItem::Token(dec.config().summary_token_id))),
            Piece::State(j) => {
                let s = memory.get(round, *j)?;
                items.extend((0..s.rows()).map(|r| InputItem::Vector(s.row(r).to_vec())));
            }
        }
    }
    Ok(items)
}

/// Which nodes must be computed at each round so that `targets` have
/// final-round states: a node needs itself and its neighbors one round
/// earlier.
pub fn needed_nodes(sub: &EgoSubgraph, rounds: usize, targets: &[usize]) -> Vec<Vec<bool>> {
    let n = sub.nodes.len();
    let mut need = vec![vec![false; n]; rounds + 1];
    for &t in targets {
        need[rounds][t] = true;
    }
    for r in (0..rounds).rev() {
        let (lower, upper) = need.split_at_mut(r + 1);
        let below = &mut lower[r];
        for (i, &needed) in upper[0].iter().enumerate() {
            if needed {
                below[i] = true;
                for &j in &sub.neighbors[i] {
                    below[j] = true;
                }
            }
        }
    }
    need
}

/// Compression of a single node outside any subgraph.
pub fn init_summaries(dec: &Decoder, id: &str, tokens: &[u32], rho: f64) -> Result<SummaryState> {
    let input = assemble_init(tokens, rho)?;
    let mut tape = Tape::new();
    let bound = dec.bind_frozen(&mut tape);
    let s = run_assembled(dec, &mut tape, &bound, &input, |_| unreachable!(), id)?;
    Ok(SummaryState {
        node: id.to_string(),
        round: 0,
        vectors: tape.value(s).clone(),
    })
}

fn detached_round(
    dec: &Decoder,
    sub: &EgoSubgraph,
    memory: &MemoryTable<Tensor>,
    round: Option<usize>,
    cfg: &RampConfig,
    which: &[bool],
    exec: Exec,
) -> Result<Vec<Option<Tensor>>> {
    let nodes: Vec<usize> = (0..sub.nodes.len()).collect();
    exec.try_map(&nodes, |&i| {
        if !which[i] {
            return Ok(None);
        }
        let input = match round {
            None => assemble_init(&sub.nodes[i].tokens, cfg.rho)?,
            Some(r) => assemble_input(sub, i, memory, r, cfg)?,
        };
        let mut tape = Tape::new();
        let bound = dec.bind_frozen(&mut tape);
        let s = run_detached(dec, &mut tape, &bound, &input, memory, round, &sub.nodes[i].id)?;
        Ok(Some(tape.value(s).clone()))
    })
}

fn run_detached<'a>(
    dec: &Decoder,
    tape: &mut Tape<'a>,
    bound: &Bound,
    input: &AssembledInput,
    memory: &'a MemoryTable<Tensor>,
    round: Option<usize>,
    node_id: &str,
) -> Result<Var> {
    // Place every referenced state on the tape first so the resolver below
    // does not need to borrow the tape.
    let mut placed = std::collections::HashMap::new();
    for p in &input.pieces {
        if let Piece::State(j) = p {
            if !placed.contains_key(j) {
                let t = memory.get(round.expect("states only appear after round 0"), *j)?;
                placed.insert(*j, tape.borrowed(t, false));
            }
        }
    }
    run_assembled(dec, tape, bound, input, |j| placed[&j], node_id)
}

/// State of `node` at `round + 1`, computed from `round` alone.
pub fn advance_node(dec: &Decoder, sub: &EgoSubgraph, memory: &MemoryTable<Tensor>, round: usize, node: usize, cfg: &RampConfig) -> Result<Tensor> {
    let input = assemble_input(sub, node, memory, round, cfg)?;
    let mut tape = Tape::new();
    let bound = dec.bind_frozen(&mut tape);
    let s = run_detached(dec, &mut tape, &bound, &input, memory, Some(round), &sub.nodes[node].id)?;
    Ok(tape.value(s).clone())
}

/// Round-0 states for the selected nodes (all when `which` is `None`).
pub fn init_round(
    dec: &Decoder,
    sub: &EgoSubgraph,
    cfg: &RampConfig,
    which: Option<&[bool]>,
    exec: Exec,
) -> Result<MemoryTable<Tensor>> {
    let mut memory = MemoryTable::new(sub.nodes.iter().map(|n| n.id.clone()).collect());
    let all = vec![true; sub.nodes.len()];
    let states = detached_round(dec, sub, &memory, None, cfg, which.unwrap_or(&all), exec)?;
    memory.push_round(states);
    Ok(memory)
}

/// One synchronous round over every node (prompt node included). The new
/// round is written only after all node forwards have finished.
pub fn mp_round(dec: &Decoder, sub: &EgoSubgraph, memory: &mut MemoryTable<Tensor>, cfg: &RampConfig, exec: Exec) -> Result<()> {
    let all = vec![true; sub.nodes.len()];
    mp_round_selected(dec, sub, memory, cfg, &all, exec)
}

fn mp_round_selected(
    dec: &Decoder,
    sub: &EgoSubgraph,
    memory: &mut MemoryTable<Tensor>,
    cfg: &RampConfig,
    which: &[bool],
    exec: Exec,
) -> Result<()> {
    let round = memory
        .last_round()
        .ok_or_else(|| RampError::Contract("message passing before initialization".into()))?;
    let states = detached_round(dec, sub, memory, Some(round), cfg, which, exec)?;
    memory.push_round(states);
    Ok(())
}

/// Initialization plus `cfg.mp_rounds` rounds. With `targets`, only the
/// nodes whose states reach the targets' final states are computed.
pub fn propagate(
    dec: &Decoder,
    sub: &EgoSubgraph,
    cfg: &RampConfig,
    targets: Option<&[usize]>,
    exec: Exec,
) -> Result<MemoryTable<Tensor>> {
    cfg.validate()?;
    let need = targets.map(|t| needed_nodes(sub, cfg.mp_rounds, t));
    let mut memory = init_round(dec, sub, cfg, need.as_ref().map(|n| n[0].as_slice()), exec)?;
    for r in 1..=cfg.mp_rounds {
        let all = vec![true; sub.nodes.len()];
        let which = need.as_ref().map_or(all.as_slice(), |n| n[r].as_slice());
        mp_round_selected(dec, sub, &mut memory, cfg, which, exec)?;
    }
    Ok(memory)
}

/// Taped propagation over one shared tape, so losses can reach every
/// forward of every round.
pub fn propagate_taped(
    dec: &Decoder,
    tape: &mut Tape,
    bound: &Bound,
    sub: &EgoSubgraph,
    cfg: &RampConfig,
    targets: Option<&[usize]>,
) -> Result<MemoryTable<Var>> {
    cfg.validate()?;
    let n = sub.nodes.len();
    let need = match targets {
        Some(t) => needed_nodes(sub, cfg.mp_rounds, t),
        None => vec![vec![true; n]; cfg.mp_rounds + 1],
    };
    let mut memory: MemoryTable<Var> = MemoryTable::new(sub.nodes.iter().map(|s| s.id.clone()).collect());
    let mut states = Vec::with_capacity(n);
    for (i, node) in sub.nodes.iter().enumerate() {
        if need[0][i] {
            let input = assemble_init(&node.tokens, cfg.rho)?;
            states.push(Some(run_assembled(dec, tape, bound, &input, |_| unreachable!(), &node.id)?));
        } else {
            states.push(None);
        }
    }
    memory.push_round(states);
    for r in 0..cfg.mp_rounds {
        let mut next = Vec::with_capacity(n);
        for (i, node) in sub.nodes.iter().enumerate() {
            if need[r + 1][i] {
                let input = assemble_input(sub, i, &memory, r, cfg)?;
                let s = run_assembled(dec, tape, bound, &input, |j| *memory.get(r, j).expect("checked"), &node.id)?;
                next.push(Some(s));
            } else {
                next.push(None);
            }
        }
        memory.push_round(next);
    }
    Ok(memory)
}

/// Cache rows from a forward over one node's injected states at positions
/// `0..n`.
fn node_cache(dec: &Decoder, tape: &mut Tape, bound: &Bound, states: Var) -> Result<TapeKv> {
    let rows = tape.value(states).rows();
    let out = dec.forward_on(tape, bound, &TapeKv::empty(), &[Segment::Vectors(states)], LogitRows::None)?;
    let positions: Vec<usize> = (0..rows).collect();
    out.kv_rows(tape, &positions)
}

/// Generation context from the `round` states of `nodes`, concatenated in
/// the given order.
pub fn materialize_taped(
    dec: &Decoder,
    tape: &mut Tape,
    bound: &Bound,
    memory: &MemoryTable<Var>,
    round: usize,
    nodes: &[usize],
) -> Result<TapeKv> {
    let mut parts = Vec::with_capacity(nodes.len());
    for &i in nodes {
        let s = *memory.get(round, i)?;
        parts.push(node_cache(dec, tape, bound, s)?);
    }
    TapeKv::concat(tape, &parts)
}

pub fn materialize_kv(dec: &Decoder, memory: &MemoryTable<Tensor>, round: usize, nodes: &[usize]) -> Result<KvCache> {
    let mut caches = Vec::with_capacity(nodes.len());
    for &i in nodes {
        let s = memory.get(round, i)?;
        let mut tape = Tape::new();
        let bound = dec.bind_frozen(&mut tape);
        let v = tape.borrowed(s, false);
        caches.push(node_cache(dec, &mut tape, &bound, v)?.detach(&tape));
    }
    KvCache::concat(&caches.iter().collect::<Vec<_>>())
}

/// Nodes whose caches form the context: the target alone for node-level
/// tasks, every member in member order for graph-level tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskLevel {
    Node,
    Graph,
}

pub fn context_nodes(sub: &EgoSubgraph, level: TaskLevel) -> Vec<usize> {
    match level {
        TaskLevel::Node => vec![sub.target_index()],
        TaskLevel::Graph => (0..sub.member_count()).collect(),
    }
}

/// Mean teacher-forced cross-entropy of `answer` after `ctx ++ query`.
pub fn answer_loss(dec: &Decoder, tape: &mut Tape, bound: &Bound, ctx: &TapeKv, query: &[u32], answer: &[u32]) -> Result<Var> {
    if query.is_empty() {
        return Err(RampError::Precondition("answer loss needs a non-empty query".into()));
    }
    if answer.is_empty() {
        return Err(RampError::Precondition("answer loss needs a non-empty answer".into()));
    }
    let mut input = query.to_vec();
    input.extend_from_slice(&answer[..answer.len() - 1]);
    let q = query.len();
    let out = dec.forward_on(
        tape,
        bound,
        ctx,
        &[Segment::Tokens(input)],
        LogitRows::Range(q - 1, q - 1 + answer.len()),
    )?;
    let targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(out.logits.expect("requested logits"), &targets)
}

pub fn answer_generate(dec: &Decoder, kv: &KvCache, query: &[u32], max_new: usize) -> Result<String> {
    Ok(tokenizer::detokenize(&dec.generate(kv, query, max_new)?))
}

/// Generation conditioned on the states of an earlier round. Inspection
/// only; nothing is trained through it.
pub fn round_peek(
    dec: &Decoder,
    memory: &MemoryTable<Tensor>,
    round: usize,
    nodes: &[usize],
    query: &[u32],
    max_new: usize,
) -> Result<String> {
    if round >= memory.rounds() {
        return Err(RampError::Contract(format!(
            "round {round} has not been computed ({} rounds available)",
            memory.rounds()
        )));
    }
    let kv = materialize_kv(dec, memory, round, nodes)?;
    answer_generate(dec, &kv, query, max_new)
}

/// Full node-level inference: propagate, materialize the target's cache,
/// generate.
pub fn answer_node(dec: &Decoder, sub: &EgoSubgraph, cfg: &RampConfig, query: &[u32], max_new: usize, exec: Exec) -> Result<String> {
    let target = [sub.target_index()];
    let memory = propagate(dec, sub, cfg, Some(&target), exec)?;
    let kv = materialize_kv(dec, &memory, cfg.mp_rounds, &target)?;
    answer_generate(dec, &kv, query, max_new)
}

const DUMP_MAGIC: &[u8; 8] = b"RAMPMEM\0";
const DUMP_VERSION: u32 = 1;

/// Writes every present entry as `(round, node id, rows, cols, values)`,
/// little-endian.
pub fn write_memory_dump(memory: &MemoryTable<Tensor>, w: &mut impl Write) -> std::io::Result<()> {
    let entries: Vec<(usize, usize, &Tensor)> = memory
        .rounds
        .iter()
        .enumerate()
        .flat_map(|(r, states)| states.iter().enumerate().filter_map(move |(i, s)| s.as_ref().map(|t| (r, i, t))))
        .collect();
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (r, i, t) in entries {
        let id = memory.node_ids[i].as_bytes();
        w.write_all(&(r as u32).to_le_bytes())?;
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_memory_dump(r: &mut impl Read) -> Result<Vec<SummaryState>> {
    let bad = |what: &str| RampError::Integrity(format!("memory dump: {what}"));
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|_| bad("unreadable"))?;
    let mut cur = buf.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let round = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let node = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("node id is not UTF-8"))?;
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(SummaryState {
            node,
            round,
            vectors: Tensor::matrix(rows, cols, data)?,
        });
    }
    Ok(out)
}
