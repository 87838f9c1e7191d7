//! Tiny pre-LN decoder-only transformer.
//!
//! One decoder serves every role in the pipeline: compressing node text into
//! summary states, message passing over injected summary vectors, and greedy
//! generation over a materialized key/value context. Inputs mix vocabulary
//! tokens with injected `d_model` vectors; an injected vector takes the place
//! of a token embedding row and still receives the position embedding.
//!
//! Positions are learned and absolute. Items processed against a key/value
//! context are numbered from the context length onward; cached rows keep the
//! positions they had when they were extracted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{RampError, Result};
use crate::tensor::Tensor;
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub summary_token_id: u32,
    pub eos_token_id: u32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_positions: 2048,
            summary_token_id: tokenizer::SUMMARY,
            eos_token_id: tokenizer::EOS,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(RampError::Config(format!("decoder.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(RampError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, id) in [("summary_token_id", self.summary_token_id), ("eos_token_id", self.eos_token_id)] {
            if id as usize >= self.vocab_size {
                return Err(RampError::Config(format!(
                    "{name} {id} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `V·d + P·d + n_layers·(4d² + 2·d·d_ff + d_ff + 5d) + 2d + d·V`
    pub fn param_count(&self) -> usize {
        let (d, f, v, p) = (self.d_model, self.d_ff, self.vocab_size, self.max_positions);
        v * d + p * d + self.n_layers * (4 * d * d + 2 * d * f + f + 5 * d) + 2 * d + d * v
    }
}

const PER_LAYER: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;
const LAYER_PARAM_NAMES: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

/// Decoder weights plus their stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// One model input position.
#[derive(Debug, Clone, PartialEq)]
pub enum InputItem {
    Token(u32),
    Vector(Vec<f64>),
}

/// A run of consecutive inputs as they are laid out on a tape.
#[derive(Debug, Clone)]
pub enum Segment {
    Tokens(Vec<u32>),
    /// `rows × d_model` matrix of injected vectors.
    Vectors(Var),
}

impl Segment {
    pub fn len(&self, tape: &Tape) -> usize {
        match self {
            Segment::Tokens(t) => t.len(),
            Segment::Vectors(v) => tape.value(*v).rows(),
        }
    }
}

/// Parameters bound as leaves of one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, l: usize, which: usize) -> Var {
        self.vars[2 + l * PER_LAYER + which]
    }
}

/// Key/value rows for every layer, living on a tape.
#[derive(Debug, Clone)]
pub struct TapeKv {
    pub layers: Vec<(Var, Var)>,
    pub len: usize,
}

impl TapeKv {
    pub fn empty() -> Self {
        TapeKv {
            layers: Vec::new(),
            len: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Places a detached cache on the tape as constants.
    pub fn constant<'a>(tape: &mut Tape<'a>, kv: &'a KvCache) -> Self {
        if kv.is_empty() {
            return TapeKv::empty();
        }
        let layers = kv
            .layers
            .iter()
            .map(|l| (tape.borrowed(&l.keys, false), tape.borrowed(&l.values, false)))
            .collect();
        TapeKv { layers, len: kv.len() }
    }

    /// Row-wise concatenation in the given order.
    pub fn concat(tape: &mut Tape, parts: &[TapeKv]) -> Result<TapeKv> {
        let parts: Vec<&TapeKv> = parts.iter().filter(|p| !p.is_empty()).collect();
        match parts.len() {
            0 => return Ok(TapeKv::empty()),
            1 => return Ok(parts[0].clone()),
            _ => {}
        }
        let n_layers = parts[0].layers.len();
        if parts.iter().any(|p| p.layers.len() != n_layers) {
            return Err(RampError::Contract("caches disagree on layer count".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let ks: Vec<Var> = parts.iter().map(|p| p.layers[l].0).collect();
            let vs: Vec<Var> = parts.iter().map(|p| p.layers[l].1).collect();
            layers.push((tape.concat_rows(&ks)?, tape.concat_rows(&vs)?));
        }
        Ok(TapeKv {
            layers,
            len: parts.iter().map(|p| p.len).sum(),
        })
    }

    pub fn detach(&self, tape: &Tape) -> KvCache {
        KvCache {
            layers: self
                .layers
                .iter()
                .map(|&(k, v)| LayerCache {
                    keys: tape.value(k).clone(),
                    values: tape.value(v).clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Detached per-layer key/value rows. New items are positioned at
/// `len()` onward when attending over the cache.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn empty() -> Self {
        KvCache::default()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(parts: &[&KvCache]) -> Result<KvCache> {
        let parts: Vec<&KvCache> = parts.iter().copied().filter(|p| !p.is_empty()).collect();
        let Some(first) = parts.first() else {
            return Ok(KvCache::empty());
        };
        let n_layers = first.layers.len();
        if parts.iter().any(|p| p.layers.len() != n_layers) {
            return Err(RampError::Contract("caches disagree on layer count".into()));
        }
        let cols = first.layers[0].keys.cols();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let ks: Vec<&Tensor> = parts.iter().map(|p| &p.layers[l].keys).collect();
            let vs: Vec<&Tensor> = parts.iter().map(|p| &p.layers[l].values).collect();
            layers.push(LayerCache {
                keys: Tensor::concat_rows(&ks, cols)?,
                values: Tensor::concat_rows(&vs, cols)?,
            });
        }
        Ok(KvCache { layers })
    }

    fn append(&mut self, other: KvCache) -> Result<()> {
        if self.is_empty() {
            *self = other;
            return Ok(());
        }
        *self = KvCache::concat(&[self, &other])?;
        Ok(())
    }
}

/// Which rows to project onto the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    None,
    All,
    Range(usize, usize),
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// Final-norm hidden states, `T × d_model`.
    pub hidden: Var,
    pub logits: Option<Var>,
    /// Keys and values of the new (non-cached) positions, per layer.
    pub local_kv: Vec<(Var, Var)>,
}

impl ForwardOut {
    /// Cache rows for the given local positions.
    pub fn kv_rows(&self, tape: &mut Tape, positions: &[usize]) -> Result<TapeKv> {
        if positions.is_empty() {
            return Ok(TapeKv::empty());
        }
        let mut layers = Vec::with_capacity(self.local_kv.len());
        for &(k, v) in &self.local_kv {
            layers.push((tape.gather_rows(k, positions)?, tape.gather_rows(v, positions)?));
        }
        Ok(TapeKv {
            layers,
            len: positions.len(),
        })
    }
}

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v, p) = (config.d_model, config.d_ff, config.vocab_size, config.max_positions);
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        add("tok_emb".into(), Tensor::randn(vec![v, d], 0.1, &mut rng));
        add("pos_emb".into(), Tensor::randn(vec![p, d], 0.1, &mut rng));
        for l in 0..config.n_layers {
            for (i, suffix) in LAYER_PARAM_NAMES.iter().enumerate() {
                let t = match i {
                    LN1_G | LN2_G => Tensor::filled(vec![d], 1.0),
                    LN1_B | LN2_B | B2 => Tensor::zeros(vec![d]),
                    B1 => Tensor::zeros(vec![f]),
                    WQ | WK | WV => Tensor::randn(vec![d, d], 0.02, &mut rng),
                    WO => Tensor::randn(vec![d, d], resid_std, &mut rng),
                    W1 => Tensor::randn(vec![d, f], 0.02, &mut rng),
                    W2 => Tensor::randn(vec![f, d], resid_std, &mut rng),
                    _ => unreachable!(),
                };
                add(format!("layers.{l}.{suffix}"), t);
            }
        }
        add("ln_f.gain".into(), Tensor::filled(vec![d], 1.0));
        add("ln_f.bias".into(), Tensor::zeros(vec![d]));
        add("lm_head".into(), Tensor::randn(vec![d, v], 0.02, &mut rng));
        Ok(Decoder { config, names, params })
    }

    /// Rebuilds a decoder from named tensors, checking every shape.
    pub fn from_named(config: DecoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Decoder::new(config.clone(), 0)?;
        if named.len() != template.params.len() {
            return Err(RampError::Integrity(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want)) in named.into_iter().zip(template.named()) {
            if name != want_name {
                return Err(RampError::Integrity(format!(
                    "parameter `{name}` where `{want_name}` was expected"
                )));
            }
            if t.shape() != want.shape() {
                return Err(RampError::Integrity(format!(
                    "parameter `{name}` has shape {:?}, config needs {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            params.push(t);
        }
        Ok(Decoder {
            config,
            names: template.names,
            params,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn token_embedding(&self, id: u32) -> Vec<f64> {
        self.params[0].row(id as usize).to_vec()
    }

    /// Binds parameters to `tape`; `trainable(i)` selects which get gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: impl Fn(usize) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.borrowed(p, trainable(i)))
            .collect();
        Bound { vars }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        self.bind(tape, |_| false)
    }

    /// Causal forward over `segments`, attending additionally over `ctx`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &TapeKv,
        segments: &[Segment],
        logit_rows: LogitRows,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        if !ctx.is_empty() && ctx.layers.len() != cfg.n_layers {
            return Err(RampError::Contract(format!(
                "cache has {} layers, decoder has {}",
                ctx.layers.len(),
                cfg.n_layers
            )));
        }
        let d = cfg.d_model;
        let offset = ctx.len;
        let total: usize = segments.iter().map(|s| s.len(tape)).sum();
        if total == 0 {
            return Err(RampError::Precondition("forward over an empty sequence".into()));
        }
        if offset + total > cfg.max_positions {
            return Err(RampError::Capacity(format!(
                "sequence of {} positions exceeds max_positions {}",
                offset + total,
                cfg.max_positions
            )));
        }

        let mut pieces = Vec::with_capacity(segments.len());
        for seg in segments {
            match seg {
                Segment::Tokens(ids) if ids.is_empty() => {}
                Segment::Tokens(ids) => {
                    let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
                    pieces.push(tape.gather_rows(bound.vars[0], &ids)?);
                }
                Segment::Vectors(v) => {
                    if tape.value(*v).cols() != d {
                        return Err(RampError::Dimension(format!(
                            "injected vectors have width {}, d_model is {d}",
                            tape.value(*v).cols()
                        )));
                    }
                    if tape.value(*v).rows() > 0 {
                        pieces.push(*v);
                    }
                }
            }
        }
        let embedded = if pieces.len() == 1 {
            pieces[0]
        } else {
            tape.concat_rows(&pieces)?
        };
        let positions: Vec<usize> = (offset..offset + total).collect();
        let pos = tape.gather_rows(bound.vars[1], &positions)?;
        let mut x = tape.add(embedded, pos)?;

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut local_kv = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let h = tape.layer_norm(x, bound.layer(l, LN1_G), bound.layer(l, LN1_B))?;
            let q = tape.matmul(h, bound.layer(l, WQ))?;
            let k = tape.matmul(h, bound.layer(l, WK))?;
            let v = tape.matmul(h, bound.layer(l, WV))?;
            local_kv.push((k, v));
            let (keys, values) = if ctx.is_empty() {
                (k, v)
            } else {
                let (ck, cv) = ctx.layers[l];
                (tape.concat_rows(&[ck, k])?, tape.concat_rows(&[cv, v])?)
            };
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let (qh, kh, vh) = if cfg.n_heads == 1 {
                    (q, keys, values)
                } else {
                    let (a, b) = (hd * dh, (hd + 1) * dh);
                    (
                        tape.slice_cols(q, a, b)?,
                        tape.slice_cols(keys, a, b)?,
                        tape.slice_cols(values, a, b)?,
                    )
                };
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let probs = tape.causal_softmax(scores, offset)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let attn = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let attn = tape.matmul(attn, bound.layer(l, WO))?;
            x = tape.add(x, attn)?;

            let h = tape.layer_norm(x, bound.layer(l, LN2_G), bound.layer(l, LN2_B))?;
            let f = tape.matmul(h, bound.layer(l, W1))?;
            let f = tape.add_row_bias(f, bound.layer(l, B1))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, bound.layer(l, W2))?;
            let f = tape.add_row_bias(f, bound.layer(l, B2))?;
            x = tape.add(x, f)?;
        }
        let n = bound.vars.len();
        let hidden = tape.layer_norm(x, bound.vars[n - 3], bound.vars[n - 2])?;
        let logits = match logit_rows {
            LogitRows::None => None,
            LogitRows::All => Some(tape.matmul(hidden, bound.vars[n - 1])?),
            LogitRows::Range(a, b) => {
                let rows = tape.slice_rows(hidden, a, b)?;
                Some(tape.matmul(rows, bound.vars[n - 1])?)
            }
        };
        Ok(ForwardOut {
            hidden,
            logits,
            local_kv,
        })
    }

    fn items_to_segments(&self, tape: &mut Tape, items: &[InputItem]) -> Result<Vec<Segment>> {
        let d = self.config.d_model;
        let mut segments = Vec::new();
        let mut tokens = Vec::new();
        let mut vectors: Vec<f64> = Vec::new();
        let flush_vectors = |tape: &mut Tape, vectors: &mut Vec<f64>, segments: &mut Vec<Segment>| -> Result<()> {
            if !vectors.is_empty() {
                let rows = vectors.len() / d;
                let t = Tensor::matrix(rows, d, std::mem::take(vectors))?;
                segments.push(Segment::Vectors(tape.leaf(t, false)));
            }
            Ok(())
        };
        for item in items {
            match item {
                InputItem::Token(id) => {
                    if *id as usize >= self.config.vocab_size {
                        return Err(RampError::Index(format!(
                            "token {id} outside vocabulary of {}",
                            self.config.vocab_size
                        )));
                    }
                    flush_vectors(tape, &mut vectors, &mut segments)?;
                    tokens.push(*id);
                }
                InputItem::Vector(v) => {
                    if v.len() != d {
                        return Err(RampError::Dimension(format!(
                            "injected vector of width {}, d_model is {d}",
                            v.len()
                        )));
                    }
                    if !tokens.is_empty() {
                        segments.push(Segment::Tokens(std::mem::take(&mut tokens)));
                    }
                    vectors.extend_from_slice(v);
                }
            }
        }
        flush_vectors(tape, &mut vectors, &mut segments)?;
        if !tokens.is_empty() {
            segments.push(Segment::Tokens(tokens));
        }
        Ok(segments)
    }

    /// Returns `(hidden, logits)` for every position.
    pub fn forward(&self, items: &[InputItem]) -> Result<(Tensor, Tensor)> {
        self.forward_with_context(&KvCache::empty(), items)
    }

    pub fn forward_with_context(&self, kv: &KvCache, items: &[InputItem]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let ctx = TapeKv::constant(&mut tape, kv);
        let segments = self.items_to_segments(&mut tape, items)?;
        let out = self.forward_on(&mut tape, &bound, &ctx, &segments, LogitRows::All)?;
        let logits = out.logits.expect("requested logits");
        Ok((tape.value(out.hidden).clone(), tape.value(logits).clone()))
    }

    /// Keys and values at `positions`, from a single forward over `items`.
    pub fn extract_kv(&self, items: &[InputItem], positions: &[usize]) -> Result<KvCache> {
        if let Some(&bad) = positions.iter().find(|&&p| p >= items.len()) {
            return Err(RampError::Index(format!(
                "position {bad} outside a {}-item sequence",
                items.len()
            )));
        }
        if positions.is_empty() {
            return Ok(KvCache::empty());
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let segments = self.items_to_segments(&mut tape, items)?;
        let out = self.forward_on(&mut tape, &bound, &TapeKv::empty(), &segments, LogitRows::None)?;
        let kv = out.kv_rows(&mut tape, positions)?;
        Ok(kv.detach(&tape))
    }

    /// Greedy decoding over `kv ++ prompt`, stopping at end-of-sequence or
    /// after `max_new` tokens. Each step processes only the newest token.
    pub fn generate(&self, kv: &KvCache, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        Ok(self.generate_until_eos(kv, prompt, max_new)?.0)
    }

    /// Greedy generation; the flag tells whether EOS was produced within
    /// `max_new` tokens.
    pub fn generate_until_eos(&self, kv: &KvCache, prompt: &[u32], max_new: usize) -> Result<(Vec<u32>, bool)> {
        if prompt.is_empty() {
            return Err(RampError::Precondition("generation needs a non-empty prompt".into()));
        }
        let mut out = Vec::new();
        if max_new == 0 {
            return Ok((out, false));
        }
        let mut work = kv.clone();
        let mut step: Vec<u32> = prompt.to_vec();
        loop {
            let (next, fresh) = self.step(&work, &step)?;
            if next == self.config.eos_token_id {
                return Ok((out, true));
            }
            out.push(next);
            if out.len() == max_new {
                return Ok((out, false));
            }
            work.append(fresh)?;
            step = vec![next];
        }
    }

    /// Runs `tokens` against `ctx`; returns the argmax after the last token
    /// and the new key/value rows.
    fn step(&self, ctx: &KvCache, tokens: &[u32]) -> Result<(u32, KvCache)> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let ctx_vars = TapeKv::constant(&mut tape, ctx);
        let t = tokens.len();
        let segments = [Segment::Tokens(tokens.to_vec())];
        let out = self.forward_on(&mut tape, &bound, &ctx_vars, &segments, LogitRows::Range(t - 1, t))?;
        let logits = tape.value(out.logits.expect("requested logits"));
        let next = argmax(logits.row(0)) as u32;
        let positions: Vec<usize> = (0..t).collect();
        let fresh = out.kv_rows(&mut tape, &positions)?.detach(&tape);
        Ok((next, fresh))
    }
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
