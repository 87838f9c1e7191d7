//! Synthetic text-rich graphs with planted labels.
//!
//! Each node belongs to a class. Its text is lowercase filler drawn from a
//! shared word list (with a mild per-class preference), and with probability
//! `self_signal` it also contains the class keyword in uppercase. Edges join
//! same-class nodes with probability `homophily`, so a node missing its
//! keyword can still be classified from its neighbors.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RampError, Result};
use crate::graph::{NodeRecord, TextRichGraph};

const CLASS_NAMES: [&str; 8] = ["amber", "cyan", "lime", "violet", "indigo", "olive", "mauve", "sepia"];

const FILLER: [&str; 32] = [
    "the", "of", "and", "a", "to", "in", "is", "on", "with", "for", "that", "as", "by", "this", "from", "at", "we",
    "an", "be", "it", "our", "new", "data", "model", "work", "set", "use", "one", "two", "time", "form", "case",
];

/// Weight multiplier on a class's preferred filler words.
const STYLE_SKEW: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_nodes: usize,
    pub n_classes: usize,
    pub homophily: f64,
    pub self_signal: f64,
    /// Inclusive byte-length range of node texts.
    pub text_len: (usize, usize),
    pub degree: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_nodes: 300,
            n_classes: 4,
            homophily: 0.85,
            self_signal: 0.6,
            text_len: (16, 48),
            degree: 4.0,
            seed: 0,
        }
    }
}

pub const MAX_NODES: usize = 5000;

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RampError::Validation(m));
        for (name, p) in [("homophily", self.homophily), ("self_signal", self.self_signal)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.text_len.0 < 4 || self.text_len.0 > self.text_len.1 {
            return bad(format!("text_len must satisfy 4 <= min <= max, got {:?}", self.text_len));
        }
        if self.n_nodes < 2 || self.n_nodes > MAX_NODES {
            return bad(format!("n_nodes must lie in [2, {MAX_NODES}], got {}", self.n_nodes));
        }
        if !(self.degree >= 0.0 && self.degree.is_finite()) {
            return bad(format!("degree must be non-negative, got {}", self.degree));
        }
        Ok(())
    }
}

/// Label and keyword of class `k`.
pub fn class_label(k: usize) -> String {
    CLASS_NAMES.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string())
}

pub fn class_keyword(k: usize) -> String {
    class_label(k).to_uppercase()
}

pub fn class_labels(n: usize) -> Vec<String> {
    (0..n).map(class_label).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Node id → subset name, sorted by id.
    pub fn to_json(&self) -> String {
        let mut map = BTreeMap::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                map.insert(id.clone(), name);
            }
        }
        serde_json::to_string_pretty(&map).expect("split serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, String> =
            serde_json::from_str(s).map_err(|e| RampError::Parse { line: e.line(), msg: e.to_string() })?;
        let mut split = Split::default();
        for (id, subset) in map {
            match subset.as_str() {
                "train" => split.train.push(id),
                "val" => split.val.push(id),
                "test" => split.test.push(id),
                other => return Err(RampError::Validation(format!("node `{id}`: unknown subset `{other}`"))),
            }
        }
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| RampError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| RampError::io(path, e))?)
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub graph: TextRichGraph,
    pub split: Split,
}

fn node_text(rng: &mut ChaCha8Rng, class: usize, spec: &CorpusSpec) -> String {
    let len = rng.gen_range(spec.text_len.0..=spec.text_len.1);
    let keyword = rng.gen_bool(spec.self_signal).then(|| class_keyword(class));
    // Class k prefers every n_classes-th filler word starting at k.
    let weights: Vec<f64> = (0..FILLER.len())
        .map(|w| if w % spec.n_classes == class % spec.n_classes { STYLE_SKEW } else { 1.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut words: Vec<String> = Vec::new();
    let mut used = 0;
    while used < len {
        let mut r = rng.gen::<f64>() * total;
        let mut pick = FILLER.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        used += FILLER[pick].len() + usize::from(!words.is_empty());
        words.push(FILLER[pick].to_string());
    }
    if let Some(k) = keyword {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, k.clone());
        // The text is cut to `len` below; a keyword that would be cut moves
        // to the front.
        let start: usize = words[..at].iter().map(|w| w.len() + 1).sum();
        if start + k.len() > len {
            let k = words.remove(at);
            words.insert(0, k);
        }
    }
    let mut text = words.join(" ");
    text.truncate(len);
    text
}

/// Deterministic corpus generation; see the module docs for the model.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_nodes;
    let width = (n - 1).to_string().len();
    let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.n_classes)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("n{i:0width$}")).collect();
    let nodes: Vec<NodeRecord> = (0..n)
        .map(|i| NodeRecord::new(ids[i].clone(), node_text(&mut rng, classes[i], spec), Some(class_label(classes[i]))))
        .collect();

    let mut same = Vec::new();
    let mut cross = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if classes[a] == classes[b] {
                same.push((a, b));
            } else {
                cross.push((a, b));
            }
        }
    }
    let n_edges = (spec.degree * n as f64 / 2.0).round() as usize;
    let n_same = (spec.homophily * n_edges as f64).round() as usize;
    let n_cross = n_edges - n_same;
    if n_same > same.len() || n_cross > cross.len() {
        return Err(RampError::Generation(format!(
            "cannot place {n_same} same-class and {n_cross} cross-class edges: only {} and {} node pairs exist",
            same.len(),
            cross.len()
        )));
    }
    let mut chosen: Vec<(usize, usize)> = same.choose_multiple(&mut rng, n_same).copied().collect();
    chosen.extend(cross.choose_multiple(&mut rng, n_cross).copied());
    chosen.sort_unstable();
    let edges = chosen
        .into_iter()
        .map(|(a, b)| (ids[a].clone(), ids[b].clone(), None))
        .collect();
    let graph = TextRichGraph::new(nodes, edges)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let pick = |r: std::ops::Range<usize>| {
        let mut v: Vec<String> = order[r].iter().map(|&i| ids[i].clone()).collect();
        v.sort();
        v
    };
    let split = Split {
        train: pick(0..n_train),
        val: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..n),
    };
    Ok(Corpus { graph, split })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: String,
    pub label: String,
    pub has_self_signal: bool,
    /// Most frequent neighbor label (ties go to the smallest label); `None`
    /// for isolated nodes.
    pub majority_neighbor_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAudit {
    pub rows: Vec<AuditRow>,
    pub with_self_signal: usize,
    pub without_self_signal: usize,
    /// Nodes lacking self signal but having neighbors.
    pub unsignalled_with_neighbors: usize,
    /// Among those, the fraction whose neighbor majority is the true label.
    pub neighbor_majority_accuracy: f64,
    pub same_class_edge_fraction: f64,
}

/// Per-node signal availability. A node has self signal when its text
/// contains the uppercase keyword of its label.
pub fn signal_audit(g: &TextRichGraph) -> Result<SignalAudit> {
    let labels: Vec<&str> = g
        .nodes()
        .iter()
        .map(|n| n.label.as_deref().ok_or_else(|| RampError::Validation(format!("audit: node `{}` has no label", n.id))))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(labels.len());
    for (i, node) in g.nodes().iter().enumerate() {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &j in g.neighbors(i) {
            *counts.entry(labels[j]).or_insert(0) += 1;
        }
        let majority = counts
            .iter()
            .fold(None::<(&str, usize)>, |best, (&l, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((l, c)),
            })
            .map(|(l, _)| l.to_string());
        rows.push(AuditRow {
            id: node.id.clone(),
            label: labels[i].to_string(),
            has_self_signal: node.text.contains(&labels[i].to_uppercase()),
            majority_neighbor_class: majority,
        });
    }
    let with = rows.iter().filter(|r| r.has_self_signal).count();
    let eligible: Vec<&AuditRow> = rows.iter().filter(|r| !r.has_self_signal && r.majority_neighbor_class.is_some()).collect();
    let hits = eligible
        .iter()
        .filter(|r| r.majority_neighbor_class.as_deref() == Some(r.label.as_str()))
        .count();
    let same = g
        .edges()
        .iter()
        .filter(|e| labels[e.a] == labels[e.b])
        .count();
    Ok(SignalAudit {
        with_self_signal: with,
        without_self_signal: rows.len() - with,
        unsignalled_with_neighbors: eligible.len(),
        neighbor_majority_accuracy: if eligible.is_empty() { 0.0 } else { hits as f64 / eligible.len() as f64 },
        same_class_edge_fraction: if g.edge_count() == 0 { 0.0 } else { same as f64 / g.edge_count() as f64 },
        rows,
    })
}
