//! Text-rich graphs: JSON-lines ingestion, ego-subgraphs with a prompt node,
//! edge reification and the two neighbor shuffles.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RampError, Result};
use crate::tokenizer::tokenize;

pub const PROMPT_ID: &str = "<prompt>";

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub label: Option<String>,
}

impl NodeRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<String>) -> Self {
        let text = text.into();
        NodeRecord {
            id: id.into(),
            tokens: tokenize(&text),
            text,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub label: Option<String>,
}

/// Undirected graph whose nodes carry raw text. Neighbor lists are sorted
/// by node id.
#[derive(Debug, Clone)]
pub struct TextRichGraph {
    nodes: Vec<NodeRecord>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Line {
    Node(NodeLine),
    Edge(EdgeLine),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeLine {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeLine {
    src: String,
    dst: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

impl TextRichGraph {
    /// Builds and validates a graph. Edges are symmetrized; a pair listed
    /// twice is stored once and keeps its first label.
    pub fn new(nodes: Vec<NodeRecord>, edges: Vec<(String, String, Option<String>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(RampError::Validation(format!("duplicate node id `{}`", n.id)));
            }
        }
        let mut seen = HashSet::new();
        let mut stored = Vec::new();
        for (src, dst, label) in edges {
            let a = *index
                .get(&src)
                .ok_or_else(|| RampError::Validation(format!("edge endpoint `{src}` is not a node")))?;
            let b = *index
                .get(&dst)
                .ok_or_else(|| RampError::Validation(format!("edge endpoint `{dst}` is not a node")))?;
            if a == b {
                return Err(RampError::Validation(format!("self-loop on `{src}`")));
            }
            if seen.insert((a.min(b), a.max(b))) {
                stored.push(Edge { a, b, label });
            }
        }
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for e in &stored {
            adjacency[e.a].push(e.b);
            adjacency[e.b].push(e.a);
        }
        for list in &mut adjacency {
            list.sort_by(|&x, &y| nodes[x].id.cmp(&nodes[y].id));
        }
        Ok(TextRichGraph {
            nodes,
            index,
            edges: stored,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    /// Sorted-by-id neighbor indices.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn neighbor_ids(&self, id: &str) -> Option<Vec<&str>> {
        let i = self.index_of(id)?;
        Some(self.adjacency[i].iter().map(|&j| self.nodes[j].id.as_str()).collect())
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].contains(&b)
    }

    pub fn parse_jsonl(content: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (i, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line).map_err(|e| RampError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            match parsed {
                Line::Node(n) => nodes.push(NodeRecord::new(n.id, n.text, n.label)),
                Line::Edge(e) => edges.push((e.src, e.dst, e.label)),
            }
        }
        TextRichGraph::new(nodes, edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let content = std::fs::read_to_string(&path).map_err(|e| RampError::io(&path, e))?;
        Self::parse_jsonl(&content)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let line = Line::Node(NodeLine {
                id: n.id.clone(),
                text: n.text.clone(),
                label: n.label.clone(),
            });
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("serializable"));
        }
        for e in &self.edges {
            let line = Line::Edge(EdgeLine {
                src: self.nodes[e.a].id.clone(),
                dst: self.nodes[e.b].id.clone(),
                label: e.label.clone(),
            });
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("serializable"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_jsonl()).map_err(|e| RampError::io(&path, e))
    }
}

/// Replaces every labeled edge `(u, v, label)` by a node carrying `label`
/// joined to both endpoints.
pub fn reify_edges(g: &TextRichGraph) -> Result<TextRichGraph> {
    let mut nodes = g.nodes.clone();
    let mut edges = Vec::with_capacity(2 * g.edges.len());
    for (k, e) in g.edges.iter().enumerate() {
        let label = e.label.clone().ok_or_else(|| {
            RampError::Validation(format!(
                "edge {}–{} has no label to reify",
                g.nodes[e.a].id, g.nodes[e.b].id
            ))
        })?;
        let mut id = format!("edge:{k}");
        while g.index.contains_key(&id) {
            id.push('\'');
        }
        nodes.push(NodeRecord::new(id.clone(), label, None));
        edges.push((g.nodes[e.a].id.clone(), id.clone(), None));
        edges.push((id, g.nodes[e.b].id.clone(), None));
    }
    TextRichGraph::new(nodes, edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubNode {
    pub id: String,
    pub tokens: Vec<u32>,
    pub label: Option<String>,
}

/// Hop-limited neighborhood of `target` plus an optional prompt node that is
/// adjacent to every member. Node `0` is the target; when present the prompt
/// node is the last node.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSubgraph {
    pub target: String,
    pub nodes: Vec<SubNode>,
    /// Per-node neighbor lists (indices into `nodes`), consumed as-is by
    /// propagation.
    pub neighbors: Vec<Vec<usize>>,
    pub has_prompt: bool,
}

impl EgoSubgraph {
    pub fn member_count(&self) -> usize {
        self.nodes.len() - usize::from(self.has_prompt)
    }

    pub fn members(&self) -> &[SubNode] {
        &self.nodes[..self.member_count()]
    }

    pub fn prompt_index(&self) -> Option<usize> {
        self.has_prompt.then(|| self.nodes.len() - 1)
    }

    pub fn target_index(&self) -> usize {
        0
    }

    /// Undirected edge set as sorted index pairs.
    pub fn edge_set(&self) -> Vec<(usize, usize)> {
        let mut set: Vec<(usize, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i.min(j), i.max(j))))
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, l)| l.iter().all(|&j| self.neighbors[j].contains(&i)))
    }

    /// Same members without the prompt node.
    pub fn without_prompt(&self) -> EgoSubgraph {
        if !self.has_prompt {
            return self.clone();
        }
        let p = self.nodes.len() - 1;
        EgoSubgraph {
            target: self.target.clone(),
            nodes: self.nodes[..p].to_vec(),
            neighbors: self.neighbors[..p]
                .iter()
                .map(|l| l.iter().copied().filter(|&j| j != p).collect())
                .collect(),
            has_prompt: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoParams {
    pub hops: usize,
    pub max_size: usize,
}

impl Default for EgoParams {
    fn default() -> Self {
        EgoParams { hops: 2, max_size: 20 }
    }
}

/// Breadth-first expansion around `target`. A hop whose new nodes would push
/// the member count past `max_size` is uniformly subsampled.
pub fn ego_subgraph(
    g: &TextRichGraph,
    target: &str,
    params: EgoParams,
    seed: u64,
    query: Option<&str>,
) -> Result<EgoSubgraph> {
    let t = g.index_of(target).ok_or_else(|| RampError::Lookup(target.to_string()))?;
    if params.hops == 0 || params.max_size == 0 {
        return Err(RampError::Precondition("hops and max_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = vec![t];
    let mut visited: HashSet<usize> = HashSet::from([t]);
    let mut frontier = vec![t];
    for _ in 0..params.hops {
        let room = params.max_size - members.len();
        if room == 0 || frontier.is_empty() {
            break;
        }
        let mut candidates: Vec<usize> = frontier
            .iter()
            .flat_map(|&f| g.neighbors(f).iter().copied())
            .filter(|j| !visited.contains(j))
            .collect();
        candidates.sort_by(|&x, &y| g.nodes[x].id.cmp(&g.nodes[y].id));
        candidates.dedup();
        if candidates.len() > room {
            let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), room).into_vec();
            picked.sort_unstable();
            candidates = picked.into_iter().map(|i| candidates[i]).collect();
        }
        visited.extend(candidates.iter().copied());
        members.extend(candidates.iter().copied());
        frontier = candidates;
    }

    let local: HashMap<usize, usize> = members.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut nodes: Vec<SubNode> = members
        .iter()
        .map(|&i| SubNode {
            id: g.nodes[i].id.clone(),
            tokens: g.nodes[i].tokens.clone(),
            label: g.nodes[i].label.clone(),
        })
        .collect();
    let mut neighbors: Vec<Vec<usize>> = members
        .iter()
        .map(|&i| g.neighbors(i).iter().filter_map(|j| local.get(j).copied()).collect())
        .collect();
    let has_prompt = query.is_some();
    if let Some(q) = query {
        let p = nodes.len();
        for list in &mut neighbors {
            list.push(p);
        }
        neighbors.push((0..p).collect());
        nodes.push(SubNode {
            id: PROMPT_ID.to_string(),
            tokens: tokenize(q),
            label: None,
        });
    }
    Ok(EgoSubgraph {
        target: target.to_string(),
        nodes,
        neighbors,
        has_prompt,
    })
}

/// Applies one permutation per node to its neighbor list:
/// `new[i][k] = old[i][perms[i][k]]`.
pub fn permute_neighbor_lists(sub: &EgoSubgraph, perms: &[Vec<usize>]) -> Result<EgoSubgraph> {
    if perms.len() != sub.neighbors.len() {
        return Err(RampError::Contract("one permutation per node required".into()));
    }
    let mut out = sub.clone();
    for (list, perm) in out.neighbors.iter_mut().zip(perms) {
        if !is_permutation(perm, list.len()) {
            return Err(RampError::Contract("invalid neighbor permutation".into()));
        }
        *list = perm.iter().map(|&k| list[k]).collect();
    }
    Ok(out)
}

/// Seeded permutation of every node's neighbor list; vertex and edge sets
/// are unchanged.
pub fn shuffle_neighbor_order(sub: &EgoSubgraph, seed: u64) -> EgoSubgraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sub.clone();
    for list in &mut out.neighbors {
        list.shuffle(&mut rng);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleStatus {
    Applied,
    /// Fewer than two members; the subgraph is returned unchanged.
    TooFewMembers,
}

/// Member `i` receives member `perm[i]`'s neighbor list. The prompt node
/// keeps its own list.
pub fn cross_node_shuffle_with(sub: &EgoSubgraph, perm: &[usize]) -> Result<EgoSubgraph> {
    let m = sub.member_count();
    if !is_permutation(perm, m) {
        return Err(RampError::Contract(format!("expected a permutation of {m} members")));
    }
    let mut out = sub.clone();
    for (i, &src) in perm.iter().enumerate() {
        out.neighbors[i] = sub.neighbors[src].clone();
    }
    Ok(out)
}

pub fn cross_node_shuffle(sub: &EgoSubgraph, seed: u64) -> (EgoSubgraph, ShuffleStatus) {
    let m = sub.member_count();
    if m < 2 {
        return (sub.clone(), ShuffleStatus::TooFewMembers);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let out = cross_node_shuffle_with(sub, &perm).expect("valid permutation");
    (out, ShuffleStatus::Applied)
}

fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    perm.iter().all(|&k| k < n && !std::mem::replace(&mut seen[k], true))
}

/// Multiset of neighbor-list lengths.
pub fn degree_multiset(sub: &EgoSubgraph) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for l in &sub.neighbors {
        *counts.entry(l.len()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(id: &str) -> NodeRecord {
        NodeRecord::new(id, format!("text of {id}"), None)
    }

    fn edge(a: &str, b: &str) -> (String, String, Option<String>) {
        (a.to_string(), b.to_string(), None)
    }

    fn star(n: usize) -> TextRichGraph {
        let mut nodes = vec![node("hub")];
        let mut edges = Vec::new();
        for i in 0..n {
            let id = format!("n{i:02}");
            nodes.push(node(&id));
            edges.push(edge("hub", &id));
        }
        TextRichGraph::new(nodes, edges).unwrap()
    }

    #[test]
    fn load_symmetrizes_and_dedups() {
        let src = r#"{"node": {"id": "a", "text": "alpha"}}
{"node": {"id": "b", "text": "beta", "label": "x"}}
{"edge": {"src": "a", "dst": "b"}}
{"edge": {"src": "b", "dst": "a"}}
"#;
        let g = TextRichGraph::parse_jsonl(src).unwrap();
        assert_eq!(g.neighbor_ids("a").unwrap(), vec!["b"]);
        assert_eq!(g.neighbor_ids("b").unwrap(), vec!["a"]);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.node("b").unwrap().label.as_deref(), Some("x"));
        let again = TextRichGraph::parse_jsonl(&g.to_jsonl()).unwrap();
        assert_eq!(again.to_jsonl(), g.to_jsonl());
    }

    #[test]
    fn load_errors() {
        let bad = "{\"node\": {\"id\": \"a\", \"text\": \"x\"}}\n{\"node\": {\"id\": 3}}\n";
        match TextRichGraph::parse_jsonl(bad) {
            Err(RampError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let dangling = "{\"node\": {\"id\": \"a\", \"text\": \"x\"}}\n{\"edge\": {\"src\": \"a\", \"dst\": \"zz\"}}\n";
        assert!(matches!(TextRichGraph::parse_jsonl(dangling), Err(RampError::Validation(_))));
        let unknown = "{\"node\": {\"id\": \"a\", \"text\": \"x\", \"colour\": 1}}\n";
        assert!(matches!(TextRichGraph::parse_jsonl(unknown), Err(RampError::Parse { .. })));
        let looped = "{\"node\": {\"id\": \"a\", \"text\": \"x\"}}\n{\"edge\": {\"src\": \"a\", \"dst\": \"a\"}}\n";
        assert!(matches!(TextRichGraph::parse_jsonl(looped), Err(RampError::Validation(_))));
    }

    #[test]
    fn ego_isolated_and_small() {
        let g = TextRichGraph::new(vec![node("solo")], vec![]).unwrap();
        let sub = ego_subgraph(&g, "solo", EgoParams { hops: 1, max_size: 10 }, 0, Some("q")).unwrap();
        assert_eq!(sub.member_count(), 1);
        assert_eq!(sub.neighbors[sub.prompt_index().unwrap()].len(), 1);

        let g = star(3);
        let sub = ego_subgraph(&g, "hub", EgoParams { hops: 1, max_size: 10 }, 0, Some("q")).unwrap();
        assert_eq!(sub.member_count(), 4);
        assert_eq!(sub.neighbors[sub.prompt_index().unwrap()].len(), 4);
        assert!(sub.is_symmetric());
        assert!(matches!(
            ego_subgraph(&g, "nope", EgoParams::default(), 0, None),
            Err(RampError::Lookup(_))
        ));
    }

    #[test]
    fn hub_subsampling_matches_rerun_of_sampler() {
        let g = star(50);
        let sub = ego_subgraph(&g, "hub", EgoParams { hops: 2, max_size: 20 }, 17, Some("q")).unwrap();
        assert_eq!(sub.member_count(), 20);
        assert_eq!(sub.members()[0].id, "hub");

        // Re-run the sampler by hand: sorted candidates, seeded index sample.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let candidates: Vec<String> = (0..50).map(|i| format!("n{i:02}")).collect();
        let mut picked = rand::seq::index::sample(&mut rng, 50, 19).into_vec();
        picked.sort_unstable();
        let mut expect: Vec<String> = picked.into_iter().map(|i| candidates[i].clone()).collect();
        expect.insert(0, "hub".into());
        let got: Vec<String> = sub.members().iter().map(|n| n.id.clone()).collect();
        assert_eq!(got, expect);

        let again = ego_subgraph(&g, "hub", EgoParams { hops: 2, max_size: 20 }, 17, Some("q")).unwrap();
        assert_eq!(again, sub);
    }

    #[test]
    fn reify_minimal_and_path() {
        let g = TextRichGraph::new(
            vec![node("a"), node("b")],
            vec![("a".into(), "b".into(), Some("knows".into()))],
        )
        .unwrap();
        let r = reify_edges(&g).unwrap();
        assert_eq!((r.node_count(), r.edge_count()), (3, 2));
        assert_eq!(r.node("edge:0").unwrap().text, "knows");

        let g = TextRichGraph::new(
            vec![node("a"), node("b"), node("c")],
            vec![
                ("a".into(), "b".into(), Some("x".into())),
                ("b".into(), "c".into(), Some("y".into())),
            ],
        )
        .unwrap();
        let r = reify_edges(&g).unwrap();
        assert_eq!((r.node_count(), r.edge_count()), (5, 4));

        let unlabeled = TextRichGraph::new(vec![node("a"), node("b")], vec![edge("a", "b")]).unwrap();
        assert!(matches!(reify_edges(&unlabeled), Err(RampError::Validation(_))));
    }

    #[test]
    fn neighbor_shuffle_edge_cases() {
        let g = star(4);
        let sub = ego_subgraph(&g, "hub", EgoParams { hops: 1, max_size: 10 }, 0, Some("q")).unwrap();
        let identity: Vec<Vec<usize>> = sub.neighbors.iter().map(|l| (0..l.len()).collect()).collect();
        assert_eq!(permute_neighbor_lists(&sub, &identity).unwrap(), sub);

        let path = TextRichGraph::new(vec![node("a"), node("b")], vec![edge("a", "b")]).unwrap();
        let sub = ego_subgraph(&path, "a", EgoParams { hops: 1, max_size: 10 }, 0, None).unwrap();
        for seed in 0..10 {
            assert_eq!(shuffle_neighbor_order(&sub, seed), sub);
        }
    }

    #[test]
    fn cross_node_examples() {
        let g = TextRichGraph::new(vec![node("a"), node("b"), node("c")], vec![edge("a", "b")]).unwrap();
        let sub = ego_subgraph(&g, "a", EgoParams { hops: 1, max_size: 10 }, 0, Some("q")).unwrap();
        assert_eq!(cross_node_shuffle_with(&sub, &[0, 1]).unwrap(), sub);
        let swapped = cross_node_shuffle_with(&sub, &[1, 0]).unwrap();
        assert_eq!(swapped.neighbors[0], sub.neighbors[1]);
        assert_eq!(swapped.neighbors[1], sub.neighbors[0]);
        assert_eq!(swapped.neighbors[2], sub.neighbors[2]);

        let solo = ego_subgraph(&g, "c", EgoParams { hops: 1, max_size: 10 }, 0, Some("q")).unwrap();
        let (out, status) = cross_node_shuffle(&solo, 3);
        assert_eq!(status, ShuffleStatus::TooFewMembers);
        assert_eq!(out, solo);
    }

    fn random_graph(n: usize, edges: &[(usize, usize)]) -> TextRichGraph {
        let nodes = (0..n).map(|i| node(&format!("v{i:03}"))).collect();
        let edges = edges
            .iter()
            .filter(|(a, b)| a % n != b % n)
            .map(|(a, b)| (format!("v{:03}", a % n), format!("v{:03}", b % n), Some(format!("rel{a}"))))
            .collect();
        TextRichGraph::new(nodes, edges).unwrap()
    }

    proptest! {
        #[test]
        fn reification_counts(n in 2usize..20, raw in proptest::collection::vec((0usize..40, 0usize..40), 0..40)) {
            let g = random_graph(n, &raw);
            let r = reify_edges(&g).unwrap();
            prop_assert_eq!(r.node_count(), g.node_count() + g.edge_count());
            prop_assert_eq!(r.edge_count(), 2 * g.edge_count());
            for e in g.edges() {
                let a = r.index_of(&g.nodes()[e.a].id).unwrap();
                let b = r.index_of(&g.nodes()[e.b].id).unwrap();
                prop_assert!(!r.are_adjacent(a, b));
            }
        }

        #[test]
        fn shuffles_preserve_structure(n in 3usize..15, raw in proptest::collection::vec((0usize..30, 0usize..30), 1..30), seed in any::<u64>()) {
            let g = random_graph(n, &raw);
            let target = g.nodes()[raw[0].0 % n].id.clone();
            let sub = ego_subgraph(&g, &target, EgoParams { hops: 2, max_size: 8 }, seed, Some("q")).unwrap();
            prop_assert!(sub.is_symmetric());

            let shuffled = shuffle_neighbor_order(&sub, seed);
            prop_assert_eq!(shuffled.edge_set(), sub.edge_set());
            prop_assert!(shuffled.is_symmetric());
            for (a, b) in shuffled.neighbors.iter().zip(&sub.neighbors) {
                let (mut a, mut b) = (a.clone(), b.clone());
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }

            let (crossed, _) = cross_node_shuffle(&sub, seed);
            prop_assert_eq!(degree_multiset(&crossed), degree_multiset(&sub));
            prop_assert_eq!(crossed.nodes.clone(), sub.nodes.clone());

            prop_assert_eq!(ego_subgraph(&g, &target, EgoParams { hops: 2, max_size: 8 }, seed, Some("q")).unwrap(), sub);
        }
    }
}
