use ramp_core::decoder::{Decoder, DecoderConfig};
use ramp_core::engine::RampConfig;
use ramp_core::eval::*;
use ramp_core::exec::Exec;
use ramp_core::graph::{ego_subgraph, permute_neighbor_lists, EgoParams, NodeRecord, TextRichGraph};
use ramp_core::tokenizer::{tokenize, VOCAB_SIZE};
use ramp_core::training::{finetune, self_recon_loss, AdamState, Stage, TrainConfig};
use ramp_core::RampError;

fn config(d: usize, max_positions: usize) -> DecoderConfig {
    DecoderConfig {
        d_model: d,
        d_ff: 2 * d,
        max_positions,
        ..DecoderConfig::default()
    }
}

const CLASSES: [&str; 2] = ["amber", "cyan"];

/// A path of `n` nodes plus one isolated node `iso`.
fn path_graph(n: usize) -> TextRichGraph {
    let mut nodes: Vec<NodeRecord> = (0..n)
        .map(|i| NodeRecord::new(format!("p{i}"), format!("item {i} says {}", CLASSES[i % 2]), Some(CLASSES[i % 2].into())))
        .collect();
    nodes.push(NodeRecord::new("iso", "alone here", Some("amber".into())));
    let edges = (1..n).map(|i| (format!("p{}", i - 1), format!("p{i}"), None)).collect();
    TextRichGraph::new(nodes, edges).unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

fn labels() -> Vec<String> {
    CLASSES.iter().map(|s| s.to_string()).collect()
}

fn ctx(fp: &str) -> EvalContext<'_> {
    EvalContext {
        ramp: RampConfig::default(),
        ego: EgoParams { hops: 1, max_size: 6 },
        seed: 7,
        fingerprint: fp,
        exec: Exec::Sequential,
    }
}

#[test]
fn untrained_perplexity_is_near_vocabulary_size() {
    let g = path_graph(6);
    let dec = Decoder::new(config(16, 256), 0).unwrap();
    let r = perplexity(&dec, &g, &ids(6), PplMode::SelfRecon, &ctx("fp")).unwrap();
    let v = VOCAB_SIZE as f64;
    assert!(r.value > v / 1.5 && r.value < v * 1.5, "{}", r.value);
    assert_eq!(r.metric, "ppl_self");
    assert_eq!(r.samples, 6);
    assert_eq!(r.fingerprint, "fp");
}

#[test]
fn perplexity_is_exp_of_token_weighted_loss() {
    let g = path_graph(4);
    let dec = Decoder::new(config(8, 256), 1).unwrap();
    let c = ctx("fp");
    let r = perplexity(&dec, &g, &ids(4), PplMode::SelfRecon, &c).unwrap();
    let mut nll = 0.0;
    let mut tokens = 0;
    for (k, id) in ids(4).iter().enumerate() {
        // Same per-sample seeding as the evaluator.
        let seed = c.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
        let sub = ego_subgraph(&g, id, c.ego, seed, None).unwrap();
        let n = sub.nodes[0].tokens.len();
        nll += self_recon_loss(&dec, &sub, &c.ramp).unwrap() * n as f64;
        tokens += n;
    }
    let expect = (nll / tokens as f64).exp();
    assert!((r.value - expect).abs() < 1e-9 * expect, "{} vs {expect}", r.value);
    assert_eq!(r.details["tokens"], tokens);
}

#[test]
fn neighbor_perplexity_skips_isolated_nodes() {
    let g = path_graph(3);
    let dec = Decoder::new(config(8, 256), 1).unwrap();
    let nodes = vec!["p0".to_string(), "iso".to_string(), "p2".to_string()];
    let r = perplexity(&dec, &g, &nodes, PplMode::Nbr, &ctx("fp")).unwrap();
    assert_eq!(r.samples, 2);
    assert_eq!(r.details["skipped"], 1);
    let err = perplexity(&dec, &g, &["iso".to_string()], PplMode::Nbr, &ctx("fp")).unwrap_err();
    assert!(matches!(err, RampError::Contract(_)));
}

#[test]
fn classification_samples_carry_query_and_terminated_label() {
    let g = path_graph(4);
    let dec = Decoder::new(config(8, 256), 1).unwrap();
    let s = classification_samples(&dec, &g, &ids(4), &labels(), EgoParams { hops: 1, max_size: 4 }, 0).unwrap();
    assert_eq!(s.len(), 4);
    assert_eq!(s[1].query, tokenize("Which class? Options: amber, cyan. Answer:"));
    let mut want = tokenize("cyan");
    want.push(dec.config().eos_token_id);
    assert_eq!(s[1].answer, want);
    let unlabeled = TextRichGraph::new(vec![NodeRecord::new("u", "no label", None)], vec![]).unwrap();
    assert!(matches!(
        classification_samples(&dec, &unlabeled, &["u".into()], &labels(), EgoParams::default(), 0),
        Err(RampError::Validation(_))
    ));
}

#[test]
fn overfit_five_nodes_reaches_full_accuracy() {
    let g = path_graph(5);
    let mut dec = Decoder::new(config(16, 256), 3).unwrap();
    let samples = classification_samples(&dec, &g, &ids(5), &labels(), EgoParams { hops: 1, max_size: 4 }, 0).unwrap();
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        steps: 150,
        batch_nodes: 5,
        learning_rate: 1e-2,
        weight_decay: 0.0,
        early_stop_patience: 1000,
        ..TrainConfig::default()
    };
    let ramp = RampConfig::default();
    let mut opt = AdamState::new(&dec);
    // A rising score keeps the final parameters.
    let mut epoch = 0.0;
    let mut rising = |_: &Decoder| {
        epoch += 1.0;
        Ok(epoch)
    };
    finetune(&mut dec, &mut opt, &samples, &ramp, &cfg, Exec::Sequential, &mut rising, &mut |_| {}).unwrap();
    let r = classify_accuracy(&dec, &samples, 8, &ctx("fp")).unwrap();
    assert_eq!(r.value, 1.0, "{}", r.to_json());
    assert_eq!(r.details["overlong"], 0);
}

#[test]
fn identity_permutation_changes_nothing() {
    let g = path_graph(6);
    let dec = Decoder::new(config(8, 256), 2).unwrap();
    let samples = classification_samples(&dec, &g, &ids(6), &labels(), EgoParams { hops: 2, max_size: 6 }, 0).unwrap();
    let ramp = RampConfig::default();
    let base = predictions(&dec, &samples, &ramp, 4, Exec::Sequential).unwrap();
    let same: Vec<_> = samples
        .iter()
        .map(|s| {
            let perms: Vec<Vec<usize>> = s.sub.neighbors.iter().map(|l| (0..l.len()).collect()).collect();
            let sub = permute_neighbor_lists(&s.sub, &perms).unwrap();
            ramp_core::training::FinetuneSample { sub, ..s.clone() }
        })
        .collect();
    assert_eq!(predictions(&dec, &same, &ramp, 4, Exec::Sequential).unwrap(), base);
}

#[test]
fn shuffle_experiment_reports_three_seeds_deterministically() {
    let g = path_graph(6);
    let dec = Decoder::new(config(8, 256), 2).unwrap();
    let samples = classification_samples(&dec, &g, &ids(6), &labels(), EgoParams { hops: 2, max_size: 6 }, 0).unwrap();
    let c = ctx("fp");
    for kind in [ShuffleKind::NeighborOrder, ShuffleKind::CrossNode] {
        let a = shuffle_experiment(&dec, &samples, kind, &[1, 2, 3], 4, &c).unwrap();
        let b = shuffle_experiment(&dec, &samples, kind, &[1, 2, 3], 4, &c).unwrap();
        assert_eq!(a.canonical().to_json(), b.canonical().to_json());
        assert_eq!(a.details["runs"].as_array().unwrap().len(), 3);
        let delta = a.details["delta"].as_f64().unwrap();
        let baseline = a.details["baseline"].as_f64().unwrap();
        assert!((a.value - baseline - delta).abs() < 1e-12);
    }
    assert!(shuffle_experiment(&dec, &samples, ShuffleKind::CrossNode, &[], 4, &c).is_err());
}

#[test]
fn ablation_rejects_mismatched_settings() {
    let g = path_graph(4);
    let dec = Decoder::new(config(8, 256), 2).unwrap();
    let samples = classification_samples(&dec, &g, &ids(4), &labels(), EgoParams { hops: 1, max_size: 4 }, 0).unwrap();
    let c = ctx("fp");
    let r0 = RampConfig { mp_rounds: 0, ..RampConfig::default() };
    let r2 = RampConfig { mp_rounds: 2, ..RampConfig::default() };
    let rows = mp_ablation(&[(&dec, r0.clone()), (&dec, r2)], &samples, 4, &c).unwrap();
    assert_eq!(rows[0].metric, "accuracy_mp0");
    assert_eq!(rows[1].metric, "accuracy_mp2");
    let other_rho = RampConfig { rho: 0.5, mp_rounds: 1, ..RampConfig::default() };
    assert!(matches!(mp_ablation(&[(&dec, r0.clone()), (&dec, other_rho)], &samples, 4, &c), Err(RampError::Contract(_))));
    let wider = Decoder::new(config(16, 256), 2).unwrap();
    assert!(matches!(mp_ablation(&[(&dec, r0.clone()), (&wider, r0)], &samples, 4, &c), Err(RampError::Contract(_))));
}

#[test]
fn baseline_sequence_grows_with_members_and_respects_capacity() {
    let g = path_graph(12);
    let q = classification_query(&labels());
    let small = ego_subgraph(&g, "p0", EgoParams { hops: 1, max_size: 12 }, 0, Some(&q)).unwrap();
    let large = ego_subgraph(&g, "p0", EgoParams { hops: 6, max_size: 12 }, 0, Some(&q)).unwrap();
    assert!(large.member_count() > small.member_count());
    let (ls, ll) = (serialized_len(&small, &q), serialized_len(&large, &q));
    assert!(ll > ls);
    // Every member's text appears in the flat serialization.
    let flat = graph_to_text(&large, &q);
    for node in large.members() {
        assert!(flat.contains(&ramp_core::tokenizer::detokenize(&node.tokens)));
    }
    let dec = Decoder::new(config(8, ll + 4), 0).unwrap();
    let ans = graph_to_text_baseline(&dec, &large, &q, 4).unwrap();
    assert_eq!(ans.sequence_len, ll);
    assert!(matches!(graph_to_text_baseline(&dec, &large, &q, 5), Err(RampError::Capacity(_))));
}

#[test]
fn scaling_normalizes_to_first_bucket() {
    let g = path_graph(16);
    let dec = Decoder::new(config(8, 1024), 0).unwrap();
    let spec = ScalingSpec {
        buckets: vec![(1, 2), (3, 6), (50, 60)],
        per_bucket: 2,
        reps: 1,
        max_new: 2,
        hops: 4,
    };
    let (report, notices) = scaling_benchmark(&dec, &g, &ids(16), &labels(), &spec, &ctx("fp")).unwrap();
    assert_eq!(notices, vec!["bucket 50-60: no samples, skipped".to_string()]);
    let rows = report.timings["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["ramp_normalized"], 1.0);
    assert_eq!(rows[0]["baseline_normalized"], 1.0);
    let csv = scaling_plot_csv(&report).unwrap();
    assert!(csv.starts_with("bucket,method,normalized\n1-2,ramp,1\n1-2,graph_to_text,1\n"), "{csv}");
    assert_eq!(report.canonical().timings.len(), 0);
}
