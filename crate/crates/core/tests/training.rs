use ramp_core::checkpoint::Checkpoint;
use ramp_core::decoder::{Decoder, DecoderConfig, InputItem};
use ramp_core::engine::RampConfig;
use ramp_core::exec::Exec;
use ramp_core::graph::{ego_subgraph, EgoParams, NodeRecord, TextRichGraph};
use ramp_core::tokenizer::tokenize;
use ramp_core::training::*;
use ramp_core::RampError;

fn small(d: usize) -> DecoderConfig {
    DecoderConfig {
        d_model: d,
        d_ff: 2 * d,
        max_positions: 256,
        ..DecoderConfig::default()
    }
}

fn ring(n: usize) -> TextRichGraph {
    let words = ["red fox", "blue owl", "green cat", "grey wolf", "tan deer", "pink eel"];
    let nodes = (0..n)
        .map(|i| NodeRecord::new(format!("r{i}"), format!("{} number {i}", words[i % words.len()]), Some(format!("c{}", i % 2))))
        .collect();
    let edges = (0..n).map(|i| (format!("r{i}"), format!("r{}", (i + 1) % n), None)).collect();
    TextRichGraph::new(nodes, edges).unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

fn pretrain_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_nodes: 4,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

fn sample(g: &TextRichGraph, id: &str, answer: &str, dec: &Decoder) -> FinetuneSample {
    let query = "Which? Answer:";
    let sub = ego_subgraph(g, id, EgoParams { hops: 1, max_size: 4 }, 0, Some(query)).unwrap();
    let mut answer = tokenize(answer);
    answer.push(dec.config().eos_token_id);
    FinetuneSample {
        sub,
        query: tokenize(query),
        answer,
    }
}

#[test]
fn single_sample_is_memorized() {
    let g = ring(4);
    let mut dec = Decoder::new(small(16), 3).unwrap();
    let s = sample(&g, "r0", "yes", &dec);
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        steps: 200,
        learning_rate: 1e-2,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let ramp = RampConfig::default();
    let mut opt = AdamState::new(&dec);
    let mut last = f64::INFINITY;
    for step in 0..cfg.steps {
        last = finetune_step(&mut dec, &mut opt, std::slice::from_ref(&s), &ramp, &cfg, step, Exec::Sequential).unwrap();
    }
    assert!(last < 0.05, "loss after 200 steps: {last}");
}

#[test]
fn pretraining_reduces_loss() {
    let g = ring(6);
    let mut dec = Decoder::new(small(16), 0).unwrap();
    let mut opt = AdamState::new(&dec);
    let losses = pretrain(&mut dec, &mut opt, &g, &ids(6), &RampConfig::default(), &pretrain_cfg(60), Exec::Sequential, &mut |_| {}).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "head {head} tail {tail}");
}

#[test]
fn freezing_everything_leaves_parameters_bit_identical() {
    let g = ring(5);
    let mut dec = Decoder::new(small(8), 1).unwrap();
    let before = dec.params().to_vec();
    let cfg = TrainConfig {
        freeze: dec.names().to_vec(),
        ..pretrain_cfg(5)
    };
    let mut opt = AdamState::new(&dec);
    pretrain(&mut dec, &mut opt, &g, &ids(5), &RampConfig::default(), &cfg, Exec::Sequential, &mut |_| {}).unwrap();
    for (a, b) in before.iter().zip(dec.params()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn frozen_prefix_only_protects_its_group() {
    let g = ring(5);
    let mut dec = Decoder::new(small(8), 1).unwrap();
    let before = dec.clone();
    let cfg = TrainConfig {
        freeze: vec!["tok_emb".into()],
        ..pretrain_cfg(3)
    };
    let mut opt = AdamState::new(&dec);
    pretrain(&mut dec, &mut opt, &g, &ids(5), &RampConfig::default(), &cfg, Exec::Sequential, &mut |_| {}).unwrap();
    let mut moved = 0;
    for ((name, a), b) in before.named().zip(dec.params()) {
        if name.starts_with("tok_emb") {
            assert_eq!(a.data(), b.data(), "{name} moved");
        } else if a.data() != b.data() {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn pretraining_is_deterministic_across_execution_modes() {
    let g = ring(6);
    let run = |exec| {
        let mut dec = Decoder::new(small(8), 4).unwrap();
        let mut opt = AdamState::new(&dec);
        let mut log = Vec::new();
        let losses = pretrain(&mut dec, &mut opt, &g, &ids(6), &RampConfig::default(), &pretrain_cfg(6), exec, &mut |r| {
            log.push((r.step, r.task.clone(), r.node.clone(), r.loss.to_bits()))
        })
        .unwrap();
        (losses, log, dec.params().to_vec(), opt)
    };
    let a = run(Exec::Sequential);
    let b = run(Exec::Sequential);
    let c = run(Exec::Parallel);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
    assert_eq!(a.0, c.0);
    assert_eq!(a.2, c.2);
}

#[test]
fn log_records_cover_every_sample() {
    let g = ring(6);
    let mut dec = Decoder::new(small(8), 0).unwrap();
    let mut opt = AdamState::new(&dec);
    let mut n = 0;
    pretrain(&mut dec, &mut opt, &g, &ids(6), &RampConfig::default(), &pretrain_cfg(3), Exec::Sequential, &mut |r| {
        assert!(r.task == "self" || r.task == "nbr");
        assert!(r.loss.is_finite() && r.lr > 0.0);
        n += 1;
    })
    .unwrap();
    assert_eq!(n, 12);
}

#[test]
fn non_finite_parameters_report_divergence() {
    let g = ring(4);
    let mut dec = Decoder::new(small(8), 0).unwrap();
    let i = dec.param_index("tok_emb").unwrap();
    dec.params_mut()[i].data_mut().iter_mut().for_each(|x| *x = f64::NAN);
    let mut opt = AdamState::new(&dec);
    let err = pretrain(&mut dec, &mut opt, &g, &ids(4), &RampConfig::default(), &pretrain_cfg(2), Exec::Sequential, &mut |_| {}).unwrap_err();
    assert!(matches!(err, RampError::Diverged(_)), "{err}");
    assert!(err.to_string().contains("step 0"), "{err}");
}

#[test]
fn finetuning_trends_down_and_restores_best_epoch() {
    let g = ring(10);
    let mut dec = Decoder::new(small(16), 2).unwrap();
    let samples: Vec<FinetuneSample> = (0..10)
        .map(|i| sample(&g, &format!("r{i}"), if i % 2 == 0 { "even" } else { "odd" }, &dec))
        .collect();
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        steps: 40,
        batch_nodes: 5,
        learning_rate: 3e-3,
        early_stop_patience: 100,
        ..TrainConfig::default()
    };
    let mut opt = AdamState::new(&dec);
    // Peak score at the third epoch; the returned model must be that one.
    let mut epoch = 0;
    let mut snapshot = None;
    let out = finetune(
        &mut dec,
        &mut opt,
        &samples,
        &RampConfig::default(),
        &cfg,
        Exec::Sequential,
        &mut |d| {
            epoch += 1;
            if epoch == 3 {
                snapshot = Some(d.params().to_vec());
            }
            Ok(if epoch == 3 { 1.0 } else { 0.5 })
        },
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(out.step_losses.len(), 40);
    assert_eq!(out.val_scores.len(), 20);
    assert_eq!(out.best_epoch, Some(2));
    assert_eq!(dec.params(), &snapshot.unwrap()[..]);
    let head: f64 = out.step_losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = out.step_losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "head {head} tail {tail}");
}

#[test]
fn early_stopping_honours_patience() {
    let g = ring(6);
    let mut dec = Decoder::new(small(8), 2).unwrap();
    let samples: Vec<FinetuneSample> = (0..6).map(|i| sample(&g, &format!("r{i}"), "x", &dec)).collect();
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        steps: 100,
        batch_nodes: 3,
        early_stop_patience: 2,
        ..TrainConfig::default()
    };
    let mut opt = AdamState::new(&dec);
    let out = finetune(&mut dec, &mut opt, &samples, &RampConfig::default(), &cfg, Exec::Sequential, &mut |_| Ok(0.0), &mut |_| {}).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.val_scores.len(), 3);
    assert_eq!(out.step_losses.len(), 6);
}

#[test]
fn neighbor_reconstruction_uses_every_neighbor_of_a_clique() {
    // In a triangle each node's neighbors are the other two, so the
    // neighbor task always has targets and never falls back.
    let nodes = ["a", "b", "c"].iter().map(|n| NodeRecord::new(*n, format!("text of {n}"), None)).collect();
    let edges = vec![("a".into(), "b".into(), None), ("b".into(), "c".into(), None), ("a".into(), "c".into(), None)];
    let g = TextRichGraph::new(nodes, edges).unwrap();
    let dec = Decoder::new(small(8), 0).unwrap();
    for id in ["a", "b", "c"] {
        let sub = ego_subgraph(&g, id, EgoParams { hops: 1, max_size: 8 }, 0, None).unwrap();
        assert_eq!(recon_neighbors(&sub).len(), 2);
        assert_eq!(effective_task(ReconTask::NbrRecon, &sub), ReconTask::NbrRecon);
        let l = nbr_recon_loss(&dec, &sub, &RampConfig::default()).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs_and_optimizer() {
    let g = ring(5);
    let mut dec = Decoder::new(small(8), 6).unwrap();
    let mut opt = AdamState::new(&dec);
    pretrain(&mut dec, &mut opt, &g, &ids(5), &RampConfig::default(), &pretrain_cfg(3), Exec::Sequential, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_decoder(&dec, Some(opt.clone()), serde_json::json!({"stage": "pretrain"})).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.optimizer.as_ref(), Some(&opt));
    assert_eq!(back.meta["stage"], "pretrain");
    let restored = back.decoder().unwrap();
    let items: Vec<InputItem> = tokenize("probe text").into_iter().map(InputItem::Token).collect();
    let (la, _) = dec.forward(&items).unwrap();
    let (lb, _) = restored.forward(&items).unwrap();
    assert_eq!(la.data(), lb.data());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(RampError::Integrity(_))));
    assert!(matches!(back.check_compatible(&small(16)), Err(RampError::Integrity(_))));
}
