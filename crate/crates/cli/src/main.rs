//! `ramp`: corpus generation, training, evaluation and inspection.
//!
//! Exit codes:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | internal error                            |
//! | 2    | command-line usage error                  |
//! | 3    | invalid configuration                     |
//! | 4    | missing input file                        |
//! | 5    | capacity exceeded (sequence too long)     |
//! | 6    | corrupt or incompatible checkpoint/dump   |
//! | 7    | invalid input data (graph, split, labels) |
//! | 8    | training diverged                         |
//! | 9    | other I/O failure                         |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ramp_core::checkpoint::Checkpoint;
use ramp_core::config::RunConfig;
use ramp_core::corpus::{self, Split};
use ramp_core::decoder::Decoder;
use ramp_core::engine::{propagate, round_peek, RampConfig};
use ramp_core::eval::{self, EvalContext, EvalReport, PplMode, ShuffleKind};
use ramp_core::exec::with_workers;
use ramp_core::graph::{ego_subgraph, reify_edges, TextRichGraph};
use ramp_core::tokenizer::tokenize;
use ramp_core::training::{self, AdamState};
use ramp_core::RampError;

#[derive(Parser, Debug)]
#[command(name = "ramp", version, about = "Raw-text anchored message passing on text-rich graphs")]
struct Cli {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set ramp.mp_rounds=1`. Repeatable;
    /// wins over the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (same as `--set paths.out_dir=...`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for parallel execution.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    #[value(name = "self")]
    SelfRecon,
    Nbr,
    Raw,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    NeighborOrder,
    CrossNode,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled graph and its train/val/test split.
    GenCorpus,
    /// Reconstruction pre-training from a fresh model (or --init).
    Pretrain {
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generative fine-tuning for node classification.
    Finetune {
        /// Defaults to `<out_dir>/pretrained.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruction or plain language-model perplexity on the test split.
    EvalPpl {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Defaults to `<out_dir>/pretrained.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test-split classification accuracy.
    Classify {
        /// Defaults to `<out_dir>/finetuned.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy under neighbor-order or cross-node shuffles.
    ShuffleTest {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy of checkpoints that differ only in propagation depth.
    MpAblation {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Latency scaling of RAMP versus the graph-to-text baseline.
    BenchScale {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the normalized series as CSV.
        #[arg(long)]
        emit_plot_data: bool,
    },
    /// Replace every labeled edge by a node carrying the label text.
    ReifyEdges {
        /// Input graph; defaults to the configured graph.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Answer generated from each round's states for one node.
    RoundPeek {
        #[arg(long)]
        node: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &RampError) -> u8 {
    match e {
        RampError::Config(_) => 3,
        RampError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
        RampError::Capacity(_) => 5,
        RampError::Integrity(_) => 6,
        RampError::Validation(_) | RampError::Parse { .. } | RampError::Lookup(_) => 7,
        RampError::Diverged(_) | RampError::NonFinite { .. } => 8,
        RampError::Io { .. } => 9,
        _ => 1,
    }
}

fn kind_name(e: &RampError) -> &'static str {
    match exit_code(e) {
        3 => "config",
        4 => "missing_input",
        5 => "capacity",
        6 => "integrity",
        7 => "invalid_input",
        8 => "diverged",
        9 => "io",
        _ => "internal",
    }
}

/// Writes only inside the output directory.
struct Out {
    dir: PathBuf,
}

impl Out {
    fn new(dir: &Path) -> Result<Self, RampError> {
        std::fs::create_dir_all(dir).map_err(|e| RampError::io(dir, e))?;
        Ok(Out { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, content: &str) -> Result<PathBuf, RampError> {
        let p = self.path(name);
        std::fs::write(&p, content).map_err(|e| RampError::io(&p, e))?;
        println!("wrote {}", p.display());
        Ok(p)
    }

    fn report(&self, stem: &str, reports: &[EvalReport]) -> Result<(), RampError> {
        let body = if reports.len() == 1 {
            reports[0].to_json()
        } else {
            serde_json::to_string_pretty(reports).expect("reports serialize")
        };
        self.write(&format!("{stem}.json"), &body)?;
        self.write(&format!("{stem}.csv"), &eval::reports_csv(reports))?;
        Ok(())
    }
}

struct Run {
    cfg: RunConfig,
    out: Out,
}

impl Run {
    fn graph(&self) -> Result<TextRichGraph, RampError> {
        TextRichGraph::load(self.cfg.paths.graph())
    }

    fn split(&self) -> Result<Split, RampError> {
        Split::load(self.cfg.paths.split())
    }

    fn checkpoint(&self, given: &Option<PathBuf>, default: &str) -> Result<(Checkpoint, Decoder), RampError> {
        let path = given.clone().unwrap_or_else(|| self.out.path(default));
        let ck = Checkpoint::load(&path)?;
        ck.check_compatible(&self.cfg.decoder)?;
        let dec = ck.decoder()?;
        Ok((ck, dec))
    }

    fn meta(&self, stage: &str, ramp: &RampConfig) -> serde_json::Value {
        json!({
            "stage": stage,
            "fingerprint": self.cfg.fingerprint(),
            "ramp": ramp,
            "config": self.cfg,
        })
    }

    fn labels(&self, g: &TextRichGraph) -> Result<Vec<String>, RampError> {
        let mut labels: Vec<String> = g.nodes().iter().filter_map(|n| n.label.clone()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            return Err(RampError::Validation("classification needs at least two labels".into()));
        }
        Ok(labels)
    }

    /// Propagation settings a checkpoint was trained with, falling back to
    /// the current configuration.
    fn ramp_of(&self, ck: &Checkpoint) -> Result<RampConfig, RampError> {
        match ck.meta.get("ramp") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| RampError::Integrity(format!("checkpoint ramp settings: {e}"))),
            None => Ok(self.cfg.ramp.clone()),
        }
    }

    fn fingerprint_of(&self, ck: &Checkpoint) -> String {
        ck.meta
            .get("fingerprint")
            .and_then(|v| v.as_str())
            .map_or_else(|| self.cfg.fingerprint(), str::to_string)
    }

    fn dump_config(&self, name: &str) -> Result<(), RampError> {
        self.out.write(&format!("{name}.config.toml"), &self.cfg.to_toml())?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), RampError> {
    let mut overrides = cli.overrides.clone();
    if let Some(d) = &cli.out_dir {
        overrides.push(format!("paths.out_dir={}", toml_string(&d.display().to_string())));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("runtime.workers={w}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = Out::new(&cfg.paths.out_dir)?;
    let workers = cfg.runtime.workers;
    let r = Run { cfg, out };
    with_workers(workers, move || dispatch(&r, cli.command))
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn dispatch(r: &Run, command: Command) -> Result<(), RampError> {
    let cfg = &r.cfg;
    let exec = cfg.runtime.exec;
    match command {
        Command::GenCorpus => {
            let c = corpus::generate(&cfg.corpus)?;
            r.out.write("graph.jsonl", &c.graph.to_jsonl())?;
            r.out.write("split.json", &c.split.to_json())?;
            let audit = corpus::signal_audit(&c.graph)?;
            r.out.write("audit.json", &serde_json::to_string_pretty(&audit).expect("audit serializes"))?;
            r.dump_config("gen-corpus")?;
        }
        Command::Pretrain { init } => {
            let g = r.graph()?;
            let split = r.split()?;
            let mut dec = match &init {
                Some(_) => r.checkpoint(&init, "")?.1,
                None => Decoder::new(cfg.decoder.clone(), cfg.pretrain.seed)?,
            };
            let pool: Vec<String> = split.train.iter().chain(&split.val).cloned().collect();
            let mut opt = AdamState::new(&dec);
            let mut log = String::new();
            let losses = training::pretrain(&mut dec, &mut opt, &g, &pool, &cfg.ramp, &cfg.pretrain, exec, &mut |rec| {
                log.push_str(&serde_json::to_string(rec).expect("record serializes"));
                log.push('\n');
            })?;
            r.out.write("pretrain.log.jsonl", &log)?;
            let ck = Checkpoint::from_decoder(&dec, Some(opt), r.meta("pretrain", &cfg.ramp));
            ck.save(r.out.path("pretrained.ckpt"))?;
            println!("wrote {}", r.out.path("pretrained.ckpt").display());
            println!("final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
            r.dump_config("pretrain")?;
        }
        Command::Finetune { checkpoint } => {
            let (_, mut dec) = r.checkpoint(&checkpoint, "pretrained.ckpt")?;
            let g = r.graph()?;
            let split = r.split()?;
            let labels = r.labels(&g)?;
            let train = eval::classification_samples(&dec, &g, &split.train, &labels, cfg.eval.ego, cfg.finetune.seed)?;
            let val = eval::classification_samples(&dec, &g, &split.val, &labels, cfg.eval.ego, cfg.eval.seed)?;
            let mut opt = AdamState::new(&dec);
            let mut log = String::new();
            let max_new = cfg.eval.max_new;
            let ramp = cfg.ramp.clone();
            let outcome = training::finetune(
                &mut dec,
                &mut opt,
                &train,
                &cfg.ramp,
                &cfg.finetune,
                exec,
                &mut |d| Ok(eval::accuracy(&eval::predictions(d, &val, &ramp, max_new, exec)?)),
                &mut |rec| {
                    log.push_str(&serde_json::to_string(rec).expect("record serializes"));
                    log.push('\n');
                },
            )?;
            r.out.write("finetune.log.jsonl", &log)?;
            r.out.write("finetune.outcome.json", &serde_json::to_string_pretty(&outcome).expect("outcome serializes"))?;
            let ck = Checkpoint::from_decoder(&dec, Some(opt), r.meta("finetune", &cfg.ramp));
            ck.save(r.out.path("finetuned.ckpt"))?;
            println!("wrote {}", r.out.path("finetuned.ckpt").display());
            r.dump_config("finetune")?;
        }
        Command::EvalPpl { mode, checkpoint } => {
            let (ck, dec) = r.checkpoint(&checkpoint, "pretrained.ckpt")?;
            let g = r.graph()?;
            let split = r.split()?;
            let fp = r.fingerprint_of(&ck);
            let ctx = EvalContext {
                ramp: r.ramp_of(&ck)?,
                ego: cfg.eval.ego,
                seed: cfg.eval.seed,
                fingerprint: &fp,
                exec,
            };
            let (report, stem) = match mode {
                Mode::SelfRecon => (eval::perplexity(&dec, &g, &split.test, PplMode::SelfRecon, &ctx)?, "ppl_self"),
                Mode::Nbr => (eval::perplexity(&dec, &g, &split.test, PplMode::Nbr, &ctx)?, "ppl_nbr"),
                Mode::Raw => (eval::raw_lm_perplexity(&dec, &g, &split.test, &ctx)?, "ppl_raw"),
            };
            println!("{} = {:.4}", report.metric, report.value);
            r.out.report(stem, &[report])?;
            r.dump_config(stem)?;
        }
        Command::Classify { checkpoint } => {
            let (ck, dec) = r.checkpoint(&checkpoint, "finetuned.ckpt")?;
            let g = r.graph()?;
            let split = r.split()?;
            let labels = r.labels(&g)?;
            let fp = r.fingerprint_of(&ck);
            let ctx = EvalContext { ramp: r.ramp_of(&ck)?, ego: cfg.eval.ego, seed: cfg.eval.seed, fingerprint: &fp, exec };
            let test = eval::classification_samples(&dec, &g, &split.test, &labels, cfg.eval.ego, cfg.eval.seed)?;
            let report = eval::classify_accuracy(&dec, &test, cfg.eval.max_new, &ctx)?;
            println!("accuracy = {:.4}", report.value);
            r.out.report("classify", &[report])?;
            r.dump_config("classify")?;
        }
        Command::ShuffleTest { kind, checkpoint } => {
            let (ck, dec) = r.checkpoint(&checkpoint, "finetuned.ckpt")?;
            let g = r.graph()?;
            let split = r.split()?;
            let labels = r.labels(&g)?;
            let fp = r.fingerprint_of(&ck);
            let ctx = EvalContext { ramp: r.ramp_of(&ck)?, ego: cfg.eval.ego, seed: cfg.eval.seed, fingerprint: &fp, exec };
            let test = eval::classification_samples(&dec, &g, &split.test, &labels, cfg.eval.ego, cfg.eval.seed)?;
            let kind = match kind {
                Kind::NeighborOrder => ShuffleKind::NeighborOrder,
                Kind::CrossNode => ShuffleKind::CrossNode,
            };
            let report = eval::shuffle_experiment(&dec, &test, kind, &cfg.eval.shuffle_seeds, cfg.eval.max_new, &ctx)?;
            println!("{} = {:.4} (delta {})", report.metric, report.value, report.details["delta"]);
            let stem = report.metric.clone();
            r.out.report(&stem, &[report])?;
            r.dump_config(&stem)?;
        }
        Command::MpAblation { checkpoints } => {
            let g = r.graph()?;
            let split = r.split()?;
            let labels = r.labels(&g)?;
            let mut models = Vec::new();
            for p in &checkpoints {
                let (ck, dec) = r.checkpoint(&Some(p.clone()), "")?;
                models.push((dec, r.ramp_of(&ck)?));
            }
            let fp = r.cfg.fingerprint();
            let ctx = EvalContext { ramp: cfg.ramp.clone(), ego: cfg.eval.ego, seed: cfg.eval.seed, fingerprint: &fp, exec };
            let test = eval::classification_samples(&models[0].0, &g, &split.test, &labels, cfg.eval.ego, cfg.eval.seed)?;
            let refs: Vec<(&Decoder, RampConfig)> = models.iter().map(|(d, c)| (d, c.clone())).collect();
            let reports = eval::mp_ablation(&refs, &test, cfg.eval.max_new, &ctx)?;
            for rep in &reports {
                println!("{} = {:.4}", rep.metric, rep.value);
            }
            r.out.report("mp_ablation", &reports)?;
            r.dump_config("mp_ablation")?;
        }
        Command::BenchScale { checkpoint, emit_plot_data } => {
            let (ck, dec) = r.checkpoint(&checkpoint, "finetuned.ckpt")?;
            let g = r.graph()?;
            let labels = r.labels(&g)?;
            let fp = r.fingerprint_of(&ck);
            let ctx = EvalContext { ramp: r.ramp_of(&ck)?, ego: cfg.eval.ego, seed: cfg.eval.seed, fingerprint: &fp, exec };
            let candidates: Vec<String> = g.nodes().iter().map(|n| n.id.clone()).collect();
            let (report, notices) = eval::scaling_benchmark(&dec, &g, &candidates, &labels, &cfg.eval.scaling, &ctx)?;
            for n in &notices {
                eprintln!("notice: {n}");
            }
            println!(
                "largest bucket normalized latency: ramp {} vs graph-to-text {}",
                report.timings["ramp_largest_normalized"], report.timings["baseline_largest_normalized"]
            );
            r.out.write("bench_scale.json", &report.to_json())?;
            if emit_plot_data {
                r.out.write("bench_scale.plot.csv", &eval::scaling_plot_csv(&report)?)?;
            }
            r.dump_config("bench_scale")?;
        }
        Command::ReifyEdges { input } => {
            let g = TextRichGraph::load(input.unwrap_or_else(|| cfg.paths.graph()))?;
            let reified = reify_edges(&g)?;
            println!(
                "nodes {} -> {}, edges {} -> {}",
                g.node_count(),
                reified.node_count(),
                g.edge_count(),
                reified.edge_count()
            );
            r.out.write("reified.jsonl", &reified.to_jsonl())?;
        }
        Command::RoundPeek { node, checkpoint } => {
            let (ck, dec) = r.checkpoint(&checkpoint, "finetuned.ckpt")?;
            let g = r.graph()?;
            let labels = r.labels(&g)?;
            let ramp = r.ramp_of(&ck)?;
            let query = eval::classification_query(&labels);
            let sub = ego_subgraph(&g, &node, cfg.eval.ego, cfg.eval.seed, Some(&query))?;
            let target = [sub.target_index()];
            let memory = propagate(&dec, &sub, &ramp, Some(&target), exec)?;
            let mut rows = Vec::new();
            for round in 0..memory.rounds() {
                let answer = round_peek(&dec, &memory, round, &target, &tokenize(&query), cfg.eval.max_new)?;
                println!("round {round}: {answer:?}");
                rows.push(json!({ "round": round, "answer": answer }));
            }
            let body = json!({ "node": node, "label": sub.nodes[0].label, "rounds": rows });
            r.out.write("round_peek.json", &serde_json::to_string_pretty(&body).expect("json"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", json!({ "error": kind_name(&e), "message": e.to_string(), "exit_code": code }));
            ExitCode::from(code)
        }
    }
}
