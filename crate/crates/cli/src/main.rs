//! `tkgr` — temporal knowledge graph reasoning over query-aware temporal
//! paths: training, time-aware filtered evaluation, reasoning-evidence
//! extraction, synthetic dataset generation, gradient self-checks and a
//! complexity benchmark.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
//! assertion.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{resolve, RunConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tkgr_core::bench::{scaling_sweep, ScalingConfig};
use tkgr_core::data::{
    self, history_window, load_dataset_dir, split_by_time, DatasetSplit, Quadruple,
    SnapshotSequence,
};
use tkgr_core::error::{DataError, ModelError};
use tkgr_core::eval::{self, EvalConfig};
use tkgr_core::evidence;
use tkgr_core::gradcheck::{full_model_check, GradCheckConfig};
use tkgr_core::graph::HistoryTemporalGraph;
use tkgr_core::learning::{train, EpochStats};
use tkgr_core::model::Model;
use tkgr_core::path::Query;
use tkgr_core::synthetic::{gen_planted, make_inductive, PlantedConfig};
use tkgr_core::checkpoint;

#[derive(Parser)]
#[command(name = "tkgr", version, about = "Temporal knowledge graph path reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Line-oriented `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter preset: icews18, gdelt, wiki, yago, synthetic.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, e.g. `--set omega=6` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed (overrides config).
    #[arg(long)]
    seed: Option<u64>,
    /// Query-level parallelism cap (overrides config; 1 is sequential).
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = resolve(
            self.config.as_deref(),
            self.preset.as_deref(),
            &self.sets,
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Evaluate a checkpoint with time-aware filtered MRR / Hits@k.
    Eval {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for metrics.txt and the manifest (default:
        /// print to stdout only).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Evaluate `test` (default) or `valid`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Restrict evaluation to the queries in this `s r o t` file.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Extract top-k reasoning paths for one query.
    Explain {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query subject entity id.
        #[arg(long)]
        subject: usize,
        /// Query relation id (post-augmentation id space).
        #[arg(long)]
        relation: usize,
        /// Query timestamp (raw value as in the data files).
        #[arg(long)]
        time: u64,
        /// Entity to explain; defaults to the model's top prediction.
        #[arg(long)]
        prediction: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Generate a planted-rule synthetic dataset.
    GenSynth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        entities: usize,
        #[arg(long, default_value_t = 60)]
        timestamps: usize,
        #[arg(long, default_value_t = 4)]
        base_relations: usize,
        #[arg(long, default_value_t = 40)]
        chains: usize,
        /// Expected noise edges per entity per timestamp.
        #[arg(long, default_value_t = 0.25)]
        noise_rate: f64,
        #[arg(long, default_value_t = 8)]
        history_len: usize,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        valid_frac: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Split a dataset into a fully-inductive pair with disjoint entities.
    MakeInductive {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 0.7)]
        train_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        valid_frac: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Finite-difference check of the full model gradient on a toy graph.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        entities: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        omega: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 12)]
        seed: u64,
    },
    /// Measure per-query time against window length and fit m·|E| scaling.
    BenchScaling {
        /// Comma-separated window lengths.
        #[arg(long, default_value = "2,4,8,16")]
        ms: String,
        #[arg(long, default_value_t = 300)]
        edges_per_snapshot: usize,
        #[arg(long, default_value_t = 16)]
        entities: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        omega: usize,
        /// Write the CSV here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Data(inner) => CliError::Data(inner.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = std::panic::catch_unwind(|| run(cli.command));
    match result {
        Ok(Ok(())) => {}
        Ok(Err(e)) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
        Err(_) => {
            eprintln!("error: internal assertion failed");
            std::process::exit(3);
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: BTreeMap<String, String>,
    artifacts: &[&str],
) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "command": command,
        "config": config,
        "artifacts": artifacts,
    });
    write_file(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serialization"),
    )
}

fn time_map_lines(seq: &SnapshotSequence) -> String {
    let mut out = String::from("# normalized_id raw_timestamp\n");
    for (i, raw) in seq.raw_timestamps.iter().enumerate() {
        out.push_str(&format!("{i} {raw}\n"));
    }
    out
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            data_dir,
            out_dir,
            epochs,
            common,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cmd_train(&data_dir, &out_dir, &cfg)
        }
        Command::Eval {
            data_dir,
            checkpoint,
            out_dir,
            split,
            queries,
            common,
        } => cmd_eval(
            &data_dir,
            &checkpoint,
            out_dir.as_deref(),
            &split,
            queries.as_deref(),
            &common.resolve()?,
        ),
        Command::Explain {
            data_dir,
            checkpoint,
            subject,
            relation,
            time,
            prediction,
            out_dir,
            common,
        } => cmd_explain(
            &data_dir,
            &checkpoint,
            subject,
            relation,
            time,
            prediction,
            out_dir.as_deref(),
            &common.resolve()?,
        ),
        Command::GenSynth {
            out_dir,
            entities,
            timestamps,
            base_relations,
            chains,
            noise_rate,
            history_len,
            train_frac,
            valid_frac,
            seed,
        } => cmd_gen_synth(
            &out_dir,
            PlantedConfig {
                num_entities: entities,
                num_timestamps: timestamps,
                num_base_relations: base_relations,
                num_chains: chains,
                noise_edge_rate: noise_rate,
                history_len,
                train_frac,
                valid_frac,
                seed,
                ..PlantedConfig::default()
            },
        ),
        Command::MakeInductive {
            data_dir,
            out_dir,
            ratio,
            train_frac,
            valid_frac,
            seed,
        } => cmd_make_inductive(&data_dir, &out_dir, ratio, train_frac, valid_frac, seed),
        Command::GradCheck {
            entities,
            dim,
            omega,
            eps,
            tol,
            seed,
        } => {
            let report = full_model_check(&GradCheckConfig {
                num_entities: entities,
                dim,
                omega,
                eps,
                tol,
                seed,
                ..GradCheckConfig::default()
            })
            .map_err(|e| CliError::Usage(e.to_string()))?;
            print!("{}", report.render());
            if report.pass() {
                Ok(())
            } else {
                Err(CliError::Internal(
                    "analytic gradients disagree with finite differences".into(),
                ))
            }
        }
        Command::BenchScaling {
            ms,
            edges_per_snapshot,
            entities,
            dim,
            omega,
            out,
            seed,
        } => {
            let ms: Vec<usize> = ms
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Usage(format!("bad window length {s:?}")))
                })
                .collect::<Result<_, _>>()?;
            if ms.len() < 2 {
                return Err(CliError::Usage("need at least two window lengths".into()));
            }
            let report = scaling_sweep(&ScalingConfig {
                ms,
                edges_per_snapshot,
                num_entities: entities,
                dim,
                omega,
                seed,
                ..ScalingConfig::default()
            })?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                write_file(&path, &csv)?;
            }
            Ok(())
        }
    }
}

fn cmd_train(data_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let split = load_dataset_dir(data_dir)?;
    ensure_dir(out_dir)?;
    let mut model = Model::init(cfg.model_config(split.num_relations()), cfg.seed)?;

    let mut log = String::new();
    for line in cfg.echo().lines() {
        log.push_str(&format!("config {line}\n"));
    }
    print!("{log}");
    let log_path = out_dir.join("train.log");
    let mut stats_log = log.clone();
    let train_cfg = cfg.train_config();
    let report = train(&mut model, &split, &train_cfg, |e: &EpochStats| {
        let line = format!(
            "epoch={} loss_tkg={:.6} loss_reg={:.6} loss_total={:.6} valid_mrr={:.6} skipped={}\n",
            e.epoch, e.loss_tkg, e.loss_reg, e.loss_total, e.valid_mrr, e.skipped_queries
        );
        print!("{line}");
        stats_log.push_str(&line);
    })?;
    stats_log.push_str(&format!(
        "best_epoch={} best_valid_mrr={:.6}\n",
        report.best_epoch, report.best_valid_mrr
    ));
    write_file(&log_path, &stats_log)?;

    checkpoint::save(&report.best_model, &out_dir.join("checkpoint.json"))?;
    write_file(&out_dir.join("time_map.txt"), &time_map_lines(&split.train))?;
    write_manifest(
        out_dir,
        "train",
        cfg.echo_map(),
        &["checkpoint.json", "train.log", "time_map.txt", "manifest.json"],
    )?;
    println!(
        "saved best checkpoint (epoch {}, valid MRR {:.4}) to {}",
        report.best_epoch,
        report.best_valid_mrr,
        out_dir.join("checkpoint.json").display()
    );
    Ok(())
}

fn load_queries_file(
    path: &Path,
    split: &DatasetSplit,
) -> Result<Vec<Quadruple>, CliError> {
    let raw = data::parse_quadruple_file(
        path,
        split.num_entities(),
        // query files may reference inverse relations directly
        split.num_relations(),
    )?;
    let context = split.full_sequence();
    raw.into_iter()
        .map(|q| {
            let t = context.normalize_raw_time(q.timestamp).ok_or_else(|| {
                CliError::Data(format!(
                    "query timestamp {} does not occur in the dataset",
                    q.timestamp
                ))
            })?;
            Ok(Quadruple::new(q.subject, q.relation, q.object, t))
        })
        .collect()
}

fn cmd_eval(
    data_dir: &Path,
    ckpt: &Path,
    out_dir: Option<&Path>,
    split_name: &str,
    queries: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let split = load_dataset_dir(data_dir)?;
    let model = checkpoint::load(ckpt)?;
    if model.config.num_relations != split.num_relations() {
        return Err(CliError::Data(format!(
            "checkpoint has {} relations but the dataset has {}",
            model.config.num_relations,
            split.num_relations()
        )));
    }
    let eval_seq = match split_name {
        "test" => &split.test,
        "valid" => &split.valid,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split {other:?}; use test or valid"
            )))
        }
    };
    let context = split.full_sequence();
    let eval_cfg = EvalConfig {
        history_len: cfg.m,
        tie_rule: cfg.tie_rule,
        threads: cfg.threads,
    };
    let (_, metrics) = match queries {
        Some(path) => {
            let qs = load_queries_file(path, &split)?;
            eval::evaluate_queries(&model, &context, eval_seq, &qs, &eval_cfg)?
        }
        None => eval::evaluate(&model, &context, eval_seq, &eval_cfg)?,
    };
    let table = format!(
        "split: {split_name}\nqueries: {}\n\n  metric |  value\n  -------+-------\n  MRR    | {:.4}\n  Hits@1 | {:.4}\n  Hits@3 | {:.4}\n  Hits@10| {:.4}\n",
        metrics.count, metrics.mrr, metrics.hits1, metrics.hits3, metrics.hits10
    );
    println!("{table}");
    print!("{}", metrics.report_lines());
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_file(
            &dir.join("metrics.txt"),
            &format!("{table}\n{}", metrics.report_lines()),
        )?;
        write_manifest(dir, "eval", cfg.echo_map(), &["metrics.txt", "manifest.json"])?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    data_dir: &Path,
    ckpt: &Path,
    subject: usize,
    relation: usize,
    raw_time: u64,
    prediction: Option<usize>,
    out_dir: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let split = load_dataset_dir(data_dir)?;
    let model = checkpoint::load(ckpt)?;
    let context = split.full_sequence();
    let time = context.normalize_raw_time(raw_time).ok_or_else(|| {
        CliError::Data(format!("timestamp {raw_time} does not occur in the dataset"))
    })?;
    let window = history_window(&context, time, cfg.m);
    let graph = HistoryTemporalGraph::build(&window, context.num_entities, time)?;
    let query = Query {
        subject,
        relation,
        time,
    };
    let prediction = match prediction {
        Some(p) => p,
        None => {
            let scores = eval::score_query(&model, &context, query, cfg.m)?;
            scores
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite scores"))
                .map(|(i, _)| i)
                .expect("nonempty candidate set")
        }
    };
    let importances = evidence::edge_importances(&model, &graph, query, prediction)?;
    let paths = evidence::top_k_paths(
        &graph,
        subject,
        prediction,
        &importances,
        cfg.top_k,
        cfg.beam_width.max(cfg.top_k),
        model.config.prop.omega,
    );
    let mut report = format!(
        "query: ({subject} {relation} ? {raw_time})\nprediction: {prediction}\npaths: {}\n",
        paths.len()
    );
    report.push_str(&evidence::render_paths(&graph, &paths));
    print!("{report}");
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_file(&dir.join("evidence.txt"), &report)?;
        write_manifest(
            dir,
            "explain",
            cfg.echo_map(),
            &["evidence.txt", "manifest.json"],
        )?;
    }
    Ok(())
}

fn cmd_gen_synth(out_dir: &Path, cfg: PlantedConfig) -> Result<(), CliError> {
    let dataset = gen_planted(&cfg)?;
    ensure_dir(out_dir)?;
    data::write_stat_file(
        &out_dir.join("stat.txt"),
        cfg.num_entities,
        cfg.num_base_relations,
    )?;
    // base facts only; loaders re-add the inverses
    let boundary = |seq: &SnapshotSequence| seq.snapshots.first().map(|(t, _)| *t);
    let valid_start = boundary(&dataset.split.valid).unwrap_or(usize::MAX);
    let test_start = boundary(&dataset.split.test).unwrap_or(usize::MAX);
    let mut parts: BTreeMap<&str, String> = BTreeMap::new();
    for q in &dataset.base_facts {
        let name = if (q.timestamp as usize) < valid_start {
            "train.txt"
        } else if (q.timestamp as usize) < test_start {
            "valid.txt"
        } else {
            "test.txt"
        };
        parts.entry(name).or_default().push_str(&format!(
            "{} {} {} {}\n",
            q.subject, q.relation, q.object, q.timestamp
        ));
    }
    for name in ["train.txt", "valid.txt", "test.txt"] {
        write_file(&out_dir.join(name), parts.get(name).map(|s| s.as_str()).unwrap_or(""))?;
    }
    let gt: String = dataset
        .ground_truth
        .iter()
        .map(|q| format!("{} {} {} {}\n", q.subject, q.relation, q.object, q.timestamp))
        .collect();
    write_file(&out_dir.join("ground_truth.txt"), &gt)?;
    let mut config = BTreeMap::new();
    config.insert("entities".to_string(), cfg.num_entities.to_string());
    config.insert("timestamps".to_string(), cfg.num_timestamps.to_string());
    config.insert("base_relations".to_string(), cfg.num_base_relations.to_string());
    config.insert("chains".to_string(), cfg.num_chains.to_string());
    config.insert("noise_rate".to_string(), cfg.noise_edge_rate.to_string());
    config.insert("history_len".to_string(), cfg.history_len.to_string());
    config.insert("train_frac".to_string(), cfg.train_frac.to_string());
    config.insert("valid_frac".to_string(), cfg.valid_frac.to_string());
    config.insert("seed".to_string(), cfg.seed.to_string());
    write_manifest(
        out_dir,
        "gen-synth",
        config,
        &[
            "stat.txt",
            "train.txt",
            "valid.txt",
            "test.txt",
            "ground_truth.txt",
            "manifest.json",
        ],
    )?;
    println!(
        "wrote {} base facts ({} planted consequences in the test range) to {}",
        dataset.base_facts.len(),
        dataset.ground_truth.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_make_inductive(
    data_dir: &Path,
    out_dir: &Path,
    ratio: f64,
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Result<(), CliError> {
    let split = load_dataset_dir(data_dir)?;
    let full = split.full_sequence();
    let pair = make_inductive(&full, ratio, seed)?;
    for (name, side) in [("side_a", &pair.side_a), ("side_b", &pair.side_b)] {
        let dir = out_dir.join(name);
        ensure_dir(&dir)?;
        let side_split = split_by_time(side, train_frac, valid_frac)?;
        data::write_stat_file(
            &dir.join("stat.txt"),
            side.num_entities,
            side.num_base_relations(),
        )?;
        for (file, seq) in [
            ("train.txt", &side_split.train),
            ("valid.txt", &side_split.valid),
            ("test.txt", &side_split.test),
        ] {
            // base facts only; loaders re-add the inverses
            let mut text = String::new();
            for q in seq.all_facts().filter(|q| q.relation < side.num_base_relations()) {
                let raw = side
                    .raw_timestamps
                    .get(q.timestamp)
                    .copied()
                    .unwrap_or(q.timestamp as u64);
                text.push_str(&format!("{} {} {} {}\n", q.subject, q.relation, q.object, raw));
            }
            write_file(&dir.join(file), &text)?;
        }
    }
    let mut config = BTreeMap::new();
    config.insert("ratio".to_string(), ratio.to_string());
    config.insert("seed".to_string(), seed.to_string());
    config.insert("entities_a".to_string(), pair.side_a.num_entities.to_string());
    config.insert("entities_b".to_string(), pair.side_b.num_entities.to_string());
    write_manifest(
        out_dir,
        "make-inductive",
        config,
        &["side_a", "side_b", "manifest.json"],
    )?;
    println!(
        "wrote inductive pair: side_a |V|={}, side_b |V|={}, disjoint entities, shared relations",
        pair.side_a.num_entities, pair.side_b.num_entities
    );
    Ok(())
}
