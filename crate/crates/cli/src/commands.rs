use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use elsm::eval::{community_pipeline, rolling_link_prediction, score_prediction, spectral_pipeline};
use elsm::io::{self, EmbeddingsFile, NodeRanking, RunManifest, TrajectoryFile};
use elsm::objective::Variant;
use elsm::trainer::{TrainConfig, Trainer};
use elsm::GeneratorConfig;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::{
    Baseline, ClusterArgs, EvalMetricsArgs, GenerateArgs, LinkpredArgs, PrepareArgs, RankArg, TrainArgs,
    VariantArg,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Elsm(elsm::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Elsm(e) if e.is_usage() => 2,
            CliError::Elsm(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Elsm(e) => e.fmt(f),
        }
    }
}

impl From<elsm::Error> for CliError {
    fn from(e: elsm::Error) -> Self {
        CliError::Elsm(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Configuration files are user input: any failure to read one is a usage error.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    io::read_json(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Elsm(elsm::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

struct Run {
    subcommand: &'static str,
    started: Instant,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
}

impl Run {
    fn new(subcommand: &'static str) -> Self {
        Run {
            subcommand,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.to_path_buf());
    }

    fn output(&mut self, name: &str, path: PathBuf) -> PathBuf {
        self.outputs.insert(name.into(), path.clone());
        path
    }

    fn finish(self, dir: &Path, config: Value, seed: Option<u64>, notes: Value) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            config,
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            notes,
        };
        io::write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(())
    }
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let mut run = Run::new("generate");
    run.input("config", &args.config);
    let config: GeneratorConfig = load_config(&args.config)?;
    let out = elsm::generate(&config, args.seed)?;
    create_dir(&args.out)?;
    io::save_network(&run.output("network", args.out.join("network.txt")), &out.network)?;
    io::write_json(&run.output("latents", args.out.join("latents.json")), &TrajectoryFile::from(&out.trajectory))?;
    log::info!(
        "generated {} snapshots of {} nodes",
        out.network.len(),
        out.network.n()
    );
    run.finish(&args.out, json!({ "args": args, "generator": config }), Some(args.seed), Value::Null)
}

fn variant(v: VariantArg) -> Variant {
    match v {
        VariantArg::Ielsm => Variant::Ielsm,
        VariantArg::Elsm => Variant::Elsm,
    }
}

fn train_config(path: Option<&Path>, v: Option<VariantArg>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = v {
        cfg.variant = variant(v);
    }
    cfg.validate().map_err(|e| CliError::Usage(format!("training config: {e}")))?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut run = Run::new("train");
    run.input("data", &args.data);
    if let Some(c) = &args.config {
        run.input("config", c);
    }
    let mut cfg = train_config(args.config.as_deref(), args.variant)?;
    let network = io::load_network(&args.data)?;
    create_dir(&args.out)?;
    let ckpt_path = run.output("checkpoint", args.out.join("checkpoint.bin"));
    if cfg.checkpoint_every > 0 && cfg.checkpoint_path.is_none() {
        cfg.checkpoint_path = Some(ckpt_path.clone());
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            run.input("resume", path);
            let ck = io::read_checkpoint(path)?;
            log::info!("resuming at epoch {}", ck.epoch);
            Trainer::resume(&network, None, ck, Some(cfg.clone()))?
        }
        None => Trainer::new(&network, cfg.clone())?,
    };
    let start_epoch = trainer.epoch();
    trainer.run()?;
    io::write_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    let model = trainer.finish()?;
    let emb = EmbeddingsFile::new(&model.state, &model.decoder, &model.priors);
    io::write_json(&run.output("embeddings", args.out.join("embeddings.json")), &emb)?;
    io::write_training_log(&run.output("training_log", args.out.join("training_log.csv")), &model.log)?;
    let last = model.log.last().map(|r| r.report.elbo);
    log::info!("trained {} epochs, final elbo {:?}", model.epochs_run, last);
    let notes = json!({
        "start_epoch": start_epoch,
        "epochs_run": model.epochs_run,
        "final_elbo": last,
    });
    run.finish(&args.out, json!({ "args": args, "train": cfg }), Some(cfg.seed), notes)
}

pub fn cluster(args: &ClusterArgs) -> Result<()> {
    let mut run = Run::new("cluster");
    run.input("graph", &args.graph);
    if args.embeddings.is_none() && !args.spectral {
        return Err(CliError::Usage("nothing to do: pass --embeddings and/or --spectral".into()));
    }
    if args.k_min < 1 || args.k_min > args.k_max {
        return Err(CliError::Usage(format!("need 1 <= k-min <= k-max, got {}..={}", args.k_min, args.k_max)));
    }
    let network = io::load_network(&args.graph)?;
    create_dir(&args.out)?;
    let mut notes = serde_json::Map::new();
    if let Some(path) = &args.embeddings {
        run.input("embeddings", path);
        let emb: EmbeddingsFile = io::read_json(path)?;
        if emb.n != network.n() || emb.t != network.len() {
            return Err(CliError::Usage(format!(
                "embeddings cover {} nodes x {} snapshots, graph has {} x {}",
                emb.n,
                emb.t,
                network.n(),
                network.len()
            )));
        }
        let state = emb.state()?;
        let r = community_pipeline(&state.nu, &network, args.k_min, args.k_max, args.seed)?;
        io::write_community_csv(&run.output("communities_csv", args.out.join("communities.csv")), &r)?;
        io::write_json(&run.output("communities_json", args.out.join("communities.json")), &r)?;
        notes.insert("avg_modularity".into(), json!(r.avg_modularity));
        notes.insert("avg_nmi".into(), json!(r.avg_nmi));
    }
    if args.spectral {
        let r = spectral_pipeline(&network, args.k_min, args.k_max, args.seed)?;
        io::write_community_csv(&run.output("spectral_csv", args.out.join("spectral.csv")), &r)?;
        io::write_json(&run.output("spectral_json", args.out.join("spectral.json")), &r)?;
        notes.insert("spectral_avg_modularity".into(), json!(r.avg_modularity));
        notes.insert("spectral_avg_nmi".into(), json!(r.avg_nmi));
    }
    run.finish(&args.out, json!({ "args": args }), Some(args.seed), Value::Object(notes))
}

pub fn linkpred(args: &LinkpredArgs) -> Result<()> {
    let mut run = Run::new("linkpred");
    run.input("data", &args.data);
    let cfg = if args.config.is_some() || args.variant.is_some() {
        if let Some(c) = &args.config {
            run.input("config", c);
        }
        Some(train_config(args.config.as_deref(), args.variant)?)
    } else {
        None
    };
    let bas = args.baselines.contains(&Baseline::Bas);
    if cfg.is_none() && !bas {
        return Err(CliError::Usage("nothing to do: pass --config/--variant and/or --baselines bas".into()));
    }
    if args.targets == 0 {
        return Err(CliError::Usage("--targets must be positive".into()));
    }
    let network = io::load_network(&args.data)?;
    create_dir(&args.out)?;
    let report = rolling_link_prediction(&network, cfg.as_ref(), bas, args.targets)?;
    io::write_linkpred_csv(&run.output("linkpred_csv", args.out.join("linkpred.csv")), &report)?;
    io::write_json(&run.output("linkpred_json", args.out.join("linkpred.json")), &report)?;
    let rounds: Vec<Value> = report
        .targets
        .iter()
        .map(|&t| json!({ "history": [0, t - 1], "target": t }))
        .collect();
    let notes = json!({ "rounds": rounds, "averages": report.averages });
    run.finish(&args.out, json!({ "args": args, "train": cfg }), cfg.as_ref().map(|c| c.seed), notes)
}

pub fn eval_metrics(args: &EvalMetricsArgs) -> Result<()> {
    let mut run = Run::new("eval-metrics");
    run.input("pred", &args.pred);
    run.input("truth", &args.truth);
    let pred = io::load_matrix(&args.pred)?;
    let is_json = args.truth.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let truth = if is_json {
        io::load_matrix(&args.truth)?
    } else {
        let net = io::load_network(&args.truth)?;
        let t = args.snapshot.unwrap_or(net.len() - 1);
        if t >= net.len() {
            return Err(CliError::Usage(format!("snapshot {t} out of range for T = {}", net.len())));
        }
        net.snapshot(t).clone()
    };
    let r = score_prediction(pred, &truth)?;
    let metrics = json!({ "auc": r.auc, "f1": r.f1, "threshold": r.threshold, "pairs": truth.nrows() * truth.nrows().saturating_sub(1) / 2 });
    println!("{}", serde_json::to_string_pretty(&metrics).expect("json"));
    if let Some(out) = &args.out {
        io::write_json(&run.output("metrics", out.clone()), &metrics)?;
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        run.finish(dir, json!({ "args": args }), None, Value::Null)?;
    }
    Ok(())
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let mut run = Run::new("prepare");
    run.input("edges", &args.edges);
    let edges = io::load_edge_list(&args.edges)?;
    let mut network = match args.start {
        Some(s) => io::aggregate_windows_from(&edges, s, args.window, args.count, args.binarize)?,
        None => io::aggregate_windows(&edges, args.window, args.count, args.binarize)?,
    };
    let mut nodes: Vec<String> = edges.node_ids.clone();
    if let Some(k) = args.top {
        let by = match args.rank_by {
            RankArg::TotalWeight => NodeRanking::TotalWeight,
            RankArg::UniqueNeighbors => NodeRanking::UniqueNeighbors,
        };
        let (net, keep) = io::filter_top_nodes(&network, k, by)?;
        network = net;
        nodes = keep.iter().map(|&i| edges.node_ids[i].clone()).collect();
    }
    let mut snapshots: Vec<usize> = (0..network.len()).collect();
    if let Some(m) = args.min_nonzero {
        let (net, keep) = io::filter_sparse_snapshots(&network, m)?;
        network = net;
        snapshots = keep;
    }
    create_dir(&args.out)?;
    io::save_network(&run.output("network", args.out.join("network.txt")), &network)?;
    io::write_json(&run.output("nodes", args.out.join("nodes.json")), &nodes)?;
    let notes = json!({
        "events": edges.records.len(),
        "self_loops_dropped": edges.self_loops_dropped,
        "kept_windows": snapshots,
    });
    run.finish(&args.out, json!({ "args": args }), None, notes)
}
