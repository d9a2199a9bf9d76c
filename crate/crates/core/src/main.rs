use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mixfacenet::checkpoint::Checkpoint;
use mixfacenet::complexity;
use mixfacenet::config::NetworkConfig;
use mixfacenet::eval::{self, PairList};
use mixfacenet::gradcheck;
use mixfacenet::image;
use mixfacenet::manifest::RunManifest;
use mixfacenet::network::{Embedding, Metric, Network};
use mixfacenet::train::{self, ToyConfig};
use mixfacenet::{Error, Tensor};

#[derive(Parser)]
#[command(name = "mixfacenet", version, about = "MixFaceNet face embeddings on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer MACs, FLOPs and parameters of an architecture
    Describe(DescribeArgs),
    /// Embed images into an MFTN file with an id manifest
    Embed(EmbedArgs),
    /// Run a verification or identification protocol on stored embeddings
    Verify(VerifyArgs),
    /// Finite-difference check of every primitive and the ArcFace head
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Overfit a small network on synthetic identities
    TrainToy(TrainArgs),
}

#[derive(Args)]
struct ArchArgs {
    /// Preset name (mixfacenet-xs|s|m, shufflemixfacenet-*, nano)
    #[arg(long)]
    arch: Option<String>,
    /// Network config file in the key-value text format
    #[arg(long, conflicts_with = "arch")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    input_size: Option<Vec<usize>>,
    /// Also write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// MFNW checkpoint; without it weights come from --seed
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PPM (P6) images or MFTN tensors; the file stem is the id
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Kfold,
    Tarfar,
    Rank1,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    EuclideanNormalized,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::EuclideanNormalized => Metric::EuclideanNormalized,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// Pair list: `id_a id_b label [fold]` per line
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// MFTN embedding file with a `.ids` sidecar
    #[arg(long)]
    embeddings: PathBuf,
    /// FAR targets for TAR@FAR (repeatable)
    #[arg(long, default_values_t = [1e-4])]
    far: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Protocol::All)]
    protocol: Protocol,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    metric: MetricArg,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Identity per embedding id as `id identity` lines; default is the id
    /// up to its last '_'
    #[arg(long)]
    identities: Option<PathBuf>,
    /// Write per-pair scores as CSV
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "config", default_value = "nano")]
    arch: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    #[arg(long, default_value_t = 64.0)]
    scale: f64,
    /// Stop once inference accuracy reaches this value
    #[arg(long)]
    stop_at: Option<f64>,
    /// Directory for the checkpoint and the curve CSV
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Compute(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Compute(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Compute(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn args_vec() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn load_config(a: &ArchArgs) -> Result<NetworkConfig, Failure> {
    match (&a.arch, &a.config) {
        (Some(name), _) => NetworkConfig::preset(name).map_err(|e| Failure::Usage(e.to_string())),
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            NetworkConfig::from_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
        }
        (None, None) => Err(Failure::Usage("one of --arch or --config is required".into())),
    }
}

fn describe(a: DescribeArgs) -> CliResult {
    let mut cfg = load_config(&a.arch)?;
    if let Some(hw) = &a.input_size {
        if hw.iter().any(|&v| v == 0) {
            return Err(Failure::Usage("--input-size must be positive".into()));
        }
        cfg.input_size = (hw[0], hw[1]);
    }
    let net = Network::build(cfg, 0)?;
    let report = complexity::describe(&net, None)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv())?;
        let mut m = RunManifest::new("describe", args_vec());
        m.config = Some(net.config().to_text());
        m.outputs.push(path.display().to_string());
        m.write_beside(path)?;
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> CliResult {
    let net = match (&a.weights, a.arch.arch.is_some() || a.arch.config.is_some()) {
        (Some(w), false) => Network::load_checkpoint(w)?,
        (Some(w), true) => {
            let mut net = Network::build(load_config(&a.arch)?, a.seed)?;
            net.load_weights(&Checkpoint::load(w)?)?;
            net
        }
        (None, true) => {
            eprintln!("warning: no --weights given, using weights initialized from seed {}", a.seed);
            Network::build(load_config(&a.arch)?, a.seed)?
        }
        (None, false) => return Err(Failure::Usage("give --weights, --arch or --config".into())),
    };
    let mut m = RunManifest::new("embed", args_vec());
    m.seed = Some(a.seed);
    m.config = Some(net.config().to_text());
    if let Some(w) = &a.weights {
        m.add_input(w)?;
    }
    let mut ids = Vec::with_capacity(a.input.len());
    let mut embs = Vec::with_capacity(a.input.len());
    for path in &a.input {
        let x = image::load_input(path, net.config().input_size)?;
        m.add_input(path)?;
        embs.push(net.embed(&x)?.remove(0));
        ids.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        );
    }
    eval::write_embeddings(&a.out, &ids, &embs)?;
    m.outputs = vec![a.out.display().to_string(), eval::ids_path(&a.out).display().to_string()];
    m.write_beside(&a.out)?;
    println!("wrote {} embeddings of dimension {} to {}", embs.len(), net.embed_dim(), a.out.display());
    Ok(())
}

fn identities(ids: &[String], file: Option<&Path>) -> Result<Vec<String>, Failure> {
    let Some(path) = file else {
        return Ok(ids
            .iter()
            .map(|id| id.rsplit_once('_').map_or(id.as_str(), |(p, _)| p).to_string())
            .collect());
    };
    let map: HashMap<String, String> = fs::read_to_string(path)?
        .lines()
        .filter_map(|l| {
            let mut f = l.split_whitespace();
            Some((f.next()?.to_string(), f.next()?.to_string()))
        })
        .collect();
    let missing: Vec<String> = ids.iter().filter(|id| !map.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Failure::Compute(Error::MissingIds(missing)));
    }
    Ok(ids.iter().map(|id| map[id].clone()).collect())
}

fn verify(a: VerifyArgs) -> CliResult {
    if let Some(f) = a.far.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Failure::Usage(format!("--far {f} must lie strictly between 0 and 1")));
    }
    let wants = |p: Protocol| a.protocol == p || a.protocol == Protocol::All;
    if (wants(Protocol::Kfold) || wants(Protocol::Tarfar)) && a.pairs.is_none() {
        return Err(Failure::Usage("--pairs is required for kfold and tarfar".into()));
    }
    let metric = Metric::from(a.metric);
    let (ids, embs) = eval::read_embeddings(&a.embeddings)?;
    let mut m = RunManifest::new("verify", args_vec());
    m.add_input(&a.embeddings)?;
    println!("metric: {}", metric.as_str());
    if let Some(pairs_path) = &a.pairs {
        m.add_input(pairs_path)?;
        let pairs = PairList::load(pairs_path)?;
        let index: HashMap<&str, &Embedding> = ids.iter().map(String::as_str).zip(&embs).collect();
        let scored = eval::score_embeddings(&pairs, |id| index.get(id).map(|e| (*e).clone()), metric)?;
        if wants(Protocol::Kfold) {
            let folds = pairs.fold_assignment(a.folds).map_err(|e| Failure::Usage(e.to_string()))?;
            let r = eval::verification_accuracy_kfold(&pairs.labels(), &scored.scores, &folds, a.folds)?;
            println!("kfold accuracy ({} folds): {:.4} +- {:.4}", a.folds, r.mean, r.std);
            for (i, f) in r.folds.iter().enumerate() {
                println!("  fold {i}: threshold {:.6} accuracy {:.4}", f.threshold, f.accuracy);
            }
        }
        if wants(Protocol::Tarfar) {
            for &far in &a.far {
                let r = eval::tar_at_far(&scored.set, far)?;
                println!(
                    "TAR@FAR={far:e}: {:.4} (threshold {:.6}, achieved FAR {:.6})",
                    r.tar, r.threshold, r.far
                );
            }
        }
        if let Some(out) = &a.scores_out {
            fs::write(out, eval::score_dump(&pairs, &scored.scores))?;
            m.outputs.push(out.display().to_string());
            m.write_beside(out)?;
        }
    }
    if wants(Protocol::Rank1) {
        let labels = identities(&ids, a.identities.as_deref())?;
        // leave-one-out over identities with at least two embeddings
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for l in &labels {
            *counts.entry(l.as_str()).or_default() += 1;
        }
        let probes: Vec<usize> = (0..labels.len()).filter(|&i| counts[labels[i].as_str()] > 1).collect();
        if probes.is_empty() {
            println!("rank-1 identification: no identity has two or more embeddings");
        } else {
            let pl: Vec<&String> = probes.iter().map(|&i| &labels[i]).collect();
            let pe: Vec<&[f32]> = probes.iter().map(|&i| embs[i].as_slice()).collect();
            let gl: Vec<&String> = labels.iter().collect();
            let ge: Vec<&[f32]> = embs.iter().map(Embedding::as_slice).collect();
            let r = eval::rank1_identification(&pl, &pe, &gl, &ge, metric, Some(&probes))?;
            println!("rank-1 identification: {r:.4} over {} probes", probes.len());
        }
    }
    Ok(())
}

fn gradcheck(seed: u64) -> CliResult {
    let report = gradcheck::run(seed)?;
    for c in &report.checks {
        println!("{c}");
    }
    if report.all_passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed()).count();
        Err(Failure::Compute(Error::Invalid(format!("{failed} gradient check(s) failed"))))
    }
}

fn train_toy(a: TrainArgs) -> CliResult {
    if a.lr < 0.0 || !(0.0..1.0).contains(&a.momentum) || a.weight_decay < 0.0 {
        return Err(Failure::Usage("need lr >= 0, 0 <= momentum < 1, weight decay >= 0".into()));
    }
    NetworkConfig::preset(&a.arch).map_err(|e| Failure::Usage(e.to_string()))?;
    let cfg = ToyConfig {
        arch: a.arch,
        steps: a.steps,
        seed: a.seed,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        margin: a.margin,
        scale: a.scale,
        stop_at: a.stop_at,
        ..ToyConfig::default()
    };
    let run = train::train_toy(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("toy.mfnw");
    let curve = a.out.join("toy_curve.csv");
    let head = a.out.join("toy_head.mftn");
    run.net.save_checkpoint(&ckpt)?;
    fs::write(&curve, run.curve_csv())?;
    let mut buf = Vec::new();
    Tensor::write_mftn(&run.head.weight, &mut buf)?;
    fs::write(&head, buf)?;
    let mut m = RunManifest::new("train-toy", args_vec());
    m.seed = Some(cfg.seed);
    m.config = Some(run.net.config().to_text());
    m.outputs = [&ckpt, &curve, &head].iter().map(|p| p.display().to_string()).collect();
    m.write_beside(&ckpt)?;
    let last = run.curve.last();
    println!(
        "steps run: {}  final loss: {}  final training accuracy: {:.4}",
        run.curve.len(),
        last.map_or(f32::NAN, |r| r.loss),
        run.final_accuracy
    );
    println!("checkpoint: {}  curve: {}", ckpt.display(), curve.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Describe(a) => describe(a),
        Command::Embed(a) => embed(a),
        Command::Verify(a) => verify(a),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::TrainToy(a) => train_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
