//! Command-line driver: data generation, pretraining, few-shot evaluation,
//! representation probes and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric
//! abort (including a failed gradient check).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use damim_core::analysis::{disruption_sweep, domain_similarity, layer_target_probe};
use damim_core::data::{generate_synthetic, load_images, write_ppm, ConfigFile, LabeledDataset, SyntheticSpec};
use damim_core::exec::Execution;
use damim_core::fewshot::{evaluate, EvalConfig};
use damim_core::modelcheck::model_suite;
use damim_core::tensor::gradcheck::{op_suite, OpCheck, REL_TOL};
use damim_core::trainer::{load_encoder, train, write_log_csv, Regime, TrainConfig};
use damim_core::data::Checkpoint;
use damim_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Name of the labels file inside every image directory.
pub const LABELS: &str = "labels.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LAST_GOOD: &str = "last_good.bin";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Parser, Debug)]
#[command(name = "damim", version, about = "Masked image modeling experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic two-domain dataset as PPM directories.
    GenData(GenDataArgs),
    /// Pretrain a model and write its checkpoint and training log.
    Pretrain(PretrainArgs),
    /// Episodic few-shot evaluation of a pretrained encoder.
    EvalFewshot(EvalArgs),
    /// Representation probes.
    Analyze {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Finite-difference check of every differentiable op and model path.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand, Debug)]
enum Probe {
    /// Cross-domain CKA of final features.
    Cka(CkaArgs),
    /// CKA after zeroing a fraction of tokens at each layer.
    Disrupt(DisruptArgs),
    /// Train single-layer-target models and compare loss and similarity per layer.
    LayerProbe(LayerProbeArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run fan-out work sequentially.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Config file, then `--set` overrides, then `--seed`; keys checked against `known`.
    fn config(&self, known: &[&str]) -> Result<ConfigFile> {
        let mut cfg = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim());
        }
        if let Some(s) = self.seed {
            cfg.set("seed", s.to_string());
        }
        cfg.check_known(known)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory; receives `a/` and `b/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    per_class: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Image directory containing labels.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// `proto` or `finetune`.
    #[arg(long)]
    mode: Option<String>,
    /// `euclidean` or `cosine`.
    #[arg(long)]
    distance: Option<String>,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Samples per domain.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CkaArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct DisruptArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fraction: Option<f64>,
    /// Disruption seeds to average over.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct LayerProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random points per op.
    #[arg(long, default_value_t = 3)]
    points: usize,
    /// Optional CSV of the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

const DATA_KEYS: &[&str] = &["seed", "per_class", "noise_std", "min_size", "max_size", "b_offset", "b_cast_amplitude"];
const EVAL_KEYS: &[&str] = &[
    "seed",
    "k",
    "n",
    "q",
    "episodes",
    "mode",
    "distance",
    "finetune_steps",
    "finetune_lr",
    "finetune_backbone_lr",
    "finetune_momentum",
];
const CKA_KEYS: &[&str] = &["seed", "samples"];
const DISRUPT_KEYS: &[&str] = &["seed", "samples", "fraction"];
const DEFAULT_SAMPLES: usize = 200;

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericAbort { .. } | Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::EvalFewshot(a) => eval_fewshot(a),
        Command::Analyze { probe } => match probe {
            Probe::Cka(a) => cka(a),
            Probe::Disrupt(a) => disrupt(a),
            Probe::LayerProbe(a) => layer_probe(a),
        },
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Loads an image directory with its `labels.csv`.
pub fn load_dir(dir: &Path) -> Result<LabeledDataset> {
    load_images(dir, &dir.join(LABELS))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path).map_err(io_err(path))?)
}

fn write_dir(dir: &Path, data: &LabeledDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut labels = String::from("filename,class_index\n");
    for i in 0..data.len() {
        let name = format!("img_{i:05}.ppm");
        write_file(&dir.join(&name), &write_ppm(data.side, data.side, data.image(i)))?;
        labels.push_str(&format!("{name},{}\n", data.labels[i]));
    }
    write_file(&dir.join(LABELS), labels.as_bytes())
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let cfg = a.common.config(DATA_KEYS)?;
    let mut spec = SyntheticSpec::default();
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(v) = cfg.parsed($key)? {
                $field = v;
            }
        };
    }
    set!("per_class", spec.per_class);
    set!("noise_std", spec.noise_std);
    set!("min_size", spec.min_size);
    set!("max_size", spec.max_size);
    set!("b_offset", spec.b_offset);
    set!("b_cast_amplitude", spec.b_cast_amplitude);
    if let Some(p) = a.per_class {
        spec.per_class = p;
    }
    let seed = cfg.parsed("seed")?.unwrap_or(1);
    let pair = generate_synthetic(&spec, seed)?;
    write_dir(&a.out.join("a"), &pair.a)?;
    write_dir(&a.out.join("b"), &pair.b)?;
    let summary = format!(
        "domain,images,mean_intensity\na,{},{}\nb,{},{}\n",
        pair.a.len(),
        mean(&pair.a.pixels),
        pair.b.len(),
        mean(&pair.b.pixels)
    );
    write_file(&a.out.join("summary.csv"), summary.as_bytes())?;
    println!("wrote {} + {} images to {}", pair.a.len(), pair.b.len(), a.out.display());
    Ok(EXIT_OK)
}

fn train_config(common: &Common, extra: &[(&str, Option<String>)], known_extra: &[&str]) -> Result<(TrainConfig, ConfigFile)> {
    let mut known: Vec<&str> = TrainConfig::KEYS.to_vec();
    known.extend_from_slice(known_extra);
    let mut file = common.config(&known)?;
    for (k, v) in extra {
        if let Some(v) = v {
            file.set(k, v.clone());
        }
    }
    let mut cfg = TrainConfig::default();
    cfg.apply(&file)?;
    cfg.validate()?;
    Ok((cfg, file))
}

fn pretrain(a: PretrainArgs) -> Result<i32> {
    let (cfg, _) = train_config(
        &a.common,
        &[
            ("regime", a.regime.clone()),
            ("steps", a.steps.map(|v| v.to_string())),
            ("lr", a.lr.map(|v| v.to_string())),
            ("batch_size", a.batch_size.map(|v| v.to_string())),
        ],
        &[],
    )?;
    let data = load_dir(&a.data)?;
    log::info!("pretraining {} for {} steps on {} images", cfg.regime, cfg.steps, data.len());
    match train::<f32>(&cfg, &data) {
        Ok(out) => {
            write_file(&a.out.join(CHECKPOINT), &out.model.checkpoint()?.to_bytes()?)?;
            let mut csv = Vec::new();
            write_log_csv(&mut csv, &out.log, cfg.encoder.depth).map_err(io_err(&a.out))?;
            write_file(&a.out.join(TRAIN_LOG), &csv)?;
            if let Some(l) = out.final_window_loss(0.1) {
                println!("{} final loss {l:.6}", cfg.regime);
            }
            Ok(EXIT_OK)
        }
        Err(Error::NumericAbort { step, reason, last_good }) => {
            if let Some(bytes) = &last_good {
                write_file(&a.out.join(LAST_GOOD), bytes)?;
                eprintln!("last good weights written to {}", a.out.join(LAST_GOOD).display());
            }
            Err(Error::NumericAbort { step, reason, last_good })
        }
        Err(e) => Err(e),
    }
}

fn eval_config(file: &ConfigFile) -> Result<EvalConfig> {
    let mut cfg = EvalConfig::default();
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(v) = file.parsed($key)? {
                $field = v;
            }
        };
    }
    set!("seed", cfg.seed);
    set!("k", cfg.k);
    set!("n", cfg.n);
    set!("q", cfg.q);
    set!("episodes", cfg.episodes);
    set!("mode", cfg.mode);
    set!("distance", cfg.distance);
    set!("finetune_steps", cfg.finetune.steps);
    set!("finetune_lr", cfg.finetune.lr);
    set!("finetune_backbone_lr", cfg.finetune.backbone_lr);
    set!("finetune_momentum", cfg.finetune.momentum);
    Ok(cfg)
}

fn eval_fewshot(a: EvalArgs) -> Result<i32> {
    let mut file = a.common.config(EVAL_KEYS)?;
    let flags = [
        ("k", a.k.map(|v| v.to_string())),
        ("n", a.n.map(|v| v.to_string())),
        ("q", a.q.map(|v| v.to_string())),
        ("episodes", a.episodes.map(|v| v.to_string())),
        ("mode", a.mode.clone()),
        ("distance", a.distance.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            file.set(k, v);
        }
    }
    let cfg = eval_config(&file)?;
    let (store, enc) = load_encoder::<f32>(&load_checkpoint(&a.checkpoint)?)?;
    let data = load_dir(&a.data)?;
    let report = evaluate(&store, &enc, &data, &cfg, a.common.exec())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(io_err(&a.out))?;
    write_file(&a.out, &csv)?;
    println!("{}-way {}-shot: {:.2} ± {:.2}", cfg.k, cfg.n, report.mean_acc, report.ci95);
    Ok(EXIT_OK)
}

fn samples(file: &ConfigFile, flag: Option<usize>, a: &LabeledDataset, b: &LabeledDataset) -> Result<usize> {
    Ok(match flag {
        Some(n) => n,
        None => file.parsed("samples")?.unwrap_or(DEFAULT_SAMPLES).min(a.len()).min(b.len()),
    })
}

fn cka(a: CkaArgs) -> Result<i32> {
    let file = a.common.config(CKA_KEYS)?;
    let (store, enc) = load_encoder::<f32>(&load_checkpoint(&a.checkpoint)?)?;
    let src = load_dir(&a.pair.source)?;
    let tgt = load_dir(&a.pair.target)?;
    let n = samples(&file, a.pair.samples, &src, &tgt)?;
    let seed = file.parsed("seed")?.unwrap_or(1);
    let value = domain_similarity(&store, &enc, &src, &tgt, n, seed, None)?;
    write_file(&a.pair.out, format!("samples,seed,cka\n{n},{seed},{value}\n").as_bytes())?;
    println!("cka {value:.6}");
    Ok(EXIT_OK)
}

fn disrupt(a: DisruptArgs) -> Result<i32> {
    let file = a.common.config(DISRUPT_KEYS)?;
    let (store, enc) = load_encoder::<f32>(&load_checkpoint(&a.checkpoint)?)?;
    let src = load_dir(&a.pair.source)?;
    let tgt = load_dir(&a.pair.target)?;
    let n = samples(&file, a.pair.samples, &src, &tgt)?;
    let fraction = match a.fraction {
        Some(f) => f,
        None => file.parsed("fraction")?.unwrap_or(0.5),
    };
    let seeds = if a.seeds.is_empty() {
        vec![file.parsed("seed")?.unwrap_or(1)]
    } else {
        a.seeds.clone()
    };
    let report = disruption_sweep(&store, &enc, &src, &tgt, fraction, n, &seeds, a.common.exec())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(io_err(&a.pair.out))?;
    write_file(&a.pair.out, &csv)?;
    for (l, v) in report.layers.iter().zip(&report.values) {
        println!("layer {l}: cka {v:.6}");
    }
    Ok(EXIT_OK)
}

fn layer_probe(a: LayerProbeArgs) -> Result<i32> {
    let (cfg, file) = train_config(&a.common, &[("steps", a.steps.map(|v| v.to_string()))], &["samples"])?;
    let src = load_dir(&a.pair.source)?;
    let tgt = load_dir(&a.pair.target)?;
    let n = samples(&file, a.pair.samples, &src, &tgt)?;
    let layers = if a.layers.is_empty() {
        vec![1, cfg.encoder.depth]
    } else {
        a.layers.clone()
    };
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > cfg.encoder.depth) {
        return Err(Error::Config(format!("layer {bad} outside 1..={}", cfg.encoder.depth)));
    }
    let template = TrainConfig { regime: Regime::Layer(1), ..cfg };
    let (loss, sim) = layer_target_probe(&template, &src, &tgt, &layers, &seeds, n, a.common.exec())?;
    let mut csv = String::from("layer,loss,cka\n");
    for (i, l) in layers.iter().enumerate() {
        csv.push_str(&format!("{l},{},{}\n", loss.values[i], sim.values[i]));
        println!("layer {l}: loss {:.6} cka {:.6}", loss.values[i], sim.values[i]);
    }
    write_file(&a.pair.out, csv.as_bytes())?;
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let mut checks: Vec<OpCheck> = op_suite(a.seed, a.points)?;
    checks.extend(model_suite(a.seed, a.points)?);
    let mut csv = String::from("op,points,max_rel_err,passed\n");
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "{:<32} {:>6} {:>12}  status", "op", "points", "max_rel_err");
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(out, "{:<32} {:>6} {:>12.3e}  {status}", c.op, c.points, c.max_rel_err);
        csv.push_str(&format!("{},{},{},{}\n", c.op, c.points, c.max_rel_err, c.passed()));
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    let _ = writeln!(out, "{} checks, {failed} above {REL_TOL:e}", checks.len());
    if let Some(path) = &a.out {
        write_file(path, csv.as_bytes())?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERIC })
}
