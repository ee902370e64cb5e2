//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::ctc::BeamConfig;
use crate::data::{data_root, gen_synthetic_corpus, Manifest, SynthConfig, Vocabulary};
use crate::eval::{
    decode_lattice, evaluate_exits, flops_closed_form, flops_per_exit, timing_harness, Decode, EvalError,
};
use crate::model::{analytic_param_count, Checkpoint, ForwardOptions, Model, ModelConfig, Variant};
use crate::train::{average_checkpoint_files, checkpoint_path, load_prepared, train, TrainConfig, TrainError, TrainOptions};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Parser)]
#[command(name = "splitformer", version, about = "Early-exit conformer encoders with CTC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (features, manifests, vocabulary).
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, metrics and the averaged model.
    Train(TrainArgs),
    /// Decode a manifest at every exit and report error rates.
    Eval(EvalArgs),
    /// Decode a single feature file.
    Decode(DecodeArgs),
    /// Analytic parameter and FLOP counts per exit.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2500)]
    pub utts: usize,
    /// Token list file, or `char` for the built-in character vocabulary.
    #[arg(long, default_value = "char")]
    pub vocab: String,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 80)]
    pub max_frames: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with `[model]` and `[train]` sections.
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus directory with train.tsv, dev.tsv and vocab.txt; defaults to $SPLITFORMER_DATA.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the newest checkpoint under --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeKind {
    Greedy,
    Beam,
}

#[derive(Debug, Args, Clone)]
pub struct DecodeOpts {
    #[arg(long, value_enum, default_value_t = DecodeKind::Greedy)]
    pub decode: DecodeKind,
    #[arg(long, default_value_t = 8)]
    pub beam_width: usize,
    /// Skip hypothesis expansion at frames whose blank probability exceeds this.
    #[arg(long, default_value_t = 0.95)]
    pub blank_prune: f64,
}

impl DecodeOpts {
    fn decode(&self) -> Decode {
        match self.decode {
            DecodeKind::Greedy => Decode::Greedy,
            DecodeKind::Beam => Decode::Beam(BeamConfig {
                beam_width: self.beam_width,
                blank_prune_threshold: self.blank_prune,
                n_best: 1,
            }),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Manifest name inside the corpus directory.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub decode: DecodeOpts,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also time every exit with this many repeats.
    #[arg(long, default_value_t = 0)]
    pub timing_repeats: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Token list; the built-in character vocabulary when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Exit to decode from; every exit when absent.
    #[arg(long)]
    pub exit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeOpts,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, conflicts_with = "variant")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Input frames at 100 Hz.
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model and training sections of a run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Model(crate::model::ModelError::Config(_)) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn write_snapshot<S: Serialize>(dir: &Path, value: &S) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    let text = toml::to_string(value).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn corpus_dir(explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    data_root(explicit).ok_or_else(|| CliError::Usage("no --data given and SPLITFORMER_DATA is unset".into()))
}

fn load_vocab(dir: &Path) -> Result<Vocabulary, CliError> {
    let path = dir.join("vocab.txt");
    if path.exists() {
        Vocabulary::load(&path).map_err(data_err)
    } else {
        Ok(Vocabulary::chars())
    }
}

#[derive(Serialize)]
struct GenDataSnapshot<'a> {
    utts: usize,
    vocab: &'a str,
    sigma: f64,
    seed: u64,
    min_frames: usize,
    max_frames: usize,
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.utts == 0 {
        return Err(CliError::Usage("--utts must be positive".into()));
    }
    let vocab = if a.vocab == "char" {
        Vocabulary::chars()
    } else {
        Vocabulary::load(Path::new(&a.vocab)).map_err(data_err)?
    };
    let cfg = SynthConfig {
        n_utts: a.utts,
        frames: (a.min_frames, a.max_frames),
        sigma: a.sigma,
        seed: a.seed,
        ..Default::default()
    };
    let corpus = gen_synthetic_corpus(&a.out, &vocab, &cfg).map_err(data_err)?;
    write_snapshot(
        &a.out,
        &GenDataSnapshot {
            utts: a.utts,
            vocab: &a.vocab,
            sigma: a.sigma,
            seed: a.seed,
            min_frames: a.min_frames,
            max_frames: a.max_frames,
        },
    )?;
    println!(
        "wrote {} train / {} dev / {} test utterances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

fn newest_checkpoint(out: &Path, epochs: usize) -> Option<(usize, PathBuf)> {
    (1..=epochs).rev().map(|e| (e, checkpoint_path(out, e))).find(|(_, p)| p.exists())
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    run.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    run.train.validate().map_err(CliError::Usage)?;
    let dir = corpus_dir(a.data.as_deref())?;
    let vocab = load_vocab(&dir)?;
    if vocab.classes() != run.model.vocab_size {
        return Err(CliError::Usage(format!(
            "model vocab_size {} but the corpus vocabulary has {} classes",
            run.model.vocab_size,
            vocab.classes()
        )));
    }
    let train_m = Manifest::load_checked(&dir.join("train.tsv")).map_err(data_err)?;
    let (data, dropped) = load_prepared(&train_m, &vocab, run.train.max_transcript_chars).map_err(data_err)?;
    info!("{} training utterances, {dropped} dropped by the transcript length filter", data.len());
    let dev_path = dir.join("dev.tsv");
    let dev = if dev_path.exists() {
        let m = Manifest::load_checked(&dev_path).map_err(data_err)?;
        Some(load_prepared(&m, &vocab, usize::MAX).map_err(data_err)?.0)
    } else {
        None
    };

    write_snapshot(&a.out, &run)?;
    let mut model = Model::<f32>::build(run.model.clone(), run.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    info!(
        "{} model, {} layers, {} parameters",
        run.model.variant.name(),
        run.model.total_layers(),
        model.param_count(None)
    );
    let resume = if a.resume {
        match newest_checkpoint(&a.out, run.train.epochs) {
            Some((e, p)) => {
                info!("resuming from {} (epoch {e})", p.display());
                Some(Checkpoint::load(&p).map_err(data_err)?)
            }
            None => None,
        }
    } else {
        None
    };
    let opts = TrainOptions {
        out_dir: a.out.clone(),
        resume,
        stop_after_epoch: None,
    };
    let summary = train(&mut model, &data, dev.as_ref(), &run.train, &opts)?;
    let k = run.train.average_last_k.min(summary.epochs_completed);
    let paths: Vec<PathBuf> = (summary.epochs_completed + 1 - k..=summary.epochs_completed)
        .map(|e| checkpoint_path(&a.out, e))
        .collect();
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let averaged = average_checkpoint_files(&refs).map_err(data_err)?;
    averaged.save(&a.out.join("averaged.ckpt")).map_err(data_err)?;
    println!(
        "trained {} steps over {} epochs; averaged the last {k} checkpoints into {}",
        summary.steps,
        summary.epochs_completed,
        a.out.join("averaged.ckpt").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot {
    model: String,
    data: String,
    split: String,
    decode: DecodeKind,
    beam_width: usize,
    blank_prune: f64,
    timing_repeats: usize,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.model).map_err(data_err)?;
    let model = ck.to_model().map_err(data_err)?;
    let dir = corpus_dir(a.data.as_deref())?;
    let vocab = load_vocab(&dir)?;
    let manifest = Manifest::load(&dir.join(format!("{}.tsv", a.split))).map_err(data_err)?;
    let decode = a.decode.decode();
    let mut report = evaluate_exits(&model, &manifest, &vocab, &decode).map_err(|e| match e {
        EvalError::Model(m) => CliError::Numeric(m.to_string()),
        other => data_err(other),
    })?;
    let mut timing_csv = None;
    if a.timing_repeats > 0 {
        let feats = manifest
            .records
            .iter()
            .filter_map(|r| manifest.load_features(r).ok().map(|f| f.frames))
            .collect::<Vec<_>>();
        let rows = timing_harness(&model, &feats, &decode, a.timing_repeats).map_err(data_err)?;
        let mut csv = "exit,encoder_s,decode_s,total_s,min_total_s,max_total_s\n".to_string();
        for (r, t) in report.rows.iter_mut().zip(&rows) {
            r.wall_time_s = Some(t.total_s);
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.exit, t.encoder_s, t.decode_s, t.total_s, t.spread.0, t.spread.1
            ));
        }
        timing_csv = Some(csv);
    }
    print!("{}", report.to_table());
    if !report.skipped.is_empty() {
        println!("{} utterances skipped", report.skipped.len());
    }
    if let Some(out) = &a.out {
        write_snapshot(
            out,
            &EvalSnapshot {
                model: a.model.display().to_string(),
                data: dir.display().to_string(),
                split: a.split.clone(),
                decode: a.decode.decode,
                beam_width: a.decode.beam_width,
                blank_prune: a.decode.blank_prune,
                timing_repeats: a.timing_repeats,
            },
        )?;
        write_file(&out.join("report.csv"), &report.to_csv())?;
        write_file(&out.join("report.txt"), &report.to_table())?;
        if let Some(csv) = timing_csv {
            write_file(&out.join("timing.csv"), &csv)?;
        }
    }
    Ok(())
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<(), CliError> {
    let model = Checkpoint::load(&a.model).and_then(|c| c.to_model()).map_err(data_err)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p).map_err(data_err)?,
        None => Vocabulary::chars(),
    };
    let feats = crate::data::read_features(&a.features).map_err(data_err)?;
    let opts = ForwardOptions {
        max_exit: a.exit,
        ..Default::default()
    };
    let out = model.infer(&feats, &opts).map_err(|e| CliError::Usage(e.to_string()))?;
    let decode = a.decode.decode();
    let first = a.exit.map_or(1, |e| e);
    for (m, lattice) in out.lattices.iter().enumerate().skip(first - 1) {
        let (tokens, _, _) = decode_lattice(lattice, &decode);
        let text = vocab.detokenize(&tokens).map_err(data_err)?;
        println!("exit {}\t{text}", m + 1);
    }
    Ok(())
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<(), CliError> {
    let config = match (&a.config, a.variant) {
        (Some(p), _) => RunConfig::load(p)?.model,
        (None, Some(v)) => ModelConfig::preset(v),
        (None, None) => return Err(CliError::Usage("profile needs --config or --variant".into())),
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = Model::<f32>::build(config.clone(), 0).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = flops_per_exit(&config, a.frames);
    let closed = flops_closed_form(&config, a.frames);
    if closed != report.per_exit {
        return Err(CliError::Numeric("component walk and closed-form FLOP counts disagree".into()));
    }
    let mut table = format!(
        "{} at {} input frames\n{:>4} {:>6} {:>12} {:>10} {:>16}\n",
        config.variant.name(),
        a.frames,
        "exit",
        "layer",
        "params",
        "params(M)",
        "GFLOPs"
    );
    let mut csv = "exit,layers,params,flops\n".to_string();
    for m in 1..=config.exits() {
        let params = model.param_count(Some(m));
        debug_assert_eq!(params, analytic_param_count(&config, m));
        let layers = if config.variant.is_early_exit() { m * config.exit_every } else { config.n_layers };
        let flops = report.per_exit[m - 1];
        table.push_str(&format!(
            "{m:>4} {layers:>6} {params:>12} {:>10.2} {:>16.3}\n",
            params as f64 / 1e6,
            flops as f64 / 1e9
        ));
        csv.push_str(&format!("{m},{layers},{params},{flops}\n"));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct ProfileSnapshot<'a> {
            frames: usize,
            model: &'a ModelConfig,
        }
        write_snapshot(
            out,
            &ProfileSnapshot {
                frames: a.frames,
                model: &config,
            },
        )?;
        write_file(&out.join("profile.csv"), &csv)?;
        write_file(&out.join("profile.txt"), &table)?;
        let mut breakdown = "exit,component,flops\n".to_string();
        for c in &report.components {
            breakdown.push_str(&format!("{},{},{}\n", c.exit, c.name, c.flops));
        }
        write_file(&out.join("breakdown.csv"), &breakdown)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Profile(a) => cmd_profile(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
