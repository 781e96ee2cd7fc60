//! Thin command-line front end over the isinv library: train and finetune
//! micro language models, capture internal states, run inversion attacks and
//! defenses, identify and replicate victim models, and drive the
//! split-inference wire from either end.
//!
//! Exit codes: 0 clean, 1 partial (some samples failed but a report exists,
//! or training diverged after a usable checkpoint), 2 fatal.

use clap::{Args, Parser, Subcommand, ValueEnum};
use isinv::attacks::{BasisKind, Distance};
use isinv::blackbox::{
    calibrate_tau, detect_model_type, load_detector, pool_states, pooled_dataset, replicate_model,
    replication_mse, save_detector, save_inverter, train_autoencoder, train_inverter,
    EnsembleDetector, InverterConfig, InverterTrainConfig, ReplicateConfig,
};
use isinv::corpus::{ingest_corpus, synth_corpus, synth_mixed, write_corpus, Style};
use isinv::defenses::{
    capture_is_gaussian, defend_dropout, defend_laplace_dp, defend_quantize,
};
use isinv::harness::{
    load_experiment_config, run_experiment, AttackKind, ExperimentConfig,
};
use isinv::lm::{finetune_lm, train_lm, InternalStates, MicroLM, MicroLMConfig, TrainConfig};
use isinv::store::{load_model, save_model};
use isinv::tensor::Tensor;
use isinv::util::mix_seed;
use isinv::wire::{
    export_is, import_is, split_client, split_serve, ServeConfig, WireDtype,
};
use isinv::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "isinv",
    version,
    about = "Laboratory for inverting language-model internal states back into text"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a micro language model from scratch
    TrainLm(TrainLmArgs),
    /// Continue training a saved model on a new corpus
    FinetuneLm(FinetuneLmArgs),
    /// Capture internal states at one layer into a frame container
    CaptureIs(CaptureIsArgs),
    /// Run an inversion attack over a dataset and write reports
    Attack(AttackArgs),
    /// Train an autoencoder ensemble or classify a victim's base model
    Identify(IdentifyArgs),
    /// Finetune a base model until its states match a victim's
    Replicate(ReplicateArgs),
    /// Train the generative inverter on (text, states) pairs
    TrainInverter(TrainInverterArgs),
    /// Apply a defense to a states container or a model
    Defend(DefendArgs),
    /// Serve the deep half of a split model over TCP
    Serve(ServeArgs),
    /// Push a corpus through the split-inference wire as the device half
    Client(ClientArgs),
    /// Run a configured experiment end to end
    Report(ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(2);
        }
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::TrainLm(a) => cmd_train_lm(a),
        Cmd::FinetuneLm(a) => cmd_finetune_lm(a),
        Cmd::CaptureIs(a) => cmd_capture_is(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Identify(a) => cmd_identify(a),
        Cmd::Replicate(a) => cmd_replicate(a),
        Cmd::TrainInverter(a) => cmd_train_inverter(a),
        Cmd::Defend(a) => cmd_defend(a),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Client(a) => cmd_client(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

// ---------------------------------------------------------------------------
// shared pieces

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliStyle {
    Medical,
    Code,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliDtype {
    F32,
    F64,
}

impl From<CliDtype> for WireDtype {
    fn from(d: CliDtype) -> Self {
        match d {
            CliDtype::F32 => WireDtype::F32,
            CliDtype::F64 => WireDtype::F64,
        }
    }
}

/// Where a command gets its texts: an existing JSONL file, or a synthesized
/// corpus written to that same path first.
#[derive(Args)]
struct CorpusSource {
    /// JSONL dataset with one {"text": ...} per line
    #[arg(long)]
    corpus: PathBuf,
    /// Synthesize the corpus into --corpus before use
    #[arg(long, value_enum)]
    synth: Option<CliStyle>,
    /// Number of texts to synthesize
    #[arg(long, default_value_t = 200)]
    synth_count: usize,
}

impl CorpusSource {
    fn texts(&self, seed: u64) -> Result<Vec<String>> {
        if let Some(style) = self.synth {
            let texts = match style {
                CliStyle::Medical => synth_corpus(Style::Medical, self.synth_count, seed),
                CliStyle::Code => synth_corpus(Style::Code, self.synth_count, seed),
                CliStyle::Mixed => synth_mixed(self.synth_count, seed),
            };
            write_corpus(&self.corpus, &texts)?;
            return Ok(texts);
        }
        let (texts, skipped) = ingest_corpus(&self.corpus)?;
        if skipped > 0 {
            eprintln!("skipped {} malformed corpus lines", skipped);
        }
        Ok(texts)
    }
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    let (texts, skipped) = ingest_corpus(path)?;
    if skipped > 0 {
        eprintln!("skipped {} malformed corpus lines", skipped);
    }
    Ok(texts)
}

/// (text, states) pairs for one layer: either captured live from a model or
/// imported from a frame container and matched to the texts by index.
fn gather_pairs(
    model: &MicroLM,
    texts: &[String],
    states: Option<&PathBuf>,
    layer: usize,
    limit: usize,
) -> Result<Vec<(String, InternalStates)>> {
    let mut texts = texts.to_vec();
    if limit > 0 {
        texts.truncate(limit);
    }
    let frames = match states {
        Some(p) => {
            let frames = import_is(p)?;
            if frames.len() < texts.len() {
                return Err(Error::Config(format!(
                    "{} frames cannot cover {} texts",
                    frames.len(),
                    texts.len()
                )));
            }
            frames
        }
        None => texts.iter().map(|t| model.capture_is(t, layer)).collect::<Result<_>>()?,
    };
    Ok(texts.into_iter().zip(frames).collect())
}

// ---------------------------------------------------------------------------
// train-lm / finetune-lm

#[derive(Args)]
struct ModelShape {
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    d_in: usize,
    #[arg(long, default_value_t = 8)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 4.0)]
    ffn_mult: f64,
    #[arg(long, default_value_t = 256)]
    max_seq_len: usize,
    /// Give the output head its own weights instead of tying to the embedding
    #[arg(long)]
    untied_head: bool,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

impl TrainFlags {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            seq_len: self.seq_len,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Args)]
struct TrainLmArgs {
    #[command(flatten)]
    source: CorpusSource,
    #[command(flatten)]
    shape: ModelShape,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model container
    #[arg(long)]
    out: PathBuf,
}

fn finish_training(
    result: Result<(MicroLM, isinv::lm::TrainStats)>,
    out: &Path,
) -> Result<i32> {
    match result {
        Ok((model, stats)) => {
            save_model(out, &model)?;
            println!(
                "trained {} steps, held-out loss {:.4} (ppl {:.2}), saved {}",
                stats.losses.len(),
                stats.final_heldout,
                stats.final_perplexity(),
                out.display(),
            );
            Ok(0)
        }
        Err(Error::Diverged { step, last_good }) => {
            save_model(out, &last_good)?;
            eprintln!("diverged at step {}; saved the last finite checkpoint to {}", step, out.display());
            Ok(1)
        }
        Err(e) => Err(e),
    }
}

fn cmd_train_lm(a: TrainLmArgs) -> Result<i32> {
    let texts = a.source.texts(a.seed)?;
    let cfg = MicroLMConfig {
        vocab_size: a.shape.vocab_size,
        d_in: a.shape.d_in,
        n_layers: a.shape.n_layers,
        n_heads: a.shape.n_heads,
        ffn_mult: a.shape.ffn_mult,
        max_seq_len: a.shape.max_seq_len,
        tied_head: !a.shape.untied_head,
        seed: a.seed,
        ..MicroLMConfig::default()
    };
    finish_training(train_lm(cfg, &a.train.to_config(a.seed), &texts), &a.out)
}

#[derive(Args)]
struct FinetuneLmArgs {
    /// Model container to start from
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: CorpusSource,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_finetune_lm(a: FinetuneLmArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    let texts = a.source.texts(a.seed)?;
    finish_training(finetune_lm(&model, &a.train.to_config(a.seed), &texts), &a.out)
}

// ---------------------------------------------------------------------------
// capture-is

#[derive(Args)]
struct CaptureIsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Output frame container
    #[arg(long)]
    out: PathBuf,
    /// Payload precision; f64 round-trips captures bit-exactly
    #[arg(long, value_enum, default_value_t = CliDtype::F64)]
    dtype: CliDtype,
    /// Capture only the first n texts (0 = all)
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

fn cmd_capture_is(a: CaptureIsArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    let mut texts = read_texts(&a.dataset)?;
    if a.limit > 0 {
        texts.truncate(a.limit);
    }
    let mut frames = Vec::with_capacity(texts.len());
    for t in &texts {
        frames.push(model.capture_is(t, a.layer)?);
    }
    export_is(&a.out, &frames, a.dtype.into())?;
    println!(
        "captured {} frames at layer {} ({} wide) into {}",
        frames.len(),
        a.layer,
        model.cfg.d_in,
        a.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// attack / report

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliAttack {
    Ts,
    Er,
    Tbs,
    Transfer,
    Generate,
}

impl From<CliAttack> for AttackKind {
    fn from(k: CliAttack) -> Self {
        match k {
            CliAttack::Ts => AttackKind::Ts,
            CliAttack::Er => AttackKind::Er,
            CliAttack::Tbs => AttackKind::Tbs,
            CliAttack::Transfer => AttackKind::Transfer,
            CliAttack::Generate => AttackKind::Generate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliDistance {
    Mse,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliBasis {
    Singular,
    Unbiased,
}

/// Flags override the TOML config field by field; unset flags leave it alone.
#[derive(Args)]
struct ExperimentFlags {
    /// TOML experiment config to start from
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Attack pre-captured frames instead of capturing live
    #[arg(long)]
    states: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
    /// Fill wall_time columns with real timings (breaks byte determinism)
    #[arg(long)]
    record_timing: bool,
    #[arg(long)]
    tau_s: Option<f64>,
    #[arg(long)]
    tau_tm: Option<f64>,

    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Distribution-matching penalty weight
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    distance: Option<CliDistance>,
    #[arg(long, value_enum)]
    basis: Option<CliBasis>,
    #[arg(long)]
    stop_tol: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stand-in model for the transferred attack
    #[arg(long)]
    replica: Option<PathBuf>,
    /// Trained generative inverter
    #[arg(long)]
    inverter: Option<PathBuf>,
    /// Decode cap for generated text, in bytes
    #[arg(long)]
    max_out: Option<usize>,
}

impl ExperimentFlags {
    fn into_config(self, kind: Option<AttackKind>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_experiment_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(k) = kind {
            cfg.attack.kind = k;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v.into(); })*
            };
        }
        set! {
            model => cfg.model,
            dataset => cfg.dataset,
            layer => cfg.layer,
            output_dir => cfg.output_dir,
            seed => cfg.seed,
            limit => cfg.limit,
            tau_s => cfg.tau_s,
            tau_tm => cfg.tau_tm,
            steps => cfg.attack.cfg.steps,
            lr => cfg.attack.cfg.lr,
            lambda => cfg.attack.cfg.lambda,
            alpha => cfg.attack.cfg.alpha,
            temperature => cfg.attack.cfg.temperature,
            stop_tol => cfg.attack.cfg.stop_tol,
            checkpoint_every => cfg.attack.cfg.checkpoint_every,
            max_out => cfg.attack.max_out,
        }
        if let Some(p) = self.states {
            cfg.states = Some(p);
        }
        if let Some(d) = self.distance {
            cfg.attack.cfg.distance = match d {
                CliDistance::Mse => Distance::Mse,
                CliDistance::Cos => Distance::Cos,
            };
        }
        if let Some(b) = self.basis {
            cfg.attack.cfg.basis = match b {
                CliBasis::Singular => BasisKind::Singular,
                CliBasis::Unbiased => BasisKind::Unbiased,
            };
        }
        if let Some(p) = self.replica {
            cfg.attack.replica = Some(p);
        }
        if let Some(p) = self.inverter {
            cfg.attack.inverter = Some(p);
        }
        if self.record_timing {
            cfg.record_timing = true;
        }
        Ok(cfg)
    }
}

fn run_and_summarize(cfg: &ExperimentConfig) -> Result<i32> {
    let out = run_experiment(cfg)?;
    let agg = &out.report.aggregate;
    println!(
        "{} rows ({} failed): em {:.3}, f1 {:.3} ± {:.3}, cs {:.3}, success rate {:.3}",
        agg.n,
        out.report.errors.len(),
        agg.em.mean,
        agg.f1.mean,
        agg.f1.sem,
        agg.cs.mean,
        agg.success_rate,
    );
    println!("wrote {} and {}", out.csv_path.display(), out.json_path.display());
    for e in &out.report.errors {
        eprintln!("sample {} under {}: {}", e.sample, e.defense, e.error);
    }
    Ok(out.exit_code)
}

#[derive(Args)]
struct AttackArgs {
    /// Which attack to run
    #[arg(value_enum)]
    kind: CliAttack,
    #[command(flatten)]
    flags: ExperimentFlags,
}

fn cmd_attack(a: AttackArgs) -> Result<i32> {
    let cfg = a.flags.into_config(Some(a.kind.into()))?;
    run_and_summarize(&cfg)
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
    /// Override the configured attack kind (none runs the identity path)
    #[arg(long, value_enum)]
    attack: Option<CliReportAttack>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliReportAttack {
    None,
    Ts,
    Er,
    Tbs,
    Transfer,
    Generate,
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let kind = a.attack.map(|k| match k {
        CliReportAttack::None => AttackKind::None,
        CliReportAttack::Ts => AttackKind::Ts,
        CliReportAttack::Er => AttackKind::Er,
        CliReportAttack::Tbs => AttackKind::Tbs,
        CliReportAttack::Transfer => AttackKind::Transfer,
        CliReportAttack::Generate => AttackKind::Generate,
    });
    let cfg = a.flags.into_config(kind)?;
    run_and_summarize(&cfg)
}

// ---------------------------------------------------------------------------
// identify

#[derive(Args)]
struct IdentifyArgs {
    /// Probe texts shown to every model
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Train mode: label=model.isw, repeat once per known base
    #[arg(long = "member", value_name = "LABEL=PATH")]
    members: Vec<String>,
    /// Train mode: where to save the ensemble
    #[arg(long)]
    train_out: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    bottleneck: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run mode: saved ensemble detector
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Run mode: victim model to probe
    #[arg(long)]
    model: Option<PathBuf>,
    /// Run mode: pre-captured victim frames instead of live probing
    #[arg(long)]
    states: Option<PathBuf>,
}

fn cmd_identify(a: IdentifyArgs) -> Result<i32> {
    let texts = read_texts(&a.dataset)?;
    match (&a.train_out, &a.detector) {
        (Some(out), None) => {
            if a.members.len() < 2 {
                return Err(Error::Config("training needs at least two --member entries".into()));
            }
            // odd-indexed probes train each autoencoder, even-indexed ones
            // calibrate its threshold
            let train: Vec<String> = texts.iter().skip(1).step_by(2).cloned().collect();
            let heldout: Vec<String> = texts.iter().step_by(2).cloned().collect();
            if train.is_empty() || heldout.is_empty() {
                return Err(Error::Corpus("need at least two probe texts".into()));
            }
            let mut detector = EnsembleDetector::new();
            for (i, spec) in a.members.iter().enumerate() {
                let (label, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--member {} is not LABEL=PATH", spec)))?;
                let member = load_model(Path::new(path))?;
                let pooled = pooled_dataset(&member, &train, a.layer)?;
                let ae = train_autoencoder(&pooled, a.epochs, a.bottleneck, mix_seed(a.seed, i as u64))?;
                let tau = calibrate_tau(&ae, &pooled_dataset(&member, &heldout, a.layer)?)?;
                detector.add_member(label, ae, tau)?;
                println!("member {}: tau {:.6}", label, tau);
            }
            save_detector(out, &detector)?;
            println!("saved {}-member detector to {}", a.members.len(), out.display());
            Ok(0)
        }
        (None, Some(det)) => {
            let detector = load_detector(det)?;
            let probe = match (&a.states, &a.model) {
                (Some(p), _) => {
                    let frames = import_is(p)?;
                    if frames.is_empty() {
                        return Err(Error::Corpus("states container is empty".into()));
                    }
                    let d = frames[0].states.cols();
                    let mut rows = Vec::with_capacity(frames.len() * d);
                    for h in &frames {
                        rows.extend(pool_states(&h.states));
                    }
                    Tensor::new(vec![frames.len(), d], rows)?
                }
                (None, Some(m)) => pooled_dataset(&load_model(m)?, &texts, a.layer)?,
                (None, None) => {
                    return Err(Error::Config("run mode needs --model or --states".into()))
                }
            };
            println!("{}", detect_model_type(&probe, &detector)?);
            Ok(0)
        }
        _ => Err(Error::Config("pass exactly one of --train-out (train) or --detector (run)".into())),
    }
}

// ---------------------------------------------------------------------------
// replicate

#[derive(Args)]
struct ReplicateArgs {
    /// Known base model the victim is suspected to derive from
    #[arg(long)]
    base: PathBuf,
    /// Victim model to capture states from (the lab stand-in for its API)
    #[arg(long)]
    victim: Option<PathBuf>,
    /// Pre-captured victim frames instead of a victim model
    #[arg(long)]
    states: Option<PathBuf>,
    /// Adversary texts used for matching
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_replicate(a: ReplicateArgs) -> Result<i32> {
    let base = load_model(&a.base)?;
    let texts = read_texts(&a.dataset)?;
    let pairs = match (&a.victim, &a.states) {
        (Some(v), None) => gather_pairs(&load_model(v)?, &texts, None, a.layer, a.limit)?,
        (None, Some(_)) => gather_pairs(&base, &texts, a.states.as_ref(), a.layer, a.limit)?,
        _ => return Err(Error::Config("pass exactly one of --victim or --states".into())),
    };
    let pre = replication_mse(&base, &pairs, a.layer)?;
    let cfg = ReplicateConfig { steps: a.steps, batch: a.batch, lr: a.lr, seed: a.seed };
    let (replica, stats) = replicate_model(&base, &pairs, a.layer, &cfg)?;
    let post = replication_mse(&replica, &pairs, a.layer)?;
    save_model(&a.out, &replica)?;
    println!(
        "state mse {:.6} -> {:.6} (best step {}), saved {}",
        pre,
        post,
        stats.best_step,
        a.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train-inverter

#[derive(Args)]
struct TrainInverterArgs {
    /// Model whose states the inverter learns to read
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Pre-captured frames matched to the dataset by index
    #[arg(long)]
    states: Option<PathBuf>,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 128)]
    d_enc: usize,
    #[arg(long, default_value_t = 2.0)]
    ffn_mult: f64,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
    /// Drop the input projection (d_enc must equal the state width)
    #[arg(long)]
    no_projection: bool,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train_inverter(a: TrainInverterArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    let texts = read_texts(&a.dataset)?;
    let pairs = gather_pairs(&model, &texts, a.states.as_ref(), a.layer, a.limit)?;
    let icfg = InverterConfig {
        d_in: model.cfg.d_in,
        d_enc: a.d_enc,
        ffn_mult: a.ffn_mult,
        max_seq_len: a.max_seq_len,
        use_projection: !a.no_projection,
        seed: a.seed,
    };
    let tcfg = InverterTrainConfig { epochs: a.epochs, batch: a.batch, lr: a.lr, seed: a.seed };
    let (inverter, stats) = train_inverter(&pairs, icfg, &tcfg)?;
    save_inverter(&a.out, &inverter)?;
    println!(
        "inverter loss {:.4} -> {:.4} over {} epochs on {} pairs, saved {}",
        stats.initial_loss,
        stats.epoch_losses.last().copied().unwrap_or(f64::NAN),
        stats.epoch_losses.len(),
        pairs.len(),
        a.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// defend

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliDefense {
    Dropout,
    GaussianEmbed,
    Laplace,
    Quantize,
}

#[derive(Args)]
struct DefendArgs {
    /// Which defense to apply
    #[arg(value_enum)]
    kind: CliDefense,
    /// States container to transform (dropout, laplace)
    #[arg(long)]
    states: Option<PathBuf>,
    /// Model to transform (quantize) or capture from (gaussian-embed)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Texts to capture under embedding noise (gaussian-embed)
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
    /// Zeroing probability (dropout)
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    /// Embedding noise deviation (gaussian-embed)
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Privacy budget (laplace)
    #[arg(long, default_value_t = 1e4)]
    epsilon: f64,
    /// Clip bound (laplace)
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Weight precision (quantize)
    #[arg(long, default_value_t = 8)]
    bits: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CliDtype::F64)]
    dtype: CliDtype,
    #[arg(long)]
    out: PathBuf,
}

fn defended_frames(
    frames: &[InternalStates],
    f: impl Fn(&InternalStates, u64) -> Result<InternalStates>,
    seed: u64,
) -> Result<Vec<InternalStates>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, h)| f(h, mix_seed(seed, i as u64)))
        .collect()
}

fn cmd_defend(a: DefendArgs) -> Result<i32> {
    let need_states = || {
        a.states
            .clone()
            .ok_or_else(|| Error::Config("this defense transforms a --states container".into()))
    };
    match a.kind {
        CliDefense::Dropout => {
            let frames = import_is(need_states()?)?;
            let out = defended_frames(&frames, |h, s| defend_dropout(h, a.p, s), a.seed)?;
            export_is(&a.out, &out, a.dtype.into())?;
            println!("dropped out {} frames (p={}) into {}", out.len(), a.p, a.out.display());
        }
        CliDefense::Laplace => {
            let frames = import_is(need_states()?)?;
            let out =
                defended_frames(&frames, |h, s| defend_laplace_dp(h, a.epsilon, a.clip, s), a.seed)?;
            export_is(&a.out, &out, a.dtype.into())?;
            println!(
                "released {} frames under eps={} C={} into {}",
                out.len(),
                a.epsilon,
                a.clip,
                a.out.display()
            );
        }
        CliDefense::Quantize => {
            let model = a
                .model
                .as_ref()
                .ok_or_else(|| Error::Config("quantize transforms a --model container".into()))?;
            let defended = defend_quantize(&load_model(model)?, a.bits)?;
            save_model(&a.out, &defended)?;
            println!("quantized weights to {} bits, saved {}", a.bits, a.out.display());
        }
        CliDefense::GaussianEmbed => {
            let (model, dataset, layer) = match (&a.model, &a.dataset, a.layer) {
                (Some(m), Some(d), Some(l)) => (load_model(m)?, d, l),
                _ => {
                    return Err(Error::Config(
                        "gaussian-embed captures states: needs --model, --dataset, --layer".into(),
                    ))
                }
            };
            let texts = read_texts(dataset)?;
            let mut frames = Vec::with_capacity(texts.len());
            for (i, t) in texts.iter().enumerate() {
                frames.push(capture_is_gaussian(&model, t, layer, a.sigma, mix_seed(a.seed, i as u64))?);
            }
            export_is(&a.out, &frames, a.dtype.into())?;
            println!(
                "captured {} frames under embedding noise sigma={} into {}",
                frames.len(),
                a.sigma,
                a.out.display()
            );
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// serve / client

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Layer the client splits at
    #[arg(long)]
    l_split: usize,
    #[arg(long, default_value = "127.0.0.1:7641")]
    addr: String,
    /// Persist accepted frames byte-for-byte (the curious server)
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Connections to serve before exiting
    #[arg(long, default_value_t = 1)]
    sessions: usize,
}

fn cmd_serve(a: ServeArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    let cfg = ServeConfig { l_split: a.l_split, transcript: a.transcript, sessions: a.sessions };
    eprintln!("serving layers {}.. of {} on {}", a.l_split + 1, a.model.display(), a.addr);
    let summary = split_serve(&a.addr, &model, &cfg)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(0)
}

#[derive(Args)]
struct ClientArgs {
    /// Shallow half: the same container the server loads
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    l_split: usize,
    #[arg(long, default_value = "127.0.0.1:7641")]
    addr: String,
    /// Wire payload precision; the default f32 rounds each state once
    #[arg(long, value_enum, default_value_t = CliDtype::F32)]
    dtype: CliDtype,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Also write the predictions as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_client(a: ClientArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    let mut texts = read_texts(&a.dataset)?;
    if a.limit > 0 {
        texts.truncate(a.limit);
    }
    let ids = split_client(&a.addr, &texts, &model, a.l_split, a.dtype.into())?;
    for (i, id) in ids.iter().enumerate() {
        let shown = model.tokenizer.detokenize_lossy(&[*id]).unwrap_or_default();
        println!("{}\t{}\t{:?}", i, id, shown);
    }
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_vec_pretty(&ids)?)?;
    }
    Ok(0)
}
