//! Experiment orchestration: ingest a corpus, capture states at a layer,
//! apply a defense, run an attack per sample, and emit CSV + JSON reports.
//!
//! Reports from a seeded run are bit-deterministic: wall-time columns stay at
//! 0.0 unless timing is explicitly requested, every per-sample seed derives
//! from the experiment seed, and samples fan out over a worker pool whose
//! results are collected back in input order before the single report writer
//! runs. A failed sample never sinks the run; it is dropped from the CSV,
//! annotated in the JSON, and flips the outcome to "partial".

use crate::attacks::{attack_er, attack_tbs, attack_ts, recover_tokens, AttackConfig};
use crate::blackbox::{attack_transferred, invert_generate, load_inverter, InverterModel};
use crate::corpus::ingest_corpus;
use crate::defenses::{
    capture_is_gaussian, defend_dropout, defend_laplace_dp, defend_quantize, DefenseConfig,
};
use crate::lm::{InternalStates, MicroLM};
use crate::metrics::{score, MetricsConfig, ScoreRow};
use crate::store::load_model;
use crate::tensor::Tensor;
use crate::util::mix_seed;
use crate::wire::{import_is, stamp_fingerprint};
use crate::{Error, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// experiment configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// Identity sanity path: decode the true embedding rows, no optimization.
    None,
    Ts,
    Er,
    Tbs,
    Transfer,
    Generate,
}

impl AttackKind {
    pub fn label(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Ts => "ts",
            AttackKind::Er => "er",
            AttackKind::Tbs => "tbs",
            AttackKind::Transfer => "transfer",
            AttackKind::Generate => "generate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(flatten)]
    pub cfg: AttackConfig,
    /// Stand-in model for the transferred attack.
    pub replica: Option<PathBuf>,
    /// Trained generative inverter for `generate`.
    pub inverter: Option<PathBuf>,
    /// Decode cap for generated text, in bytes.
    pub max_out: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::Tbs,
            cfg: AttackConfig::default(),
            replica: None,
            inverter: None,
            max_out: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Trained model container (weights + tokenizer + config).
    pub model: PathBuf,
    /// JSONL corpus with one {"text": ...} object per line.
    pub dataset: PathBuf,
    /// Attack pre-captured frames from this container instead of capturing
    /// live; frame i is scored against dataset text i.
    pub states: Option<PathBuf>,
    /// Layer whose states are captured and attacked.
    pub layer: usize,
    pub attack: AttackSpec,
    pub defense: DefenseConfig,
    /// With a laplace defense, sweep these epsilons: one condition each.
    pub epsilon_grid: Vec<f64>,
    /// Semantic-similarity success threshold.
    pub tau_s: f64,
    /// Token-recall success threshold.
    pub tau_tm: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Fill the wall_time column with real timings. Off by default because
    /// clock readings break byte-for-byte report determinism.
    pub record_timing: bool,
    /// Use only the first n corpus texts (0 = all).
    pub limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = MetricsConfig::default();
        ExperimentConfig {
            model: PathBuf::from("model.isw"),
            dataset: PathBuf::from("corpus.jsonl"),
            states: None,
            layer: 1,
            attack: AttackSpec::default(),
            defense: DefenseConfig::None,
            epsilon_grid: Vec::new(),
            tau_s: m.tau_s,
            tau_tm: m.tau_tm,
            output_dir: PathBuf::from("out"),
            seed: 0,
            record_timing: false,
            limit: 0,
        }
    }
}

/// Parse a TOML experiment config. Paths inside are taken as written
/// (relative to the working directory, not the config file).
pub fn load_experiment_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("experiment config: {}", e)))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("model", &self.model), ("dataset", &self.dataset)] {
            if !p.exists() {
                return Err(Error::Config(format!("{} path {} does not exist", name, p.display())));
            }
        }
        if self.layer == 0 {
            return Err(Error::Config("layer 0 has no states to capture".into()));
        }
        self.attack.cfg.validate()?;
        self.defense.validate()?;
        MetricsConfig { tau_s: self.tau_s, tau_tm: self.tau_tm }.validate()?;
        match self.attack.kind {
            AttackKind::Transfer => match &self.attack.replica {
                Some(p) if p.exists() => {}
                Some(p) => {
                    return Err(Error::Config(format!("replica path {} does not exist", p.display())))
                }
                None => return Err(Error::Config("transfer attack needs a replica path".into())),
            },
            AttackKind::Generate => match &self.attack.inverter {
                Some(p) if p.exists() => {}
                Some(p) => {
                    return Err(Error::Config(format!("inverter path {} does not exist", p.display())))
                }
                None => return Err(Error::Config("generate attack needs an inverter path".into())),
            },
            _ => {}
        }
        if !self.epsilon_grid.is_empty() {
            if !matches!(self.defense, DefenseConfig::LaplaceDp { .. }) {
                return Err(Error::Config("epsilon_grid requires a laplace defense".into()));
            }
            if self.epsilon_grid.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Config("epsilon_grid entries must be positive".into()));
            }
        }
        if self.attack.kind == AttackKind::Generate && self.attack.max_out == 0 {
            return Err(Error::Config("max_out 0 cannot decode anything".into()));
        }
        if let Some(p) = &self.states {
            if !p.exists() {
                return Err(Error::Config(format!("states path {} does not exist", p.display())));
            }
            if self.attack.kind == AttackKind::None {
                return Err(Error::Config("the identity path never reads captured states".into()));
            }
            if matches!(
                self.defense,
                DefenseConfig::GaussianEmbed { .. } | DefenseConfig::Quantize { .. }
            ) {
                return Err(Error::Config(
                    "embedding-noise and quantization act at capture time, not on stored states"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    /// The defense conditions this config runs: the single configured defense,
    /// or one laplace condition per grid epsilon.
    pub fn conditions(&self) -> Vec<DefenseConfig> {
        if let (DefenseConfig::LaplaceDp { clip, .. }, false) =
            (&self.defense, self.epsilon_grid.is_empty())
        {
            return self
                .epsilon_grid
                .iter()
                .map(|&epsilon| DefenseConfig::LaplaceDp { epsilon, clip: *clip })
                .collect();
        }
        vec![self.defense.clone()]
    }
}

// ---------------------------------------------------------------------------
// report types

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReportRow {
    pub sample: usize,
    pub attack: String,
    pub defense: String,
    pub layer: usize,
    pub cs: f64,
    pub bleu: f64,
    pub rouge: f64,
    pub em: f64,
    pub f1: f64,
    pub wall_time: f64,
    pub loss_final: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
}

fn mean_sem(values: impl Iterator<Item = f64> + Clone) -> MeanSem {
    let n = values.clone().count();
    if n == 0 {
        return MeanSem::default();
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return MeanSem { mean, sem: 0.0 };
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    MeanSem { mean, sem: (var / n as f64).sqrt() }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub cs: MeanSem,
    pub bleu: MeanSem,
    pub rouge: MeanSem,
    pub em: MeanSem,
    pub f1: MeanSem,
    pub loss_final: MeanSem,
    /// Fraction of rows whose reconstruction clears the tau_s/tau_tm test.
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RowError {
    pub sample: usize,
    pub defense: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub aggregate: Aggregate,
    pub rows: Vec<ReportRow>,
    pub errors: Vec<RowError>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: Report,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    /// 0 = every sample scored, 1 = partial (some rows failed).
    pub exit_code: i32,
}

// ---------------------------------------------------------------------------
// the runner

const SEED_DEFENSE: u64 = 1;
const SEED_ATTACK: u64 = 2;

struct Loaded {
    model: MicroLM,
    quantized: Option<MicroLM>,
    replica: Option<MicroLM>,
    inverter: Option<InverterModel>,
    /// Pre-captured frames, one per dataset text, already provenance-stamped.
    frames: Option<Vec<InternalStates>>,
}

fn load_stage(cfg: &ExperimentConfig) -> Result<Loaded> {
    let model = load_model(&cfg.model)?;
    if cfg.layer > model.cfg.n_layers {
        return Err(Error::Config(format!(
            "layer {} outside 1..={}",
            cfg.layer, model.cfg.n_layers
        )));
    }
    let quantized = match cfg.defense {
        DefenseConfig::Quantize { bits } => Some(defend_quantize(&model, bits)?),
        _ => None,
    };
    let replica = match (cfg.attack.kind, &cfg.attack.replica) {
        (AttackKind::Transfer, Some(p)) => Some(load_model(p)?),
        _ => None,
    };
    let inverter = match (cfg.attack.kind, &cfg.attack.inverter) {
        (AttackKind::Generate, Some(p)) => Some(load_inverter(p)?),
        _ => None,
    };
    let frames = match &cfg.states {
        Some(p) => {
            let mut frames = import_is(p)?;
            if let Some(h) = frames.iter().find(|h| h.layer != cfg.layer) {
                return Err(Error::Config(format!(
                    "imported frames hold layer {}, experiment wants {}",
                    h.layer, cfg.layer
                )));
            }
            stamp_fingerprint(&mut frames, &model);
            Some(frames)
        }
        None => None,
    };
    Ok(Loaded { model, quantized, replica, inverter, frames })
}

/// The states one sample exposes under a condition: an imported frame or a
/// live capture (from the quantized model when weights are quantized, with
/// noisy embeddings for the gaussian defense), plus any post-hoc transform.
fn sample_states(
    lo: &Loaded,
    text: &str,
    sample: usize,
    layer: usize,
    defense: &DefenseConfig,
    seed: u64,
) -> Result<InternalStates> {
    if let Some(frames) = &lo.frames {
        let h = frames[sample].clone();
        return match defense {
            DefenseConfig::None => Ok(h),
            DefenseConfig::Dropout { p } => defend_dropout(&h, *p, seed),
            DefenseConfig::LaplaceDp { epsilon, clip } => {
                defend_laplace_dp(&h, *epsilon, *clip, seed)
            }
            _ => unreachable!("validate rejects capture-time defenses on stored states"),
        };
    }
    match defense {
        DefenseConfig::None => lo.model.capture_is(text, layer),
        DefenseConfig::Dropout { p } => {
            defend_dropout(&lo.model.capture_is(text, layer)?, *p, seed)
        }
        DefenseConfig::GaussianEmbed { sigma } => {
            capture_is_gaussian(&lo.model, text, layer, *sigma, seed)
        }
        DefenseConfig::LaplaceDp { epsilon, clip } => {
            defend_laplace_dp(&lo.model.capture_is(text, layer)?, *epsilon, *clip, seed)
        }
        DefenseConfig::Quantize { .. } => {
            lo.quantized.as_ref().expect("quantized model prepared").capture_is(text, layer)
        }
    }
}

/// Decode the text's own tokens straight from the true embedding rows: the
/// closed loop that any healthy tokenize/embed/recover path scores 1.0 on.
fn identity_decode(model: &MicroLM, text: &str) -> Result<String> {
    let ids = model.tokenizer.tokenize(text);
    if ids.is_empty() {
        return Ok(String::new());
    }
    let d = model.embedding.cols();
    let mut w = Vec::with_capacity(ids.len() * d);
    for &id in &ids {
        w.extend_from_slice(model.embedding.row(id as usize));
    }
    let w = Tensor::new(vec![ids.len(), d], w)?;
    let rec = recover_tokens(&w, &model.embedding)?;
    model.tokenizer.detokenize_lossy(&rec.ids)
}

fn run_one(
    cfg: &ExperimentConfig,
    lo: &Loaded,
    text: &str,
    sample: usize,
    defense: &DefenseConfig,
    cond_idx: usize,
) -> Result<ReportRow> {
    let row_seed = mix_seed(mix_seed(cfg.seed, sample as u64), cond_idx as u64);
    let start = std::time::Instant::now();

    let (decoded, loss_final) = match cfg.attack.kind {
        AttackKind::None => (identity_decode(&lo.model, text)?, 0.0),
        AttackKind::Generate => {
            let h =
                sample_states(lo, text, sample, cfg.layer, defense, mix_seed(row_seed, SEED_DEFENSE))?;
            let inv = lo.inverter.as_ref().expect("inverter loaded");
            (invert_generate(&h, inv, cfg.attack.max_out)?, 0.0)
        }
        kind => {
            let h =
                sample_states(lo, text, sample, cfg.layer, defense, mix_seed(row_seed, SEED_DEFENSE))?;
            let mut acfg = cfg.attack.cfg.clone();
            acfg.seed = mix_seed(row_seed, SEED_ATTACK);
            if matches!(defense, DefenseConfig::Quantize { .. }) {
                // States come from the quantized weights; the attacker still
                // optimizes against the published full-precision model.
                acfg.allow_model_mismatch = true;
            }
            let result = match kind {
                AttackKind::Ts => attack_ts(&lo.model, &h, &acfg)?,
                AttackKind::Er => attack_er(&lo.model, &h, &acfg)?,
                AttackKind::Tbs => attack_tbs(&lo.model, &h, &acfg)?,
                AttackKind::Transfer => {
                    attack_transferred(&h, lo.replica.as_ref().expect("replica loaded"), &acfg)?
                }
                _ => unreachable!("none and generate handled above"),
            };
            (result.inverted_text, result.trace.best_loss)
        }
    };

    let mcfg = MetricsConfig { tau_s: cfg.tau_s, tau_tm: cfg.tau_tm };
    let s: ScoreRow = score(&decoded, text, &lo.model.tokenizer, &mcfg);
    Ok(ReportRow {
        sample,
        attack: cfg.attack.kind.label().to_string(),
        defense: defense.label(),
        layer: cfg.layer,
        cs: s.cs,
        bleu: s.bleu,
        rouge: s.rouge,
        em: s.em,
        f1: s.f1,
        wall_time: if cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 },
        loss_final,
    })
}

fn aggregate(rows: &[ReportRow], mcfg: &MetricsConfig) -> Aggregate {
    let col = |f: fn(&ReportRow) -> f64| mean_sem(rows.iter().map(f));
    let successes = rows.iter().filter(|r| r.cs >= mcfg.tau_s && r.f1 >= mcfg.tau_tm).count();
    Aggregate {
        n: rows.len(),
        cs: col(|r| r.cs),
        bleu: col(|r| r.bleu),
        rouge: col(|r| r.rouge),
        em: col(|r| r.em),
        f1: col(|r| r.f1),
        loss_final: col(|r| r.loss_final),
        success_rate: if rows.is_empty() { 0.0 } else { successes as f64 / rows.len() as f64 },
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("csv: {}", e)))?;
    }
    if rows.is_empty() {
        // serialize() never ran, so emit the header line by hand
        w.write_record([
            "sample", "attack", "defense", "layer", "cs", "bleu", "rouge", "em", "f1",
            "wall_time", "loss_final",
        ])
        .map_err(|e| Error::Format(format!("csv: {}", e)))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {}", e)))
}

/// Run every (sample, condition) cell of the configured experiment and write
/// `report.csv` and `report.json` under the output dir. Per-sample failures
/// yield a partial report (exit code 1); failures before any sample runs
/// (loading, config) are this function's own `Err`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut lo = load_stage(cfg)?;
    let (mut texts, _) = ingest_corpus(&cfg.dataset)?;
    if cfg.limit > 0 {
        texts.truncate(cfg.limit);
    }
    if let Some(frames) = &mut lo.frames {
        if frames.len() < texts.len() {
            return Err(Error::Config(format!(
                "{} frames cannot cover {} dataset texts",
                frames.len(),
                texts.len()
            )));
        }
        frames.truncate(texts.len());
    }
    let conditions = cfg.conditions();

    let cells: Vec<(usize, usize)> = (0..texts.len())
        .flat_map(|si| (0..conditions.len()).map(move |ci| (si, ci)))
        .collect();
    let results: Vec<(usize, usize, Result<ReportRow>)> = cells
        .par_iter()
        .map(|&(si, ci)| (si, ci, run_one(cfg, &lo, &texts[si], si, &conditions[ci], ci)))
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (si, ci, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(RowError {
                sample: si,
                defense: conditions[ci].label(),
                error: e.to_string(),
            }),
        }
    }

    let mcfg = MetricsConfig { tau_s: cfg.tau_s, tau_tm: cfg.tau_tm };
    let report = Report { config: cfg.clone(), aggregate: aggregate(&rows, &mcfg), rows, errors };

    std::fs::create_dir_all(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join("report.csv");
    let json_path = cfg.output_dir.join("report.json");
    std::fs::write(&csv_path, rows_to_csv(&report.rows)?)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    std::fs::write(&json_path, json)?;

    let exit_code = if report.errors.is_empty() { 0 } else { 1 };
    Ok(ExperimentOutcome { report, csv_path, json_path, exit_code })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, write_corpus, Style};
    use crate::lm::{train_lm, MicroLMConfig, TrainConfig};
    use crate::store::save_model;
    use crate::wire::{export_is, WireDtype};
    use std::sync::OnceLock;

    fn model() -> &'static MicroLM {
        static M: OnceLock<MicroLM> = OnceLock::new();
        M.get_or_init(|| {
            let corpus = synth_corpus(Style::Medical, 24, 2);
            let cfg = MicroLMConfig {
                vocab_size: 300,
                d_in: 16,
                n_layers: 2,
                n_heads: 2,
                ffn_mult: 2.0,
                max_seq_len: 48,
                ..MicroLMConfig::default()
            };
            let tcfg = TrainConfig { steps: 10, batch: 2, seq_len: 12, ..TrainConfig::default() };
            train_lm(cfg, &tcfg, &corpus).unwrap().0
        })
    }

    struct Setup {
        _dir: tempfile::TempDir,
        cfg: ExperimentConfig,
    }

    fn setup(texts: &[&str]) -> Setup {
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("model.isw");
        save_model(&model_path, model()).unwrap();
        let dataset = dir.path().join("corpus.jsonl");
        let owned: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
        write_corpus(&dataset, &owned).unwrap();
        let cfg = ExperimentConfig {
            model: model_path,
            dataset,
            layer: 1,
            attack: AttackSpec { kind: AttackKind::None, ..AttackSpec::default() },
            output_dir: dir.path().join("out"),
            ..ExperimentConfig::default()
        };
        Setup { _dir: dir, cfg }
    }

    #[test]
    fn identity_attack_scores_one_everywhere() {
        let s = setup(&["pt stable on exam.", "bp 120/80 noted", "dose held overnight"]);
        let out = run_experiment(&s.cfg).unwrap();
        assert_eq!(out.exit_code, 0);
        assert_eq!(out.report.rows.len(), 3);
        for r in &out.report.rows {
            assert_eq!(r.em, 1.0, "identity must decode sample {} exactly", r.sample);
            assert_eq!(r.f1, 1.0);
            assert_eq!(r.attack, "none");
            assert_eq!(r.defense, "none");
            assert_eq!(r.wall_time, 0.0);
        }
        assert_eq!(out.report.aggregate.em.mean, 1.0);
        assert_eq!(out.report.aggregate.success_rate, 1.0);
        assert!(out.csv_path.exists() && out.json_path.exists());
    }

    #[test]
    fn same_config_and_seed_yield_identical_reports() {
        let s = setup(&["hr 91 regular", "afebrile today"]);
        let mut cfg = s.cfg.clone();
        cfg.attack = AttackSpec {
            kind: AttackKind::Er,
            cfg: AttackConfig { steps: 25, lr: 0.05, ..AttackConfig::default() },
            ..AttackSpec::default()
        };
        cfg.defense = DefenseConfig::Dropout { p: 0.1 };
        cfg.record_timing = false;

        let out1 = run_experiment(&cfg).unwrap();
        cfg.output_dir = s.cfg.output_dir.with_file_name("out2");
        let out2 = run_experiment(&cfg).unwrap();
        assert_eq!(
            std::fs::read(&out1.csv_path).unwrap(),
            std::fs::read(&out2.csv_path).unwrap()
        );

        // flipping the seed must change something downstream of the defense
        cfg.output_dir = s.cfg.output_dir.with_file_name("out3");
        cfg.seed = 7;
        let out3 = run_experiment(&cfg).unwrap();
        assert_ne!(
            std::fs::read(&out1.csv_path).unwrap(),
            std::fs::read(&out3.csv_path).unwrap()
        );
    }

    #[test]
    fn epsilon_grid_emits_one_row_per_sample_epsilon_pair() {
        let s = setup(&["rr 14", "temp 37.1", "pulse steady"]);
        let mut cfg = s.cfg.clone();
        cfg.defense = DefenseConfig::LaplaceDp { epsilon: 1.0, clip: 1.0 };
        cfg.epsilon_grid = vec![1e6, 1e2];
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.report.rows.len(), 6);
        for si in 0..3 {
            let labels: Vec<&str> = out
                .report
                .rows
                .iter()
                .filter(|r| r.sample == si)
                .map(|r| r.defense.as_str())
                .collect();
            assert_eq!(labels.len(), 2);
            assert_ne!(labels[0], labels[1], "grid conditions must be distinguishable");
        }
    }

    #[test]
    fn aggregate_f1_is_the_row_mean() {
        let s = setup(&["k 4.1 mmol", "na 139 stable"]);
        let mut cfg = s.cfg.clone();
        cfg.attack = AttackSpec {
            kind: AttackKind::Er,
            cfg: AttackConfig { steps: 20, lr: 0.05, ..AttackConfig::default() },
            ..AttackSpec::default()
        };
        let out = run_experiment(&cfg).unwrap();
        let mean =
            out.report.rows.iter().map(|r| r.f1).sum::<f64>() / out.report.rows.len() as f64;
        assert!((out.report.aggregate.f1.mean - mean).abs() <= 1e-9);
    }

    #[test]
    fn failing_sample_yields_partial_report_and_exit_one() {
        let s = setup(&["wbc 8.2 norm", ""]);
        let mut cfg = s.cfg.clone();
        cfg.attack = AttackSpec {
            kind: AttackKind::Er,
            cfg: AttackConfig { steps: 5, ..AttackConfig::default() },
            ..AttackSpec::default()
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.exit_code, 1);
        assert_eq!(out.report.rows.len(), 1);
        assert_eq!(out.report.errors.len(), 1);
        assert_eq!(out.report.errors[0].sample, 1);
        assert!(!out.report.errors[0].error.is_empty());
        // the partial CSV still parses and holds the surviving row
        let csv = std::fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let s = setup(&["one text"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        let toml_text = format!(
            "model = {:?}\ndataset = {:?}\nlayer = 1\nseed = 3\n\n[attack]\nkind = \"er\"\nsteps = 12\n\n[defense]\nkind = \"dropout\"\np = 0.25\n",
            s.cfg.model, s.cfg.dataset
        );
        std::fs::write(&p, toml_text).unwrap();
        let cfg = load_experiment_config(&p).unwrap();
        assert_eq!(cfg.attack.kind, AttackKind::Er);
        assert_eq!(cfg.attack.cfg.steps, 12);
        assert_eq!(cfg.attack.cfg.lr, AttackConfig::default().lr, "unset fields keep defaults");
        assert_eq!(cfg.defense, DefenseConfig::Dropout { p: 0.25 });
        assert_eq!(cfg.seed, 3);
        cfg.validate().unwrap();

        let mut bad = cfg.clone();
        bad.model = PathBuf::from("/nonexistent/model.isw");
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let mut bad = cfg.clone();
        bad.epsilon_grid = vec![1e2];
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "grid needs laplace");

        let mut bad = cfg.clone();
        bad.attack.kind = AttackKind::Transfer;
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "transfer needs replica");

        let mut bad = cfg;
        bad.layer = 99;
        bad.validate().unwrap();
        assert!(matches!(run_experiment(&bad), Err(Error::Config(_))), "depth checked at load");
    }

    #[test]
    fn imported_frames_attack_identically_to_live_capture() {
        let s = setup(&["bp 118/76 sitting", "no acute distress"]);
        let mut live = s.cfg.clone();
        live.attack = AttackSpec {
            kind: AttackKind::Er,
            cfg: AttackConfig { steps: 20, lr: 0.05, ..AttackConfig::default() },
            ..AttackSpec::default()
        };
        let out_live = run_experiment(&live).unwrap();

        // capture with the container round-tripped model, exactly as the live
        // path does; container weights are f32-rounded once
        let reloaded = crate::store::load_model(&live.model).unwrap();
        let (texts, _) = ingest_corpus(&live.dataset).unwrap();
        let frames: Vec<InternalStates> =
            texts.iter().map(|t| reloaded.capture_is(t, live.layer).unwrap()).collect();
        let states_path = live.output_dir.with_file_name("frames.isb");
        export_is(&states_path, &frames, WireDtype::F64).unwrap();

        let mut imported = live.clone();
        imported.states = Some(states_path);
        imported.output_dir = live.output_dir.with_file_name("out_imported");
        let out_imp = run_experiment(&imported).unwrap();

        assert_eq!(out_live.report.rows, out_imp.report.rows);
        assert_eq!(
            std::fs::read(&out_live.csv_path).unwrap(),
            std::fs::read(&out_imp.csv_path).unwrap()
        );
    }

    #[test]
    fn quantize_condition_attacks_across_the_precision_gap() {
        let s = setup(&["gtt rate 20"]);
        let mut cfg = s.cfg.clone();
        cfg.defense = DefenseConfig::Quantize { bits: 8 };
        cfg.attack = AttackSpec {
            kind: AttackKind::Er,
            cfg: AttackConfig { steps: 10, ..AttackConfig::default() },
            ..AttackSpec::default()
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.exit_code, 0, "fingerprint gap must not fail the row");
        assert_eq!(out.report.rows[0].defense, "quantize(8bit)");
    }
}
