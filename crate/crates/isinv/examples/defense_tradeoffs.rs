//! Sweep defenses against a fixed bounded attack through the experiment
//! harness: a Laplace noise grid over three privacy budgets, plus dropout and
//! quantization for comparison. Each condition produces aggregate rows in the
//! same report, written as CSV and JSON.
//!
//! Run with: cargo run --release --example defense_tradeoffs

use isinv::attacks::AttackConfig;
use isinv::corpus::{synth_corpus, write_corpus, Style};
use isinv::defenses::DefenseConfig;
use isinv::harness::{run_experiment, AttackKind, AttackSpec, ExperimentConfig};
use isinv::lm::{train_lm, MicroLMConfig, TrainConfig};
use isinv::store::save_model;

fn main() -> isinv::Result<()> {
    let dir = std::env::temp_dir().join(format!("defense_tradeoffs_{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let corpus = synth_corpus(Style::Medical, 200, 1);
    let cfg = MicroLMConfig {
        vocab_size: 400,
        d_in: 32,
        n_layers: 3,
        n_heads: 4,
        ffn_mult: 2.0,
        max_seq_len: 64,
        ..MicroLMConfig::default()
    };
    let tcfg = TrainConfig { steps: 80, batch: 4, seq_len: 16, ..TrainConfig::default() };
    let (model, _) = train_lm(cfg, &tcfg, &corpus)?;

    let model_path = dir.join("model.isw");
    let data_path = dir.join("eval.jsonl");
    save_model(&model_path, &model)?;
    write_corpus(&data_path, &synth_corpus(Style::Medical, 6, 77))?;

    let attack = AttackSpec {
        kind: AttackKind::Tbs,
        cfg: AttackConfig { steps: 500, lr: 0.05, stop_tol: 1e-9, ..AttackConfig::default() },
        ..AttackSpec::default()
    };

    // --- Laplace grid: one condition per epsilon, strongest noise last
    let grid = ExperimentConfig {
        model: model_path.clone(),
        dataset: data_path.clone(),
        layer: 1,
        attack: attack.clone(),
        defense: DefenseConfig::LaplaceDp { epsilon: 1e6, clip: 3.0 },
        epsilon_grid: vec![1e6, 1e4, 1e2],
        output_dir: dir.join("laplace"),
        ..ExperimentConfig::default()
    };
    println!("running laplace grid (3 budgets x 6 samples)...");
    let out = run_experiment(&grid)?;
    println!("  report: {}\n", out.csv_path.display());
    for eps in [1e6, 1e4, 1e2] {
        let label = DefenseConfig::LaplaceDp { epsilon: eps, clip: 3.0 }.label();
        let rows: Vec<_> =
            out.report.rows.iter().filter(|r| r.defense == label).collect();
        let f1 = rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64;
        println!("  epsilon {:>9.0}: mean f1 {:>5.1}", eps, f1 * 100.0);
    }

    // --- single-condition runs for the other defenses
    println!("\nother defenses, same attack and samples:");
    for defense in [
        DefenseConfig::None,
        DefenseConfig::Dropout { p: 0.05 },
        DefenseConfig::Quantize { bits: 8 },
    ] {
        let cfg = ExperimentConfig {
            model: model_path.clone(),
            dataset: data_path.clone(),
            layer: 1,
            attack: attack.clone(),
            defense: defense.clone(),
            output_dir: dir.join(defense.label().replace(['(', ')', '='], "_")),
            ..ExperimentConfig::default()
        };
        let out = run_experiment(&cfg)?;
        let agg = &out.report.aggregate;
        println!(
            "  {:<18} mean f1 {:>5.1} +/- {:>4.1}, success rate {:.2}",
            defense.label(),
            agg.f1.mean * 100.0,
            agg.f1.sem * 100.0,
            agg.success_rate
        );
    }
    println!("\nartifacts under {}", dir.display());
    Ok(())
}
