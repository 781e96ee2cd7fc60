//! Attack a finetuned victim you cannot open. Raw transfer optimizes against
//! the public base model; replication first nudges the base toward the victim
//! on a handful of leaked (text, states) pairs, then runs the same attack
//! against the replica. The replica's states sit much closer to the victim's,
//! so inversion quality jumps.
//!
//! Run with: cargo run --release --example replicate_transfer

use isinv::attacks::AttackConfig;
use isinv::blackbox::{attack_transferred as transfer, replicate_model, replication_mse, ReplicateConfig};
use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{finetune_lm, train_lm, MicroLMConfig, TrainConfig};
use isinv::metrics::{score, MetricsConfig};

fn main() -> isinv::Result<()> {
    let layer = 2;
    let cfg = MicroLMConfig {
        vocab_size: 400,
        d_in: 32,
        n_layers: 3,
        n_heads: 4,
        ffn_mult: 2.0,
        max_seq_len: 64,
        ..MicroLMConfig::default()
    };
    let base_corpus = synth_corpus(Style::Medical, 200, 1);
    let tcfg = TrainConfig { steps: 80, batch: 4, seq_len: 16, ..TrainConfig::default() };
    let (public_base, _) = train_lm(cfg, &tcfg, &base_corpus)?;

    println!("finetuning a private victim from the public base...");
    let ft_cfg =
        TrainConfig { steps: 60, batch: 4, seq_len: 16, lr: 5e-4, ..TrainConfig::default() };
    let (victim, _) = finetune_lm(&public_base, &ft_cfg, &synth_corpus(Style::Code, 150, 42))?;

    // A few leaked states from the victim are all the attacker gets.
    let leak = synth_corpus(Style::Medical, 24, 9);
    let mut pairs = Vec::new();
    for text in &leak {
        pairs.push((text.clone(), victim.capture_is(text, layer)?));
    }

    let pre = replication_mse(&public_base, &pairs, layer)?;
    let rcfg = ReplicateConfig { steps: 150, ..ReplicateConfig::default() };
    let (replica, stats) = replicate_model(&public_base, &pairs, layer, &rcfg)?;
    let post = replication_mse(&replica, &pairs, layer)?;
    println!(
        "replication state mse: {:.6} -> {:.6} (best step {})",
        pre,
        post,
        stats.best_step
    );

    // --- same bounded attack, two different stand-ins for the victim
    let acfg = AttackConfig { steps: 600, lr: 0.05, stop_tol: 1e-9, ..AttackConfig::default() };
    let mcfg = MetricsConfig::default();
    let eval = synth_corpus(Style::Medical, 40, 33);
    let mut raw_f1 = 0.0;
    let mut rep_f1 = 0.0;
    let n = 8;
    println!("\n{:<44} {:>8} {:>8}", "victim text", "base f1", "repl f1");
    for text in &eval[32..32 + n] {
        let h = victim.capture_is(text, layer)?;
        let via_base = transfer(&h, &public_base, &acfg)?;
        let via_repl = transfer(&h, &replica, &acfg)?;
        let sb = score(&via_base.inverted_text, text, &victim.tokenizer, &mcfg);
        let sr = score(&via_repl.inverted_text, text, &victim.tokenizer, &mcfg);
        raw_f1 += sb.f1;
        rep_f1 += sr.f1;
        let head: String = text.chars().take(42).collect();
        println!("{:<44} {:>8.1} {:>8.1}", head, sb.f1 * 100.0, sr.f1 * 100.0);
    }
    println!(
        "\nmean token f1: raw base transfer {:.1}, replicated transfer {:.1}",
        raw_f1 / n as f64 * 100.0,
        rep_f1 / n as f64 * 100.0
    );
    Ok(())
}
