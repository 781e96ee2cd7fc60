//! Invert first-layer internal states back into their exact input text by
//! optimizing dummy embeddings against the captured states, then snapping
//! each recovered row to its nearest vocabulary embedding.
//!
//! Run with: cargo run --release --example shallow_recovery

use isinv::attacks::{attack_er, AttackConfig};
use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{train_lm, MicroLMConfig, TrainConfig};
use isinv::metrics::{score, MetricsConfig};

fn main() -> isinv::Result<()> {
    let corpus = synth_corpus(Style::Medical, 200, 3);
    let cfg = MicroLMConfig {
        vocab_size: 400,
        d_in: 32,
        n_layers: 4,
        n_heads: 4,
        ffn_mult: 2.0,
        max_seq_len: 64,
        ..MicroLMConfig::default()
    };
    let tcfg = TrainConfig { steps: 80, batch: 4, seq_len: 16, ..TrainConfig::default() };
    let (model, _) = train_lm(cfg, &tcfg, &corpus)?;

    let acfg = AttackConfig { steps: 3000, lr: 0.05, stop_tol: 1e-10, ..AttackConfig::default() };
    let mcfg = MetricsConfig::default();

    println!("recovering texts from layer-1 states:\n");
    let mut exact = 0;
    let victims = &corpus[150..156];
    for text in victims {
        let h = model.capture_is(text, 1)?;
        let r = attack_er(&model, &h, &acfg)?;
        let s = score(&r.inverted_text, text, &model.tokenizer, &mcfg);
        exact += (s.em == 1.0) as usize;
        println!("  original : {:?}", text);
        println!("  recovered: {:?}", r.inverted_text);
        println!(
            "  em {:.0} f1 {:.3} after {} steps (loss {:.2e})\n",
            s.em,
            s.f1,
            r.trace.early_stop_step.unwrap_or(acfg.steps),
            r.trace.best_loss
        );
    }
    println!("{} of {} recovered exactly", exact, victims.len());
    Ok(())
}
