//! Why naive token-space optimization dies at depth while the bounded
//! basis-coefficient parameterization keeps working: run both against the
//! same deep-layer states and compare what comes back.
//!
//! Run with: cargo run --release --example depth_contrast

use isinv::attacks::{attack_tbs, attack_ts, AttackConfig};
use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{train_lm, MicroLMConfig, TrainConfig};
use isinv::metrics::token_f1;

fn main() -> isinv::Result<()> {
    let corpus = synth_corpus(Style::Medical, 200, 5);
    let cfg = MicroLMConfig {
        vocab_size: 400,
        d_in: 32,
        n_layers: 8,
        n_heads: 4,
        ffn_mult: 2.0,
        max_seq_len: 64,
        ..MicroLMConfig::default()
    };
    // The contrast only appears once training has given the deep layers real
    // structure; near initialization every parameterization inverts easily.
    let tcfg = TrainConfig { steps: 600, batch: 8, seq_len: 24, ..TrainConfig::default() };
    let (model, _) = train_lm(cfg, &tcfg, &corpus)?;

    let layer = 6;
    let ts_cfg = AttackConfig { steps: 400, lr: 0.05, ..AttackConfig::default() };
    let tbs_cfg = AttackConfig { steps: 800, lr: 0.05, stop_tol: 1e-9, ..AttackConfig::default() };

    println!("attacking layer {} of {}:\n", layer, model.cfg.n_layers);
    println!("{:<44} {:>7} {:>7}", "text", "ts f1", "tbs f1");
    let (mut ts_sum, mut tbs_sum) = (0.0, 0.0);
    let victims = &corpus[150..156];
    for text in victims {
        let h = model.capture_is(text, layer)?;
        let ts = attack_ts(&model, &h, &ts_cfg)?;
        let tbs = attack_tbs(&model, &h, &tbs_cfg)?;
        let f_ts = token_f1(&ts.inverted_text, text, &model.tokenizer);
        let f_tbs = token_f1(&tbs.inverted_text, text, &model.tokenizer);
        ts_sum += f_ts;
        tbs_sum += f_tbs;
        println!("{:<44} {:>7.3} {:>7.3}", truncate(text, 42), f_ts, f_tbs);
    }
    let n = victims.len() as f64;
    println!("{:<44} {:>7.3} {:>7.3}", "mean", ts_sum / n, tbs_sum / n);
    println!(
        "\nbounding the search to alpha*arctan(z B) keeps every candidate inside \
         the region real embeddings occupy; raw token-distribution logits drift \
         somewhere the deep layers never map back from."
    );
    Ok(())
}

fn truncate(s: &str, n: usize) -> String {
    if s.len() <= n {
        s.to_string()
    } else {
        format!("{}..", &s[..n.saturating_sub(2)])
    }
}
