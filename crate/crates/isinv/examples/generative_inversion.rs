//! Train a seq2seq inverter that reads states from one layer and emits bytes,
//! with no gradient access to the victim at attack time. Quality is highest on
//! pairs it memorized, lower on held-out text from the same distribution, and
//! lower again out of distribution.
//!
//! Run with: cargo run --release --example generative_inversion

use isinv::blackbox::{invert_generate, train_inverter, InverterConfig, InverterTrainConfig};
use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{train_lm, MicroLM, MicroLMConfig, TrainConfig};
use isinv::metrics::{score, MetricsConfig};

fn mean_f1(model: &MicroLM, inv: &isinv::blackbox::InverterModel, layer: usize, texts: &[String]) -> isinv::Result<f64> {
    let mcfg = MetricsConfig::default();
    let mut total = 0.0;
    for text in texts {
        let h = model.capture_is(text, layer)?;
        let out = invert_generate(&h, inv, 48)?;
        total += score(&out, text, &model.tokenizer, &mcfg).f1;
    }
    Ok(total / texts.len() as f64 * 100.0)
}

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
    let tcfg = TrainConfig { steps: 80, batch: 4, seq_len: 16, ..TrainConfig::default() };
    let (victim, _) = train_lm(cfg, &tcfg, &synth_corpus(Style::Medical, 200, 1))?;

    println!("capturing 400 (text, states) training pairs at layer {layer}...");
    let train_texts = synth_corpus(Style::Medical, 400, 7);
    let mut pairs = Vec::new();
    for text in &train_texts {
        pairs.push((text.clone(), victim.capture_is(text, layer)?));
    }

    let icfg = InverterConfig {
        d_in: victim.cfg.d_in,
        d_enc: 64,
        ffn_mult: 2.0,
        max_seq_len: 64,
        use_projection: true,
        seed: 0,
    };
    let itcfg = InverterTrainConfig { epochs: 8, batch: 16, lr: 3e-3, seed: 0 };
    println!("training the inverter ({} epochs)...", itcfg.epochs);
    let (inverter, stats) = train_inverter(&pairs, icfg, &itcfg)?;
    println!(
        "teacher-forced loss: {:.3} -> {:.3}",
        stats.initial_loss,
        stats.epoch_losses.last().unwrap()
    );

    // --- a few generations next to their sources
    println!("\nsample generations:");
    for text in &train_texts[..3] {
        let h = victim.capture_is(text, layer)?;
        let out = invert_generate(&h, &inverter, 48)?;
        println!("  true: {}", text);
        println!("  gen:  {}\n", out);
    }

    // Held-out text never seen in training; OOD swaps the domain entirely.
    let heldout: Vec<String> = synth_corpus(Style::Medical, 80, 555)
        .into_iter()
        .filter(|t| !train_texts.contains(t))
        .take(20)
        .collect();
    let ood = synth_corpus(Style::Code, 20, 555);

    let f_train = mean_f1(&victim, &inverter, layer, &train_texts[..20])?;
    let f_id = mean_f1(&victim, &inverter, layer, &heldout)?;
    let f_ood = mean_f1(&victim, &inverter, layer, &ood)?;
    println!("mean token f1: train subset {f_train:.1}, held-out in-dist {f_id:.1}, out-of-dist {f_ood:.1}");
    Ok(())
}
