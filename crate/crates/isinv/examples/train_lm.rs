//! Train a micro language model from scratch on a synthetic corpus, save it,
//! and capture the internal states an attacker would see at each layer.
//!
//! Run with: cargo run --release --example train_lm

use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{train_lm, MicroLMConfig, TrainConfig};
use isinv::store::{load_model, save_model};

fn main() -> isinv::Result<()> {
    let corpus = synth_corpus(Style::Medical, 300, 7);
    println!("corpus of {} texts, e.g. {:?}", corpus.len(), corpus[0]);

    let cfg = MicroLMConfig {
        vocab_size: 512,
        d_in: 32,
        n_layers: 4,
        n_heads: 4,
        ffn_mult: 2.0,
        max_seq_len: 64,
        ..MicroLMConfig::default()
    };
    let tcfg = TrainConfig { steps: 150, batch: 4, seq_len: 16, eval_every: 50, ..TrainConfig::default() };
    let (model, stats) = train_lm(cfg, &tcfg, &corpus)?;

    println!("\nstep    loss");
    for (step, loss) in stats.heldout.iter() {
        println!("{:>4}    {:.4}", step, loss);
    }
    println!(
        "final held-out loss {:.4} (perplexity {:.1}) after {} tokens",
        stats.final_heldout,
        stats.final_perplexity(),
        stats.tokens_seen
    );

    // the artifact every other example starts from
    let dir = std::env::temp_dir().join("isinv_train_lm");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.isw");
    save_model(&path, &model)?;
    let back = load_model(&path)?;
    println!(
        "\nsaved {} ({} layers, width {}), fingerprint {:#018x}",
        path.display(),
        back.cfg.n_layers,
        back.cfg.d_in,
        back.fingerprint()
    );

    let text = &corpus[3];
    println!("\ninternal states for {:?}:", text);
    for layer in 1..=back.cfg.n_layers {
        let h = back.capture_is(text, layer)?;
        let rms = (h.states.data().iter().map(|v| v * v).sum::<f64>() / h.states.len() as f64).sqrt();
        println!("  layer {}: {} x {} (rms {:.3})", layer, h.states.rows(), h.states.cols(), rms);
    }
    Ok(())
}
