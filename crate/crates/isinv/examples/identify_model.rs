//! Fingerprint which base model a stream of internal states came from, using
//! one autoencoder per known family. Finetuned variants still reconstruct
//! well under their parent's autoencoder, so they inherit the parent label;
//! a model from an unknown family reconstructs badly everywhere.
//!
//! Run with: cargo run --release --example identify_model

use isinv::blackbox::{
    calibrate_tau, detect_model_type, pooled_dataset, train_autoencoder, EnsembleDetector,
    INDEPENDENT,
};
use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{finetune_lm, train_lm, MicroLM, MicroLMConfig, TrainConfig};

fn base(seed: u64, style: Style) -> isinv::Result<MicroLM> {
    let cfg = MicroLMConfig {
        vocab_size: 400,
        d_in: 32,
        n_layers: 3,
        n_heads: 4,
        ffn_mult: 2.0,
        max_seq_len: 64,
        seed,
        ..MicroLMConfig::default()
    };
    let tcfg =
        TrainConfig { steps: 80, batch: 4, seq_len: 16, seed, ..TrainConfig::default() };
    Ok(train_lm(cfg, &tcfg, &synth_corpus(style, 200, seed))?.0)
}

fn main() -> isinv::Result<()> {
    let layer = 2;
    let probes = synth_corpus(Style::Medical, 80, 99);
    let (fit, cal) = probes.split_at(40);

    println!("training two base families...");
    let med = base(10, Style::Medical)?;
    let code = base(20, Style::Code)?;

    let mut detector = EnsembleDetector::new();
    for (label, model) in [("med-base", &med), ("code-base", &code)] {
        let fit_pool = pooled_dataset(model, fit, layer)?;
        let cal_pool = pooled_dataset(model, cal, layer)?;
        let ae = train_autoencoder(&fit_pool, 40, 8, 5)?;
        let tau = calibrate_tau(&ae, &cal_pool)?;
        println!("  {label}: tau = {tau:.4}");
        detector.add_member(label, ae, tau)?;
    }

    // --- finetuned variants keep their parent's signature; derived models
    // train further on fresh text from their own domain
    let ft_cfg = TrainConfig { steps: 30, batch: 4, seq_len: 16, lr: 3e-4, ..TrainConfig::default() };
    let med_ft = finetune_lm(&med, &ft_cfg, &synth_corpus(Style::Medical, 120, 77))?.0;
    let code_ft = finetune_lm(&code, &ft_cfg, &synth_corpus(Style::Code, 120, 78))?.0;

    // --- a third family the detector has never seen
    let stranger = base(30, Style::Medical)?;

    println!("\nclassifying pooled states from unlabeled models:");
    for (name, model, want) in [
        ("medical finetune of med-base", &med_ft, "med-base"),
        ("code finetune of code-base", &code_ft, "code-base"),
        ("independently seeded model", &stranger, INDEPENDENT),
    ] {
        let pool = pooled_dataset(model, cal, layer)?;
        let got = detect_model_type(&pool, &detector)?;
        let mark = if got == want { "ok" } else { "MISS" };
        println!("  {name}: labeled {got} (expected {want}) [{mark}]");
    }
    Ok(())
}
