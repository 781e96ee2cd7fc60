//! Inspect the two orthonormal bases the bounded attack can project through,
//! and confirm nearest-row decoding is exact on clean embeddings.
//!
//! Run with: cargo run --release --example embedding_bases

use isinv::attacks::{compute_basis, recover_tokens, BasisKind};
use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{train_lm, MicroLMConfig, TrainConfig};
use isinv::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() -> isinv::Result<()> {
    let corpus = synth_corpus(Style::Medical, 200, 3);
    let cfg = MicroLMConfig {
        vocab_size: 400,
        d_in: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_mult: 2.0,
        max_seq_len: 64,
        ..MicroLMConfig::default()
    };
    let tcfg = TrainConfig { steps: 60, batch: 4, seq_len: 16, ..TrainConfig::default() };
    let (model, _) = train_lm(cfg, &tcfg, &corpus)?;
    let d = model.cfg.d_in;

    // --- orthonormality
    for kind in [BasisKind::Singular, BasisKind::Unbiased] {
        let basis = compute_basis(&model.embedding, kind)?;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 =
                    basis.b.row(i).iter().zip(basis.b.row(j)).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        println!("{:?} basis: max |B B^T - I| = {:.3e}", kind, worst);
    }

    // --- projection concentration on real embedding rows
    let singular = compute_basis(&model.embedding, BasisKind::Singular)?;
    let unbiased = compute_basis(&model.embedding, BasisKind::Unbiased)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut peak = |basis: &Tensor| -> f64 {
        let mut m: f64 = 0.0;
        for _ in 0..200 {
            let row = model.embedding.row(rng.gen_range(0..model.cfg.vocab_size));
            for k in 0..d {
                let p: f64 = row.iter().zip(basis.row(k)).map(|(x, y)| x * y).sum();
                m = m.max(p.abs());
            }
        }
        m
    };
    let ps = peak(&singular.b);
    let pu = peak(&unbiased.b);
    println!("\npeak |projection| of embedding rows:");
    println!("  singular ordering: {:.4}", ps);
    println!("  unbiased ordering: {:.4}", pu);
    println!(
        "  the singular ordering concentrates energy in the leading coordinates, \
         so its peak ({:.2}x the unbiased peak) is what the arctan scale must cover.",
        ps / pu
    );

    // --- exact decoding from clean embedding rows
    let mut exact = 0;
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let ids: Vec<usize> = (0..12).map(|_| rng.gen_range(0..model.cfg.vocab_size)).collect();
        let mut w = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            for (c, &x) in model.embedding.row(id).iter().enumerate() {
                w.set(r, c, x);
            }
        }
        let rec = recover_tokens(&w, &model.embedding)?;
        if rec.ids.iter().map(|&i| i as usize).eq(ids.iter().copied()) {
            exact += 1;
        }
    }
    println!("\nnearest-row decoding recovered {exact}/100 random id sequences exactly");
    Ok(())
}
