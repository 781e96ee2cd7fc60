//! Split inference over TCP: the client runs layers 1..=l_split locally and
//! ships only internal states; the server finishes the forward pass and
//! returns the next token id. A curious server also persists every accepted
//! frame, and this example shows those persisted states invert exactly as
//! well as states captured offline.
//!
//! Run with: cargo run --release --example split_inference

use isinv::attacks::{attack_tbs, AttackConfig};
use isinv::corpus::{synth_corpus, Style};
use isinv::lm::{train_lm, MicroLMConfig, TrainConfig};
use isinv::metrics::{score, MetricsConfig};
use isinv::wire::{import_is, split_client, split_serve_on, ServeConfig, WireDtype};
use std::net::TcpListener;

fn main() -> isinv::Result<()> {
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

    let l_split = 2;
    let transcript = std::env::temp_dir().join(format!("curious_{}.isb", std::process::id()));
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();

    let server_model = model.clone();
    let serve_cfg = ServeConfig { l_split, transcript: Some(transcript.clone()), sessions: 1 };
    let server = std::thread::spawn(move || split_serve_on(listener, &server_model, &serve_cfg));

    // --- client side: send states, read back the next token per text
    let texts = synth_corpus(Style::Medical, 4, 22);
    let ids = split_client(&addr, &texts, &model, l_split, WireDtype::F64)?;
    let summary = server.join().expect("server thread panicked")?;
    println!("served {} session(s): {} frames accepted, {} rejected", summary.sessions, summary.accepted, summary.rejected);
    for (text, id) in texts.iter().zip(&ids) {
        let head: String = text.chars().take(40).collect();
        println!("  {:<42} -> next token id {}", head, id);
    }

    // The returned ids match what a single local forward pass would emit.
    let mut agree = true;
    for (text, &id) in texts.iter().zip(&ids) {
        let h = model.capture_is(text, model.cfg.n_layers)?;
        agree &= model.next_token_from_states(&h)? == id;
    }
    println!("split predictions match local forward pass: {agree}");

    // --- what the curious server now holds
    let mut stolen = import_is(&transcript)?;
    isinv::wire::stamp_fingerprint(&mut stolen, &model);
    let acfg = AttackConfig { steps: 500, lr: 0.05, stop_tol: 1e-9, ..AttackConfig::default() };
    let mcfg = MetricsConfig::default();
    println!("\nattacking the {} persisted frames vs offline captures:", stolen.len());
    for (text, h_wire) in texts.iter().zip(&stolen) {
        let h_local = model.capture_is(text, l_split)?;
        let from_wire = attack_tbs(&model, h_wire, &acfg)?;
        let from_local = attack_tbs(&model, &h_local, &acfg)?;
        let same = from_wire.inverted_ids == from_local.inverted_ids;
        let s = score(&from_wire.inverted_text, text, &model.tokenizer, &mcfg);
        println!("  f1 {:>5.1}  identical to offline attack: {}", s.f1 * 100.0, same);
    }
    std::fs::remove_file(&transcript).ok();
    Ok(())
}
