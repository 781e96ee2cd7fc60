//! End-to-end runs of the installed binary: every subcommand, exit-code
//! semantics, seeded determinism, and offline/wire attack equality.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isinv"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("spawn isinv");
    assert!(
        out.status.success(),
        "isinv {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(dir: &Path, args: &[&str]) -> i32 {
    bin().current_dir(dir).args(args).output().expect("spawn isinv").status.code().unwrap_or(-1)
}

/// One shared workspace: a trained base model, a corpus, captured frames.
fn workspace() -> &'static PathBuf {
    static WS: OnceLock<PathBuf> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir").keep();
        run_in(
            &dir,
            &[
                "train-lm", "--corpus", "med.jsonl", "--synth", "medical", "--synth-count", "60",
                "--vocab-size", "300", "--d-in", "16", "--n-layers", "2", "--n-heads", "2",
                "--ffn-mult", "2", "--max-seq-len", "48", "--steps", "12", "--batch", "2",
                "--seq-len", "12", "--seed", "1", "--out", "base.isw",
            ],
        );
        run_in(
            &dir,
            &[
                "capture-is", "--model", "base.isw", "--dataset", "med.jsonl", "--layer", "1",
                "--out", "frames.isb", "--limit", "3",
            ],
        );
        dir
    })
}

#[test]
fn attack_on_imported_frames_matches_live_capture() {
    let ws = workspace();
    let attack = |extra: &[&str]| {
        let mut args = vec![
            "attack", "er", "--model", "base.isw", "--dataset", "med.jsonl", "--layer", "1",
            "--limit", "3", "--steps", "15", "--lr", "0.05", "--seed", "9",
        ];
        args.extend_from_slice(extra);
        run_in(ws, &args);
    };
    attack(&["--output-dir", "out_live"]);
    attack(&["--output-dir", "out_imp", "--states", "frames.isb"]);
    let live = std::fs::read(ws.join("out_live/report.csv")).unwrap();
    let imp = std::fs::read(ws.join("out_imp/report.csv")).unwrap();
    assert_eq!(live, imp, "imported frames must attack like live captures");

    // same seed, third run: bytes stay put
    attack(&["--output-dir", "out_live2"]);
    assert_eq!(live, std::fs::read(ws.join("out_live2/report.csv")).unwrap());
}

#[test]
fn identity_report_scores_exact_matches() {
    let ws = workspace();
    run_in(
        ws,
        &[
            "report", "--model", "base.isw", "--dataset", "med.jsonl", "--layer", "1",
            "--attack", "none", "--limit", "4", "--output-dir", "out_id",
        ],
    );
    let csv = std::fs::read_to_string(ws.join("out_id/report.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let em = line.split(',').nth(7).unwrap();
        assert_eq!(em, "1.0", "identity row scored below exact match: {}", line);
        rows += 1;
    }
    assert_eq!(rows, 4);
}

#[test]
fn wire_transcript_attacks_like_offline_export() {
    let ws = workspace();
    let port = 17000 + (std::process::id() % 2000) as u16;
    let addr = format!("127.0.0.1:{}", port);
    let mut server = bin()
        .current_dir(ws)
        .args([
            "serve", "--model", "base.isw", "--l-split", "1", "--addr", &addr, "--transcript",
            "curious.isb", "--sessions", "1",
        ])
        .spawn()
        .expect("spawn server");
    // before the listener binds, connects are refused and cost nothing; retry
    // the client rather than probing (a probe would consume the one session)
    let client_args = [
        "client", "--model", "base.isw", "--dataset", "med.jsonl", "--l-split", "1", "--addr",
        &addr, "--limit", "3", "--dtype", "f64", "--out", "ids.json",
    ];
    let mut connected = false;
    for _ in 0..150 {
        let out = bin().current_dir(ws).args(client_args).output().expect("spawn client");
        if out.status.success() {
            connected = true;
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    assert!(connected, "client never reached the server");
    assert!(server.wait().expect("server exit").success());

    let attack = |states: &str, out: &str| {
        run_in(
            ws,
            &[
                "attack", "er", "--model", "base.isw", "--dataset", "med.jsonl", "--states",
                states, "--layer", "1", "--limit", "3", "--steps", "15", "--lr", "0.05",
                "--seed", "9", "--output-dir", out,
            ],
        );
    };
    attack("curious.isb", "out_wire");
    attack("frames.isb", "out_frames");
    assert_eq!(
        std::fs::read(ws.join("out_wire/report.csv")).unwrap(),
        std::fs::read(ws.join("out_frames/report.csv")).unwrap(),
        "what the curious server logged must attack like the offline export"
    );

    let ids: Vec<u32> =
        serde_json::from_slice(&std::fs::read(ws.join("ids.json")).unwrap()).unwrap();
    assert_eq!(ids.len(), 3);
}

#[test]
fn detector_separates_two_bases_and_labels_a_finetune() {
    let ws = workspace();
    run_in(
        ws,
        &[
            "train-lm", "--corpus", "code.jsonl", "--synth", "code", "--synth-count", "60",
            "--vocab-size", "300", "--d-in", "16", "--n-layers", "2", "--n-heads", "2",
            "--ffn-mult", "2", "--max-seq-len", "48", "--steps", "12", "--batch", "2",
            "--seq-len", "12", "--seed", "2", "--out", "other.isw",
        ],
    );
    run_in(
        ws,
        &[
            "finetune-lm", "--model", "base.isw", "--corpus", "med.jsonl", "--steps", "8",
            "--batch", "2", "--seq-len", "12", "--seed", "5", "--out", "victim.isw",
        ],
    );
    run_in(
        ws,
        &[
            "identify", "--dataset", "med.jsonl", "--layer", "1", "--member",
            "medbase=base.isw", "--member", "codebase=other.isw", "--epochs", "10",
            "--bottleneck", "4", "--train-out", "det.bin",
        ],
    );
    let out = run_in(
        ws,
        &[
            "identify", "--dataset", "med.jsonl", "--layer", "1", "--detector", "det.bin",
            "--model", "victim.isw",
        ],
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "medbase");
}

#[test]
fn replicate_then_transfer_runs_end_to_end() {
    let ws = workspace();
    // victim.isw may not exist yet when tests interleave; make a private one
    run_in(
        ws,
        &[
            "finetune-lm", "--model", "base.isw", "--corpus", "med.jsonl", "--steps", "8",
            "--batch", "2", "--seq-len", "12", "--seed", "15", "--out", "victim_r.isw",
        ],
    );
    let out = run_in(
        ws,
        &[
            "replicate", "--base", "base.isw", "--victim", "victim_r.isw", "--dataset",
            "med.jsonl", "--layer", "1", "--steps", "25", "--batch", "4", "--lr", "2e-3",
            "--limit", "10", "--out", "replica.isw",
        ],
    );
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(line.contains("state mse"), "unexpected replicate output: {}", line);
    run_in(
        ws,
        &[
            "attack", "transfer", "--model", "victim_r.isw", "--replica", "replica.isw",
            "--dataset", "med.jsonl", "--layer", "1", "--limit", "2", "--steps", "10",
            "--output-dir", "out_tr", "--seed", "3",
        ],
    );
    assert!(ws.join("out_tr/report.csv").exists());
}

#[test]
fn inverter_trains_and_generates_through_the_cli() {
    let ws = workspace();
    run_in(
        ws,
        &[
            "train-inverter", "--model", "base.isw", "--dataset", "med.jsonl", "--layer", "1",
            "--d-enc", "16", "--no-projection", "--epochs", "2", "--batch", "4", "--lr",
            "2e-3", "--limit", "10", "--max-seq-len", "48", "--out", "inv.bin",
        ],
    );
    run_in(
        ws,
        &[
            "attack", "generate", "--model", "base.isw", "--inverter", "inv.bin", "--dataset",
            "med.jsonl", "--layer", "1", "--limit", "2", "--output-dir", "out_gen", "--seed",
            "4",
        ],
    );
    let csv = std::fs::read_to_string(ws.join("out_gen/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per sample");
}

#[test]
fn defend_transforms_frames_and_weights() {
    let ws = workspace();
    run_in(ws, &["defend", "quantize", "--model", "base.isw", "--bits", "8", "--out", "b8.isw"]);
    run_in(
        ws,
        &[
            "defend", "dropout", "--states", "frames.isb", "--p", "0.2", "--seed", "11",
            "--out", "dropped.isb",
        ],
    );
    run_in(
        ws,
        &[
            "defend", "laplace", "--states", "frames.isb", "--epsilon", "100", "--clip", "1",
            "--seed", "11", "--out", "lap.isb",
        ],
    );
    run_in(
        ws,
        &[
            "defend", "gaussian-embed", "--model", "base.isw", "--dataset", "med.jsonl",
            "--layer", "1", "--sigma", "0.05", "--seed", "11", "--out", "gauss.isb",
        ],
    );
    for f in ["b8.isw", "dropped.isb", "lap.isb", "gauss.isb"] {
        assert!(ws.join(f).exists(), "{} missing", f);
    }
}

#[test]
fn exit_codes_distinguish_partial_from_fatal() {
    let ws = workspace();
    // missing model: nothing to report, fatal
    assert_eq!(
        exit_code(
            ws,
            &["attack", "er", "--model", "nosuch.isw", "--dataset", "med.jsonl", "--layer", "1",
              "--output-dir", "out_x"],
        ),
        2
    );
    // one empty text fails its sample, the rest survive: partial
    std::fs::write(
        ws.join("holey.jsonl"),
        "{\"text\": \"pt resting comfortably\"}\n{\"text\": \"\"}\n",
    )
    .unwrap();
    assert_eq!(
        exit_code(
            ws,
            &["attack", "er", "--model", "base.isw", "--dataset", "holey.jsonl", "--layer", "1",
              "--steps", "5", "--output-dir", "out_part", "--seed", "1"],
        ),
        1
    );
    let csv = std::fs::read_to_string(ws.join("out_part/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "only the healthy sample lands in the partial report");
}
