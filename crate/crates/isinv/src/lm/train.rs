//! Language-model training: sample random token windows from a joined corpus
//! stream, take AdamW steps on the mean window cross-entropy, and track
//! held-out loss.

use super::{Bind, MicroLM, MicroLMConfig, ModelVars, Tokenizer};
use crate::optim::AdamW;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Tokens per training window (the model predicts each one from its
    /// predecessors, so a window consumes seq_len + 1 stream tokens).
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate held-out loss every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch: 8,
            seq_len: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainStats {
    /// Mean window cross-entropy at every step.
    pub losses: Vec<f64>,
    /// (step, held-out cross-entropy) at each evaluation point.
    pub heldout: Vec<(usize, f64)>,
    pub final_heldout: f64,
    pub tokens_seen: usize,
}

impl TrainStats {
    pub fn final_perplexity(&self) -> f64 {
        self.final_heldout.exp()
    }
}

/// Deterministic train/held-out split: every tenth text is held out. A corpus
/// too small to yield a held-out text gives up its last one instead.
pub fn holdout_split(corpus: &[String]) -> (Vec<String>, Vec<String>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, text) in corpus.iter().enumerate() {
        if i % 10 == 9 {
            held.push(text.clone());
        } else {
            train.push(text.clone());
        }
    }
    if held.is_empty() && train.len() >= 2 {
        held.push(train.pop().expect("train nonempty"));
    }
    (train, held)
}

/// Train a tokenizer and model from scratch. The configured vocabulary size is
/// an upper bound: a corpus without enough repeated pairs yields fewer merges,
/// and the model is sized to what the tokenizer actually learned.
pub fn train_lm(
    cfg: MicroLMConfig,
    tcfg: &TrainConfig,
    corpus: &[String],
) -> Result<(MicroLM, TrainStats)> {
    let tokenizer = Tokenizer::train(corpus, cfg.vocab_size)?;
    let mut cfg = cfg;
    cfg.vocab_size = tokenizer.vocab_size();
    let model = MicroLM::init(cfg, tokenizer)?;
    run(model, tcfg, corpus)
}

/// Continue training an existing model (tokenizer kept) on a new corpus with
/// fresh optimizer state.
pub fn finetune_lm(
    model: &MicroLM,
    tcfg: &TrainConfig,
    corpus: &[String],
) -> Result<(MicroLM, TrainStats)> {
    run(model.clone(), tcfg, corpus)
}

fn run(mut model: MicroLM, tcfg: &TrainConfig, corpus: &[String]) -> Result<(MicroLM, TrainStats)> {
    if corpus.len() < 2 {
        return Err(Error::Corpus("training needs at least 2 texts".into()));
    }
    if tcfg.batch == 0 || tcfg.steps == 0 {
        return Err(Error::Config("steps and batch must be positive".into()));
    }
    if tcfg.seq_len == 0 || tcfg.seq_len > model.cfg.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} outside 1..={}",
            tcfg.seq_len, model.cfg.max_seq_len
        )));
    }
    let (train_texts, held_texts) = holdout_split(corpus);
    let stream = model.tokenizer.tokenize(&train_texts.join("\n"));
    let window = tcfg.seq_len + 1;
    if stream.len() < window {
        return Err(Error::Corpus(format!(
            "training stream has {} tokens, needs at least {}",
            stream.len(),
            window
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let mut stats = TrainStats {
        losses: Vec::with_capacity(tcfg.steps),
        heldout: Vec::new(),
        final_heldout: f64::NAN,
        tokens_seen: 0,
    };
    // Last weights that scored a finite loss; returned on divergence.
    let mut last_good = model.clone();

    for step in 0..tcfg.steps {
        let starts: Vec<usize> =
            (0..tcfg.batch).map(|_| rng.gen_range(0..=stream.len() - window)).collect();
        let outcome = step_once(&model, &stream, &starts, window);
        let (loss, grads) = match outcome {
            Ok(pair) => pair,
            // Overflow inside the forward or loss means the previous update
            // blew the weights up; report it with the last usable model.
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged { step, last_good: Box::new(last_good) })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, last_good: Box::new(last_good) });
        }
        stats.losses.push(loss);
        stats.tokens_seen += tcfg.batch * tcfg.seq_len;
        last_good = model.clone();

        {
            let mut params = model.named_tensors_mut();
            let mut prefs: Vec<&mut crate::tensor::Tensor> =
                params.iter_mut().map(|(_, t)| &mut **t).collect();
            let grefs: Vec<&crate::tensor::Tensor> = grads.iter().collect();
            opt.step(&mut prefs, &grefs)?;
        }

        if tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0 && step + 1 < tcfg.steps {
            stats.heldout.push((step + 1, model.eval_loss(&held_texts)?));
        }
    }

    stats.final_heldout = model.eval_loss(&held_texts)?;
    stats.heldout.push((tcfg.steps, stats.final_heldout));
    Ok((model, stats))
}

/// One forward/backward over a batch of windows. Returns the mean loss value
/// and gradients in `named_tensors_mut` order.
fn step_once(
    model: &MicroLM,
    stream: &[u32],
    starts: &[usize],
    window: usize,
) -> Result<(f64, Vec<crate::tensor::Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, model.cfg.n_layers, Bind::Trainable)?;
    let mut acc: Option<Var> = None;
    for &start in starts {
        let loss = model.lm_loss(&mut tape, &vars, &stream[start..start + window])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, loss)?,
            None => loss,
        });
    }
    let total = acc.expect("batch is nonempty");
    let mean = tape.scale(total, 1.0 / starts.len() as f64)?;
    let loss_val = tape.scalar_value(mean);

    let wrt = ordered_vars(&vars);
    let grads = tape.grad_of(mean, &wrt)?;
    Ok((loss_val, grads.into_iter().map(|g| g.tensor).collect()))
}

/// Bound weight handles in exactly the order `named_tensors_mut` yields them.
fn ordered_vars(vars: &ModelVars) -> Vec<Var> {
    let mut out = vec![vars.embedding];
    for l in &vars.layers {
        out.push(l.attn_norm);
        out.push(l.wq);
        out.push(l.wk);
        out.push(l.wv);
        out.extend(l.bq);
        out.extend(l.bk);
        out.extend(l.bv);
        out.push(l.wo);
        out.push(l.ffn_norm);
        out.push(l.w_gate);
        out.push(l.w_up);
        out.push(l.w_down);
    }
    out.extend(vars.final_norm);
    out.extend(vars.head);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Style};

    fn tiny_cfg() -> MicroLMConfig {
        MicroLMConfig {
            vocab_size: 512,
            d_in: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 2.0,
            max_seq_len: 64,
            ..MicroLMConfig::default()
        }
    }

    fn tiny_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig { steps, batch: 4, seq_len: 16, ..TrainConfig::default() }
    }

    #[test]
    fn holdout_takes_every_tenth() {
        let corpus: Vec<String> = (0..25).map(|i| format!("text {}", i)).collect();
        let (train, held) = holdout_split(&corpus);
        assert_eq!(train.len(), 23);
        assert_eq!(held, vec!["text 9".to_string(), "text 19".to_string()]);
    }

    #[test]
    fn holdout_never_empty_for_small_corpora() {
        let corpus = vec!["alpha".to_string(), "beta".to_string()];
        let (train, held) = holdout_split(&corpus);
        assert_eq!(train, vec!["alpha".to_string()]);
        assert_eq!(held, vec!["beta".to_string()]);
    }

    #[test]
    fn loss_decreases_on_templated_text() {
        let corpus = synth_corpus(Style::Medical, 30, 11);
        let (_, stats) = train_lm(tiny_cfg(), &tiny_train_cfg(40), &corpus).unwrap();
        let early: f64 = stats.losses[..5].iter().sum::<f64>() / 5.0;
        let late: f64 = stats.losses[stats.losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(late < early, "no progress: early {} late {}", early, late);
        assert!(stats.final_heldout.is_finite());
        assert_eq!(stats.losses.len(), 40);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let corpus = synth_corpus(Style::Code, 20, 3);
        let (a, sa) = train_lm(tiny_cfg(), &tiny_train_cfg(5), &corpus).unwrap();
        let (b, sb) = train_lm(tiny_cfg(), &tiny_train_cfg(5), &corpus).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(sa.losses, sb.losses);
    }

    #[test]
    fn finetune_moves_weights_and_keeps_tokenizer() {
        let base_corpus = synth_corpus(Style::Medical, 20, 5);
        let (base, _) = train_lm(tiny_cfg(), &tiny_train_cfg(3), &base_corpus).unwrap();
        let variant_corpus = synth_corpus(Style::Code, 20, 6);
        let (tuned, _) = finetune_lm(&base, &tiny_train_cfg(3), &variant_corpus).unwrap();
        assert_ne!(base.fingerprint(), tuned.fingerprint());
        assert_eq!(base.tokenizer, tuned.tokenizer);
        assert_eq!(base.cfg, tuned.cfg);
    }

    #[test]
    fn absurd_lr_reports_divergence_with_usable_model() {
        let corpus = synth_corpus(Style::Medical, 20, 7);
        let tcfg = TrainConfig { lr: 1e160, ..tiny_train_cfg(10) };
        match train_lm(tiny_cfg(), &tcfg, &corpus) {
            Err(Error::Diverged { step, last_good }) => {
                assert!(step < 10);
                for (name, t) in last_good.named_tensors() {
                    assert!(t.is_finite(), "{} not finite in recovered model", name);
                }
                assert!(last_good.eval_loss(&corpus).unwrap().is_finite());
            }
            other => panic!("expected divergence, got {:?}", other.map(|(m, _)| m.fingerprint())),
        }
    }

    #[test]
    fn rejects_undersized_corpus_and_bad_windows() {
        let one = vec!["only".to_string()];
        assert!(train_lm(tiny_cfg(), &tiny_train_cfg(2), &one).is_err());

        let corpus = synth_corpus(Style::Code, 12, 1);
        let bad = TrainConfig { seq_len: 0, ..tiny_train_cfg(2) };
        assert!(train_lm(tiny_cfg(), &bad, &corpus).is_err());
        let too_long = TrainConfig { seq_len: 65, ..tiny_train_cfg(2) };
        assert!(train_lm(tiny_cfg(), &too_long, &corpus).is_err());
    }
}
