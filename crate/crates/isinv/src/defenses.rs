//! Defenses applied where internal states leave the model: dropout and
//! Laplace noise perturb the released states, Gaussian noise blurs the input
//! embeddings before the forward pass, and quantization coarsens the model
//! weights themselves.
//!
//! Every defense is a pure function of (input, parameters, seed): the same
//! seed reproduces the same perturbation bit for bit, and the caller's input
//! is never mutated. Laplace noise is generated by inverse-CDF transform of
//! one shared uniform draw per entry, so a larger privacy budget shrinks each
//! noise value along the same sample path instead of redrawing. The whole
//! state matrix is treated as a single release with entrywise noise (one
//! plausible reading; per-row budgets would compose differently).

use crate::lm::{Bind, InternalStates, MicroLM};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    Dropout { p: f64 },
    GaussianEmbed { sigma: f64 },
    #[serde(rename = "laplace")]
    LaplaceDp { epsilon: f64, clip: f64 },
    Quantize { bits: u8 },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::Dropout { p } => {
                if (0.0..1.0).contains(&p) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("dropout p {} outside [0,1)", p)))
                }
            }
            DefenseConfig::GaussianEmbed { sigma } => {
                if sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("gaussian sigma {} negative", sigma)))
                }
            }
            DefenseConfig::LaplaceDp { epsilon, clip } => {
                if epsilon > 0.0 && clip > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "laplace needs epsilon > 0 and clip > 0, got {} and {}",
                        epsilon, clip
                    )))
                }
            }
            DefenseConfig::Quantize { bits } => {
                if bits == 4 || bits == 8 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("quantization supports 4 or 8 bits, got {}", bits)))
                }
            }
        }
    }

    /// Short label for report rows.
    pub fn label(&self) -> String {
        match self {
            DefenseConfig::None => "none".into(),
            DefenseConfig::Dropout { p } => format!("dropout(p={})", p),
            DefenseConfig::GaussianEmbed { sigma } => format!("gaussian(sigma={})", sigma),
            DefenseConfig::LaplaceDp { epsilon, clip } => {
                format!("laplace(eps={},C={})", epsilon, clip)
            }
            DefenseConfig::Quantize { bits } => format!("quantize({}bit)", bits),
        }
    }
}

/// Zero each state entry independently with probability `p` and scale the
/// survivors by 1/(1−p), keeping the expectation unchanged.
pub fn defend_dropout(h: &InternalStates, p: f64, seed: u64) -> Result<InternalStates> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout p {} outside [0,1)", p)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - p);
    let mut out = h.clone();
    for v in out.states.data_mut() {
        if rng.gen::<f64>() < p {
            *v = 0.0;
        } else {
            *v *= keep_scale;
        }
    }
    Ok(out)
}

/// Add i.i.d. Gaussian noise of standard deviation `sigma` to input
/// embeddings.
pub fn defend_gaussian_embed(w: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("gaussian sigma {} negative", sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = rand_distr::Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = w.clone();
    for v in out.data_mut() {
        *v += rng.sample(dist);
    }
    Ok(out)
}

/// Clip every state entry to [−C, C], then add Laplace noise with scale 2C/ε
/// (sensitivity of a clipped entry is 2C).
pub fn defend_laplace_dp(h: &InternalStates, epsilon: f64, clip: f64, seed: u64) -> Result<InternalStates> {
    if !(epsilon > 0.0) || !(clip > 0.0) {
        return Err(Error::Config("laplace needs epsilon > 0 and clip > 0".into()));
    }
    let scale = 2.0 * clip / epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = h.clone();
    for v in out.states.data_mut() {
        let clipped = v.clamp(-clip, clip);
        *v = clipped + laplace_draw(&mut rng, scale);
    }
    Ok(out)
}

/// Inverse-CDF Laplace sample: scale times a fixed transform of one uniform,
/// so the same rng state yields proportional noise across scales.
fn laplace_draw(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.gen::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Symmetric per-tensor uniform quantize-dequantize of every weight tensor.
/// An all-zero tensor stays untouched (its quantization step would be zero).
pub fn defend_quantize(model: &MicroLM, bits: u8) -> Result<MicroLM> {
    if bits != 4 && bits != 8 {
        return Err(Error::Config(format!("quantization supports 4 or 8 bits, got {}", bits)));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let mut out = model.clone();
    for (_, t) in out.named_tensors_mut() {
        let max_abs = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs == 0.0 {
            continue;
        }
        let step = max_abs / levels;
        for v in t.data_mut() {
            *v = (*v / step).round().clamp(-levels, levels) * step;
        }
    }
    Ok(out)
}

/// Capture internal states with Gaussian-blurred input embeddings: the
/// defense variant of `MicroLM::capture_is`.
pub fn capture_is_gaussian(
    model: &MicroLM,
    text: &str,
    layer: usize,
    sigma: f64,
    seed: u64,
) -> Result<InternalStates> {
    if layer == 0 || layer > model.cfg.n_layers {
        return Err(Error::Config(format!("layer {} outside 1..={}", layer, model.cfg.n_layers)));
    }
    let mut ids = model.tokenizer.tokenize(text);
    if ids.is_empty() {
        return Err(Error::Corpus("cannot capture states of an empty token sequence".into()));
    }
    let truncated = ids.len() > model.cfg.max_seq_len;
    ids.truncate(model.cfg.max_seq_len);
    let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();

    let mut rows = Vec::with_capacity(ids.len());
    for &id in &ids {
        rows.push(model.embedding.row(id).to_vec());
    }
    let w = defend_gaussian_embed(&Tensor::from_rows(&rows)?, sigma, seed)?;

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, layer, Bind::Frozen)?;
    let wv = tape.constant(&w)?;
    let out = model.forward_prefix(&mut tape, &vars, wv, layer)?;
    Ok(InternalStates {
        layer,
        states: tape.value_tensor(out),
        model_fingerprint: model.fingerprint(),
        truncated,
    })
}

/// Held-out next-token loss when the input embeddings are blurred with the
/// given noise level: the utility side of the Gaussian defense trade-off.
pub fn gaussian_heldout_loss(
    model: &MicroLM,
    texts: &[String],
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (ti, text) in texts.iter().enumerate() {
        let ids = model.tokenizer.tokenize(text);
        if ids.len() < 2 {
            continue;
        }
        let ids: Vec<usize> =
            ids.iter().take(model.cfg.max_seq_len).map(|&t| t as usize).collect();
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];

        let mut rows = Vec::with_capacity(inputs.len());
        for &id in inputs {
            rows.push(model.embedding.row(id).to_vec());
        }
        let noisy = defend_gaussian_embed(
            &Tensor::from_rows(&rows)?,
            sigma,
            crate::util::mix_seed(seed, ti as u64),
        )?;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, model.cfg.n_layers, Bind::Frozen)?;
        let wv = tape.constant(&noisy)?;
        let logits = model.logits_from_embeddings(&mut tape, &vars, wv)?;
        let loss = tape.cross_entropy_rows(logits, targets)?;
        total += tape.scalar_value(loss) * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::Corpus("no scorable text".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Style};
    use crate::lm::{train_lm, MicroLMConfig, TrainConfig};

    fn states(seed: u64) -> InternalStates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InternalStates {
            layer: 1,
            states: Tensor::randn(6, 8, 2.0, &mut rng),
            model_fingerprint: 42,
            truncated: false,
        }
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let h = states(1);
        let out = defend_dropout(&h, 0.0, 7).unwrap();
        assert_eq!(out.states.data(), h.states.data());
    }

    #[test]
    fn dropout_survivors_are_exactly_rescaled() {
        let h = states(2);
        let p = 0.4;
        let out = defend_dropout(&h, p, 3).unwrap();
        let mut zeroed = 0;
        for (o, i) in out.states.data().iter().zip(h.states.data()) {
            if *o == 0.0 {
                zeroed += 1;
            } else {
                assert_eq!(*o, i / (1.0 - p));
            }
        }
        assert!(zeroed > 0, "p=0.4 over 48 entries should drop some");
        // input untouched
        assert!(h.states.data().iter().all(|v| *v != 0.0));
    }

    #[test]
    fn dropout_is_unbiased_over_many_draws() {
        let h = InternalStates {
            layer: 1,
            states: Tensor::full(1, 1, 2.0),
            model_fingerprint: 0,
            truncated: false,
        };
        let p = 0.3;
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|s| defend_dropout(&h, p, s as u64).unwrap().states.data()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0).abs() < 0.02, "mean {} drifted from 2.0", mean);
    }

    #[test]
    fn dropout_rejects_full_drop() {
        assert!(defend_dropout(&states(3), 1.0, 0).is_err());
        assert!(defend_dropout(&states(3), -0.1, 0).is_err());
    }

    #[test]
    fn gaussian_zero_sigma_is_identity() {
        let w = Tensor::full(3, 4, 1.5);
        let out = defend_gaussian_embed(&w, 0.0, 9).unwrap();
        assert_eq!(out.data(), w.data());
    }

    #[test]
    fn gaussian_sample_variance_matches_sigma() {
        let w = Tensor::zeros(250, 400); // 1e5 entries
        let sigma = 0.1;
        let out = defend_gaussian_embed(&w, sigma, 11).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(
            (var - sigma * sigma).abs() < 0.02 * sigma * sigma,
            "var {} vs {}",
            var,
            sigma * sigma
        );
    }

    #[test]
    fn laplace_huge_epsilon_reduces_to_clipping() {
        let h = states(4);
        let clip = 1.0;
        let out = defend_laplace_dp(&h, 1e12, clip, 5).unwrap();
        for (o, i) in out.states.data().iter().zip(h.states.data()) {
            assert!((o - i.clamp(-clip, clip)).abs() < 1e-6);
            assert!(o.abs() <= clip + 1e-6);
        }
    }

    #[test]
    fn laplace_noise_scale_matches_mean_absolute_deviation() {
        let h = InternalStates {
            layer: 1,
            states: Tensor::zeros(250, 400),
            model_fingerprint: 0,
            truncated: false,
        };
        let (eps, clip) = (2.0, 1.0);
        let want = 2.0 * clip / eps; // Laplace mean |x| equals its scale
        let out = defend_laplace_dp(&h, eps, clip, 13).unwrap();
        let mad: f64 =
            out.states.data().iter().map(|v| v.abs()).sum::<f64>() / out.states.len() as f64;
        assert!((mad - want).abs() < 0.03 * want, "mad {} vs scale {}", mad, want);
    }

    #[test]
    fn laplace_shares_the_sample_path_across_budgets() {
        let h = states(5);
        let small = defend_laplace_dp(&h, 1.0, 1.0, 17).unwrap();
        let large = defend_laplace_dp(&h, 10.0, 1.0, 17).unwrap();
        for ((s, l), orig) in
            small.states.data().iter().zip(large.states.data()).zip(h.states.data())
        {
            let clipped = orig.clamp(-1.0, 1.0);
            let (ns, nl) = (s - clipped, l - clipped);
            assert!(nl.abs() < ns.abs(), "larger budget must shrink noise: {} vs {}", nl, ns);
            assert_eq!(ns.signum(), nl.signum());
        }
    }

    #[test]
    fn laplace_is_seed_deterministic_and_pure() {
        let h = states(6);
        let before = h.states.clone();
        let a = defend_laplace_dp(&h, 2.0, 0.5, 19).unwrap();
        let b = defend_laplace_dp(&h, 2.0, 0.5, 19).unwrap();
        assert_eq!(a.states.data(), b.states.data());
        assert_eq!(h.states.data(), before.data());
    }

    #[test]
    fn quantize_bounds_per_tensor_error() {
        let corpus = synth_corpus(Style::Code, 12, 1);
        let cfg = MicroLMConfig {
            d_in: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2.0,
            max_seq_len: 32,
            ..MicroLMConfig::default()
        };
        let tcfg = TrainConfig { steps: 2, batch: 2, seq_len: 8, ..TrainConfig::default() };
        let model = train_lm(cfg, &tcfg, &corpus).unwrap().0;
        let q8 = defend_quantize(&model, 8).unwrap();
        for ((name, a), (_, b)) in model.named_tensors().iter().zip(q8.named_tensors().iter()) {
            let max_abs = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = a.max_abs_diff(b);
            assert!(err <= max_abs / 127.0 + 1e-15, "{}: err {} bound {}", name, err, max_abs / 127.0);
        }
        assert_ne!(model.fingerprint(), q8.fingerprint());

        // downstream states actually move
        let h = model.capture_is("x = 1", 1).unwrap();
        let hq = q8.capture_is("x = 1", 1).unwrap();
        assert!(h.states.max_abs_diff(&hq.states) > 0.0);

        let q4 = defend_quantize(&model, 4).unwrap();
        let e8 = model.embedding.max_abs_diff(&q8.embedding);
        let e4 = model.embedding.max_abs_diff(&q4.embedding);
        assert!(e4 > e8, "4-bit should be coarser: {} vs {}", e4, e8);
    }

    #[test]
    fn quantize_keeps_zero_tensors_zero_and_rejects_odd_bits() {
        let model = MicroLM::init(
            MicroLMConfig {
                d_in: 16,
                n_layers: 1,
                n_heads: 2,
                ffn_mult: 2.0,
                qkv_bias: true,
                max_seq_len: 32,
                vocab_size: 256,
                ..MicroLMConfig::default()
            },
            crate::lm::Tokenizer::bytes_only(),
        )
        .unwrap();
        // fresh biases are all-zero tensors
        let q = defend_quantize(&model, 8).unwrap();
        assert!(q.layers[0].bq.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(defend_quantize(&model, 5).is_err());
        assert!(defend_quantize(&model, 16).is_err());
    }

    #[test]
    fn gaussian_utility_degrades_with_noise() {
        let corpus = synth_corpus(Style::Medical, 30, 8);
        let cfg = MicroLMConfig {
            d_in: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 2.0,
            max_seq_len: 48,
            ..MicroLMConfig::default()
        };
        let tcfg = TrainConfig { steps: 30, batch: 4, seq_len: 16, ..TrainConfig::default() };
        let (model, _) = train_lm(cfg, &tcfg, &corpus).unwrap();
        let held: Vec<String> = corpus[..4].to_vec();
        let l0 = gaussian_heldout_loss(&model, &held, 0.0, 1).unwrap();
        let l1 = gaussian_heldout_loss(&model, &held, 0.05, 1).unwrap();
        let l2 = gaussian_heldout_loss(&model, &held, 0.1, 1).unwrap();
        assert_eq!(l0, model.eval_loss(&held).unwrap());
        assert!(l0 <= l1 && l1 <= l2, "loss not monotone: {} {} {}", l0, l1, l2);
    }

    #[test]
    fn config_validation_covers_all_kinds() {
        assert!(DefenseConfig::Dropout { p: 0.5 }.validate().is_ok());
        assert!(DefenseConfig::Dropout { p: 1.0 }.validate().is_err());
        assert!(DefenseConfig::GaussianEmbed { sigma: -0.1 }.validate().is_err());
        assert!(DefenseConfig::LaplaceDp { epsilon: 0.0, clip: 1.0 }.validate().is_err());
        assert!(DefenseConfig::LaplaceDp { epsilon: 1.0, clip: 0.0 }.validate().is_err());
        assert!(DefenseConfig::Quantize { bits: 6 }.validate().is_err());
        assert!(DefenseConfig::Quantize { bits: 4 }.validate().is_ok());
        assert!(DefenseConfig::None.validate().is_ok());
    }
}
