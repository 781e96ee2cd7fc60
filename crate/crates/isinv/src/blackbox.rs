//! Attacks that never touch the serving model's weights. The adversary sees
//! only (input, internal-state) pairs it collected itself, and builds from
//! them: an autoencoder ensemble that identifies which known base model a
//! state matrix came from, a replica distilled from the base to stand in for
//! the victim, gradient attacks transferred onto that replica, and a
//! sequence-to-sequence inverter that generates text straight from states.
//!
//! Detection feeds on mean-pooled state vectors (one row per text), which
//! gives fixed-width autoencoder inputs regardless of sequence length. Each
//! ensemble member carries its own acceptance threshold, calibrated here as
//! the 99th percentile of the member's held-out reconstruction error; ties
//! between members resolve toward the earlier registration.

use crate::attacks::{attack_tbs, AttackConfig, InversionResult};
use crate::lm::{causal_mask, Bind, InternalStates, MicroLM};
use crate::optim::AdamW;
use crate::store::{read_container, write_container, MAGIC_DETECTOR, MAGIC_INVERTER};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::mix_seed;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

// ---------------------------------------------------------------------------
// pooled datasets

/// Mean over the sequence axis: one fixed-width vector per state matrix.
pub fn pool_states(states: &Tensor) -> Vec<f64> {
    let (n, d) = states.dims();
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(states.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n.max(1) as f64;
    }
    out
}

/// Capture and pool states for every text: the standard probe matrix.
pub fn pooled_dataset(model: &MicroLM, texts: &[String], layer: usize) -> Result<Tensor> {
    if texts.is_empty() {
        return Err(Error::Corpus("pooled dataset needs at least one text".into()));
    }
    let mut rows = Vec::with_capacity(texts.len());
    for text in texts {
        rows.push(pool_states(&model.capture_is(text, layer)?.states));
    }
    Tensor::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// autoencoder

/// Three affine layers (tanh, tanh, linear) squeezed through a bottleneck;
/// reconstruction error is the model-identification signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    pub epochs_trained: usize,
}

struct AeVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w3: Var,
    b3: Var,
}

fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Result<Var> {
    if trainable {
        let mut c = t.clone();
        c.requires_grad = true;
        tape.leaf(&c)
    } else {
        tape.constant(t)
    }
}

impl Autoencoder {
    fn init(d_in: usize, bottleneck: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || bottleneck == 0 || bottleneck > d_in {
            return Err(Error::Config(format!(
                "bottleneck {} outside 1..={}",
                bottleneck, d_in
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Autoencoder {
            w1: Tensor::randn(d_in, bottleneck, 1.0 / (d_in as f64).sqrt(), &mut rng),
            b1: Tensor::zeros(1, bottleneck),
            w2: Tensor::randn(bottleneck, bottleneck, 1.0 / (bottleneck as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(1, bottleneck),
            w3: Tensor::randn(bottleneck, d_in, 1.0 / (bottleneck as f64).sqrt(), &mut rng),
            b3: Tensor::zeros(1, d_in),
            epochs_trained: 0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w1.cols()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<AeVars> {
        Ok(AeVars {
            w1: bind_tensor(tape, &self.w1, trainable)?,
            b1: bind_tensor(tape, &self.b1, trainable)?,
            w2: bind_tensor(tape, &self.w2, trainable)?,
            b2: bind_tensor(tape, &self.b2, trainable)?,
            w3: bind_tensor(tape, &self.w3, trainable)?,
            b3: bind_tensor(tape, &self.b3, trainable)?,
        })
    }

    fn forward(tape: &mut Tape, v: &AeVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, v.w1)?;
        let h = tape.add_row(h, v.b1)?;
        let h = tape.tanh(h)?;
        let h = tape.matmul(h, v.w2)?;
        let h = tape.add_row(h, v.b2)?;
        let h = tape.tanh(h)?;
        let h = tape.matmul(h, v.w3)?;
        tape.add_row(h, v.b3)
    }

    pub fn reconstruct(&self, data: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(data)?;
        let out = Self::forward(&mut tape, &vars, x)?;
        Ok(tape.value_tensor(out))
    }

    /// Root-mean-square reconstruction error per row.
    pub fn rmse_rows(&self, data: &Tensor) -> Result<Vec<f64>> {
        let recon = self.reconstruct(data)?;
        let (n, d) = data.dims();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let sq: f64 = data
                .row(i)
                .iter()
                .zip(recon.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.push((sq / d as f64).sqrt());
        }
        Ok(out)
    }

    /// Mean per-row RMSE; invariant to row order.
    pub fn rmse(&self, data: &Tensor) -> Result<f64> {
        let rows = self.rmse_rows(data)?;
        Ok(rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

const AE_LR: f64 = 1e-2;
const AE_BATCH: usize = 16;

/// Fit an autoencoder to pooled state rows. Zero epochs returns the seeded
/// random initialization untouched, the baseline the trained error is judged
/// against.
pub fn train_autoencoder(
    data: &Tensor,
    epochs: usize,
    bottleneck: usize,
    seed: u64,
) -> Result<Autoencoder> {
    let (n, d) = data.dims();
    if n == 0 {
        return Err(Error::Corpus("autoencoder needs at least one training row".into()));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("autoencoder training data"));
    }
    let mut ae = Autoencoder::init(d, bottleneck, seed)?;
    let mut opt = AdamW::new(AE_LR, 0.0);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(AE_BATCH) {
            let mut tape = Tape::new();
            let vars = ae.bind(&mut tape, true)?;
            let table = tape.constant(data)?;
            let x = tape.embed_rows(table, chunk)?;
            let recon = Autoencoder::forward(&mut tape, &vars, x)?;
            let diff = tape.sub(recon, x)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean_all(sq)?;
            let wrt = [vars.w1, vars.b1, vars.w2, vars.b2, vars.w3, vars.b3];
            let grads: Vec<Tensor> =
                tape.grad_of(loss, &wrt)?.into_iter().map(|g| g.tensor).collect();
            let grefs: Vec<&Tensor> = grads.iter().collect();
            opt.step(
                &mut [&mut ae.w1, &mut ae.b1, &mut ae.w2, &mut ae.b2, &mut ae.w3, &mut ae.b3],
                &grefs,
            )?;
        }
        ae.epochs_trained = epoch + 1;
    }
    Ok(ae)
}

// ---------------------------------------------------------------------------
// ensemble detection

pub const INDEPENDENT: &str = "independent";

#[derive(Debug, Clone)]
pub struct DetectorMember {
    pub label: String,
    pub ae: Autoencoder,
    /// Acceptance threshold on mean probe RMSE.
    pub tau: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleDetector {
    members: Vec<DetectorMember>,
}

impl EnsembleDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_member(
        &mut self,
        label: impl Into<String>,
        ae: Autoencoder,
        tau: f64,
    ) -> Result<()> {
        let label = label.into();
        if label == INDEPENDENT {
            return Err(Error::Config(format!("label {:?} is reserved", INDEPENDENT)));
        }
        if self.members.iter().any(|m| m.label == label) {
            return Err(Error::Config(format!("duplicate detector label {:?}", label)));
        }
        if let Some(first) = self.members.first() {
            if first.ae.d_in() != ae.d_in() {
                return Err(Error::Config(format!(
                    "member width {} differs from ensemble width {}",
                    ae.d_in(),
                    first.ae.d_in()
                )));
            }
        }
        if !(tau >= 0.0) {
            return Err(Error::Config(format!("threshold {} must be >= 0", tau)));
        }
        self.members.push(DetectorMember { label, ae, tau });
        Ok(())
    }

    pub fn members(&self) -> &[DetectorMember] {
        &self.members
    }
}

/// Nearest-rank percentile of the member's own held-out errors; rows it
/// should accept must mostly fall below this.
pub fn calibrate_tau(ae: &Autoencoder, heldout: &Tensor) -> Result<f64> {
    let mut errs = ae.rmse_rows(heldout)?;
    errs.sort_by(|a, b| a.total_cmp(b));
    let n = errs.len();
    let idx = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    Ok(errs[idx])
}

/// Label of the lowest-error member whose error clears its own threshold, or
/// `INDEPENDENT` when none does. Earlier-registered members win exact ties.
pub fn detect_model_type(probe: &Tensor, detector: &EnsembleDetector) -> Result<String> {
    if probe.rows() == 0 {
        return Err(Error::Attack("empty probe".into()));
    }
    if !probe.is_finite() {
        return Err(Error::NonFinite("detection probe"));
    }
    let mut best: Option<(f64, &str)> = None;
    for m in &detector.members {
        let r = m.ae.rmse(probe)?;
        if r <= m.tau && best.map_or(true, |(br, _)| r < br) {
            best = Some((r, &m.label));
        }
    }
    Ok(best.map_or(INDEPENDENT.into(), |(_, l)| l.into()))
}

// ---------------------------------------------------------------------------
// detector persistence

#[derive(serde::Serialize, serde::Deserialize)]
struct MemberMeta {
    label: String,
    tau: f64,
    epochs_trained: usize,
}

pub fn save_detector(path: impl AsRef<Path>, detector: &EnsembleDetector) -> Result<()> {
    let meta: Vec<MemberMeta> = detector
        .members
        .iter()
        .map(|m| MemberMeta {
            label: m.label.clone(),
            tau: m.tau,
            epochs_trained: m.ae.epochs_trained,
        })
        .collect();
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (i, m) in detector.members.iter().enumerate() {
        tensors.push((format!("m{}.w1", i), &m.ae.w1));
        tensors.push((format!("m{}.b1", i), &m.ae.b1));
        tensors.push((format!("m{}.w2", i), &m.ae.w2));
        tensors.push((format!("m{}.b2", i), &m.ae.b2));
        tensors.push((format!("m{}.w3", i), &m.ae.w3));
        tensors.push((format!("m{}.b3", i), &m.ae.b3));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut f, &MAGIC_DETECTOR, &serde_json::to_string(&meta)?, &tensors)?;
    std::io::Write::flush(&mut f)?;
    Ok(())
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<EnsembleDetector> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (meta, tensors) = read_container(&mut f, &MAGIC_DETECTOR)?;
    let meta: Vec<MemberMeta> = serde_json::from_str(&meta)?;
    let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut det = EnsembleDetector::new();
    for (i, m) in meta.into_iter().enumerate() {
        let mut take = |field: &str| {
            map.remove(&format!("m{}.{}", i, field))
                .ok_or_else(|| Error::Format(format!("member {} missing {}", i, field)))
        };
        let ae = Autoencoder {
            w1: take("w1")?,
            b1: take("b1")?,
            w2: take("w2")?,
            b2: take("b2")?,
            w3: take("w3")?,
            b3: take("b3")?,
            epochs_trained: m.epochs_trained,
        };
        let (d, b) = ae.w1.dims();
        let want = [
            (ae.b1.dims(), (1, b)),
            (ae.w2.dims(), (b, b)),
            (ae.b2.dims(), (1, b)),
            (ae.w3.dims(), (b, d)),
            (ae.b3.dims(), (1, d)),
        ];
        if want.iter().any(|(got, expect)| got != expect) {
            return Err(Error::Format(format!("member {} has inconsistent shapes", i)));
        }
        det.add_member(m.label, ae, m.tau)?;
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor {}", extra)));
    }
    Ok(det)
}

// ---------------------------------------------------------------------------
// derivative-model construction

/// Weight-space interpolation of two same-architecture models: the "merged"
/// derivative class. `alpha` = 0 returns `a`, 1 returns `b`.
pub fn merge_models(a: &MicroLM, b: &MicroLM, alpha: f64) -> Result<MicroLM> {
    if a.cfg != b.cfg || a.tokenizer != b.tokenizer {
        return Err(Error::Config("can only merge models sharing config and tokenizer".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("merge factor {} outside [0,1]", alpha)));
    }
    let mut out = a.clone();
    let bs = b.named_tensors();
    for ((_, t), (_, src)) in out.named_tensors_mut().into_iter().zip(bs) {
        for (v, s) in t.data_mut().iter_mut().zip(src.data()) {
            *v = (1.0 - alpha) * *v + alpha * s;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// replication

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReplicateConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        ReplicateConfig { steps: 200, batch: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReplicationStats {
    pub losses: Vec<f64>,
    pub best_step: usize,
    pub best_loss: f64,
}

fn check_pairs(model: &MicroLM, pairs: &[(String, InternalStates)], layer: usize) -> Result<Vec<Vec<usize>>> {
    if layer == 0 || layer > model.cfg.n_layers {
        return Err(Error::Config(format!("layer {} outside 1..={}", layer, model.cfg.n_layers)));
    }
    if pairs.is_empty() {
        return Err(Error::Corpus("replication needs at least one pair".into()));
    }
    let mut tokenized = Vec::with_capacity(pairs.len());
    for (i, (text, h)) in pairs.iter().enumerate() {
        if h.layer != layer {
            return Err(Error::Config(format!(
                "pair {} captured at layer {}, replicating layer {}",
                i, h.layer, layer
            )));
        }
        if h.states.cols() != model.cfg.d_in {
            return Err(Error::Config(format!(
                "pair {} has width {}, model wants {}",
                i,
                h.states.cols(),
                model.cfg.d_in
            )));
        }
        if !h.states.is_finite() {
            return Err(Error::NonFinite("replication target states"));
        }
        let ids: Vec<usize> = model
            .tokenizer
            .tokenize(text)
            .into_iter()
            .take(model.cfg.max_seq_len)
            .map(|t| t as usize)
            .collect();
        if ids.len() != h.states.rows() {
            return Err(Error::Config(format!(
                "pair {} tokenizes to {} tokens but has {} state rows; \
                 replication assumes a shared tokenizer",
                i,
                ids.len(),
                h.states.rows()
            )));
        }
        tokenized.push(ids);
    }
    Ok(tokenized)
}

/// Mean squared distance between the model's states and the recorded ones,
/// averaged over pairs. The quantity replication minimizes, usable on held-out
/// pairs before and after.
pub fn replication_mse(model: &MicroLM, pairs: &[(String, InternalStates)], layer: usize) -> Result<f64> {
    check_pairs(model, pairs, layer)?;
    let mut total = 0.0;
    for (text, h) in pairs {
        let own = model.capture_is(text, layer)?.states;
        let sq: f64 = own
            .data()
            .iter()
            .zip(h.states.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq / own.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Distill the victim's layer-`layer` states into a copy of the base model by
/// training the embedding and first `layer` blocks on (text, states) pairs.
/// Only the pairs are read; the victim's weights never are.
pub fn replicate_model(
    base: &MicroLM,
    pairs: &[(String, InternalStates)],
    layer: usize,
    cfg: &ReplicateConfig,
) -> Result<(MicroLM, ReplicationStats)> {
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("replication needs steps, batch, and a positive lr".into()));
    }
    let tokenized = check_pairs(base, pairs, layer)?;
    let mut model = base.clone();
    // Zero weight decay: pairs the base already matches must leave it untouched.
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = ReplicationStats {
        losses: Vec::with_capacity(cfg.steps),
        best_step: 0,
        best_loss: f64::INFINITY,
    };

    for step in 0..cfg.steps {
        let k = cfg.batch.min(pairs.len());
        let picks = rand::seq::index::sample(&mut rng, pairs.len(), k);

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, layer, Bind::TrainablePrefix(layer))?;
        let mut acc: Option<Var> = None;
        for pi in picks {
            let w = tape.embed_rows(vars.embedding, &tokenized[pi])?;
            let h = model.forward_prefix(&mut tape, &vars, w, layer)?;
            let t = tape.constant(&pairs[pi].1.states)?;
            let diff = tape.sub(h, t)?;
            let sq = tape.mul(diff, diff)?;
            let mse = tape.mean_all(sq)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, mse)?,
                None => mse,
            });
        }
        let total = acc.expect("batch is nonempty");
        let mean = tape.scale(total, 1.0 / k as f64)?;
        let loss_val = tape.scalar_value(mean);
        stats.losses.push(loss_val);
        if loss_val < stats.best_loss {
            stats.best_loss = loss_val;
            stats.best_step = step;
        }

        let wrt = prefix_var_refs(&vars, layer);
        let grads: Vec<Tensor> =
            tape.grad_of(mean, &wrt)?.into_iter().map(|g| g.tensor).collect();
        let mut params = prefix_param_refs(&mut model, layer);
        let grefs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut params, &grefs)?;
    }
    Ok((model, stats))
}

fn prefix_var_refs(vars: &crate::lm::ModelVars, layer: usize) -> Vec<Var> {
    let mut out = vec![vars.embedding];
    for l in vars.layers.iter().take(layer) {
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
    out
}

fn prefix_param_refs(model: &mut MicroLM, layer: usize) -> Vec<&mut Tensor> {
    model
        .named_tensors_mut()
        .into_iter()
        .filter_map(|(name, t)| {
            let keep = name == "embedding"
                || name
                    .strip_prefix("layers.")
                    .and_then(|rest| rest.split('.').next())
                    .and_then(|i| i.parse::<usize>().ok())
                    .map_or(false, |i| i < layer);
            keep.then_some(t)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// transferred attack

/// Run the bounded-subspace gradient attack against a stand-in model (a
/// replica, or the raw base as a weaker baseline) instead of the one that
/// produced the states. Tokens decode through the stand-in's embedding.
pub fn attack_transferred(
    target: &InternalStates,
    replica: &MicroLM,
    cfg: &AttackConfig,
) -> Result<InversionResult> {
    let mut cfg = cfg.clone();
    cfg.allow_model_mismatch = true;
    let mut result = attack_tbs(replica, target, &cfg)?;
    result.black_box = true;
    Ok(result)
}

// ---------------------------------------------------------------------------
// generative inverter

const VOCAB_OUT: usize = 258;
const TOK_START: usize = 256;
const TOK_END: usize = 257;
const INV_RMS_EPS: f64 = 1e-5;
const N_ENC_LAYERS: usize = 2;
const N_DEC_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InverterConfig {
    /// Width of the incoming state rows.
    pub d_in: usize,
    /// Internal width of the encoder-decoder.
    pub d_enc: usize,
    pub ffn_mult: f64,
    /// Training-time cap on state rows and output bytes per pair.
    pub max_seq_len: usize,
    /// False drops the input projection (ablation); then d_enc must equal d_in.
    pub use_projection: bool,
    pub seed: u64,
}

impl Default for InverterConfig {
    fn default() -> Self {
        InverterConfig {
            d_in: 64,
            d_enc: 128,
            ffn_mult: 2.0,
            max_seq_len: 128,
            use_projection: true,
            seed: 0,
        }
    }
}

impl InverterConfig {
    fn ffn_dim(&self) -> usize {
        (self.d_enc as f64 * self.ffn_mult).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_enc == 0 || self.ffn_dim() == 0 {
            return Err(Error::Config("inverter widths must be positive".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("inverter max_seq_len must be at least 2".into()));
        }
        if !self.use_projection && self.d_enc != self.d_in {
            return Err(Error::Config(format!(
                "projection-free ablation needs d_enc == d_in, got {} and {}",
                self.d_enc, self.d_in
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AttnBlock {
    norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct FfnBlock {
    norm: Tensor,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct EncLayer {
    attn: AttnBlock,
    ffn: FfnBlock,
}

#[derive(Debug, Clone, PartialEq)]
struct DecLayer {
    self_attn: AttnBlock,
    cross_attn: AttnBlock,
    ffn: FfnBlock,
}

struct AttnVars {
    norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

struct FfnVars {
    norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

struct EncLayerVars {
    attn: AttnVars,
    ffn: FfnVars,
}

struct DecLayerVars {
    self_attn: AttnVars,
    cross_attn: AttnVars,
    ffn: FfnVars,
}

struct InverterVars {
    proj_w: Option<Var>,
    proj_b: Option<Var>,
    enc_pos: Var,
    dec_pos: Var,
    tok_emb: Var,
    enc: Vec<EncLayerVars>,
    dec: Vec<DecLayerVars>,
    enc_final: Var,
    dec_final: Var,
    head: Var,
}

/// Text generator conditioned on a state matrix: a learned projection into
/// the working width, a bidirectional encoder over state rows with learned
/// positions, and a byte-level causal decoder that cross-attends to the
/// encoding. Output vocabulary is 256 bytes plus start/end markers.
#[derive(Debug, Clone, PartialEq)]
pub struct InverterModel {
    pub cfg: InverterConfig,
    proj_w: Option<Tensor>,
    proj_b: Option<Tensor>,
    enc_pos: Tensor,
    dec_pos: Tensor,
    tok_emb: Tensor,
    enc_layers: Vec<EncLayer>,
    dec_layers: Vec<DecLayer>,
    enc_final: Tensor,
    dec_final: Tensor,
    head: Tensor,
}

fn attn_init(d: usize, std: f64, res_std: f64, rng: &mut ChaCha8Rng) -> AttnBlock {
    AttnBlock {
        norm: Tensor::full(1, d, 1.0),
        wq: Tensor::randn(d, d, std, rng),
        wk: Tensor::randn(d, d, std, rng),
        wv: Tensor::randn(d, d, std, rng),
        wo: Tensor::randn(d, d, res_std, rng),
    }
}

fn ffn_init(d: usize, f: usize, std: f64, res_std: f64, rng: &mut ChaCha8Rng) -> FfnBlock {
    FfnBlock {
        norm: Tensor::full(1, d, 1.0),
        w_gate: Tensor::randn(d, f, std, rng),
        w_up: Tensor::randn(d, f, std, rng),
        w_down: Tensor::randn(f, d, res_std, rng),
    }
}

fn bind_attn(tape: &mut Tape, b: &AttnBlock, tr: bool) -> Result<AttnVars> {
    Ok(AttnVars {
        norm: bind_tensor(tape, &b.norm, tr)?,
        wq: bind_tensor(tape, &b.wq, tr)?,
        wk: bind_tensor(tape, &b.wk, tr)?,
        wv: bind_tensor(tape, &b.wv, tr)?,
        wo: bind_tensor(tape, &b.wo, tr)?,
    })
}

fn bind_ffn(tape: &mut Tape, b: &FfnBlock, tr: bool) -> Result<FfnVars> {
    Ok(FfnVars {
        norm: bind_tensor(tape, &b.norm, tr)?,
        w_gate: bind_tensor(tape, &b.w_gate, tr)?,
        w_up: bind_tensor(tape, &b.w_up, tr)?,
        w_down: bind_tensor(tape, &b.w_down, tr)?,
    })
}

/// Pre-norm residual attention. `kv` external = cross-attention (queries from
/// the normed stream, keys and values from the other sequence); none = self.
fn attn_apply(
    tape: &mut Tape,
    av: &AttnVars,
    x: Var,
    kv: Option<Var>,
    mask: Option<Var>,
    d: usize,
) -> Result<Var> {
    let normed = tape.rmsnorm_rows(x, av.norm, INV_RMS_EPS)?;
    let kv_src = kv.unwrap_or(normed);
    let q = tape.matmul(normed, av.wq)?;
    let k = tape.matmul(kv_src, av.wk)?;
    let v = tape.matmul(kv_src, av.wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let probs = tape.softmax_rows(scores)?;
    let ctx = tape.matmul(probs, v)?;
    let out = tape.matmul(ctx, av.wo)?;
    tape.add(x, out)
}

fn ffn_apply(tape: &mut Tape, fv: &FfnVars, x: Var) -> Result<Var> {
    let normed = tape.rmsnorm_rows(x, fv.norm, INV_RMS_EPS)?;
    let gate = tape.matmul(normed, fv.w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(normed, fv.w_up)?;
    let prod = tape.mul(gate, up)?;
    let down = tape.matmul(prod, fv.w_down)?;
    tape.add(x, down)
}

impl InverterModel {
    pub fn init(cfg: InverterConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_enc;
        let f = cfg.ffn_dim();
        let std = 0.02;
        let res_std = std / (2.0 * (N_ENC_LAYERS + N_DEC_LAYERS) as f64).sqrt();
        let (proj_w, proj_b) = if cfg.use_projection {
            (
                Some(Tensor::randn(cfg.d_in, d, 1.0 / (cfg.d_in as f64).sqrt(), &mut rng)),
                Some(Tensor::zeros(1, d)),
            )
        } else {
            (None, None)
        };
        Ok(InverterModel {
            proj_w,
            proj_b,
            enc_pos: Tensor::randn(cfg.max_seq_len, d, std, &mut rng),
            dec_pos: Tensor::randn(cfg.max_seq_len + 1, d, std, &mut rng),
            tok_emb: Tensor::randn(VOCAB_OUT, d, std, &mut rng),
            enc_layers: (0..N_ENC_LAYERS)
                .map(|_| EncLayer {
                    attn: attn_init(d, std, res_std, &mut rng),
                    ffn: ffn_init(d, f, std, res_std, &mut rng),
                })
                .collect(),
            dec_layers: (0..N_DEC_LAYERS)
                .map(|_| DecLayer {
                    self_attn: attn_init(d, std, res_std, &mut rng),
                    cross_attn: attn_init(d, std, res_std, &mut rng),
                    ffn: ffn_init(d, f, std, res_std, &mut rng),
                })
                .collect(),
            enc_final: Tensor::full(1, d, 1.0),
            dec_final: Tensor::full(1, d, 1.0),
            head: Tensor::randn(d, VOCAB_OUT, std, &mut rng),
            cfg,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(w) = &self.proj_w {
            out.push(("proj_w".into(), w));
        }
        if let Some(b) = &self.proj_b {
            out.push(("proj_b".into(), b));
        }
        out.push(("enc_pos".into(), &self.enc_pos));
        out.push(("dec_pos".into(), &self.dec_pos));
        out.push(("tok_emb".into(), &self.tok_emb));
        for (i, l) in self.enc_layers.iter().enumerate() {
            let p = format!("enc.{}.", i);
            out.push((format!("{}attn_norm", p), &l.attn.norm));
            out.push((format!("{}wq", p), &l.attn.wq));
            out.push((format!("{}wk", p), &l.attn.wk));
            out.push((format!("{}wv", p), &l.attn.wv));
            out.push((format!("{}wo", p), &l.attn.wo));
            out.push((format!("{}ffn_norm", p), &l.ffn.norm));
            out.push((format!("{}w_gate", p), &l.ffn.w_gate));
            out.push((format!("{}w_up", p), &l.ffn.w_up));
            out.push((format!("{}w_down", p), &l.ffn.w_down));
        }
        for (i, l) in self.dec_layers.iter().enumerate() {
            let p = format!("dec.{}.", i);
            out.push((format!("{}self_norm", p), &l.self_attn.norm));
            out.push((format!("{}self_wq", p), &l.self_attn.wq));
            out.push((format!("{}self_wk", p), &l.self_attn.wk));
            out.push((format!("{}self_wv", p), &l.self_attn.wv));
            out.push((format!("{}self_wo", p), &l.self_attn.wo));
            out.push((format!("{}cross_norm", p), &l.cross_attn.norm));
            out.push((format!("{}cross_wq", p), &l.cross_attn.wq));
            out.push((format!("{}cross_wk", p), &l.cross_attn.wk));
            out.push((format!("{}cross_wv", p), &l.cross_attn.wv));
            out.push((format!("{}cross_wo", p), &l.cross_attn.wo));
            out.push((format!("{}ffn_norm", p), &l.ffn.norm));
            out.push((format!("{}w_gate", p), &l.ffn.w_gate));
            out.push((format!("{}w_up", p), &l.ffn.w_up));
            out.push((format!("{}w_down", p), &l.ffn.w_down));
        }
        out.push(("enc_final".into(), &self.enc_final));
        out.push(("dec_final".into(), &self.dec_final));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Some(w) = self.proj_w.as_mut() {
            out.push(("proj_w".into(), w));
        }
        if let Some(b) = self.proj_b.as_mut() {
            out.push(("proj_b".into(), b));
        }
        out.push(("enc_pos".into(), &mut self.enc_pos));
        out.push(("dec_pos".into(), &mut self.dec_pos));
        out.push(("tok_emb".into(), &mut self.tok_emb));
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            let p = format!("enc.{}.", i);
            out.push((format!("{}attn_norm", p), &mut l.attn.norm));
            out.push((format!("{}wq", p), &mut l.attn.wq));
            out.push((format!("{}wk", p), &mut l.attn.wk));
            out.push((format!("{}wv", p), &mut l.attn.wv));
            out.push((format!("{}wo", p), &mut l.attn.wo));
            out.push((format!("{}ffn_norm", p), &mut l.ffn.norm));
            out.push((format!("{}w_gate", p), &mut l.ffn.w_gate));
            out.push((format!("{}w_up", p), &mut l.ffn.w_up));
            out.push((format!("{}w_down", p), &mut l.ffn.w_down));
        }
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            let p = format!("dec.{}.", i);
            out.push((format!("{}self_norm", p), &mut l.self_attn.norm));
            out.push((format!("{}self_wq", p), &mut l.self_attn.wq));
            out.push((format!("{}self_wk", p), &mut l.self_attn.wk));
            out.push((format!("{}self_wv", p), &mut l.self_attn.wv));
            out.push((format!("{}self_wo", p), &mut l.self_attn.wo));
            out.push((format!("{}cross_norm", p), &mut l.cross_attn.norm));
            out.push((format!("{}cross_wq", p), &mut l.cross_attn.wq));
            out.push((format!("{}cross_wk", p), &mut l.cross_attn.wk));
            out.push((format!("{}cross_wv", p), &mut l.cross_attn.wv));
            out.push((format!("{}cross_wo", p), &mut l.cross_attn.wo));
            out.push((format!("{}ffn_norm", p), &mut l.ffn.norm));
            out.push((format!("{}w_gate", p), &mut l.ffn.w_gate));
            out.push((format!("{}w_up", p), &mut l.ffn.w_up));
            out.push((format!("{}w_down", p), &mut l.ffn.w_down));
        }
        out.push(("enc_final".into(), &mut self.enc_final));
        out.push(("dec_final".into(), &mut self.dec_final));
        out.push(("head".into(), &mut self.head));
        out
    }

    fn bind(&self, tape: &mut Tape, tr: bool) -> Result<InverterVars> {
        Ok(InverterVars {
            proj_w: self.proj_w.as_ref().map(|t| bind_tensor(tape, t, tr)).transpose()?,
            proj_b: self.proj_b.as_ref().map(|t| bind_tensor(tape, t, tr)).transpose()?,
            enc_pos: bind_tensor(tape, &self.enc_pos, tr)?,
            dec_pos: bind_tensor(tape, &self.dec_pos, tr)?,
            tok_emb: bind_tensor(tape, &self.tok_emb, tr)?,
            enc: self
                .enc_layers
                .iter()
                .map(|l| {
                    Ok(EncLayerVars {
                        attn: bind_attn(tape, &l.attn, tr)?,
                        ffn: bind_ffn(tape, &l.ffn, tr)?,
                    })
                })
                .collect::<Result<_>>()?,
            dec: self
                .dec_layers
                .iter()
                .map(|l| {
                    Ok(DecLayerVars {
                        self_attn: bind_attn(tape, &l.self_attn, tr)?,
                        cross_attn: bind_attn(tape, &l.cross_attn, tr)?,
                        ffn: bind_ffn(tape, &l.ffn, tr)?,
                    })
                })
                .collect::<Result<_>>()?,
            enc_final: bind_tensor(tape, &self.enc_final, tr)?,
            dec_final: bind_tensor(tape, &self.dec_final, tr)?,
            head: bind_tensor(tape, &self.head, tr)?,
        })
    }

    fn ordered_vars(vars: &InverterVars) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(vars.proj_w);
        out.extend(vars.proj_b);
        out.push(vars.enc_pos);
        out.push(vars.dec_pos);
        out.push(vars.tok_emb);
        for l in &vars.enc {
            out.extend([l.attn.norm, l.attn.wq, l.attn.wk, l.attn.wv, l.attn.wo]);
            out.extend([l.ffn.norm, l.ffn.w_gate, l.ffn.w_up, l.ffn.w_down]);
        }
        for l in &vars.dec {
            out.extend([
                l.self_attn.norm,
                l.self_attn.wq,
                l.self_attn.wk,
                l.self_attn.wv,
                l.self_attn.wo,
            ]);
            out.extend([
                l.cross_attn.norm,
                l.cross_attn.wq,
                l.cross_attn.wk,
                l.cross_attn.wv,
                l.cross_attn.wo,
            ]);
            out.extend([l.ffn.norm, l.ffn.w_gate, l.ffn.w_up, l.ffn.w_down]);
        }
        out.extend([vars.enc_final, vars.dec_final, vars.head]);
        out
    }

    /// Encode up to max_seq_len state rows into the cross-attention memory.
    fn encode(&self, tape: &mut Tape, vars: &InverterVars, states: &Tensor) -> Result<Var> {
        let (n, d) = states.dims();
        if d != self.cfg.d_in {
            return Err(Error::shape(
                "inverter encode",
                format!("state width {} != d_in {}", d, self.cfg.d_in),
            ));
        }
        if n == 0 {
            return Err(Error::shape("inverter encode", "no state rows"));
        }
        let n = n.min(self.cfg.max_seq_len);
        let truncated;
        let states = if n < states.rows() {
            truncated = Tensor::from_rows(
                &(0..n).map(|i| states.row(i).to_vec()).collect::<Vec<_>>(),
            )?;
            &truncated
        } else {
            states
        };
        let x0 = tape.constant(states)?;
        let mut x = match (vars.proj_w, vars.proj_b) {
            (Some(w), Some(b)) => {
                let p = tape.matmul(x0, w)?;
                tape.add_row(p, b)?
            }
            _ => x0,
        };
        let pos_ids: Vec<usize> = (0..n).collect();
        let pos = tape.embed_rows(vars.enc_pos, &pos_ids)?;
        x = tape.add(x, pos)?;
        for l in &vars.enc {
            x = attn_apply(tape, &l.attn, x, None, None, self.cfg.d_enc)?;
            x = ffn_apply(tape, &l.ffn, x)?;
        }
        tape.rmsnorm_rows(x, vars.enc_final, INV_RMS_EPS)
    }

    /// Causal decode over `ids` (start marker plus emitted bytes), returning
    /// next-token logits per position.
    fn decode(&self, tape: &mut Tape, vars: &InverterVars, enc_out: Var, ids: &[usize]) -> Result<Var> {
        let m = ids.len();
        if m == 0 || m > self.cfg.max_seq_len + 1 {
            return Err(Error::shape(
                "inverter decode",
                format!("{} decoder positions outside 1..={}", m, self.cfg.max_seq_len + 1),
            ));
        }
        let mut y = tape.embed_rows(vars.tok_emb, ids)?;
        let pos_ids: Vec<usize> = (0..m).collect();
        let pos = tape.embed_rows(vars.dec_pos, &pos_ids)?;
        y = tape.add(y, pos)?;
        let mask = tape.constant(&causal_mask(m))?;
        for l in &vars.dec {
            y = attn_apply(tape, &l.self_attn, y, None, Some(mask), self.cfg.d_enc)?;
            y = attn_apply(tape, &l.cross_attn, y, Some(enc_out), None, self.cfg.d_enc)?;
            y = ffn_apply(tape, &l.ffn, y)?;
        }
        let y = tape.rmsnorm_rows(y, vars.dec_final, INV_RMS_EPS)?;
        tape.matmul(y, vars.head)
    }

    /// Teacher-forced cross-entropy per target byte, weighted over all pairs.
    pub fn teacher_forced_loss(&self, pairs: &[(String, InternalStates)]) -> Result<f64> {
        let prepared = prepare_pairs(&self.cfg, pairs)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let mark = tape.mark();
        let mut total = 0.0;
        let mut count = 0usize;
        for p in &prepared {
            let enc = self.encode(&mut tape, &vars, &p.states)?;
            let logits = self.decode(&mut tape, &vars, enc, &p.dec_in)?;
            let loss = tape.cross_entropy_rows(logits, &p.targets)?;
            total += tape.scalar_value(loss) * p.targets.len() as f64;
            count += p.targets.len();
            tape.truncate_to(mark);
        }
        Ok(total / count as f64)
    }
}

struct PreparedPair {
    states: Tensor,
    dec_in: Vec<usize>,
    targets: Vec<usize>,
}

/// Truncate, never drop: long state matrices lose rows, long texts lose
/// bytes, every pair stays in the set.
fn prepare_pairs(cfg: &InverterConfig, pairs: &[(String, InternalStates)]) -> Result<Vec<PreparedPair>> {
    if pairs.is_empty() {
        return Err(Error::Corpus("inverter needs at least one pair".into()));
    }
    let layer = pairs[0].1.layer;
    let mut out = Vec::with_capacity(pairs.len());
    for (i, (text, h)) in pairs.iter().enumerate() {
        if h.layer != layer {
            return Err(Error::Config(format!(
                "pair {} is from layer {}, pair 0 from layer {}",
                i, h.layer, layer
            )));
        }
        if h.states.cols() != cfg.d_in {
            return Err(Error::Config(format!(
                "pair {} has width {}, inverter wants {}",
                i,
                h.states.cols(),
                cfg.d_in
            )));
        }
        if !h.states.is_finite() {
            return Err(Error::NonFinite("inverter training states"));
        }
        let bytes: Vec<usize> =
            text.bytes().take(cfg.max_seq_len).map(|b| b as usize).collect();
        let mut dec_in = Vec::with_capacity(bytes.len() + 1);
        dec_in.push(TOK_START);
        dec_in.extend(&bytes);
        let mut targets = bytes;
        targets.push(TOK_END);
        out.push(PreparedPair { states: h.states.clone(), dec_in, targets });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InverterTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for InverterTrainConfig {
    fn default() -> Self {
        InverterTrainConfig { epochs: 20, batch: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InverterStats {
    /// Teacher-forced loss of the fresh initialization, before any update.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Fit the generative inverter on (text, states) pairs from one layer.
pub fn train_inverter(
    pairs: &[(String, InternalStates)],
    icfg: InverterConfig,
    tcfg: &InverterTrainConfig,
) -> Result<(InverterModel, InverterStats)> {
    if tcfg.epochs == 0 || tcfg.batch == 0 || !(tcfg.lr > 0.0) {
        return Err(Error::Config("inverter training needs epochs, batch, and a positive lr".into()));
    }
    let mut model = InverterModel::init(icfg)?;
    let prepared = prepare_pairs(&model.cfg, pairs)?;
    let initial_loss = model.teacher_forced_loss(pairs)?;
    let mut stats = InverterStats { initial_loss, epoch_losses: Vec::with_capacity(tcfg.epochs) };
    let mut opt = AdamW::new(tcfg.lr, 0.0);

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(tcfg.batch) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true)?;
            let mut acc: Option<Var> = None;
            for &pi in chunk {
                let p = &prepared[pi];
                let enc = model.encode(&mut tape, &vars, &p.states)?;
                let logits = model.decode(&mut tape, &vars, enc, &p.dec_in)?;
                let loss = tape.cross_entropy_rows(logits, &p.targets)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, loss)?,
                    None => loss,
                });
            }
            let total = acc.expect("chunk is nonempty");
            let mean = tape.scale(total, 1.0 / chunk.len() as f64)?;
            epoch_sum += tape.scalar_value(mean) * chunk.len() as f64;

            let wrt = InverterModel::ordered_vars(&vars);
            let grads: Vec<Tensor> =
                tape.grad_of(mean, &wrt)?.into_iter().map(|g| g.tensor).collect();
            let mut named = model.named_tensors_mut();
            let mut prefs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            let grefs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut prefs, &grefs)?;
        }
        stats.epoch_losses.push(epoch_sum / prepared.len() as f64);
    }
    Ok((model, stats))
}

/// Greedy byte-by-byte generation from a state matrix: encode once, then
/// argmax-decode until the end marker or `max_out` emitted tokens.
pub fn invert_generate(h: &InternalStates, model: &InverterModel, max_out: usize) -> Result<String> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false)?;
    let enc = model.encode(&mut tape, &vars, &h.states)?;
    let mark = tape.mark();
    let mut ids = vec![TOK_START];
    let mut bytes = Vec::new();
    for _ in 0..max_out {
        if ids.len() > model.cfg.max_seq_len {
            break;
        }
        let logits = model.decode(&mut tape, &vars, enc, &ids)?;
        let lt = tape.value_tensor(logits);
        tape.truncate_to(mark);
        let last = lt.row(lt.rows() - 1);
        let next = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("logits row is nonempty");
        if next == TOK_END {
            break;
        }
        ids.push(next);
        if next < 256 {
            bytes.push(next as u8);
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

// ---------------------------------------------------------------------------
// inverter persistence

pub fn save_inverter(path: impl AsRef<Path>, model: &InverterModel) -> Result<()> {
    let meta = serde_json::to_string(&model.cfg)?;
    let named = model.named_tensors();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut f, &MAGIC_INVERTER, &meta, &named)?;
    std::io::Write::flush(&mut f)?;
    Ok(())
}

pub fn load_inverter(path: impl AsRef<Path>) -> Result<InverterModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (meta, tensors) = read_container(&mut f, &MAGIC_INVERTER)?;
    let cfg: InverterConfig = serde_json::from_str(&meta)?;
    let mut model = InverterModel::init(cfg)?;
    let mut loaded: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for (name, t) in model.named_tensors_mut() {
        let src = loaded
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {}", name)))?;
        if src.dims() != t.dims() {
            return Err(Error::Format(format!(
                "tensor {} is {:?}, expected {:?}",
                name,
                src.dims(),
                t.dims()
            )));
        }
        *t = src;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor {}", extra)));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Style};
    use crate::lm::{finetune_lm, train_lm, MicroLMConfig, TrainConfig};
    use std::sync::OnceLock;

    fn lm_cfg(seed: u64) -> MicroLMConfig {
        MicroLMConfig {
            vocab_size: 320,
            d_in: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 2.0,
            max_seq_len: 48,
            seed,
            ..MicroLMConfig::default()
        }
    }

    fn base_model() -> &'static MicroLM {
        static M: OnceLock<MicroLM> = OnceLock::new();
        M.get_or_init(|| {
            let corpus = synth_corpus(Style::Medical, 40, 11);
            let tcfg = TrainConfig { steps: 30, batch: 4, seq_len: 16, ..TrainConfig::default() };
            train_lm(lm_cfg(0), &tcfg, &corpus).unwrap().0
        })
    }

    fn other_model() -> &'static MicroLM {
        static M: OnceLock<MicroLM> = OnceLock::new();
        M.get_or_init(|| {
            let corpus = synth_corpus(Style::Medical, 40, 11);
            let tcfg =
                TrainConfig { steps: 30, batch: 4, seq_len: 16, seed: 9, ..TrainConfig::default() };
            train_lm(lm_cfg(7), &tcfg, &corpus).unwrap().0
        })
    }

    fn probe_texts() -> Vec<String> {
        synth_corpus(Style::Medical, 48, 23)
    }

    #[test]
    fn autoencoder_beats_its_untrained_self_by_half() {
        let texts = probe_texts();
        let data = pooled_dataset(base_model(), &texts[..32], 1).unwrap();
        let trained = train_autoencoder(&data, 10, 8, 3).unwrap();
        let untrained = train_autoencoder(&data, 0, 8, 3).unwrap();
        assert_eq!(untrained.epochs_trained, 0);
        assert_eq!(trained.epochs_trained, 10);
        let (rt, ru) = (trained.rmse(&data).unwrap(), untrained.rmse(&data).unwrap());
        assert!(rt <= 0.5 * ru, "trained {} vs untrained {}", rt, ru);
    }

    #[test]
    fn autoencoder_separates_its_model_from_an_independent_one() {
        let texts = probe_texts();
        let train_rows = pooled_dataset(base_model(), &texts[..32], 1).unwrap();
        let own_held = pooled_dataset(base_model(), &texts[32..], 1).unwrap();
        let foreign = pooled_dataset(other_model(), &texts[32..], 1).unwrap();
        let ae = train_autoencoder(&train_rows, 10, 8, 3).unwrap();
        let median = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.total_cmp(b));
            v[v.len() / 2]
        };
        let own = median(ae.rmse_rows(&own_held).unwrap());
        let other = median(ae.rmse_rows(&foreign).unwrap());
        assert!(own < other, "own median {} should undercut foreign {}", own, other);
        // deterministic evaluation
        assert_eq!(ae.rmse(&own_held).unwrap(), ae.rmse(&own_held).unwrap());
    }

    fn two_member_detector() -> (EnsembleDetector, Tensor) {
        let texts = probe_texts();
        let a_rows = pooled_dataset(base_model(), &texts[..32], 1).unwrap();
        let b_rows = pooled_dataset(other_model(), &texts[..32], 1).unwrap();
        let a_held = pooled_dataset(base_model(), &texts[32..40], 1).unwrap();
        let b_held = pooled_dataset(other_model(), &texts[32..40], 1).unwrap();
        let ae_a = train_autoencoder(&a_rows, 10, 8, 3).unwrap();
        let ae_b = train_autoencoder(&b_rows, 10, 8, 4).unwrap();
        let mut det = EnsembleDetector::new();
        det.add_member("family-a", ae_a.clone(), calibrate_tau(&ae_a, &a_held).unwrap()).unwrap();
        det.add_member("family-b", ae_b.clone(), calibrate_tau(&ae_b, &b_held).unwrap()).unwrap();
        let probe = pooled_dataset(base_model(), &texts[40..], 1).unwrap();
        (det, probe)
    }

    #[test]
    fn detector_recognizes_the_model_it_was_trained_on() {
        let (det, probe) = two_member_detector();
        assert_eq!(detect_model_type(&probe, &det).unwrap(), "family-a");

        // probe order must not matter
        let rows: Vec<Vec<f64>> =
            (0..probe.rows()).rev().map(|i| probe.row(i).to_vec()).collect();
        let reversed = Tensor::from_rows(&rows).unwrap();
        assert_eq!(detect_model_type(&reversed, &det).unwrap(), "family-a");
    }

    #[test]
    fn zero_threshold_rejects_everything() {
        let (det, probe) = two_member_detector();
        let mut strict = EnsembleDetector::new();
        for m in det.members() {
            strict.add_member(m.label.clone(), m.ae.clone(), 0.0).unwrap();
        }
        assert_eq!(detect_model_type(&probe, &strict).unwrap(), INDEPENDENT);
    }

    #[test]
    fn ties_resolve_to_the_first_registration() {
        let (det, probe) = two_member_detector();
        let ae = det.members()[0].ae.clone();
        let mut tied = EnsembleDetector::new();
        tied.add_member("first", ae.clone(), 1e9).unwrap();
        tied.add_member("second", ae, 1e9).unwrap();
        assert_eq!(detect_model_type(&probe, &tied).unwrap(), "first");
    }

    #[test]
    fn detector_input_validation() {
        let (det, _) = two_member_detector();
        let mut d = EnsembleDetector::new();
        let ae = det.members()[0].ae.clone();
        d.add_member("x", ae.clone(), 1.0).unwrap();
        assert!(d.add_member("x", ae.clone(), 1.0).is_err());
        assert!(d.add_member(INDEPENDENT, ae.clone(), 1.0).is_err());
        assert!(d.add_member("y", ae, -1.0).is_err());
        let empty = Tensor::zeros(0, 16);
        assert!(matches!(detect_model_type(&empty, &d), Err(Error::Attack(_))));
    }

    #[test]
    fn detector_round_trips_through_disk() {
        let (det, probe) = two_member_detector();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.bin");
        save_detector(&p, &det).unwrap();
        let loaded = load_detector(&p).unwrap();
        assert_eq!(loaded.members().len(), 2);
        assert_eq!(loaded.members()[0].label, "family-a");
        assert_eq!(detect_model_type(&probe, &loaded).unwrap(), "family-a");
        assert!(crate::store::read_container(
            &mut std::fs::read(&p).unwrap().as_slice(),
            &crate::store::MAGIC_INVERTER
        )
        .is_err());
    }

    #[test]
    fn merged_weights_sit_between_the_parents() {
        let corpus_a = synth_corpus(Style::Medical, 12, 31);
        let corpus_b = synth_corpus(Style::Medical, 12, 32);
        let tcfg = TrainConfig { steps: 3, batch: 2, seq_len: 12, ..TrainConfig::default() };
        let va = finetune_lm(base_model(), &tcfg, &corpus_a).unwrap().0;
        let vb = finetune_lm(base_model(), &tcfg, &corpus_b).unwrap().0;
        let merged = merge_models(&va, &vb, 0.5).unwrap();
        let (a, b, m) = (&va.embedding, &vb.embedding, &merged.embedding);
        for i in 0..8 {
            let want = 0.5 * (a.data()[i] + b.data()[i]);
            assert!((m.data()[i] - want).abs() < 1e-15);
        }
        assert!(merge_models(&va, other_model(), 0.5).is_err());
        assert!(merge_models(&va, &vb, 1.5).is_err());
    }

    fn capture_pairs(model: &MicroLM, texts: &[String], layer: usize) -> Vec<(String, InternalStates)> {
        texts
            .iter()
            .map(|t| (t.clone(), model.capture_is(t, layer).unwrap()))
            .collect()
    }

    #[test]
    fn replicating_the_base_itself_changes_nothing() {
        let base = base_model();
        let texts = probe_texts();
        let pairs = capture_pairs(base, &texts[..6], 2);
        let cfg = ReplicateConfig { steps: 5, batch: 4, ..ReplicateConfig::default() };
        let (replica, stats) = replicate_model(base, &pairs, 2, &cfg).unwrap();
        assert!(stats.losses.iter().all(|&l| l == 0.0));
        for ((_, a), (_, b)) in base.named_tensors().iter().zip(replica.named_tensors()) {
            assert_eq!(a.max_abs_diff(b), 0.0);
        }
    }

    #[test]
    fn replication_closes_most_of_the_gap_to_a_finetuned_victim() {
        let base = base_model();
        let corpus = synth_corpus(Style::Medical, 30, 41);
        let tcfg = TrainConfig { steps: 40, batch: 4, seq_len: 16, seed: 5, ..TrainConfig::default() };
        let victim = finetune_lm(base, &tcfg, &corpus).unwrap().0;

        let texts = probe_texts();
        let train_pairs = capture_pairs(&victim, &texts[..20], 2);
        let held_pairs = capture_pairs(&victim, &texts[20..28], 2);

        let pre = replication_mse(base, &held_pairs, 2).unwrap();
        let rcfg = ReplicateConfig { steps: 120, batch: 8, lr: 2e-3, seed: 0 };
        let (replica, stats) = replicate_model(base, &train_pairs, 2, &rcfg).unwrap();
        let post = replication_mse(&replica, &held_pairs, 2).unwrap();
        assert!(post < 0.5 * pre, "held-out mse {} vs pre {}", post, pre);
        assert!(stats.best_loss <= stats.losses[0]);
        assert_eq!(
            stats.best_loss,
            stats.losses.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn replication_rejects_mismatched_pairs() {
        let base = base_model();
        let texts = probe_texts();
        let mut pairs = capture_pairs(base, &texts[..2], 2);
        assert!(replicate_model(base, &pairs, 1, &ReplicateConfig::default()).is_err());
        pairs[0].1.states = Tensor::zeros(3, 99);
        assert!(matches!(
            replicate_model(base, &pairs, 2, &ReplicateConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transfer_onto_the_true_model_is_plain_whitebox() {
        let base = base_model();
        let h = base.capture_is("pt stable.", 1).unwrap();
        let cfg = AttackConfig { steps: 30, lr: 0.05, seed: 3, ..AttackConfig::default() };
        let white = attack_tbs(base, &h, &cfg).unwrap();
        let transferred = attack_transferred(&h, base, &cfg).unwrap();
        assert_eq!(white.trace.losses, transferred.trace.losses);
        assert_eq!(white.inverted_ids, transferred.inverted_ids);
        assert!(!white.black_box);
        assert!(transferred.black_box);
    }

    fn small_inverter_cfg() -> InverterConfig {
        InverterConfig {
            d_in: 16,
            d_enc: 32,
            ffn_mult: 2.0,
            max_seq_len: 32,
            use_projection: true,
            seed: 0,
        }
    }

    #[test]
    fn inverter_memorizes_a_single_pair() {
        let base = base_model();
        let text = "bp 120/80 hr 72".to_string();
        let pairs = vec![(text.clone(), base.capture_is(&text, 2).unwrap())];
        let tcfg = InverterTrainConfig { epochs: 300, batch: 1, lr: 3e-3, seed: 0 };
        let (model, stats) = train_inverter(&pairs, small_inverter_cfg(), &tcfg).unwrap();
        let last = *stats.epoch_losses.last().unwrap();
        assert!(
            last <= 0.5 * stats.initial_loss,
            "loss {} did not halve from {}",
            last,
            stats.initial_loss
        );
        let out = invert_generate(&pairs[0].1, &model, 64).unwrap();
        assert_eq!(out, text);
        // greedy decoding is deterministic
        assert_eq!(invert_generate(&pairs[0].1, &model, 64).unwrap(), out);
    }

    #[test]
    fn inverter_halves_loss_on_a_small_set() {
        let base = base_model();
        let texts = probe_texts();
        let pairs = capture_pairs(base, &texts[..8], 2);
        let tcfg = InverterTrainConfig { epochs: 60, batch: 4, lr: 3e-3, seed: 1 };
        let (model, stats) = train_inverter(&pairs, small_inverter_cfg(), &tcfg).unwrap();
        let last = *stats.epoch_losses.last().unwrap();
        assert!(
            last <= 0.5 * stats.initial_loss,
            "loss {} did not halve from {}",
            last,
            stats.initial_loss
        );
        assert!((model.teacher_forced_loss(&pairs).unwrap() - last).abs() < last.abs() + 1.0);
    }

    #[test]
    fn long_pairs_are_truncated_not_dropped() {
        let base = base_model();
        let long = "glucose 5.4 mmol/l, potassium 4.1, sodium 139, chloride 101".to_string();
        let pairs = vec![(long.clone(), base.capture_is(&long, 1).unwrap())];
        let icfg = InverterConfig { max_seq_len: 8, ..small_inverter_cfg() };
        let tcfg = InverterTrainConfig { epochs: 2, batch: 1, lr: 1e-3, seed: 0 };
        let (model, stats) = train_inverter(&pairs, icfg, &tcfg).unwrap();
        assert_eq!(stats.epoch_losses.len(), 2);
        // lossy decoding can widen invalid bytes, so count chars, not bytes
        let out = invert_generate(&pairs[0].1, &model, 5).unwrap();
        assert!(out.chars().count() <= 5, "max_out must cap emission, got {:?}", out);
    }

    #[test]
    fn projection_free_ablation_needs_matching_widths() {
        let bad = InverterConfig { use_projection: false, ..small_inverter_cfg() };
        assert!(bad.validate().is_err());
        let good = InverterConfig { use_projection: false, d_enc: 16, ..small_inverter_cfg() };
        let model = InverterModel::init(good).unwrap();
        assert!(model.named_tensors().iter().all(|(n, _)| n != "proj_w"));
    }

    #[test]
    fn inverter_round_trips_through_disk() {
        let base = base_model();
        let text = "hr 98 spo2 97%".to_string();
        let pairs = vec![(text.clone(), base.capture_is(&text, 2).unwrap())];
        let tcfg = InverterTrainConfig { epochs: 30, batch: 1, lr: 3e-3, seed: 0 };
        let (model, _) = train_inverter(&pairs, small_inverter_cfg(), &tcfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inv.bin");
        save_inverter(&p, &model).unwrap();
        let loaded = load_inverter(&p).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        // f32 rounding moves logits a hair; decoded text should survive it
        assert_eq!(
            invert_generate(&pairs[0].1, &loaded, 64).unwrap(),
            invert_generate(&pairs[0].1, &model, 64).unwrap()
        );
        let names_a: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let names_b: Vec<String> =
            loaded.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
    }
}
