//! White-box inversion attacks: given the internal states a model produced for
//! an unknown input, optimize a surrogate input until the model reproduces
//! those states, then decode the surrogate back to tokens.
//!
//! Three parameterizations share one optimization loop:
//! * `attack_ts`: trains a token-space score matrix Z (n × vocab); candidate
//!   embeddings are softmax(Z/T)·E. The search space scales with vocabulary.
//! * `attack_er`: trains candidate embeddings ŵ (n × d) directly, from zero.
//! * `attack_tbs`: trains projection weights z (n × d) against an orthonormal
//!   basis B derived from the embedding table; ŵ = α·arctan(z·B) keeps every
//!   coordinate bounded while searching a space the size of ER's.
//!
//! ER and TBS decode by nearest-cosine token recovery; TS decodes by row-wise
//! argmax of Z.

use crate::lm::{Bind, InternalStates, MicroLM, ModelVars};
use crate::optim::AdamW;
use crate::tensor::{Tape, Tensor, Var};
use crate::util::mix_seed;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Gradient norms above this mark the trace as exploded (no clipping is
/// applied; the raw trajectory is the observation).
pub const GRAD_EXPLOSION: f64 = 1e12;

const SALT_DM_MAPS: u64 = 0x6d61_7073;
const SALT_DM_BATCH: u64 = 0x6261_7463;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Mse,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Singular,
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub lr: f64,
    pub steps: usize,
    /// Weight of the distribution-matching penalty (0 disables it).
    pub lambda: f64,
    pub distance: Distance,
    pub basis: BasisKind,
    /// Output scale of the bounded TBS nonlinearity.
    pub alpha: f64,
    /// Softmax temperature for the token-space parameterization.
    pub temperature: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Number of random feature maps in the penalty.
    pub dm_features: usize,
    /// Hidden width of each feature map.
    pub dm_hidden: usize,
    /// Rows per penalty batch (clamped to the available rows inside attacks).
    pub dm_batch: usize,
    /// Stop early once the loss reaches this value (0 disables).
    pub stop_tol: f64,
    /// Permit targets whose fingerprint differs from the attacked model
    /// (transfer attacks run against a replica on purpose).
    pub allow_model_mismatch: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lr: 1e-3,
            steps: 1000,
            lambda: 0.0,
            distance: Distance::Mse,
            basis: BasisKind::Singular,
            alpha: 5.0 / std::f64::consts::PI,
            temperature: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 100,
            dm_features: 4,
            dm_hidden: 32,
            dm_batch: 8,
            stop_tol: 0.0,
            allow_model_mismatch: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("attack lr must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.lambda < 0.0 || !(self.alpha > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("lambda >= 0, alpha > 0, temperature > 0 required".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        if self.lambda > 0.0 && (self.dm_features == 0 || self.dm_hidden == 0 || self.dm_batch == 0)
        {
            return Err(Error::Config("penalty needs features, hidden width, and batch".into()));
        }
        Ok(())
    }
}

/// Orthonormal square basis derived from the embedding table's SVD.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BasisSet {
    /// d_in × d_in; rows are the basis vectors the projection weights select.
    pub b: Tensor,
    pub kind: BasisKind,
}

impl BasisSet {
    /// Validates orthonormality (B·Bᵀ = I within 1e-6 max-abs).
    pub fn new(b: Tensor, kind: BasisKind) -> Result<Self> {
        let (r, c) = b.dims();
        if r != c {
            return Err(Error::Attack(format!("basis must be square, got {}x{}", r, c)));
        }
        let mut worst = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                let dot: f64 = b.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        if worst > 1e-6 {
            return Err(Error::Attack(format!("basis not orthonormal: deviation {:.3e}", worst)));
        }
        Ok(BasisSet { b, kind })
    }
}

/// Build the projection basis from the embedding table. `Singular` lays the
/// right-singular vectors of E out as rows in descending singular-value
/// order; `Unbiased` is that matrix transposed, which spreads the projection
/// weight across directions instead of concentrating on the dominant ones.
pub fn compute_basis(embedding: &Tensor, kind: BasisKind) -> Result<BasisSet> {
    let (v, d) = embedding.dims();
    if d > v {
        return Err(Error::Attack(format!("basis needs vocab {} >= width {}", v, d)));
    }
    let m = nalgebra::DMatrix::from_row_slice(v, d, embedding.data());
    let mut svd = m.svd(false, true);
    svd.sort_by_singular_values();
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Attack("SVD did not produce right-singular vectors".into()))?;
    let mut b = Tensor::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let x = vt[(i, j)];
            match kind {
                BasisKind::Singular => b.set(i, j, x),
                BasisKind::Unbiased => b.set(j, i, x),
            }
        }
    }
    BasisSet::new(b, kind)
}

/// Token recovery from candidate embeddings: per row, the vocabulary entry
/// with the highest cosine similarity (ties toward the smallest id).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecoveredTokens {
    pub ids: Vec<u32>,
    /// Rows that had no direction at all; they decode to id 0.
    pub zero_norm_rows: Vec<usize>,
}

pub fn recover_tokens(w: &Tensor, embedding: &Tensor) -> Result<RecoveredTokens> {
    if !w.is_finite() {
        return Err(Error::NonFinite("recover_tokens input"));
    }
    let (n, d) = w.dims();
    let (v, de) = embedding.dims();
    if d != de {
        return Err(Error::shape("recover_tokens", format!("width {} vs embedding {}", d, de)));
    }
    let e_norms: Vec<f64> = (0..v)
        .map(|j| embedding.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut ids = Vec::with_capacity(n);
    let mut zero_norm_rows = Vec::new();
    for i in 0..n {
        let row = w.row(i);
        let nw: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw == 0.0 {
            zero_norm_rows.push(i);
            ids.push(0);
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0u32);
        for j in 0..v {
            let dot: f64 = row.iter().zip(embedding.row(j)).map(|(x, y)| x * y).sum();
            let cos = dot / (nw * e_norms[j]).max(1e-300);
            if cos > best.0 {
                best = (cos, j as u32);
            }
        }
        ids.push(best.1);
    }
    Ok(RecoveredTokens { ids, zero_norm_rows })
}

/// Optimization record: losses and gradient norms at every step, periodic
/// parameter checkpoints, and the running best (argmin-loss) step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InversionTrace {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub checkpoints: Vec<(usize, Tensor)>,
    pub best_step: usize,
    pub best_loss: f64,
    /// A gradient norm crossed `GRAD_EXPLOSION`; optimization continued.
    pub exploded: bool,
    /// Loss became non-computable at this step; the trace up to it stands.
    pub aborted_at: Option<usize>,
    pub early_stop_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InversionResult {
    pub inverted_text: String,
    pub inverted_ids: Vec<u32>,
    pub zero_norm_rows: Vec<usize>,
    pub trace: InversionTrace,
    pub wall_time: f64,
    /// True when the attack ran against a stand-in model rather than the one
    /// that produced the target states.
    pub black_box: bool,
}

/// Which parameterization the optimizer walks: softmax-weighted token
/// mixtures, raw candidate states, or bounded basis coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Ts,
    Er,
    Tbs,
}

pub fn attack_ts(model: &MicroLM, target: &InternalStates, cfg: &AttackConfig) -> Result<InversionResult> {
    run_attack(model, target, cfg, AttackMethod::Ts)
}

pub fn attack_er(model: &MicroLM, target: &InternalStates, cfg: &AttackConfig) -> Result<InversionResult> {
    run_attack(model, target, cfg, AttackMethod::Er)
}

pub fn attack_tbs(model: &MicroLM, target: &InternalStates, cfg: &AttackConfig) -> Result<InversionResult> {
    run_attack(model, target, cfg, AttackMethod::Tbs)
}

/// Reconstruction distance plus weighted distribution-matching penalty for a
/// candidate ŵ, evaluated standalone (the attacks build the same expression
/// on their own tape). Step selects the penalty's batch draw.
pub fn inversion_loss(
    model: &MicroLM,
    w: &Tensor,
    target: &InternalStates,
    cfg: &AttackConfig,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, target.layer, Bind::Frozen)?;
    let wv = tape.constant(w)?;
    let target_c = tape.constant(&target.states)?;
    let h_hat = model.forward_prefix(&mut tape, &vars, wv, target.layer)?;
    let im = im_distance(&mut tape, h_hat, target_c, cfg.distance)?;
    let mut val = tape.scalar_value(im);
    if cfg.lambda > 0.0 {
        val += cfg.lambda
            * dm_penalty(
                w,
                &model.embedding,
                cfg.dm_features,
                cfg.dm_hidden,
                cfg.dm_batch,
                cfg.seed,
                step,
            )?;
    }
    Ok(val)
}

/// Distribution-matching penalty: push candidate rows to look like embedding
/// rows through a bag of fixed random feature maps. Each map is a
/// single-hidden-layer network with Gaussian weights drawn from `seed`; the
/// penalty is the mean over maps of the distance between mean-pooled features
/// of a candidate batch and an embedding batch. Batches are drawn without
/// replacement, fresh per `step`.
pub fn dm_penalty(
    w: &Tensor,
    embedding: &Tensor,
    n_features: usize,
    hidden: usize,
    batch: usize,
    seed: u64,
    step: usize,
) -> Result<f64> {
    let (n, d) = w.dims();
    let (v, de) = embedding.dims();
    if d != de {
        return Err(Error::shape("dm_penalty", format!("width {} vs embedding {}", d, de)));
    }
    if batch == 0 || batch > n.min(v) {
        return Err(Error::Config(format!("penalty batch {} outside 1..={}", batch, n.min(v))));
    }
    if n_features == 0 || hidden == 0 {
        return Err(Error::Config("penalty needs features and hidden width".into()));
    }
    let maps = dm_maps(d, n_features, hidden, seed);
    let (wi, ei) = dm_batches(seed, step, n, v, batch);
    let mut tape = Tape::new();
    let wv = tape.constant(w)?;
    let ev = tape.constant(embedding)?;
    let map_vars: Vec<Var> = maps.iter().map(|m| tape.constant(m)).collect::<Result<_>>()?;
    let out = dm_graph(&mut tape, wv, ev, &map_vars, &wi, &ei)?;
    Ok(tape.scalar_value(out))
}

fn dm_maps(d: usize, n_features: usize, hidden: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_DM_MAPS));
    (0..n_features)
        .map(|_| Tensor::randn(d, hidden, 1.0 / (d as f64).sqrt(), &mut rng))
        .collect()
}

fn dm_batches(
    seed: u64,
    step: usize,
    n: usize,
    v: usize,
    batch: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, SALT_DM_BATCH), step as u64));
    let wi = rand::seq::index::sample(&mut rng, n, batch).into_vec();
    let ei = rand::seq::index::sample(&mut rng, v, batch).into_vec();
    (wi, ei)
}

fn dm_graph(
    tape: &mut Tape,
    w: Var,
    embedding: Var,
    maps: &[Var],
    w_idx: &[usize],
    e_idx: &[usize],
) -> Result<Var> {
    let wb = tape.embed_rows(w, w_idx)?;
    let eb = tape.embed_rows(embedding, e_idx)?;
    let mut acc: Option<Var> = None;
    for &m in maps {
        let pw = tape.matmul(wb, m)?;
        let pw = tape.tanh(pw)?;
        let pe = tape.matmul(eb, m)?;
        let pe = tape.tanh(pe)?;
        let mw = tape.mean_rows(pw)?;
        let me = tape.mean_rows(pe)?;
        let diff = tape.sub(mw, me)?;
        let dist = tape.norm2(diff)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, dist)?,
            None => dist,
        });
    }
    let total = acc.expect("at least one feature map");
    tape.scale(total, 1.0 / maps.len() as f64)
}

fn im_distance(tape: &mut Tape, h_hat: Var, target: Var, distance: Distance) -> Result<Var> {
    match distance {
        Distance::Mse => {
            let d = tape.sub(h_hat, target)?;
            let sq = tape.mul(d, d)?;
            tape.mean_all(sq)
        }
        Distance::Cos => {
            let c = tape.cosine_rows_mean(h_hat, target)?;
            let neg = tape.scale(c, -1.0)?;
            tape.add_const(neg, 1.0)
        }
    }
}

fn argmax_rows(t: &Tensor) -> Vec<u32> {
    let (r, c) = t.dims();
    (0..r)
        .map(|i| {
            let row = t.row(i);
            let mut best = (f64::NEG_INFINITY, 0u32);
            for j in 0..c {
                if row[j] > best.0 {
                    best = (row[j], j as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Everything a single optimization step needs that was bound to the tape
/// once up front.
struct StepCtx<'a> {
    vars: &'a ModelVars,
    layer: usize,
    target_c: Var,
    b_const: Option<Var>,
    maps: &'a [Var],
    dm_batch: usize,
}

fn param_to_w(
    tape: &mut Tape,
    method: AttackMethod,
    cfg: &AttackConfig,
    pv: Var,
    embedding: Var,
    b_const: Option<Var>,
) -> Result<Var> {
    match method {
        AttackMethod::Ts => {
            let scaled = tape.scale(pv, 1.0 / cfg.temperature)?;
            let probs = tape.softmax_rows(scaled)?;
            tape.matmul(probs, embedding)
        }
        AttackMethod::Er => Ok(pv),
        AttackMethod::Tbs => {
            let proj = tape.matmul(pv, b_const.expect("basis bound"))?;
            let bent = tape.arctan(proj)?;
            tape.scale(bent, cfg.alpha)
        }
    }
}

/// One step's full objective: reconstruction distance at the target layer
/// plus the weighted distribution-matching penalty. Returns the parameter
/// leaf and the loss node.
fn step_loss(
    tape: &mut Tape,
    model: &MicroLM,
    ctx: &StepCtx,
    method: AttackMethod,
    cfg: &AttackConfig,
    param: &Tensor,
    step: usize,
) -> Result<(Var, Var)> {
    let mut p = param.clone();
    p.requires_grad = true;
    let pv = tape.leaf(&p)?;
    let w = param_to_w(tape, method, cfg, pv, ctx.vars.embedding, ctx.b_const)?;
    let h_hat = model.forward_prefix(tape, ctx.vars, w, ctx.layer)?;
    let im = im_distance(tape, h_hat, ctx.target_c, cfg.distance)?;
    let loss = if cfg.lambda > 0.0 {
        let n = param.rows();
        let (wi, ei) = dm_batches(cfg.seed, step, n, model.cfg.vocab_size, ctx.dm_batch);
        let dm = dm_graph(tape, w, ctx.vars.embedding, ctx.maps, &wi, &ei)?;
        let dm = tape.scale(dm, cfg.lambda)?;
        tape.add(im, dm)?
    } else {
        im
    };
    Ok((pv, loss))
}

/// Loss and gradient of the objective `attack_ts` / `attack_er` /
/// `attack_tbs` optimize, evaluated at `param`; `step` selects the penalty
/// batch draw. The parameter is token logits (rows x vocab) for `Ts`, a
/// candidate state matrix (rows x d_in) for `Er`, and basis coefficients
/// (rows x d_in) for `Tbs`, with one row per target row.
pub fn attack_grad(
    model: &MicroLM,
    target: &InternalStates,
    cfg: &AttackConfig,
    method: AttackMethod,
    param: &Tensor,
    step: usize,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let n = target.states.rows();
    let want_cols = match method {
        AttackMethod::Ts => model.cfg.vocab_size,
        AttackMethod::Er | AttackMethod::Tbs => model.cfg.d_in,
    };
    if param.dims() != (n, want_cols) {
        return Err(Error::shape(
            "attack_grad",
            format!("param {}x{}, want {}x{}", param.rows(), param.cols(), n, want_cols),
        ));
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, target.layer, Bind::Frozen)?;
    let target_c = tape.constant(&target.states)?;
    let b_const = match method {
        AttackMethod::Tbs => {
            let basis = compute_basis(&model.embedding, cfg.basis)?;
            Some(tape.constant(&basis.b)?)
        }
        _ => None,
    };
    let maps: Vec<Var> = if cfg.lambda > 0.0 {
        dm_maps(model.cfg.d_in, cfg.dm_features, cfg.dm_hidden, cfg.seed)
            .iter()
            .map(|m| tape.constant(m))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let ctx = StepCtx {
        vars: &vars,
        layer: target.layer,
        target_c,
        b_const,
        maps: &maps,
        dm_batch: cfg.dm_batch.min(n).min(model.cfg.vocab_size),
    };
    let (pv, loss) = step_loss(&mut tape, model, &ctx, method, cfg, param, step)?;
    let val = tape.scalar_value(loss);
    let grad = tape.grad_of(loss, &[pv])?.remove(0).tensor;
    Ok((val, grad))
}

fn run_attack(
    model: &MicroLM,
    target: &InternalStates,
    cfg: &AttackConfig,
    method: AttackMethod,
) -> Result<InversionResult> {
    cfg.validate()?;
    let d = model.cfg.d_in;
    let vocab = model.cfg.vocab_size;
    let (n, tc) = target.states.dims();
    if tc != d {
        return Err(Error::shape("attack", format!("target width {} vs model {}", tc, d)));
    }
    if n == 0 || n > model.cfg.max_seq_len {
        return Err(Error::shape("attack", format!("{} target rows outside 1..={}", n, model.cfg.max_seq_len)));
    }
    if target.layer == 0 || target.layer > model.cfg.n_layers {
        return Err(Error::Config(format!(
            "target layer {} outside 1..={}",
            target.layer, model.cfg.n_layers
        )));
    }
    if !target.states.is_finite() {
        return Err(Error::NonFinite("target internal states"));
    }
    if !cfg.allow_model_mismatch && target.model_fingerprint != model.fingerprint() {
        return Err(Error::Attack(
            "target states come from a different model (set allow_model_mismatch to transfer)"
                .into(),
        ));
    }

    let start = Instant::now();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, target.layer, Bind::Frozen)?;
    let target_c = tape.constant(&target.states)?;
    let b_const = match method {
        AttackMethod::Tbs => {
            let basis = compute_basis(&model.embedding, cfg.basis)?;
            Some(tape.constant(&basis.b)?)
        }
        _ => None,
    };
    let maps: Vec<Var> = if cfg.lambda > 0.0 {
        dm_maps(d, cfg.dm_features, cfg.dm_hidden, cfg.seed)
            .iter()
            .map(|m| tape.constant(m))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let dm_batch = cfg.dm_batch.min(n).min(vocab);
    let mark = tape.mark();

    let mut param = match method {
        AttackMethod::Ts => Tensor::full(n, vocab, 1.0 / d as f64),
        AttackMethod::Er => Tensor::zeros(n, d),
        AttackMethod::Tbs => Tensor::full(n, d, 1.0 / d as f64),
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;

    let mut trace = InversionTrace {
        losses: Vec::with_capacity(cfg.steps),
        grad_norms: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
        best_step: 0,
        best_loss: f64::INFINITY,
        exploded: false,
        aborted_at: None,
        early_stop_step: None,
    };
    let mut best_param = param.clone();
    let ctx = StepCtx { vars: &vars, layer: target.layer, target_c, b_const, maps: &maps, dm_batch };

    for step in 0..cfg.steps {
        tape.truncate_to(mark);
        let outcome = (|| -> Result<(f64, Tensor)> {
            let (pv, loss) = step_loss(&mut tape, model, &ctx, method, cfg, &param, step)?;
            let val = tape.scalar_value(loss);
            let grad = tape.grad_of(loss, &[pv])?.remove(0).tensor;
            Ok((val, grad))
        })();
        let (loss_val, grad) = match outcome {
            Ok(pair) => pair,
            Err(Error::NonFinite(_)) => {
                trace.aborted_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss_val.is_finite() {
            trace.aborted_at = Some(step);
            break;
        }
        trace.losses.push(loss_val);
        let gn = grad.norm();
        trace.grad_norms.push(gn);
        if !(gn <= GRAD_EXPLOSION) {
            trace.exploded = true;
        }
        if loss_val < trace.best_loss {
            trace.best_loss = loss_val;
            trace.best_step = step;
            best_param.clone_from(&param);
        }
        if step % cfg.checkpoint_every == 0 {
            trace.checkpoints.push((step, param.clone()));
        }
        if cfg.stop_tol > 0.0 && loss_val <= cfg.stop_tol {
            trace.early_stop_step = Some(step);
            break;
        }
        opt.step(&mut [&mut param], &[&grad])?;
    }

    // Decode at the best recorded point.
    tape.truncate_to(mark);
    let pv = tape.constant(&best_param)?;
    let w_best = param_to_w(&mut tape, method, cfg, pv, vars.embedding, b_const)?;
    let w_tensor = tape.value_tensor(w_best);
    let (ids, zero_norm_rows) = match method {
        AttackMethod::Ts => (argmax_rows(&best_param), Vec::new()),
        _ => {
            let rec = recover_tokens(&w_tensor, &model.embedding)?;
            (rec.ids, rec.zero_norm_rows)
        }
    };
    let inverted_text = model.tokenizer.detokenize_lossy(&ids)?;
    Ok(InversionResult {
        inverted_text,
        inverted_ids: ids,
        zero_norm_rows,
        trace,
        wall_time: start.elapsed().as_secs_f64(),
        black_box: false,
    })
}
