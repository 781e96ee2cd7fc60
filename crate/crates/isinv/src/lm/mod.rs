//! A micro decoder-only language model: byte-level tokenizer, rotary position
//! encoding, RMS-normalized pre-norm blocks with gated SiLU feed-forward, and
//! a tied (or untied) output head.
//!
//! The model exists to produce realistic per-token internal states at every
//! layer; its language quality only needs to clear a held-out perplexity bar,
//! not impress anyone.

pub mod tokenizer;
mod train;

pub use tokenizer::Tokenizer;
pub use train::{train_lm, finetune_lm, TrainConfig, TrainStats};

use crate::tensor::{Tape, Tensor, Var};
use crate::util::fnv1a64;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MicroLMConfig {
    pub vocab_size: usize,
    pub d_in: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width as a multiple of d_in.
    pub ffn_mult: f64,
    pub qkv_bias: bool,
    pub max_seq_len: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
    /// Tie the output head to the input embedding.
    pub tied_head: bool,
    pub seed: u64,
}

impl Default for MicroLMConfig {
    fn default() -> Self {
        MicroLMConfig {
            vocab_size: 512,
            d_in: 64,
            n_layers: 8,
            n_heads: 4,
            ffn_mult: 4.0,
            qkv_bias: false,
            max_seq_len: 256,
            rms_eps: 1e-5,
            rope_base: 10000.0,
            tied_head: true,
            seed: 0,
        }
    }
}

impl MicroLMConfig {
    pub fn ffn_dim(&self) -> usize {
        (self.d_in as f64 * self.ffn_mult).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_in / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if !(tokenizer::MIN_VOCAB..=tokenizer::MAX_VOCAB).contains(&self.vocab_size) {
            return Err(Error::Config(format!("vocab_size {} outside 256..=1024", self.vocab_size)));
        }
        if self.n_heads == 0 || self.d_in % self.n_heads != 0 {
            return Err(Error::Config(format!("d_in {} not divisible by {} heads", self.d_in, self.n_heads)));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be even for rotary pairs", self.head_dim())));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be positive".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.ffn_dim() == 0 {
            return Err(Error::Config("ffn_mult too small".into()));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_base > 1.0) {
            return Err(Error::Config("rms_eps and rope_base must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bq: Option<Tensor>,
    pub bk: Option<Tensor>,
    pub bv: Option<Tensor>,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MicroLM {
    pub cfg: MicroLMConfig,
    pub tokenizer: Tokenizer,
    /// vocab_size × d_in
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// d_in × vocab_size when the head is untied.
    pub head: Option<Tensor>,
}

/// Per-token hidden states captured after a given layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InternalStates {
    pub layer: usize,
    /// n_tokens × d_in
    pub states: Tensor,
    pub model_fingerprint: u64,
    pub truncated: bool,
}

/// Tape handles for bound model weights.
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bq: Option<Var>,
    pub bk: Option<Var>,
    pub bv: Option<Var>,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

pub struct ModelVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Option<Var>,
    pub head: Option<Var>,
}

/// Which bound tensors should receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Everything constant; attacks differentiate through the model, not into it.
    Frozen,
    /// All weights trainable (language-model training).
    Trainable,
    /// Embedding plus layers `0..l` trainable, the rest constant (replication).
    TrainablePrefix(usize),
}

impl MicroLM {
    /// Fresh seeded initialization. Weight scale follows the usual small-init
    /// recipe; residual output projections are shrunk with depth so the
    /// residual stream starts near unit scale.
    pub fn init(cfg: MicroLMConfig, tokenizer: Tokenizer) -> Result<Self> {
        cfg.validate()?;
        if tokenizer.vocab_size() != cfg.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer vocab {} != config vocab {}",
                tokenizer.vocab_size(),
                cfg.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_in;
        let h = cfg.ffn_dim();
        let std = 0.02;
        let res_std = std / (2.0 * cfg.n_layers as f64).sqrt();

        let embedding = Tensor::randn(cfg.vocab_size, d, std, &mut rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                attn_norm: Tensor::full(1, d, 1.0),
                wq: Tensor::randn(d, d, std, &mut rng),
                wk: Tensor::randn(d, d, std, &mut rng),
                wv: Tensor::randn(d, d, std, &mut rng),
                bq: cfg.qkv_bias.then(|| Tensor::zeros(1, d)),
                bk: cfg.qkv_bias.then(|| Tensor::zeros(1, d)),
                bv: cfg.qkv_bias.then(|| Tensor::zeros(1, d)),
                wo: Tensor::randn(d, d, res_std, &mut rng),
                ffn_norm: Tensor::full(1, d, 1.0),
                w_gate: Tensor::randn(d, h, std, &mut rng),
                w_up: Tensor::randn(d, h, std, &mut rng),
                w_down: Tensor::randn(h, d, res_std, &mut rng),
            });
        }
        let final_norm = Tensor::full(1, d, 1.0);
        let head =
            (!cfg.tied_head).then(|| Tensor::randn(d, cfg.vocab_size, std, &mut rng));
        Ok(MicroLM { cfg, tokenizer, embedding, layers, final_norm, head })
    }

    /// Stable content hash over config and every weight; attacks must leave
    /// this unchanged.
    pub fn fingerprint(&self) -> u64 {
        let cfg_json = serde_json::to_string(&self.cfg).expect("config serializes");
        let mut h = fnv1a64(cfg_json.bytes());
        for (name, t) in self.named_tensors() {
            let stream = name
                .bytes()
                .chain(std::iter::once(0u8))
                .chain(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()));
            h = fnv1a64(h.to_le_bytes().into_iter().chain(stream));
        }
        h
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn push<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, t: &'a Tensor) {
            out.push((name, t));
        }
        let mut out = Vec::new();
        push(&mut out, "embedding".into(), &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, Option<&Tensor>); 12] = [
                ("attn_norm", Some(&l.attn_norm)),
                ("wq", Some(&l.wq)),
                ("wk", Some(&l.wk)),
                ("wv", Some(&l.wv)),
                ("bq", l.bq.as_ref()),
                ("bk", l.bk.as_ref()),
                ("bv", l.bv.as_ref()),
                ("wo", Some(&l.wo)),
                ("ffn_norm", Some(&l.ffn_norm)),
                ("w_gate", Some(&l.w_gate)),
                ("w_up", Some(&l.w_up)),
                ("w_down", Some(&l.w_down)),
            ];
            for (field, t) in fields {
                if let Some(t) = t {
                    push(&mut out, format!("layers.{}.{}", i, field), t);
                }
            }
        }
        push(&mut out, "final_norm".into(), &self.final_norm);
        if let Some(hd) = &self.head {
            push(&mut out, "head".into(), hd);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let base = format!("layers.{}.", i);
            out.push((format!("{}attn_norm", base), &mut l.attn_norm));
            out.push((format!("{}wq", base), &mut l.wq));
            out.push((format!("{}wk", base), &mut l.wk));
            out.push((format!("{}wv", base), &mut l.wv));
            if let Some(b) = l.bq.as_mut() {
                out.push((format!("{}bq", base), b));
            }
            if let Some(b) = l.bk.as_mut() {
                out.push((format!("{}bk", base), b));
            }
            if let Some(b) = l.bv.as_mut() {
                out.push((format!("{}bv", base), b));
            }
            out.push((format!("{}wo", base), &mut l.wo));
            out.push((format!("{}ffn_norm", base), &mut l.ffn_norm));
            out.push((format!("{}w_gate", base), &mut l.w_gate));
            out.push((format!("{}w_up", base), &mut l.w_up));
            out.push((format!("{}w_down", base), &mut l.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(hd) = self.head.as_mut() {
            out.push(("head".into(), hd));
        }
        out
    }

    /// Bind weights (or the first `layers` of them) onto a tape.
    pub fn bind(&self, tape: &mut Tape, layers: usize, mode: Bind) -> Result<ModelVars> {
        if layers > self.cfg.n_layers {
            return Err(Error::Config(format!(
                "requested {} layers, model has {}",
                layers, self.cfg.n_layers
            )));
        }
        let full = layers == self.cfg.n_layers;
        let leaf = |tape: &mut Tape, t: &Tensor, trainable: bool| -> Result<Var> {
            if trainable {
                let mut c = t.clone();
                c.requires_grad = true;
                tape.leaf(&c)
            } else {
                tape.constant(t)
            }
        };
        let (emb_train, layer_train): (bool, Box<dyn Fn(usize) -> bool>) = match mode {
            Bind::Frozen => (false, Box::new(|_| false)),
            Bind::Trainable => (true, Box::new(|_| true)),
            Bind::TrainablePrefix(l) => (true, Box::new(move |i| i < l)),
        };
        let embedding = leaf(tape, &self.embedding, emb_train)?;
        let mut lvars = Vec::with_capacity(layers);
        for (i, l) in self.layers.iter().take(layers).enumerate() {
            let tr = layer_train(i);
            lvars.push(LayerVars {
                attn_norm: leaf(tape, &l.attn_norm, tr)?,
                wq: leaf(tape, &l.wq, tr)?,
                wk: leaf(tape, &l.wk, tr)?,
                wv: leaf(tape, &l.wv, tr)?,
                bq: l.bq.as_ref().map(|b| leaf(tape, b, tr)).transpose()?,
                bk: l.bk.as_ref().map(|b| leaf(tape, b, tr)).transpose()?,
                bv: l.bv.as_ref().map(|b| leaf(tape, b, tr)).transpose()?,
                wo: leaf(tape, &l.wo, tr)?,
                ffn_norm: leaf(tape, &l.ffn_norm, tr)?,
                w_gate: leaf(tape, &l.w_gate, tr)?,
                w_up: leaf(tape, &l.w_up, tr)?,
                w_down: leaf(tape, &l.w_down, tr)?,
            });
        }
        let final_norm = if full {
            Some(leaf(tape, &self.final_norm, matches!(mode, Bind::Trainable))?)
        } else {
            None
        };
        let head = if full {
            self.head
                .as_ref()
                .map(|hd| leaf(tape, hd, matches!(mode, Bind::Trainable)))
                .transpose()?
        } else {
            None
        };
        Ok(ModelVars { embedding, layers: lvars, final_norm, head })
    }

    /// Run the first `layers` transformer blocks over input embeddings `w`
    /// (n×d_in) and return the internal states after the last of them.
    pub fn forward_prefix(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        w: Var,
        layers: usize,
    ) -> Result<Var> {
        let (n, d) = tape.dims(w);
        if d != self.cfg.d_in {
            return Err(Error::shape("forward_prefix", format!("input width {} != d_in {}", d, self.cfg.d_in)));
        }
        if n == 0 || n > self.cfg.max_seq_len {
            return Err(Error::shape(
                "forward_prefix",
                format!("{} tokens outside 1..={}", n, self.cfg.max_seq_len),
            ));
        }
        if layers == 0 || layers > vars.layers.len() {
            return Err(Error::Config(format!(
                "layer index {} outside 1..={}",
                layers,
                vars.layers.len()
            )));
        }
        let mask = tape.constant(&causal_mask(n))?;
        let mut h = w;
        for lv in vars.layers.iter().take(layers) {
            h = self.block(tape, lv, h, mask, n)?;
        }
        Ok(h)
    }

    fn block(&self, tape: &mut Tape, lv: &LayerVars, h: Var, mask: Var, n: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let hd = cfg.head_dim();
        let normed = tape.rmsnorm_rows(h, lv.attn_norm, cfg.rms_eps)?;
        let mut q = tape.matmul(normed, lv.wq)?;
        let mut k = tape.matmul(normed, lv.wk)?;
        let mut v = tape.matmul(normed, lv.wv)?;
        if let Some(b) = lv.bq {
            q = tape.add_row(q, b)?;
        }
        if let Some(b) = lv.bk {
            k = tape.add_row(k, b)?;
        }
        if let Some(b) = lv.bv {
            v = tape.add_row(v, b)?;
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for i in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, i * hd, hd)?;
            let qh = tape.rope(qh, cfg.rope_base)?;
            let kh = tape.slice_cols(k, i * hd, hd)?;
            let kh = tape.rope(kh, cfg.rope_base)?;
            let vh = tape.slice_cols(v, i * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask)?;
            let probs = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = tape.matmul(ctx, lv.wo)?;
        let h = tape.add(h, attn_out)?;

        let normed = tape.rmsnorm_rows(h, lv.ffn_norm, cfg.rms_eps)?;
        let gate_pre = tape.matmul(normed, lv.w_gate)?;
        let gate = tape.silu(gate_pre)?;
        let up = tape.matmul(normed, lv.w_up)?;
        let prod = tape.mul(gate, up)?;
        let down = tape.matmul(prod, lv.w_down)?;
        let out = tape.add(h, down)?;
        debug_assert_eq!(tape.dims(out), (n, self.cfg.d_in));
        Ok(out)
    }

    /// Teacher-forced mean cross-entropy of a token window (full depth).
    pub fn lm_loss(&self, tape: &mut Tape, vars: &ModelVars, window: &[u32]) -> Result<Var> {
        if window.len() < 2 {
            return Err(Error::Config("window needs at least 2 tokens".into()));
        }
        let inputs: Vec<usize> = window[..window.len() - 1].iter().map(|&t| t as usize).collect();
        let targets: Vec<usize> = window[1..].iter().map(|&t| t as usize).collect();
        let logits = self.logits_for(tape, vars, &inputs)?;
        tape.cross_entropy_rows(logits, &targets)
    }

    fn logits_for(&self, tape: &mut Tape, vars: &ModelVars, input_ids: &[usize]) -> Result<Var> {
        let w = tape.embed_rows(vars.embedding, input_ids)?;
        self.logits_from_embeddings(tape, vars, w)
    }

    /// Full-depth logits for already-materialized input embeddings (used when
    /// something perturbs the embeddings before the forward pass).
    pub fn logits_from_embeddings(&self, tape: &mut Tape, vars: &ModelVars, w: Var) -> Result<Var> {
        let h = self.forward_prefix(tape, vars, w, self.cfg.n_layers)?;
        self.head_logits(tape, vars, h)
    }

    /// Final norm plus output head over finished hidden states.
    fn head_logits(&self, tape: &mut Tape, vars: &ModelVars, h: Var) -> Result<Var> {
        let fnorm = vars
            .final_norm
            .ok_or_else(|| Error::Config("final norm not bound; bind all layers".into()))?;
        let h = tape.rmsnorm_rows(h, fnorm, self.cfg.rms_eps)?;
        match (self.cfg.tied_head, vars.head) {
            (true, _) => tape.matmul_nt(h, vars.embedding),
            (false, Some(hd)) => tape.matmul(h, hd),
            (false, None) => Err(Error::Config("untied head missing".into())),
        }
    }

    /// Greedy next-token prediction continued from mid-network states: the
    /// remaining blocks run over the states, then the head scores the last
    /// position. This is the receiving half of split inference, so it must
    /// agree with a full local forward pass at every split point.
    pub fn next_token_from_states(&self, h: &InternalStates) -> Result<u32> {
        if h.layer == 0 || h.layer > self.cfg.n_layers {
            return Err(Error::Config(format!(
                "layer {} outside 1..={}",
                h.layer, self.cfg.n_layers
            )));
        }
        let (n, d) = h.states.dims();
        if d != self.cfg.d_in {
            return Err(Error::shape(
                "next_token_from_states",
                format!("state width {} != d_in {}", d, self.cfg.d_in),
            ));
        }
        if n == 0 || n > self.cfg.max_seq_len {
            return Err(Error::shape(
                "next_token_from_states",
                format!("{} rows outside 1..={}", n, self.cfg.max_seq_len),
            ));
        }
        if !h.states.is_finite() {
            return Err(Error::NonFinite("next_token_from_states input"));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, self.cfg.n_layers, Bind::Frozen)?;
        let mask = tape.constant(&causal_mask(n))?;
        let mut x = tape.constant(&h.states)?;
        for lv in vars.layers.iter().skip(h.layer) {
            x = self.block(&mut tape, lv, x, mask, n)?;
        }
        let logits = self.head_logits(&mut tape, &vars, x)?;
        let lt = tape.value_tensor(logits);
        let last = lt.row(lt.rows() - 1);
        let next = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("logits row is nonempty");
        Ok(next as u32)
    }

    /// Mean next-token cross-entropy over full texts, no gradient involvement.
    pub fn eval_loss(&self, texts: &[String]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for text in texts {
            let ids = self.tokenizer.tokenize(text);
            if ids.len() < 2 {
                continue;
            }
            let ids: Vec<u32> = ids.into_iter().take(self.cfg.max_seq_len).collect();
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, self.cfg.n_layers, Bind::Frozen)?;
            let loss = self.lm_loss(&mut tape, &vars, &ids)?;
            total += tape.scalar_value(loss) * (ids.len() - 1) as f64;
            count += ids.len() - 1;
        }
        if count == 0 {
            return Err(Error::Corpus("no scorable text".into()));
        }
        Ok(total / count as f64)
    }

    /// Capture internal states after `layer` (1-based) for a text. Over-long
    /// inputs are truncated and flagged, never dropped.
    pub fn capture_is(&self, text: &str, layer: usize) -> Result<InternalStates> {
        if layer == 0 || layer > self.cfg.n_layers {
            return Err(Error::Config(format!(
                "layer {} outside 1..={}",
                layer, self.cfg.n_layers
            )));
        }
        let mut ids = self.tokenizer.tokenize(text);
        if ids.is_empty() {
            return Err(Error::Corpus("cannot capture states of an empty token sequence".into()));
        }
        let truncated = ids.len() > self.cfg.max_seq_len;
        ids.truncate(self.cfg.max_seq_len);
        let ids_usize: Vec<usize> = ids.iter().map(|&t| t as usize).collect();

        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, layer, Bind::Frozen)?;
        let w = tape.embed_rows(vars.embedding, &ids_usize)?;
        let out = self.forward_prefix(&mut tape, &vars, w, layer)?;
        Ok(InternalStates {
            layer,
            states: tape.value_tensor(out),
            model_fingerprint: self.fingerprint(),
            truncated,
        })
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative number
/// above it (softmax then zeroes those weights).
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, -1e30);
        }
    }
    m
}
