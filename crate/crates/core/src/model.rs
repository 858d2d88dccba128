//! The tiny transformer: a shared pre-norm encoder, an action-word
//! classification head, a vocabulary head, and a decoder with cross
//! attention. Forward passes run on the autodiff tape so the same code path
//! serves training, inference, and finite-difference checks.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, Tensor};
use crate::mask::VisMask;
use crate::{subseed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub seed: u64,
    pub tie_lm_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 512,
            max_len: 384,
            vocab_size: 8192,
            n_classes: 41,
            dropout: 0.1,
            seed: 0,
            tie_lm_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Model(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.vocab_size <= crate::tokenizer::N_SPECIALS {
            return Err(Error::Model("vocab_size smaller than the special tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
}

fn build_schema(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut s: Vec<ParamSpec> = Vec::new();
    let push = |s: &mut Vec<ParamSpec>, name: String, rows: usize, cols: usize| {
        s.push(ParamSpec { name, rows, cols });
    };
    let attn = |s: &mut Vec<ParamSpec>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            s.push(ParamSpec { name: format!("{prefix}.{w}"), rows: d, cols: d });
        }
        for b in ["bq", "bk", "bv", "bo"] {
            s.push(ParamSpec { name: format!("{prefix}.{b}"), rows: 1, cols: d });
        }
    };
    let ln = |s: &mut Vec<ParamSpec>, prefix: &str| {
        s.push(ParamSpec { name: format!("{prefix}.g"), rows: 1, cols: d });
        s.push(ParamSpec { name: format!("{prefix}.b"), rows: 1, cols: d });
    };
    let ffn = |s: &mut Vec<ParamSpec>, prefix: &str| {
        s.push(ParamSpec { name: format!("{prefix}.w1"), rows: d, cols: cfg.d_ffn });
        s.push(ParamSpec { name: format!("{prefix}.b1"), rows: 1, cols: cfg.d_ffn });
        s.push(ParamSpec { name: format!("{prefix}.w2"), rows: cfg.d_ffn, cols: d });
        s.push(ParamSpec { name: format!("{prefix}.b2"), rows: 1, cols: d });
    };

    push(&mut s, "embed.tok".into(), cfg.vocab_size, d);
    push(&mut s, "embed.pos".into(), cfg.max_len, d);
    for i in 0..cfg.n_layers {
        ln(&mut s, &format!("enc.{i}.ln1"));
        attn(&mut s, &format!("enc.{i}.attn"));
        ln(&mut s, &format!("enc.{i}.ln2"));
        ffn(&mut s, &format!("enc.{i}.ffn"));
    }
    ln(&mut s, "enc.final_ln");
    for i in 0..cfg.n_layers {
        ln(&mut s, &format!("dec.{i}.ln1"));
        attn(&mut s, &format!("dec.{i}.self"));
        ln(&mut s, &format!("dec.{i}.ln2"));
        attn(&mut s, &format!("dec.{i}.cross"));
        ln(&mut s, &format!("dec.{i}.ln3"));
        ffn(&mut s, &format!("dec.{i}.ffn"));
    }
    ln(&mut s, "dec.final_ln");
    push(&mut s, "awp.w".into(), d, cfg.n_classes);
    push(&mut s, "awp.b".into(), 1, cfg.n_classes);
    if !cfg.tie_lm_head {
        push(&mut s, "lm.w".into(), d, cfg.vocab_size);
    }
    push(&mut s, "lm.b".into(), 1, cfg.vocab_size);
    s
}

/// All trainable weights, stored flat in schema order and addressed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    schema: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl Parameters {
    /// Seeded init: N(0, 0.02) for weight matrices and embeddings, zeros for
    /// biases, ones for layer-norm gains.
    pub fn init(cfg: &ModelConfig) -> Parameters {
        let schema = build_schema(cfg);
        let mut tensors = Vec::with_capacity(schema.len());
        for (i, spec) in schema.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "init", i as u64));
            let last = spec.name.rsplit('.').next().unwrap_or("");
            let t = if last == "g" {
                Tensor::from_vec(spec.rows, spec.cols, vec![1.0; spec.rows * spec.cols])
            } else if last.starts_with('b') {
                Tensor::zeros(spec.rows, spec.cols)
            } else {
                let data = (0..spec.rows * spec.cols).map(|_| 0.02 * normal(&mut rng)).collect();
                Tensor::from_vec(spec.rows, spec.cols, data)
            };
            tensors.push(t);
        }
        let by_name = schema.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Parameters { schema, tensors, by_name }
    }

    /// Same schema, every tensor zero. Handy for loss identities in tests.
    pub fn zeros_like(cfg: &ModelConfig) -> Parameters {
        let mut p = Parameters::init(cfg);
        for t in &mut p.tensors {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        p
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.schema.iter().map(|s| s.name.as_str())
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.schema[idx].name
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.by_name[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.by_name[name];
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, one sample per pair of draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-position hidden states from the encoder (L x d_model).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding(pub Tensor);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Cross-attention weights captured during a decode: per layer, per head,
/// a (target_len x code_len) row-stochastic matrix.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CrossAttnDump {
    pub layers: Vec<AttnLayerDump>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AttnLayerDump {
    pub heads: Vec<Vec<Vec<f64>>>,
}

/// One forward tape over a fixed parameter set. All task losses of a
/// training step share the context so the summed loss backpropagates once.
pub struct ForwardCtx<'a> {
    cfg: &'a ModelConfig,
    params: &'a Parameters,
    g: Graph,
    param_nodes: Vec<NodeId>,
    dropout_rng: Option<ChaCha8Rng>,
    record_attn: bool,
    cross_attn: CrossAttnDump,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Parameters, mode: Mode) -> ForwardCtx<'a> {
        let mut g = Graph::new();
        let param_nodes = params.tensors.iter().map(|t| g.param(t.clone())).collect();
        let dropout_rng = match mode {
            Mode::Eval => None,
            Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        };
        ForwardCtx {
            cfg,
            params,
            g,
            param_nodes,
            dropout_rng,
            record_attn: false,
            cross_attn: CrossAttnDump::default(),
        }
    }

    pub fn record_cross_attention(&mut self) {
        self.record_attn = true;
    }

    pub fn cross_attention(&self) -> &CrossAttnDump {
        &self.cross_attn
    }

    fn p(&self, name: &str) -> NodeId {
        self.param_nodes[self.params.by_name[name]]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.g.value(id)
    }

    pub fn graph(&mut self) -> &mut Graph {
        &mut self.g
    }

    fn maybe_dropout(&mut self, x: NodeId) -> NodeId {
        match &mut self.dropout_rng {
            Some(rng) if self.cfg.dropout > 0.0 => self.g.dropout(x, self.cfg.dropout, rng),
            _ => x,
        }
    }

    fn embed(&mut self, ids: &[u32]) -> Result<NodeId> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::Model(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::Model(format!(
                "token id {bad} out of range for vocab size {}",
                self.cfg.vocab_size
            )));
        }
        let tok = self.p("embed.tok");
        let pos = self.p("embed.pos");
        let te = self.g.embedding(tok, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = self.g.select_rows(pos, &positions);
        let sum = self.g.add(te, pe);
        Ok(self.maybe_dropout(sum))
    }

    /// Multi-head attention. Queries come from `x`; keys and values from
    /// `kv` (self-attention when `kv == x`). `record` stashes the attention
    /// probabilities per head.
    fn attention(
        &mut self,
        prefix: &str,
        x: NodeId,
        kv: NodeId,
        vis: &VisMask,
        record: Option<&mut AttnLayerDump>,
    ) -> NodeId {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let (wq, bq) = (self.p(&format!("{prefix}.wq")), self.p(&format!("{prefix}.bq")));
        let (wk, bk) = (self.p(&format!("{prefix}.wk")), self.p(&format!("{prefix}.bk")));
        let (wv, bv) = (self.p(&format!("{prefix}.wv")), self.p(&format!("{prefix}.bv")));
        let (wo, bo) = (self.p(&format!("{prefix}.wo")), self.p(&format!("{prefix}.bo")));

        let q = self.g.matmul(x, wq);
        let q = self.g.add_row(q, bq);
        let k = self.g.matmul(kv, wk);
        let k = self.g.add_row(k, bk);
        let v = self.g.matmul(kv, wv);
        let v = self.g.add_row(v, bv);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        let mut recorded: Vec<Vec<Vec<f64>>> = Vec::new();
        for i in 0..h {
            let qh = self.g.slice_cols(q, i * dh, dh);
            let kh = self.g.slice_cols(k, i * dh, dh);
            let vh = self.g.slice_cols(v, i * dh, dh);
            let kt = self.g.transpose(kh);
            let scores = self.g.matmul(qh, kt);
            let scores = self.g.scale(scores, scale);
            let probs = self.g.masked_softmax(scores, vis);
            if record.is_some() {
                let t = self.g.value(probs);
                let rows = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
                recorded.push(rows);
            }
            heads.push(self.g.matmul(probs, vh));
        }
        if let Some(dump) = record {
            dump.heads = recorded;
        }
        let ctx = self.g.concat_cols(&heads);
        let out = self.g.matmul(ctx, wo);
        let out = self.g.add_row(out, bo);
        self.maybe_dropout(out)
    }

    fn layer_norm(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let gamma = self.p(&format!("{prefix}.g"));
        let beta = self.p(&format!("{prefix}.b"));
        self.g.layer_norm(x, gamma, beta)
    }

    fn ffn(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.g.matmul(x, w1);
        let h = self.g.add_row(h, b1);
        let h = self.g.gelu(h);
        let o = self.g.matmul(h, w2);
        let o = self.g.add_row(o, b2);
        self.maybe_dropout(o)
    }

    /// Encoder stack under an arbitrary visibility mask.
    pub fn encode(&mut self, ids: &[u32], vis: &VisMask) -> Result<NodeId> {
        if vis.rows() != ids.len() || vis.cols() != ids.len() {
            return Err(Error::Model(format!(
                "mask is {}x{} but sequence has {} positions",
                vis.rows(),
                vis.cols(),
                ids.len()
            )));
        }
        let mut x = self.embed(ids)?;
        for layer in 0..self.cfg.n_layers {
            let a = self.layer_norm(&format!("enc.{layer}.ln1"), x);
            let attn = self.attention(&format!("enc.{layer}.attn"), a, a, vis, None);
            x = self.g.add(x, attn);
            let f = self.layer_norm(&format!("enc.{layer}.ln2"), x);
            let ff = self.ffn(&format!("enc.{layer}.ffn"), f);
            x = self.g.add(x, ff);
            if !self.g.value(x).is_finite() {
                return Err(Error::NonFiniteActivation { layer });
            }
        }
        Ok(self.layer_norm("enc.final_ln", x))
    }

    /// Classification logits from the pooled (position 0) encoder state.
    pub fn awp_logits(&mut self, enc: NodeId) -> Result<NodeId> {
        if self.g.value(enc).cols() != self.cfg.d_model {
            return Err(Error::Model("encoding width does not match d_model".into()));
        }
        let pooled = self.g.select_rows(enc, &[0]);
        let w = self.p("awp.w");
        let b = self.p("awp.b");
        let x = self.g.matmul(pooled, w);
        Ok(self.g.add_row(x, b))
    }

    /// Vocabulary logits at the requested positions only.
    pub fn lm_logits(&mut self, enc: NodeId, positions: &[usize]) -> Result<NodeId> {
        let v = self.g.value(enc);
        if let Some(&bad) = positions.iter().find(|&&p| p >= v.rows()) {
            return Err(Error::Model(format!("logit position {bad} out of range")));
        }
        let sel = self.g.select_rows(enc, positions);
        let b = self.p("lm.b");
        let logits = if self.cfg.tie_lm_head {
            let tok = self.p("embed.tok");
            let wt = self.g.transpose(tok);
            self.g.matmul(sel, wt)
        } else {
            let w = self.p("lm.w");
            self.g.matmul(sel, w)
        };
        Ok(self.g.add_row(logits, b))
    }

    /// Decoder stack: causal self-attention over the shifted summary,
    /// cross-attention into the code encoding, vocabulary logits per position.
    pub fn decode(
        &mut self,
        e_code: NodeId,
        input_ids: &[u32],
        code_visible: &[bool],
    ) -> Result<NodeId> {
        if input_ids.is_empty() {
            return Err(Error::Model("decoder input is empty".into()));
        }
        if self.g.value(e_code).rows() != code_visible.len() {
            return Err(Error::Model("code visibility length mismatch".into()));
        }
        let t = input_ids.len();
        let causal = VisMask::causal(t);
        let cross_vis = VisMask::broadcast_cols(t, code_visible);

        let mut x = self.embed(input_ids)?;
        let record = self.record_attn;
        for layer in 0..self.cfg.n_layers {
            let a = self.layer_norm(&format!("dec.{layer}.ln1"), x);
            let sa = self.attention(&format!("dec.{layer}.self"), a, a, &causal, None);
            x = self.g.add(x, sa);

            let c = self.layer_norm(&format!("dec.{layer}.ln2"), x);
            let mut dump = AttnLayerDump::default();
            let ca = self.attention(
                &format!("dec.{layer}.cross"),
                c,
                e_code,
                &cross_vis,
                record.then_some(&mut dump),
            );
            if record {
                self.cross_attn.layers.push(dump);
            }
            x = self.g.add(x, ca);

            let f = self.layer_norm(&format!("dec.{layer}.ln3"), x);
            let ff = self.ffn(&format!("dec.{layer}.ffn"), f);
            x = self.g.add(x, ff);
            if !self.g.value(x).is_finite() {
                return Err(Error::NonFiniteActivation { layer });
            }
        }
        let x = self.layer_norm("dec.final_ln", x);
        let all: Vec<usize> = (0..t).collect();
        self.lm_logits(x, &all)
    }

    /// Gradients for every parameter tensor, in schema order. NaN or
    /// infinite gradients abort with the parameter name.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Tensor>> {
        let grads = self.g.backward(loss);
        let mut out = Vec::with_capacity(self.param_nodes.len());
        for (i, node) in self.param_nodes.iter().enumerate() {
            let spec = &self.params.schema[i];
            let g = grads[node.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(spec.rows, spec.cols));
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: spec.name.clone() });
            }
            out.push(g);
        }
        Ok(out)
    }
}

/// Eval-mode encoder pass returning concrete hidden states.
pub fn encode(cfg: &ModelConfig, params: &Parameters, ids: &[u32], vis: &VisMask) -> Result<Encoding> {
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
    let node = ctx.encode(ids, vis)?;
    Ok(Encoding(ctx.value(node).clone()))
}

/// Classification logits for a pooled encoding (1 x n_classes).
pub fn awp_logits(cfg: &ModelConfig, params: &Parameters, enc: &Encoding) -> Result<Tensor> {
    if enc.0.cols() != cfg.d_model {
        return Err(Error::Model("encoding width does not match d_model".into()));
    }
    let pooled = Tensor::from_vec(1, cfg.d_model, enc.0.row(0).to_vec());
    let mut out = pooled.matmul(params.get("awp.w"));
    out.add_assign(params.get("awp.b"));
    Ok(out)
}

/// Vocabulary logits at selected positions (positions.len() x vocab).
pub fn lm_logits(
    cfg: &ModelConfig,
    params: &Parameters,
    enc: &Encoding,
    positions: &[usize],
) -> Result<Tensor> {
    if positions.is_empty() {
        return Ok(Tensor::zeros(0, cfg.vocab_size));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= enc.0.rows()) {
        return Err(Error::Model(format!("logit position {bad} out of range")));
    }
    let mut sel = Tensor::zeros(positions.len(), cfg.d_model);
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..cfg.d_model {
            sel.set(i, j, enc.0.get(p, j));
        }
    }
    let mut logits = if cfg.tie_lm_head {
        sel.matmul(&params.get("embed.tok").transpose())
    } else {
        sel.matmul(params.get("lm.w"))
    };
    let b = params.get("lm.b");
    for i in 0..logits.rows() {
        for j in 0..logits.cols() {
            let v = logits.get(i, j) + b.get(0, j);
            logits.set(i, j, v);
        }
    }
    Ok(logits)
}

/// Eval-mode decoder pass (teacher-forced input, per-position logits).
pub fn decode_forward(
    cfg: &ModelConfig,
    params: &Parameters,
    e_code: &Encoding,
    input_ids: &[u32],
    code_visible: &[bool],
) -> Result<Tensor> {
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
    let code = ctx.graph().constant(e_code.0.clone());
    let node = ctx.decode(code, input_ids, code_visible)?;
    Ok(ctx.value(node).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates, aligned with the parameter schema.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> AdamState {
        let zeros: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Decoupled-weight-decay Adam update over the trainable subset. Tensors for
/// which `trainable` is false are left untouched, moments included. `lr` is
/// the effective (possibly warmed-up) learning rate for this step.
#[allow(clippy::needless_range_loop)] // five parallel tensor arrays
pub fn adamw_step(
    params: &mut Parameters,
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamHyper,
    lr: f64,
    trainable: &dyn Fn(&str) -> bool,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.tensors.len() {
        if !trainable(&params.schema[i].name) {
            continue;
        }
        let p = &mut params.tensors[i];
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * *pv);
        }
    }
}

/// Scale gradients so their global L2 norm (over the trainable subset) does
/// not exceed `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(
    params: &Parameters,
    grads: &mut [Tensor],
    max_norm: f64,
    trainable: &dyn Fn(&str) -> bool,
) -> f64 {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if trainable(&params.schema[i].name) {
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (i, g) in grads.iter_mut().enumerate() {
            if trainable(&params.schema[i].name) {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    label: String,
    vocab_fingerprint: u64,
    tensors: Vec<ParamSpec>,
    has_optimizer: bool,
    opt_step: u64,
}

const CKPT_MAGIC: &[u8; 8] = b"SACKPT01";

/// Self-describing checkpoint: JSON header plus raw little-endian f64 data
/// for parameters and, when present, optimizer moments. Round trips are
/// bit-exact.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub opt: Option<AdamState>,
    pub step: u64,
    pub label: String,
    pub vocab_fingerprint: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
            label: self.label.clone(),
            vocab_fingerprint: self.vocab_fingerprint,
            tensors: self.params.schema.clone(),
            has_optimizer: self.opt.is_some(),
            opt_step: self.opt.as_ref().map_or(0, |o| o.step),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let werr = |e: std::io::Error| Error::io(path.display().to_string(), e);
        f.write_all(CKPT_MAGIC).map_err(werr)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(werr)?;
        f.write_all(&header_json).map_err(werr)?;
        let write_tensors = |f: &mut std::fs::File, ts: &[Tensor]| -> Result<()> {
            let mut buf = Vec::new();
            for t in ts {
                for &v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
        };
        write_tensors(&mut f, &self.params.tensors)?;
        if let Some(opt) = &self.opt {
            write_tensors(&mut f, &opt.m)?;
            write_tensors(&mut f, &opt.v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let rerr = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(rerr)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8).map_err(rerr)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf).map_err(rerr)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;

        let expected = build_schema(&header.config);
        if expected != header.tensors {
            return Err(Error::Checkpoint("tensor manifest does not match config".into()));
        }
        let read_tensors = |f: &mut std::fs::File| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(expected.len());
            for spec in &expected {
                let n = spec.rows * spec.cols;
                let mut buf = vec![0u8; n * 8];
                f.read_exact(&mut buf)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                let data: Vec<f64> = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                out.push(Tensor::from_vec(spec.rows, spec.cols, data));
            }
            Ok(out)
        };
        let tensors = read_tensors(&mut f)?;
        let opt = if header.has_optimizer {
            let m = read_tensors(&mut f)?;
            let v = read_tensors(&mut f)?;
            Some(AdamState { m, v, step: header.opt_step })
        } else {
            None
        };
        let by_name = expected.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Checkpoint {
            params: Parameters { schema: expected, tensors, by_name },
            config: header.config,
            opt,
            step: header.step,
            label: header.label,
            vocab_fingerprint: header.vocab_fingerprint,
        })
    }
}
