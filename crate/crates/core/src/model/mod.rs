//! Decoder-only transformer trained from scratch in f64, with a manual
//! backward pass, KV-cached inference, checkpoints, and a Markov baseline.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod markov;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusRecord, SpanLabel};
use layers::{block_backward, block_forward, block_step, ln_backward, ln_forward, ln_row, split2, BlockCache, BlockLayout, LayerKv, LayoutBuilder, LnCache, Seg, SegKind};
use linalg::{gemm, row_affine, softmax_in_place};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds context {context}")]
    TooLong { len: usize, context: usize },
    #[error("token id {0} outside vocabulary")]
    BadToken(u32),
    #[error("no active target positions")]
    EmptyTargets,
    #[error("target position {pos} outside sequence of {len}")]
    BadTarget { pos: usize, len: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    /// Only 0.0 is supported.
    pub dropout: f64,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 128, n_heads: 4, n_layers: 4, context_len: 512, vocab_size: 0, dropout: 0.0, seed: 0, init_std: 0.02 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size == 0 || self.context_len == 0 {
            return bad("vocab_size and context_len must be positive");
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported (must be 0.0)");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, c) = (self.vocab_size, self.d_model, self.context_len);
        2 * v * d + c * d + v + 2 * d + self.n_layers * BlockLayout::param_count(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub tok_emb: Seg,
    pub pos_emb: Seg,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Seg,
    pub lnf_b: Seg,
    pub w_out: Seg,
    pub b_out: Seg,
    pub n: usize,
}

impl ModelLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let d = cfg.d_model;
        let tok_emb = b.seg(cfg.vocab_size * d);
        let pos_emb = b.seg(cfg.context_len * d);
        let blocks = (0..cfg.n_layers).map(|_| BlockLayout::new(&mut b, d, cfg.n_heads)).collect();
        let lnf_g = b.seg(d);
        let lnf_b = b.seg(d);
        let w_out = b.seg(d * cfg.vocab_size);
        let b_out = b.seg(cfg.vocab_size);
        ModelLayout { tok_emb, pos_emb, blocks, lnf_g, lnf_b, w_out, b_out, n: b.n }
    }
}

/// Training example: `targets[k] = (i, t)` asks the output at position `i` to predict token `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Next-token prediction at every position.
    Causal,
    /// Each masked position predicts its original token.
    Masked,
    /// Next-token prediction of response-span tokens only.
    Response,
}

impl Example {
    pub fn causal(ids: &[u32]) -> Example {
        Example { input: ids.to_vec(), targets: (0..ids.len().saturating_sub(1)).map(|i| (i, ids[i + 1])).collect() }
    }

    /// `masked` comes from `corpus::mask_for_pretraining`.
    pub fn masked(masked_input: Vec<u32>, masked: &[(usize, u32)]) -> Example {
        Example { input: masked_input, targets: masked.to_vec() }
    }

    /// Causal targets over `original` with a (possibly masked) input.
    pub fn denoising(masked_input: Vec<u32>, original: &[u32]) -> Example {
        let targets = (0..original.len().saturating_sub(1)).map(|i| (i, original[i + 1])).collect();
        Example { input: masked_input, targets }
    }

    pub fn response(r: &CorpusRecord) -> Example {
        let span = r.span(SpanLabel::Response);
        let targets = match span {
            Some(s) => (s.start.max(1)..s.end).map(|j| (j - 1, r.token_ids[j])).collect(),
            None => Vec::new(),
        };
        Example { input: r.token_ids.clone(), targets }
    }

    pub fn for_mode(r: &CorpusRecord, mode: LossMode, masked: Option<(Vec<u32>, Vec<(usize, u32)>)>) -> Example {
        match (mode, masked) {
            (LossMode::Causal, _) => Example::causal(&r.token_ids),
            (LossMode::Masked, Some((input, t))) => Example::masked(input, &t),
            (LossMode::Masked, None) => Example { input: r.token_ids.clone(), targets: Vec::new() },
            (LossMode::Response, _) => Example::response(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: ModelLayout,
    pub params: Vec<f64>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hidden: Vec<f64>,
}

/// Per-layer KV cache plus the residual-stream state of the last processed position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub len: usize,
}

impl KvCache {
    pub fn truncate(&mut self, len: usize, d: usize) {
        for l in &mut self.layers {
            l.truncate(len, d);
        }
        self.len = self.len.min(len);
    }
}

/// Output of one incremental step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOut {
    pub logits: Vec<f64>,
    /// Residual stream before the final layer norm.
    pub hidden: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model, ModelError> {
        cfg.validate()?;
        let layout = ModelLayout::new(&cfg);
        let mut params = vec![0.0; layout.n];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut fill = |s: Seg, kind: SegKind, p: &mut [f64]| match kind {
            SegKind::Matrix => s.of_mut(p).iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
            SegKind::Gain => s.of_mut(p).fill(1.0),
            SegKind::Zero => {}
        };
        fill(layout.tok_emb, SegKind::Matrix, &mut params);
        fill(layout.pos_emb, SegKind::Matrix, &mut params);
        for b in &layout.blocks {
            for (s, k) in b.segments() {
                fill(s, k, &mut params);
            }
        }
        fill(layout.lnf_g, SegKind::Gain, &mut params);
        fill(layout.w_out, SegKind::Matrix, &mut params);
        Ok(Model { cfg, layout, params })
    }

    pub fn d(&self) -> usize {
        self.cfg.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn check_input(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.len() > self.cfg.context_len {
            return Err(ModelError::TooLong { len: ids.len(), context: self.cfg.context_len });
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::BadToken(*bad));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Vec<f64> {
        let d = self.d();
        let (te, pe) = (self.layout.tok_emb.of(&self.params), self.layout.pos_emb.of(&self.params));
        let mut x = vec![0.0; ids.len() * d];
        for (i, &t) in ids.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            let tr = &te[t as usize * d..(t as usize + 1) * d];
            let pr = &pe[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] = tr[j] + pr[j];
            }
        }
        x
    }

    fn forward_train(&self, ids: &[u32]) -> ForwardCache {
        let mut x = self.embed(ids);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for b in &self.layout.blocks {
            let (y, c) = block_forward(&self.params, b, &x);
            blocks.push(c);
            x = y;
        }
        let (hidden, lnf) = ln_forward(&x, self.layout.lnf_g.of(&self.params), self.layout.lnf_b.of(&self.params));
        ForwardCache { blocks, lnf, hidden }
    }

    /// Residual stream before the final layer norm, `len x d`.
    pub fn residuals(&self, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.check_input(ids)?;
        let mut x = self.embed(ids);
        for b in &self.layout.blocks {
            x = block_forward(&self.params, b, &x).0;
        }
        Ok(x)
    }

    /// Final (post layer norm) hidden states, `len x d`.
    pub fn final_hidden(&self, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.check_input(ids)?;
        Ok(self.forward_train(ids).hidden)
    }

    /// Logits at every position via the full (uncached) forward pass.
    pub fn forward_logits(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_input(ids)?;
        let c = self.forward_train(ids);
        let (d, v) = (self.d(), self.vocab_size());
        let mut logits = vec![0.0; ids.len() * v];
        gemm(ids.len(), d, v, &c.hidden, false, self.layout.w_out.of(&self.params), false, &mut logits, 0.0);
        linalg::add_bias(&mut logits, self.layout.b_out.of(&self.params));
        Ok(logits.chunks(v).map(<[f64]>::to_vec).collect())
    }

    /// Next-token distributions at every position.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut rows = self.forward_logits(ids)?;
        rows.iter_mut().for_each(|r| {
            softmax_in_place(r);
        });
        Ok(rows)
    }

    /// Sum of target log-probabilities. With `grad`, also accumulates
    /// `coef * d(sum)/d(params)` into it.
    pub fn logprob_and_grad(&self, ex: &Example, coef: f64, grad: Option<&mut [f64]>) -> Result<f64, ModelError> {
        self.check_input(&ex.input)?;
        let t = ex.input.len();
        if let Some(&(pos, _)) = ex.targets.iter().find(|(p, _)| *p >= t) {
            return Err(ModelError::BadTarget { pos, len: t });
        }
        if let Some(&(_, tok)) = ex.targets.iter().find(|(_, tk)| *tk as usize >= self.vocab_size()) {
            return Err(ModelError::BadToken(tok));
        }
        let (d, v) = (self.d(), self.vocab_size());
        let cache = self.forward_train(&ex.input);
        let n = ex.targets.len();
        let mut ha = vec![0.0; n * d];
        for (k, &(pos, _)) in ex.targets.iter().enumerate() {
            ha[k * d..(k + 1) * d].copy_from_slice(&cache.hidden[pos * d..(pos + 1) * d]);
        }
        let mut logits = vec![0.0; n * v];
        gemm(n, d, v, &ha, false, self.layout.w_out.of(&self.params), false, &mut logits, 0.0);
        linalg::add_bias(&mut logits, self.layout.b_out.of(&self.params));
        let mut total = 0.0;
        for (k, &(_, tok)) in ex.targets.iter().enumerate() {
            let row = &mut logits[k * v..(k + 1) * v];
            let raw = row[tok as usize];
            total += raw - softmax_in_place(row);
        }
        let Some(grad) = grad else {
            return Ok(total);
        };
        // d(log p_tok)/d(logits) = onehot - p.
        for (k, &(_, tok)) in ex.targets.iter().enumerate() {
            let row = &mut logits[k * v..(k + 1) * v];
            row.iter_mut().for_each(|x| *x *= -coef);
            row[tok as usize] += coef;
        }
        let dlogits = logits;
        gemm(d, n, v, &ha, true, &dlogits, false, self.layout.w_out.of_mut(grad), 1.0);
        linalg::add_col_sums(&dlogits, self.layout.b_out.of_mut(grad));
        let mut dha = vec![0.0; n * d];
        gemm(n, v, d, &dlogits, false, self.layout.w_out.of(&self.params), true, &mut dha, 0.0);
        let mut dhidden = vec![0.0; t * d];
        for (k, &(pos, _)) in ex.targets.iter().enumerate() {
            dhidden[pos * d..(pos + 1) * d].iter_mut().zip(&dha[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
        }
        let (dg, db) = split2(grad, self.layout.lnf_g, self.layout.lnf_b);
        let mut dx = ln_backward(&dhidden, &cache.lnf, self.layout.lnf_g.of(&self.params), dg, db);
        for (b, c) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(&self.params, b, c, &dx, grad);
        }
        let (dte, dpe) = split2(grad, self.layout.tok_emb, self.layout.pos_emb);
        for (i, &tok) in ex.input.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            dte[tok as usize * d..(tok as usize + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            dpe[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Ok(total)
    }

    /// Mean NLL over all targets of the batch.
    pub fn loss(&self, batch: &[Example]) -> Result<f64, ModelError> {
        let n: usize = batch.iter().map(|e| e.targets.len()).sum();
        if n == 0 {
            return Err(ModelError::EmptyTargets);
        }
        let mut total = 0.0;
        for ex in batch {
            total += self.logprob_and_grad(ex, 0.0, None)?;
        }
        Ok(-total / n as f64)
    }

    /// Mean NLL and its gradient (overwrites `grad`).
    pub fn loss_and_grad(&self, batch: &[Example], grad: &mut [f64]) -> Result<f64, ModelError> {
        let n: usize = batch.iter().map(|e| e.targets.len()).sum();
        if n == 0 {
            return Err(ModelError::EmptyTargets);
        }
        grad.fill(0.0);
        let coef = -1.0 / n as f64;
        let mut total = 0.0;
        for ex in batch {
            total += self.logprob_and_grad(ex, coef, Some(grad))?;
        }
        Ok(-total / n as f64)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache { layers: vec![LayerKv::default(); self.layout.blocks.len()], len: 0 }
    }

    /// Feeds one token at position `cache.len`.
    pub fn step(&self, cache: &mut KvCache, token: u32) -> Result<StepOut, ModelError> {
        if cache.len >= self.cfg.context_len {
            return Err(ModelError::TooLong { len: cache.len + 1, context: self.cfg.context_len });
        }
        if token as usize >= self.vocab_size() {
            return Err(ModelError::BadToken(token));
        }
        let d = self.d();
        let p = &self.params;
        let (te, pe) = (self.layout.tok_emb.of(p), self.layout.pos_emb.of(p));
        let pos = cache.len;
        let mut x: Vec<f64> = (0..d).map(|j| te[token as usize * d + j] + pe[pos * d + j]).collect();
        for (b, kv) in self.layout.blocks.iter().zip(cache.layers.iter_mut()) {
            x = block_step(p, b, &x, kv);
        }
        cache.len += 1;
        Ok(StepOut { logits: self.head(&x), hidden: x })
    }

    /// Final layer norm then output projection for one residual row.
    pub fn head(&self, hidden: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let mut h = vec![0.0; self.d()];
        ln_row(hidden, self.layout.lnf_g.of(p), self.layout.lnf_b.of(p), &mut h);
        let mut logits = vec![0.0; self.vocab_size()];
        row_affine(&h, self.layout.w_out.of(p), self.layout.b_out.of(p), &mut logits);
        logits
    }

    /// Runs the prompt through the cache; returns the last position's output.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(KvCache, StepOut), ModelError> {
        self.check_input(prompt)?;
        let Some((&last, head)) = prompt.split_last() else {
            return Err(ModelError::EmptyTargets);
        };
        let mut cache = self.new_cache();
        for &t in head {
            self.step(&mut cache, t)?;
        }
        let out = self.step(&mut cache, last)?;
        Ok((cache, out))
    }
}
