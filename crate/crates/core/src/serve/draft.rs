//! Multi-token draft head: fuses the target's residual state with the
//! embedding of the next token, runs one transformer block, and reuses the
//! target's output projection. Each draft step consumes the previous draft
//! token and the draft's own hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::model::layers::{block_backward, block_forward, block_step, ln_backward, ln_forward, ln_row, split2, BlockLayout, LayerKv, LayoutBuilder, Seg, SegKind};
use crate::model::linalg::{gemm, row_affine, softmax_in_place};
use crate::model::train::{adam_update, global_norm, TrainConfig, TrainError};
use crate::model::{Model, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct DraftLayout {
    /// `2d x d`, input is `[hidden ; token embedding]`.
    pub w_fc: Seg,
    pub b_fc: Seg,
    pub block: BlockLayout,
    pub ln_g: Seg,
    pub ln_b: Seg,
    pub n: usize,
}

impl DraftLayout {
    pub fn new(d: usize, heads: usize) -> Self {
        let mut b = LayoutBuilder::default();
        let w_fc = b.seg(2 * d * d);
        let b_fc = b.seg(d);
        let block = BlockLayout::new(&mut b, d, heads);
        let ln_g = b.seg(d);
        let ln_b = b.seg(d);
        DraftLayout { w_fc, b_fc, block, ln_g, ln_b, n: b.n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftHead {
    pub layout: DraftLayout,
    pub params: Vec<f64>,
    pub d: usize,
    pub heads: usize,
}

/// One teacher-forced distillation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftSample {
    /// Target residual state at position `t`.
    pub hidden: Vec<f64>,
    /// Token at position `t + 1`.
    pub token: u32,
    /// Target's greedy prediction after position `t + 1`.
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DraftTrainReport {
    pub samples: usize,
    pub steps: u64,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Fraction of samples whose draft argmax equals the label after training.
    pub agreement: f64,
}

impl DraftHead {
    pub fn new(target: &Model, seed: u64) -> Self {
        let (d, heads) = (target.d(), target.cfg.n_heads);
        let layout = DraftLayout::new(d, heads);
        let mut params = vec![0.0; layout.n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, target.cfg.init_std).expect("validated init_std");
        layout.w_fc.of_mut(&mut params).iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        for (s, k) in layout.block.segments() {
            match k {
                SegKind::Matrix => s.of_mut(&mut params).iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
                SegKind::Gain => s.of_mut(&mut params).fill(1.0),
                SegKind::Zero => {}
            }
        }
        layout.ln_g.of_mut(&mut params).fill(1.0);
        DraftHead { layout, params, d, heads }
    }

    /// Rebuilds a head from saved parameters.
    pub fn from_params(target: &Model, params: Vec<f64>) -> Result<Self, ModelError> {
        let layout = DraftLayout::new(target.d(), target.cfg.n_heads);
        if params.len() != layout.n {
            return Err(ModelError::Config(format!("draft head expects {} params, got {}", layout.n, params.len())));
        }
        Ok(DraftHead { layout, params, d: target.d(), heads: target.cfg.n_heads })
    }

    fn fused_input(&self, target: &Model, hidden: &[f64], token: u32) -> Vec<f64> {
        let d = self.d;
        let te = target.layout.tok_emb.of(&target.params);
        let mut u = Vec::with_capacity(2 * d);
        u.extend_from_slice(hidden);
        u.extend_from_slice(&te[token as usize * d..(token as usize + 1) * d]);
        u
    }

    /// One chained draft step: returns the draft hidden state and logits.
    pub fn step(&self, target: &Model, kv: &mut LayerKv, hidden: &[f64], token: u32) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let u = self.fused_input(target, hidden, token);
        let mut a = vec![0.0; self.d];
        row_affine(&u, self.layout.w_fc.of(p), self.layout.b_fc.of(p), &mut a);
        let z = block_step(p, &self.layout.block, &a, kv);
        let mut zn = vec![0.0; self.d];
        ln_row(&z, self.layout.ln_g.of(p), self.layout.ln_b.of(p), &mut zn);
        let mut logits = vec![0.0; target.vocab_size()];
        row_affine(&zn, target.layout.w_out.of(&target.params), target.layout.b_out.of(&target.params), &mut logits);
        (z, logits)
    }

    /// Mean cross-entropy of the single-step draft against the labels.
    /// With `grad`, overwrites it with the gradient w.r.t. the draft
    /// parameters (the shared output projection stays frozen).
    pub fn loss_and_grad(&self, target: &Model, batch: &[DraftSample], mut grad: Option<&mut [f64]>) -> f64 {
        let (d, v) = (self.d, target.vocab_size());
        let p = &self.params;
        let w_out = target.layout.w_out.of(&target.params);
        let b_out = target.layout.b_out.of(&target.params);
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let n = batch.len().max(1) as f64;
        let mut total = 0.0;
        for s in batch {
            let u = self.fused_input(target, &s.hidden, s.token);
            let mut a = vec![0.0; d];
            row_affine(&u, self.layout.w_fc.of(p), self.layout.b_fc.of(p), &mut a);
            let (z, bc) = block_forward(p, &self.layout.block, &a);
            let (zn, lc) = ln_forward(&z, self.layout.ln_g.of(p), self.layout.ln_b.of(p));
            let mut logits = vec![0.0; v];
            row_affine(&zn, w_out, b_out, &mut logits);
            let raw = logits[s.label as usize];
            total -= raw - softmax_in_place(&mut logits);
            let Some(g) = grad.as_deref_mut() else { continue };
            logits[s.label as usize] -= 1.0;
            logits.iter_mut().for_each(|x| *x /= n);
            let mut dzn = vec![0.0; d];
            gemm(1, v, d, &logits, false, w_out, true, &mut dzn, 0.0);
            let (dg, db) = split2(g, self.layout.ln_g, self.layout.ln_b);
            let dz = ln_backward(&dzn, &lc, self.layout.ln_g.of(p), dg, db);
            let da = block_backward(p, &self.layout.block, &bc, &dz, g);
            let (dw, dbf) = split2(g, self.layout.w_fc, self.layout.b_fc);
            gemm(2 * d, 1, d, &u, true, &da, false, dw, 1.0);
            dbf.iter_mut().zip(&da).for_each(|(x, y)| *x += y);
        }
        total / n
    }

    /// Distils the target's greedy predictions into the head.
    pub fn train(&mut self, target: &Model, samples: &[DraftSample], epochs: usize, cfg: &TrainConfig, seed: u64) -> Result<DraftTrainReport, TrainError> {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut m, mut v, mut step) = (vec![0.0; self.params.len()], vec![0.0; self.params.len()], 0u64);
        let mut grad = vec![0.0; self.params.len()];
        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<DraftSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let loss = self.loss_and_grad(target, &batch, Some(&mut grad));
                if !loss.is_finite() || !global_norm(&grad).is_finite() {
                    return Err(TrainError::NonFinite { step, diagnostic: format!("draft head loss={loss}") });
                }
                if first_loss.is_nan() {
                    first_loss = loss;
                }
                last_loss = loss;
                adam_update(&mut self.params, &mut m, &mut v, &mut step, &mut grad, cfg);
            }
        }
        let agree = samples
            .iter()
            .filter(|s| {
                let (_, logits) = self.step(target, &mut LayerKv::default(), &s.hidden, s.token);
                argmax(&logits) == s.label
            })
            .count();
        Ok(DraftTrainReport {
            samples: samples.len(),
            steps: step,
            first_loss,
            last_loss,
            agreement: if samples.is_empty() { 0.0 } else { agree as f64 / samples.len() as f64 },
        })
    }
}

pub fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Teacher-forced samples over `records`: for each position `t` from the
/// second-to-last prompt token on, `(residual_t, token_{t+1}) -> greedy_{t+1}`.
pub fn distillation_samples(target: &Model, records: &[(Vec<u32>, usize)]) -> Result<Vec<DraftSample>, ModelError> {
    let d = target.d();
    let mut out = Vec::new();
    for (ids, prompt_len) in records {
        if ids.len() < 2 {
            continue;
        }
        let res = target.residuals(ids)?;
        let start = prompt_len.saturating_sub(2);
        for t in start..ids.len() - 1 {
            let next = &res[(t + 1) * d..(t + 2) * d];
            out.push(DraftSample { hidden: res[t * d..(t + 1) * d].to_vec(), token: ids[t + 1], label: argmax(&target.head(next)) });
        }
    }
    Ok(out)
}
