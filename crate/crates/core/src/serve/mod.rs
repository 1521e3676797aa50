//! Inference: trie-constrained greedy decoding of SIDs with separate
//! prefill and decode stages, and lossless speculative decoding with a
//! draft head.

pub mod draft;
pub mod pipeline;
pub mod server;
pub mod trie;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::PoiId;
use crate::corpus::CorpusError;
use crate::model::layers::LayerKv;
use crate::model::{KvCache, Model, ModelError};
use draft::DraftHead;
use trie::{constrained_greedy, SidTrie, TrieNode};

pub const DEFAULT_GAMMA: usize = 3;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("duplicate SID path: {0}")]
    DuplicatePath(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("speculative decoding requested but no draft head is loaded")]
    NoDraftHead,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Vanilla,
    Speculative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRequest {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
}

/// Result of one request. `tokens` always form a trie path from the root.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeResult {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub poi_id: Option<PoiId>,
    pub prefill_ms: f64,
    pub decode_ms: f64,
    /// Completion minus arrival, set by the pipeline.
    pub latency_ms: f64,
    pub rounds: usize,
    pub drafted: usize,
    pub accepted: usize,
}

/// State handed from the prefill stage to the decode stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefilled {
    pub cache: KvCache,
    /// Next-token logits after the last prompt token.
    pub logits: Vec<f64>,
    /// Residual state of the last prompt token.
    pub hidden: Vec<f64>,
    /// Residual state of the position before it (zeros for one-token prompts).
    pub prev_hidden: Vec<f64>,
    pub last_token: u32,
    pub prefill_ms: f64,
}

pub fn prefill(model: &Model, prompt: &[u32]) -> Result<Prefilled, ServeError> {
    let start = Instant::now();
    if prompt.is_empty() {
        return Err(ServeError::EmptyPrompt);
    }
    if prompt.len() > model.cfg.context_len {
        return Err(ModelError::TooLong { len: prompt.len(), context: model.cfg.context_len }.into());
    }
    let mut cache = model.new_cache();
    let mut prev_hidden = vec![0.0; model.d()];
    let mut out = None;
    for &t in prompt {
        let o = model.step(&mut cache, t)?;
        if let Some(old) = out.replace(o) {
            prev_hidden = old.hidden;
        }
    }
    let out = out.expect("non-empty prompt");
    Ok(Prefilled {
        cache,
        logits: out.logits,
        hidden: out.hidden,
        prev_hidden,
        last_token: *prompt.last().expect("non-empty prompt"),
        prefill_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Generated tokens plus draft statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub rounds: usize,
    pub drafted: usize,
    pub accepted: usize,
}

/// One decode step: constrained greedy token, appended to the cache.
/// Returns the token and the node reached.
pub fn decode_step(model: &Model, trie: &SidTrie, cache: &mut KvCache, logits: &mut Vec<f64>, node: TrieNode) -> Result<(u32, TrieNode), ServeError> {
    let tok = constrained_greedy(logits, trie, node);
    let next = trie.advance(node, tok).expect("greedy picks a child");
    if !trie.is_leaf(next) {
        *logits = model.step(cache, tok)?.logits;
    }
    Ok((tok, next))
}

/// Vanilla constrained greedy decoding until a leaf or `max_new_tokens`.
pub fn greedy_decode(model: &Model, trie: &SidTrie, pre: Prefilled, max_new_tokens: usize) -> Result<Generation, ServeError> {
    let Prefilled { mut cache, mut logits, .. } = pre;
    let mut node = SidTrie::ROOT;
    let mut g = Generation::default();
    while g.tokens.len() < max_new_tokens && !trie.is_leaf(node) {
        let (tok, next) = decode_step(model, trie, &mut cache, &mut logits, node)?;
        g.tokens.push(tok);
        node = next;
    }
    Ok(g)
}

/// What a drafter sees at the start of a round.
pub struct DraftContext<'a> {
    /// Residual state of the position that predicted `last`.
    pub hidden: &'a [f64],
    /// Most recent known token (last prompt token or last emitted token).
    pub last: u32,
    /// Trie node after the tokens emitted so far.
    pub node: TrieNode,
    pub emitted: &'a [u32],
}

/// Proposes up to `gamma` draft tokens.
pub trait Drafter: Send + Sync {
    fn propose(&self, target: &Model, trie: &SidTrie, ctx: &DraftContext<'_>, gamma: usize) -> Vec<u32>;
}

impl Drafter for DraftHead {
    fn propose(&self, target: &Model, trie: &SidTrie, ctx: &DraftContext<'_>, gamma: usize) -> Vec<u32> {
        let mut kv = LayerKv::default();
        let (mut h, mut x, mut node) = (ctx.hidden.to_vec(), ctx.last, ctx.node);
        let mut out = Vec::with_capacity(gamma);
        while out.len() < gamma && !trie.is_leaf(node) {
            let (z, logits) = self.step(target, &mut kv, &h, x);
            let d = constrained_greedy(&logits, trie, node);
            node = trie.advance(node, d).expect("greedy picks a child");
            out.push(d);
            (h, x) = (z, d);
        }
        out
    }
}

/// Replays a known continuation (an upper bound on acceptance).
pub struct PerfectDrafter(pub Vec<u32>);

impl Drafter for PerfectDrafter {
    fn propose(&self, _: &Model, _: &SidTrie, ctx: &DraftContext<'_>, gamma: usize) -> Vec<u32> {
        self.0.iter().skip(ctx.emitted.len()).take(gamma).copied().collect()
    }
}

/// Drafts the lowest-scoring token outside the current child set, so every
/// draft is rejected.
pub struct AdversarialDrafter(pub DraftHead);

impl Drafter for AdversarialDrafter {
    fn propose(&self, target: &Model, trie: &SidTrie, ctx: &DraftContext<'_>, gamma: usize) -> Vec<u32> {
        let mut kv = LayerKv::default();
        let (mut h, mut x) = (ctx.hidden.to_vec(), ctx.last);
        let mut out = Vec::with_capacity(gamma);
        for _ in 0..gamma {
            let (z, logits) = self.0.step(target, &mut kv, &h, x);
            let worst = (0..logits.len() as u32)
                .filter(|&t| !trie.is_child(ctx.node, t))
                .min_by(|&a, &b| logits[a as usize].total_cmp(&logits[b as usize]))
                .expect("vocabulary larger than a child set");
            out.push(worst);
            (h, x) = (z, worst);
        }
        out
    }
}

/// Speculative decoding with greedy verification. Each round drafts up to
/// `gamma` tokens, feeds them through the target in one verification pass,
/// keeps the longest prefix matching the target's own constrained greedy
/// choice and, at the first mismatch, emits the target's token instead. When
/// every draft is accepted no extra token is emitted, so a perfect drafter
/// needs `ceil(len / gamma)` rounds. Output equals [`greedy_decode`].
pub fn speculative_decode(model: &Model, trie: &SidTrie, drafter: &dyn Drafter, pre: Prefilled, gamma: usize, max_new_tokens: usize) -> Result<Generation, ServeError> {
    let gamma = gamma.max(1);
    let Prefilled { mut cache, logits, hidden, prev_hidden, last_token, .. } = pre;
    // `held` = target output after the last fed token; `pending` = emitted but not yet fed.
    let mut held = (logits, hidden);
    let mut pending: Option<u32> = None;
    let mut anchor = (prev_hidden, last_token);
    let mut node = SidTrie::ROOT;
    let mut g = Generation::default();
    while g.tokens.len() < max_new_tokens && !trie.is_leaf(node) {
        g.rounds += 1;
        let room = model.cfg.context_len.saturating_sub(cache.len + usize::from(pending.is_some()));
        let budget = gamma.min(max_new_tokens - g.tokens.len()).min(room);
        let ctx = DraftContext { hidden: &anchor.0, last: anchor.1, node, emitted: &g.tokens };
        let mut drafts = drafter.propose(model, trie, &ctx, budget);
        drafts.truncate(budget);
        g.drafted += drafts.len();

        // Verification pass over [pending] ++ drafts.
        let base = cache.len;
        let mut outs = Vec::with_capacity(drafts.len() + 1);
        if let Some(p) = pending {
            let o = model.step(&mut cache, p)?;
            held = (o.logits.clone(), o.hidden.clone());
            outs.push(o);
        }
        let offset = outs.len();
        for &d in &drafts {
            outs.push(model.step(&mut cache, d)?);
        }

        // `before` = output whose logits decide the next token.
        let mut before = held.clone();
        let mut prev_of_before = if pending.is_some() { anchor.0.clone() } else { before.1.clone() };
        let mut accepted = 0;
        let mut mismatch = None;
        for (j, &d) in drafts.iter().enumerate() {
            let want = constrained_greedy(&before.0, trie, node);
            if d != want {
                mismatch = Some(want);
                break;
            }
            accepted += 1;
            g.tokens.push(d);
            node = trie.advance(node, d).expect("accepted token is a child");
            prev_of_before = before.1.clone();
            before = (outs[offset + j].logits.clone(), outs[offset + j].hidden.clone());
            if trie.is_leaf(node) {
                break;
            }
        }
        g.accepted += accepted;
        cache.truncate(base + offset + accepted, model.d());
        if trie.is_leaf(node) {
            break;
        }
        let forced = mismatch.or_else(|| drafts.is_empty().then(|| constrained_greedy(&before.0, trie, node)));
        match forced {
            Some(tok) => {
                g.tokens.push(tok);
                node = trie.advance(node, tok).expect("greedy picks a child");
                pending = Some(tok);
                anchor = (before.1.clone(), tok);
            }
            None => {
                pending = None;
                let last = *g.tokens.last().expect("accepted at least one draft");
                anchor = (prev_of_before, last);
                held = before;
            }
        }
    }
    Ok(g)
}

/// Frozen model, trie and optional draft head shared by all workers.
pub struct Engine {
    pub model: Model,
    pub trie: SidTrie,
    pub draft: Option<DraftHead>,
    pub gamma: usize,
}

impl Engine {
    pub fn new(model: Model, trie: SidTrie, draft: Option<DraftHead>) -> Self {
        Engine { model, trie, draft, gamma: DEFAULT_GAMMA }
    }

    pub fn prefill(&self, req: &DecodeRequest) -> Result<Prefilled, ServeError> {
        prefill(&self.model, &req.prompt)
    }

    pub fn decode(&self, req: &DecodeRequest, pre: Prefilled) -> Result<DecodeResult, ServeError> {
        let start = Instant::now();
        let prefill_ms = pre.prefill_ms;
        let g = match req.mode {
            DecodeMode::Vanilla => greedy_decode(&self.model, &self.trie, pre, req.max_new_tokens)?,
            DecodeMode::Speculative => {
                let head = self.draft.as_ref().ok_or(ServeError::NoDraftHead)?;
                speculative_decode(&self.model, &self.trie, head, pre, self.gamma, req.max_new_tokens)?
            }
        };
        let poi_id = self.trie.resolve(&g.tokens).cloned();
        Ok(DecodeResult {
            id: req.id,
            tokens: g.tokens,
            poi_id,
            prefill_ms,
            decode_ms: start.elapsed().as_secs_f64() * 1e3,
            latency_ms: 0.0,
            rounds: g.rounds,
            drafted: g.drafted,
            accepted: g.accepted,
        })
    }

    pub fn run(&self, req: &DecodeRequest) -> Result<DecodeResult, ServeError> {
        let pre = self.prefill(req)?;
        self.decode(req, pre)
    }
}
