//! Vocabulary and record construction for pretraining (alignment and
//! behavior-sequence text) and instruction tuning.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{Action, Catalog, CheckIn, Poi, Situation};
use crate::geo::{geohash_encode, GeohashCell, DEFAULT_GEOHASH_PRECISION};
use crate::profile::EMPTY_PROFILE_TEXT;
use crate::sid::{fnv1a, level_letter, Sid, SidMap};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const UNK: u32 = 5;
pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<sep>", "<mask>", "<unk>"];
pub const DEFAULT_MAX_VOCAB: usize = 50_000;
pub const DEFAULT_MAX_CHECKINS: usize = 50;
pub const BLANK_SLOT: &str = "unknown";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("vocabulary has {count} tokens, above the limit of {max} ({base} base, {sid} sid, {geo} geohash)")]
    VocabTooLarge { count: usize, max: usize, base: usize, sid: usize, geo: usize },
    #[error("malformed vocabulary: {0}")]
    BadVocab(String),
    #[error("record of {len} tokens does not fit context {context}")]
    TooLong { len: usize, context: usize },
    #[error("SID {0} has tokens missing from the vocabulary")]
    UnknownSid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Special,
    Sid,
    Geohash,
    Base,
}

fn classify(token: &str) -> TokenClass {
    if SPECIALS.contains(&token) {
        return TokenClass::Special;
    }
    let Some(inner) = token.strip_prefix('<').and_then(|t| t.strip_suffix('>')) else {
        return TokenClass::Base;
    };
    if let Some((l, n)) = inner.split_once('_') {
        if l.len() == 1 && l.as_bytes()[0].is_ascii_lowercase() && !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) {
            return TokenClass::Sid;
        }
    }
    if GeohashCell::parse(inner).is_ok() {
        return TokenClass::Geohash;
    }
    TokenClass::Base
}

/// Splits text into word, punctuation and atomic `<...>` tokens.
pub fn split_text(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().unwrap();
        let n = c.len_utf8();
        if c.is_whitespace() {
            i += n;
        } else if c == '<' {
            let end = text[i + 1..]
                .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                .map(|j| i + 1 + j)
                .filter(|&j| j > i + 1 && bytes[j] == b'>');
            match end {
                Some(j) => {
                    out.push(&text[i..=j]);
                    i = j + 1;
                }
                None => {
                    out.push(&text[i..i + 1]);
                    i += 1;
                }
            }
        } else if c.is_alphanumeric() {
            let end = text[i..].find(|ch: char| !ch.is_alphanumeric()).map_or(text.len(), |j| i + j);
            out.push(&text[i..end]);
            i = end;
        } else {
            out.push(&text[i..i + n]);
            i += n;
        }
    }
    out
}

/// Removes all whitespace; the tokenizer round-trips text up to this normalization.
pub fn normalize_ws(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    classes: Vec<TokenClass>,
}

/// Words every prompt may need even if absent from the mined corpus.
fn template_words() -> Vec<String> {
    let mut w: Vec<String> = [
        "January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November",
        "December", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday", "AM", "PM", "on",
        "clear", "rainy", "snowy", "extremely", "hot", "cold", "unknown", "no", "known", "profile",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    w.extend((0..=31).map(|i| i.to_string()));
    for text in [sft_prompt_text("x", &[], "x", "x", "x"), sequence_text(&[sequence_clause_text("x", Action::Other, "x", &[])])] {
        w.extend(split_text(&text).iter().map(|s| s.to_string()));
    }
    for a in [Action::Navigated, Action::Searched, Action::Walked, Action::Rode, Action::Other] {
        w.extend(split_text(action_verb(a)).iter().map(|s| s.to_string()));
    }
    w
}

impl Vocab {
    /// Specials, then all SID tokens (level-major), collision tokens, geohash
    /// cells of catalog POIs, then base words sorted.
    pub fn build(
        catalog: &Catalog,
        sid_map: &SidMap,
        levels: usize,
        k: usize,
        text_samples: &[String],
        max_size: usize,
    ) -> Result<Vocab, CorpusError> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for l in 0..levels {
            tokens.extend((0..k).map(|c| format!("<{}_{c}>", level_letter(l))));
        }
        if let Some(max_break) = sid_map.max_collision_break() {
            tokens.extend((0..=max_break).map(|x| format!("<x_{x}>")));
        }
        let sid_count = tokens.len() - SPECIALS.len();
        let cells: BTreeSet<String> =
            catalog.iter().filter_map(|p| geohash_encode(p.point, DEFAULT_GEOHASH_PRECISION).ok()).map(|c| c.token()).collect();
        let geo_count = cells.len();
        tokens.extend(cells);
        let mut words = BTreeSet::new();
        for t in text_samples.iter().map(String::as_str).flat_map(split_text).chain(template_words().iter().map(String::as_str)) {
            if classify(t) == TokenClass::Base {
                words.insert(t.to_string());
            }
        }
        let base_count = words.len();
        tokens.extend(words);
        if tokens.len() > max_size {
            return Err(CorpusError::VocabTooLarge {
                count: tokens.len(),
                max: max_size,
                base: base_count,
                sid: sid_count,
                geo: geo_count,
            });
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab, CorpusError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(CorpusError::BadVocab("special tokens must occupy ids 0..6".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::BadVocab(format!("duplicate token {t:?}")));
            }
        }
        let classes = tokens.iter().map(|t| classify(t)).collect();
        Ok(Vocab { tokens, ids, classes })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn class(&self, id: u32) -> TokenClass {
        self.classes.get(id as usize).copied().unwrap_or(TokenClass::Base)
    }

    pub fn sid_token_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().enumerate().filter(|(_, c)| **c == TokenClass::Sid).map(|(i, _)| i as u32)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_text(text).into_iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn encode_sid(&self, sid: &Sid) -> Result<Vec<u32>, CorpusError> {
        sid.tokens().iter().map(|t| self.id(t).ok_or_else(|| CorpusError::UnknownSid(sid.render()))).collect()
    }

    /// Inverse of [`Vocab::encode`] up to whitespace: words are space separated,
    /// punctuation and adjacent atomic tokens attach without spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_class = None;
        for &id in ids {
            let tok = self.token(id).unwrap_or("<unk>");
            let class = self.class(id);
            let is_punct = class == TokenClass::Base && !tok.chars().next().is_some_and(char::is_alphanumeric);
            let glue = out.is_empty()
                || is_punct
                || (class == TokenClass::Sid && prev_class == Some(TokenClass::Sid))
                || out.ends_with(['(', '\'', '’']);
            if !glue {
                out.push(' ');
            }
            out.push_str(tok);
            prev_class = Some(class);
        }
        out
    }

    /// `{token: id}`.
    pub fn to_json(&self) -> String {
        let m: std::collections::BTreeMap<&str, u32> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        serde_json::to_string_pretty(&m).unwrap_or_default()
    }

    pub fn from_json(s: &str) -> Result<Vocab, CorpusError> {
        let m: HashMap<String, u32> = serde_json::from_str(s).map_err(|e| CorpusError::BadVocab(e.to_string()))?;
        let mut tokens = vec![None; m.len()];
        for (t, id) in m {
            let slot = tokens.get_mut(id as usize).ok_or_else(|| CorpusError::BadVocab(format!("id {id} not dense")))?;
            *slot = Some(t);
        }
        let tokens: Option<Vec<String>> = tokens.into_iter().collect();
        Self::from_tokens(tokens.ok_or_else(|| CorpusError::BadVocab("ids not dense".into()))?)
    }

    /// SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Alignment,
    Sequence,
    Sft,
    DpoPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanLabel {
    Text,
    Prompt,
    Response,
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub label: SpanLabel,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub kind: RecordKind,
    pub token_ids: Vec<u32>,
    pub spans: Vec<Span>,
}

impl CorpusRecord {
    pub fn span(&self, label: SpanLabel) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.label == label)
    }

    pub fn prompt(&self) -> &[u32] {
        self.span(SpanLabel::Prompt).map_or(&[][..], |s| &self.token_ids[s.start..s.end])
    }

    pub fn response(&self) -> &[u32] {
        self.span(SpanLabel::Response).map_or(&[][..], |s| &self.token_ids[s.start..s.end])
    }
}

fn text_record(vocab: &Vocab, kind: RecordKind, text: &str) -> CorpusRecord {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text));
    ids.push(EOS);
    let n = ids.len();
    CorpusRecord { kind, token_ids: ids, spans: vec![Span { label: SpanLabel::Text, start: 0, end: n }] }
}

fn describe(p: &Poi) -> String {
    let d = if p.description.trim().is_empty() { p.name.trim() } else { p.description.trim() };
    format!("{} ({})", d.trim_end_matches('.'), p.category_path.join(", "))
}

pub const ALIGNMENT_VARIANTS: usize = 3;

/// One of three alignment templates; `variant` picks it (callers go round-robin).
pub fn alignment_text(p: &Poi, sid: &Sid, cell: &GeohashCell, region: &str, variant: usize) -> String {
    let d = describe(p);
    let (c, s) = (cell.token(), sid.render());
    match variant % ALIGNMENT_VARIANTS {
        0 => format!("{d}. Located in {c} of {region}, and the ID is {s}."),
        1 => format!("Find the POI: {d}, in {c} of {region}. The ID is {s}."),
        _ => format!("The POI {s} is {d}, located in {c} of {region}."),
    }
}

pub fn build_alignment_record(vocab: &Vocab, p: &Poi, sid: &Sid, cell: &GeohashCell, region: &str, variant: usize) -> CorpusRecord {
    text_record(vocab, RecordKind::Alignment, &alignment_text(p, sid, cell, region, variant))
}

pub fn action_verb(a: Action) -> &'static str {
    match a {
        Action::Navigated => "navigated to",
        Action::Searched => "searched",
        Action::Walked => "walked to",
        Action::Rode => "rode to",
        Action::Other => "visited",
    }
}

/// `at 7 AM June 10, the user navigated to Hotel <a_1><b_2><c_3>`
pub fn sequence_clause_text(when: &str, action: Action, category: &str, sid_tokens: &[String]) -> String {
    format!("at {when}, the user {} {category} {}", action_verb(action), sid_tokens.concat())
}

pub fn checkin_clause(c: &CheckIn, catalog: &Catalog, sid_map: &SidMap) -> Option<String> {
    let p = catalog.get(&c.poi_id)?;
    let sid = sid_map.get(&c.poi_id)?;
    let lt = c.local_time();
    let when = format!("{} {} {}", lt.clock12(), lt.month_name(), lt.day);
    Some(sequence_clause_text(&when, c.action, p.leaf_category(), &sid.tokens()))
}

pub fn history_clauses(history: &[CheckIn], catalog: &Catalog, sid_map: &SidMap, max_checkins: usize) -> Vec<String> {
    let start = history.len().saturating_sub(max_checkins);
    history[start..].iter().filter_map(|c| checkin_clause(c, catalog, sid_map)).collect()
}

fn join_clauses(clauses: &[String]) -> String {
    if clauses.is_empty() {
        "none".to_string()
    } else {
        clauses.join(", ")
    }
}

pub fn sequence_text(clauses: &[String]) -> String {
    format!("Here is the user's historical POI check-ins. {}.", join_clauses(clauses))
}

/// Latest `max_checkins` check-ins, dropping older clauses until the record fits `context_len`.
pub fn build_sequence_record(
    vocab: &Vocab,
    check_ins: &[CheckIn],
    catalog: &Catalog,
    sid_map: &SidMap,
    max_checkins: usize,
    context_len: usize,
) -> Result<CorpusRecord, CorpusError> {
    let mut clauses = history_clauses(check_ins, catalog, sid_map, max_checkins);
    loop {
        let r = text_record(vocab, RecordKind::Sequence, &sequence_text(&clauses));
        if r.token_ids.len() <= context_len {
            return Ok(r);
        }
        if clauses.is_empty() {
            return Err(CorpusError::TooLong { len: r.token_ids.len(), context: context_len });
        }
        clauses.remove(0);
    }
}

pub fn situation_slots(ctx: &Situation) -> (String, String, String) {
    let lt = ctx.local_time();
    let time = format!("{} on {}, {} {}", lt.clock12(), lt.weekday_name(), lt.month_name(), lt.day);
    let loc = geohash_encode(ctx.location, DEFAULT_GEOHASH_PRECISION).map(|c| c.token()).unwrap_or_else(|_| BLANK_SLOT.into());
    (time, loc, ctx.weather.describe().to_string())
}

pub fn sft_prompt_text(profile_text: &str, history: &[String], time: &str, location: &str, weather: &str) -> String {
    let profile = if profile_text.trim().is_empty() { EMPTY_PROFILE_TEXT } else { profile_text };
    format!(
        "Based on the user's profile: {profile}, and his historical POI check-ins: {}. Now the time is {time}, he is in {location}, and the weather is {weather}. Please recommend the next possible POI that the user may expect?",
        join_clauses(history)
    )
}

/// Which prompt slots to blank (ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptOptions {
    pub blank_profile: bool,
    pub blank_situation: bool,
}

/// Prompt ids: `<bos> prompt-words <sep>`. Oldest history clauses are dropped
/// until prompt plus `reserve` response tokens fit `context_len`.
pub fn build_prompt(
    vocab: &Vocab,
    profile_text: &str,
    history: &[String],
    ctx: &Situation,
    opts: PromptOptions,
    context_len: usize,
    reserve: usize,
) -> Result<Vec<u32>, CorpusError> {
    let (time, loc, weather) = if opts.blank_situation {
        (BLANK_SLOT.to_string(), BLANK_SLOT.to_string(), BLANK_SLOT.to_string())
    } else {
        situation_slots(ctx)
    };
    let profile = if opts.blank_profile { EMPTY_PROFILE_TEXT } else { profile_text };
    let mut start = 0;
    loop {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(&sft_prompt_text(profile, &history[start..], &time, &loc, &weather)));
        ids.push(SEP);
        if ids.len() + reserve <= context_len {
            return Ok(ids);
        }
        if start == history.len() {
            return Err(CorpusError::TooLong { len: ids.len() + reserve, context: context_len });
        }
        start += 1;
    }
}

/// Response ids: SID tokens then `<eos>`.
pub fn response_ids(vocab: &Vocab, sid: &Sid) -> Result<Vec<u32>, CorpusError> {
    let mut r = vocab.encode_sid(sid)?;
    r.push(EOS);
    Ok(r)
}

pub fn sft_record(prompt: Vec<u32>, response: Vec<u32>) -> CorpusRecord {
    let p = prompt.len();
    let mut ids = prompt;
    ids.extend(response);
    let n = ids.len();
    CorpusRecord {
        kind: RecordKind::Sft,
        token_ids: ids,
        spans: vec![Span { label: SpanLabel::Prompt, start: 0, end: p }, Span { label: SpanLabel::Response, start: p, end: n }],
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_sft_example(
    vocab: &Vocab,
    profile_text: &str,
    history: &[String],
    ctx: &Situation,
    target: &Sid,
    opts: PromptOptions,
    context_len: usize,
) -> Result<CorpusRecord, CorpusError> {
    let response = response_ids(vocab, target)?;
    let prompt = build_prompt(vocab, profile_text, history, ctx, opts, context_len, response.len())?;
    Ok(sft_record(prompt, response))
}

/// Replaces `round(ratio * n_base)` base tokens with `<mask>`. Returns the
/// masked ids and `(position, original id)` targets in position order.
pub fn mask_for_pretraining(vocab: &Vocab, r: &CorpusRecord, ratio: f64, seed: u64) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut input = r.token_ids.clone();
    let mut base: Vec<usize> = (0..input.len()).filter(|&i| vocab.class(input[i]) == TokenClass::Base).collect();
    let n = ((ratio * base.len() as f64).round() as usize).min(base.len());
    if n == 0 {
        return (input, Vec::new());
    }
    let bytes: Vec<u8> = r.token_ids.iter().flat_map(|t| t.to_le_bytes()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&bytes));
    base.shuffle(&mut rng);
    let mut picked = base[..n].to_vec();
    picked.sort_unstable();
    let targets = picked.iter().map(|&i| (i, r.token_ids[i])).collect();
    for &i in &picked {
        input[i] = MASK;
    }
    (input, targets)
}

/// Interleaves alignment and sequence record indices at `align:seq` per
/// cycle, reshuffling each source when exhausted.
pub fn pretraining_schedule(n_align: usize, n_seq: usize, ratio: (usize, usize), total: usize, seed: u64) -> Vec<(RecordKind, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |n: usize, order: &mut Vec<usize>, rng: &mut ChaCha8Rng| -> Option<usize> {
        if n == 0 {
            return None;
        }
        if order.is_empty() {
            *order = (0..n).collect();
            order.shuffle(rng);
        }
        order.pop()
    };
    let (mut oa, mut os) = (Vec::new(), Vec::new());
    let cycle = (ratio.0 + ratio.1).max(1);
    let mut out = Vec::with_capacity(total);
    let mut slot = 0;
    while out.len() < total && (n_align > 0 || n_seq > 0) {
        let want_align = slot % cycle < ratio.0;
        slot += 1;
        let pick = if want_align {
            draw(n_align, &mut oa, &mut rng).map(|i| (RecordKind::Alignment, i))
        } else {
            draw(n_seq, &mut os, &mut rng).map(|i| (RecordKind::Sequence, i))
        };
        if let Some(p) = pick {
            out.push(p);
        }
    }
    out
}

pub fn records_to_jsonl(records: &[CorpusRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).unwrap_or_default() + "\n").collect()
}

pub fn records_from_jsonl(s: &str) -> Result<Vec<CorpusRecord>, serde_json::Error> {
    s.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
