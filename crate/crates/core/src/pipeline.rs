//! End-to-end chain: data, profiles, SIDs, vocabulary, corpora, masked
//! continued pretraining, SFT, evaluation, preference pairs and DPO, and
//! ablations. Every stage seed derives from `RunConfig::seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{build_pairs, dpo_train, AlignError, CandidateSet, DpoConfig, DpoReport, DpoTrainConfig, PreferencePair, ScoredCandidate};
use crate::bench::synth::{synth_world, SynthError, WeatherTimeline};
use crate::bench::{build_contexts, evaluate, EvalContext, EvalReport, Predictor};
use crate::catalog::{load_checkins, preprocess, Catalog, CatalogError, CheckIn, InputFormat, PoiId, Situation, Split, SplitDataset, Trajectory, UserId, Weather};
use crate::cognition::{score, Judge};
use crate::config::{IngestFormat, RunConfig};
use crate::corpus::{
    alignment_text, build_alignment_record, build_prompt, build_sequence_record, history_clauses, mask_for_pretraining, pretraining_schedule,
    response_ids, sft_record, CorpusError, CorpusRecord, PromptOptions, RecordKind, Vocab, ALIGNMENT_VARIANTS,
};
use crate::geo::{geohash_encode, haversine, DEFAULT_GEOHASH_PRECISION};
use crate::model::markov::{MarkovBaseline, MarkovError};
use crate::model::train::{train_step, TrainConfig, TrainError, TrainState};
use crate::model::{Example, Model, ModelError};
use crate::profile::{build_profile, render_profile_text, UserProfile};
use crate::serve::draft::{distillation_samples, DraftHead, DraftTrainReport};
use crate::serve::trie::SidTrie;
use crate::serve::{DecodeMode, DecodeRequest, Engine, ServeError};
use crate::sid::{assign_collision_breaks, fnv1a, train_codebooks, Codebooks, Featurizer, SidError, SidMap};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Sid(#[from] SidError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("{0}")]
    Empty(String),
}

/// Seed for one named stage.
pub fn stage_seed(base: u64, stage: &str) -> u64 {
    base ^ fnv1a(stage.as_bytes())
}

/// Raw input: catalog, trajectories and (for the synthetic world) weather.
pub struct Source {
    pub catalog: Catalog,
    pub trajectories: Vec<Trajectory>,
    pub weather: Option<WeatherTimeline>,
}

pub fn load_source(cfg: &RunConfig) -> Result<Source, PipelineError> {
    match &cfg.ingest.path {
        None => {
            let w = synth_world(&cfg.synth)?;
            Ok(Source { catalog: w.catalog, trajectories: w.trajectories, weather: Some(w.weather) })
        }
        Some(path) => {
            let format = match cfg.ingest.format {
                IngestFormat::FoursquareTsv => InputFormat::FoursquareTsv,
                IngestFormat::Jsonl => InputFormat::Jsonl { catalog: cfg.ingest.catalog.clone().unwrap_or_default() },
            };
            let region = cfg.ingest.region.as_deref().unwrap_or("the city");
            let loaded = load_checkins(path, &format, region)?;
            log::info!("ingest: {}", loaded.report.to_json());
            Ok(Source { catalog: loaded.catalog, trajectories: loaded.trajectories, weather: None })
        }
    }
}

/// Everything derived from the data before any model is trained.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: SplitDataset,
    pub weather: Option<WeatherTimeline>,
    /// Built from train check-ins only.
    pub profiles: BTreeMap<UserId, UserProfile>,
    pub profile_texts: BTreeMap<UserId, String>,
    pub sid_map: SidMap,
    /// Reconstruction MSE after each codebook level.
    pub rq_mse: Vec<f64>,
    pub vocab: Vocab,
    pub trie: SidTrie,
}

/// Filtered, split data with train-only profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataStage {
    pub dataset: SplitDataset,
    pub weather: Option<WeatherTimeline>,
    pub profiles: BTreeMap<UserId, UserProfile>,
}

pub fn prepare_data(source: Source, cfg: &RunConfig) -> Result<DataStage, PipelineError> {
    let dataset = preprocess(&source.catalog, &source.trajectories, &cfg.preprocess)?;
    let profiles = dataset
        .train_trajectories()
        .iter()
        .map(|t| (t.user_id.clone(), build_profile(t, &dataset.catalog, &cfg.profile)))
        .collect();
    Ok(DataStage { dataset, weather: source.weather, profiles })
}

/// SIDs for every catalog POI plus the reconstruction MSE per level.
pub fn build_sids(catalog: &Catalog, cfg: &RunConfig) -> Result<(SidMap, Codebooks, Vec<f64>), PipelineError> {
    let featurizer = Featurizer::fit(catalog, cfg.sid.features);
    let features: Vec<_> = catalog.iter().map(|p| featurizer.featurize(p)).collect();
    let rq = train_codebooks(&features, cfg.sid.levels, cfg.sid.k, stage_seed(cfg.seed, "sid"))?;
    let sid_map = assign_collision_breaks(catalog, &featurizer, &rq.books)?;
    Ok((sid_map, rq.books, rq.mse_by_level))
}

/// Vocabulary over SID tokens, geohash cells and the words of every
/// alignment text and profile.
pub fn build_vocab(data: &DataStage, sid_map: &SidMap, cfg: &RunConfig) -> Result<Vocab, PipelineError> {
    let catalog = &data.dataset.catalog;
    let mut text: Vec<String> = Vec::new();
    for p in catalog.iter() {
        let (Some(sid), Ok(cell)) = (sid_map.get(&p.poi_id), geohash_encode(p.point, DEFAULT_GEOHASH_PRECISION)) else { continue };
        text.extend((0..ALIGNMENT_VARIANTS).map(|v| alignment_text(p, sid, &cell, &catalog.region, v)));
        text.push(p.category_path.join(" "));
    }
    text.extend(data.profiles.values().map(render_profile_text));
    Ok(Vocab::build(catalog, sid_map, cfg.sid.levels, cfg.sid.k, &text, cfg.corpus.max_vocab)?)
}

pub fn prepare(source: Source, cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let data = prepare_data(source, cfg)?;
    let (sid_map, _, rq_mse) = build_sids(&data.dataset.catalog, cfg)?;
    let vocab = build_vocab(&data, &sid_map, cfg)?;
    Prepared::assemble(data, sid_map, rq_mse, vocab)
}

impl Prepared {
    pub fn assemble(data: DataStage, sid_map: SidMap, rq_mse: Vec<f64>, vocab: Vocab) -> Result<Prepared, PipelineError> {
        let trie = SidTrie::build(&sid_map, &vocab)?;
        let profile_texts = data.profiles.iter().map(|(u, p)| (u.clone(), render_profile_text(p))).collect();
        log::info!(
            "prepared: {} users, {} POIs, {} check-ins, vocab {}, rq mse {:?}",
            data.dataset.trajectories.len(),
            data.dataset.catalog.len(),
            data.dataset.trajectories.iter().map(Trajectory::m).sum::<usize>(),
            vocab.len(),
            rq_mse
        );
        Ok(Prepared { dataset: data.dataset, weather: data.weather, profiles: data.profiles, profile_texts, sid_map, rq_mse, vocab, trie })
    }

    pub fn contexts(&self, split: Split, max_history: usize) -> Vec<EvalContext> {
        build_contexts(&self.dataset, split, self.weather.as_ref(), max_history)
    }

    pub fn profile_text(&self, user: &UserId) -> &str {
        self.profile_texts.get(user).map_or(crate::profile::EMPTY_PROFILE_TEXT, String::as_str)
    }

    /// Response tokens reserved when fitting prompts.
    pub fn response_reserve(&self) -> usize {
        self.trie.max_depth() + 1
    }

    pub fn prompt(&self, profile_text: &str, history: &[CheckIn], situation: &Situation, opts: PromptOptions, max_history: usize, context_len: usize) -> Result<Vec<u32>, CorpusError> {
        let clauses = history_clauses(history, &self.dataset.catalog, &self.sid_map, max_history);
        build_prompt(&self.vocab, profile_text, &clauses, situation, opts, context_len, self.response_reserve())
    }

    pub fn response(&self, poi: &PoiId) -> Option<Vec<u32>> {
        response_ids(&self.vocab, self.sid_map.get(poi)?).ok()
    }

    pub fn new_model(&self, cfg: &RunConfig) -> Result<Model, ModelError> {
        let mut m = cfg.model.clone();
        m.vocab_size = self.vocab.len();
        m.seed = stage_seed(cfg.seed, "model-init");
        Model::new(m)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PretrainCorpus {
    pub alignment: Vec<CorpusRecord>,
    pub sequences: Vec<CorpusRecord>,
}

pub fn pretrain_corpus(prep: &Prepared, cfg: &RunConfig) -> Result<PretrainCorpus, PipelineError> {
    let catalog = &prep.dataset.catalog;
    let mut alignment = Vec::new();
    for p in catalog.iter() {
        let (Some(sid), Ok(cell)) = (prep.sid_map.get(&p.poi_id), geohash_encode(p.point, DEFAULT_GEOHASH_PRECISION)) else { continue };
        for v in 0..ALIGNMENT_VARIANTS {
            alignment.push(build_alignment_record(&prep.vocab, p, sid, &cell, &catalog.region, v));
        }
    }
    let (w, stride) = (cfg.corpus.sequence_window, cfg.corpus.sequence_stride);
    let mut sequences = Vec::new();
    for t in prep.dataset.train_trajectories() {
        let n = t.m();
        if n == 0 {
            continue;
        }
        let mut ends: Vec<usize> = (w.min(n)..=n).step_by(stride).collect();
        if ends.last() != Some(&n) {
            ends.push(n);
        }
        for end in ends {
            let slice = &t.check_ins[end.saturating_sub(w)..end];
            sequences.push(build_sequence_record(&prep.vocab, slice, catalog, &prep.sid_map, w, cfg.model.context_len)?);
        }
    }
    Ok(PretrainCorpus { alignment, sequences })
}

/// SFT records for `contexts` (one per context).
pub fn sft_records(prep: &Prepared, contexts: &[EvalContext], opts: PromptOptions, cfg: &RunConfig) -> Result<Vec<CorpusRecord>, PipelineError> {
    let mut out = Vec::with_capacity(contexts.len());
    for c in contexts {
        let Some(response) = prep.response(&c.truth) else { continue };
        let prompt = prep.prompt(prep.profile_text(&c.user_id), &c.history, &c.situation, opts, cfg.corpus.max_history, cfg.model.context_len)?;
        out.push(sft_record(prompt, response));
    }
    Ok(out)
}

fn log_progress(stage: &str, step: usize, total: usize, loss: f64, start: Instant) {
    if step % 50 == 0 || step + 1 == total {
        log::info!("{stage} step {step}/{total} loss {loss:.4} ({:.0}s)", start.elapsed().as_secs_f64());
    }
}

/// Masked continued pretraining: masked inputs, next-token targets on the
/// original text, alignment and sequence records mixed per `corpus.mix`.
pub fn pretrain(model: Model, corpus: &PretrainCorpus, prep: &Prepared, cfg: &RunConfig, use_alignment: bool) -> Result<(Model, Vec<f64>), PipelineError> {
    let seed = stage_seed(cfg.seed, "pretrain");
    let bs = cfg.pretrain.train.batch_size.max(1);
    let n_align = if use_alignment { corpus.alignment.len() } else { 0 };
    let schedule = pretraining_schedule(n_align, corpus.sequences.len(), cfg.corpus.mix, cfg.pretrain.steps * bs, seed);
    if schedule.is_empty() {
        return Err(PipelineError::Empty("no pretraining records".into()));
    }
    let mut state = TrainState::new(model, seed);
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    let start = Instant::now();
    let total = schedule.len().div_ceil(bs);
    for (s, chunk) in schedule.chunks(bs).enumerate() {
        let batch: Vec<Example> = chunk
            .iter()
            .enumerate()
            .map(|(j, &(kind, i))| {
                let r = if kind == RecordKind::Alignment { &corpus.alignment[i] } else { &corpus.sequences[i] };
                let (masked, _) = mask_for_pretraining(&prep.vocab, r, cfg.corpus.mask_ratio, seed.wrapping_add((s * bs + j) as u64));
                Example::denoising(masked, &r.token_ids)
            })
            .collect();
        let loss = train_step(&mut state, &batch, &cfg.pretrain.train)?;
        log_progress("pretrain", s, total, loss, start);
        losses.push(loss);
    }
    Ok((state.model, losses))
}

/// Response-only fine-tuning for `epochs` passes over `records`.
pub fn sft(model: Model, records: &[CorpusRecord], train: &TrainConfig, epochs: usize, seed: u64) -> Result<(Model, Vec<f64>), PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::Empty("no SFT records".into()));
    }
    let examples: Vec<Example> = records.iter().map(Example::response).collect();
    let mut state = TrainState::new(model, seed);
    let mut losses = Vec::new();
    let start = Instant::now();
    let per_epoch = examples.len().div_ceil(train.batch_size.max(1));
    for _ in 0..epochs {
        for idx in state.epoch_batches(examples.len(), train.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            let loss = train_step(&mut state, &batch, train)?;
            log_progress("sft", losses.len(), per_epoch * epochs, loss, start);
            losses.push(loss);
        }
    }
    Ok((state.model, losses))
}

/// Constrained greedy decoding of the SFT prompt.
pub struct ModelPredictor<'a> {
    pub prep: &'a Prepared,
    pub engine: Engine,
    pub opts: PromptOptions,
    pub max_history: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(prep: &'a Prepared, model: Model, opts: PromptOptions, max_history: usize) -> Self {
        ModelPredictor { prep, engine: Engine::new(model, prep.trie.clone(), None), opts, max_history }
    }

    pub fn prompt_for(&self, profile: &UserProfile, history: &[CheckIn], situation: &Situation) -> Result<Vec<u32>, CorpusError> {
        let text = self.prep.profile_text(&profile.user_id);
        self.prep.prompt(text, history, situation, self.opts, self.max_history, self.engine.model.cfg.context_len)
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, profile: &UserProfile, history: &[CheckIn], situation: &Situation) -> Option<PoiId> {
        let prompt = self.prompt_for(profile, history, situation).ok()?;
        let req = DecodeRequest { id: 0, prompt, max_new_tokens: self.engine.trie.max_depth(), mode: DecodeMode::Vanilla };
        self.engine.run(&req).ok()?.poi_id
    }
}

/// Components removed for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_profile: bool,
    pub no_situation: bool,
    pub no_alignment_corpus: bool,
    pub no_pretrain: bool,
}

impl AblationFlags {
    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions { blank_profile: self.no_profile, blank_situation: self.no_situation }
    }

    /// The four single-component ablations, by name.
    pub fn singles() -> Vec<(&'static str, AblationFlags)> {
        let f = AblationFlags::default();
        vec![
            ("no_profile", AblationFlags { no_profile: true, ..f }),
            ("no_situation", AblationFlags { no_situation: true, ..f }),
            ("no_alignment_corpus", AblationFlags { no_alignment_corpus: true, ..f }),
            ("no_pretrain", AblationFlags { no_pretrain: true, ..f }),
        ]
    }

    pub fn parse(name: &str) -> Option<AblationFlags> {
        Self::singles().into_iter().find(|(n, _)| *n == name).map(|(_, f)| f)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedVariant {
    pub flags: AblationFlags,
    /// The pretraining output used (absent with `no_pretrain`).
    pub pretrained: Option<Model>,
    pub model: Model,
    pub pretrain_losses: Vec<f64>,
    pub sft_losses: Vec<f64>,
}

/// Pretrains (unless skipped or reusable) then fine-tunes one variant.
/// `shared_pretrained` is the full-corpus pretraining output, reused by
/// variants that do not change pretraining.
pub fn train_variant(prep: &Prepared, cfg: &RunConfig, flags: AblationFlags, shared_pretrained: Option<&Model>) -> Result<TrainedVariant, PipelineError> {
    let (pretrained, pretrain_losses) = if flags.no_pretrain {
        (None, Vec::new())
    } else if let (Some(m), false) = (shared_pretrained, flags.no_alignment_corpus) {
        (Some(m.clone()), Vec::new())
    } else {
        let corpus = pretrain_corpus(prep, cfg)?;
        let (m, l) = pretrain(prep.new_model(cfg)?, &corpus, prep, cfg, !flags.no_alignment_corpus)?;
        (Some(m), l)
    };
    let init = match &pretrained {
        Some(m) => m.clone(),
        None => prep.new_model(cfg)?,
    };
    let contexts = prep.contexts(Split::Train, cfg.corpus.max_history);
    let records = sft_records(prep, &contexts, flags.prompt_options(), cfg)?;
    let (model, sft_losses) = sft(init, &records, &cfg.sft.train, cfg.sft.epochs, stage_seed(cfg.seed, "sft"))?;
    Ok(TrainedVariant { flags, pretrained, model, pretrain_losses, sft_losses })
}

pub fn evaluate_model(prep: &Prepared, model: &Model, contexts: &[EvalContext], opts: PromptOptions, max_history: usize, judge: &dyn Judge) -> EvalReport {
    let predictor = ModelPredictor::new(prep, model.clone(), opts, max_history);
    evaluate(&predictor, contexts, &prep.profiles, &prep.dataset.catalog, judge)
}

pub fn markov_baseline(prep: &Prepared) -> Result<MarkovBaseline, MarkovError> {
    MarkovBaseline::fit(&prep.dataset.train_trajectories(), prep.dataset.catalog.pois.keys())
}

/// Test contexts whose truth is an outdoor POI, re-situated in rain.
pub fn violation_slice(prep: &Prepared, contexts: &[EvalContext]) -> Vec<EvalContext> {
    contexts
        .iter()
        .filter(|c| prep.dataset.catalog.get(&c.truth).is_some_and(|p| !p.indoor))
        .map(|c| EvalContext { situation: Situation { weather: Weather::Rain, ..c.situation }, ..c.clone() })
        .collect()
}

/// DPO training contexts: each train context as observed plus a rainy copy.
pub fn preference_contexts(prep: &Prepared, cfg: &RunConfig) -> Vec<EvalContext> {
    let base = prep.contexts(Split::Train, cfg.corpus.max_history);
    let rainy: Vec<EvalContext> = base
        .iter()
        .filter(|c| c.situation.weather != Weather::Rain)
        .map(|c| EvalContext { situation: Situation { weather: Weather::Rain, ..c.situation }, ..c.clone() })
        .collect();
    base.into_iter().chain(rainy).collect()
}

/// Candidates: the truth, the model's own prediction, the most frequent
/// history POIs and the nearest same-category POIs to the truth, each
/// scored by the cognition rules.
pub fn candidate_sets(prep: &Prepared, predictor: &ModelPredictor, contexts: &[EvalContext], cfg: &RunConfig, judge: &dyn Judge) -> Vec<CandidateSet> {
    let catalog = &prep.dataset.catalog;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(contexts.len().max(1));
    let chunk = contexts.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = contexts
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for (k, c) in part.iter().enumerate() {
                        let Some(profile) = prep.profiles.get(&c.user_id) else { continue };
                        let Ok(prompt) = predictor.prompt_for(profile, &c.history, &c.situation) else { continue };
                        let mut ids: Vec<PoiId> = vec![c.truth.clone()];
                        ids.extend(predictor.predict(profile, &c.history, &c.situation));
                        let mut freq: BTreeMap<&PoiId, usize> = BTreeMap::new();
                        for h in &c.history {
                            *freq.entry(&h.poi_id).or_default() += 1;
                        }
                        let mut by_freq: Vec<(&PoiId, usize)> = freq.into_iter().collect();
                        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                        ids.extend(by_freq.iter().take(cfg.dpo.history_candidates).map(|(p, _)| (*p).clone()));
                        if let Some(truth) = catalog.get(&c.truth) {
                            let mut near: Vec<_> = catalog.iter().filter(|p| p.poi_id != truth.poi_id && p.top_category() == truth.top_category()).collect();
                            near.sort_by(|a, b| haversine(truth.point, a.point).total_cmp(&haversine(truth.point, b.point)).then(a.poi_id.cmp(&b.poi_id)));
                            ids.extend(near.iter().take(cfg.dpo.nearby_candidates).map(|p| p.poi_id.clone()));
                        }
                        let mut seen = BTreeSet::new();
                        let candidates: Vec<ScoredCandidate> = ids
                            .into_iter()
                            .filter(|p| seen.insert(p.clone()))
                            .filter_map(|p| {
                                let poi = catalog.get(&p)?;
                                Some(ScoredCandidate { scores: score(&c.history, catalog, profile, &c.situation, poi, judge), poi: p })
                            })
                            .collect();
                        out.push(CandidateSet { key: format!("{}:{}:{}:{:?}", ci, k, c.situation.time, c.situation.weather), prompt_ids: prompt, truth: c.truth.clone(), candidates });
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("candidate worker panicked")).collect()
    })
}

pub fn preference_pairs(prep: &Prepared, sft_model: &Model, cfg: &RunConfig, judge: &dyn Judge) -> Vec<PreferencePair> {
    let predictor = ModelPredictor::new(prep, sft_model.clone(), PromptOptions::default(), cfg.corpus.max_history);
    let contexts = preference_contexts(prep, cfg);
    let sets = candidate_sets(prep, &predictor, &contexts, cfg, judge);
    build_pairs(&sets, |p| prep.response(p), stage_seed(cfg.seed, "pairs"))
}

pub fn run_dpo(sft_model: &Model, pairs: &[PreferencePair], cfg: &RunConfig, reference_id: &str) -> Result<(Model, DpoReport), PipelineError> {
    let mut state = TrainState::new(sft_model.clone(), stage_seed(cfg.seed, "dpo"));
    let tc = DpoTrainConfig {
        dpo: DpoConfig { beta: cfg.dpo.beta, reference: reference_id.to_string() },
        train: cfg.dpo.train.clone(),
        max_epochs: cfg.dpo.epochs,
        plateau: cfg.dpo.plateau,
        max_steps: None,
    };
    let report = dpo_train(&mut state, sft_model, pairs, &tc)?;
    Ok((state.model, report))
}

/// Distils a draft head from the target's greedy continuations of `records`.
pub fn train_draft(model: &Model, records: &[CorpusRecord], cfg: &RunConfig) -> Result<(DraftHead, DraftTrainReport), PipelineError> {
    let recs: Vec<(Vec<u32>, usize)> = records.iter().map(|r| (r.token_ids.clone(), r.prompt().len())).collect();
    let samples = distillation_samples(model, &recs)?;
    let mut head = DraftHead::new(model, stage_seed(cfg.seed, "draft-init"));
    let report = head.train(model, &samples, cfg.serve.draft_epochs, &cfg.serve.draft_train, stage_seed(cfg.seed, "draft"))?;
    Ok((head, report))
}

/// One decode request per context, cycling through `contexts` until `n`.
pub fn decode_requests(prep: &Prepared, contexts: &[EvalContext], n: usize, mode: DecodeMode, cfg: &RunConfig) -> Result<Vec<DecodeRequest>, PipelineError> {
    if contexts.is_empty() {
        return Err(PipelineError::Empty("no contexts for requests".into()));
    }
    (0..n)
        .map(|i| {
            let c = &contexts[i % contexts.len()];
            let prompt = prep.prompt(prep.profile_text(&c.user_id), &c.history, &c.situation, PromptOptions::default(), cfg.corpus.max_history, cfg.model.context_len)?;
            Ok(DecodeRequest { id: i as u64, prompt, max_new_tokens: prep.trie.max_depth(), mode })
        })
        .collect()
}

/// Full pretrain then SFT run with its evaluation.
pub struct FullRun {
    pub prep: Prepared,
    pub variant: TrainedVariant,
    pub test_contexts: Vec<EvalContext>,
    pub report: EvalReport,
}

pub fn run_full(cfg: &RunConfig, judge: &dyn Judge) -> Result<FullRun, PipelineError> {
    let prep = prepare(load_source(cfg)?, cfg)?;
    let variant = train_variant(&prep, cfg, AblationFlags::default(), None)?;
    let test_contexts = prep.contexts(Split::Test, cfg.corpus.max_history);
    let report = evaluate_model(&prep, &variant.model, &test_contexts, PromptOptions::default(), cfg.corpus.max_history, judge);
    Ok(FullRun { prep, variant, test_contexts, report })
}

/// Re-trains and evaluates each flagged variant on the same test contexts.
pub fn ablate(
    prep: &Prepared,
    cfg: &RunConfig,
    variants: &[(&str, AblationFlags)],
    shared_pretrained: Option<&Model>,
    contexts: &[EvalContext],
    judge: &dyn Judge,
) -> Result<Vec<(String, EvalReport)>, PipelineError> {
    let mut out = Vec::new();
    for (name, flags) in variants {
        let start = Instant::now();
        let v = train_variant(prep, cfg, *flags, shared_pretrained)?;
        let r = evaluate_model(prep, &v.model, contexts, flags.prompt_options(), cfg.corpus.max_history, judge);
        log::info!("ablation {name}: acc {:.4} a_cas {:.4} ({:.0}s)", r.acc_at_1, r.a_cas, start.elapsed().as_secs_f64());
        out.push((name.to_string(), r));
    }
    Ok(out)
}
