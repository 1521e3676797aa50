//! Subcommand bodies.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nextpoi::align::{pairs_to_jsonl, AlignError, PreferencePair, Provenance};
use nextpoi::bench::synth::{synth_world, WeatherTimeline};
use nextpoi::bench::{compare, EvalReport};
use nextpoi::catalog::{Catalog, CatalogError, PoiId, Split, Trajectory};
use nextpoi::cognition::{build_judge, CognitiveScores, Judge};
use nextpoi::config::RunConfig;
use nextpoi::corpus::{records_from_jsonl, records_to_jsonl, PromptOptions, Vocab};
use nextpoi::model::checkpoint::Checkpoint;
use nextpoi::model::gradcheck::gradcheck;
use nextpoi::model::train::TrainError;
use nextpoi::model::{Example, Model, ModelConfig};
use nextpoi::pipeline::{self as pl, AblationFlags, DataStage, PipelineError, Prepared, PretrainCorpus, Source};
use nextpoi::serve::draft::DraftHead;
use nextpoi::serve::pipeline::{run_pipeline, run_serial};
use nextpoi::serve::server::{serve_lines, serve_tcp};
use nextpoi::serve::{DecodeMode, Engine};
use nextpoi::sid::SidMap;
use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, Chain, Output};
use crate::{Cli, Command, Slice};

/// Training diverged or a gradient check failed.
#[derive(Debug)]
pub struct Divergence(pub String);

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Divergence {}

fn catalog_code(e: &CatalogError) -> u8 {
    match e {
        CatalogError::Io { .. } => 1,
        _ => 2,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::NonFinite { .. } => 3,
        TrainError::Model(_) => 1,
    }
}

fn align_code(e: &AlignError) -> u8 {
    match e {
        AlignError::NonFinite(_) => 3,
        AlignError::Train(t) => train_code(t),
        _ => 1,
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for c in err.chain() {
        if c.is::<Divergence>() {
            return 3;
        }
        if let Some(e) = c.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Catalog(e) => catalog_code(e),
                PipelineError::Train(e) => train_code(e),
                PipelineError::Align(e) => align_code(e),
                PipelineError::Empty(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = c.downcast_ref::<CatalogError>() {
            return catalog_code(e);
        }
        if let Some(e) = c.downcast_ref::<TrainError>() {
            return train_code(e);
        }
        if let Some(e) = c.downcast_ref::<AlignError>() {
            return align_code(e);
        }
    }
    1
}

/// Raw source as stored by `synth` and `ingest`.
#[derive(Serialize, Deserialize)]
struct SourceFile {
    catalog: Catalog,
    trajectories: Vec<Trajectory>,
    weather: Option<WeatherTimeline>,
}

#[derive(Serialize, Deserialize)]
struct SidReport {
    users: usize,
    pois: usize,
    check_ins: usize,
    rq_mse: Vec<f64>,
}

const SOURCE: &str = "source.json";
const DATA: &str = "data.json";
const SIDS: &str = "sids.json";
const CODEBOOKS: &str = "codebooks.json";
const REPORT: &str = "report.json";
const VOCAB: &str = "vocab.json";
const ALIGNMENT: &str = "alignment.jsonl";
const SEQUENCES: &str = "sequences.jsonl";
const SFT_TRAIN: &str = "sft_train.jsonl";
const MODEL: &str = "model.ckpt";
const LOSSES: &str = "losses.json";
const VARIANT: &str = "variant.json";
const PAIRS: &str = "pairs.jsonl";
const DRAFT: &str = "draft.ckpt";

/// The config for a stage: `--config`, else the input's resolved config,
/// else the built-in default; then `--seed`.
fn resolve_config(cli: &Cli, input: Option<&Artifact>) -> Result<RunConfig> {
    let cfg = match (&cli.config, input) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(a)) => a.config()?,
        (None, None) => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn print_report<T: Serialize>(cli: &Cli, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

fn load_prepared(chain: &Chain) -> Result<Prepared> {
    let sids = chain.require("build-sids")?;
    let data: DataStage = sids.read_json(DATA)?;
    let sid_map = SidMap::from_json(&sids.read(SIDS)?)?;
    let report: SidReport = sids.read_json(REPORT)?;
    let vocab = Vocab::from_json(&chain.require("build-corpus")?.read(VOCAB)?)?;
    Ok(Prepared::assemble(data, sid_map, report.rq_mse, vocab)?)
}

fn load_model(a: &Artifact, name: &str, vocab: &Vocab) -> Result<Model> {
    let p = a.file(name)?;
    let ck = Checkpoint::load(&p, Some(&vocab.hash())).with_context(|| format!("loading {}", p.display()))?;
    Ok(ck.to_model()?)
}

fn save_model(out: &mut Output, name: &str, model: &Model, vocab: &Vocab) -> Result<()> {
    Checkpoint::from_model("lm", model, &vocab.hash()).save(&out.path(name))?;
    out.track(name);
    Ok(())
}

/// Ablation flags in effect for the model at the head of `chain`.
fn chain_flags(chain: &Chain) -> Result<AblationFlags> {
    match chain.get("sft") {
        Some(a) => a.read_json(VARIANT),
        None => Ok(AblationFlags::default()),
    }
}

fn judge(cfg: &RunConfig) -> Result<Box<dyn Judge>> {
    Ok(build_judge(&cfg.judge)?)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Synth { out } => {
            let cfg = resolve_config(cli, None)?;
            let w = synth_world(&cfg.synth)?;
            let mut o = Output::create(out, "synth", &cfg, &[])?;
            let n = w.trajectories.iter().map(Trajectory::m).sum::<usize>();
            o.write_json(SOURCE, &SourceFile { catalog: w.catalog, trajectories: w.trajectories, weather: Some(w.weather) })?;
            o.finish()?;
            log::info!("synth: {n} check-ins written to {}", out.display());
        }
        Command::Ingest { out, path, catalog } => {
            let mut cfg = resolve_config(cli, None)?;
            if let Some(p) = path {
                cfg.ingest.path = Some(p.clone());
            }
            if let Some(c) = catalog {
                cfg.ingest.catalog = Some(c.clone());
            }
            if cfg.ingest.path.is_none() {
                bail!("ingest needs a check-in file (--path or ingest.path)");
            }
            cfg.validate()?;
            let src = pl::load_source(&cfg)?;
            let mut o = Output::create(out, "ingest", &cfg, &[])?;
            o.write_json(SOURCE, &SourceFile { catalog: src.catalog, trajectories: src.trajectories, weather: src.weather })?;
            o.finish()?;
        }
        Command::BuildSids { input, out } => {
            let a = Artifact::open(input)?;
            let cfg = resolve_config(cli, Some(&a))?;
            let s: SourceFile = a.read_json(SOURCE)?;
            let data = pl::prepare_data(Source { catalog: s.catalog, trajectories: s.trajectories, weather: s.weather }, &cfg)?;
            let (sid_map, books, rq_mse) = pl::build_sids(&data.dataset.catalog, &cfg)?;
            let report = SidReport {
                users: data.dataset.trajectories.len(),
                pois: data.dataset.catalog.len(),
                check_ins: data.dataset.trajectories.iter().map(Trajectory::m).sum(),
                rq_mse,
            };
            let mut o = Output::create(out, "build-sids", &cfg, &[&a])?;
            o.write_json(DATA, &data)?;
            o.write(SIDS, sid_map.to_json().as_bytes())?;
            o.write_json(CODEBOOKS, &books)?;
            o.write_json(REPORT, &report)?;
            o.finish()?;
            print_report(cli, &report, || format!("users {}  pois {}  check-ins {}  rq mse {:?}\n", report.users, report.pois, report.check_ins, report.rq_mse))?;
        }
        Command::BuildCorpus { input, out } => {
            let a = Artifact::open(input)?;
            if a.stage() != "build-sids" {
                bail!("build-corpus expects a build-sids directory, got {} output", a.stage());
            }
            let cfg = resolve_config(cli, Some(&a))?;
            let data: DataStage = a.read_json(DATA)?;
            let sid_map = SidMap::from_json(&a.read(SIDS)?)?;
            let report: SidReport = a.read_json(REPORT)?;
            let vocab = pl::build_vocab(&data, &sid_map, &cfg)?;
            let prep = Prepared::assemble(data, sid_map, report.rq_mse, vocab)?;
            let corpus = pl::pretrain_corpus(&prep, &cfg)?;
            let train = prep.contexts(Split::Train, cfg.corpus.max_history);
            let sft = pl::sft_records(&prep, &train, PromptOptions::default(), &cfg)?;
            let mut o = Output::create(out, "build-corpus", &cfg, &[&a])?;
            o.write(VOCAB, prep.vocab.to_json().as_bytes())?;
            o.write(ALIGNMENT, records_to_jsonl(&corpus.alignment).as_bytes())?;
            o.write(SEQUENCES, records_to_jsonl(&corpus.sequences).as_bytes())?;
            o.write(SFT_TRAIN, records_to_jsonl(&sft).as_bytes())?;
            let summary = serde_json::json!({
                "vocab": prep.vocab.len(),
                "alignment_records": corpus.alignment.len(),
                "sequence_records": corpus.sequences.len(),
                "sft_records": sft.len(),
            });
            o.write_json(REPORT, &summary)?;
            o.finish()?;
            print_report(cli, &summary, || format!("{summary}\n"))?;
        }
        Command::Pretrain { input, out, no_alignment_corpus } => {
            let chain = Chain::resolve(input)?;
            let a = chain.require("build-corpus")?;
            let cfg = resolve_config(cli, Some(a))?;
            let prep = load_prepared(&chain)?;
            let corpus = PretrainCorpus { alignment: records_from_jsonl(&a.read(ALIGNMENT)?)?, sequences: records_from_jsonl(&a.read(SEQUENCES)?)? };
            let (model, losses) = pl::pretrain(prep.new_model(&cfg)?, &corpus, &prep, &cfg, !no_alignment_corpus)?;
            let flags = AblationFlags { no_alignment_corpus: *no_alignment_corpus, ..AblationFlags::default() };
            let mut o = Output::create(out, "pretrain", &cfg, &[a])?;
            save_model(&mut o, MODEL, &model, &prep.vocab)?;
            o.write_json(LOSSES, &losses)?;
            o.write_json(VARIANT, &flags)?;
            o.finish()?;
            log::info!("pretrain: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Sft { input, out, no_profile, no_situation } => {
            let chain = Chain::resolve(input)?;
            let head = &chain.head;
            let cfg = resolve_config(cli, Some(head))?;
            let prep = load_prepared(&chain)?;
            let mut flags = AblationFlags { no_profile: *no_profile, no_situation: *no_situation, ..AblationFlags::default() };
            let init = match head.stage() {
                "pretrain" => {
                    let f: AblationFlags = head.read_json(VARIANT)?;
                    flags.no_alignment_corpus = f.no_alignment_corpus;
                    load_model(head, MODEL, &prep.vocab)?
                }
                "build-corpus" => {
                    flags.no_pretrain = true;
                    prep.new_model(&cfg)?
                }
                s => bail!("sft expects a pretrain or build-corpus directory, got {s} output"),
            };
            let corpus = chain.require("build-corpus")?;
            let records = if flags.prompt_options() == PromptOptions::default() {
                records_from_jsonl(&corpus.read(SFT_TRAIN)?)?
            } else {
                let train = prep.contexts(Split::Train, cfg.corpus.max_history);
                pl::sft_records(&prep, &train, flags.prompt_options(), &cfg)?
            };
            let (model, losses) = pl::sft(init, &records, &cfg.sft.train, cfg.sft.epochs, pl::stage_seed(cfg.seed, "sft"))?;
            let mut o = Output::create(out, "sft", &cfg, &[head])?;
            save_model(&mut o, MODEL, &model, &prep.vocab)?;
            o.write_json(LOSSES, &losses)?;
            o.write_json(VARIANT, &flags)?;
            o.finish()?;
            log::info!("sft: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Dpo { input, out } => {
            let chain = Chain::resolve(input)?;
            let head = &chain.head;
            if head.stage() != "sft" {
                bail!("dpo expects an sft directory, got {} output", head.stage());
            }
            let cfg = resolve_config(cli, Some(head))?;
            let prep = load_prepared(&chain)?;
            let ckpt = head.file(MODEL)?;
            let reference_id = crate::artifact::sha256_file(&ckpt)?;
            let sft_model = load_model(head, MODEL, &prep.vocab)?;
            let j = judge(&cfg)?;
            let pairs = pl::preference_pairs(&prep, &sft_model, &cfg, j.as_ref());
            let (model, report) = pl::run_dpo(&sft_model, &pairs, &cfg, &reference_id)?;
            let mut o = Output::create(out, "dpo", &cfg, &[head])?;
            o.write(PAIRS, pairs_to_jsonl(&pairs).as_bytes())?;
            save_model(&mut o, MODEL, &model, &prep.vocab)?;
            o.write_json(REPORT, &report)?;
            o.finish()?;
            print_report(cli, &report, || {
                format!("pairs {}  steps {}  epoch margins {:?}  final margin {:.4}\n", pairs.len(), report.steps, report.epoch_margins, report.final_margin)
            })?;
        }
        Command::Eval { input, out, slice, markov } => {
            let chain = Chain::resolve(input)?;
            let head = &chain.head;
            let cfg = resolve_config(cli, Some(head))?;
            let prep = load_prepared(&chain)?;
            let model = load_model(head, MODEL, &prep.vocab)?;
            let opts = chain_flags(&chain)?.prompt_options();
            let contexts = match slice {
                Slice::Test => prep.contexts(Split::Test, cfg.corpus.max_history),
                Slice::Val => prep.contexts(Split::Validation, cfg.corpus.max_history),
                Slice::Violation => pl::violation_slice(&prep, &prep.contexts(Split::Test, cfg.corpus.max_history)),
            };
            let j = judge(&cfg)?;
            let report = pl::evaluate_model(&prep, &model, &contexts, opts, cfg.corpus.max_history, j.as_ref());
            let baseline = if *markov {
                let mk = pl::markov_baseline(&prep)?;
                Some(nextpoi::bench::evaluate(&mk, &contexts, &prep.profiles, &prep.dataset.catalog, j.as_ref()))
            } else {
                None
            };
            let comparison = baseline.as_ref().map(|b| compare(&report, b)).transpose()?;
            if let Some(dir) = out {
                let mut o = Output::create(dir, "eval", &cfg, &[head])?;
                o.write_json(REPORT, &report.summary_json())?;
                o.write("samples.csv", report.to_csv().as_bytes())?;
                if let (Some(b), Some(c)) = (&baseline, &comparison) {
                    o.write_json("markov_report.json", &b.summary_json())?;
                    o.write_json("comparison.json", c)?;
                }
                o.finish()?;
            }
            let json = serde_json::json!({ "report": report.summary_json(), "markov": baseline.as_ref().map(EvalReport::summary_json), "comparison": comparison });
            print_report(cli, &json, || {
                let mut s = report.to_table();
                if let Some(c) = &comparison {
                    s.push_str("\nvs markov baseline\n");
                    s.push_str(&c.to_table());
                }
                s
            })?;
        }
        Command::Ablate { input, out, variants } => {
            let chain = Chain::resolve(input)?;
            let head = &chain.head;
            if head.stage() != "sft" || chain_flags(&chain)? != AblationFlags::default() {
                bail!("ablate expects the full-pipeline sft directory");
            }
            let cfg = resolve_config(cli, Some(head))?;
            let prep = load_prepared(&chain)?;
            let model = load_model(head, MODEL, &prep.vocab)?;
            let pretrained = load_model(chain.require("pretrain")?, MODEL, &prep.vocab)?;
            let selected: Vec<(&str, AblationFlags)> = if variants.is_empty() {
                AblationFlags::singles()
            } else {
                variants
                    .iter()
                    .map(|v| AblationFlags::parse(v).map(|f| (v.as_str(), f)).with_context(|| format!("unknown ablation {v:?}")))
                    .collect::<Result<_>>()?
            };
            let contexts = prep.contexts(Split::Test, cfg.corpus.max_history);
            let j = judge(&cfg)?;
            let full = pl::evaluate_model(&prep, &model, &contexts, PromptOptions::default(), cfg.corpus.max_history, j.as_ref());
            let reports = pl::ablate(&prep, &cfg, &selected, Some(&pretrained), &contexts, j.as_ref())?;
            let mut summary = BTreeMap::new();
            summary.insert("full".to_string(), full.summary_json());
            let mut text = format!("{:<22} {:>8} {:>8}\n{:<22} {:>8.4} {:>8.4}\n", "variant", "acc@1", "a_cas", "full", full.acc_at_1, full.a_cas);
            for (name, r) in &reports {
                summary.insert(name.clone(), r.summary_json());
                text.push_str(&format!("{name:<22} {:>8.4} {:>8.4}\n", r.acc_at_1, r.a_cas));
            }
            let mut o = Output::create(out, "ablate", &cfg, &[head])?;
            o.write_json("ablation.json", &summary)?;
            o.finish()?;
            print_report(cli, &summary, || text)?;
        }
        Command::Serve { input, draft, listen, max_connections } => {
            let chain = Chain::resolve(input)?;
            let prep = load_prepared(&chain)?;
            let model = load_model(&chain.head, MODEL, &prep.vocab)?;
            let head = match draft {
                Some(d) => {
                    let a = Artifact::open(d)?;
                    let p = a.file(DRAFT)?;
                    let ck = Checkpoint::load(&p, Some(&prep.vocab.hash()))?;
                    Some(DraftHead::from_params(&model, ck.params)?)
                }
                None => None,
            };
            let engine = Engine::new(model, prep.trie.clone(), head);
            match listen {
                Some(addr) => {
                    let listener = TcpListener::bind(addr).with_context(|| format!("cannot listen on {addr}"))?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    serve_tcp(&engine, &prep.vocab, &listener, *max_connections)?;
                }
                None => {
                    serve_lines(&engine, &prep.vocab, BufReader::new(io::stdin().lock()), io::stdout().lock())?;
                }
            }
        }
        Command::BenchLatency { input, out, requests } => {
            let chain = Chain::resolve(input)?;
            let head = &chain.head;
            let cfg = resolve_config(cli, Some(head))?;
            let prep = load_prepared(&chain)?;
            let model = load_model(head, MODEL, &prep.vocab)?;
            let corpus = chain.require("build-corpus")?;
            let records = records_from_jsonl(&corpus.read(SFT_TRAIN)?)?;
            let start = Instant::now();
            let (draft, draft_report) = pl::train_draft(&model, &records, &cfg)?;
            log::info!("draft head: agreement {:.3} ({:.0}s)", draft_report.agreement, start.elapsed().as_secs_f64());
            let n = requests.unwrap_or(cfg.serve.requests);
            let contexts = prep.contexts(Split::Test, cfg.corpus.max_history);
            let reqs = pl::decode_requests(&prep, &contexts, n, DecodeMode::Speculative, &cfg)?;
            let engine = Engine::new(model, prep.trie.clone(), Some(draft.clone()));
            let serial = run_serial(&engine, reqs.clone())?;
            let piped = run_pipeline(&engine, reqs, cfg.serve.workers, cfg.serve.queue_bound)?;
            let same = serial.results.iter().zip(&piped.results).all(|(a, b)| a.tokens == b.tokens);
            let json = serde_json::json!({
                "serial": serial.stats,
                "pipeline": piped.stats,
                "throughput_ratio": piped.stats.requests_per_sec / serial.stats.requests_per_sec.max(1e-12),
                "identical_outputs": same,
                "draft": draft_report,
            });
            let mut o = Output::create(out, "bench-latency", &cfg, &[head])?;
            Checkpoint::new("draft", serde_json::json!({ "d": draft.d, "heads": draft.heads }), &prep.vocab.hash(), draft.params.clone(), None, 0, None).save(&o.path(DRAFT))?;
            o.track(DRAFT);
            o.write_json("latency.json", &json)?;
            o.finish()?;
            print_report(cli, &json, || {
                let row = |name: &str, s: &nextpoi::serve::pipeline::LatencyStats| {
                    format!("{name:<9} p50 {:>8.2} ms  p99 {:>8.2} ms  {:>8.1} req/s  {:>8.1} tok/s  accept {:.3}\n", s.p50_ms, s.p99_ms, s.requests_per_sec, s.tokens_per_sec, s.acceptance_rate)
                };
                format!("{}{}identical outputs: {same}\n", row("serial", &serial.stats), row("pipeline", &piped.stats))
            })?;
        }
        Command::Gradcheck { probes } => {
            let cfg = resolve_config(cli, None)?;
            let report = run_gradcheck(&cfg, *probes)?;
            print_report(cli, &report, || format!("model max rel err {:.3e}\ndpo   max rel err {:.3e}\n", report.model, report.dpo))?;
            if !(report.model < GRAD_TOL && report.dpo < GRAD_TOL) {
                return Err(Divergence(format!("gradient check failed: model {:.3e}, dpo {:.3e} (tolerance {GRAD_TOL:e})", report.model, report.dpo)).into());
            }
        }
    }
    Ok(())
}

const GRAD_TOL: f64 = 1e-3;

#[derive(Serialize)]
struct GradReport {
    model: f64,
    dpo: f64,
    probes: usize,
}

/// Checks on a small model with the configured depth and head count.
fn run_gradcheck(cfg: &RunConfig, probes: usize) -> Result<GradReport> {
    let heads = cfg.model.n_heads.max(1);
    let mc = ModelConfig { d_model: 4 * heads, n_heads: heads, n_layers: cfg.model.n_layers.clamp(1, 2), context_len: 16, vocab_size: 13, seed: cfg.seed, init_std: 0.3, ..ModelConfig::default() };
    let model = Model::new(mc)?;
    let batch = vec![Example::causal(&[1, 4, 9, 2, 7, 3]), Example { input: vec![1, 5, 4, 6, 10], targets: vec![(1, 8), (4, 2)] }];
    let m = gradcheck(&model, &batch, probes, 1e-5, cfg.seed)?;
    let reference = model.clone();
    let mut policy = model;
    for (i, p) in policy.params.iter_mut().enumerate() {
        *p += 0.01 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
    }
    let pairs = vec![gradcheck_pair([1, 4, 6, 3], [7, 8, 2], [9, 11, 2]), gradcheck_pair([1, 5, 10, 3], [6, 8, 2], [10, 12, 2])];
    let refs = nextpoi::align::reference_logps(&reference, &pairs)?;
    let batch: Vec<_> = pairs.iter().zip(refs.iter().copied()).collect();
    let d = nextpoi::align::dpo_gradcheck(&policy, &batch, 0.5, probes, 1e-5, cfg.seed)?;
    Ok(GradReport { model: m.max_rel_err, dpo: d.max_rel_err, probes })
}

fn gradcheck_pair(prompt: [u32; 4], chosen: [u32; 3], rejected: [u32; 3]) -> PreferencePair {
    let s = CognitiveScores { tcs: None, scs: 1.0, pas: 1, sas: 1 };
    PreferencePair {
        prompt_ids: prompt.to_vec(),
        chosen_ids: chosen.to_vec(),
        rejected_ids: rejected.to_vec(),
        provenance: Provenance {
            context: String::new(),
            chosen_poi: PoiId("w".into()),
            chosen_scores: s,
            chosen_is_truth: true,
            rejected_poi: PoiId("l".into()),
            rejected_scores: CognitiveScores { sas: 0, ..s },
        },
    }
}
