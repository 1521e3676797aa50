//! Evaluation: test contexts, Acc@1 plus cognitive averages, report
//! comparison, and the synthetic planted-pattern world.

pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::catalog::{Catalog, CheckIn, PoiId, Situation, Split, SplitDataset, UserId, Weather};
use crate::cognition::{score, Judge};
use crate::model::markov::MarkovBaseline;
use crate::profile::UserProfile;
use synth::WeatherTimeline;

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("reports cover different test sets (n = {new} vs {old})")]
    MismatchedN { new: usize, old: usize },
}

/// One prediction point: what the predictor sees plus the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    pub user_id: UserId,
    /// Most recent check-ins before the target, oldest first.
    pub history: Vec<CheckIn>,
    pub situation: Situation,
    pub truth: PoiId,
}

/// Contexts for every check-in of `split` that has at least one predecessor.
/// The situation is the target time, the previous check-in's location and
/// the weather from `weather` (`Unknown` without a timeline).
pub fn build_contexts(ds: &SplitDataset, split: Split, weather: Option<&WeatherTimeline>, max_history: usize) -> Vec<EvalContext> {
    let mut out = Vec::new();
    for (t, marks) in ds.trajectories.iter().zip(&ds.splits) {
        for j in 1..t.m() {
            if marks[j] != split {
                continue;
            }
            let target = &t.check_ins[j];
            let Some(prev) = ds.catalog.get(&t.check_ins[j - 1].poi_id) else { continue };
            let w = weather.map_or(Weather::Unknown, |tl| tl.at_timestamp(target.timestamp, target.tz_offset_min));
            out.push(EvalContext {
                user_id: t.user_id.clone(),
                history: t.check_ins[j.saturating_sub(max_history)..j].to_vec(),
                situation: Situation { time: target.timestamp, tz_offset_min: target.tz_offset_min, location: prev.point, weather: w },
                truth: target.poi_id.clone(),
            });
        }
    }
    out
}

/// Top-1 next-POI predictor. `None` means the output did not resolve to a POI.
pub trait Predictor: Sync {
    fn predict(&self, profile: &UserProfile, history: &[CheckIn], situation: &Situation) -> Option<PoiId>;
}

impl Predictor for MarkovBaseline {
    fn predict(&self, _: &UserProfile, history: &[CheckIn], _: &Situation) -> Option<PoiId> {
        // An unknown id falls back to the global mode.
        let last = history.last().map_or_else(|| PoiId(String::new()), |c| c.poi_id.clone());
        Some(MarkovBaseline::predict(self, &last).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub user: String,
    pub truth_poi: String,
    pub pred_poi: Option<String>,
    pub correct: bool,
    /// The prediction did not resolve to a catalog POI.
    pub unresolved: bool,
    pub tcs: Option<f64>,
    pub scs: Option<f64>,
    pub pas: Option<u8>,
    pub sas: Option<u8>,
    pub cas: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_at_1: f64,
    pub a_tcs: f64,
    pub a_scs: f64,
    pub a_pas: f64,
    pub a_sas: f64,
    pub a_cas: f64,
    pub n: usize,
    /// Samples with a defined TCS (history has a same-bucket check-in).
    pub n_tcs_defined: usize,
    pub n_unresolved: usize,
    pub samples: Vec<SampleRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleRecord>) -> Self {
        let n = samples.len();
        let correct = samples.iter().filter(|s| s.correct).count();
        EvalReport {
            acc_at_1: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            a_tcs: mean(samples.iter().filter_map(|s| s.tcs)),
            a_scs: mean(samples.iter().filter_map(|s| s.scs)),
            a_pas: mean(samples.iter().filter_map(|s| s.pas.map(f64::from))),
            a_sas: mean(samples.iter().filter_map(|s| s.sas.map(f64::from))),
            a_cas: mean(samples.iter().filter_map(|s| s.cas)),
            n,
            n_tcs_defined: samples.iter().filter(|s| s.tcs.is_some()).count(),
            n_unresolved: samples.iter().filter(|s| s.unresolved).count(),
            samples,
        }
    }

    pub fn metrics(&self) -> [(&'static str, f64); 6] {
        [
            ("acc_at_1", self.acc_at_1),
            ("a_tcs", self.a_tcs),
            ("a_scs", self.a_scs),
            ("a_pas", self.a_pas),
            ("a_sas", self.a_sas),
            ("a_cas", self.a_cas),
        ]
    }

    /// Summary without the per-sample records.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut m: serde_json::Map<String, serde_json::Value> = self.metrics().iter().map(|(k, v)| (k.to_string(), (*v).into())).collect();
        m.insert("n".into(), self.n.into());
        m.insert("n_tcs_defined".into(), self.n_tcs_defined.into());
        m.insert("n_unresolved".into(), self.n_unresolved.into());
        serde_json::Value::Object(m)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.metrics() {
            let _ = writeln!(s, "{k:<10} {v:>8.4}");
        }
        let _ = writeln!(s, "{:<10} {:>8}", "n", self.n);
        let _ = writeln!(s, "{:<10} {:>8}", "tcs_def", self.n_tcs_defined);
        let _ = writeln!(s, "{:<10} {:>8}", "unresolved", self.n_unresolved);
        s
    }

    pub fn to_csv(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut s = String::from("user,truth_poi,pred_poi,correct,tcs,scs,pas,sas,cas\n");
        for r in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.user,
                r.truth_poi,
                r.pred_poi.as_deref().unwrap_or(""),
                u8::from(r.correct),
                opt(r.tcs),
                opt(r.scs),
                opt(r.pas),
                opt(r.sas),
                opt(r.cas)
            );
        }
        s
    }
}

fn score_one(
    predictor: &dyn Predictor,
    ctx: &EvalContext,
    profile: &UserProfile,
    catalog: &Catalog,
    judge: &dyn Judge,
) -> SampleRecord {
    let pred = predictor.predict(profile, &ctx.history, &ctx.situation);
    let poi = pred.as_ref().and_then(|p| catalog.get(p));
    let scores = poi.map(|p| score(&ctx.history, catalog, profile, &ctx.situation, p, judge));
    SampleRecord {
        user: ctx.user_id.0.clone(),
        truth_poi: ctx.truth.0.clone(),
        pred_poi: pred.as_ref().map(|p| p.0.clone()),
        correct: poi.is_some() && pred.as_ref() == Some(&ctx.truth),
        unresolved: poi.is_none(),
        tcs: scores.and_then(|s| s.tcs),
        scs: scores.map(|s| s.scs),
        pas: scores.map(|s| s.pas),
        sas: scores.map(|s| s.sas),
        cas: scores.map(|s| s.cas()),
    }
}

/// Runs `predictor` once per context across the available cores; samples
/// come back in context order. Users without a profile get an empty one.
pub fn evaluate(
    predictor: &dyn Predictor,
    contexts: &[EvalContext],
    profiles: &BTreeMap<UserId, UserProfile>,
    catalog: &Catalog,
    judge: &dyn Judge,
) -> EvalReport {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(contexts.len().max(1));
    let chunk = contexts.len().div_ceil(threads).max(1);
    let empty: BTreeMap<&UserId, UserProfile> =
        contexts.iter().filter(|c| !profiles.contains_key(&c.user_id)).map(|c| (&c.user_id, UserProfile::empty(c.user_id.clone()))).collect();
    let profile_of = |u: &UserId| profiles.get(u).or_else(|| empty.get(u)).expect("profile or empty");
    let samples: Vec<SampleRecord> = std::thread::scope(|s| {
        let handles: Vec<_> = contexts
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| score_one(predictor, c, profile_of(&c.user_id), catalog, judge)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("eval worker panicked")).collect()
    });
    EvalReport::from_samples(samples)
}

fn rel_or_na<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("n/a"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub metric: &'static str,
    pub new: f64,
    pub old: f64,
    pub abs_delta: f64,
    /// `(new - old) / old`; `None` when the baseline is 0.
    #[serde(serialize_with = "rel_or_na")]
    pub rel_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub n: usize,
    pub rows: Vec<DeltaRow>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>8} {:>9} {:>9}\n", "metric", "new", "old", "abs", "rel");
        for r in &self.rows {
            let rel = r.rel_delta.map_or_else(|| "n/a".to_string(), |x| format!("{x:+.4}"));
            let _ = writeln!(s, "{:<10} {:>8.4} {:>8.4} {:>+9.4} {:>9}", r.metric, r.new, r.old, r.abs_delta, rel);
        }
        s
    }
}

pub fn compare(new: &EvalReport, old: &EvalReport) -> Result<Comparison, BenchError> {
    if new.n != old.n {
        return Err(BenchError::MismatchedN { new: new.n, old: old.n });
    }
    let rows = new
        .metrics()
        .iter()
        .zip(old.metrics())
        .map(|(&(metric, a), (_, b))| DeltaRow { metric, new: a, old: b, abs_delta: a - b, rel_delta: (b != 0.0).then(|| (a - b) / b) })
        .collect();
    Ok(Comparison { n: new.n, rows })
}
