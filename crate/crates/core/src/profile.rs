//! User profiles distilled from trajectories: static places (home/work),
//! long-term category preferences and weekly periodic demands.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, PoiId, Trajectory, UserId, WeekdaySet};
use crate::geo::{geohash_encode, haversine, GeohashCell, DEFAULT_GEOHASH_PRECISION};

pub const PROFILE_SCHEMA_VERSION: u32 = 1;
pub const MIN_MOVE_DISTANCE_M: f64 = 100.0;
pub const DEFAULT_MOVE_DISTANCE_M: f64 = 1000.0;
pub const MAX_PROFILE_WORDS: usize = 120;
pub const EMPTY_PROFILE_TEXT: &str = "no known profile";

/// Hour window `[start, end)` on a 24h clock; `start > end` wraps past midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourWindow {
    pub start: u8,
    pub end: u8,
}

impl HourWindow {
    pub fn contains(&self, hour: u8) -> bool {
        if self.start <= self.end {
            hour >= self.start && hour < self.end
        } else {
            hour >= self.start || hour < self.end
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub home_window: HourWindow,
    /// Applied to weekdays only.
    pub work_window: HourWindow,
    pub min_modal_share: f64,
    pub half_life_days: f64,
    pub min_support: usize,
    pub min_distinct_weeks: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            home_window: HourWindow { start: 20, end: 8 },
            work_window: HourWindow { start: 9, end: 18 },
            min_modal_share: 0.3,
            half_life_days: 30.0,
            min_support: 3,
            min_distinct_weeks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicDemand {
    pub category: String,
    pub weekday_set: WeekdaySet,
    pub hour_bucket: u8,
    pub support: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub v: u32,
    pub user_id: UserId,
    pub home: Option<PoiId>,
    pub home_cell: Option<GeohashCell>,
    pub work: Option<PoiId>,
    pub work_cell: Option<GeohashCell>,
    /// Top-level category -> decayed share; sums to 1 when non-empty.
    pub long_term: BTreeMap<String, f64>,
    pub periodic: Vec<PeriodicDemand>,
    /// d_u in meters.
    pub mean_move_distance: f64,
}

impl UserProfile {
    pub fn empty(user_id: UserId) -> Self {
        UserProfile {
            v: PROFILE_SCHEMA_VERSION,
            user_id,
            home: None,
            home_cell: None,
            work: None,
            work_cell: None,
            long_term: BTreeMap::new(),
            periodic: Vec::new(),
            mean_move_distance: DEFAULT_MOVE_DISTANCE_M,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.home.is_none() && self.work.is_none() && self.long_term.is_empty() && self.periodic.is_empty()
    }

    /// Categories sorted by weight (descending, ties by name).
    pub fn top_categories(&self, n: usize) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self.long_term.iter().map(|(k, w)| (k.as_str(), *w)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        v.truncate(n);
        v
    }
}

fn modal(ids: &[&PoiId], min_share: f64) -> Option<PoiId> {
    if ids.is_empty() {
        return None;
    }
    let mut counts: BTreeMap<&PoiId, usize> = BTreeMap::new();
    for id in ids {
        *counts.entry(id).or_default() += 1;
    }
    // BTreeMap iteration makes the lowest id win ties.
    let (best, n) = counts.iter().fold((None, 0), |acc, (id, n)| if *n > acc.1 { (Some(*id), *n) } else { acc });
    let share = n as f64 / ids.len() as f64;
    (share >= min_share).then(|| best.cloned()).flatten()
}

pub fn infer_static(t: &Trajectory, cfg: &ProfileConfig) -> (Option<PoiId>, Option<PoiId>) {
    let mut home = Vec::new();
    let mut work = Vec::new();
    for c in &t.check_ins {
        let lt = c.local_time();
        if cfg.home_window.contains(lt.hour) {
            home.push(&c.poi_id);
        }
        if !lt.is_weekend() && cfg.work_window.contains(lt.hour) {
            work.push(&c.poi_id);
        }
    }
    (modal(&home, cfg.min_modal_share), modal(&work, cfg.min_modal_share))
}

/// Exponentially decayed top-level category shares, decayed relative to the
/// latest check-in.
pub fn infer_long_term(t: &Trajectory, catalog: &Catalog, half_life_days: f64) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let Some(last) = t.check_ins.iter().map(|c| c.timestamp).max() else {
        return out;
    };
    let half_life_s = half_life_days * 86_400.0;
    for c in &t.check_ins {
        let Some(p) = catalog.get(&c.poi_id) else { continue };
        let w = 0.5f64.powf((last - c.timestamp) as f64 / half_life_s);
        *out.entry(p.top_category().to_string()).or_insert(0.0) += w;
    }
    let total: f64 = out.values().sum();
    if total > 0.0 {
        out.values_mut().for_each(|w| *w /= total);
    }
    out
}

pub fn infer_periodic(t: &Trajectory, catalog: &Catalog, cfg: &ProfileConfig) -> Vec<PeriodicDemand> {
    let weeks: Vec<i64> = t.check_ins.iter().map(|c| c.local_time().week_index()).collect();
    let (Some(first), Some(last)) = (weeks.iter().min(), weeks.iter().max()) else {
        return Vec::new();
    };
    let total_weeks = (last - first + 1) as usize;
    if total_weeks < cfg.min_distinct_weeks.max(3) {
        return Vec::new();
    }
    let mut cells: BTreeMap<(String, u8, u8), (usize, BTreeSet<i64>)> = BTreeMap::new();
    for (c, week) in t.check_ins.iter().zip(&weeks) {
        let Some(p) = catalog.get(&c.poi_id) else { continue };
        let lt = c.local_time();
        let e = cells.entry((p.top_category().to_string(), lt.weekday, lt.hour)).or_default();
        e.0 += 1;
        e.1.insert(*week);
    }
    let mut out: Vec<PeriodicDemand> = cells
        .into_iter()
        .filter(|(_, (support, w))| *support >= cfg.min_support && w.len() >= cfg.min_distinct_weeks)
        .map(|((category, weekday, hour), (support, w))| PeriodicDemand {
            category,
            weekday_set: WeekdaySet::single(weekday),
            hour_bucket: hour,
            support,
            score: w.len() as f64 / total_weeks as f64,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.support.cmp(&a.support))
            .then_with(|| a.category.cmp(&b.category))
            .then(a.weekday_set.cmp(&b.weekday_set))
            .then(a.hour_bucket.cmp(&b.hour_bucket))
    });
    out
}

/// Mean hop length between consecutive distinct POIs, floored at 100 m.
pub fn mean_move_distance(t: &Trajectory, catalog: &Catalog) -> f64 {
    if t.m() < 2 {
        return DEFAULT_MOVE_DISTANCE_M;
    }
    let mut points = Vec::new();
    let mut prev: Option<&PoiId> = None;
    for c in &t.check_ins {
        if prev == Some(&c.poi_id) {
            continue;
        }
        prev = Some(&c.poi_id);
        if let Some(p) = catalog.get(&c.poi_id) {
            points.push(p.point);
        }
    }
    let hops: Vec<f64> = points.windows(2).map(|w| haversine(w[0], w[1])).collect();
    let mean = if hops.is_empty() { 0.0 } else { hops.iter().sum::<f64>() / hops.len() as f64 };
    mean.max(MIN_MOVE_DISTANCE_M)
}

fn cell_of(catalog: &Catalog, id: &Option<PoiId>) -> Option<GeohashCell> {
    let p = catalog.get(id.as_ref()?)?;
    geohash_encode(p.point, DEFAULT_GEOHASH_PRECISION).ok()
}

pub fn build_profile(t: &Trajectory, catalog: &Catalog, cfg: &ProfileConfig) -> UserProfile {
    let (home, work) = infer_static(t, cfg);
    UserProfile {
        v: PROFILE_SCHEMA_VERSION,
        user_id: t.user_id.clone(),
        home_cell: cell_of(catalog, &home),
        work_cell: cell_of(catalog, &work),
        home,
        work,
        long_term: infer_long_term(t, catalog, cfg.half_life_days),
        periodic: infer_periodic(t, catalog, cfg),
        mean_move_distance: mean_move_distance(t, catalog),
    }
}

fn hour12(h: u8) -> String {
    match h {
        0 => "12 AM".into(),
        1..=11 => format!("{h} AM"),
        12 => "12 PM".into(),
        _ => format!("{} PM", h - 12),
    }
}

/// Prompt-ready summary, at most [`MAX_PROFILE_WORDS`] words.
pub fn render_profile_text(p: &UserProfile) -> String {
    if p.is_empty() {
        return EMPTY_PROFILE_TEXT.to_string();
    }
    let mut parts = Vec::new();
    match (&p.home_cell, &p.home) {
        (Some(c), _) => parts.push(format!("home in {}", c.token())),
        (None, Some(_)) => parts.push("home known".to_string()),
        _ => {}
    }
    match (&p.work_cell, &p.work) {
        (Some(c), _) => parts.push(format!("work in {}", c.token())),
        (None, Some(_)) => parts.push("work known".to_string()),
        _ => {}
    }
    let top = p.top_categories(3);
    if !top.is_empty() {
        let cats: Vec<String> = top.iter().map(|(c, w)| format!("{c} {:.0}%", w * 100.0)).collect();
        parts.push(format!("prefers {}", cats.join(", ")));
    }
    let periodic: Vec<String> = p
        .periodic
        .iter()
        .take(3)
        .map(|d| {
            let days: Vec<&str> = d.weekday_set.days().map(|w| crate::catalog::WEEKDAY_NAMES[w as usize]).collect();
            format!("{} on {} around {}", d.category, days.join("/"), hour12(d.hour_bucket))
        })
        .collect();
    if !periodic.is_empty() {
        parts.push(format!("often {}", periodic.join(", ")));
    }
    let text = parts.join("; ");
    let words: Vec<&str> = text.split_whitespace().collect();
    words[..words.len().min(MAX_PROFILE_WORDS)].join(" ")
}

pub fn profile_to_json(p: &UserProfile) -> String {
    serde_json::to_string(p).unwrap_or_default()
}
