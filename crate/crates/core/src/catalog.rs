//! POI / check-in data model, file ingestion and dataset preprocessing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("too many malformed rows ({} of {}): {}", .0.skipped, .0.rows, .0.to_json())]
    TooManyMalformed(ParseReport),
    #[error("preprocessing removed every check-in")]
    EmptyResult,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid poi: {0}")]
    InvalidPoi(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoiId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for PoiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PoiId {
    fn from(s: &str) -> Self {
        PoiId(s.to_string())
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

pub const WEEKDAY_NAMES: [&str; 7] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

/// Bitmask of weekdays, bit 0 = Monday.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeekdaySet(pub u8);

impl WeekdaySet {
    pub const ALL: WeekdaySet = WeekdaySet(0x7f);
    pub const WORKDAYS: WeekdaySet = WeekdaySet(0x1f);

    pub fn single(weekday: u8) -> Self {
        WeekdaySet(1 << weekday)
    }

    pub fn contains(&self, weekday: u8) -> bool {
        weekday < 7 && self.0 & (1 << weekday) != 0
    }

    pub fn insert(&mut self, weekday: u8) {
        self.0 |= 1 << weekday;
    }

    pub fn days(&self) -> impl Iterator<Item = u8> + '_ {
        (0..7).filter(|d| self.contains(*d))
    }

    /// Parses a weekday name or 3-letter abbreviation (case-insensitive).
    pub fn parse_day(name: &str) -> Option<u8> {
        let n = name.trim().to_ascii_lowercase();
        if n.len() < 3 {
            return None;
        }
        WEEKDAY_NAMES
            .iter()
            .position(|w| {
                let w = w.to_ascii_lowercase();
                w == n || w[..3] == n
            })
            .map(|d| d as u8)
    }
}

/// One opening window. `close_min < open_min` means the window runs past midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenHours {
    pub days: WeekdaySet,
    pub open_min: u16,
    pub close_min: u16,
}

impl OpenHours {
    pub fn always() -> Self {
        OpenHours { days: WeekdaySet::ALL, open_min: 0, close_min: 1440 }
    }

    pub fn is_open(&self, weekday: u8, minute: u16) -> bool {
        if self.close_min >= self.open_min {
            self.days.contains(weekday) && minute >= self.open_min && minute < self.close_min
        } else {
            let prev = (weekday + 6) % 7;
            (self.days.contains(weekday) && minute >= self.open_min) || (self.days.contains(prev) && minute < self.close_min)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub poi_id: PoiId,
    pub name: String,
    pub point: GeoPoint,
    pub category_path: Vec<String>,
    pub description: String,
    pub indoor: bool,
    /// Empty means always open.
    pub open_hours: Vec<OpenHours>,
}

impl Poi {
    pub fn top_category(&self) -> &str {
        &self.category_path[0]
    }

    pub fn leaf_category(&self) -> &str {
        self.category_path.last().map(String::as_str).unwrap_or("")
    }

    pub fn is_open_at(&self, t: &LocalTime) -> bool {
        self.open_hours.is_empty() || self.open_hours.iter().any(|h| h.is_open(t.weekday, t.minute_of_day()))
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.category_path.is_empty() || self.category_path.len() > 4 {
            return Err(CatalogError::InvalidPoi(format!("{}: category depth {}", self.poi_id, self.category_path.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Navigated,
    Searched,
    Walked,
    Rode,
    Other,
}

impl Action {
    pub fn parse(s: &str) -> Option<Action> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "navigated" | "navigate" => Action::Navigated,
            "searched" | "search" => Action::Searched,
            "walked" | "walk" => Action::Walked,
            "rode" | "ride" => Action::Rode,
            "other" | "checkin" | "" => Action::Other,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Rain,
    Snow,
    ExtremeHeat,
    ExtremeCold,
    Unknown,
}

impl Weather {
    pub fn describe(&self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Rain => "rainy",
            Weather::Snow => "snowy",
            Weather::ExtremeHeat => "extremely hot",
            Weather::ExtremeCold => "extremely cold",
            Weather::Unknown => "unknown",
        }
    }
}

/// Wall-clock view of a timestamp after applying a timezone offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalTime {
    /// 0 = Monday.
    pub weekday: u8,
    pub hour: u8,
    pub minute: u8,
    /// 1..=12
    pub month: u8,
    pub day: u8,
    /// Days since 1970-01-01 in local time.
    pub epoch_day: i64,
}

impl LocalTime {
    pub fn from_timestamp(ts: i64, tz_offset_min: i32) -> LocalTime {
        let local = ts + tz_offset_min as i64 * 60;
        let dt = DateTime::from_timestamp(local, 0).unwrap_or_default().naive_utc();
        LocalTime {
            weekday: dt.weekday().num_days_from_monday() as u8,
            hour: dt.hour() as u8,
            minute: dt.minute() as u8,
            month: dt.month() as u8,
            day: dt.day() as u8,
            epoch_day: local.div_euclid(86_400),
        }
    }

    pub fn minute_of_day(&self) -> u16 {
        self.hour as u16 * 60 + self.minute as u16
    }

    pub fn is_weekend(&self) -> bool {
        self.weekday >= 5
    }

    /// Monday-aligned week index.
    pub fn week_index(&self) -> i64 {
        // 1970-01-01 was a Thursday; shift so weeks start on Monday.
        (self.epoch_day + 3).div_euclid(7)
    }

    pub fn month_name(&self) -> &'static str {
        const MONTHS: [&str; 12] = [
            "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
            "November", "December",
        ];
        MONTHS[(self.month as usize).saturating_sub(1).min(11)]
    }

    pub fn weekday_name(&self) -> &'static str {
        WEEKDAY_NAMES[self.weekday as usize]
    }

    /// `7 AM`, `12 PM`, ...
    pub fn clock12(&self) -> String {
        let (h, ampm) = match self.hour {
            0 => (12, "AM"),
            h @ 1..=11 => (h, "AM"),
            12 => (12, "PM"),
            h => (h - 12, "PM"),
        };
        format!("{h} {ampm}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user_id: UserId,
    pub poi_id: PoiId,
    /// Seconds since epoch, UTC.
    pub timestamp: i64,
    pub action: Action,
    pub tz_offset_min: i32,
}

impl CheckIn {
    pub fn local_time(&self) -> LocalTime {
        LocalTime::from_timestamp(self.timestamp, self.tz_offset_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: UserId,
    pub check_ins: Vec<CheckIn>,
}

impl Trajectory {
    /// Builds a trajectory, sorting check-ins by time (ties by poi id).
    pub fn new(user_id: UserId, mut check_ins: Vec<CheckIn>) -> Self {
        check_ins.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.poi_id.cmp(&b.poi_id)));
        Trajectory { user_id, check_ins }
    }

    pub fn m(&self) -> usize {
        self.check_ins.len()
    }

    pub fn is_sorted(&self) -> bool {
        self.check_ins.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }
}

/// Request-time context: when, where, and the weather.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Situation {
    pub time: i64,
    pub tz_offset_min: i32,
    pub location: GeoPoint,
    pub weather: Weather,
}

impl Situation {
    pub fn local_time(&self) -> LocalTime {
        LocalTime::from_timestamp(self.time, self.tz_offset_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub region: String,
    pub default_tz_offset_min: i32,
    pub pois: BTreeMap<PoiId, Poi>,
}

impl Catalog {
    pub fn new(region: impl Into<String>, default_tz_offset_min: i32) -> Self {
        Catalog { region: region.into(), default_tz_offset_min, pois: BTreeMap::new() }
    }

    /// Inserts a POI; the first occurrence of an id wins.
    pub fn insert(&mut self, poi: Poi) -> bool {
        if self.pois.contains_key(&poi.poi_id) {
            return false;
        }
        self.pois.insert(poi.poi_id.clone(), poi);
        true
    }

    pub fn get(&self, id: &PoiId) -> Option<&Poi> {
        self.pois.get(id)
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Poi> {
        self.pois.values()
    }
}

const INDOOR_KEYWORDS: &[&str] = &[
    "mall", "museum", "cinema", "theater", "theatre", "office", "library", "restaurant", "cafe", "café", "coffee",
    "gym", "store", "shop", "bar", "hotel", "school", "university", "college", "hospital", "home", "residential",
    "apartment", "building", "salon", "bank", "pharmacy", "market", "station", "airport", "club", "food",
];

/// Keyword heuristic used by loaders when a source has no indoor flag.
pub fn default_indoor(category: &str) -> bool {
    let c = category.to_ascii_lowercase();
    INDOOR_KEYWORDS.iter().any(|k| c.contains(k))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    pub kept: usize,
    pub skipped: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl ParseReport {
    fn skip(&mut self, reason: &str) {
        self.rows += 1;
        self.skipped += 1;
        *self.reasons.entry(reason.to_string()).or_default() += 1;
    }

    fn keep(&mut self) {
        self.rows += 1;
        self.kept += 1;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub enum InputFormat {
    /// Tab-separated: user_id, venue_id, category, lat, lon, tz_offset_minutes, utc_time.
    FoursquareTsv,
    /// Check-in JSONL plus a companion POI catalog JSONL.
    Jsonl { catalog: PathBuf },
}

#[derive(Debug)]
pub struct Loaded {
    pub catalog: Catalog,
    pub trajectories: Vec<Trajectory>,
    pub report: ParseReport,
}

const MAX_MALFORMED: f64 = 0.10;

pub fn load_checkins(path: &Path, format: &InputFormat, region: &str) -> Result<Loaded, CatalogError> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|source| CatalogError::Io { path: p.to_path_buf(), source });
    let text = read(path)?;
    let mut report = ParseReport::default();
    let mut catalog = Catalog::new(region, 0);
    let mut rows: Vec<CheckIn> = Vec::new();
    match format {
        InputFormat::FoursquareTsv => {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                match parse_tsv_row(line) {
                    Ok((poi, ci)) => {
                        catalog.insert(poi);
                        rows.push(ci);
                        report.keep();
                    }
                    Err(reason) => report.skip(reason),
                }
            }
        }
        InputFormat::Jsonl { catalog: cat_path } => {
            let cat_text = read(cat_path)?;
            for line in cat_text.lines().filter(|l| !l.trim().is_empty()) {
                match parse_poi_line(line) {
                    Ok(poi) => {
                        catalog.insert(poi);
                    }
                    Err(reason) => report.skip(&format!("catalog:{reason}")),
                }
            }
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                match parse_checkin_line(line, &catalog) {
                    Ok(ci) => {
                        rows.push(ci);
                        report.keep();
                    }
                    Err(reason) => report.skip(reason),
                }
            }
        }
    }
    if report.rows > 0 && report.skipped as f64 / report.rows as f64 > MAX_MALFORMED {
        return Err(CatalogError::TooManyMalformed(report));
    }
    let trajectories = group_trajectories(rows);
    Ok(Loaded { catalog, trajectories, report })
}

/// Groups check-ins per user (sorted by user id), each trajectory time-sorted.
pub fn group_trajectories(rows: Vec<CheckIn>) -> Vec<Trajectory> {
    let mut by_user: BTreeMap<UserId, Vec<CheckIn>> = BTreeMap::new();
    for ci in rows {
        by_user.entry(ci.user_id.clone()).or_default().push(ci);
    }
    by_user.into_iter().map(|(u, cs)| Trajectory::new(u, cs)).collect()
}

fn parse_tsv_row(line: &str) -> Result<(Poi, CheckIn), &'static str> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 7 {
        return Err("column_count");
    }
    let lat: f64 = cols[3].trim().parse().map_err(|_| "bad_lat")?;
    let lon: f64 = cols[4].trim().parse().map_err(|_| "bad_lon")?;
    let tz: i32 = cols[5].trim().parse().map_err(|_| "bad_tz_offset")?;
    let ts = parse_foursquare_time(cols[6].trim())?;
    let point = GeoPoint::new(lon, lat).map_err(|_| "coordinate_range")?;
    let category = cols[2].trim();
    if category.is_empty() || cols[0].trim().is_empty() || cols[1].trim().is_empty() {
        return Err("empty_field");
    }
    let category_path: Vec<String> = category.split(" > ").map(|s| s.trim().to_string()).take(4).collect();
    let poi_id = PoiId(cols[1].trim().to_string());
    let poi = Poi {
        poi_id: poi_id.clone(),
        name: category.to_string(),
        point,
        indoor: default_indoor(category),
        category_path,
        description: String::new(),
        open_hours: vec![],
    };
    let ci = CheckIn {
        user_id: UserId(cols[0].trim().to_string()),
        poi_id,
        timestamp: ts,
        action: Action::Other,
        tz_offset_min: tz,
    };
    Ok((poi, ci))
}

/// Accepts `Tue Apr 03 18:00:09 +0000 2012` or plain epoch seconds.
fn parse_foursquare_time(s: &str) -> Result<i64, &'static str> {
    if let Ok(ts) = s.parse::<i64>() {
        return if ts >= 0 { Ok(ts) } else { Err("negative_timestamp") };
    }
    let weekday = s.split_whitespace().next().ok_or("bad_time")?;
    if WeekdaySet::parse_day(weekday).is_none() {
        return Err("unknown_weekday");
    }
    let dt = DateTime::parse_from_str(s, "%a %b %d %H:%M:%S %z %Y").map_err(|_| "bad_time")?;
    let ts = dt.timestamp();
    if ts < 0 {
        return Err("negative_timestamp");
    }
    Ok(ts)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CategoryField {
    Path(Vec<String>),
    Joined(String),
}

#[derive(Deserialize)]
struct HoursLine {
    days: Vec<String>,
    open: u16,
    close: u16,
}

#[derive(Deserialize)]
struct PoiLine {
    id: String,
    #[serde(default)]
    name: String,
    lon: f64,
    lat: f64,
    cat: CategoryField,
    #[serde(default)]
    desc: String,
    indoor: Option<bool>,
    hours: Option<Vec<HoursLine>>,
}

fn parse_poi_line(line: &str) -> Result<Poi, &'static str> {
    let raw: PoiLine = serde_json::from_str(line).map_err(|_| "malformed_json")?;
    let category_path: Vec<String> = match raw.cat {
        CategoryField::Path(p) => p,
        CategoryField::Joined(s) => s.split(" > ").map(|x| x.trim().to_string()).collect(),
    };
    if category_path.is_empty() || category_path.len() > 4 || category_path.iter().any(|c| c.is_empty()) {
        return Err("bad_category");
    }
    let point = GeoPoint::new(raw.lon, raw.lat).map_err(|_| "coordinate_range")?;
    let mut open_hours = Vec::new();
    for h in raw.hours.unwrap_or_default() {
        let mut days = WeekdaySet(0);
        for d in &h.days {
            days.insert(WeekdaySet::parse_day(d).ok_or("unknown_weekday")?);
        }
        if h.open > 1440 || h.close > 1440 {
            return Err("bad_hours");
        }
        open_hours.push(OpenHours { days, open_min: h.open, close_min: h.close });
    }
    let indoor = raw.indoor.unwrap_or_else(|| default_indoor(&category_path.join(" ")));
    let name = if raw.name.is_empty() { category_path.last().cloned().unwrap_or_default() } else { raw.name };
    Ok(Poi { poi_id: PoiId(raw.id), name, point, category_path, description: raw.desc, indoor, open_hours })
}

#[derive(Deserialize)]
struct CheckInLine {
    user: String,
    poi: String,
    ts: i64,
    #[serde(default)]
    action: String,
    tz: Option<i32>,
}

fn parse_checkin_line(line: &str, catalog: &Catalog) -> Result<CheckIn, &'static str> {
    let raw: CheckInLine = serde_json::from_str(line).map_err(|_| "malformed_json")?;
    if raw.ts < 0 {
        return Err("negative_timestamp");
    }
    let poi_id = PoiId(raw.poi);
    if catalog.get(&poi_id).is_none() {
        return Err("unknown_poi");
    }
    let action = Action::parse(&raw.action).ok_or("unknown_action")?;
    Ok(CheckIn {
        user_id: UserId(raw.user),
        poi_id,
        timestamp: raw.ts,
        action,
        tz_offset_min: raw.tz.unwrap_or(catalog.default_tz_offset_min),
    })
}

/// Writes a catalog in the companion JSONL layout read by [`load_checkins`].
pub fn write_catalog_jsonl(catalog: &Catalog) -> String {
    let mut out = String::new();
    for p in catalog.iter() {
        let hours: Vec<serde_json::Value> = p
            .open_hours
            .iter()
            .map(|h| {
                let days: Vec<&str> = h.days.days().map(|d| &WEEKDAY_NAMES[d as usize][..3]).collect();
                serde_json::json!({"days": days, "open": h.open_min, "close": h.close_min})
            })
            .collect();
        let v = serde_json::json!({
            "id": p.poi_id.0, "name": p.name, "lon": p.point.lon(), "lat": p.point.lat(),
            "cat": p.category_path, "desc": p.description, "indoor": p.indoor, "hours": hours,
        });
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

pub fn write_checkins_jsonl(trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajectories {
        for c in &t.check_ins {
            let action = serde_json::to_value(c.action).unwrap_or_default();
            let v = serde_json::json!({"user": c.user_id.0, "poi": c.poi_id.0, "ts": c.timestamp, "action": action, "tz": c.tz_offset_min});
            out.push_str(&v.to_string());
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    /// Test check-in whose user or POI never occurs in train.
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub min_poi_interactions: usize,
    pub min_user_checkins: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { min_poi_interactions: 10, min_user_checkins: 10, train_fraction: 0.8, validation_fraction: 0.1 }
    }
}

/// Filtered catalog and trajectories with a split mark per check-in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDataset {
    pub catalog: Catalog,
    pub trajectories: Vec<Trajectory>,
    /// `splits[i][j]` marks `trajectories[i].check_ins[j]`.
    pub splits: Vec<Vec<Split>>,
}

impl SplitDataset {
    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().flatten().filter(|s| **s == split).count()
    }

    /// Train-only view of each trajectory.
    pub fn train_trajectories(&self) -> Vec<Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.splits)
            .map(|(t, s)| {
                let cs = t.check_ins.iter().zip(s).filter(|(_, s)| **s == Split::Train).map(|(c, _)| c.clone()).collect();
                Trajectory { user_id: t.user_id.clone(), check_ins: cs }
            })
            .collect()
    }
}

/// Repeatedly drops sparse POIs and users until nothing changes.
pub fn filter_fixed_point(
    catalog: &Catalog,
    trajectories: &[Trajectory],
    min_poi_interactions: usize,
    min_user_checkins: usize,
) -> (Catalog, Vec<Trajectory>) {
    let mut trajs: Vec<Trajectory> = trajectories
        .iter()
        .map(|t| Trajectory {
            user_id: t.user_id.clone(),
            check_ins: t.check_ins.iter().filter(|c| catalog.get(&c.poi_id).is_some()).cloned().collect(),
        })
        .collect();
    loop {
        let mut poi_counts: HashMap<&PoiId, usize> = HashMap::new();
        for c in trajs.iter().flat_map(|t| &t.check_ins) {
            *poi_counts.entry(&c.poi_id).or_default() += 1;
        }
        let keep_pois: BTreeSet<PoiId> =
            poi_counts.into_iter().filter(|(_, n)| *n >= min_poi_interactions).map(|(p, _)| p.clone()).collect();
        let before: usize = trajs.iter().map(Trajectory::m).sum();
        let before_users = trajs.len();
        for t in &mut trajs {
            t.check_ins.retain(|c| keep_pois.contains(&c.poi_id));
        }
        trajs.retain(|t| t.m() >= min_user_checkins);
        let after: usize = trajs.iter().map(Trajectory::m).sum();
        if after == before && trajs.len() == before_users {
            break;
        }
    }
    let used: BTreeSet<&PoiId> = trajs.iter().flat_map(|t| t.check_ins.iter().map(|c| &c.poi_id)).collect();
    let mut out = Catalog::new(catalog.region.clone(), catalog.default_tz_offset_min);
    for p in catalog.iter().filter(|p| used.contains(&p.poi_id)) {
        out.insert(p.clone());
    }
    (out, trajs)
}

/// Sparse-entity filtering followed by a chronological train/validation/test split.
pub fn preprocess(
    catalog: &Catalog,
    trajectories: &[Trajectory],
    cfg: &PreprocessConfig,
) -> Result<SplitDataset, CatalogError> {
    if trajectories.iter().all(|t| t.m() == 0) {
        return Err(CatalogError::EmptyInput);
    }
    let (catalog, trajectories) =
        filter_fixed_point(catalog, trajectories, cfg.min_poi_interactions, cfg.min_user_checkins);
    let total: usize = trajectories.iter().map(Trajectory::m).sum();
    if total == 0 {
        return Err(CatalogError::EmptyResult);
    }
    let mut order: Vec<(i64, &UserId, usize, usize)> = Vec::with_capacity(total);
    for (ti, t) in trajectories.iter().enumerate() {
        for (ci, c) in t.check_ins.iter().enumerate() {
            order.push((c.timestamp, &t.user_id, ti, ci));
        }
    }
    order.sort();
    let n_train = (total as f64 * cfg.train_fraction).round() as usize;
    let n_valid_end = (total as f64 * (cfg.train_fraction + cfg.validation_fraction)).round() as usize;
    let mut splits: Vec<Vec<Split>> = trajectories.iter().map(|t| vec![Split::Train; t.m()]).collect();
    for (rank, &(_, _, ti, ci)) in order.iter().enumerate() {
        splits[ti][ci] = if rank < n_train {
            Split::Train
        } else if rank < n_valid_end {
            Split::Validation
        } else {
            Split::Test
        };
    }
    let mut train_users = BTreeSet::new();
    let mut train_pois = BTreeSet::new();
    for (t, s) in trajectories.iter().zip(&splits) {
        for (c, mark) in t.check_ins.iter().zip(s) {
            if *mark == Split::Train {
                train_users.insert(t.user_id.clone());
                train_pois.insert(c.poi_id.clone());
            }
        }
    }
    for (t, s) in trajectories.iter().zip(splits.iter_mut()) {
        for (c, mark) in t.check_ins.iter().zip(s.iter_mut()) {
            if *mark == Split::Test && (!train_users.contains(&t.user_id) || !train_pois.contains(&c.poi_id)) {
                *mark = Split::Excluded;
            }
        }
    }
    Ok(SplitDataset { catalog, trajectories, splits })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn poi(id: &str, lon: f64, lat: f64, cats: &[&str]) -> Poi {
        Poi {
            poi_id: PoiId::from(id),
            name: format!("{id} place"),
            point: GeoPoint::new(lon, lat).unwrap(),
            category_path: cats.iter().map(|c| c.to_string()).collect(),
            description: String::new(),
            indoor: true,
            open_hours: vec![],
        }
    }

    pub fn checkin(user: &str, poi: &str, ts: i64) -> CheckIn {
        CheckIn { user_id: UserId::from(user), poi_id: PoiId::from(poi), timestamp: ts, action: Action::Navigated, tz_offset_min: 0 }
    }
}
