//! Planted-pattern world: users with homes, workplaces, weekly routines and
//! weekend leisure, a daily weather timeline with indoor substitution on bad
//! days, and a fraction of uniformly random check-ins.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Action, Catalog, CheckIn, LocalTime, OpenHours, Poi, PoiId, Trajectory, UserId, Weather, WeekdaySet};
use crate::geo::{haversine, GeoPoint};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("{n_pois} POIs cannot host {n_users} users (need at least {need})")]
    TooFewPois { n_pois: usize, n_users: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_pois: usize,
    pub weeks: usize,
    pub noise_rate: f64,
    pub weather_seed: u64,
    pub seed: u64,
    pub region: String,
    pub tz_offset_min: i32,
    /// First day (a Monday is expected), `YYYY-MM-DD`.
    pub start_date: String,
    pub rain_prob: f64,
    pub heat_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 20,
            n_pois: 200,
            weeks: 8,
            noise_rate: 0.1,
            weather_seed: 7,
            seed: 42,
            region: "Beijing".into(),
            tz_offset_min: 480,
            start_date: "2024-04-01".into(),
            rain_prob: 0.2,
            heat_prob: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 0.5)");
        }
        if self.weeks < 4 {
            return bad("weeks must be at least 4");
        }
        if self.n_users == 0 {
            return bad("n_users must be positive");
        }
        if !(0.0..=1.0).contains(&(self.rain_prob + self.heat_prob)) || self.rain_prob < 0.0 || self.heat_prob < 0.0 {
            return bad("weather probabilities must be non-negative and sum to at most 1");
        }
        if self.start_date().is_none() {
            return bad("start_date must be YYYY-MM-DD");
        }
        Ok(())
    }

    fn start_date(&self) -> Option<NaiveDate> {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d").ok()
    }
}

/// Daily weather starting at a local epoch day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherTimeline {
    pub start_epoch_day: i64,
    pub days: Vec<Weather>,
}

impl WeatherTimeline {
    /// Weather at a local time; `Unknown` outside the timeline.
    pub fn at(&self, t: &LocalTime) -> Weather {
        let i = t.epoch_day - self.start_epoch_day;
        if i < 0 {
            return Weather::Unknown;
        }
        self.days.get(i as usize).copied().unwrap_or(Weather::Unknown)
    }

    pub fn at_timestamp(&self, ts: i64, tz_offset_min: i32) -> Weather {
        self.at(&LocalTime::from_timestamp(ts, tz_offset_min))
    }
}

pub fn is_bad_weather(w: Weather) -> bool {
    matches!(w, Weather::Rain | Weather::Snow | Weather::ExtremeHeat)
}

/// Ground truth behind each user, kept for audits and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUser {
    pub user_id: UserId,
    pub home: PoiId,
    pub work: PoiId,
    /// `(weekday, hour, poi)`.
    pub demands: Vec<(u8, u8, PoiId)>,
    pub leisure: Vec<PoiId>,
    /// Indoor replacement used on bad-weather days, per outdoor favourite.
    pub indoor_alternative: BTreeMap<PoiId, PoiId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub catalog: Catalog,
    pub trajectories: Vec<Trajectory>,
    pub weather: WeatherTimeline,
    pub planted: Vec<PlantedUser>,
    /// `(user index, timestamp)` of every noise check-in.
    pub noise: Vec<(usize, i64)>,
}

struct Kind {
    top: &'static str,
    leaf: &'static str,
    indoor: bool,
    /// `(open, close)` in hours; `None` = always open.
    hours: Option<(u16, u16)>,
    days: WeekdaySet,
    weight: f64,
    blurbs: &'static [&'static str],
}

const KINDS: &[Kind] = &[
    Kind { top: "Residence", leaf: "Apartment", indoor: true, hours: None, days: WeekdaySet::ALL, weight: 0.20, blurbs: &["quiet residential apartment block", "family apartment compound with a courtyard"] },
    Kind { top: "Office", leaf: "Office Building", indoor: true, hours: Some((7, 21)), days: WeekdaySet::WORKDAYS, weight: 0.10, blurbs: &["modern office tower", "office building for tech companies"] },
    Kind { top: "Food", leaf: "Cafe", indoor: true, hours: Some((7, 22)), days: WeekdaySet::ALL, weight: 0.08, blurbs: &["cozy cafe with fresh coffee", "coffee shop with pastries"] },
    Kind { top: "Food", leaf: "Restaurant", indoor: true, hours: Some((10, 23)), days: WeekdaySet::ALL, weight: 0.09, blurbs: &["family restaurant serving noodles", "restaurant with roast duck"] },
    Kind { top: "Food", leaf: "Night Market", indoor: false, hours: Some((17, 2)), days: WeekdaySet::ALL, weight: 0.03, blurbs: &["open air night market with street food"] },
    Kind { top: "Fitness", leaf: "Gym", indoor: true, hours: Some((6, 23)), days: WeekdaySet::ALL, weight: 0.06, blurbs: &["gym with weights and classes", "fitness club with treadmills"] },
    Kind { top: "Fitness", leaf: "Tennis Court", indoor: false, hours: Some((7, 22)), days: WeekdaySet::ALL, weight: 0.05, blurbs: &["outdoor tennis court with lights"] },
    Kind { top: "Fitness", leaf: "Swimming Pool", indoor: true, hours: Some((9, 21)), days: WeekdaySet::ALL, weight: 0.04, blurbs: &["indoor swimming pool with lanes"] },
    Kind { top: "Outdoors", leaf: "Park", indoor: false, hours: None, days: WeekdaySet::ALL, weight: 0.08, blurbs: &["green park with a lake", "city park with walking paths"] },
    Kind { top: "Outdoors", leaf: "Garden", indoor: false, hours: Some((8, 18)), days: WeekdaySet::ALL, weight: 0.03, blurbs: &["botanical garden with flowers"] },
    Kind { top: "Shopping", leaf: "Mall", indoor: true, hours: Some((10, 22)), days: WeekdaySet::ALL, weight: 0.07, blurbs: &["shopping mall with many stores", "mall with fashion brands"] },
    Kind { top: "Shopping", leaf: "Street Market", indoor: false, hours: Some((8, 20)), days: WeekdaySet::ALL, weight: 0.04, blurbs: &["outdoor street market with stalls"] },
    Kind { top: "Entertainment", leaf: "Cinema", indoor: true, hours: Some((10, 24)), days: WeekdaySet::ALL, weight: 0.05, blurbs: &["cinema showing new films"] },
    Kind { top: "Entertainment", leaf: "Museum", indoor: true, hours: Some((9, 17)), days: WeekdaySet(0x7e), weight: 0.04, blurbs: &["history museum with exhibits", "art museum with paintings"] },
    Kind { top: "Education", leaf: "Library", indoor: true, hours: Some((8, 21)), days: WeekdaySet::ALL, weight: 0.04, blurbs: &["public library with reading rooms"] },
];

const NEIGHBORHOODS: &[(&str, f64, f64)] = &[
    ("Dongcheng", 116.417, 39.929),
    ("Xicheng", 116.366, 39.912),
    ("Chaoyang", 116.443, 39.921),
    ("Haidian", 116.310, 39.956),
    ("Fengtai", 116.287, 39.858),
    ("Wangjing", 116.470, 39.995),
    ("Sanlitun", 116.455, 39.935),
    ("Zhongguancun", 116.316, 39.983),
];

const LEISURE_TOPS: &[&str] = &["Food", "Outdoors", "Shopping", "Entertainment", "Fitness"];
const WEEKEND_SLOTS: &[u8] = &[11, 16];

fn allocate_counts(n: usize) -> Vec<usize> {
    let total: f64 = KINDS.iter().map(|k| k.weight).sum();
    let mut counts: Vec<usize> = KINDS.iter().map(|k| ((k.weight / total * n as f64).floor() as usize).max(1)).collect();
    let mut i = 0;
    while counts.iter().sum::<usize>() < n {
        counts[i % KINDS.len()] += 1;
        i += 1;
    }
    while counts.iter().sum::<usize>() > n {
        let j = counts.iter().enumerate().max_by_key(|(_, c)| **c).map(|(j, _)| j).expect("kinds");
        counts[j] -= 1;
    }
    counts
}

fn build_catalog(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Catalog {
    let mut catalog = Catalog::new(cfg.region.clone(), cfg.tz_offset_min);
    let mut n = 0;
    for (kind, count) in KINDS.iter().zip(allocate_counts(cfg.n_pois)) {
        for j in 0..count {
            let (hood, lon, lat) = NEIGHBORHOODS[rng.random_range(0..NEIGHBORHOODS.len())];
            let point = GeoPoint::new(lon + rng.random_range(-0.012..0.012), lat + rng.random_range(-0.009..0.009)).expect("in range");
            let open_hours = match kind.hours {
                None => Vec::new(),
                Some((o, c)) => vec![OpenHours { days: kind.days, open_min: o * 60, close_min: if c == 24 { 1440 } else { c * 60 } }],
            };
            let blurb = kind.blurbs[j % kind.blurbs.len()];
            catalog.insert(Poi {
                poi_id: PoiId(format!("P{n:04}")),
                name: format!("{hood} {} {}", kind.leaf, j + 1),
                point,
                category_path: vec![kind.top.to_string(), kind.leaf.to_string()],
                description: format!("{blurb} in {hood}"),
                indoor: kind.indoor,
                open_hours,
            });
            n += 1;
        }
    }
    catalog
}

fn nearest<'a>(from: GeoPoint, pool: impl Iterator<Item = &'a Poi>) -> Option<&'a Poi> {
    pool.min_by(|a, b| haversine(from, a.point).total_cmp(&haversine(from, b.point)).then(a.poi_id.cmp(&b.poi_id)))
}

fn open_at_hour(p: &Poi, weekday: u8, hour: u8) -> bool {
    p.open_hours.is_empty() || p.open_hours.iter().any(|h| h.is_open(weekday, hour as u16 * 60))
}

fn plant_users(cfg: &SynthConfig, catalog: &Catalog, rng: &mut ChaCha8Rng) -> Result<Vec<PlantedUser>, SynthError> {
    let pois: Vec<&Poi> = catalog.iter().collect();
    let of_leaf = |leaf: &str| -> Vec<&Poi> { pois.iter().copied().filter(|p| p.leaf_category() == leaf).collect() };
    let mut homes = of_leaf("Apartment");
    let offices = of_leaf("Office Building");
    if homes.len() < cfg.n_users || offices.is_empty() {
        let need = (cfg.n_users as f64 / 0.2).ceil() as usize;
        return Err(SynthError::TooFewPois { n_pois: cfg.n_pois, n_users: cfg.n_users, need });
    }
    homes.shuffle(rng);
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let home = homes[u];
        let work = *offices.choose(rng).expect("non-empty");
        let near_home = |top: &str, rng: &mut ChaCha8Rng| -> &Poi {
            // One of the three closest POIs of the category.
            let mut c: Vec<&Poi> = pois.iter().copied().filter(|p| p.top_category() == top).collect();
            c.sort_by(|a, b| haversine(home.point, a.point).total_cmp(&haversine(home.point, b.point)).then(a.poi_id.cmp(&b.poi_id)));
            c.truncate(3);
            c[rng.random_range(0..c.len())]
        };
        let n_demands = rng.random_range(1..=3);
        let mut demands: Vec<(u8, u8, PoiId)> = Vec::new();
        let mut days: Vec<u8> = (0..5).collect();
        days.shuffle(rng);
        for (i, &day) in days.iter().take(n_demands).enumerate() {
            let (top, hour) = match (i + u) % 3 {
                0 => ("Fitness", 19 + rng.random_range(0..2)),
                1 => ("Food", 12),
                _ => (["Education", "Entertainment", "Fitness"][rng.random_range(0..3)], 20),
            };
            let mut p = near_home(top, rng);
            let mut guard = 0;
            while !open_at_hour(p, day, hour) && guard < 10 {
                p = near_home(top, rng);
                guard += 1;
            }
            if open_at_hour(p, day, hour) {
                demands.push((day, hour, p.poi_id.clone()));
            }
        }
        demands.sort();
        let mut tops: Vec<&str> = LEISURE_TOPS.to_vec();
        tops.shuffle(rng);
        let mut leisure: Vec<PoiId> = Vec::new();
        for top in tops.iter().take(2) {
            for _ in 0..2 {
                let p = near_home(top, rng).poi_id.clone();
                if !leisure.contains(&p) {
                    leisure.push(p);
                }
            }
        }
        let mut indoor_alternative = BTreeMap::new();
        for id in demands.iter().map(|d| &d.2).chain(&leisure) {
            let p = catalog.get(id).expect("planted POI");
            if p.indoor {
                continue;
            }
            let same_top = nearest(p.point, pois.iter().copied().filter(|q| q.indoor && q.top_category() == p.top_category()));
            let alt = same_top.or_else(|| nearest(p.point, pois.iter().copied().filter(|q| q.indoor && q.top_category() == "Shopping")));
            if let Some(a) = alt {
                indoor_alternative.insert(id.clone(), a.poi_id.clone());
            }
        }
        users.push(PlantedUser {
            user_id: UserId(format!("U{u:03}")),
            home: home.poi_id.clone(),
            work: work.poi_id.clone(),
            demands,
            leisure,
            indoor_alternative,
        });
    }
    Ok(users)
}

fn weather_timeline(cfg: &SynthConfig, start_epoch_day: i64) -> WeatherTimeline {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.weather_seed);
    let days = (0..cfg.weeks * 7)
        .map(|_| {
            let x: f64 = rng.random();
            if x < cfg.rain_prob {
                Weather::Rain
            } else if x < cfg.rain_prob + cfg.heat_prob {
                Weather::ExtremeHeat
            } else {
                Weather::Clear
            }
        })
        .collect();
    WeatherTimeline { start_epoch_day, days }
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    let x: f64 = rng.random();
    if x < 0.6 {
        Action::Navigated
    } else if x < 0.75 {
        Action::Searched
    } else if x < 0.9 {
        Action::Walked
    } else {
        Action::Rode
    }
}

/// Substitutes the indoor alternative on bad-weather days.
fn situated(u: &PlantedUser, catalog: &Catalog, poi: &PoiId, weather: Weather, weekday: u8, hour: u8) -> Option<PoiId> {
    let p = catalog.get(poi)?;
    let chosen = if !p.indoor && is_bad_weather(weather) { u.indoor_alternative.get(poi).unwrap_or(poi) } else { poi };
    let c = catalog.get(chosen)?;
    open_at_hour(c, weekday, hour).then(|| chosen.clone())
}

pub fn synth_world(cfg: &SynthConfig) -> Result<SynthWorld, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let catalog = build_catalog(cfg, &mut rng);
    let planted = plant_users(cfg, &catalog, &mut rng)?;
    let start = cfg.start_date().expect("validated");
    let start_epoch_day = start.signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch")).num_days();
    let weather = weather_timeline(cfg, start_epoch_day);
    let tz = cfg.tz_offset_min as i64 * 60;
    let ts = |day: usize, hour: u8, minute: u8| (start_epoch_day + day as i64) * 86_400 + hour as i64 * 3600 + minute as i64 * 60 - tz;
    let all_ids: Vec<PoiId> = catalog.iter().map(|p| p.poi_id.clone()).collect();
    let mut trajectories = Vec::with_capacity(planted.len());
    let mut noise = Vec::new();
    for (ui, u) in planted.iter().enumerate() {
        let mut rows: Vec<CheckIn> = Vec::new();
        let push = |rows: &mut Vec<CheckIn>, poi: PoiId, t: i64, rng: &mut ChaCha8Rng| {
            rows.push(CheckIn { user_id: u.user_id.clone(), poi_id: poi, timestamp: t, action: random_action(rng), tz_offset_min: cfg.tz_offset_min });
        };
        for day in 0..cfg.weeks * 7 {
            let weekday = (day % 7) as u8;
            let w = weather.days[day];
            if weekday < 5 {
                push(&mut rows, u.work.clone(), ts(day, 8, 0), &mut rng);
                push(&mut rows, u.home.clone(), ts(day, 18, 0), &mut rng);
                for (d, h, poi) in &u.demands {
                    if *d == weekday {
                        if let Some(p) = situated(u, &catalog, poi, w, weekday, *h) {
                            push(&mut rows, p, ts(day, *h, 0), &mut rng);
                        }
                    }
                }
            } else {
                for (slot, &h) in WEEKEND_SLOTS.iter().enumerate() {
                    // Favourites rotate through the weekend slots week by week.
                    let k = day / 7 + 2 * (weekday as usize - 5) + slot;
                    let pick = u.leisure[k % u.leisure.len()].clone();
                    if let Some(p) = situated(u, &catalog, &pick, w, weekday, h) {
                        push(&mut rows, p, ts(day, h, 0), &mut rng);
                    }
                }
            }
        }
        let planted_n = rows.len();
        let n_noise = (planted_n as f64 * cfg.noise_rate / (1.0 - cfg.noise_rate)).round() as usize;
        for _ in 0..n_noise {
            let day = rng.random_range(0..cfg.weeks * 7);
            let t = ts(day, rng.random_range(7..23), rng.random_range(1..60));
            let poi = all_ids.choose(&mut rng).expect("catalog").clone();
            push(&mut rows, poi, t, &mut rng);
            noise.push((ui, t));
        }
        trajectories.push(Trajectory::new(u.user_id.clone(), rows));
    }
    noise.sort();
    Ok(SynthWorld { catalog, trajectories, weather, planted, noise })
}

impl SynthWorld {
    pub fn is_noise(&self, user: usize, ts: i64) -> bool {
        self.noise.binary_search(&(user, ts)).is_ok()
    }
}
