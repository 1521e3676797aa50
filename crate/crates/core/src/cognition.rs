//! Cognitive alignment scores for a recommended POI: temporal (TCS),
//! spatial (SCS), profile (PAS) and situational (SAS) consistency, and
//! their mean (CAS). PAS/SAS go through a [`Judge`].

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CheckIn, Poi, Situation, Weather};
use crate::geo::haversine;
use crate::profile::UserProfile;

pub const SIM_CATEGORY_WEIGHT: f64 = 0.6;
pub const SIM_DISTANCE_WEIGHT: f64 = 0.4;
pub const SIM_SIGMA_M: f64 = 500.0;

/// 1 for the same POI, else a blend of category-prefix overlap and proximity (capped at 1).
pub fn sim(a: &Poi, b: &Poi) -> f64 {
    if a.poi_id == b.poi_id {
        return 1.0;
    }
    let shared = a.category_path.iter().zip(&b.category_path).take_while(|(x, y)| x == y).count();
    let depth = a.category_path.len().max(b.category_path.len()).max(1);
    let s = SIM_CATEGORY_WEIGHT * shared as f64 / depth as f64
        + SIM_DISTANCE_WEIGHT * (-haversine(a.point, b.point) / SIM_SIGMA_M).exp();
    s.min(1.0)
}

/// Mean similarity to history check-ins in the same (weekday/weekend, hour) bucket.
pub fn tcs(history: &[CheckIn], catalog: &Catalog, ctx: &Situation, candidate: &Poi) -> Option<f64> {
    let now = ctx.local_time();
    let (mut sum, mut n) = (0.0, 0usize);
    for c in history {
        let lt = c.local_time();
        if lt.is_weekend() != now.is_weekend() || lt.hour != now.hour {
            continue;
        }
        let Some(p) = catalog.get(&c.poi_id) else { continue };
        sum += sim(p, candidate);
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn scs(profile: &UserProfile, ctx: &Situation, candidate: &Poi) -> f64 {
    (-haversine(ctx.location, candidate.point) / profile.mean_move_distance).exp()
}

pub fn rule_pas(profile: &UserProfile, ctx: &Situation, candidate: &Poi) -> bool {
    if profile.home.as_ref() == Some(&candidate.poi_id) || profile.work.as_ref() == Some(&candidate.poi_id) {
        return true;
    }
    let top = candidate.top_category();
    if profile.top_categories(3).iter().any(|(c, _)| *c == top) {
        return true;
    }
    let lt = ctx.local_time();
    profile.periodic.iter().any(|d| {
        let dh = (d.hour_bucket as i32 - lt.hour as i32).rem_euclid(24);
        d.category == top && d.weekday_set.contains(lt.weekday) && (dh <= 1 || dh == 23)
    })
}

pub fn rule_sas(ctx: &Situation, candidate: &Poi) -> bool {
    let outdoor = !candidate.indoor;
    let bad_weather = matches!(ctx.weather, Weather::Rain | Weather::Snow | Weather::ExtremeHeat);
    !(bad_weather && outdoor) && candidate.is_open_at(&ctx.local_time())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CognitiveScores {
    pub tcs: Option<f64>,
    pub scs: f64,
    pub pas: u8,
    pub sas: u8,
}

impl CognitiveScores {
    /// Mean of the defined components.
    pub fn cas(&self) -> f64 {
        let mut sum = self.scs + self.pas as f64 + self.sas as f64;
        let mut n = 3.0;
        if let Some(t) = self.tcs {
            sum += t;
            n += 1.0;
        }
        sum / n
    }
}

/// Source of the two judged scores.
pub trait Judge: Send + Sync {
    fn pas(&self, profile: &UserProfile, ctx: &Situation, candidate: &Poi) -> bool;
    fn sas(&self, ctx: &Situation, candidate: &Poi) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn pas(&self, profile: &UserProfile, ctx: &Situation, candidate: &Poi) -> bool {
        rule_pas(profile, ctx, candidate)
    }

    fn sas(&self, ctx: &Situation, candidate: &Poi) -> bool {
        rule_sas(ctx, candidate)
    }
}

pub fn score(
    history: &[CheckIn],
    catalog: &Catalog,
    profile: &UserProfile,
    ctx: &Situation,
    candidate: &Poi,
    judge: &dyn Judge,
) -> CognitiveScores {
    CognitiveScores {
        tcs: tcs(history, catalog, ctx, candidate),
        scs: scs(profile, ctx, candidate),
        pas: judge.pas(profile, ctx, candidate) as u8,
        sas: judge.sas(ctx, candidate) as u8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Rule,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    /// `http://host:port/path`
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig { kind: JudgeKind::Rule, endpoint: None, timeout_ms: 200, max_in_flight: 8 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum JudgeError {
    #[error("external judge requires an endpoint")]
    MissingEndpoint,
    #[error("unsupported endpoint {0:?} (expected http://host:port/path)")]
    BadEndpoint(String),
    #[error("max_in_flight must be at least 1")]
    NoCapacity,
}

pub fn build_judge(cfg: &JudgeConfig) -> Result<Box<dyn Judge>, JudgeError> {
    match cfg.kind {
        JudgeKind::Rule => Ok(Box::new(RuleJudge)),
        JudgeKind::External => {
            let ep = cfg.endpoint.as_deref().ok_or(JudgeError::MissingEndpoint)?;
            Ok(Box::new(ExternalJudge::new(ep, Duration::from_millis(cfg.timeout_ms), cfg.max_in_flight)?))
        }
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile: Option<&'a UserProfile>,
    situation: &'a Situation,
    candidate: &'a Poi,
}

#[derive(Deserialize)]
struct JudgeReply {
    score: u8,
    #[allow(dead_code)]
    rationale: String,
}

/// Judge backed by an HTTP service. Any failure (timeout, non-2xx,
/// malformed body, in-flight limit reached) falls back to the rule judge.
pub struct ExternalJudge {
    addr: SocketAddr,
    host: String,
    path: String,
    timeout: Duration,
    max_in_flight: usize,
    in_flight: AtomicUsize,
    fallbacks: AtomicUsize,
}

impl ExternalJudge {
    pub fn new(endpoint: &str, timeout: Duration, max_in_flight: usize) -> Result<Self, JudgeError> {
        if max_in_flight == 0 {
            return Err(JudgeError::NoCapacity);
        }
        let bad = || JudgeError::BadEndpoint(endpoint.to_string());
        let rest = endpoint.strip_prefix("http://").ok_or_else(bad)?;
        let (host, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let addr = host.to_socket_addrs().map_err(|_| bad())?.next().ok_or_else(bad)?;
        Ok(ExternalJudge {
            addr,
            host: host.to_string(),
            path: path.to_string(),
            timeout,
            max_in_flight,
            in_flight: AtomicUsize::new(0),
            fallbacks: AtomicUsize::new(0),
        })
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn ask(&self, req: &JudgeRequest) -> Option<bool> {
        let claimed = self
            .in_flight
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| (n < self.max_in_flight).then_some(n + 1))
            .is_ok();
        if !claimed {
            log::warn!("external judge at capacity; using rule judge");
            return None;
        }
        let result = self.post(req);
        self.in_flight.fetch_sub(1, Ordering::AcqRel);
        match result {
            Ok(score) => Some(score),
            Err(e) => {
                log::warn!("external judge failed ({e}); using rule judge");
                None
            }
        }
    }

    fn post(&self, req: &JudgeRequest) -> Result<bool, String> {
        let deadline = Instant::now() + self.timeout;
        let remaining = || deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero()).ok_or("timeout");
        let body = serde_json::to_vec(req).map_err(|e| e.to_string())?;
        let mut stream = TcpStream::connect_timeout(&self.addr, remaining()?).map_err(|e| e.to_string())?;
        stream.set_write_timeout(Some(remaining()?)).map_err(|e| e.to_string())?;
        let head = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            self.path,
            self.host,
            body.len()
        );
        stream.write_all(head.as_bytes()).and_then(|_| stream.write_all(&body)).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        loop {
            stream.set_read_timeout(Some(remaining()?)).map_err(|e| e.to_string())?;
            match stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => buf.extend_from_slice(&chunk[..n]),
                Err(e) => return Err(e.to_string()),
            }
        }
        let text = String::from_utf8(buf).map_err(|e| e.to_string())?;
        let (head, body) = text.split_once("\r\n\r\n").ok_or("truncated response")?;
        let status: u16 = head
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or("bad status line")?;
        if !(200..300).contains(&status) {
            return Err(format!("status {status}"));
        }
        let reply: JudgeReply = serde_json::from_str(body.trim()).map_err(|e| e.to_string())?;
        match reply.score {
            0 => Ok(false),
            1 => Ok(true),
            s => Err(format!("score {s} not in {{0,1}}")),
        }
    }

    fn judged(&self, req: JudgeRequest, fallback: impl FnOnce() -> bool) -> bool {
        match self.ask(&req) {
            Some(v) => v,
            None => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                fallback()
            }
        }
    }
}

impl Judge for ExternalJudge {
    fn pas(&self, profile: &UserProfile, ctx: &Situation, candidate: &Poi) -> bool {
        let req = JudgeRequest { kind: "profile", profile: Some(profile), situation: ctx, candidate };
        self.judged(req, || rule_pas(profile, ctx, candidate))
    }

    fn sas(&self, ctx: &Situation, candidate: &Poi) -> bool {
        let req = JudgeRequest { kind: "situation", profile: None, situation: ctx, candidate };
        self.judged(req, || rule_sas(ctx, candidate))
    }
}
