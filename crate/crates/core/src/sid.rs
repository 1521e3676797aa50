//! Semantic IDs: POI featurization, residual k-means codebooks, and the
//! token rendering / resolution of the resulting code tuples.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, Poi, PoiId};

#[derive(Debug, Error, PartialEq)]
pub enum SidError {
    #[error("need at least K={k} feature vectors, got {n}")]
    TooFewVectors { n: usize, k: usize },
    #[error("invalid codebook shape: {0}")]
    Shape(String),
    #[error("unknown SID {0}")]
    UnknownSid(String),
    #[error("malformed SID token {0:?}")]
    BadToken(String),
    #[error("code {code} out of range for level {level} (K={k})")]
    CodeRange { level: usize, code: usize, k: usize },
}

/// FNV-1a, 64 bit. Used for all feature hashing so vectors are stable across runs and platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub category_dims: usize,
    pub trigram_dims: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { category_dims: 30, trigram_dims: 32 }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        2 + self.category_dims + self.trigram_dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Builds feature vectors relative to a catalog's spatial extent.
#[derive(Debug, Clone)]
pub struct Featurizer {
    cfg: FeatureConfig,
    lon_range: (f64, f64),
    lat_range: (f64, f64),
}

impl Featurizer {
    pub fn fit(catalog: &Catalog, cfg: FeatureConfig) -> Self {
        let mut lon = (f64::INFINITY, f64::NEG_INFINITY);
        let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
        for p in catalog.iter() {
            lon = (lon.0.min(p.point.lon()), lon.1.max(p.point.lon()));
            lat = (lat.0.min(p.point.lat()), lat.1.max(p.point.lat()));
        }
        if catalog.is_empty() {
            lon = (0.0, 0.0);
            lat = (0.0, 0.0);
        }
        Featurizer { cfg, lon_range: lon, lat_range: lat }
    }

    pub fn featurize(&self, p: &Poi) -> FeatureVector {
        let scale = |v: f64, (lo, hi): (f64, f64)| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let mut out = Vec::with_capacity(self.cfg.dim());
        out.push(scale(p.point.lon(), self.lon_range));
        out.push(scale(p.point.lat(), self.lat_range));

        let mut cat = vec![0.0; self.cfg.category_dims];
        for (depth, label) in p.category_path.iter().enumerate() {
            let h = fnv1a(format!("{depth}:{}", label.to_lowercase()).as_bytes());
            cat[(h % self.cfg.category_dims as u64) as usize] += 1.0;
        }
        l2_normalize(&mut cat);
        out.extend(cat);

        let mut tri = vec![0.0; self.cfg.trigram_dims];
        let chars: Vec<char> = p.description.to_lowercase().chars().collect();
        for w in chars.windows(3) {
            let s: String = w.iter().collect();
            tri[(fnv1a(s.as_bytes()) % self.cfg.trigram_dims as u64) as usize] += 1.0;
        }
        l2_normalize(&mut tri);
        out.extend(tri);
        FeatureVector(out)
    }
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub level: usize,
    pub vectors: Vec<Vec<f64>>,
}

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective after every assignment pass.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's k-means. Initial centroids are the first `k` distinct vectors of a
/// seeded shuffle; empty clusters take the farthest point of the largest cluster.
pub fn kmeans(data: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KMeansFit {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centroids.len() == k {
            break;
        }
        if !centroids.iter().any(|c| c == &data[i]) {
            centroids.push(data[i].clone());
        }
    }
    // Fewer distinct vectors than K: pad with nudged copies so rows stay unique.
    let distinct = centroids.len();
    let dim = data.first().map_or(0, Vec::len);
    let mut j = 0;
    while centroids.len() < k {
        let mut c = centroids[j % distinct].clone();
        c[j % dim] += 1e-9 * (1 + j / dim) as f64;
        centroids.push(c);
        j += 1;
    }

    let assign = |centroids: &[Vec<f64>], assignments: &mut [usize]| -> (bool, f64) {
        let mut changed = false;
        let mut obj = 0.0;
        for (x, a) in data.iter().zip(assignments.iter_mut()) {
            let (best, d) = nearest(x, centroids);
            if best != *a {
                changed = true;
                *a = best;
            }
            obj += d;
        }
        (changed, obj)
    };

    let mut assignments = vec![usize::MAX; data.len()];
    let (_, obj) = assign(&centroids, &mut assignments);
    let mut objective = vec![obj];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let reseeded = update_centroids(data, &mut centroids, &mut assignments);
        let (changed, obj) = assign(&centroids, &mut assignments);
        objective.push(obj);
        if !changed && !reseeded {
            break;
        }
    }
    KMeansFit { centroids, assignments, objective, iterations }
}

fn update_centroids(data: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) -> bool {
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &a) in data.iter().zip(assignments.iter()) {
        counts[a] += 1;
        sums[a].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    let mut reseeded = false;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let largest = (0..k).max_by(|a, b| counts[*a].cmp(&counts[*b]).then(b.cmp(a))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let mut far = (usize::MAX, -1.0);
        for (i, x) in data.iter().enumerate() {
            if assignments[i] == largest {
                let d = sq_dist(x, &centroids[largest]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        centroids[c] = data[far.0].clone();
        assignments[far.0] = c;
        counts[largest] -= 1;
        counts[c] = 1;
        reseeded = true;
    }
    reseeded
}

/// Residual-quantization codebooks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    #[serde(rename = "L")]
    pub levels_count: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub seed: u64,
    pub levels: Vec<Vec<Vec<f64>>>,
}

/// Training output: the codebooks plus per-level diagnostics.
#[derive(Debug, Clone)]
pub struct RqTraining {
    pub books: Codebooks,
    /// Mean squared reconstruction error using the first `l+1` levels.
    pub mse_by_level: Vec<f64>,
    pub objective_by_level: Vec<Vec<f64>>,
}

pub fn train_codebooks(features: &[FeatureVector], levels: usize, k: usize, seed: u64) -> Result<RqTraining, SidError> {
    if features.len() < k {
        return Err(SidError::TooFewVectors { n: features.len(), k });
    }
    if k < 2 || levels == 0 || levels > 23 {
        return Err(SidError::Shape(format!("L={levels}, K={k}")));
    }
    let dim = features[0].0.len();
    let mut residual: Vec<Vec<f64>> = features.iter().map(|f| f.0.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut books = Vec::with_capacity(levels);
    let mut mse_by_level = Vec::with_capacity(levels);
    let mut objective_by_level = Vec::with_capacity(levels);
    for _ in 0..levels {
        let fit = kmeans(&residual, k, KMEANS_MAX_ITER, &mut rng);
        for (r, &a) in residual.iter_mut().zip(&fit.assignments) {
            r.iter_mut().zip(&fit.centroids[a]).for_each(|(x, c)| *x -= c);
        }
        let mse = residual.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / residual.len() as f64;
        mse_by_level.push(mse);
        objective_by_level.push(fit.objective);
        books.push(fit.centroids);
    }
    Ok(RqTraining {
        books: Codebooks { levels_count: levels, k, dim, seed, levels: books },
        mse_by_level,
        objective_by_level,
    })
}

impl Codebooks {
    pub fn codebook(&self, level: usize) -> Codebook {
        Codebook { level: level + 1, vectors: self.levels[level].clone() }
    }

    /// Greedy nearest centroid per level on the running residual.
    pub fn encode(&self, f: &FeatureVector) -> Vec<usize> {
        let mut r = f.0.clone();
        let mut codes = Vec::with_capacity(self.levels_count);
        for level in &self.levels {
            let (c, _) = nearest(&r, level);
            r.iter_mut().zip(&level[c]).for_each(|(x, e)| *x -= e);
            codes.push(c);
        }
        codes
    }

    pub fn reconstruct(&self, codes: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (level, &c) in self.levels.iter().zip(codes) {
            out.iter_mut().zip(&level[c]).for_each(|(o, e)| *o += e);
        }
        out
    }

    pub fn validate(&self) -> Result<(), SidError> {
        if self.levels.len() != self.levels_count
            || self.levels.iter().any(|l| l.len() != self.k || l.iter().any(|r| r.len() != self.dim || r.iter().any(|x| !x.is_finite())))
        {
            return Err(SidError::Shape("codebook dimensions do not match header".into()));
        }
        Ok(())
    }
}

/// A POI's semantic ID.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sid {
    pub codes: Vec<usize>,
    pub collision_break: Option<usize>,
}

pub fn level_letter(level: usize) -> char {
    (b'a' + level as u8) as char
}

impl Sid {
    /// Token strings, e.g. `["<a_17>", "<b_21>", "<c_119>"]`.
    pub fn tokens(&self) -> Vec<String> {
        let mut t: Vec<String> = self.codes.iter().enumerate().map(|(l, c)| format!("<{}_{c}>", level_letter(l))).collect();
        if let Some(x) = self.collision_break {
            t.push(format!("<x_{x}>"));
        }
        t
    }

    pub fn render(&self) -> String {
        self.tokens().concat()
    }

    pub fn len(&self) -> usize {
        self.codes.len() + usize::from(self.collision_break.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses a rendered SID (spaces between tokens are tolerated).
    pub fn parse(s: &str) -> Result<Sid, SidError> {
        let mut codes = Vec::new();
        let mut collision_break = None;
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        for part in compact.split_inclusive('>') {
            let inner = part
                .strip_prefix('<')
                .and_then(|p| p.strip_suffix('>'))
                .ok_or_else(|| SidError::BadToken(part.to_string()))?;
            let (letter, idx) = inner.split_once('_').ok_or_else(|| SidError::BadToken(part.to_string()))?;
            let idx: usize = idx.parse().map_err(|_| SidError::BadToken(part.to_string()))?;
            match letter {
                "x" if collision_break.is_none() && !codes.is_empty() => collision_break = Some(idx),
                l if l.len() == 1 && collision_break.is_none() && l.as_bytes()[0] == b'a' + codes.len() as u8 => codes.push(idx),
                _ => return Err(SidError::BadToken(part.to_string())),
            }
        }
        if codes.is_empty() {
            return Err(SidError::BadToken(s.to_string()));
        }
        Ok(Sid { codes, collision_break })
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Bijective POI <-> SID assignment for one catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct SidMap {
    by_poi: BTreeMap<PoiId, Sid>,
    by_render: HashMap<String, PoiId>,
    /// Fraction of POIs sharing their code tuple with another POI.
    pub collision_rate: f64,
}

impl SidMap {
    pub fn from_assignments(by_poi: BTreeMap<PoiId, Sid>) -> Result<Self, SidError> {
        let mut tuple_counts: HashMap<&Vec<usize>, usize> = HashMap::new();
        for s in by_poi.values() {
            *tuple_counts.entry(&s.codes).or_default() += 1;
        }
        let collided: usize = tuple_counts.values().filter(|n| **n > 1).sum();
        let collision_rate = if by_poi.is_empty() { 0.0 } else { collided as f64 / by_poi.len() as f64 };
        let mut by_render = HashMap::new();
        for (p, s) in &by_poi {
            if by_render.insert(s.render(), p.clone()).is_some() {
                return Err(SidError::Shape(format!("duplicate SID {s}")));
            }
        }
        Ok(SidMap { by_poi, by_render, collision_rate })
    }

    pub fn get(&self, poi: &PoiId) -> Option<&Sid> {
        self.by_poi.get(poi)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PoiId, &Sid)> {
        self.by_poi.iter()
    }

    pub fn len(&self) -> usize {
        self.by_poi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_poi.is_empty()
    }

    pub fn max_collision_break(&self) -> Option<usize> {
        self.by_poi.values().filter_map(|s| s.collision_break).max()
    }

    pub fn resolve(&self, rendered: &str) -> Result<&PoiId, SidError> {
        let compact: String = rendered.chars().filter(|c| !c.is_whitespace()).collect();
        self.by_render.get(&compact).ok_or(SidError::UnknownSid(compact))
    }

    pub fn resolve_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<&PoiId, SidError> {
        let joined: String = tokens.iter().map(|t| t.as_ref()).collect();
        self.resolve(&joined)
    }

    /// `{poi_id: token-string}`.
    pub fn to_json(&self) -> String {
        let m: BTreeMap<&str, String> = self.by_poi.iter().map(|(p, s)| (p.0.as_str(), s.render())).collect();
        serde_json::to_string_pretty(&m).unwrap_or_default()
    }

    pub fn from_json(s: &str) -> Result<Self, SidError> {
        let m: BTreeMap<String, String> = serde_json::from_str(s).map_err(|e| SidError::Shape(e.to_string()))?;
        let mut by_poi = BTreeMap::new();
        for (p, r) in m {
            by_poi.insert(PoiId(p), Sid::parse(&r)?);
        }
        Self::from_assignments(by_poi)
    }
}

/// Encodes every catalog POI and numbers colliding POIs in poi-id order.
pub fn assign_collision_breaks(catalog: &Catalog, featurizer: &Featurizer, books: &Codebooks) -> Result<SidMap, SidError> {
    let mut groups: BTreeMap<Vec<usize>, Vec<PoiId>> = BTreeMap::new();
    for p in catalog.iter() {
        groups.entry(books.encode(&featurizer.featurize(p))).or_default().push(p.poi_id.clone());
    }
    let mut by_poi = BTreeMap::new();
    for (codes, mut pois) in groups {
        pois.sort();
        let shared = pois.len() > 1;
        for (i, p) in pois.into_iter().enumerate() {
            by_poi.insert(p, Sid { codes: codes.clone(), collision_break: shared.then_some(i) });
        }
    }
    SidMap::from_assignments(by_poi)
}
