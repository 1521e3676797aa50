//! First-order POI transition baseline with add-one smoothing.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::catalog::{PoiId, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("no check-ins to fit on")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovBaseline {
    /// Support of the distribution, sorted by id.
    pub pois: Vec<PoiId>,
    index: BTreeMap<PoiId, usize>,
    /// Sparse transition counts: `counts[from][to]`.
    counts: Vec<BTreeMap<usize, u64>>,
    row_totals: Vec<u64>,
    global: Vec<u64>,
}

impl MarkovBaseline {
    /// Fits on consecutive check-in pairs; `extra_pois` widens the support.
    pub fn fit<'a>(trajectories: &[Trajectory], extra_pois: impl IntoIterator<Item = &'a PoiId>) -> Result<Self, MarkovError> {
        let mut set: BTreeSet<PoiId> = extra_pois.into_iter().cloned().collect();
        set.extend(trajectories.iter().flat_map(|t| t.check_ins.iter().map(|c| c.poi_id.clone())));
        if trajectories.iter().all(|t| t.check_ins.is_empty()) {
            return Err(MarkovError::Empty);
        }
        let pois: Vec<PoiId> = set.into_iter().collect();
        let index: BTreeMap<PoiId, usize> = pois.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        let n = pois.len();
        let mut counts = vec![BTreeMap::new(); n];
        let mut row_totals = vec![0; n];
        let mut global = vec![0; n];
        for t in trajectories {
            for c in &t.check_ins {
                global[index[&c.poi_id]] += 1;
            }
            for w in t.check_ins.windows(2) {
                let (a, b) = (index[&w[0].poi_id], index[&w[1].poi_id]);
                *counts[a].entry(b).or_insert(0) += 1;
                row_totals[a] += 1;
            }
        }
        Ok(MarkovBaseline { pois, index, counts, row_totals, global })
    }

    /// Smoothed `P(to | from)`; `None` when `from` has no outgoing transitions.
    pub fn prob(&self, from: &PoiId, to: &PoiId) -> Option<f64> {
        let a = *self.index.get(from)?;
        if self.row_totals[a] == 0 {
            return None;
        }
        let c = self.index.get(to).and_then(|b| self.counts[a].get(b)).copied().unwrap_or(0);
        Some((c + 1) as f64 / (self.row_totals[a] + self.pois.len() as u64) as f64)
    }

    pub fn row(&self, from: &PoiId) -> Option<Vec<f64>> {
        self.index.get(from)?;
        Some(self.pois.iter().map(|to| self.prob(from, to)).collect::<Option<Vec<f64>>>()?)
    }

    fn argmax(scores: impl Iterator<Item = (usize, u64)>) -> usize {
        // Strict > keeps the lowest index (the lowest poi_id) on ties.
        let mut best = (0, 0);
        for (i, s) in scores {
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }

    /// Most likely next POI. Add-one smoothing preserves the count order, so
    /// this is the count argmax; POIs without outgoing transitions fall back
    /// to the global-frequency argmax.
    pub fn predict(&self, last: &PoiId) -> &PoiId {
        let i = match self.index.get(last) {
            Some(&a) if self.row_totals[a] > 0 => Self::argmax(self.counts[a].iter().map(|(&b, &c)| (b, c))),
            _ => Self::argmax(self.global.iter().copied().enumerate()),
        };
        &self.pois[i]
    }
}
