//! Central-difference check of the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Example, Model, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor so that both-near-zero entries pass.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Probe indices: one per parameter segment, then uniform extras up to `n`.
fn probe_indices(model: &Model, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = &model.layout;
    let mut segs = vec![l.tok_emb, l.pos_emb, l.lnf_g, l.lnf_b, l.w_out, l.b_out];
    for b in &l.blocks {
        segs.extend(b.segments().into_iter().map(|(s, _)| s));
    }
    let mut idx: Vec<usize> = segs.iter().filter(|s| s.len > 0).map(|s| s.off + rng.random_range(0..s.len)).collect();
    while idx.len() < n {
        idx.push(rng.random_range(0..model.params.len()));
    }
    idx
}

pub fn gradcheck(model: &Model, batch: &[Example], n_probes: usize, eps: f64, seed: u64) -> Result<GradcheckReport, ModelError> {
    let mut grad = vec![0.0; model.params.len()];
    model.loss_and_grad(batch, &mut grad)?;
    let mut m = model.clone();
    let mut probes = Vec::new();
    for index in probe_indices(model, n_probes, seed) {
        let orig = m.params[index];
        m.params[index] = orig + eps;
        let up = m.loss(batch)?;
        m.params[index] = orig - eps;
        let down = m.loss(batch)?;
        m.params[index] = orig;
        let numeric = (up - down) / (2.0 * eps);
        probes.push(Probe { index, analytic: grad[index], numeric, rel_err: rel_err(grad[index], numeric) });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { probes, max_rel_err })
}
