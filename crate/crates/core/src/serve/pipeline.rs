//! Two-stage serving pipeline: prefill workers hand KV caches to decode
//! workers through a bounded queue.

use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};

use super::{DecodeRequest, DecodeResult, Engine, Prefilled, ServeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workers {
    pub prefill: usize,
    pub decode: usize,
}

impl Default for Workers {
    fn default() -> Self {
        Workers { prefill: 1, decode: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub tokens_per_sec: f64,
    pub requests_per_sec: f64,
    pub acceptance_rate: f64,
    pub requests: usize,
    pub wall_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl LatencyStats {
    pub fn from_results(results: &[DecodeResult], wall: Duration) -> Self {
        let mut lat: Vec<f64> = results.iter().map(|r| r.latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        let secs = wall.as_secs_f64().max(1e-9);
        let tokens: usize = results.iter().map(|r| r.tokens.len()).sum();
        let drafted: usize = results.iter().map(|r| r.drafted).sum();
        let accepted: usize = results.iter().map(|r| r.accepted).sum();
        LatencyStats {
            p50_ms: percentile(&lat, 0.5),
            p99_ms: percentile(&lat, 0.99),
            tokens_per_sec: tokens as f64 / secs,
            requests_per_sec: results.len() as f64 / secs,
            acceptance_rate: if drafted == 0 { 0.0 } else { accepted as f64 / drafted as f64 },
            requests: results.len(),
            wall_ms: secs * 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutput {
    /// Sorted by request id.
    pub results: Vec<DecodeResult>,
    pub stats: LatencyStats,
}

struct Handoff {
    req: DecodeRequest,
    pre: Prefilled,
}

/// Runs all requests (all arriving at start) through `workers.prefill`
/// prefill threads and `workers.decode` decode threads connected by a queue
/// of `queue_bound` entries. A full queue blocks the prefill stage.
pub fn run_pipeline(engine: &Engine, requests: Vec<DecodeRequest>, workers: Workers, queue_bound: usize) -> Result<PipelineOutput, ServeError> {
    if workers.prefill == 0 || workers.decode == 0 {
        return Err(ServeError::BadRequest("worker counts must be at least 1".into()));
    }
    let start = Instant::now();
    let (in_tx, in_rx) = unbounded::<DecodeRequest>();
    for r in requests {
        in_tx.send(r).expect("receiver alive");
    }
    drop(in_tx);
    let (mid_tx, mid_rx) = bounded::<Handoff>(queue_bound.max(1));
    let (out_tx, out_rx) = unbounded::<Result<DecodeResult, ServeError>>();
    std::thread::scope(|s| {
        for _ in 0..workers.prefill {
            let (in_rx, mid_tx, out_tx) = (in_rx.clone(), mid_tx.clone(), out_tx.clone());
            s.spawn(move || {
                for req in in_rx {
                    match engine.prefill(&req) {
                        Ok(pre) => {
                            if mid_tx.send(Handoff { req, pre }).is_err() {
                                return;
                            }
                        }
                        Err(e) => {
                            let _ = out_tx.send(Err(e));
                        }
                    }
                }
            });
        }
        drop(mid_tx);
        for _ in 0..workers.decode {
            let (mid_rx, out_tx) = (mid_rx.clone(), out_tx.clone());
            s.spawn(move || {
                for Handoff { req, pre } in mid_rx {
                    let r = engine.decode(&req, pre).map(|mut r| {
                        r.latency_ms = start.elapsed().as_secs_f64() * 1e3;
                        r
                    });
                    let _ = out_tx.send(r);
                }
            });
        }
        drop(out_tx);
    });
    let wall = start.elapsed();
    let mut results = out_rx.into_iter().collect::<Result<Vec<_>, _>>()?;
    results.sort_by_key(|r| r.id);
    let stats = LatencyStats::from_results(&results, wall);
    Ok(PipelineOutput { results, stats })
}

/// Baseline: one thread, prefill then decode, request by request.
pub fn run_serial(engine: &Engine, requests: Vec<DecodeRequest>) -> Result<PipelineOutput, ServeError> {
    let start = Instant::now();
    let mut results = Vec::with_capacity(requests.len());
    for req in &requests {
        let mut r = engine.run(req)?;
        r.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        results.push(r);
    }
    let wall = start.elapsed();
    results.sort_by_key(|r| r.id);
    let stats = LatencyStats::from_results(&results, wall);
    Ok(PipelineOutput { results, stats })
}
