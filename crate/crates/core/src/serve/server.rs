//! Line-delimited JSON serving over any reader/writer pair or a TCP socket.
//!
//! Request: `{"id": .., "prompt_text": ".." | "prompt_ids": [..], "mode": "vanilla" | "speculative"}`.
//! Response: `{"id", "poi_id", "sid_tokens", "timing_ms": {"prefill", "decode"}, "accepted_drafts"}`,
//! or `{"id", "error"}`.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DecodeMode, DecodeRequest, Engine, ServeError};
use crate::corpus::{Vocab, BOS, SEP};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRequest {
    #[serde(default)]
    id: Value,
    prompt_text: Option<String>,
    prompt_ids: Option<Vec<u32>>,
    #[serde(default)]
    mode: DecodeMode,
}

#[derive(Debug, Serialize)]
struct Timing {
    prefill: f64,
    decode: f64,
}

#[derive(Debug, Serialize)]
struct WireResponse {
    id: Value,
    poi_id: Option<String>,
    sid_tokens: Vec<String>,
    timing_ms: Timing,
    accepted_drafts: usize,
}

#[derive(Debug, Serialize)]
struct WireError {
    id: Value,
    error: String,
}

/// Handles one request line; errors become an error object.
pub fn handle_line(engine: &Engine, vocab: &Vocab, line: &str, seq: u64) -> String {
    let parsed: Result<WireRequest, _> = serde_json::from_str(line);
    let id = parsed.as_ref().map(|r| r.id.clone()).unwrap_or(Value::Null);
    let out = parsed.map_err(|e| ServeError::BadRequest(e.to_string())).and_then(|r| {
        let prompt = match (r.prompt_ids, r.prompt_text) {
            (Some(ids), None) => ids,
            (None, Some(text)) => {
                let mut ids = vec![BOS];
                ids.extend(vocab.encode(&text));
                ids.push(SEP);
                ids
            }
            _ => return Err(ServeError::BadRequest("exactly one of prompt_text or prompt_ids is required".into())),
        };
        let max_new_tokens = engine.trie.max_depth();
        engine.run(&DecodeRequest { id: seq, prompt, max_new_tokens, mode: r.mode })
    });
    let json = match out {
        Ok(res) => serde_json::to_string(&WireResponse {
            id,
            poi_id: res.poi_id.map(|p| p.0),
            sid_tokens: res.tokens.iter().map(|&t| vocab.token(t).unwrap_or("<unk>").to_string()).collect(),
            timing_ms: Timing { prefill: res.prefill_ms, decode: res.decode_ms },
            accepted_drafts: res.accepted,
        }),
        Err(e) => serde_json::to_string(&WireError { id, error: e.to_string() }),
    };
    json.expect("response serializes")
}

/// Serves until `reader` is exhausted; returns the number of requests handled.
pub fn serve_lines<R: BufRead, W: Write>(engine: &Engine, vocab: &Vocab, reader: R, mut writer: W) -> Result<u64, ServeError> {
    let mut n = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", handle_line(engine, vocab, &line, n))?;
        writer.flush()?;
        n += 1;
    }
    Ok(n)
}

/// Accepts connections (each served on its own thread) until `max_connections` have been handled.
pub fn serve_tcp(engine: &Engine, vocab: &Vocab, listener: &TcpListener, max_connections: Option<usize>) -> Result<(), ServeError> {
    std::thread::scope(|s| {
        for (i, stream) in listener.incoming().enumerate() {
            let stream = stream?;
            s.spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(r) => BufReader::new(r),
                    Err(e) => return log::warn!("connection setup failed: {e}"),
                };
                if let Err(e) = serve_lines(engine, vocab, reader, stream) {
                    log::warn!("connection closed with error: {e}");
                }
            });
            if max_connections.is_some_and(|m| i + 1 >= m) {
                break;
            }
        }
        Ok(())
    })
}
