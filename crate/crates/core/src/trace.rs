//! Workload traces: JSONL ingestion, serialization, and synthetic generators.
//!
//! One request per line, UTF-8, no BOM:
//!
//! ```text
//! {"id":"r1","prompt_len":64}
//! {"id":"r2","tokens":[3,17,4],"output_len":32,"arrival_step":0}
//! ```
//!
//! `prompt_len` and `tokens` are mutually exclusive per trace: a trace either
//! carries full token sequences or lengths only. Prefix features require the
//! token form and refuse to fabricate tokens for length-only traces.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::request::{Prompt, Request, Token};

/// Token identifiers drawn by the generators live in `[0, GENERATOR_VOCAB)`.
pub const GENERATOR_VOCAB: Token = 50_000;

/// Provenance of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMetadata {
    /// File path or generator description.
    pub source: String,
    /// Generator seed, when synthetic.
    pub seed: Option<u64>,
}

/// An ordered batch of requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadTrace {
    pub requests: Vec<Request>,
    pub metadata: TraceMetadata,
}

impl WorkloadTrace {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// True when every request carries a full token sequence. Empty traces
    /// count as token-form.
    pub fn has_tokens(&self) -> bool {
        self.requests.iter().all(Request::has_tokens)
    }

    /// `(id, effective length)` pairs in trace order, the packing input.
    pub fn packing_inputs(&self) -> Vec<(String, usize)> {
        self.requests
            .iter()
            .map(|r| (r.id.clone(), r.effective_len()))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace not found: {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("i/o error reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: request must have exactly one of \"prompt_len\" or \"tokens\"")]
    FormConflict { line: usize },
    #[error("zero-length request at line {line}")]
    ZeroLength { line: usize },
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: trace mixes token-sequence and length-only requests")]
    MixedForms { line: usize },
    #[error("generator: short_frac {0} is not within [0, 1]")]
    BadFraction(f64),
    #[error("generator: length bounds must satisfy 1 <= short_max <= long_max (got {short_max}, {long_max})")]
    BadLengthBounds { short_max: usize, long_max: usize },
    #[error("generator: prefix pool must hold at least one prefix")]
    EmptyPrefixPool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<Token>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arrival_step: Option<usize>,
}

/// Load a JSONL trace from a file. Request order is preserved.
pub fn load_trace(path: impl AsRef<Path>) -> Result<WorkloadTrace, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Open {
        path: path.display().to_string(),
        source,
    })?;
    read_trace(BufReader::new(file), &path.display().to_string())
}

/// Parse a JSONL trace from any reader; `source` labels the metadata.
pub fn read_trace(reader: impl Read, source: &str) -> Result<WorkloadTrace, TraceError> {
    let mut requests = Vec::new();
    let mut seen = std::collections::HashSet::new();
    // None until the first request fixes the trace form (true = token form).
    let mut token_form: Option<bool> = None;

    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine =
            serde_json::from_str(&line).map_err(|source| TraceError::Parse {
                line: line_no,
                source,
            })?;
        let prompt = match (parsed.prompt_len, parsed.tokens) {
            (Some(len), None) => Prompt::Length(len),
            (None, Some(tokens)) => Prompt::Tokens(tokens),
            _ => return Err(TraceError::FormConflict { line: line_no }),
        };
        let is_tokens = matches!(prompt, Prompt::Tokens(_));
        match token_form {
            None => token_form = Some(is_tokens),
            Some(form) if form != is_tokens => {
                return Err(TraceError::MixedForms { line: line_no })
            }
            _ => {}
        }
        let request = Request {
            id: parsed.id,
            prompt,
            generated: 0,
            arrival_step: parsed.arrival_step.unwrap_or(0),
            output_len: parsed.output_len,
        };
        if request.prompt_len() == 0 {
            return Err(TraceError::ZeroLength { line: line_no });
        }
        if !seen.insert(request.id.clone()) {
            return Err(TraceError::DuplicateId {
                line: line_no,
                id: request.id,
            });
        }
        requests.push(request);
    }

    Ok(WorkloadTrace {
        requests,
        metadata: TraceMetadata {
            source: source.to_string(),
            seed: None,
        },
    })
}

/// Serialize a trace to JSONL. Field order and formatting are deterministic,
/// so identical traces serialize byte-identically.
pub fn to_jsonl(trace: &WorkloadTrace) -> String {
    let mut out = String::new();
    for req in &trace.requests {
        let line = TraceLine {
            id: req.id.clone(),
            prompt_len: match &req.prompt {
                Prompt::Length(len) => Some(*len),
                Prompt::Tokens(_) => None,
            },
            tokens: req.tokens().map(<[Token]>::to_vec),
            output_len: req.output_len,
            arrival_step: (req.arrival_step != 0).then_some(req.arrival_step),
        };
        out.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
        out.push('\n');
    }
    out
}

/// Write a trace as JSONL to `path`.
pub fn write_trace(trace: &WorkloadTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut file = File::create(path.as_ref())?;
    file.write_all(to_jsonl(trace).as_bytes())?;
    Ok(())
}

/// Generate a length-only trace with the skewed shape typical of interactive
/// serving: roughly `short_frac` of requests shorter than `short_max` tokens
/// (uniform in `[1, short_max)`), the rest uniform in `[short_max, long_max)`.
/// Deterministic for a fixed seed.
pub fn generate_skewed_trace(
    n: usize,
    seed: u64,
    short_frac: f64,
    short_max: usize,
    long_max: usize,
) -> Result<WorkloadTrace, TraceError> {
    if !(0.0..=1.0).contains(&short_frac) {
        return Err(TraceError::BadFraction(short_frac));
    }
    if short_max < 1 || long_max < short_max {
        return Err(TraceError::BadLengthBounds {
            short_max,
            long_max,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests = Vec::with_capacity(n);
    for i in 0..n {
        let len = if rng.random::<f64>() < short_frac {
            if short_max == 1 {
                1
            } else {
                rng.random_range(1..short_max)
            }
        } else if long_max == short_max {
            // Degenerate long range collapses to a point mass.
            short_max
        } else {
            rng.random_range(short_max..long_max)
        };
        requests.push(Request::with_len(format!("r{i}"), len));
    }
    Ok(WorkloadTrace {
        requests,
        metadata: TraceMetadata {
            source: format!(
                "skewed(n={n},seed={seed},short_frac={short_frac},short_max={short_max},long_max={long_max})"
            ),
            seed: Some(seed),
        },
    })
}

/// Generate a token-form trace where every request is one of `prefix_pool`
/// shared pool prefixes (each `prefix_len` tokens) followed by a fresh random
/// suffix of `1..=suffix_max` tokens. Deterministic for a fixed seed.
pub fn generate_prefix_trace(
    n: usize,
    seed: u64,
    prefix_pool: usize,
    prefix_len: usize,
    suffix_max: usize,
) -> Result<WorkloadTrace, TraceError> {
    if prefix_pool == 0 {
        return Err(TraceError::EmptyPrefixPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Vec<Token>> = (0..prefix_pool)
        .map(|_| {
            (0..prefix_len)
                .map(|_| rng.random_range(0..GENERATOR_VOCAB))
                .collect()
        })
        .collect();
    let mut requests = Vec::with_capacity(n);
    for i in 0..n {
        let prefix = &pool[rng.random_range(0..prefix_pool)];
        let suffix_len = if suffix_max == 0 {
            0
        } else {
            rng.random_range(1..=suffix_max)
        };
        let mut tokens = prefix.clone();
        tokens.extend((0..suffix_len).map(|_| rng.random_range(0..GENERATOR_VOCAB)));
        if tokens.is_empty() {
            // prefix_len = 0 with suffix_max = 0 would make empty requests;
            // keep the trace valid with a single token.
            tokens.push(rng.random_range(0..GENERATOR_VOCAB));
        }
        requests.push(Request::with_tokens(format!("r{i}"), tokens));
    }
    Ok(WorkloadTrace {
        requests,
        metadata: TraceMetadata {
            source: format!(
                "prefix(n={n},seed={seed},pool={prefix_pool},prefix_len={prefix_len},suffix_max={suffix_max})"
            ),
            seed: Some(seed),
        },
    })
}
