//! Synthetic trace specs: `kind:key=value,...`.

use packsim_core::trace::{generate_prefix_trace, generate_skewed_trace, WorkloadTrace};

/// Parse and run a generator spec. `default_seed` applies when the spec
/// carries no explicit `seed=`.
pub fn parse(spec: &str, default_seed: u64) -> Result<WorkloadTrace, String> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut pairs = std::collections::BTreeMap::new();
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("generator spec: expected key=value, got {part:?}"))?;
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }

    let take_usize = |pairs: &mut std::collections::BTreeMap<String, String>,
                      key: &str,
                      default: Option<usize>|
     -> Result<usize, String> {
        match pairs.remove(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| format!("generator spec: {key}={raw:?} is not a count")),
            None => default.ok_or_else(|| format!("generator spec: missing required {key}=")),
        }
    };

    match kind {
        "skewed" => {
            let mut pairs = pairs;
            let n = take_usize(&mut pairs, "n", None)?;
            let seed = match pairs.remove("seed") {
                Some(raw) => raw
                    .parse()
                    .map_err(|_| format!("generator spec: seed={raw:?} is not an integer"))?,
                None => default_seed,
            };
            let short_frac = match pairs.remove("short_frac") {
                Some(raw) => raw
                    .parse()
                    .map_err(|_| format!("generator spec: short_frac={raw:?} is not a number"))?,
                None => 0.6,
            };
            let short_max = take_usize(&mut pairs, "short_max", Some(128))?;
            let long_max = take_usize(&mut pairs, "long_max", Some(4096))?;
            if let Some(key) = pairs.keys().next() {
                return Err(format!("generator spec: unknown key {key:?} for skewed"));
            }
            generate_skewed_trace(n, seed, short_frac, short_max, long_max)
                .map_err(|e| format!("generator spec: {e}"))
        }
        "prefix" => {
            let mut pairs = pairs;
            let n = take_usize(&mut pairs, "n", None)?;
            let seed = match pairs.remove("seed") {
                Some(raw) => raw
                    .parse()
                    .map_err(|_| format!("generator spec: seed={raw:?} is not an integer"))?,
                None => default_seed,
            };
            let pool = take_usize(&mut pairs, "pool", Some(4))?;
            let prefix_len = take_usize(&mut pairs, "prefix_len", Some(128))?;
            let suffix_max = take_usize(&mut pairs, "suffix_max", Some(256))?;
            if let Some(key) = pairs.keys().next() {
                return Err(format!("generator spec: unknown key {key:?} for prefix"));
            }
            generate_prefix_trace(n, seed, pool, prefix_len, suffix_max)
                .map_err(|e| format!("generator spec: {e}"))
        }
        other => Err(format!(
            "generator spec: unknown kind {other:?}; expected skewed or prefix"
        )),
    }
}
