//! Shared scheduler configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default physical KV page size in tokens (common hardware-aligned choice,
/// alongside 256).
pub const DEFAULT_PAGE_SIZE: usize = 128;

/// Default minimum shareable prefix length in tokens. Prefixes shorter than
/// this are not worth deduplicating; one page is the natural unit.
pub const DEFAULT_MIN_SHARE: usize = 128;

/// Scheduler-wide knobs shared by packing, layout, and simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    /// Attention tile size `T` in tokens.
    pub tile: usize,
    /// Group capacity `C`: maximum total token length per packed group.
    pub capacity: usize,
    /// Memory cap per group in tokens (KV cache plus workspace headroom).
    pub mem_cap: usize,
    /// Suffix headroom in tokens reserved after each request's suffix segment
    /// so decode appends do not immediately force reconsolidation.
    pub headroom: usize,
    /// Seed for all randomized behavior (generators, simulated decode tokens).
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            tile: 128,
            capacity: 8192,
            // Effectively unbounded: desk-scale runs are capacity-limited,
            // not memory-limited, unless the caller says otherwise.
            mem_cap: 1 << 40,
            headroom: 32,
            seed: 0,
        }
    }
}

impl Config {
    /// Check the structural invariants: `tile >= 1`, `capacity >= tile`,
    /// `mem_cap >= capacity`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tile == 0 {
            return Err(ConfigError::ZeroTile);
        }
        if self.capacity < self.tile {
            return Err(ConfigError::CapacityBelowTile {
                capacity: self.capacity,
                tile: self.tile,
            });
        }
        if self.mem_cap < self.capacity {
            return Err(ConfigError::MemCapBelowCapacity {
                mem_cap: self.mem_cap,
                capacity: self.capacity,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("tile size must be at least 1")]
    ZeroTile,
    #[error("group capacity {capacity} is smaller than tile size {tile}")]
    CapacityBelowTile { capacity: usize, tile: usize },
    #[error("memory cap {mem_cap} is smaller than group capacity {capacity}")]
    MemCapBelowCapacity { mem_cap: usize, capacity: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = Config::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.tile, 128);
        assert_eq!(cfg.capacity, 8192);
    }

    #[test]
    fn rejects_capacity_below_tile() {
        let cfg = Config {
            tile: 128,
            capacity: 64,
            ..Config::default()
        };
        assert_eq!(
            cfg.validate(),
            Err(ConfigError::CapacityBelowTile {
                capacity: 64,
                tile: 128
            })
        );
    }

    #[test]
    fn rejects_mem_cap_below_capacity() {
        let cfg = Config {
            mem_cap: 100,
            capacity: 8192,
            ..Config::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::MemCapBelowCapacity { .. })
        ));
    }

    #[test]
    fn rejects_zero_tile() {
        let cfg = Config {
            tile: 0,
            ..Config::default()
        };
        assert_eq!(cfg.validate(), Err(ConfigError::ZeroTile));
    }
}
