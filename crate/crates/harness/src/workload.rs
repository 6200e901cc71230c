//! Workload configuration and operation generation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use versiontree::{is_sentinel, Key};

use crate::history::OpCall;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("mix must sum to 100, got {0}")]
    MixSum(u32),
    #[error("malformed mix `{0}`, expected c:a:r:s")]
    MixFormat(String),
    #[error("malformed key range `{0}`, expected LO:HI")]
    KeysFormat(String),
    #[error("key range {lo}:{hi} is empty")]
    EmptyKeys { lo: Key, hi: Key },
    #[error("key range {lo}:{hi} reaches the reserved keys")]
    SentinelKeys { lo: Key, hi: Key },
    #[error("threads must be at least 1")]
    NoThreads,
    #[error("{keys} keys cannot be split into {threads} disjoint regions of at least 3 keys")]
    RegionsTooSmall { keys: u64, threads: usize },
}

/// Operation mix in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mix {
    pub contains: u8,
    pub add: u8,
    pub remove: u8,
    pub range: u8,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            contains: 40,
            add: 30,
            remove: 25,
            range: 5,
        }
    }
}

impl Mix {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let sum = self.contains as u32 + self.add as u32 + self.remove as u32 + self.range as u32;
        if sum == 100 {
            Ok(())
        } else {
            Err(ConfigError::MixSum(sum))
        }
    }
}

impl FromStr for Mix {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u8> = s
            .split(':')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| ConfigError::MixFormat(s.into()))?;
        let [contains, add, remove, range] = parts[..] else {
            return Err(ConfigError::MixFormat(s.into()));
        };
        let mix = Mix {
            contains,
            add,
            remove,
            range,
        };
        mix.validate()?;
        Ok(mix)
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.contains, self.add, self.remove, self.range)
    }
}

/// Half-open key interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySpace {
    pub lo: Key,
    pub hi: Key,
}

impl KeySpace {
    pub fn new(lo: Key, hi: Key) -> Result<Self, ConfigError> {
        let ks = KeySpace { lo, hi };
        ks.validate()?;
        Ok(ks)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let KeySpace { lo, hi } = *self;
        if lo >= hi {
            return Err(ConfigError::EmptyKeys { lo, hi });
        }
        if is_sentinel(hi - 1) {
            return Err(ConfigError::SentinelKeys { lo, hi });
        }
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.hi.abs_diff(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }

    pub fn contains(&self, k: Key) -> bool {
        self.lo <= k && k < self.hi
    }
}

impl FromStr for KeySpace {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::KeysFormat(s.into());
        // allow a leading minus on either bound
        let (lo, hi) = s
            .char_indices()
            .skip(1)
            .find(|&(_, c)| c == ':')
            .map(|(i, _)| (&s[..i], &s[i + 1..]))
            .ok_or_else(bad)?;
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        KeySpace::new(lo, hi)
    }
}

impl fmt::Display for KeySpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub threads: usize,
    pub ops_per_thread: usize,
    pub keys: KeySpace,
    pub mix: Mix,
    /// Number of keys a range query spans.
    pub range_width: u64,
    pub seed: u64,
    /// Give every thread its own slice of the key space.
    pub disjoint: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            threads: 4,
            ops_per_thread: 1000,
            keys: KeySpace { lo: 0, hi: 1000 },
            mix: Mix::default(),
            range_width: 10,
            seed: 0,
            disjoint: false,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.threads == 0 {
            return Err(ConfigError::NoThreads);
        }
        self.mix.validate()?;
        self.keys.validate()?;
        if self.disjoint && self.keys.len() / (self.threads as u64) < 3 {
            return Err(ConfigError::RegionsTooSmall {
                keys: self.keys.len(),
                threads: self.threads,
            });
        }
        Ok(())
    }

    /// Generator for thread `t`, independent of every other thread's.
    pub fn rng(&self, t: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t as u64 + 1);
        rng
    }

    /// Region boundaries `[lo, hi]` of thread `t` in disjoint mode.
    fn region(&self, t: usize) -> (Key, Key) {
        let width = (self.keys.len() / self.threads as u64) as i64;
        let lo = self.keys.lo + width * t as i64;
        (lo, lo + width - 1)
    }

    /// Keys that are inserted before a disjoint run starts and never touched
    /// afterwards: both ends of every region. All lower ends go in first so
    /// that each region ends up below its own internal node.
    pub fn permanent_keys(&self) -> Vec<Key> {
        if !self.disjoint {
            return vec![];
        }
        let regions: Vec<_> = (0..self.threads).map(|t| self.region(t)).collect();
        regions
            .iter()
            .map(|r| r.0)
            .chain(regions.iter().map(|r| r.1))
            .collect()
    }

    /// Keys thread `t` operates on.
    pub fn thread_keys(&self, t: usize) -> KeySpace {
        if self.disjoint {
            let (lo, hi) = self.region(t);
            KeySpace { lo: lo + 1, hi }
        } else {
            self.keys
        }
    }

    pub fn gen_op(&self, rng: &mut impl Rng, keys: KeySpace) -> OpCall {
        let roll = rng.gen_range(0..100u8);
        let m = self.mix;
        let k = rng.gen_range(keys.lo..keys.hi);
        if roll < m.contains {
            OpCall::Contains(k)
        } else if roll < m.contains + m.add {
            OpCall::Add(k)
        } else if roll < m.contains + m.add + m.remove {
            OpCall::Remove(k)
        } else {
            let span = self.range_width.max(1).min(keys.len()) as i64;
            let a = rng.gen_range(keys.lo..=keys.hi - span);
            OpCall::Range(a, a + span - 1)
        }
    }

    /// The operations thread `t` performs.
    pub fn script(&self, t: usize) -> Vec<OpCall> {
        let mut rng = self.rng(t);
        let keys = self.thread_keys(t);
        (0..self.ops_per_thread)
            .map(|_| self.gen_op(&mut rng, keys))
            .collect()
    }
}
