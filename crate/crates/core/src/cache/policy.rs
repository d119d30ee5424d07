use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Real;

use super::store::HeadCache;

/// Which cached token to drop when a head exceeds its budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Lowest decayed retention `(t−j)·log β_j`; ties go to the oldest.
    TrimKv,
    /// Sliding window of the `M` most recent tokens.
    RecencyWindow,
    /// The first `sinks` positions are pinned, the rest slide.
    SinkWindow { sinks: usize },
    /// Smallest accumulated attention mass outside the `recent` newest
    /// entries. `None` protects half the budget.
    H2o { recent: Option<usize> },
    /// Uniform over every entry except the newest.
    Random { seed: u64 },
}

impl Policy {
    /// `trimkv`, `recency`, `sink[:S]`, `h2o[:R]`, `random[:SEED]`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let arg_num = |default: Option<u64>| -> Result<Option<u64>> {
            match arg {
                None => Ok(default),
                Some(a) => a
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("policy {s:?}: bad argument {a:?}"))),
            }
        };
        let p = match name {
            "trimkv" | "trim-kv" => Policy::TrimKv,
            "recency" | "recency_window" | "window" => Policy::RecencyWindow,
            "sink" | "sink_window" | "streaming" => Policy::SinkWindow {
                sinks: arg_num(Some(1))?.unwrap() as usize,
            },
            "h2o" => Policy::H2o {
                recent: arg_num(None)?.map(|r| r as usize),
            },
            "random" => Policy::Random {
                seed: arg_num(Some(0))?.unwrap(),
            },
            _ => return Err(Error::Config(format!("unknown policy {s:?}"))),
        };
        if matches!(p, Policy::TrimKv | Policy::RecencyWindow) && arg.is_some() {
            return Err(Error::Config(format!("policy {name} takes no argument")));
        }
        Ok(p)
    }

    pub fn name(&self) -> String {
        match *self {
            Policy::TrimKv => "trimkv".into(),
            Policy::RecencyWindow => "recency".into(),
            Policy::SinkWindow { sinks } => format!("sink:{sinks}"),
            Policy::H2o { recent: None } => "h2o".into(),
            Policy::H2o { recent: Some(r) } => format!("h2o:{r}"),
            Policy::Random { seed } => format!("random:{seed}"),
        }
    }

    pub fn needs_gates(&self) -> bool {
        matches!(self, Policy::TrimKv)
    }

    /// Checks the policy against a budget and fixes defaults that depend on it.
    pub(crate) fn resolve(&self, capacity: Option<usize>) -> Result<Policy> {
        let Some(m) = capacity else {
            return Ok(*self);
        };
        if m < 1 {
            return Err(Error::Config("cache budget M must be at least 1".into()));
        }
        match *self {
            Policy::SinkWindow { sinks } if sinks >= m => Err(Error::Config(format!(
                "sink window with {sinks} sinks needs a budget above {sinks}, got {m}"
            ))),
            Policy::H2o { recent: Some(r) } if r >= m => Err(Error::Config(format!(
                "h2o recent window {r} must be smaller than the budget {m}"
            ))),
            Policy::H2o { recent: None } => Ok(Policy::H2o {
                recent: Some((m / 2).max(1).min(m - 1)),
            }),
            p => Ok(p),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Index of the TRIM-KV victim in a position-sorted entry list.
pub fn trimkv_victim<T: Real>(positions: &[usize], log_betas: &[T], t: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (ix, (&j, &lb)) in positions.iter().zip(log_betas).enumerate() {
        let score = (t - j) as f64 * lb.as_f64();
        // strict comparison keeps the oldest of equal scores
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((ix, score));
        }
    }
    best.map(|(ix, _)| ix)
}

/// Picks the entry to evict from `head` at step `t`. `policy` must be resolved.
pub(crate) fn choose_victim<T: Real>(policy: &Policy, head: &HeadCache<T>, t: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    let n = head.len();
    if n == 0 {
        return Err(Error::State("eviction requested from an empty cache".into()));
    }
    if n == 1 {
        return Err(Error::State("eviction would drop the newest entry".into()));
    }
    let positions = head.positions();
    Ok(match *policy {
        Policy::TrimKv => trimkv_victim(positions, head.log_betas(), t).expect("non-empty"),
        Policy::RecencyWindow => 0,
        Policy::SinkWindow { sinks } => positions.iter().position(|&p| p >= sinks).unwrap_or(0).min(n - 2),
        Policy::H2o { recent } => {
            let protected = recent.unwrap_or(1).max(1).min(n - 1);
            let mass = head.attention_mass();
            let mut best = 0;
            for ix in 1..n - protected {
                if mass[ix] < mass[best] {
                    best = ix;
                }
            }
            best
        }
        Policy::Random { .. } => rng.random_range(0..n - 1),
    })
}
