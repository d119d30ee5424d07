use std::io::Write;

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 8] = b"TRIMTRC1";

fn words_for(t: usize) -> usize {
    (t + 1).div_ceil(64)
}

/// Survival bitsets `α[t][i]` per (layer, KV head): row `t` has one bit for
/// each position `i ≤ t`, set while `i` is cached at the end of step `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionTrace {
    n_layers: usize,
    n_kv_heads: usize,
    rows: Vec<Vec<Vec<u64>>>,
}

impl EvictionTrace {
    pub fn new(n_layers: usize, n_kv_heads: usize) -> Self {
        EvictionTrace {
            n_layers,
            n_kv_heads,
            rows: vec![Vec::new(); n_layers * n_kv_heads],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn steps(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn head(&self, layer: usize, head: usize) -> &[Vec<u64>] {
        &self.rows[layer * self.n_kv_heads + head]
    }

    /// Appends row `t`; rows must arrive in order.
    pub fn push_row(&mut self, layer: usize, head: usize, t: usize, alive: impl IntoIterator<Item = usize>) -> Result<()> {
        let rows = &mut self.rows[layer * self.n_kv_heads + head];
        if rows.len() != t {
            return Err(Error::State(format!("trace row {t} recorded after {} rows", rows.len())));
        }
        let mut words = vec![0u64; words_for(t)];
        for i in alive {
            if i > t {
                return Err(Error::Index {
                    what: "trace position",
                    index: i,
                    bound: t + 1,
                });
            }
            words[i / 64] |= 1 << (i % 64);
        }
        rows.push(words);
        Ok(())
    }

    pub fn alive(&self, layer: usize, head: usize, t: usize, i: usize) -> bool {
        i <= t && self.head(layer, head)[t][i / 64] >> (i % 64) & 1 == 1
    }

    pub fn row_count(&self, layer: usize, head: usize, t: usize) -> usize {
        self.head(layer, head)[t].iter().map(|w| w.count_ones() as usize).sum()
    }

    /// `α[t][i] ≥ α[t+1][i]` for every `i ≤ t`.
    pub fn is_monotone(&self) -> bool {
        self.rows.iter().all(|rows| {
            rows.windows(2).enumerate().all(|(t, w)| {
                let newcomer = t + 1;
                w[1].iter().enumerate().all(|(k, &next)| {
                    let mut grown = next & !w[0].get(k).copied().unwrap_or(0);
                    if newcomer / 64 == k {
                        grown &= !(1u64 << (newcomer % 64));
                    }
                    grown == 0
                })
            })
        })
    }

    pub fn write_csv(&self, layer: usize, head: usize, out: &mut impl Write) -> Result<()> {
        let io = |e| Error::Format {
            what: "trace csv",
            detail: format!("{e}"),
        };
        writeln!(out, "t,i,alive").map_err(io)?;
        for t in 0..self.steps() {
            for i in 0..=t {
                writeln!(out, "{t},{i},{}", self.alive(layer, head, t, i) as u8).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&(self.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_kv_heads as u32).to_le_bytes());
        out.extend_from_slice(&(self.steps() as u64).to_le_bytes());
        for rows in &self.rows {
            for w in rows.iter().flatten() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "trace", detail };
        if bytes.len() < 24 || &bytes[..8] != TRACE_MAGIC {
            return Err(bad("missing TRIMTRC1 header".into()));
        }
        let n_layers = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n_kv = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let steps = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let per_head: usize = (0..steps).map(words_for).sum();
        let need = 24 + 8 * per_head * n_layers * n_kv;
        if bytes.len() != need {
            return Err(bad(format!("expected {need} bytes, found {}", bytes.len())));
        }
        let mut words = bytes[24..].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
        let rows = (0..n_layers * n_kv)
            .map(|_| (0..steps).map(|t| words.by_ref().take(words_for(t)).collect()).collect())
            .collect();
        Ok(EvictionTrace {
            n_layers,
            n_kv_heads: n_kv,
            rows,
        })
    }
}
