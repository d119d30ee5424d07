//! Exports behind the figures: decayed-retention matrices, per-head
//! sparsity, and deviation/accuracy against the cache budget.

mod eval;

use std::io::Write;

use crate::error::{Error, Result};

pub use eval::{
    deviation_vs_budget, evaluate, head_deviation_table, mean_retention, run_sample, DeviationRow, EvalReport,
    SampleRun,
};

pub const RETENTION_MAP_MAX_T: usize = 4096;

fn csv_err(e: std::io::Error) -> Error {
    Error::Format {
        what: "csv",
        detail: e.to_string(),
    }
}

/// Lower-triangular `β_i^(t−i)` for one (layer, KV head).
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionMap {
    pub layer: usize,
    pub head: usize,
    /// Row `t` holds columns `0..=t`.
    pub rows: Vec<Vec<f64>>,
}

pub fn build_retention_map(log_betas: &[f64], layer: usize, head: usize) -> Result<RetentionMap> {
    if log_betas.len() > RETENTION_MAP_MAX_T {
        return Err(Error::SizeGuard(format!(
            "retention map of {} positions exceeds {RETENTION_MAP_MAX_T}",
            log_betas.len()
        )));
    }
    let rows = (0..log_betas.len())
        .map(|t| (0..=t).map(|i| ((t - i) as f64 * log_betas[i]).exp()).collect())
        .collect();
    Ok(RetentionMap { layer, head, rows })
}

impl RetentionMap {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,i,value").map_err(csv_err)?;
        for (t, row) in self.rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                writeln!(out, "{t},{i},{v}").map_err(csv_err)?;
            }
        }
        Ok(())
    }
}

/// `1 − 2/(T(T+1)) · Σ_{i≤t} β_i^(t−i)` over a head's `T` retentions.
pub fn sparsity_estimate(log_betas: &[f64]) -> Result<f64> {
    let t_len = log_betas.len();
    if t_len == 0 {
        return Err(Error::Domain("sparsity of an empty sequence".into()));
    }
    let mut total = 0.0;
    for (i, &lb) in log_betas.iter().enumerate() {
        let beta = lb.exp();
        let mut p = 1.0;
        for _ in i..t_len {
            total += p;
            p *= beta;
            if p < 1e-300 {
                break;
            }
        }
    }
    let pairs = (t_len * (t_len + 1)) as f64 / 2.0;
    Ok(1.0 - total / pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    /// `(layer, kv_head, sparsity)`
    pub rows: Vec<(usize, usize, f64)>,
}

impl SparsityReport {
    /// `log_betas[layer·n_kv + head]` holds a head's per-position log-retentions.
    pub fn from_heads(log_betas: &[Vec<f64>], n_kv_heads: usize) -> Result<Self> {
        let rows = log_betas
            .iter()
            .enumerate()
            .map(|(ix, lb)| Ok((ix / n_kv_heads, ix % n_kv_heads, sparsity_estimate(lb)?)))
            .collect::<Result<_>>()?;
        Ok(SparsityReport { rows })
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "layer,head,sparsity").map_err(csv_err)?;
        for (l, h, s) in &self.rows {
            writeln!(out, "{l},{h},{s}").map_err(csv_err)?;
        }
        Ok(())
    }
}

pub fn write_deviation_csv(rows: &[DeviationRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "policy,M,deviation,accuracy").map_err(csv_err)?;
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.policy, r.budget, r.deviation, acc).map_err(csv_err)?;
    }
    Ok(())
}
