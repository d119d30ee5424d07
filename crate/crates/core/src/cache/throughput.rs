use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gates::GateParams;
use crate::model::Model;
use crate::numkern::Real;

use super::engine::{DecodeOptions, Decoder};
use super::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputConfig {
    pub context: usize,
    pub gen: usize,
    /// `None` decodes with a full cache.
    pub budget: Option<usize>,
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub policy: Policy,
    pub prefill_chunk: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub budget: Option<usize>,
    pub policy: String,
    pub batch: usize,
    /// Median over repetitions of the wall time spent in decode steps.
    pub decode_seconds: f64,
    pub tokens_per_sec: f64,
    pub rep_seconds: Vec<f64>,
    /// Decode steps taken by each sequence of the batch.
    pub steps_per_sequence: Vec<usize>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Prefills `batch` random prompts (untimed), then times `gen` greedy decode
/// steps per sequence. Warmup repetitions are discarded.
pub fn measure_throughput<T: Real>(
    model: &Model<T>,
    gates: Option<&[GateParams<T>]>,
    cfg: &ThroughputConfig,
) -> Result<ThroughputReport> {
    if cfg.batch == 0 || cfg.reps == 0 || cfg.context == 0 {
        return Err(Error::Config("bench needs positive batch, reps and context".into()));
    }
    let vocab = model.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompts: Vec<Vec<usize>> = (0..cfg.batch)
        .map(|_| (0..cfg.context).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let mut rep_seconds = Vec::with_capacity(cfg.reps);
    let mut steps_per_sequence = vec![0; cfg.batch];
    for rep in 0..cfg.warmup + cfg.reps {
        let mut decoders = Vec::with_capacity(cfg.batch);
        let mut next = Vec::with_capacity(cfg.batch);
        for p in &prompts {
            let mut d = Decoder::new(model, gates, cfg.budget, cfg.policy, DecodeOptions::default())?;
            let out = d.chunked_prefill(p, cfg.prefill_chunk.max(1))?;
            next.push(argmax(&out.last().expect("non-empty prompt").logits));
            decoders.push(d);
        }
        let mut steps = vec![0; cfg.batch];
        let start = Instant::now();
        for _ in 0..cfg.gen {
            for (b, d) in decoders.iter_mut().enumerate() {
                let out = d.decode_step(next[b])?;
                next[b] = argmax(&out.logits);
                steps[b] += 1;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        if rep >= cfg.warmup {
            rep_seconds.push(secs);
            steps_per_sequence = steps;
        }
    }
    let decode_seconds = median(&rep_seconds);
    Ok(ThroughputReport {
        budget: cfg.budget,
        policy: cfg.policy.name(),
        batch: cfg.batch,
        decode_seconds,
        tokens_per_sec: (cfg.batch * cfg.gen) as f64 / decode_seconds,
        rep_seconds,
        steps_per_sequence,
    })
}

/// Median wall time of decode step `t` over `reps` runs of `steps` steps
/// from an empty cache.
pub fn step_time_profile<T: Real>(
    model: &Model<T>,
    gates: Option<&[GateParams<T>]>,
    policy: Policy,
    budget: Option<usize>,
    steps: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let vocab = model.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..steps).map(|_| rng.random_range(0..vocab)).collect();
    let mut times = vec![Vec::with_capacity(reps); steps];
    for _ in 0..reps {
        let mut d = Decoder::new(model, gates, budget, policy, DecodeOptions::default())?;
        for (t, &tok) in tokens.iter().enumerate() {
            let start = Instant::now();
            d.decode_step(tok)?;
            times[t].push(start.elapsed().as_secs_f64());
        }
    }
    Ok(times.iter().map(|ts| median(ts)).collect())
}
