//! Single-head eviction on tiny instances: replay any policy, or enumerate
//! every monotone schedule to find the one closest to full attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkern::Tensor;

use super::policy::Policy;
use super::store::{BoundedKVCache, HeadCache};

pub const ORACLE_MAX_T: usize = 12;
pub const ORACLE_MAX_M: usize = 4;
pub const ORACLE_MAX_D: usize = 4;

/// Queries, keys (already rotated), values and log-retentions of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInstance {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub log_betas: Vec<f64>,
    pub scale: f64,
}

impl HeadInstance {
    pub fn new(q: Tensor<f64>, k: Tensor<f64>, v: Tensor<f64>, log_betas: Vec<f64>, scale: f64) -> Result<Self> {
        let t = q.rows();
        if k.shape() != q.shape() || v.shape() != q.shape() || log_betas.len() != t {
            return Err(Error::dim("HeadInstance", q.shape(), k.shape()));
        }
        if log_betas.iter().any(|&lb| !(lb < 0.0) || !lb.is_finite()) {
            return Err(Error::Domain("log-retentions must be finite and negative".into()));
        }
        Ok(HeadInstance {
            q,
            k,
            v,
            log_betas,
            scale,
        })
    }

    /// Gaussian q/k/v and retention drawn uniformly from (0, 1).
    pub fn random(t: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut gauss = |_| rng.sample::<f64, _>(StandardNormal);
        let q = Tensor::new(vec![t, d], (0..t * d).map(&mut gauss).collect()).expect("shape");
        let k = Tensor::new(vec![t, d], (0..t * d).map(&mut gauss).collect()).expect("shape");
        let v = Tensor::new(vec![t, d], (0..t * d).map(&mut gauss).collect()).expect("shape");
        let log_betas = (0..t).map(|_| rng.random_range(1e-6..1.0f64).ln()).collect();
        HeadInstance {
            q,
            k,
            v,
            log_betas,
            scale: 1.0 / (d as f64).sqrt(),
        }
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    /// Attention output at step `t` over the given survivors (which must include `t`).
    pub fn output(&self, t: usize, survivors: &[usize]) -> Vec<f64> {
        let mut head = HeadCache::new(self.dim());
        for &j in survivors {
            head.push(self.k.row(j), self.v.row(j), self.log_betas[j], j);
        }
        let mut out = vec![0.0; self.dim()];
        head.attend(head.len(), self.q.row(t), self.scale, &mut out, &mut Vec::new());
        out
    }

    pub fn full_outputs(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|t| self.output(t, &(0..=t).collect::<Vec<_>>()))
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// `Σ_t ‖o'_t − o_t‖²` against full attention.
    pub deviation: f64,
    /// Evicted position at each step, if any.
    pub victims: Vec<Option<usize>>,
    /// Survivors at the end of each step.
    pub survivors: Vec<Vec<usize>>,
}

/// Replays `policy` with budget `m`: append, attend, then evict.
pub fn simulate_policy(inst: &HeadInstance, m: usize, policy: Policy) -> Result<Simulation> {
    let mut cache = BoundedKVCache::<f64>::new(1, 1, inst.dim(), Some(m), policy)?;
    let full = inst.full_outputs();
    let mut deviation = 0.0;
    let mut victims = Vec::with_capacity(inst.len());
    let mut survivors = Vec::with_capacity(inst.len());
    let mut out = vec![0.0; inst.dim()];
    let mut weights = Vec::new();
    for t in 0..inst.len() {
        let head = cache.head_mut(0, 0);
        head.push(inst.k.row(t), inst.v.row(t), inst.log_betas[t], t);
        head.attend(head.len(), inst.q.row(t), inst.scale, &mut out, &mut weights);
        head.add_mass(&weights);
        deviation += sq_dist(&out, &full[t]);
        let gone = cache.compress(0, 0, t)?;
        victims.push(gone.first().copied());
        survivors.push(cache.head(0, 0).positions().to_vec());
    }
    Ok(Simulation {
        deviation,
        victims,
        survivors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub deviation: f64,
    pub victims: Vec<Option<usize>>,
    /// Number of complete schedules enumerated.
    pub schedules: usize,
    /// Mean deviation over all schedules. Every step offers the same number
    /// of candidates, so this is the expected deviation of uniform random
    /// eviction.
    pub mean_deviation: f64,
}

struct Search<'a> {
    inst: &'a HeadInstance,
    full: Vec<Vec<f64>>,
    m: usize,
    best: f64,
    best_victims: Vec<Option<usize>>,
    schedules: usize,
    total: f64,
}

impl Search<'_> {
    fn visit(&mut self, t: usize, survivors: &mut Vec<usize>, acc: f64, victims: &mut Vec<Option<usize>>) {
        if t == self.inst.len() {
            self.schedules += 1;
            self.total += acc;
            if acc < self.best {
                self.best = acc;
                self.best_victims = victims.clone();
            }
            return;
        }
        survivors.push(t);
        let acc = acc + sq_dist(&self.inst.output(t, survivors), &self.full[t]);
        if survivors.len() <= self.m {
            victims.push(None);
            self.visit(t + 1, survivors, acc, victims);
            victims.pop();
        } else {
            // the newest entry is never a candidate
            for ix in 0..survivors.len() - 1 {
                let gone = survivors.remove(ix);
                victims.push(Some(gone));
                self.visit(t + 1, survivors, acc, victims);
                victims.pop();
                survivors.insert(ix, gone);
            }
        }
        survivors.pop();
    }
}

/// Exhaustive search over monotone schedules that keep at most `m` entries
/// after every step.
pub fn oracle_optimal_eviction(inst: &HeadInstance, m: usize) -> Result<OracleResult> {
    if inst.len() > ORACLE_MAX_T || m > ORACLE_MAX_M || inst.dim() > ORACLE_MAX_D {
        return Err(Error::SizeGuard(format!(
            "oracle handles T ≤ {ORACLE_MAX_T}, M ≤ {ORACLE_MAX_M}, d ≤ {ORACLE_MAX_D}; got T={}, M={m}, d={}",
            inst.len(),
            inst.dim()
        )));
    }
    if m == 0 {
        return Err(Error::Config("cache budget M must be at least 1".into()));
    }
    let mut search = Search {
        inst,
        full: inst.full_outputs(),
        m,
        best: f64::INFINITY,
        best_victims: Vec::new(),
        schedules: 0,
        total: 0.0,
    };
    search.visit(0, &mut Vec::new(), 0.0, &mut Vec::new());
    Ok(OracleResult {
        deviation: search.best,
        victims: search.best_victims,
        schedules: search.schedules,
        mean_deviation: search.total / search.schedules as f64,
    })
}

/// A batch of seeded random instances.
pub fn random_instances(count: usize, t: usize, d: usize, seed: u64) -> Vec<HeadInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| HeadInstance::random(t, d, &mut rng)).collect()
}
