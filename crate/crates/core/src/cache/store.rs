use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkern::{softmax_into, Real};

use super::policy::{choose_victim, Policy};

/// Cached tokens of one (layer, KV head), ordered by position.
///
/// Keys are stored after rotation, so eviction never re-rotates anything.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache<T: Real = f32> {
    d: usize,
    keys: Vec<T>,
    values: Vec<T>,
    log_betas: Vec<T>,
    positions: Vec<usize>,
    /// Accumulated attention weight received from every past query.
    mass: Vec<f64>,
}

impl<T: Real> HeadCache<T> {
    pub fn new(d_head: usize) -> Self {
        HeadCache {
            d: d_head,
            keys: Vec::new(),
            values: Vec::new(),
            log_betas: Vec::new(),
            positions: Vec::new(),
            mass: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn d_head(&self) -> usize {
        self.d
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn log_betas(&self) -> &[T] {
        &self.log_betas
    }

    pub fn attention_mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn key(&self, ix: usize) -> &[T] {
        &self.keys[ix * self.d..(ix + 1) * self.d]
    }

    pub fn value(&self, ix: usize) -> &[T] {
        &self.values[ix * self.d..(ix + 1) * self.d]
    }

    pub fn push(&mut self, key: &[T], value: &[T], log_beta: T, position: usize) {
        debug_assert_eq!(key.len(), self.d);
        debug_assert!(self.positions.last().is_none_or(|&p| p < position));
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.log_betas.push(log_beta);
        self.positions.push(position);
        self.mass.push(0.0);
    }

    pub fn remove(&mut self, ix: usize) -> usize {
        let d = self.d;
        self.keys.drain(ix * d..(ix + 1) * d);
        self.values.drain(ix * d..(ix + 1) * d);
        self.log_betas.remove(ix);
        self.mass.remove(ix);
        self.positions.remove(ix)
    }

    pub fn add_mass(&mut self, weights: &[f64]) {
        for (m, &w) in self.mass.iter_mut().zip(weights) {
            *m += w;
        }
    }

    /// Softmax attention of `q` over the first `visible` entries. Writes the
    /// output into `out` and the attention weights into `weights`.
    pub fn attend(&self, visible: usize, q: &[T], scale: T, out: &mut [T], weights: &mut Vec<T>) {
        let mut scores = Vec::with_capacity(visible);
        for j in 0..visible {
            let k = self.key(j);
            let mut s = T::zero();
            for (&a, &b) in q.iter().zip(k) {
                s += a * b;
            }
            scores.push(s * scale);
        }
        weights.clear();
        weights.resize(visible, T::zero());
        softmax_into(&scores, weights);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (j, &w) in weights.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.value(j)) {
                *o += w * v;
            }
        }
    }
}

/// A per-(layer, KV head) set of [`HeadCache`]s sharing one budget and policy.
#[derive(Debug, Clone)]
pub struct BoundedKVCache<T: Real = f32> {
    capacity: Option<usize>,
    policy: Policy,
    n_layers: usize,
    n_kv_heads: usize,
    heads: Vec<HeadCache<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> BoundedKVCache<T> {
    /// `capacity = None` keeps every token.
    pub fn new(n_layers: usize, n_kv_heads: usize, d_head: usize, capacity: Option<usize>, policy: Policy) -> Result<Self> {
        let policy = policy.resolve(capacity)?;
        let seed = match policy {
            Policy::Random { seed } => seed,
            _ => 0,
        };
        Ok(BoundedKVCache {
            capacity,
            policy,
            n_layers,
            n_kv_heads,
            heads: (0..n_layers * n_kv_heads).map(|_| HeadCache::new(d_head)).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &HeadCache<T> {
        &self.heads[layer * self.n_kv_heads + kv_head]
    }

    pub fn head_mut(&mut self, layer: usize, kv_head: usize) -> &mut HeadCache<T> {
        &mut self.heads[layer * self.n_kv_heads + kv_head]
    }

    pub fn max_len(&self) -> usize {
        self.heads.iter().map(HeadCache::len).max().unwrap_or(0)
    }

    /// Drops one entry of `(layer, kv_head)` chosen by the policy at step `t`
    /// and returns its position.
    pub fn evict(&mut self, layer: usize, kv_head: usize, t: usize) -> Result<usize> {
        let ix = layer * self.n_kv_heads + kv_head;
        let head = &self.heads[ix];
        if head.is_empty() {
            return Err(Error::State("eviction requested from an empty cache".into()));
        }
        if self.capacity.is_none_or(|m| head.len() <= m) {
            return Err(Error::State(format!(
                "eviction requested with {} entries under budget {:?}",
                head.len(),
                self.capacity
            )));
        }
        let victim = choose_victim(&self.policy, head, t, &mut self.rng)?;
        Ok(self.heads[ix].remove(victim))
    }

    /// Evicts until the head fits its budget; returns the evicted positions.
    pub fn compress(&mut self, layer: usize, kv_head: usize, t: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        while let Some(m) = self.capacity {
            if self.head(layer, kv_head).len() <= m {
                break;
            }
            out.push(self.evict(layer, kv_head, t)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attend_over_one_entry_returns_its_value() {
        let mut h = HeadCache::<f64>::new(2);
        h.push(&[1.0, 0.0], &[3.0, -1.0], -0.1, 0);
        let mut out = [0.0; 2];
        let mut w = Vec::new();
        h.attend(1, &[0.3, 0.2], 0.5, &mut out, &mut w);
        assert_eq!(out, [3.0, -1.0]);
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn remove_keeps_rows_aligned() {
        let mut h = HeadCache::<f32>::new(2);
        for p in 0..4 {
            let x = p as f32;
            h.push(&[x, x], &[-x, -x], -x, p);
        }
        assert_eq!(h.remove(1), 1);
        assert_eq!(h.positions(), &[0, 2, 3]);
        assert_eq!(h.key(1), &[2.0, 2.0]);
        assert_eq!(h.value(2), &[-3.0, -3.0]);
        assert_eq!(h.log_betas(), &[-0.0, -2.0, -3.0]);
    }

    #[test]
    fn evict_preconditions() {
        let mut c = BoundedKVCache::<f32>::new(1, 1, 1, Some(2), Policy::RecencyWindow).unwrap();
        assert!(matches!(c.evict(0, 0, 0), Err(Error::State(_))));
        for p in 0..3 {
            c.head_mut(0, 0).push(&[0.0], &[0.0], -1.0, p);
        }
        assert_eq!(c.compress(0, 0, 2).unwrap(), vec![0]);
        assert!(matches!(c.evict(0, 0, 2), Err(Error::State(_))));
        assert!(BoundedKVCache::<f32>::new(1, 1, 1, Some(0), Policy::TrimKv).is_err());
    }
}
