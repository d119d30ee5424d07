use crate::error::{Error, Result};
use crate::gates::{gate_forward, GateParams};
use crate::model::{apply_rope, rms_norm, Model};
use crate::numkern::{matmul, matmul_nt, Real, Tensor};

use super::policy::Policy;
use super::store::BoundedKVCache;
use super::trace::EvictionTrace;

/// What a [`Decoder`] records besides logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    pub trace: bool,
    /// Keep each layer's concatenated head outputs for deviation measurements.
    pub attention: bool,
    /// Keep every token's log-retention per (layer, KV head).
    pub retention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T: Real = f32> {
    pub position: usize,
    pub logits: Vec<T>,
    /// Per layer, `n_heads × d_head` attention outputs (before the output projection).
    pub attention: Option<Vec<Vec<T>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompressionStats {
    /// Post-chunk compression passes, one per processed chunk.
    pub passes: usize,
    /// Passes that actually removed at least one entry.
    pub evicting_passes: usize,
    pub evicted: usize,
}

/// Incremental inference over a bounded KV cache.
///
/// Each chunk appends its tokens to every head, attends with plain softmax
/// over what is cached (retention never touches the logits here), and only
/// then evicts back down to the budget.
#[derive(Clone)]
pub struct Decoder<'m, T: Real = f32> {
    model: &'m Model<T>,
    gates: Option<&'m [GateParams<T>]>,
    cache: BoundedKVCache<T>,
    pos: usize,
    options: DecodeOptions,
    trace: Option<EvictionTrace>,
    retention: Option<Vec<Vec<T>>>,
    stats: CompressionStats,
}

impl<'m, T: Real> Decoder<'m, T> {
    /// `capacity = None` decodes with a full cache.
    pub fn new(
        model: &'m Model<T>,
        gates: Option<&'m [GateParams<T>]>,
        capacity: Option<usize>,
        policy: Policy,
        options: DecodeOptions,
    ) -> Result<Self> {
        let cfg = &model.config;
        if let Some(g) = gates {
            model.check_gates(g)?;
        } else if policy.needs_gates() && capacity.is_some() {
            return Err(Error::Config(format!("policy {policy} needs retention gates")));
        }
        if options.retention && gates.is_none() {
            return Err(Error::Config("retention recording needs gates".into()));
        }
        let cache = BoundedKVCache::new(cfg.n_layers, cfg.n_kv_heads, cfg.d_head, capacity, policy)?;
        let heads = cfg.n_layers * cfg.n_kv_heads;
        Ok(Decoder {
            model,
            gates,
            cache,
            pos: 0,
            options,
            trace: options.trace.then(|| EvictionTrace::new(cfg.n_layers, cfg.n_kv_heads)),
            retention: options.retention.then(|| vec![Vec::new(); heads]),
            stats: CompressionStats::default(),
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn cache(&self) -> &BoundedKVCache<T> {
        &self.cache
    }

    pub fn trace(&self) -> Option<&EvictionTrace> {
        self.trace.as_ref()
    }

    pub fn into_trace(self) -> Option<EvictionTrace> {
        self.trace
    }

    /// Log-retention of every processed token, indexed `[layer·n_kv + head][position]`.
    pub fn retention_log(&self) -> Option<&[Vec<T>]> {
        self.retention.as_deref()
    }

    pub fn stats(&self) -> CompressionStats {
        self.stats
    }

    pub fn decode_step(&mut self, token: usize) -> Result<StepOutput<T>> {
        Ok(self.process_chunk(&[token])?.pop().expect("one token in, one step out"))
    }

    pub fn chunked_prefill(&mut self, tokens: &[usize], chunk_size: usize) -> Result<Vec<StepOutput<T>>> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(chunk_size) {
            out.extend(self.process_chunk(chunk)?);
        }
        Ok(out)
    }

    /// Full attention over (cache ∪ chunk) for every chunk token, then one
    /// compression pass per head.
    pub fn process_chunk(&mut self, tokens: &[usize]) -> Result<Vec<StepOutput<T>>> {
        let model = self.model;
        let cfg = &model.config;
        let n = tokens.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        let (dh, nh, nkv) = (cfg.d_head, cfg.n_heads, cfg.n_kv_heads);
        let group = cfg.group_size();
        let scale = T::of(cfg.scale());
        let start = self.pos;
        let last = start + n - 1;
        let positions: Vec<usize> = (start..=last).collect();

        let mut x = Tensor::zeros(&[n, cfg.d_model]);
        for (r, &tok) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(model.weights.embed.row(tok));
        }
        let mut attention: Vec<Vec<Vec<T>>> = Vec::new();
        let mut evicted_any = false;
        let mut weights = Vec::new();
        for (l, lw) in model.weights.layers.iter().enumerate() {
            let (xn, _) = rms_norm(&x, &lw.attn_norm, cfg.norm_eps);
            let q = matmul(&xn, &lw.wq)?;
            let k = matmul(&xn, &lw.wk)?;
            let v = matmul(&xn, &lw.wv)?;
            let (q, k) = apply_rope(&q, &k, &positions, dh, cfg.rope_theta)?;
            let log_betas = match self.gates {
                Some(g) => Some(gate_forward(&xn, &g[l])?.log_betas),
                None => None,
            };
            let mut before: Vec<Vec<usize>> = Vec::new();
            for g in 0..nkv {
                if self.trace.is_some() {
                    before.push(self.cache.head(l, g).positions().to_vec());
                }
                let head = self.cache.head_mut(l, g);
                for r in 0..n {
                    let lb = log_betas.as_ref().map_or(T::zero(), |lb| lb.at(r, g));
                    head.push(&k.row(r)[g * dh..(g + 1) * dh], &v.row(r)[g * dh..(g + 1) * dh], lb, start + r);
                }
                if let (Some(log), Some(lb)) = (self.retention.as_mut(), log_betas.as_ref()) {
                    log[l * nkv + g].extend((0..n).map(|r| lb.at(r, g)));
                }
            }

            let mut attn_cat = Tensor::zeros(&[n, nh * dh]);
            for g in 0..nkv {
                let head = self.cache.head(l, g);
                let len = head.len();
                let mut mass = vec![0.0f64; len];
                for r in 0..n {
                    let visible = len - (n - 1 - r);
                    for h in g * group..(g + 1) * group {
                        let qh = &q.row(r)[h * dh..(h + 1) * dh];
                        let out = &mut attn_cat.row_mut(r)[h * dh..(h + 1) * dh];
                        head.attend(visible, qh, scale, out, &mut weights);
                        for (m, &w) in mass.iter_mut().zip(&weights) {
                            *m += w.as_f64();
                        }
                    }
                }
                self.cache.head_mut(l, g).add_mass(&mass);
            }
            if self.options.attention {
                attention.push((0..n).map(|r| attn_cat.row(r).to_vec()).collect());
            }

            let mut h_res = matmul(&attn_cat, &lw.wo)?;
            h_res.add_assign(&x)?;
            let (xn2, _) = rms_norm(&h_res, &lw.mlp_norm, cfg.norm_eps);
            let act = matmul(&xn2, &lw.w_up)?.map(|u| cfg.activation.apply(u));
            let mut x_out = matmul(&act, &lw.w_down)?;
            x_out.add_assign(&h_res)?;
            x = x_out;

            for g in 0..nkv {
                let gone = self.cache.compress(l, g, last)?;
                evicted_any |= !gone.is_empty();
                self.stats.evicted += gone.len();
                if let Some(trace) = self.trace.as_mut() {
                    // rows inside the chunk see the pre-chunk cache plus the chunk so far
                    for r in 0..n - 1 {
                        let alive = before[g].iter().copied().chain(start..=start + r);
                        trace.push_row(l, g, start + r, alive)?;
                    }
                    trace.push_row(l, g, last, self.cache.head(l, g).positions().iter().copied())?;
                }
            }
        }
        self.stats.passes += 1;
        self.stats.evicting_passes += evicted_any as usize;

        let (xf, _) = rms_norm(&x, &model.weights.final_norm, cfg.norm_eps);
        let logits = matmul_nt(&xf, &model.weights.embed)?;
        logits.check_finite("decoder logits")?;
        self.pos = last + 1;
        Ok((0..n)
            .map(|r| StepOutput {
                position: start + r,
                logits: logits.row(r).to_vec(),
                attention: self.options.attention.then(|| attention.iter().map(|layer| layer[r].clone()).collect()),
            })
            .collect())
    }
}
