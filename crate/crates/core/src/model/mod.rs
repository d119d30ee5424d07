//! Decoder-only transformer used both as the frozen teacher (causal attention)
//! and as the student (same weights, retention-gated attention in every block).
//!
//! Blocks are pre-norm: `x += attn(rms(x))`, `x += mlp(rms(x))`, followed by a
//! final RMS norm and a tied unembedding. Attention uses grouped KV heads and
//! rotary embeddings. Gates read the same normalized input as the projections.

mod config;
mod rope;
mod weights;

pub use config::ModelConfig;
pub use rope::apply_rope;
pub use weights::{LayerWeights, ModelWeights};

use crate::attnkern::{gated_attention_tiled_bwd, tiled_forward, AttnInput, TiledOutput};
use crate::error::{Error, Result};
use crate::gates::{gate_backward, gate_forward_taped, GateParams, GateTape, RetentionScores};
use crate::numkern::{matmul, matmul_nt, matmul_tn, Real, Tensor};

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real = f32> {
    pub logits: Tensor<T>,
    /// Per-layer retention scores; present iff the forward ran in student mode.
    pub retention: Option<Vec<RetentionScores<T>>>,
    /// Per-layer normalized attention inputs.
    pub hidden_taps: Option<Vec<Tensor<T>>>,
}

/// Which parameter groups a backward pass should produce gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardRequest {
    pub weights: bool,
    pub gates: bool,
}

#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    pub weights: Option<ModelWeights<T>>,
    pub gates: Option<Vec<GateParams<T>>>,
}

struct LayerTape<T: Real> {
    x_in: Tensor<T>,
    xn1: Tensor<T>,
    inv_rms1: Vec<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    heads: Vec<TiledOutput<T>>,
    attn_cat: Tensor<T>,
    gate: Option<(RetentionScores<T>, GateTape<T>)>,
    h: Tensor<T>,
    xn2: Tensor<T>,
    inv_rms2: Vec<T>,
    up_pre: Tensor<T>,
    act: Tensor<T>,
}

/// Activations saved by [`Model::forward_taped`] for [`Model::backward`].
pub struct Tape<T: Real> {
    tokens: Vec<usize>,
    layers: Vec<LayerTape<T>>,
    x_final: Tensor<T>,
    xf: Tensor<T>,
    inv_rms_f: Vec<T>,
}

impl<T: Real> Tape<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

pub(crate) fn rms_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> (Tensor<T>, Vec<T>) {
    let d = x.cols();
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = y.row_mut(t);
        let inv_rms = rms_norm_row(row, gain.data(), eps, d);
        inv.push(inv_rms);
    }
    (y, inv)
}

/// Normalizes `row` in place and returns `1/rms`.
pub(crate) fn rms_norm_row<T: Real>(row: &mut [T], gain: &[T], eps: f64, d: usize) -> T {
    let mut ms = T::zero();
    for &v in row.iter() {
        ms += v * v;
    }
    let inv_rms = T::one() / (ms / T::of(d as f64) + T::of(eps)).sqrt();
    for (v, &g) in row.iter_mut().zip(gain) {
        *v = *v * inv_rms * g;
    }
    inv_rms
}

fn rms_norm_backward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    inv_rms: &[T],
    grad_y: &Tensor<T>,
    mut grad_gain: Option<&mut Tensor<T>>,
) -> Tensor<T> {
    let d = x.cols();
    let mut grad_x = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); d];
    let mut gy = vec![T::zero(); d];
    for t in 0..x.rows() {
        let r = inv_rms[t];
        let mut dot = T::zero();
        for j in 0..d {
            xhat[j] = x.at(t, j) * r;
            gy[j] = grad_y.at(t, j) * gain.data()[j];
            dot += gy[j] * xhat[j];
        }
        if let Some(gg) = grad_gain.as_deref_mut() {
            for (j, g) in gg.data_mut().iter_mut().enumerate() {
                *g += grad_y.at(t, j) * xhat[j];
            }
        }
        let mean = dot / T::of(d as f64);
        for (j, g) in grad_x.row_mut(t).iter_mut().enumerate() {
            *g = r * (gy[j] - xhat[j] * mean);
        }
    }
    grad_x
}

fn kv_column<T: Real>(log_betas: &Tensor<T>, head: usize) -> Vec<T> {
    (0..log_betas.rows()).map(|t| log_betas.at(t, head)).collect()
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Model { config, weights })
    }

    pub fn init<R: rand::Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let weights = ModelWeights::init(&config, rng)?;
        Ok(Model { config, weights })
    }

    pub fn init_gates<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<GateParams<T>>> {
        (0..self.config.n_layers)
            .map(|_| GateParams::init(&self.config.gate, self.config.d_model, self.config.n_kv_heads, rng))
            .collect()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Domain("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.len(),
                bound: self.config.max_seq + 1,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn check_gates(&self, gates: &[GateParams<T>]) -> Result<()> {
        if gates.len() != self.config.n_layers {
            return Err(Error::Config(format!(
                "{} gates supplied for {} layers",
                gates.len(),
                self.config.n_layers
            )));
        }
        for (l, g) in gates.iter().enumerate() {
            if g.n_kv_heads() != self.config.n_kv_heads || g.d_model() != self.config.d_model {
                return Err(Error::Config(format!(
                    "gate {l} maps {}→{}, model needs {}→{}",
                    g.d_model(),
                    g.n_kv_heads(),
                    self.config.d_model,
                    self.config.n_kv_heads
                )));
            }
        }
        Ok(())
    }

    /// Full-attention forward.
    pub fn forward_teacher(&self, tokens: &[usize]) -> Result<ForwardOutput<T>> {
        Ok(self.forward_taped(tokens, None)?.0)
    }

    /// Retention-gated forward: every logit of every block is multiplied by `β_i^(t−i)`.
    pub fn forward_student(&self, tokens: &[usize], gates: &[GateParams<T>]) -> Result<ForwardOutput<T>> {
        Ok(self.forward_taped(tokens, Some(gates))?.0)
    }

    pub fn forward_taped(
        &self,
        tokens: &[usize],
        gates: Option<&[GateParams<T>]>,
    ) -> Result<(ForwardOutput<T>, Tape<T>)> {
        self.check_tokens(tokens)?;
        if let Some(g) = gates {
            self.check_gates(g)?;
        }
        let cfg = &self.config;
        let (n, d, dh) = (tokens.len(), cfg.d_model, cfg.d_head);
        let scale = T::of(cfg.scale());
        let positions: Vec<usize> = (0..n).collect();

        let mut x = Tensor::zeros(&[n, d]);
        for (t, &tok) in tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(self.weights.embed.row(tok));
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let (xn1, inv_rms1) = rms_norm(&x, &lw.attn_norm, cfg.norm_eps);
            let q = matmul(&xn1, &lw.wq)?;
            let k = matmul(&xn1, &lw.wk)?;
            let v = matmul(&xn1, &lw.wv)?;
            let (q, k) = apply_rope(&q, &k, &positions, dh, cfg.rope_theta)?;
            let gate = match gates {
                Some(g) => Some(gate_forward_taped(&xn1, &g[l])?),
                None => None,
            };

            let mut attn_cat = Tensor::zeros(&[n, cfg.q_width()]);
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let input = self.head_input(&q, &k, &v, gate.as_ref().map(|g| &g.0), h, scale)?;
                let out = tiled_forward(&input, cfg.attn_tile)?;
                attn_cat.add_col_block(h * dh, &out.out);
                heads.push(out);
            }
            let mut h_res = matmul(&attn_cat, &lw.wo)?;
            h_res.add_assign(&x)?;

            let (xn2, inv_rms2) = rms_norm(&h_res, &lw.mlp_norm, cfg.norm_eps);
            let up_pre = matmul(&xn2, &lw.w_up)?;
            let act = up_pre.map(|u| cfg.activation.apply(u));
            let mut x_out = matmul(&act, &lw.w_down)?;
            x_out.add_assign(&h_res)?;

            layers.push(LayerTape {
                x_in: std::mem::replace(&mut x, x_out),
                xn1,
                inv_rms1,
                q,
                k,
                v,
                heads,
                attn_cat,
                gate,
                h: h_res,
                xn2,
                inv_rms2,
                up_pre,
                act,
            });
        }

        let (xf, inv_rms_f) = rms_norm(&x, &self.weights.final_norm, cfg.norm_eps);
        let logits = matmul_nt(&xf, &self.weights.embed)?;
        logits.check_finite("model logits")?;

        let retention = gates.map(|_| {
            layers
                .iter()
                .map(|lt| lt.gate.as_ref().expect("student tape holds gates").0.clone())
                .collect()
        });
        let hidden_taps = Some(layers.iter().map(|lt| lt.xn1.clone()).collect());
        let out = ForwardOutput {
            logits,
            retention,
            hidden_taps,
        };
        let tape = Tape {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            xf,
            inv_rms_f,
        };
        Ok((out, tape))
    }

    fn head_input(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        retention: Option<&RetentionScores<T>>,
        head: usize,
        scale: T,
    ) -> Result<AttnInput<T>> {
        let dh = self.config.d_head;
        let g = self.config.kv_head_of(head);
        let input = AttnInput::new(q.col_block(head * dh, dh), k.col_block(g * dh, dh), v.col_block(g * dh, dh), scale)?;
        match retention {
            Some(r) => input.with_log_betas(&kv_column(&r.log_betas, g)),
            None => Ok(input),
        }
    }

    /// Backpropagates `grad_logits` through a taped forward.
    ///
    /// `extra_grad_log_betas[l]` (shape `[T × n_kv_heads]`) is added to the
    /// gradient reaching layer `l`'s retention scores, which is how the
    /// capacity penalty enters.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        gates: Option<&[GateParams<T>]>,
        grad_logits: &Tensor<T>,
        extra_grad_log_betas: Option<&[Tensor<T>]>,
        request: BackwardRequest,
    ) -> Result<Gradients<T>> {
        let cfg = &self.config;
        let (n, dh) = (tape.seq_len(), cfg.d_head);
        if grad_logits.shape() != [n, cfg.vocab_size] {
            return Err(Error::dim("Model::backward", &[n, cfg.vocab_size], grad_logits.shape()));
        }
        if request.gates && gates.is_none() {
            return Err(Error::Config("gate gradients requested for a teacher forward".into()));
        }
        let scale = T::of(cfg.scale());
        let positions: Vec<usize> = (0..n).collect();
        let mut wgrads = request.weights.then(|| self.weights.zeros_like());
        let mut ggrads: Option<Vec<GateParams<T>>> =
            gates.filter(|_| request.gates).map(|g| g.iter().map(GateParams::zeros_like).collect());

        if let Some(wg) = wgrads.as_mut() {
            wg.embed.add_assign(&matmul_tn(grad_logits, &tape.xf)?)?;
        }
        let grad_xf = matmul(grad_logits, &self.weights.embed)?;
        let mut grad_x = rms_norm_backward(
            &tape.x_final,
            &self.weights.final_norm,
            &tape.inv_rms_f,
            &grad_xf,
            wgrads.as_mut().map(|w| &mut w.final_norm),
        );

        for l in (0..cfg.n_layers).rev() {
            let lt = &tape.layers[l];
            let lw = &self.weights.layers[l];
            let mut lwg = wgrads.as_mut().map(|w| &mut w.layers[l]);

            // x_out = h + act(xn2·w_up)·w_down
            let grad_act = matmul_nt(&grad_x, &lw.w_down)?;
            if let Some(g) = lwg.as_deref_mut() {
                g.w_down.add_assign(&matmul_tn(&lt.act, &grad_x)?)?;
            }
            let mut grad_up = grad_act;
            for (g, &u) in grad_up.data_mut().iter_mut().zip(lt.up_pre.data()) {
                *g *= cfg.activation.derivative(u);
            }
            if let Some(g) = lwg.as_deref_mut() {
                g.w_up.add_assign(&matmul_tn(&lt.xn2, &grad_up)?)?;
            }
            let grad_xn2 = matmul_nt(&grad_up, &lw.w_up)?;
            let mut grad_h = rms_norm_backward(
                &lt.h,
                &lw.mlp_norm,
                &lt.inv_rms2,
                &grad_xn2,
                lwg.as_deref_mut().map(|g| &mut g.mlp_norm),
            );
            grad_h.add_assign(&grad_x)?;

            // h = x_in + attn_cat·wo
            let grad_cat = matmul_nt(&grad_h, &lw.wo)?;
            if let Some(g) = lwg.as_deref_mut() {
                g.wo.add_assign(&matmul_tn(&lt.attn_cat, &grad_h)?)?;
            }
            let mut grad_q = Tensor::zeros(lt.q.shape());
            let mut grad_k = Tensor::zeros(lt.k.shape());
            let mut grad_v = Tensor::zeros(lt.v.shape());
            let mut grad_lb = lt.gate.as_ref().map(|_| Tensor::zeros(&[n, cfg.n_kv_heads]));
            for h in 0..cfg.n_heads {
                let g = cfg.kv_head_of(h);
                let input = self.head_input(&lt.q, &lt.k, &lt.v, lt.gate.as_ref().map(|x| &x.0), h, scale)?;
                let hg = gated_attention_tiled_bwd(&input, &lt.heads[h], &grad_cat.col_block(h * dh, dh), cfg.attn_tile)?;
                grad_q.add_col_block(h * dh, &hg.q);
                grad_k.add_col_block(g * dh, &hg.k);
                grad_v.add_col_block(g * dh, &hg.v);
                if let (Some(glb), Some(hlb)) = (grad_lb.as_mut(), hg.log_beta.as_ref()) {
                    for (t, &val) in hlb.iter().enumerate() {
                        let cur = glb.at(t, g);
                        glb.set(t, g, cur + val);
                    }
                }
            }
            let grad_q = rope::unrotate(&grad_q, &positions, dh, cfg.rope_theta)?;
            let grad_k = rope::unrotate(&grad_k, &positions, dh, cfg.rope_theta)?;
            if let Some(g) = lwg.as_deref_mut() {
                g.wq.add_assign(&matmul_tn(&lt.xn1, &grad_q)?)?;
                g.wk.add_assign(&matmul_tn(&lt.xn1, &grad_k)?)?;
                g.wv.add_assign(&matmul_tn(&lt.xn1, &grad_v)?)?;
            }
            let mut grad_xn1 = matmul_nt(&grad_q, &lw.wq)?;
            grad_xn1.add_assign(&matmul_nt(&grad_k, &lw.wk)?)?;
            grad_xn1.add_assign(&matmul_nt(&grad_v, &lw.wv)?)?;

            if let (Some(glb), Some((_, gtape)), Some(gp)) = (grad_lb.as_mut(), lt.gate.as_ref(), gates) {
                if let Some(extra) = extra_grad_log_betas {
                    glb.add_assign(&extra[l])?;
                }
                let (gx, gg) = gate_backward(&lt.xn1, &gp[l], gtape, glb)?;
                grad_xn1.add_assign(&gx)?;
                if let Some(acc) = ggrads.as_mut() {
                    for (dst, src) in acc[l].tensors_mut().into_iter().zip(gg.tensors()) {
                        dst.add_assign(src.1)?;
                    }
                }
            }

            let mut grad_in = rms_norm_backward(
                &lt.x_in,
                &lw.attn_norm,
                &lt.inv_rms1,
                &grad_xn1,
                lwg.as_deref_mut().map(|g| &mut g.attn_norm),
            );
            grad_in.add_assign(&grad_h)?;
            grad_x = grad_in;
        }

        if let Some(wg) = wgrads.as_mut() {
            for (t, &tok) in tape.tokens.iter().enumerate() {
                for (e, &g) in wg.embed.row_mut(tok).iter_mut().zip(grad_x.row(t)) {
                    *e += g;
                }
            }
        }
        Ok(Gradients {
            weights: wgrads,
            gates: ggrads,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }
}

#[cfg(test)]
mod tests;
