//! Causal attention and retention-gated attention for a single head.
//!
//! The gated form multiplies every causal logit by the decay factor
//! `β_i^(t−i)`, evaluated as `exp((t−i)·log β_i)` so long gaps underflow to a
//! factor of 0 instead of overflowing an intermediate power. Scores are scaled
//! first and gated second.
//!
//! Two code paths exist: a row-at-a-time reference and a tiled path that
//! streams key blocks through an online log-sum-exp and never holds more
//! than a `tile × tile` block of scores.

use crate::error::{Error, Result};
use crate::numkern::{Real, Tensor};

/// Per-head attention operands.
#[derive(Debug, Clone)]
pub struct AttnInput<T: Real> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub scale: T,
    log_betas: Option<Vec<T>>,
}

/// Gradients of a scalar loss with respect to every attention operand.
#[derive(Debug, Clone)]
pub struct AttnGrads<T: Real> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Present iff the input carried retention scores.
    pub log_beta: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

/// Tiled forward output plus the per-row log-sum-exp needed by the tiled backward.
#[derive(Debug, Clone)]
pub struct TiledOutput<T: Real> {
    pub out: Tensor<T>,
    pub lse: Vec<T>,
}

impl<T: Real> AttnInput<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>, scale: T) -> Result<Self> {
        if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::dim("AttnInput", q.shape(), k.shape()));
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("attention scale"));
        }
        Ok(AttnInput {
            q,
            k,
            v,
            scale,
            log_betas: None,
        })
    }

    /// Attaches retention scores given in the linear domain; each must lie strictly in (0, 1).
    pub fn with_betas(self, betas: &[T]) -> Result<Self> {
        if let Some(b) = betas.iter().find(|b| !(**b > T::zero() && **b < T::one())) {
            return Err(Error::Domain(format!("retention score {b} outside (0, 1)")));
        }
        let log_betas: Vec<T> = betas.iter().map(|b| b.ln()).collect();
        self.with_log_betas(&log_betas)
    }

    /// Attaches retention scores given as `log β`; each must be finite and negative.
    pub fn with_log_betas(mut self, log_betas: &[T]) -> Result<Self> {
        if log_betas.len() != self.seq_len() {
            return Err(Error::dim(
                "AttnInput::with_log_betas",
                self.q.shape(),
                &[log_betas.len()],
            ));
        }
        if let Some(lb) = log_betas
            .iter()
            .find(|lb| !(lb.is_finite() && **lb < T::zero()))
        {
            return Err(Error::Domain(format!(
                "log retention score {lb} does not correspond to β in (0, 1)"
            )));
        }
        self.log_betas = Some(log_betas.to_vec());
        Ok(self)
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn log_betas(&self) -> Option<&[T]> {
        self.log_betas.as_deref()
    }

    fn check_finite(&self) -> Result<()> {
        self.q.check_finite("attention query")?;
        self.k.check_finite("attention key")?;
        self.v.check_finite("attention value")
    }

    /// Decay factor `β_i^(t−i)` applied to the logit of key `i` at query `t`.
    #[inline]
    fn decay(&self, t: usize, i: usize) -> T {
        match &self.log_betas {
            Some(lb) => (T::of((t - i) as f64) * lb[i]).exp(),
            None => T::one(),
        }
    }

    /// Scaled raw logit before gating.
    #[inline]
    fn raw(&self, t: usize, i: usize) -> T {
        dot(self.q.row(t), self.k.row(i)) * self.scale
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn forward_rows<T: Real>(input: &AttnInput<T>) -> Result<Tensor<T>> {
    input.check_finite()?;
    let (n, d) = (input.seq_len(), input.head_dim());
    let mut out = Tensor::zeros(&[n, d]);
    let mut scores = vec![T::zero(); n];
    for t in 0..n {
        let mut max = T::neg_infinity();
        for (i, s) in scores.iter_mut().enumerate().take(t + 1) {
            *s = input.decay(t, i) * input.raw(t, i);
            max = max.max(*s);
        }
        let orow = out.row_mut(t);
        let mut total = T::zero();
        for (i, &s) in scores.iter().enumerate().take(t + 1) {
            let e = (s - max).exp();
            total += e;
            axpy(e, input.v.row(i), orow);
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out.check_finite("attention output")?;
    Ok(out)
}

/// Standard causal softmax attention.
pub fn causal_attention_fwd<T: Real>(input: &AttnInput<T>) -> Result<Tensor<T>> {
    if input.log_betas.is_some() {
        return Err(Error::Config(
            "causal attention called with retention scores attached".into(),
        ));
    }
    forward_rows(input)
}

/// Retention-gated attention: logit `(t, i)` is multiplied by `β_i^(t−i)`.
pub fn gated_attention_fwd<T: Real>(input: &AttnInput<T>) -> Result<Tensor<T>> {
    if input.log_betas.is_none() {
        return Err(Error::Domain(
            "gated attention requires retention scores".into(),
        ));
    }
    forward_rows(input)
}

impl<T: Real> AttnGrads<T> {
    fn zeros(input: &AttnInput<T>) -> Self {
        let shape = input.q.shape();
        let gated = input.log_betas.is_some();
        AttnGrads {
            q: Tensor::zeros(shape),
            k: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            log_beta: gated.then(|| vec![T::zero(); input.seq_len()]),
            beta: None,
        }
    }

    fn finish(mut self, input: &AttnInput<T>) -> Result<Self> {
        if let (Some(glb), Some(lb)) = (&self.log_beta, &input.log_betas) {
            self.beta = Some(glb.iter().zip(lb).map(|(&g, &l)| g / l.exp()).collect());
        }
        self.q.check_finite("attention grad_q")?;
        self.k.check_finite("attention grad_k")?;
        self.v.check_finite("attention grad_v")?;
        Ok(self)
    }

    /// Accumulates the contribution of one (query t, key i) pair given `∂L/∂s_ti`.
    #[inline]
    fn accumulate(&mut self, input: &AttnInput<T>, t: usize, i: usize, ds: T) {
        let f = input.decay(t, i);
        let draw = ds * f * input.scale;
        axpy(draw, input.k.row(i), self.q.row_mut(t));
        axpy(draw, input.q.row(t), self.k.row_mut(i));
        if let Some(glb) = self.log_beta.as_mut() {
            let gap = T::of((t - i) as f64);
            glb[i] += ds * input.raw(t, i) * gap * f;
        }
    }
}

fn check_grad_shape<T: Real>(input: &AttnInput<T>, grad_out: &Tensor<T>) -> Result<()> {
    if grad_out.shape() != input.q.shape() {
        return Err(Error::dim("attention backward", input.q.shape(), grad_out.shape()));
    }
    grad_out.check_finite("attention grad_out")
}

/// Analytic gradients of the (gated or causal) attention map.
///
/// `∂/∂log β_i` collects `(t−i)·β_i^(t−i)·raw_ti` through the softmax Jacobian of
/// every query `t ≥ i`; `grad.beta` is the same quantity divided by `β_i`.
pub fn gated_attention_bwd<T: Real>(
    input: &AttnInput<T>,
    grad_out: &Tensor<T>,
) -> Result<AttnGrads<T>> {
    input.check_finite()?;
    check_grad_shape(input, grad_out)?;
    let n = input.seq_len();
    let mut grads = AttnGrads::zeros(input);
    let mut probs = vec![T::zero(); n];
    let mut dprobs = vec![T::zero(); n];
    for t in 0..n {
        let mut max = T::neg_infinity();
        for (i, p) in probs.iter_mut().enumerate().take(t + 1) {
            *p = input.decay(t, i) * input.raw(t, i);
            max = max.max(*p);
        }
        let mut total = T::zero();
        for p in probs.iter_mut().take(t + 1) {
            *p = (*p - max).exp();
            total += *p;
        }
        let go = grad_out.row(t);
        let mut weighted = T::zero();
        for i in 0..=t {
            probs[i] /= total;
            dprobs[i] = dot(go, input.v.row(i));
            weighted += probs[i] * dprobs[i];
            axpy(probs[i], go, grads.v.row_mut(i));
        }
        for i in 0..=t {
            let ds = probs[i] * (dprobs[i] - weighted);
            grads.accumulate(input, t, i, ds);
        }
    }
    grads.finish(input)
}

/// Causal attention backward; the same kernel without retention scores.
pub fn causal_attention_bwd<T: Real>(
    input: &AttnInput<T>,
    grad_out: &Tensor<T>,
) -> Result<AttnGrads<T>> {
    if input.log_betas.is_some() {
        return Err(Error::Config(
            "causal attention called with retention scores attached".into(),
        ));
    }
    gated_attention_bwd(input, grad_out)
}

/// Tiled forward returning the row log-sum-exp alongside the output.
pub fn tiled_forward<T: Real>(input: &AttnInput<T>, tile: usize) -> Result<TiledOutput<T>> {
    if tile == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    input.check_finite()?;
    let (n, d) = (input.seq_len(), input.head_dim());
    let mut out = Tensor::zeros(&[n, d]);
    let mut lse = vec![T::zero(); n];
    let mut block = vec![T::zero(); tile * tile];
    let mut row_max = vec![T::neg_infinity(); tile];
    let mut row_sum = vec![T::zero(); tile];

    for qa in (0..n).step_by(tile) {
        let qb = (qa + tile).min(n);
        row_max.iter_mut().for_each(|m| *m = T::neg_infinity());
        row_sum.iter_mut().for_each(|s| *s = T::zero());
        // out rows qa..qb double as the running accumulators
        for ka in (0..qb).step_by(tile) {
            let kb = (ka + tile).min(qb);
            for t in qa..qb {
                let r = t - qa;
                let last = kb.min(t + 1);
                if last <= ka {
                    continue;
                }
                let scores = &mut block[r * tile..r * tile + (last - ka)];
                let mut bmax = T::neg_infinity();
                for (c, s) in scores.iter_mut().enumerate() {
                    let i = ka + c;
                    *s = input.decay(t, i) * input.raw(t, i);
                    bmax = bmax.max(*s);
                }
                let new_max = row_max[r].max(bmax);
                let corr = (row_max[r] - new_max).exp();
                let acc = out.row_mut(t);
                acc.iter_mut().for_each(|a| *a *= corr);
                let mut total = row_sum[r] * corr;
                for (c, &s) in scores.iter().enumerate() {
                    let e = (s - new_max).exp();
                    total += e;
                    axpy(e, input.v.row(ka + c), acc);
                }
                row_sum[r] = total;
                row_max[r] = new_max;
            }
        }
        for t in qa..qb {
            let r = t - qa;
            let total = row_sum[r];
            out.row_mut(t).iter_mut().for_each(|o| *o /= total);
            lse[t] = row_max[r] + total.ln();
        }
    }
    out.check_finite("attention output")?;
    Ok(TiledOutput { out, lse })
}

/// Tiled gated attention; equal to [`gated_attention_fwd`] up to rounding, and
/// bitwise equal when a single tile covers the sequence.
pub fn gated_attention_tiled<T: Real>(input: &AttnInput<T>, tile: usize) -> Result<Tensor<T>> {
    Ok(tiled_forward(input, tile)?.out)
}

/// Tiled backward recomputing each score block from the saved log-sum-exp.
pub fn gated_attention_tiled_bwd<T: Real>(
    input: &AttnInput<T>,
    fwd: &TiledOutput<T>,
    grad_out: &Tensor<T>,
    tile: usize,
) -> Result<AttnGrads<T>> {
    if tile == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    input.check_finite()?;
    check_grad_shape(input, grad_out)?;
    let n = input.seq_len();
    let mut grads = AttnGrads::zeros(input);
    let weighted: Vec<T> = (0..n)
        .map(|t| dot(grad_out.row(t), fwd.out.row(t)))
        .collect();
    for qa in (0..n).step_by(tile) {
        let qb = (qa + tile).min(n);
        for ka in (0..qb).step_by(tile) {
            let kb = (ka + tile).min(qb);
            for t in qa..qb {
                let go = grad_out.row(t);
                for i in ka..kb.min(t + 1) {
                    let p = (input.decay(t, i) * input.raw(t, i) - fwd.lse[t]).exp();
                    let dp = dot(go, input.v.row(i));
                    axpy(p, go, grads.v.row_mut(i));
                    grads.accumulate(input, t, i, p * (dp - weighted[t]));
                }
            }
        }
    }
    grads.finish(input)
}
