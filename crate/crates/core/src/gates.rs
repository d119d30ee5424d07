//! Retention gates: a small network mapping each token's hidden state to one
//! retention score `β ∈ (0, 1)` per KV head.
//!
//! Logits are clamped to `[LOGIT_MIN, LOGIT_MAX]` before the log-sigmoid, which
//! keeps every `log β` inside `[ln 1e−30, −1e−12]`. All comparisons between
//! tokens happen on `log β`; the linear-domain `β` is for export only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{log_sigmoid, matmul, matmul_nt, matmul_tn, sigmoid, Activation, Real, Tensor};

pub const LOGIT_MIN: f64 = -69.0;
pub const LOGIT_MAX: f64 = 27.6;
pub const DEFAULT_BIAS: f64 = 8.0;
pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateVariant {
    #[default]
    Mlp,
    Linear,
}

/// Shape and initialization of the gates attached to every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub variant: GateVariant,
    pub hidden: usize,
    pub bias_init: f64,
    pub init_std: f64,
    pub activation: Activation,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            variant: GateVariant::Mlp,
            hidden: DEFAULT_HIDDEN,
            bias_init: DEFAULT_BIAS,
            init_std: DEFAULT_INIT_STD,
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateWeights<T: Real = f32> {
    Mlp { w_in: Tensor<T>, w_out: Tensor<T> },
    Linear { w_map: Tensor<T> },
}

/// One layer's gate: `z = act(x·w_in)·w_out + bias` (or `x·w_map + bias`).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T: Real = f32> {
    pub weights: GateWeights<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

/// Retention scores for a sequence, `[T × n_kv_heads]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionScores<T: Real = f32> {
    pub betas: Tensor<T>,
    pub log_betas: Tensor<T>,
}

/// Forward intermediates kept for [`gate_backward`].
#[derive(Debug, Clone)]
pub struct GateTape<T: Real> {
    pre: Option<Tensor<T>>,
    hidden: Option<Tensor<T>>,
    logits: Tensor<T>,
}

impl<T: Real> GateParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &GateConfig, d_model: usize, n_kv_heads: usize, rng: &mut R) -> Result<Self> {
        if config.variant == GateVariant::Mlp && config.hidden == 0 {
            return Err(Error::Config("gate hidden width must be at least 1".into()));
        }
        if !config.bias_init.is_finite() {
            return Err(Error::Config("gate bias must be finite".into()));
        }
        let weights = match config.variant {
            GateVariant::Mlp => GateWeights::Mlp {
                w_in: Tensor::randn(&[d_model, config.hidden], config.init_std, rng),
                w_out: Tensor::randn(&[config.hidden, n_kv_heads], config.init_std, rng),
            },
            GateVariant::Linear => GateWeights::Linear {
                w_map: Tensor::randn(&[d_model, n_kv_heads], config.init_std, rng),
            },
        };
        Ok(GateParams {
            weights,
            bias: Tensor::filled(&[n_kv_heads], T::of(config.bias_init)),
            activation: config.activation,
        })
    }

    pub fn n_kv_heads(&self) -> usize {
        self.bias.len()
    }

    pub fn d_model(&self) -> usize {
        match &self.weights {
            GateWeights::Mlp { w_in, .. } => w_in.rows(),
            GateWeights::Linear { w_map } => w_map.rows(),
        }
    }

    pub fn variant(&self) -> GateVariant {
        match self.weights {
            GateWeights::Mlp { .. } => GateVariant::Mlp,
            GateWeights::Linear { .. } => GateVariant::Linear,
        }
    }

    /// Parameter tensors in a fixed order: weights first, bias last.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = match &self.weights {
            GateWeights::Mlp { w_in, w_out } => vec![("w_in", w_in), ("w_out", w_out)],
            GateWeights::Linear { w_map } => vec![("w_map", w_map)],
        };
        out.push(("bias", &self.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = match &mut self.weights {
            GateWeights::Mlp { w_in, w_out } => vec![w_in, w_out],
            GateWeights::Linear { w_map } => vec![w_map],
        };
        out.push(&mut self.bias);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let weights = match &self.weights {
            GateWeights::Mlp { w_in, w_out } => GateWeights::Mlp {
                w_in: Tensor::zeros(w_in.shape()),
                w_out: Tensor::zeros(w_out.shape()),
            },
            GateWeights::Linear { w_map } => GateWeights::Linear {
                w_map: Tensor::zeros(w_map.shape()),
            },
        };
        GateParams {
            weights,
            bias: Tensor::zeros(self.bias.shape()),
            activation: self.activation,
        }
    }

    pub fn cast<U: Real>(&self) -> GateParams<U> {
        let weights = match &self.weights {
            GateWeights::Mlp { w_in, w_out } => GateWeights::Mlp {
                w_in: w_in.cast(),
                w_out: w_out.cast(),
            },
            GateWeights::Linear { w_map } => GateWeights::Linear { w_map: w_map.cast() },
        };
        GateParams {
            weights,
            bias: self.bias.cast(),
            activation: self.activation,
        }
    }
}

fn clamp_logit<T: Real>(z: T) -> T {
    z.max(T::of(LOGIT_MIN)).min(T::of(LOGIT_MAX))
}

fn gate_tape<T: Real>(x: &Tensor<T>, p: &GateParams<T>) -> Result<GateTape<T>> {
    if x.shape().len() != 2 || x.cols() != p.d_model() {
        return Err(Error::dim("gate_forward", x.shape(), &[x.rows(), p.d_model()]));
    }
    let (pre, hidden, mut logits) = match &p.weights {
        GateWeights::Mlp { w_in, w_out } => {
            let pre = matmul(x, w_in)?;
            let hidden = pre.map(|v| p.activation.apply(v));
            let logits = matmul(&hidden, w_out)?;
            (Some(pre), Some(hidden), logits)
        }
        GateWeights::Linear { w_map } => (None, None, matmul(x, w_map)?),
    };
    let h = p.n_kv_heads();
    for t in 0..logits.rows() {
        for (z, &b) in logits.row_mut(t).iter_mut().zip(p.bias.data()) {
            *z += b;
        }
    }
    logits.check_finite("gate logits")?;
    debug_assert_eq!(logits.cols(), h);
    Ok(GateTape { pre, hidden, logits })
}

fn scores_from_logits<T: Real>(logits: &Tensor<T>) -> RetentionScores<T> {
    let log_betas = logits.map(|z| log_sigmoid(clamp_logit(z)));
    // f32 cannot represent 1 − 1e−12; keep the linear copy strictly below 1.
    let below_one = T::one() - T::epsilon() / T::of(2.0);
    let betas = log_betas.map(|lb| lb.exp().min(below_one));
    RetentionScores { betas, log_betas }
}

/// Retention scores for every row of `x`.
pub fn gate_forward<T: Real>(x: &Tensor<T>, p: &GateParams<T>) -> Result<RetentionScores<T>> {
    Ok(scores_from_logits(&gate_tape(x, p)?.logits))
}

/// Forward pass that also returns the tape needed for [`gate_backward`].
pub fn gate_forward_taped<T: Real>(
    x: &Tensor<T>,
    p: &GateParams<T>,
) -> Result<(RetentionScores<T>, GateTape<T>)> {
    let tape = gate_tape(x, p)?;
    Ok((scores_from_logits(&tape.logits), tape))
}

/// Gradients of a loss with respect to the gate input and parameters, given
/// `∂L/∂log β`. Logits outside the clamp window receive no gradient.
pub fn gate_backward<T: Real>(
    x: &Tensor<T>,
    p: &GateParams<T>,
    tape: &GateTape<T>,
    grad_log_betas: &Tensor<T>,
) -> Result<(Tensor<T>, GateParams<T>)> {
    if grad_log_betas.shape() != tape.logits.shape() {
        return Err(Error::dim("gate_backward", tape.logits.shape(), grad_log_betas.shape()));
    }
    let (lo, hi) = (T::of(LOGIT_MIN), T::of(LOGIT_MAX));
    let mut grad_z = tape.logits.clone();
    for (gz, &g) in grad_z.data_mut().iter_mut().zip(grad_log_betas.data()) {
        let z = *gz;
        // d log σ(z) / dz = σ(−z)
        *gz = if z >= lo && z <= hi { g * sigmoid(-z) } else { T::zero() };
    }
    let mut grad_bias = Tensor::zeros(p.bias.shape());
    for t in 0..grad_z.rows() {
        for (b, &g) in grad_bias.data_mut().iter_mut().zip(grad_z.row(t)) {
            *b += g;
        }
    }
    let (grad_x, weights) = match (&p.weights, &tape.pre, &tape.hidden) {
        (GateWeights::Mlp { w_in, w_out }, Some(pre), Some(hidden)) => {
            let grad_w_out = matmul_tn(hidden, &grad_z)?;
            let mut grad_pre = matmul_nt(&grad_z, w_out)?;
            for (g, &v) in grad_pre.data_mut().iter_mut().zip(pre.data()) {
                *g *= p.activation.derivative(v);
            }
            let grad_w_in = matmul_tn(x, &grad_pre)?;
            (
                matmul_nt(&grad_pre, w_in)?,
                GateWeights::Mlp {
                    w_in: grad_w_in,
                    w_out: grad_w_out,
                },
            )
        }
        (GateWeights::Linear { w_map }, _, _) => (
            matmul_nt(&grad_z, w_map)?,
            GateWeights::Linear {
                w_map: matmul_tn(x, &grad_z)?,
            },
        ),
        _ => return Err(Error::State("gate tape does not match gate variant".into())),
    };
    Ok((
        grad_x,
        GateParams {
            weights,
            bias: grad_bias,
            activation: p.activation,
        },
    ))
}

/// Log-domain decayed retention `(t − i)·log β_i`; larger means more worth keeping.
pub fn decayed_score<T: Real>(log_beta_i: T, t: usize, i: usize) -> Result<T> {
    if t < i {
        return Err(Error::Ordering { t, i });
    }
    Ok(T::of((t - i) as f64) * log_beta_i)
}
