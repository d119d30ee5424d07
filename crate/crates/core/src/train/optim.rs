use crate::error::{Error, Result};
use crate::numkern::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One optimizer slot: a parameter, its gradient, and whether it is decayed.
pub struct Param<'a, T: Real> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub decay: bool,
}

/// AdamW: `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves parameters and moments untouched.
pub fn adam_step<T: Real>(params: &mut [Param<'_, T>], state: &mut AdamState<T>, hp: &AdamConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, step got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.value.shape() != p.grad.shape() || p.value.shape() != m.shape() {
            return Err(Error::dim("adam_step", p.value.shape(), p.grad.shape()));
        }
        if let Some(ix) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite gradient in {} at element {ix}; step rejected",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let wd = if p.decay { hp.lr * hp.weight_decay } else { 0.0 };
        let it = p.value.data_mut().iter_mut().zip(p.grad.data());
        for ((w, &g), (mi, vi)) in it.zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut())) {
            let g = g.as_f64();
            let m1 = hp.beta1 * mi.as_f64() + (1.0 - hp.beta1) * g;
            let v1 = hp.beta2 * vi.as_f64() + (1.0 - hp.beta2) * g * g;
            *mi = T::of(m1);
            *vi = T::of(v1);
            let w0 = w.as_f64();
            let upd = (m1 / bc1) / ((v1 / bc2).sqrt() + hp.eps);
            *w = T::of(w0 - wd * w0 - hp.lr * upd);
        }
    }
    Ok(())
}
