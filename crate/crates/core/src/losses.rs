//! Training losses for the gate stage: distillation KL, next-token NLL and the
//! hinge capacity penalty on prefix sums of decayed retention, each with its
//! analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{softmax_into, Real, Tensor};

/// Default tile edge for the streaming capacity computation.
pub const CAPACITY_TILE: usize = 64;

/// Terms with `β^(t−i)` below this are treated as exactly zero.
pub const DECAY_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `D_KL(teacher ‖ student)`
    #[default]
    Forward,
    /// `D_KL(student ‖ teacher)`
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_kl: f64,
    pub l_ntp: f64,
    pub l_cap: f64,
    pub lambda_cap: f64,
    pub total: f64,
}

fn check_logits<T: Real>(op: &'static str, p: &Tensor<T>, q: &Tensor<T>) -> Result<()> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::dim(op, p.shape(), q.shape()));
    }
    if p.cols() < 2 {
        return Err(Error::Domain(format!("{op}: vocabulary must have at least 2 entries")));
    }
    Ok(())
}

fn log_softmax_row<T: Real>(row: &[T], probs: &mut [T], logp: &mut [T]) {
    let lse = softmax_into(row, probs);
    for (lp, &z) in logp.iter_mut().zip(row) {
        *lp = z - lse;
    }
}

/// Mean-over-positions KL divergence between teacher (`p`) and student (`q`)
/// distributions, plus the gradient with respect to the student logits. The
/// teacher is a constant.
pub fn kl_distill_grad<T: Real>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
    direction: KlDirection,
) -> Result<(T, Tensor<T>)> {
    check_logits("kl_distill", p_logits, q_logits)?;
    let (n, v) = (q_logits.rows(), q_logits.cols());
    let norm = T::of(n as f64);
    let mut grad = Tensor::zeros(q_logits.shape());
    let (mut pp, mut lp, mut qq, mut lq) = (vec![T::zero(); v], vec![T::zero(); v], vec![T::zero(); v], vec![T::zero(); v]);
    let mut total = T::zero();
    for t in 0..n {
        log_softmax_row(p_logits.row(t), &mut pp, &mut lp);
        log_softmax_row(q_logits.row(t), &mut qq, &mut lq);
        let g = grad.row_mut(t);
        match direction {
            KlDirection::Forward => {
                let mut kl = T::zero();
                for j in 0..v {
                    if pp[j] > T::zero() {
                        kl += pp[j] * (lp[j] - lq[j]);
                    }
                    g[j] = (qq[j] - pp[j]) / norm;
                }
                total += kl;
            }
            KlDirection::Reverse => {
                let mut kl = T::zero();
                for j in 0..v {
                    if qq[j] > T::zero() {
                        kl += qq[j] * (lq[j] - lp[j]);
                    }
                }
                for j in 0..v {
                    g[j] = qq[j] * (lq[j] - lp[j] - kl) / norm;
                }
                total += kl;
            }
        }
    }
    Ok((total / norm, grad))
}

pub fn kl_distill<T: Real>(p_logits: &Tensor<T>, q_logits: &Tensor<T>, direction: KlDirection) -> Result<T> {
    Ok(kl_distill_grad(p_logits, q_logits, direction)?.0)
}

/// Mean negative log-likelihood of `targets` and its gradient w.r.t. the logits.
pub fn ntp_loss_grad<T: Real>(q_logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    if q_logits.shape().len() != 2 || q_logits.rows() != targets.len() {
        return Err(Error::dim("ntp_loss", q_logits.shape(), &[targets.len()]));
    }
    let (n, v) = (q_logits.rows(), q_logits.cols());
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Index {
            what: "ntp target",
            index: bad,
            bound: v,
        });
    }
    let norm = T::of(n as f64);
    let mut grad = Tensor::zeros(q_logits.shape());
    let (mut probs, mut logp) = (vec![T::zero(); v], vec![T::zero(); v]);
    let mut total = T::zero();
    for (t, &y) in targets.iter().enumerate() {
        log_softmax_row(q_logits.row(t), &mut probs, &mut logp);
        total -= logp[y];
        let g = grad.row_mut(t);
        for j in 0..v {
            g[j] = probs[j] / norm;
        }
        g[y] -= T::one() / norm;
    }
    Ok((total / norm, grad))
}

pub fn ntp_loss<T: Real>(q_logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    Ok(ntp_loss_grad(q_logits, targets)?.0)
}

#[inline]
fn decay_term<T: Real>(log_beta: T, gap: usize, floor_ln: T) -> T {
    let e = T::of(gap as f64) * log_beta;
    if e < floor_ln {
        T::zero()
    } else {
        e.exp()
    }
}

/// Prefix sums `P_t = Σ_{i≤t} β_i^(t−i)` computed one `tile × tile` block at a
/// time; only the `T` sums are held.
pub fn retention_prefix_sums<T: Real>(log_betas: &[T], tile: usize) -> Result<Vec<T>> {
    if tile == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    if let Some(lb) = log_betas.iter().find(|lb| lb.is_nan() || **lb > T::zero()) {
        return Err(Error::Domain(format!("log retention score {lb} is not ≤ 0")));
    }
    let n = log_betas.len();
    let floor_ln = T::of(DECAY_FLOOR.ln());
    let mut sums = vec![T::zero(); n];
    for ta in (0..n).step_by(tile) {
        let tb = (ta + tile).min(n);
        for ia in (0..tb).step_by(tile) {
            let ib = (ia + tile).min(tb);
            for (t, sum) in sums.iter_mut().enumerate().take(tb).skip(ta) {
                for (i, &lb) in log_betas.iter().enumerate().take(ib.min(t + 1)).skip(ia) {
                    *sum += decay_term(lb, t - i, floor_ln);
                }
            }
        }
    }
    Ok(sums)
}

fn capacity_normalizer(n: usize, m: usize) -> f64 {
    1.0 / (n as f64 * (n - m) as f64)
}

/// Hinge capacity loss `(1/(T(T−M))) Σ_t max(0, P_t − M)` for one (layer, head).
/// Defined as 0 when `T ≤ M`, where no prefix sum can exceed the budget.
pub fn capacity_loss_tiled<T: Real>(log_betas: &[T], m: usize, tile: usize) -> Result<T> {
    if m == 0 {
        return Err(Error::Config("memory capacity M must be at least 1".into()));
    }
    let n = log_betas.len();
    let sums = retention_prefix_sums(log_betas, tile)?;
    if n <= m {
        return Ok(T::zero());
    }
    let budget = T::of(m as f64);
    let excess: T = sums.iter().map(|&p| (p - budget).max(T::zero())).sum();
    Ok(excess * T::of(capacity_normalizer(n, m)))
}

pub fn capacity_loss<T: Real>(log_betas: &[T], m: usize) -> Result<T> {
    capacity_loss_tiled(log_betas, m, CAPACITY_TILE)
}

/// Capacity loss and its gradient with respect to each `log β_i`.
pub fn capacity_loss_grad<T: Real>(log_betas: &[T], m: usize, tile: usize) -> Result<(T, Vec<T>)> {
    if m == 0 {
        return Err(Error::Config("memory capacity M must be at least 1".into()));
    }
    let n = log_betas.len();
    let sums = retention_prefix_sums(log_betas, tile)?;
    let mut grad = vec![T::zero(); n];
    if n <= m {
        return Ok((T::zero(), grad));
    }
    let budget = T::of(m as f64);
    let norm = T::of(capacity_normalizer(n, m));
    let active: Vec<bool> = sums.iter().map(|&p| p > budget).collect();
    let excess: T = sums.iter().map(|&p| (p - budget).max(T::zero())).sum();
    let floor_ln = T::of(DECAY_FLOOR.ln());
    for ta in (0..n).step_by(tile) {
        let tb = (ta + tile).min(n);
        if !active[ta..tb].iter().any(|&a| a) {
            continue;
        }
        for ia in (0..tb).step_by(tile) {
            let ib = (ia + tile).min(tb);
            for t in (ta..tb).filter(|&t| active[t]) {
                for i in ia..ib.min(t + 1) {
                    let gap = t - i;
                    // ∂β^gap/∂log β = gap·β^gap
                    grad[i] += T::of(gap as f64) * decay_term(log_betas[i], gap, floor_ln);
                }
            }
        }
    }
    grad.iter_mut().for_each(|g| *g *= norm);
    Ok((excess * norm, grad))
}

/// Combined objective `L_KL + L_NTP + λ_cap·L_cap`.
pub fn total_objective(l_kl: f64, l_ntp: f64, l_cap: f64, lambda_cap: f64) -> Result<LossReport> {
    if !(lambda_cap >= 0.0) || !lambda_cap.is_finite() {
        return Err(Error::Config(format!("lambda_cap must be a finite value ≥ 0, got {lambda_cap}")));
    }
    if !(l_kl.is_finite() && l_ntp.is_finite() && l_cap.is_finite()) {
        return Err(Error::NonFinite("loss component"));
    }
    Ok(LossReport {
        l_kl,
        l_ntp,
        l_cap,
        lambda_cap,
        total: l_kl + l_ntp + lambda_cap * l_cap,
    })
}
