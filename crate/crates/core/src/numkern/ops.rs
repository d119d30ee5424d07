use serde::{Deserialize, Serialize};

use super::tensor::{Mask, Real, Tensor};
use crate::error::{Error, Result};

fn require_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

/// `[m×k] · [k×n]`. Every output element accumulates over `k` left to right.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = require_2d("matmul_nt", a)?;
    let (_, k2) = require_2d("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = require_2d("matmul_tn", a)?;
    let (k2, n) = require_2d("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += api * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction. Masked-out entries come back as exactly 0.
pub fn softmax_rows<T: Real>(m: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    let (r, c) = require_2d("softmax_rows", m)?;
    if let Some(mask) = mask {
        if mask.shape() != [r, c] {
            return Err(Error::dim("softmax_rows", m.shape(), &mask.shape()));
        }
    }
    let visible = |i: usize, j: usize| mask.map_or(true, |mk| mk.get(i, j));
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = m.row(i);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (j, &x) in row.iter().enumerate() {
            if visible(i, j) {
                any = true;
                if x > max {
                    max = x;
                }
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let orow = out.row_mut(i);
        let mut total = T::zero();
        for (j, &x) in row.iter().enumerate() {
            if visible(i, j) {
                let e = (x - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        orow.iter_mut().for_each(|p| *p /= total);
    }
    out.check_finite("softmax_rows")?;
    Ok(out)
}

/// Stable `log Σ exp(row)` and the softmax of `row` written into `probs`.
pub fn softmax_into<T: Real>(row: &[T], probs: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        total += *p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    max + total.ln()
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log σ(z) = −softplus(−z)`, accurate at both tails.
#[inline]
pub fn log_sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let (c, k) = gelu_consts::<T>();
                let half = T::of(0.5);
                half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            }
            Activation::Relu => x.max(T::zero()),
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let (c, k) = gelu_consts::<T>();
                let half = T::of(0.5);
                let u = c * (x + k * x * x * x);
                let th = u.tanh();
                let du = c * (T::one() + T::of(3.0) * k * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

// tanh approximation constants: sqrt(2/π) and 0.044715
fn gelu_consts<T: Real>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_products() {
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let z = matmul(&t(&[&[1.0, 0.0]]), &t(&[&[0.0], &[5.0]])).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let p = matmul(&m, &t(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
        assert_eq!(p.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = t(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = t(&[&[2.0, 1.0, 0.0], &[-1.0, 0.5, 3.0]]);
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &b.transpose()).unwrap());
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&a.transpose(), &b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0, 0.0]]), None).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        let s = softmax_rows(&t(&[&[3.0, 100.0]]), Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = softmax_rows(&t(&[&[1.0, 2.0]]), None).unwrap();
        assert!((s.at(0, 0) - 0.26894).abs() < 1e-5);
        assert!((s.at(0, 1) - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mask = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        let err = softmax_rows(&Tensor::<f64>::zeros(&[2, 2]), Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn log_sigmoid_tails() {
        assert!((log_sigmoid(40.0_f64) + 4.248354255291589e-18).abs() < 1e-30);
        assert!((log_sigmoid(-40.0_f64) + 40.0).abs() < 1e-12);
        assert!((sigmoid(8.0_f64) - 0.9996646498695336).abs() < 1e-15);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        for act in [Activation::Silu, Activation::Gelu, Activation::Relu] {
            for &x in &[-2.3_f64, -0.4, 0.3, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-7, "{act:?} at {x}");
            }
        }
    }
}
