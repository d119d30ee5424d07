use crate::error::{Error, Result};
use crate::numkern::{Real, Tensor};

/// Rotates every `d_head`-wide block of `row` in place by the angles of `pos`.
///
/// Pairs are `(j, j + d_head/2)` with angle `pos·θ^(−2j/d_head)`.
pub(crate) fn rotate_row<T: Real>(row: &mut [T], pos: usize, d_head: usize, theta: f64, inverse: bool) {
    let half = d_head / 2;
    for j in 0..half {
        let angle = pos as f64 * theta.powf(-2.0 * j as f64 / d_head as f64);
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
        for block in row.chunks_exact_mut(d_head) {
            let (a, b) = (block[j], block[j + half]);
            block[j] = a * c - b * s;
            block[j + half] = a * s + b * c;
        }
    }
}

fn rotate<T: Real>(x: &Tensor<T>, positions: &[usize], d_head: usize, theta: f64, inverse: bool) -> Result<Tensor<T>> {
    if d_head % 2 != 0 {
        return Err(Error::Config(format!("d_head ({d_head}) must be even for rotary embeddings")));
    }
    if x.rows() != positions.len() || x.cols() % d_head != 0 {
        return Err(Error::dim("apply_rope", x.shape(), &[positions.len(), d_head]));
    }
    let mut out = x.clone();
    for (t, &pos) in positions.iter().enumerate() {
        rotate_row(out.row_mut(t), pos, d_head, theta, inverse);
    }
    Ok(out)
}

/// Rotary position embedding for query and key rows laid out as
/// `[T × n_heads·d_head]`. Keys leave here already rotated, so cached keys
/// never need re-rotation after neighbours are evicted.
pub fn apply_rope<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    positions: &[usize],
    d_head: usize,
    theta: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((
        rotate(q, positions, d_head, theta, false)?,
        rotate(k, positions, d_head, theta, false)?,
    ))
}

/// Inverse rotation; the adjoint of [`apply_rope`] used in the backward pass.
pub(crate) fn unrotate<T: Real>(x: &Tensor<T>, positions: &[usize], d_head: usize, theta: f64) -> Result<Tensor<T>> {
    rotate(x, positions, d_head, theta, true)
}
