//! Similarity-preserving and consistency losses on a minibatch, with analytic
//! gradients w.r.t. the continuous outputs `H`.

use crate::encoder::CodeMatrix;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Added to vector norms inside the losses so collapsed `H` rows stay finite.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_h: Matrix,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Guarded cosine of two rows plus its gradient w.r.t. each row.
struct PairCosine {
    value: f64,
}

impl PairCosine {
    fn new(a: &[f64], b: &[f64], na: f64, nb: f64) -> Self {
        Self {
            value: dot(a, b) / ((na + NORM_GUARD) * (nb + NORM_GUARD)),
        }
    }

    /// Adds `scale · ∂cos/∂a` into `out`.
    fn accumulate_grad(&self, a: &[f64], b: &[f64], na: f64, nb: f64, scale: f64, out: &mut [f64]) {
        let ga = na + NORM_GUARD;
        let gb = nb + NORM_GUARD;
        let cross = scale / (ga * gb);
        // d(ga)/da = a/‖a‖, absent when a = 0
        let radial = if na > 0.0 { scale * self.value / (ga * na) } else { 0.0 };
        for ((o, &bi), &ai) in out.iter_mut().zip(b).zip(a) {
            *o += cross * bi - radial * ai;
        }
    }
}

fn check_batch(h: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if h.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?}", h.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Similarity loss with the code side given as a real matrix.
///
/// Returns `(value, ∂L/∂H, ∂L/∂B)`, treating `H` and `B` as independent
/// variables. [`sim_loss`] sums the two gradients (straight-through).
pub fn sim_loss_parts(h: &Matrix, b: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    check_batch(h, b, "sim_loss")?;
    let n = h.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "sim_loss needs a batch of at least 2, got {n}"
        )));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let h_norms: Vec<f64> = (0..n).map(|i| norm(h.row(i))).collect();
    let b_norms: Vec<f64> = (0..n).map(|i| norm(b.row(i))).collect();
    let mut grad_h = Matrix::zeros(n, h.cols());
    let mut grad_b = Matrix::zeros(n, b.cols());
    let mut value = 0.0;
    for m in 0..n {
        for q in m + 1..n {
            let sh = PairCosine::new(h.row(m), h.row(q), h_norms[m], h_norms[q]);
            let sb = PairCosine::new(b.row(m), b.row(q), b_norms[m], b_norms[q]);
            let diff = sh.value - sb.value;
            value += diff * diff;
            let s = 2.0 * diff / pairs;
            sh.accumulate_grad(h.row(m), h.row(q), h_norms[m], h_norms[q], s, grad_h.row_mut(m));
            sh.accumulate_grad(h.row(q), h.row(m), h_norms[q], h_norms[m], s, grad_h.row_mut(q));
            sb.accumulate_grad(b.row(m), b.row(q), b_norms[m], b_norms[q], -s, grad_b.row_mut(m));
            sb.accumulate_grad(b.row(q), b.row(m), b_norms[q], b_norms[m], -s, grad_b.row_mut(q));
        }
    }
    Ok((value / pairs, grad_h, grad_b))
}

/// Mean over all unordered in-batch pairs of `(cos(H_m,H_n) − cos(B_m,B_n))²`.
/// The gradient flows through both cosines; the code side reaches `H` by the
/// straight-through rule.
pub fn sim_loss(h: &Matrix, codes: &CodeMatrix) -> Result<LossValue> {
    let b = codes.to_matrix();
    let (value, mut grad_h, grad_b) = sim_loss_parts(h, &b)?;
    grad_h.add_scaled(&grad_b, 1.0)?;
    Ok(LossValue { value, grad_h })
}

/// Mean over samples of `‖H_n − B_n‖²`, codes held constant.
pub fn reg_loss_real(h: &Matrix, b: &Matrix) -> Result<LossValue> {
    check_batch(h, b, "reg_loss")?;
    let n = h.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut grad_h = h.clone();
    grad_h.add_scaled(b, -1.0)?;
    let value = grad_h.as_slice().iter().map(|d| d * d).sum::<f64>() / n as f64;
    grad_h.scale(2.0 / n as f64);
    Ok(LossValue { value, grad_h })
}

pub fn reg_loss(h: &Matrix, codes: &CodeMatrix) -> Result<LossValue> {
    reg_loss_real(h, &codes.to_matrix())
}

/// `sim_loss + alpha · reg_loss`.
pub fn combined_loss(h: &Matrix, codes: &CodeMatrix, alpha: f64) -> Result<(LossValue, f64, f64)> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let sim = sim_loss(h, codes)?;
    let reg = reg_loss(h, codes)?;
    let mut grad_h = sim.grad_h;
    grad_h.add_scaled(&reg.grad_h, alpha)?;
    Ok((
        LossValue {
            value: sim.value + alpha * reg.value,
            grad_h,
        },
        sim.value,
        reg.value,
    ))
}
