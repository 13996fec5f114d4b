use super::{grad, no_grad, Result, Tensor, TensorError};

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `h`.
///
/// Returns `max_i |g_ad - g_fd| / (|g_fd| + 1e-8)`. The closure receives a
/// tracked tensor and must return a one-element tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = x.requires_grad();
    let y = f(&leaf)?;
    if !y.all_finite() {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    let analytic = grad(&y, &[leaf], false)?.remove(0);

    let base = x.to_vec();
    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(v, x.shape())?;
        let out = no_grad(|| f(&t))?;
        if out.numel() != 1 || !out.all_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_check" });
        }
        Ok(out.item())
    };
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
