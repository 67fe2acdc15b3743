use super::{Result, Tensor, TensorError};

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {h}")));
    }
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&Tensor::new(x.shape(), probe.clone())?)?;
        probe[i] = base[i] - h;
        let minus = f(&Tensor::new(x.shape(), probe.clone())?)?;
        probe[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_difference",
                node: i,
                scope: String::new(),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}
