use super::backward::grad;
use super::tensor::Tensor;
use super::AutodiffError;

/// Compares the analytic gradient of a scalar function against central
/// differences and returns the largest relative error over components:
/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn check_gradient<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>, AutodiffError>,
{
    let x = x.detach().requires_grad_(true);
    let y = f(&x)?;
    let value = y.item()?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { op: "check_gradient" });
    }
    let analytic = grad(&y, &[&x], false)?.remove(0);
    let numeric = central_differences(&f, &x, step)?;
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
        .fold(0.0, f64::max))
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn central_differences<F>(f: &F, x: &Tensor<f64>, step: f64) -> Result<Vec<f64>, AutodiffError>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>, AutodiffError>,
{
    let base = x.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<f64, AutodiffError> {
            let mut shifted = base.clone();
            shifted[i] += delta;
            let v = f(&Tensor::from_vec(x.shape(), shifted)?)?.item()?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(AutodiffError::NonFinite { op: "check_gradient" })
            }
        };
        let plus = eval(step)?;
        let minus = eval(-step)?;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}
