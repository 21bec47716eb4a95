use super::{NumericsError, Result, Scalar, Tensor};

pub const DEFAULT_LR: f64 = 1e-2;

/// Plain SGD: `p <- p - lr * grad(p)`, then zero the gradients.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(NumericsError::MissingGradient(i));
    }
    let lr = T::from_f64(lr);
    for p in params.iter_mut() {
        let g = p.grad().expect("checked above").to_vec();
        for (v, gi) in p.values_mut().iter_mut().zip(&g) {
            *v = *v - lr * *gi;
        }
        if !p.is_finite() {
            return Err(NumericsError::NonFinite("sgd_step"));
        }
        p.zero_grad();
    }
    Ok(())
}
