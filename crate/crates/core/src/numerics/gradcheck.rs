use crate::error::{dim_err, Error, Result};

pub const FD_STEP: f64 = 1e-6;

/// Gradients within this many multiples of the finite-difference roundoff
/// `ε·(1 + |loss|)/h` are compared on the absolute scale.
pub const ROUNDOFF_MARGIN: f64 = 1e5;

/// Central-difference check of an analytic gradient.
///
/// `loss_fn` maps parameters to `(loss, analytic gradient)`. Returns the
/// maximum over coordinates of `|a − n| / max(|a| + |n|, 1e−8, floor)`, where
/// `floor = ROUNDOFF_MARGIN · ε · (1 + |loss|) / h`.
pub fn gradient_check<F>(mut loss_fn: F, params: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} at the check point")));
    }
    if analytic.len() != params.len() {
        return Err(dim_err(format!("{} gradient entries for {} params", analytic.len(), params.len())));
    }
    let floor = (ROUNDOFF_MARGIN * f64::EPSILON * (1.0 + loss.abs()) / FD_STEP).max(1e-8);
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let (up, _) = loss_fn(&p)?;
        p[i] = orig - FD_STEP;
        let (down, _) = loss_fn(&p)?;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("loss non-finite when perturbing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
