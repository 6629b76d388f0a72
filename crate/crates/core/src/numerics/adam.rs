use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, step_size: f64) -> Self {
        AdamState {
            step: 0,
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected descent step, `params ← params − α·m̂/(√v̂ + ε)`.
    ///
    /// To ascend an objective, pass its negated gradient.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_at(params, grads, |i| i)
    }

    /// Step for a subset of coordinates: `params[j]` and `grads[j]` belong to
    /// accumulator slot `slot(j)`. All slots share one step counter.
    pub fn step_at(&mut self, params: &mut [f64], grads: &[f64], slot: impl Fn(usize) -> usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err(format!("adam: {} params vs {} grads", params.len(), grads.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("adam: non-finite gradient at coordinate {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (j, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let s = slot(j);
            if s >= self.m.len() {
                return Err(dim_err(format!("adam: slot {s} outside {} accumulators", self.m.len())));
            }
            let m = self.beta1 * self.m[s] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[s] + (1.0 - self.beta2) * g * g;
            self.m[s] = m;
            self.v[s] = v;
            let update = self.step_size * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            if update.is_finite() {
                *p -= update;
            }
        }
        Ok(())
    }
}
