//! Distribution descriptors and their samplers.

use super::rng::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    Gamma { shape: f64, scale: f64 },
    Beta { a: f64, b: f64 },
    Dirichlet(Vec<f64>),
    InverseGamma { shape: f64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Draw {
    pub fn scalar(&self) -> f64 {
        match self {
            Draw::Scalar(v) => *v,
            Draw::Vector(v) => v[0],
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        match self {
            Draw::Scalar(v) => vec![v],
            Draw::Vector(v) => v,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        match self {
            Dist::Uniform { lo, hi } => {
                if lo.is_finite() && hi.is_finite() && lo <= hi {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("uniform bounds [{lo}, {hi}]")))
                }
            }
            Dist::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd.is_finite() && *sd >= 0.0) {
                    Err(Error::Domain(format!("normal({mean}, {sd})")))
                } else {
                    Ok(())
                }
            }
            Dist::Gamma { shape, scale } | Dist::InverseGamma { shape, scale } => {
                positive("shape", *shape)?;
                positive("scale", *scale)
            }
            Dist::Beta { a, b } => {
                positive("beta a", *a)?;
                positive("beta b", *b)
            }
            Dist::Dirichlet(alpha) => {
                if alpha.is_empty() {
                    return Err(Error::Domain("dirichlet needs at least one concentration".into()));
                }
                alpha.iter().try_for_each(|&a| positive("dirichlet concentration", a))
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<Draw> {
        self.validate()?;
        Ok(match self {
            Dist::Dirichlet(alpha) => Draw::Vector(dirichlet(alpha, rng)),
            other => Draw::Scalar(other.sample_scalar_unchecked(rng)),
        })
    }

    pub fn sample_scalar(&self, rng: &mut RngStream) -> Result<f64> {
        self.validate()?;
        if let Dist::Dirichlet(_) = self {
            return Err(Error::Domain("dirichlet draws are vectors".into()));
        }
        Ok(self.sample_scalar_unchecked(rng))
    }

    fn sample_scalar_unchecked(&self, rng: &mut RngStream) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => rng.uniform_range(lo, hi),
            Dist::Normal { mean, sd } => mean + sd * rng.normal(),
            Dist::Gamma { shape, scale } => rng.log_gamma(shape).exp() * scale,
            // 1/Gamma(shape, rate = scale)
            Dist::InverseGamma { shape, scale } => scale * (-rng.log_gamma(shape)).exp(),
            Dist::Beta { a, b } => beta(a, b, rng),
            Dist::Dirichlet(_) => unreachable!("vector distribution"),
        }
    }
}

/// Beta draw as `Ga / (Ga + Gb)`, normalized in log space.
pub(crate) fn beta(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    let la = rng.log_gamma(a);
    let lb = rng.log_gamma(b);
    let m = la.max(lb);
    let ea = (la - m).exp();
    let eb = (lb - m).exp();
    ea / (ea + eb)
}

pub(crate) fn dirichlet(alpha: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| rng.log_gamma(a)).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of(d: &Dist, n: usize, seed: u64) -> f64 {
        let mut rng = RngStream::new(seed);
        (0..n).map(|_| d.sample_scalar(&mut rng).unwrap()).sum::<f64>() / n as f64
    }

    #[test]
    fn dirichlet_uniform_means() {
        let d = Dist::Dirichlet(vec![1.0; 3]);
        let mut rng = RngStream::new(5);
        let mut acc = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let v = d.sample(&mut rng).unwrap().into_vec();
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..3 {
                acc[k] += v[k];
            }
        }
        for a in acc {
            assert!((a / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn symmetric_beta_mean_half() {
        for a in [0.01, 0.1, 0.5, 2.0] {
            let m = mean_of(&Dist::Beta { a, b: a }, 100_000, 9);
            assert!((m - 0.5).abs() < 0.01, "a={a}: {m}");
        }
    }

    #[test]
    fn inverse_gamma_mean() {
        let m = mean_of(&Dist::InverseGamma { shape: 3.0, scale: 1.0 }, 100_000, 3);
        assert!((m - 0.5).abs() < 0.02, "{m}");
    }

    #[test]
    fn gamma_moments() {
        let n = 200_000;
        let mut rng = RngStream::new(8);
        for shape in [0.3, 1.0, 4.5] {
            let d = Dist::Gamma { shape, scale: 2.0 };
            let xs: Vec<f64> = (0..n).map(|_| d.sample_scalar(&mut rng).unwrap()).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean / (2.0 * shape) - 1.0).abs() < 0.02, "shape {shape} mean {mean}");
            assert!((var / (4.0 * shape) - 1.0).abs() < 0.05, "shape {shape} var {var}");
        }
    }

    #[test]
    fn tiny_shapes_never_produce_nan() {
        let mut rng = RngStream::new(1);
        let d = Dist::Dirichlet(vec![0.01; 3]);
        let b = Dist::Beta { a: 0.01, b: 0.01 };
        for _ in 0..20_000 {
            assert!(d.sample(&mut rng).unwrap().into_vec().iter().all(|v| v.is_finite()));
            assert!(b.sample_scalar(&mut rng).unwrap().is_finite());
        }
    }

    #[test]
    fn invalid_parameters_are_domain_errors() {
        let mut rng = RngStream::new(0);
        for d in [
            Dist::Beta { a: 0.0, b: 1.0 },
            Dist::Dirichlet(vec![1.0, -1.0]),
            Dist::InverseGamma { shape: 3.0, scale: 0.0 },
            Dist::Gamma { shape: f64::NAN, scale: 1.0 },
        ] {
            assert!(matches!(d.sample(&mut rng), Err(Error::Domain(_))));
        }
    }
}
