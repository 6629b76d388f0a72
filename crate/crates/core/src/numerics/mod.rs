//! Numerical kernel shared by every other module: dense matrices, the
//! two-hidden-layer network family, optimizers, samplers and the classical
//! statistics used by the baselines.

pub mod adam;
pub mod gradcheck;
pub mod kmeans;
pub mod matrix;
pub mod mlp;
pub mod ols;
pub mod pca;
pub mod rng;
pub mod sample;
pub mod stats;

pub use adam::AdamState;
pub use gradcheck::gradient_check;
pub use kmeans::{adjusted_rand_index, kmeans, KMeans};
pub use matrix::{gemm, Matrix, Op};
pub use mlp::{mlp_backward, mlp_forward, MlpCache, MlpOutput, MlpParams, MlpSpec};
pub use ols::{ols_ttest, Coefficient, OlsFit};
pub use pca::{top_principal_components, Pca};
pub use rng::{RngPosition, RngStream};
pub use sample::{Dist, Draw};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
