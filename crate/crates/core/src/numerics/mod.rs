//! Dense linear algebra, the MLP with batch norm, loss kernels and optimizers.

mod loss;
mod matrix;
mod mlp;
mod optim;

pub use loss::{
    categorical_kl, cross_entropy, divergence, gaussian_kl, log_softmax, median_bandwidths, mmd,
    softmax, DivergenceGrad, GaussianKlGrad, KlDirection, KlGrad, LossGrad, MmdGrad,
};
pub use matrix::DenseMatrix;
pub use mlp::{
    Activation, Architecture, BatchStats, BnState, Cotangents, Forward, ForwardTrace, LayerGrads,
    LinearLayer, MlpModel, ModelGrads, Mode, BN_EPSILON, BN_MOMENTUM,
};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};
