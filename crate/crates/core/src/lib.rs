//! Posterior-predictive training of implicit posterior models.
//!
//! A *posterior model* (a hypernetwork) turns latent noise, and optionally
//! the current input, into parameter vectors θ for a stateless *primary
//! model*. The posterior is fitted by gradient descent on a Monte-Carlo
//! estimate of the posterior predictive likelihood of the training data.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod likelihood;
pub mod posterior;
pub mod primary;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use datasets::{RegressionDataset, Standardizer, WindowedSeries};
pub use error::{Error, Result};
pub use evaluation::{sample_predictive, ForecastMetrics, Modality, PredictiveFan};
pub use likelihood::{mc_predictive_loss, Likelihood, LossMode};
pub use posterior::{
    compose_per_layer, ConditionalPosterior, HypernetArch, InitSpec, LatentBase, LatentSpec, MdnArch,
    MdnPosterior, Param, PerLayerPosterior, PosteriorModel, UnconditionedPosterior,
};
pub use primary::{
    Activation, Grouping, LinearModel, MlpModel, NBeatsConfig, NBeatsModel, PrimaryModel, ThetaBatch,
    ThetaLayout,
};
pub use tensor::Tensor;
pub use trainer::{train, EarlyStopping, Optimizer, TrainConfig, TrainReport};
