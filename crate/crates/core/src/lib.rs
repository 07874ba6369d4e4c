//! Desk-scale adversarial-training laboratory: tape-based autodiff with
//! second-order support, small classifiers, l-infinity attacks, input
//! loss-landscape diagnostics, logit-consistency regularization, and a
//! deterministic SGD training loop.

pub mod attack;
pub mod data;
pub mod error;
pub mod landscape;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use attack::{AttackMethod, AttackSpec, InitMode, NamedAttack, Perturbation};
pub use data::{Dataset, Split};
pub use error::{AttackError, DataError, MetricError, TensorError, TrainError};
pub use landscape::{LandscapeReport, MetricOptions, Spectrum};
pub use model::{init_model, Activation, Model, ModelSpec};
pub use objective::WeightScheme;
pub use tensor::{HvpMode, Tape, Tensor, Var};
pub use train::{
    evaluate, lr_at, run_experiment, sgd_step, train_epoch, EvalResult, MetricsConfig, MetricsRow,
    OptimizerState, RunResult, Scheme, SwaState, TrainPlan, TrainState,
};
