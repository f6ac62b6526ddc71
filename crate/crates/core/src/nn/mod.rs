//! Minimal differentiable classifier substrate.

mod loss;
mod model;
mod optim;

pub use loss::{
    backward, cross_entropy, cross_entropy_rows, entropy, row_entropy, value_and_backward,
    LossKind, LossSpec, LossTerm, PROB_FLOOR,
};
pub use model::{
    argmax, predictions, softmax, softmax_backward, Activation, Gradients, Layer, LayerGrads,
    Model, ParamGrads, Trace,
};
pub use optim::{optimize_step, OptimState, DEFAULT_LEARNING_RATE};
