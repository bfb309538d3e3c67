//! Toy decoder-only transformer with optional shared attention projections.

pub mod config;
pub mod forward;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod train;

pub use config::{CoefficientPath, ToyConfig};
pub use forward::{
    attention_forward, batch_loss, capture_activations, forward_loss, logits, loss_and_gradients,
    mean_nll, perplexity, Activations,
};
pub use gradcheck::{default_check_config, gradient_check, GradCheckReport, GradCheckSettings};
pub use params::{BlockParams, ModelParams};
pub use tape::{GradientTape, Gradients, NodeId};
pub use train::{train, train_from, AdamW, MetricRow, TrainOutcome, TrainSettings};
