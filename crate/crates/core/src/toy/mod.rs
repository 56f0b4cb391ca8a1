//! Self-contained toy training harness: datasets, low-rank adapter models,
//! a deterministic full-batch trainer, per-example gradient extraction and a
//! leave-one-out retraining oracle.

pub mod data;
pub mod model;
pub mod oracle;
pub mod train;

pub use data::{generate_dataset, ClusterTask, MarkovTask, Sample, Task, ToyDataset, ToyExample};
pub use model::{
    example_gradient, example_loss, example_losses, loss_hessian, mean_loss, per_example_gradients, perplexity,
    token_gradients, Matrix, ModelConfig, ToyModel,
};
pub use oracle::{leave_one_out, loo_oracle};
pub use train::{objective_and_grad, train, train_with_trace, TrainConfig, TrainTrace};
