//! The trainable classifier head and its objective.

mod checkpoint;
mod loss;
mod mlp;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use loss::{
    loss_id, loss_ood, pairwise_softmax, total_loss, ClassWeights, NodeProbabilities, PROB_FLOOR,
};
pub use mlp::{Gradient, HeadParameters, Layer};
pub use train::{gradient, leaf_targets, mean_loss, train, EpochLog, TrainConfig, TrainLog};

use crate::error::Result;
use crate::hierarchy::Hierarchy;
use crate::scalar::Scalar;

/// Forward pass followed by the sibling softmax.
pub fn node_probabilities<T: Scalar>(
    params: &HeadParameters<T>,
    h: &Hierarchy<T>,
    x: &[T],
) -> Result<NodeProbabilities<T>> {
    pairwise_softmax(&params.forward(x)?, h)
}
