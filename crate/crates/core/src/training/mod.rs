//! Training toy transformers on in-context episodes.

mod backprop;
mod episodes;
mod train;

pub use backprop::{batch_loss, batch_loss_and_grad, target_logits};
pub use episodes::{sample_episode, Episode, EpisodeMix, EpisodeSource, MixEntry};
pub use train::{loss_csv, train, train_with, TrainOutcome, TrainSpec};
