//! Two-phase optimization (base pretraining, adapter fine-tuning), the
//! gradient check and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod partition;
pub mod sampling;
pub mod train;

pub use checkpoint::{load_checkpoint, params_digest, save_checkpoint, subset_digest};
pub use gradcheck::{grad_check, tiny_setup, GRADCHECK_SEED, GradCheckReport, TensorCheck};
pub use optim::AdamW;
pub use partition::{classify, partition_params, Group, ParamPartition, Phase};
pub use sampling::{load_sequences, sample_pair, LoadedSequence, SampleConfig};
pub use train::{finetune, pretrain_base, train_loop, FinetuneReport, TrainConfig, TrainReport};
