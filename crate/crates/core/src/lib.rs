//! LSTM sequence models trained with exact backpropagation through time,
//! with sequence-autoencoder and language-model pretraining and supervised
//! fine-tuning on top.
//!
//! The crate is organized bottom-up:
//!
//! * [`numkernel`]: matrices, activations, softmax cross-entropy, SplitMix64 RNG
//! * [`textpipe`]: tokenization, vocabulary, corpus files
//! * [`lstmcore`]: LSTM forward / truncated backward, gradient clipping
//! * [`models`]: language model, sequence autoencoder, classifiers, row objectives
//! * [`train`]: dropout, SGD, training loop, early stopping, gradient checks
//! * [`checkpoint`]: binary checkpoints and weight transfer
//! * [`harness`]: experiment pipeline, synthetic task, reports

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod lstmcore;
pub mod models;
pub mod numkernel;
pub mod textpipe;
pub mod train;

pub use error::{Error, Result};
