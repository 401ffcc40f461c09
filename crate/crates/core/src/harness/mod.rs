// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy-scale studies: causal tracing on a fact-lookup model, DAS versus
//! linear probes on a planted-variable pronoun task, and activation
//! steering of a tiny story model. Sweeps run on [`crate::par`].

pub mod csv;
pub mod data;
pub mod localize;
pub mod steer;
pub mod trace;

use crate::error::Result;
use crate::model::{train_model, Model, ModelSchema, TrainConfig, TrainReport};

pub use data::{Dataset, FactData, PronounData, StoryData, Task};

/// Architecture used for each task's model.
pub fn default_schema(task: Task, vocab_size: usize) -> ModelSchema {
    match task {
        Task::FactLookup => ModelSchema::transformer(8, 64, 4, vocab_size, 8),
        Task::Pronoun => ModelSchema::transformer(4, 32, 2, vocab_size, 4),
        Task::Story => ModelSchema::transformer(2, 32, 2, vocab_size, 16),
    }
}

/// Training settings that reach the accuracy targets used by the studies.
pub fn default_train_config(task: Task, seed: u64) -> TrainConfig {
    let (steps, batch_size, lr) = match task {
        Task::FactLookup => (1500, 32, 1e-3),
        Task::Pronoun => (300, 32, 3e-3),
        Task::Story => (400, 32, 3e-3),
    };
    TrainConfig {
        steps,
        batch_size,
        lr,
        seed,
    }
}

/// Build and train the model for `data`.
pub fn train_task_model(data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let vocab = data.vocab();
    let schema = default_schema(data.task(), vocab.len());
    let examples = data.examples(&vocab)?;
    let init = Model::build_with_vocab(schema, vocab, cfg.seed)?;
    train_model(&init, &examples, cfg)
}
