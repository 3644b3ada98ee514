//! Desk-scale multi-modal molecular understanding.
//!
//! The pipeline runs end to end on one CPU core: SMILES strings are parsed
//! into molecular graphs, encoded by a character-level transformer and a
//! message-passing graph network, fused with a projected Morgan fingerprint
//! into a single soft token, and fed to a small frozen decoder language model
//! that is pre-trained on a multi-task instruction dataset and adapted to
//! downstream tasks with LoRA.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`smiles`] — parsing, writing, randomization, canonicalization
//! * [`molgraph`] — graph model, node features, fingerprints, descriptors
//! * [`tensor`] — dense f32 tensors with reverse-mode differentiation
//! * [`model`] — encoders, fusion head, decoder, LoRA adapters
//! * [`data`] — tokenizer, synthetic corpus, instruction datasets
//! * [`train`] — AdamW, schedules, training loops, checkpoints
//! * [`eval`] — BLEU/ROUGE/METEOR-lite, RMSE, accuracy/F1, answer parsing

pub mod data;
pub mod eval;
pub mod model;
pub mod molgraph;
pub mod rng;
pub mod smiles;
pub mod tensor;
pub mod train;
