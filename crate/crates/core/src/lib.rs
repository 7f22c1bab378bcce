//! Attention-based bidirectional recurrent models for predicting the
//! diagnosis categories of a patient's next visit from their coded visit
//! history, together with a synthetic corpus generator, training and
//! evaluation loops, and interpretation tools.

pub mod attention;
pub mod ehr_data;
pub mod error;
pub mod interpret;
pub mod model;
pub mod nn_core;
pub mod recurrent;
pub mod synth_gen;
pub mod train_eval;

pub use error::{Error, Result};

pub use attention::{AttentionKind, AttentionParams};
pub use ehr_data::{CodedSequenceDataset, EncodedPatient, PatientRecord, SplitSpec, Visit, Vocabulary};
pub use interpret::{AttentionTrace, DimensionReport};
pub use model::{CausalityMode, Model, ModelConfig, PredictionRecord, Variant};
pub use nn_core::{ParamStore, Tape, Tensor};
pub use synth_gen::{CountSpec, GeneratorConfig, PlantedRule};
pub use train_eval::{EpochRecord, EvalReport, TrainConfig};
