//! Corpora: records, serialization, the synthetic generator and the frame-level pipeline.

mod frames;
mod jsonl;
mod pipeline;
mod record;
mod synth;

pub use frames::{frame_targets, FRAME_DIM};
pub use jsonl::{load_jsonl, save_jsonl};
pub use pipeline::{duration_from_alignment, f0_pipeline, ingest, interpolate_log_f0, speaker_log_f0_means};
pub use record::{FrameRecord, UtteranceRecord};
pub use synth::{
    gen_corpus, oracle_cell_std, oracle_conditional_mean, oracle_sample, round_duration, CellLaw, Component, Corpus,
    SyntheticSpec,
};
