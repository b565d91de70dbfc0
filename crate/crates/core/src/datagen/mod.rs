//! Synthetic paired-data generation: procedural scenes, rotated views,
//! OCR-based consistency filtering, dataset IO and mixed sampling.

pub mod dataset;
pub mod filter;
pub mod glyphs;
pub mod ocr;
pub mod prompts;
pub mod sampler;
pub mod scene;

pub use dataset::{
    build_generic_dataset, build_texting_dataset, generate, validate_dataset, validate_records, DatagenParams, Dataset,
    DatasetRecord, Manifest, PipelineStats, RecordMeta, SourceDataset,
};
pub use filter::{filter_pair, FilterDecision, FilterReason};
pub use glyphs::GlyphAlphabet;
pub use ocr::{ocr, OcrReading};
pub use prompts::{color_name, neutral_tokens, tokenize, PromptTemplate};
pub use sampler::MixedSampler;
pub use scene::{render_scene, synthesize_view, Pose, Rgb, SceneSpec, ShapeKind};
