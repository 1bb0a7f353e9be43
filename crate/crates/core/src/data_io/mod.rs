//! Tensor files, datasets, normalization and the synthetic generator.

pub mod dataset;
pub mod etns;
pub mod synth;

pub use dataset::{
    load_record, load_split, read_norm_stats, split_dataset, split_records, validation_count,
    write_manifest, write_norm_stats, write_records, DatasetManifest, GeneratorInfo, GridSpec,
    NormStats, RecordEntry, SampleRecord, Split,
};
pub use etns::{read_tensor, read_tensor_any, write_tensor, AnyTensor};
pub use synth::{generate_synthetic, write_synthetic, GenParams, SynthSpec};
