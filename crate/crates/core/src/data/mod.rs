//! ICBHI-format data ingestion: annotation and file-name parsing, cycle
//! extraction, the multi-label codec, patient-disjoint splits, and
//! synthetic cycles for dataset-free runs.

mod annotation;
mod labels;
mod manifest;
mod recording;
mod synth;

pub use annotation::{parse_annotation_file, CycleAnnotation};
pub use labels::{class_from_flags, flags_from_class, CycleClass, LabelVector};
pub use manifest::{
    collect_cycles, load_cycles, parse_split_file, scan_dataset_dir, split_patients, ClassCounts,
    CycleRef, DatasetManifest, ManifestEntry, ManifestSummary, RecordingFiles, Split, SplitMode,
    SplitSummary, MANIFEST_FILE, SUMMARY_FILE,
};
pub use recording::{
    extract_cycles, parse_recording_filename, read_wav, write_wav, BreathCycle, RecordingMeta,
    END_TOLERANCE_S,
};
pub(crate) use synth::stream_rng;
pub use synth::{
    synth_cycle, synthetic_meta, write_synth_dataset, Click, SynthDataset, SynthDatasetConfig,
    SynthRecipe, SPLIT_FILE, SYNTH_AUDIO_DIR,
};
