//! Dataset indexing, balanced sampling, augmentation and the synthetic corpus.

pub mod augment;
pub mod batcher;
pub mod index;
pub mod manifest;
pub mod synth;

pub use augment::{augment_pair, splice, SpliceOffsets};
pub use batcher::{assemble_batch, minibatches, AugmentPolicy, Batch, FeatureStore};
pub use index::{
    check_disjoint, epoch_sampler, expand_channels, index_dataset, load_split, minority_classes,
    DatasetIndex, SceneExample, Split,
};
pub use manifest::{read_events, read_manifest, write_events, write_manifest, EventInterval, ManifestRow};
pub use synth::{render_clip, synth_corpus, EventKind, SynthClip, SynthConfig, SynthSummary};
