//! Audio input and the log-Mel frontend.

pub mod cache;
pub mod mel;
pub mod wav;

pub use cache::{
    cache_entry_name, cache_features, read_features, write_features, CacheSummary, CACHE_EXTENSION,
};
pub use mel::{
    frame_count, hz_to_mel, log_mel, mel_centers, mel_filterbank, mel_to_hz, FeatureConfig,
    LogMelFeatures, MeanNorm, MelFrontend,
};
pub use wav::{read_wav, write_wav, AudioClip};
