//! Dataset manifests, waveform preprocessing, the feature-stack store and
//! the synthetic dataset generator.

pub mod manifest;
pub mod store;
pub mod synth;
pub mod wave;

pub use manifest::{read_manifest, write_manifest, Manifest, Sample, Split};
pub use store::{
    read_feature_stack, read_index, write_feature_stack, write_index, FeatureProvider,
    FeatureStack, IndexEntry, PrecomputedProvider,
};
pub use synth::{SynthSpec, SyntheticDataset, SyntheticProvider};
pub use wave::{expected_frames, peak_normalize, read_wav_mono, write_wav_mono, PeakNormalized};
