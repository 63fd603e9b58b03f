//! Dataset manifests, frame loading, the training stream and the synthetic
//! ring-of-places benchmark.

pub mod manifest;
pub mod source;
pub mod stream;
pub mod synth;

pub use manifest::{DatasetManifest, EnvironmentSpec, FrameRecord, SequenceSpec, MANIFEST_FILE};
pub use source::{Dataset, DiskSource, FrameSource, MemorySource, Split};
pub use stream::{Stream, StreamEvent};
pub use synth::{generate_synthetic, SynthSpec, SyntheticDataset};
