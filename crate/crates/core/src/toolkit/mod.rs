//! Data plumbing and the command-line surface.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod synth;
pub mod wav;

pub use config::{parse_key_values, RunConfig};
pub use dataset::{load_training_tracks, read_manifest, write_manifest, ManifestRow, StemsLayout};
pub use pipeline::{separate_with_checkpoint, separate_with_model};
pub use synth::{synth_track, SynthSpec, Track};
pub use wav::{read_wav, write_wav, Audio};
