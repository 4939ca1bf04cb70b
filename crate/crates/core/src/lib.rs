//! Far-field speaker verification toolkit.
//!
//! The crate covers the whole verification chain at desk scale: WAV ingestion
//! and resampling ([`audio_io`]), log-Mel / MFCC front-ends ([`features`]),
//! energy and gradient-boosted VAD ([`vad`]), shoebox room simulation for
//! far-field augmentation ([`room_sim`]), ResNet speaker embeddings with global
//! statistics pooling ([`embed_net`]), cosine / PLDA scoring with enrollment
//! augmentation ([`backend`]) and detection metrics ([`eval`]).
//!
//! [`synth`] generates a deterministic toy corpus so the pipeline can be run
//! without any external data.

pub mod audio_io;
pub mod backend;
mod binio;
pub mod embed_net;
pub mod error;
pub mod eval;
pub mod features;
pub mod room_sim;
pub mod seed;
pub mod synth;
pub mod vad;

pub use audio_io::Waveform;
pub use backend::{Embedding, PldaModel};
pub use embed_net::{Model, NetworkConfig, TrainSchedule};
pub use error::{Error, Result};
pub use eval::{DetMetrics, Label, ScoreRecord, Trial};
pub use features::{FeatureKind, FeatureMatrix};
pub use room_sim::{Rir, RoomSpec};
pub use vad::{FrameMask, GvadModel};
