//! Speech emotion recognition on spectrogram and MFCC inputs.
//!
//! The engine is built from six pieces:
//!
//! - [`audio`]: WAV ingestion, duration normalization and a seeded synthetic
//!   corpus generator used for desk-scale verification.
//! - [`dsp`]: STFT, mel filterbank, log-mel spectrograms, MFCCs and the
//!   on-disk feature cache.
//! - [`autograd`]: a small tape-based reverse-mode differentiation core with
//!   exactly the operations the network needs.
//! - [`model`]: the four-path parallel CNN with a classification head, an
//!   optional reconstruction decoder and center-loss supervision.
//! - [`train`]: Adadelta, session-held-out fold plans, the fit loop and
//!   cross-validation.
//! - [`analyze`]: embedding export, exact t-SNE and cluster compaction
//!   measurements.

pub mod analyze;
pub mod audio;
pub mod autograd;
pub mod dsp;
pub mod model;
pub mod rng;
pub mod train;
