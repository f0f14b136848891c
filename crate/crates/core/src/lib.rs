//! One-shot detection of micro-events (center, duration, label) in
//! multichannel physiological signals.
//!
//! A window of signal is covered by a fixed grid of default events. A
//! convolutional network predicts, for every default, an offset of its
//! center and duration plus a class distribution. Training matches defaults
//! to annotated events and minimises a localisation plus classification
//! loss with hard negative mining. At inference, windows are tiled over a
//! recording, thresholded per label and merged with non-maximum suppression.

pub mod consensus;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod loss;
pub mod network;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use geometry::{DefaultGrid, Interval, MatchConfig, Matching};
pub use network::{DetectorModel, Mode, NetConfig, NetworkOutput};
pub use types::{Annotation, DatasetSplit, Event, Record, Sample};
