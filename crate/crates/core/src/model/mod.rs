//! Network definitions.
//!
//! Parameters live in a [`ParamStore`]; every forward evaluation binds them
//! to a fresh tape through a [`Pass`].

pub mod hrnet;
pub mod layers;
pub mod lowres;
pub mod params;
pub mod recognizer;
pub mod seqhead;
pub mod unet;

pub use hrnet::{HrNet, HrNetConfig, HrNetTrace, ResolutionStream};
pub use layers::{he_init, Builder, BN_EPS};
pub use lowres::{LowRes, LowResConfig};
pub use params::{BufferId, ParamId, ParamStore, Pass, PassOutcome};
pub use recognizer::{BackboneKind, ModelConfig, Recognizer};
pub use seqhead::{ContextSequence, SeqHead, SeqHeadConfig, Sequence, VisualFeatureSequence};
pub use unet::{PyramidState, UNet, UNetConfig};
