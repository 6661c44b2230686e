//! Transformer encoder whose attention layers accept injected prefix slots.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod vocab;

pub use attention::{attend_with_prefix, LayerPrefixSlots, SlotVars};
pub use config::EncoderConfig;
pub use model::{EncoderModel, EncoderVars, TokenBatch};
pub use vocab::Vocab;
