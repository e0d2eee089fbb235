//! Spoken language understanding over multi-turn dialogs with an RNN
//! transducer conditioned on dialog-history context embeddings.

pub mod context;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod features;
pub mod nn;
pub mod slu;
pub mod training;
pub mod transducer;

pub use error::{Error, Result};
