pub mod autograd;
pub mod bpe;
pub mod error;
pub mod style;
pub mod tensor;

pub use bpe::{special, train_bpe, MergeTable, TokenSeq};
pub use error::{Error, Result};
pub use style::{Direction, StyleLabel};
pub mod synth;
pub mod corpus;
pub mod model;
pub mod params;
pub(crate) mod transformer;
pub mod optim;
pub mod discriminator;
pub mod objectives;
pub mod decoding;
pub mod evaluation;
pub mod checkpoint;
pub mod config;
pub mod trainer;
pub mod cli;
