pub mod cli;
pub mod datagen;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod labels;
pub mod losses;
pub mod networks;
pub mod pipeline;
pub mod posenc;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE};
