//! Channel/spatial attention, Gaussian-weighted non-local attention, and the
//! grouped cascade that chains them over several rounds.

mod cbam;
mod gmw;
mod msglam;

pub use cbam::CbamBlock;
pub use gmw::{gaussian_similarity, GmwNonLocalBlock, Sigma};
pub use msglam::{GroupStep, MsGlamBlock, MsGlamParams};
