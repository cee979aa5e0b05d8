//! In-context segmentation: every segmentation task is posed as coloring the
//! query image the way an example image was colored.

pub mod data;
pub mod imageops;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod palette;
pub mod parallel;
pub mod protocol;
pub mod rng;
pub mod segmap;
pub mod train;
