//! Volumetric segmentation toolkit: overlap losses with analytic gradients,
//! a dilated-pooling encoder-decoder trained from scratch, and boundary
//! distance metrics.

pub mod cli;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod theory;
pub mod volgrid;
pub mod train;
