//! Style- and latent-guided GAN for facial makeup transfer and removal.

pub mod autograd;
pub mod config;
pub mod dataset;
pub mod domain;
pub mod fixtures;
pub mod histogram;
pub mod inference;
pub mod losses;
pub mod networks;
pub mod training;
