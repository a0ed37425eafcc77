//! Self-supervised monocular visual odometry guided by ORB features, with
//! selective online adaptation at test time.

pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod networks;
pub mod orb;
pub mod soa;
pub mod synth;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use image::{to_grayscale, GrayImage, Image};
