pub mod binio;
pub mod camera;
pub mod error;
pub mod field;
pub mod geometry;
pub mod guidance;
pub mod imageio;
pub mod layout;
pub mod losses;
pub mod mesh;
pub mod optim;
pub mod raster;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
