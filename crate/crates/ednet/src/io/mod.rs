pub mod weights;
pub mod image;
pub mod scene;
