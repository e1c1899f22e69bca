pub mod camera;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod loss;
pub mod medium;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod trainer;
