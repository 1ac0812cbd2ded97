pub mod augment;
pub mod config;
pub mod gradcheck;
pub mod kitti;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod synthetic;
pub mod tensor;
pub mod train;
