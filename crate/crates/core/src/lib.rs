pub mod arch;
pub mod dataset;
pub mod gradcam;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod trainer;
