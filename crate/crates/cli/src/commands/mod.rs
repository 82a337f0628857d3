pub mod bench;
pub mod infer;
pub mod learn;
pub mod memory;
pub mod misc;
