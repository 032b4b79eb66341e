pub mod encoder;
pub mod harness;
pub mod hash;
pub mod inference;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod pgm;
pub mod scl;
pub mod segmenter;
