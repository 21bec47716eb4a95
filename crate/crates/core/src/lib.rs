pub mod baseline;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod imaging;
pub mod index;
pub mod numerics;
pub mod pipeline;
pub mod trainer;
