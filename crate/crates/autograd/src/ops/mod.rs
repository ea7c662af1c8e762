pub(crate) mod conv;
mod elementwise;
mod linalg;
pub(crate) mod pool;
mod reduce;
pub(crate) mod resample;
mod shape;
