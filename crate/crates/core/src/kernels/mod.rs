//! Slice-level forward/backward kernels. Shape validation happens in the
//! callers; these functions assume consistent extents.

pub mod conv;
pub mod norm;
pub mod pool;
