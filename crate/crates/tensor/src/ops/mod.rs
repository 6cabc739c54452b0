mod conv;
mod elementwise;
mod norm;
mod pool;
mod resize;

pub use conv::Conv2dOptions;
pub use elementwise::{concat_channels, sum_all};
pub use norm::{BatchStats, NormMode};
pub use resize::resize_plane;
