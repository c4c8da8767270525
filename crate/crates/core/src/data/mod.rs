//! Sensor series ingestion, windowing, normalization, splits and caching.

pub mod cache;
pub mod manifest;
pub mod series;
pub mod split;
pub mod synthetic;

pub use cache::{read_cache, write_cache};
pub use manifest::{load_csv, load_series, load_windowed, Column, DataFormat, Manifest};
pub use series::{
    normalize, sliding_window, sliding_window_by_subject, window_count, ChannelStats, SensorSeries, WindowedDataset,
};
pub use split::{split, Split, SplitSpec, SplitStrategy};
pub use synthetic::{generate_synthetic, SyntheticSpec};
