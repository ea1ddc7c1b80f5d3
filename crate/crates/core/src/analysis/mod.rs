//! Linear probes, rank correlation and weather regression trees.

mod probe;
mod stats;
mod tree;
mod weather;

pub use probe::{capture_layer, linear_probe, ols_fit, ols_predict, probe_layers, ProbeLayer, ProbeResult, MIN_PROBE_SAMPLES, OLS_RIDGE, PROBE_TRAIN_FRACTION};
pub use stats::{average_ranks, pearson, spearman};
pub use tree::{cart_fit, Node, RegressionTree, Table};
pub use weather::{
    group_by_farm_year, sample_per_field, sample_pixels, weather_attr_table, WeatherTable, DAYS_BEFORE_HARVEST, DEFAULT_PIXELS_PER_FIELD,
    TABLE_TRAIN_FRACTION, WEATHER_TABLE_FEATURES,
};
