//! Nighttime temperature and human sleep.
//!
//! The crate covers the whole analysis chain:
//!
//! - [`sleep_ingest`]: minute-epoch sleep/wake streams to nightly records and inclusion filters
//! - [`weather_link`]: station/grid weather exposures, 1981–2010 climate normals, heat index
//! - [`panel_engine`]: multi-way fixed-effects OLS with cluster-robust (CR1) covariance
//! - [`response_models`]: design matrices for the linear, binned, interacted and anomaly specifications
//! - [`projection`]: linear-spline dose response and annual sleep-loss projection on climate grids
//! - [`synth`]: seeded synthetic worlds with a known dose response, used to validate the estimators
//! - [`plot`]: standalone SVG rendering of response curves and loss maps

pub mod error;
pub mod geo;
pub mod io;
pub mod panel_engine;
pub mod plot;
pub mod projection;
pub mod response_models;
pub mod sleep_ingest;
pub mod synth;
pub mod weather_link;

pub use error::{Error, Result};
