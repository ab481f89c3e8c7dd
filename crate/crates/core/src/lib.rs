pub mod geom;
pub mod grid;
pub mod simnet;
pub mod timesync;
pub mod spatialcal;
pub mod spectral;
pub mod retarget;
pub mod records;
pub mod config;
pub mod pipeline;
