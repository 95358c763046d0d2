pub mod anomaly;
pub mod dtree;
pub mod error;
pub mod io;
pub mod labeler;
pub mod sampler;
pub mod timeline;
pub mod types;
pub mod config;
pub mod pipeline;
pub mod simgen;
pub mod report;
