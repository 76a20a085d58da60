pub mod config;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod fokker_planck;
pub mod io;
pub mod lp;
pub mod mfg;
pub mod oracle;
pub mod qvi;
pub mod report;
pub mod rng;
pub mod runner;
pub mod timedomain;

pub use error::{Error, Result};
