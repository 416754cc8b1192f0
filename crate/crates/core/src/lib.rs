pub mod covariates;
pub mod engine;
pub mod error;
pub mod exceptions;
pub mod ingest;
pub mod io;
pub mod matchlist;
pub mod model;
pub mod obligations;
pub mod offering;
pub mod params;
pub mod posttx;
pub mod rng;
pub mod time;
