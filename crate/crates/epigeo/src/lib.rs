//! File formats, frame decoding and the command-line driver for
//! [`epigeo_core`].

pub mod cli;
pub mod config;
pub mod formats;
pub mod io;
pub mod pipeline;
