//! Support code for the `spreadqp` command-line tool.

pub mod plot;

pub use plot::{emit_plots, Trace};
