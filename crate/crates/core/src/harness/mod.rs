//! Configuration, file formats, parameter sweeps and the self-check suite.

mod config;
mod io;
mod pipeline;
mod sweep;
pub mod verify;

pub use config::{load_config, parse_config, InpaintKind, RunConfig};
pub use io::{
    format_f64, heatmap_csv, mask_csv, parse_validation_set, read_report, read_validation_set,
    to_json_string, write_heatmap_csv, write_report, write_validation_set,
};
pub use pipeline::Pipeline;
pub use sweep::{
    parse_range, run_sweep, sweep_csv, GridPoint, SweepGrid, SweepRow, DEFAULT_ALPHA_RANGE,
    DEFAULT_RHO_RANGE, DEFAULT_THETA_RANGE, SWEEP_CSV_HEADER,
};
pub use verify::{run_verify, CheckResult, VerifyReport};
