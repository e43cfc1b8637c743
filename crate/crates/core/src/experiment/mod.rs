//! Config-driven experiment sweeps, result tables and plots.

mod report;
mod run;
mod spec;
pub mod svg;
mod table;

pub use report::{
    crossover_ranks, median, medians, plots, report, write_plots, write_report, Report, REPORT_FILE,
};
pub use run::{
    build_instance, run, run_with_threads, write_outputs, Instance, Manifest, RunOutput,
    EIGENVALUES_FILE, MANIFEST_FILE, RESULTS_FILE,
};
pub use spec::{ExperimentSpec, ProblemSpec, SyntheticSpec};
pub use table::{read_rows, write_rows, EigenRow, ResultRow, ResultTable, RESULT_SCHEMA_VERSION};
