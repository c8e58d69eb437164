//! KPI computation and the four-case generalization protocol.

mod cases;
mod matrix;
mod metrics;

pub use cases::{run_case, CaseConfig, EvalReport, GeneralizationCase};
pub use matrix::{benchmark_matrix, render_csv, BenchmarkOutput, DatasetStore, MatrixRequest, PlotSeries};
pub use metrics::{nmse_db, nmse_sample, sample_metrics, sgcs, NmseAccumulator};
