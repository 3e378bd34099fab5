//! Pipeline orchestration behind the `medform` binary: config resolution,
//! stage execution with completion records, and the results report.

pub mod config;
pub mod report;
pub mod stages;

pub use config::{apply_override, resolve_config, ConfigSource, EvalSection, KSpec, PathsConfig, RunConfig};
pub use report::{build_table, load_results, report, ReportRow, ReportTable};
pub use stages::{AlignSummary, CompletionRecord, Layout, PairedEmbeddings, Pipeline, ResultRecord, SslSummary, Stage, StageStatus};
