//! On-disk formats: binary task and prediction files, JSON run reports.

pub mod report;
pub mod taskfile;

pub use report::{run_task, RunReport, TaskReport, TaskRun};
pub use taskfile::{read_task, write_task, PredictionMap, TaskBundle};
