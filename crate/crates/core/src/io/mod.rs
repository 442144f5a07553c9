//! Checkpoint files and experiment reports.

mod checkpoint;
mod report;

pub use checkpoint::{
    decode_checkpoint, decode_manifest, encode_checkpoint, load_checkpoint, save_checkpoint,
    Manifest, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use report::{
    emit_report, emit_sweep, format_record, read_report, sidecar_path, ReportRow, REPORT_HEADER,
    SWEEP_HEADER,
};
