//! Data ingestion, checkpoints and metrics.

pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod tokenizer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use dataset::{parse_tsv, read_tsv, write_tsv, Dataset, Example, RawRow, TaskData, TaskFiles, TaskSpec};
pub use metrics::{
    eval_metric, read_ndjson, to_ndjson, ConfigDims, EvalValue, LossComponents, MetricKind, MetricsLog, MetricsRecord,
    RecordKind, METRICS_SCHEMA_VERSION,
};
pub use tokenizer::{split_words, Encoding, Vocab};
