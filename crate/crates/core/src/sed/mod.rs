//! Sound event detection pipeline: synthetic data, losses, optimization,
//! post-processing and event metrics.

pub mod annotations;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod postprocess;
pub mod synth;
pub mod train;

pub use annotations::{format_annotations, parse_annotations, EventAnnotation, LabeledEvent};
pub use loss::bce_loss;
pub use metrics::{eb_counts, eb_f1, ib_counts, ib_f1, EventCounts, Prf};
pub use optim::{rampup, Adam};
pub use postprocess::{decode_events, median_filter};
pub use synth::{
    benchmark_split, labels_from_events, read_dataset, synth_dataset, write_dataset, Dataset, SyntheticSpec,
};
pub use train::{evaluate, metrics_csv, predict_events, train_loop, EpochRecord, EvalMetrics, TrainConfig};
