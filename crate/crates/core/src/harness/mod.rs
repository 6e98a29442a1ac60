//! Data generation, training, evaluation and benchmarking.

pub mod dataset;
pub mod eval;
pub mod optim;
pub mod synth;
pub mod train;

pub use dataset::{Dataset, Manifest};
pub use eval::{
    bench_attention, bench_csv, driftwatch, evaluate, evaluate_identity, toy_gradcheck, toy_problem, BenchRow,
    DriftSeries,
};
pub use optim::{clip_global_norm, AdamW, LrSchedule};
pub use synth::{generate, resolve_skeleton, MotionGenerator, SyntheticSpec};
pub use train::{train, EpochLog, Precision, TrainConfig, TrainOutcome};
