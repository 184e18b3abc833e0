//! Objective scoring and throughput measurement.

mod bench;
mod estoi;
mod score;
mod snr;

pub use bench::{
    bench_inputs, default_lock_path, enhance_batch, measure_rtf, measure_train_step, parse_lengths, BenchConfig, BenchLock,
    BenchReport, RtfRow, Timing,
};
pub use estoi::{estoi, resample_to_metric_rate, METRIC_RATE};
pub use score::{
    identity, load_eval_manifest, oracle_psm, score_items, synthetic_eval_set, EvalItem, ExternalScorer, ItemScore,
    ScoreTable, TABLE_SNRS,
};
pub use snr::{snr_db, SNR_CAP_DB};
