//! Evaluation: the importance-sampled target log-likelihood, experiment cells and
//! sweeps, the results store with seed aggregation, and plot export.

mod experiment;
mod export;
mod likelihood;
mod results;

pub use experiment::{
    derive_seed, refine_grid, select_weight, Cell, ModelKind, ModelSpec, Runner, Split, TrainKey,
    Trained, TuneResult, ORACLE_LABEL,
};
pub use export::{export_figure, FIGURES};
pub use likelihood::{
    evaluate_batches, importance_estimate, logsumexp, oracle_task_log_likelihoods,
    target_log_likelihood, task_log_likelihoods, MAX_ROWS, SAMPLE_CHUNK,
};
pub use results::{
    aggregate, cell_key, Aggregate, EvalResult, ResultRow, ResultsStore, CSV_FILE, INDEX_FILE,
};
