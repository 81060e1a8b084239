//! Function-valued tasks: Gaussian-process samples, sparse observation noise, context and
//! target splits, and the exact posterior used as a reference.

mod kernel;
mod noise;
mod oracle;
mod task;

pub use kernel::{
    cross_gram, gram_matrix, jittered_cholesky, sample_function, sample_function_with_jitter,
    sample_kernel_params, KernelFamily, KernelParams, KernelSpec, UniformRange, JITTER_MAX,
    JITTER_START,
};
pub use noise::{inject_noise, noise_count, round_half_even, NoiseSpec};
pub use oracle::{gp_posterior_oracle, mvn_log_pdf, GpPosterior};
pub use task::{
    apply_noise, make_task, Phase, PointSet, Setup, Task, TaskBatch, TaskConfig, TASK_DUMP_VERSION,
};
