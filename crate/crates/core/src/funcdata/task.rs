//! Context/target tasks and the setup x phase noise placement.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernel::{
    sample_function_with_jitter, sample_kernel_params, KernelFamily, KernelParams, KernelSpec,
};
use super::noise::{inject_noise, NoiseSpec};
use crate::error::{Error, Result};

/// Which observations carry noise.
///
/// * `One`: clean training, noisy context at evaluation.
/// * `Two`: noisy context at training and evaluation, clean training targets.
/// * `Three`: noisy context and targets at training, noisy context at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setup {
    One,
    Two,
    Three,
}

impl TryFrom<u8> for Setup {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Setup::One),
            2 => Ok(Setup::Two),
            3 => Ok(Setup::Three),
            other => Err(format!("setup must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Setup> for u8 {
    fn from(s: Setup) -> u8 {
        match s {
            Setup::One => 1,
            Setup::Two => 2,
            Setup::Three => 3,
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

impl Setup {
    /// `(noisy context, noisy target)` for a phase.
    pub fn noise_placement(self, phase: Phase) -> (bool, bool) {
        match (self, phase) {
            (Setup::One, Phase::Train) => (false, false),
            (Setup::Two, Phase::Train) => (true, false),
            (Setup::Three, Phase::Train) => (true, true),
            (_, Phase::Eval) => (true, false),
        }
    }
}

/// Points with `dim_x` inputs and `dim_y` outputs, stored flat and row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub dim_x: usize,
    pub dim_y: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PointSet {
    pub fn new(dim_x: usize, dim_y: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let set = PointSet { dim_x, dim_y, x, y };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(dim_x: usize, dim_y: usize) -> Self {
        PointSet {
            dim_x,
            dim_y,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.dim_x.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_at(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim_x..(i + 1) * self.dim_x]
    }

    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.dim_y..(i + 1) * self.dim_y]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_x == 0 || self.dim_y == 0 {
            return Err(Error::Shape("point dimensions must be positive".into()));
        }
        if self.x.len() % self.dim_x != 0 || self.y.len() != self.len() * self.dim_y {
            return Err(Error::Shape(format!(
                "x has {} values and y has {} values for dims ({}, {})",
                self.x.len(),
                self.y.len(),
                self.dim_x,
                self.dim_y
            )));
        }
        if !self.x.iter().chain(&self.y).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite value in point set".into()));
        }
        Ok(())
    }

    /// Points at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> PointSet {
        let mut x = Vec::with_capacity(idx.len() * self.dim_x);
        let mut y = Vec::with_capacity(idx.len() * self.dim_y);
        for &i in idx {
            x.extend_from_slice(self.x_at(i));
            y.extend_from_slice(self.y_at(i));
        }
        PointSet {
            dim_x: self.dim_x,
            dim_y: self.dim_y,
            x,
            y,
        }
    }

    /// `self` followed by `other`.
    pub fn union(&self, other: &PointSet) -> PointSet {
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        PointSet {
            dim_x: self.dim_x,
            dim_y: self.dim_y,
            x,
            y,
        }
    }
}

/// One function: its context and target sets plus the clean target values used for
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub ctx: PointSet,
    pub tar: PointSet,
    pub clean_tar_y: Vec<f64>,
    pub noise_mask_ctx: Vec<bool>,
    pub noise_mask_tar: Vec<bool>,
    /// Generating hyperparameters, when the task came from a Gaussian process.
    pub kernel: Option<KernelParams>,
    /// Observation jitter variance used when sampling the function.
    pub jitter: f64,
}

/// A batch of tasks that share context and target sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub setup: Setup,
    pub phase: Phase,
    pub tasks: Vec<Task>,
}

pub const TASK_DUMP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TaskDump {
    version: u32,
    batch: TaskBatch,
}

impl TaskBatch {
    pub fn batch_size(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_ctx(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.ctx.len())
    }

    pub fn n_tar(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.tar.len())
    }

    pub fn dim_x(&self) -> usize {
        self.tasks.first().map_or(1, |t| t.tar.dim_x)
    }

    pub fn dim_y(&self) -> usize {
        self.tasks.first().map_or(1, |t| t.tar.dim_y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Shape("empty task batch".into()));
        }
        let (nc, nt) = (self.n_ctx(), self.n_tar());
        for t in &self.tasks {
            t.ctx.validate()?;
            t.tar.validate()?;
            if t.ctx.len() != nc || t.tar.len() != nt {
                return Err(Error::Shape("tasks in a batch must share set sizes".into()));
            }
            if t.noise_mask_ctx.len() != nc || t.noise_mask_tar.len() != nt {
                return Err(Error::Shape(
                    "noise mask length differs from set size".into(),
                ));
            }
            if t.clean_tar_y.len() != t.tar.y.len() || !t.clean_tar_y.iter().all(|v| v.is_finite())
            {
                return Err(Error::Shape(
                    "clean targets must be finite and match the target set".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let dump = TaskDump {
            version: TASK_DUMP_VERSION,
            batch: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&dump)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let dump: TaskDump = serde_json::from_slice(&std::fs::read(path)?)?;
        if dump.version != TASK_DUMP_VERSION {
            return Err(Error::Format(format!(
                "unsupported task dump version {}",
                dump.version
            )));
        }
        dump.batch.validate()?;
        Ok(dump.batch)
    }
}

/// How 1D function tasks are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kernel: KernelSpec,
    #[serde(default = "default_x_range")]
    pub x_range: [f64; 2],
    #[serde(default = "default_min_ctx")]
    pub min_ctx: usize,
    #[serde(default = "default_max_ctx")]
    pub max_ctx: usize,
    #[serde(default = "default_min_ctx")]
    pub min_tar: usize,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    /// Fixed context size, overriding the random draw.
    #[serde(default)]
    pub num_ctx: Option<usize>,
    /// Fixed target size, overriding the random draw.
    #[serde(default)]
    pub num_tar: Option<usize>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_x_range() -> [f64; 2] {
    [-2.0, 2.0]
}
fn default_min_ctx() -> usize {
    3
}
fn default_max_ctx() -> usize {
    47
}
fn default_max_points() -> usize {
    50
}
fn default_batch_size() -> usize {
    16
}

impl TaskConfig {
    pub fn new(family: KernelFamily) -> Self {
        TaskConfig {
            kernel: KernelSpec::new(family),
            x_range: default_x_range(),
            min_ctx: default_min_ctx(),
            max_ctx: default_max_ctx(),
            min_tar: default_min_ctx(),
            max_points: default_max_points(),
            num_ctx: None,
            num_tar: None,
            noise: NoiseSpec::clean(),
            batch_size: default_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.noise.validate()?;
        let [lo, hi] = self.x_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("x_range [{lo}, {hi}] is empty")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.min_ctx > self.max_ctx {
            return Err(Error::Config("min_ctx exceeds max_ctx".into()));
        }
        if self.min_tar == 0 {
            return Err(Error::Config("min_tar must be positive".into()));
        }
        let ctx_hi = self.num_ctx.unwrap_or(self.max_ctx);
        let tar_lo = self.num_tar.unwrap_or(self.min_tar);
        if ctx_hi + tar_lo > self.max_points {
            return Err(Error::Config(format!(
                "context ({ctx_hi}) plus target ({tar_lo}) sizes exceed max_points {}",
                self.max_points
            )));
        }
        Ok(())
    }

    /// Draws `(n_ctx, n_tar)` for one batch.
    pub fn sample_sizes<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let n_ctx = self
            .num_ctx
            .unwrap_or_else(|| rng.random_range(self.min_ctx..=self.max_ctx));
        let n_tar = self
            .num_tar
            .unwrap_or_else(|| rng.random_range(self.min_tar..=self.max_points - n_ctx));
        (n_ctx, n_tar)
    }
}

/// Draws one batch of Gaussian-process tasks and applies noise per setup and phase.
pub fn make_task<R: Rng + ?Sized>(
    cfg: &TaskConfig,
    setup: Setup,
    phase: Phase,
    rng: &mut R,
) -> Result<TaskBatch> {
    cfg.validate()?;
    let (n_ctx, n_tar) = cfg.sample_sizes(rng);
    let (noisy_ctx, noisy_tar) = setup.noise_placement(phase);
    let [lo, hi] = cfg.x_range;
    let mut tasks = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let params = sample_kernel_params(&cfg.kernel, rng)?;
        let xs: Vec<f64> = (0..n_ctx + n_tar)
            .map(|_| rng.random_range(lo..hi))
            .collect();
        let (ys, jitter) = sample_function_with_jitter(&params, &xs, 1, rng)?;
        let ctx_clean = PointSet {
            dim_x: 1,
            dim_y: 1,
            x: xs[..n_ctx].to_vec(),
            y: ys[..n_ctx].to_vec(),
        };
        let tar_clean = PointSet {
            dim_x: 1,
            dim_y: 1,
            x: xs[n_ctx..].to_vec(),
            y: ys[n_ctx..].to_vec(),
        };
        let task = apply_noise(
            ctx_clean,
            tar_clean,
            &cfg.noise,
            noisy_ctx,
            noisy_tar,
            Some(params),
            jitter,
            rng,
        )?;
        tasks.push(task);
    }
    Ok(TaskBatch {
        setup,
        phase,
        tasks,
    })
}

/// Builds a task from clean sets, noising the requested sides.
#[allow(clippy::too_many_arguments)]
pub fn apply_noise<R: Rng + ?Sized>(
    ctx: PointSet,
    tar: PointSet,
    noise: &NoiseSpec,
    noisy_ctx: bool,
    noisy_tar: bool,
    kernel: Option<KernelParams>,
    jitter: f64,
    rng: &mut R,
) -> Result<Task> {
    let clean_tar_y = tar.y.clone();
    let (ctx_y, noise_mask_ctx) = if noisy_ctx {
        inject_noise(&ctx.y, ctx.dim_y, noise, rng)?
    } else {
        (ctx.y.clone(), vec![false; ctx.len()])
    };
    let (tar_y, noise_mask_tar) = if noisy_tar {
        inject_noise(&tar.y, tar.dim_y, noise, rng)?
    } else {
        (tar.y.clone(), vec![false; tar.len()])
    };
    Ok(Task {
        ctx: PointSet { y: ctx_y, ..ctx },
        tar: PointSet { y: tar_y, ..tar },
        clean_tar_y,
        noise_mask_ctx,
        noise_mask_tar,
        kernel,
        jitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::kernel::sample_function;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(noise: NoiseSpec) -> TaskConfig {
        TaskConfig {
            noise,
            batch_size: 8,
            ..TaskConfig::new(KernelFamily::Rbf)
        }
    }

    fn masked(t: &[bool]) -> usize {
        t.iter().filter(|&&m| m).count()
    }

    #[test]
    fn setup_one_training_is_clean() {
        let b = make_task(
            &cfg(NoiseSpec::level(0.6)),
            Setup::One,
            Phase::Train,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        b.validate().unwrap();
        for t in &b.tasks {
            assert_eq!(masked(&t.noise_mask_ctx) + masked(&t.noise_mask_tar), 0);
            assert_eq!(t.tar.y, t.clean_tar_y);
        }
    }

    #[test]
    fn clean_values_are_the_sampled_function() {
        // replay the generator by hand
        let c = cfg(NoiseSpec::level(0.6));
        let seed = 17;
        let b = make_task(
            &c,
            Setup::One,
            Phase::Train,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nc, nt) = c.sample_sizes(&mut rng);
        let p = sample_kernel_params(&c.kernel, &mut rng).unwrap();
        let xs: Vec<f64> = (0..nc + nt).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys = sample_function(&p, &xs, 1, &mut rng).unwrap();
        assert_eq!(b.tasks[0].ctx.y, ys[..nc]);
        assert_eq!(b.tasks[0].tar.y, ys[nc..]);
    }

    #[test]
    fn setup_two_training_has_clean_targets() {
        let b = make_task(
            &cfg(NoiseSpec::level(0.6)),
            Setup::Two,
            Phase::Train,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for t in &b.tasks {
            assert_eq!(masked(&t.noise_mask_tar), 0);
            assert_eq!(t.tar.y, t.clean_tar_y);
            assert_eq!(
                masked(&t.noise_mask_ctx),
                super::super::noise::noise_count(0.6, t.ctx.len())
            );
        }
    }

    #[test]
    fn setup_three_training_rate() {
        let c = TaskConfig {
            batch_size: 64,
            ..cfg(NoiseSpec::level(0.99))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut total, mut noised) = (0, 0);
        for _ in 0..5 {
            let b = make_task(&c, Setup::Three, Phase::Train, &mut rng).unwrap();
            for t in &b.tasks {
                total += t.ctx.len() + t.tar.len();
                noised += masked(&t.noise_mask_ctx) + masked(&t.noise_mask_tar);
                assert_ne!(t.tar.y, t.clean_tar_y);
            }
        }
        let frac = noised as f64 / total as f64;
        // round(0.99 n) = n for every set size up to 50
        assert!((0.98..=1.0).contains(&frac), "{frac}");
    }

    #[test]
    fn setup_three_eval_keeps_clean_targets() {
        let b = make_task(
            &cfg(NoiseSpec::level(0.3)),
            Setup::Three,
            Phase::Eval,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        for t in &b.tasks {
            assert!(masked(&t.noise_mask_ctx) > 0 || t.ctx.len() < 2);
            assert_eq!(masked(&t.noise_mask_tar), 0);
            assert_eq!(t.tar.y, t.clean_tar_y);
        }
    }

    #[test]
    fn sizes_and_disjointness() {
        let c = cfg(NoiseSpec::clean());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = make_task(&c, Setup::One, Phase::Train, &mut rng).unwrap();
            let (nc, nt) = (b.n_ctx(), b.n_tar());
            assert!((3..=47).contains(&nc));
            assert!(nt >= 3 && nc + nt <= 50);
            for t in &b.tasks {
                assert!(t.ctx.x.iter().all(|x| (-2.0..2.0).contains(x)));
                // continuous draws: index sets are disjoint iff no shared x
                assert!(t.ctx.x.iter().all(|x| !t.tar.x.contains(x)));
            }
        }
    }

    #[test]
    fn identical_seeds_identical_batches() {
        let c = cfg(NoiseSpec::level(0.6));
        let a = make_task(
            &c,
            Setup::Three,
            Phase::Train,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = make_task(
            &c,
            Setup::Three,
            Phase::Train,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversubscribed_sizes_rejected() {
        let mut c = cfg(NoiseSpec::clean());
        c.num_ctx = Some(48);
        assert!(matches!(
            make_task(&c, Setup::One, Phase::Train, &mut rand::rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn task_dump_roundtrip() {
        let b = make_task(
            &cfg(NoiseSpec::level(0.3)),
            Setup::Two,
            Phase::Eval,
            &mut ChaCha8Rng::seed_from_u64(6),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.json");
        b.save_json(&path).unwrap();
        assert_eq!(TaskBatch::load_json(&path).unwrap(), b);
    }
}
