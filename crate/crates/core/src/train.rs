//! The training loop: Adam with cosine decay, one batch per step, checkpoints that
//! carry the generator state so an interrupted run resumes bit-exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{cosine_lr, Adam, AdamState, Checkpoint, Graph, ParamStore, RngState};
use crate::error::{Error, Result};
use crate::funcdata::TaskBatch;
use crate::models::{ForwardOptions, LatentSource, Model, ModelInput, TargetValues};
use crate::objectives::{training_loss, LossBreakdown, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Multiplies `steps`; lets one config serve full and reduced budgets.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Tasks per training batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Steps between training log lines.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_batch_size() -> usize {
    16
}
fn default_log_every() -> u64 {
    1
}

fn default_lr() -> f64 {
    5e-4
}
fn default_scale() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(steps: u64, seed: u64) -> Self {
        TrainConfig {
            steps,
            lr: default_lr(),
            seed,
            scale: 1.0,
            checkpoint_every: 0,
            batch_size: default_batch_size(),
            log_every: default_log_every(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps as f64 * self.scale).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!("scale {} must be >= 0", self.scale)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size and log_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Everything a run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub optimizer: AdamState<f32>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters drawn from the run seed.
    pub fn init(model: &Model, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: ParamStore<f32> = model.init_params(&mut rng);
        let optimizer = AdamState::new(&params);
        TrainState {
            params,
            optimizer,
            step: 0,
            rng,
        }
    }

    pub fn from_checkpoint(model: &Model, ck: Checkpoint<f32>) -> Result<Self> {
        model.layout().validate(&ck.params)?;
        Ok(TrainState {
            params: ck.params,
            optimizer: ck.optimizer,
            step: ck.step,
            rng: ck.rng.restore(),
        })
    }

    pub fn to_checkpoint(&self, config: &str) -> Checkpoint<f32> {
        Checkpoint {
            config: config.to_string(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// One optimizer step on a batch drawn by `sample`.
pub fn train_step<F>(
    model: &Model,
    state: &mut TrainState,
    loss_cfg: &LossConfig,
    lr: f64,
    sample: &mut F,
) -> Result<LossBreakdown>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<TaskBatch>,
{
    let batch = sample(&mut state.rng)?;
    let input = ModelInput::from_batch(&batch, TargetValues::Observed)?;
    let g = Graph::new();
    let vars = state.params.register(&g);
    let opts = ForwardOptions {
        samples: model.train_samples(loss_cfg.k_train),
        queries: loss_cfg.queries(),
        latent: LatentSource::Posterior,
    };
    let out = model.forward(&g, &vars, &input, &opts, &mut state.rng)?;
    let loss = training_loss(&g, model.variant(), &out, &input, loss_cfg)?;
    if !loss.breakdown.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    let grads = g.backward(loss.total);
    state.params.zero_grad();
    state.params.accumulate_grads(&grads, &vars);
    Adam::default().step(&mut state.params, &mut state.optimizer, lr)?;
    state.step += 1;
    Ok(loss.breakdown)
}

/// Runs `state` up to `cfg.total_steps()`, calling `on_step` every `log_every` steps and
/// `on_checkpoint` every `checkpoint_every` steps.
pub fn train_until<F, L, C>(
    model: &Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut sample: F,
    mut on_step: L,
    mut on_checkpoint: C,
) -> Result<()>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<TaskBatch>,
    L: FnMut(&StepLog) -> Result<()>,
    C: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    loss_cfg.validate()?;
    let total = cfg.total_steps();
    while state.step < total {
        let lr = cosine_lr(cfg.lr, state.step, total);
        let loss = train_step(model, state, loss_cfg, lr, &mut sample)?;
        if state.step % cfg.log_every == 0 || state.step == total {
            on_step(&StepLog {
                step: state.step,
                lr,
                loss,
            })?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total
        {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

/// Trains from scratch, or from `resume` when it exists, writing checkpoints to
/// `checkpoint` and returning the final state.
pub fn train_with_checkpoints<F, L>(
    model: &Model,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    config_echo: &str,
    checkpoint: &Path,
    resume: bool,
    sample: F,
    on_step: L,
) -> Result<TrainState>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<TaskBatch>,
    L: FnMut(&StepLog) -> Result<()>,
{
    let mut state = if resume && checkpoint.exists() {
        TrainState::from_checkpoint(model, Checkpoint::load(checkpoint)?)?
    } else {
        TrainState::init(model, cfg.seed)
    };
    train_until(model, &mut state, cfg, loss_cfg, sample, on_step, |s| {
        s.to_checkpoint(config_echo).save(checkpoint)
    })?;
    state.to_checkpoint(config_echo).save(checkpoint)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::funcdata::{make_task, KernelFamily, NoiseSpec, Phase, Setup, TaskConfig};
    use crate::models::ModelConfig;

    fn model(name: &str) -> Model {
        Model::new(&ModelConfig {
            backbone: BackboneConfig {
                hidden_dim: 8,
                depth: 2,
                decoder_depth: 2,
                n_heads: 2,
                ..Default::default()
            },
            z_dim: 4,
            ..ModelConfig::new(name.parse().unwrap())
        })
        .unwrap()
    }

    fn sampler() -> impl FnMut(&mut ChaCha8Rng) -> Result<TaskBatch> {
        let tc = TaskConfig {
            batch_size: 4,
            noise: NoiseSpec::level(0.3),
            ..TaskConfig::new(KernelFamily::Rbf)
        };
        move |rng| make_task(&tc, Setup::Three, Phase::Train, rng)
    }

    fn run(name: &str, steps: u64, seed: u64) -> TrainState {
        let m = model(name);
        let mut st = TrainState::init(&m, seed);
        let cfg = TrainConfig::new(steps, seed);
        let loss = LossConfig::for_variant(m.variant(), 5.0);
        train_until(&m, &mut st, &cfg, &loss, sampler(), |_| Ok(()), |_| Ok(())).unwrap();
        st
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let st = run("anp", 0, 3);
        assert_eq!(st.params, TrainState::init(&model("anp"), 3).params);
    }

    #[test]
    fn identical_seeds_identical_parameters() {
        assert_eq!(run("r-anp", 5, 1).params, run("r-anp", 5, 1).params);
    }

    #[test]
    fn robust_and_standard_share_shapes_but_differ() {
        let (a, r) = (run("anp", 3, 2), run("r-anp", 3, 2));
        assert_eq!(a.params.shapes(), r.params.shapes());
        assert_ne!(a.params, r.params);
    }

    #[test]
    fn every_variant_trains_finitely() {
        for name in ["np", "cnp", "anp", "canp", "bnp", "banp", "r-anp", "r-banp"] {
            let st = run(name, 3, 0);
            assert!(st.params.is_finite(), "{name}");
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let m = model("anp");
        let loss = LossConfig::standard();
        let cfg = TrainConfig::new(10, 5);
        let mut straight = TrainState::init(&m, 5);
        train_until(
            &m,
            &mut straight,
            &cfg,
            &loss,
            sampler(),
            |_| Ok(()),
            |_| Ok(()),
        )
        .unwrap();

        let mut first = TrainState::init(&m, 5);
        let half = TrainConfig {
            checkpoint_every: 4,
            ..cfg.clone()
        };
        let mut sample = sampler();
        while first.step < 4 {
            let lr = cosine_lr(cfg.lr, first.step, 10);
            train_step(&m, &mut first, &loss, lr, &mut sample).unwrap();
        }
        let saved = Checkpoint::<f32>::from_bytes(&first.to_checkpoint("cfg").to_bytes()).unwrap();
        let mut resumed = TrainState::from_checkpoint(&m, saved).unwrap();
        train_until(
            &m,
            &mut resumed,
            &half,
            &loss,
            sampler(),
            |_| Ok(()),
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(resumed.params, straight.params);
        assert_eq!(resumed.optimizer, straight.optimizer);
    }
}
