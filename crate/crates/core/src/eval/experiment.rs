//! Experiment cells and the sweeps built from them.
//!
//! A cell is one (model, setup, noise, seed) combination: train or reuse a checkpoint,
//! evaluate it on a shared seeded test set, append the row. Checkpoints are addressed by
//! a hash of everything that determines training, so cells whose training distributions
//! coincide (every setup at zero noise, setup 1 at any noise) share one run.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::likelihood::{evaluate_batches, oracle_task_log_likelihoods};
use super::results::{cell_key, EvalResult, ResultRow, ResultsStore};
use crate::backbone::{Checkpoint, ParamStore};
use crate::config::{resolve_path, ExperimentConfig, ImageDataConfig, SweepBlock, TuneSection};
use crate::error::{Error, Result};
use crate::funcdata::{apply_noise, make_task, NoiseSpec, Phase, Setup, TaskBatch, TaskConfig};
use crate::imagefunc::{sample_image_task, ImageFunctionSet, ImageTaskConfig};
use crate::models::{Model, ModelConfig, ModelVariant};
use crate::objectives::LossConfig;
use crate::train::{train_with_checkpoints, StepLog, TrainConfig};

pub const ORACLE_LABEL: &str = "gp-oracle";
const NO_SIG: &str = "-no-sig";
const ALL_PTS: &str = "-all-pts";

/// Stable 64-bit seed from labelled parts.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Network {
        variant: ModelVariant,
        loss: LossConfig,
    },
    /// The closed-form posterior of the generating process.
    Oracle,
}

/// A results label and what it trains.
///
/// Labels are variant names (`anp`, `r-anp`), the ablations `<robust>-no-sig` (no
/// variance term) and `<robust>-all-pts` (context points reconstructed too), an optional
/// `[w=<weight>]` suffix fixing the variance weight, or `gp-oracle`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub label: String,
    pub kind: ModelKind,
}

impl ModelSpec {
    /// `w_sigma` applies when the label carries no weight of its own.
    pub fn parse(label: &str, cfg: &ExperimentConfig, w_sigma: Option<f64>) -> Result<Self> {
        if label == ORACLE_LABEL {
            return Ok(ModelSpec {
                label: label.into(),
                kind: ModelKind::Oracle,
            });
        }
        let (name, label_w) = match label.strip_suffix(']').and_then(|l| l.split_once("[w=")) {
            Some((name, w)) => {
                let w: f64 = w
                    .parse()
                    .map_err(|_| Error::Config(format!("bad weight in model label `{label}`")))?;
                (name, Some(w))
            }
            None => (label, None),
        };
        let (base, ablation) = if let Some(b) = name.strip_suffix(NO_SIG) {
            (b, Some(NO_SIG))
        } else if let Some(b) = name.strip_suffix(ALL_PTS) {
            (b, Some(ALL_PTS))
        } else {
            (name, None)
        };
        let variant: ModelVariant = base.parse()?;
        let mut loss = cfg.loss.resolve(variant);
        if let Some(w) = label_w.or(w_sigma) {
            if variant.robust {
                loss.w_sigma = w;
            }
        }
        match ablation {
            Some(_) if !variant.robust => {
                return Err(Error::Config(format!(
                    "ablation `{label}` needs a robust base model"
                )));
            }
            Some(NO_SIG) => loss.w_sigma = 0.0,
            Some(_) => loss.include_context_in_recon = true,
            None => {}
        }
        loss.validate()?;
        Ok(ModelSpec {
            label: label.into(),
            kind: ModelKind::Network { variant, loss },
        })
    }

    /// The label a tuning candidate is recorded under.
    pub fn weight_label(base: &str, w: f64) -> String {
        format!("{base}[w={w}]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Validation,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub model: String,
    pub setup: Setup,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Variance weight for robust models whose label carries none.
    pub w_sigma: Option<f64>,
    pub split: Split,
}

/// Everything that determines a training run; its hash names the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainKey {
    pub dataset: String,
    pub task: Option<TaskConfig>,
    pub images: Option<ImageDataConfig>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Training noise with its placement, absent when no point is ever noised.
    pub noise: Option<(NoiseSpec, bool, bool)>,
}

impl TrainKey {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Chosen weight and the full validation table, ordered by weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub noise: f64,
    pub best: f64,
    pub table: Vec<(f64, f64)>,
}

/// Argmax of `(weight, score)` pairs; ties go to the smaller `|w|`, then the smaller `w`.
pub fn select_weight(table: &[(f64, f64)]) -> Result<f64> {
    table
        .iter()
        .copied()
        .max_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| b.0.abs().total_cmp(&a.0.abs()))
                .then_with(|| b.0.total_cmp(&a.0))
        })
        .map(|(w, _)| w)
        .ok_or_else(|| Error::Config("empty weight grid".into()))
}

/// Candidates for a second pass: midpoints towards the winner's neighbours, and larger
/// magnitudes when the winner sits at an end of the grid.
pub fn refine_grid(grid: &[f64], winner: f64) -> Vec<f64> {
    let mut g: Vec<f64> = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    let i = g.iter().position(|&w| w == winner);
    let mut out = Vec::new();
    if let Some(i) = i {
        if i > 0 {
            out.push((g[i - 1] + winner) / 2.0);
        } else if winner < 0.0 {
            out.extend([winner * 2.0, winner * 5.0]);
        }
        if i + 1 < g.len() {
            out.push((g[i + 1] + winner) / 2.0);
        } else if winner > 0.0 {
            out.extend([winner * 2.0, winner * 5.0]);
        }
    }
    out.retain(|w| !g.contains(w));
    out
}

/// A trained network ready for evaluation.
pub struct Trained {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub checkpoint: PathBuf,
}

/// Runs cells against one configuration and results directory.
pub struct Runner {
    cfg: ExperimentConfig,
    checkpoint_dir: PathBuf,
    store: ResultsStore,
    images: Option<(ImageFunctionSet, ImageFunctionSet)>,
    clean_sets: RefCell<HashMap<Split, Rc<Vec<TaskBatch>>>>,
    noisy_sets: RefCell<HashMap<(Split, String), Rc<Vec<TaskBatch>>>>,
    tuned: RefCell<BTreeMap<String, f64>>,
    resume: bool,
}

fn noise_id(n: &NoiseSpec) -> String {
    format!("s{}-r{}", n.std, n.effective_rate())
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let checkpoint_dir = resolve_path(&cfg.paths.checkpoint_dir);
        fs::create_dir_all(&checkpoint_dir)?;
        let store = ResultsStore::open(resolve_path(&cfg.paths.results_dir))?;
        let images = match &cfg.data.images {
            None => None,
            Some(img) => Some(split_images(
                &ImageFunctionSet::load_dir(&resolve_path(&img.dir), img.size)?,
                img.test_fraction,
            )?),
        };
        Ok(Runner {
            cfg,
            checkpoint_dir,
            store,
            images,
            clean_sets: RefCell::default(),
            noisy_sets: RefCell::default(),
            tuned: RefCell::default(),
            resume: true,
        })
    }

    /// Whether existing checkpoints are reused (the default) or retrained from scratch.
    pub fn set_resume(&mut self, resume: bool) {
        self.resume = resume;
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ResultsStore {
        &self.store
    }

    pub fn image_sets(&self) -> Option<&(ImageFunctionSet, ImageFunctionSet)> {
        self.images.as_ref()
    }

    fn dataset_label(&self, split: Split) -> String {
        match split {
            Split::Test => self.cfg.data.dataset.clone(),
            Split::Validation => format!("{}-val", self.cfg.data.dataset),
        }
    }

    fn image_task(&self, noise: NoiseSpec) -> Result<ImageTaskConfig> {
        self.cfg
            .image_task_config(noise)
            .ok_or_else(|| Error::Config("no image data configured".into()))
    }

    /// Context-and-target batches without noise, generated once per split.
    pub fn clean_set(&self, split: Split) -> Result<Rc<Vec<TaskBatch>>> {
        if let Some(s) = self.clean_sets.borrow().get(&split) {
            return Ok(s.clone());
        }
        let e = &self.cfg.eval;
        let n_tasks = if split == Split::Test {
            e.n_tasks
        } else {
            e.n_val_tasks
        };
        let task_json = serde_json::to_string(&(&self.cfg.data.task, &self.cfg.data.images))?;
        let seed = derive_seed(&[
            "tasks",
            split.name(),
            &self.cfg.data.dataset,
            &task_json,
            &e.test_seed.to_string(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batches = Vec::new();
        let mut left = n_tasks;
        while left > 0 {
            let size = left.min(e.eval_batch);
            let mut b = match &self.images {
                None => {
                    let tc = TaskConfig {
                        batch_size: size,
                        ..self.cfg.task_config(NoiseSpec::clean())
                    };
                    make_task(&tc, Setup::One, Phase::Eval, &mut rng)?
                }
                Some((_, test)) => {
                    let ic = ImageTaskConfig {
                        batch_size: size,
                        ..self.image_task(NoiseSpec::clean())?
                    };
                    sample_image_task(test, &ic, Setup::One, Phase::Eval, &mut rng)?
                }
            };
            b.tasks.truncate(size);
            batches.push(b);
            left -= size;
        }
        let set = Rc::new(batches);
        self.clean_sets.borrow_mut().insert(split, set.clone());
        Ok(set)
    }

    /// The shared evaluation set at a noise level: the clean set's functions with context
    /// noise drawn from a stream that depends only on the split and the noise.
    pub fn eval_set(&self, split: Split, noise: &NoiseSpec) -> Result<Rc<Vec<TaskBatch>>> {
        let key = (split, noise_id(noise));
        if let Some(s) = self.noisy_sets.borrow().get(&key) {
            return Ok(s.clone());
        }
        let clean = self.clean_set(split)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            "noise",
            split.name(),
            &key.1,
            &self.cfg.eval.test_seed.to_string(),
        ]));
        let mut out = Vec::with_capacity(clean.len());
        for b in clean.iter() {
            let mut tasks = Vec::with_capacity(b.tasks.len());
            for t in &b.tasks {
                tasks.push(apply_noise(
                    t.ctx.clone(),
                    t.tar.clone(),
                    noise,
                    true,
                    false,
                    t.kernel,
                    t.jitter,
                    &mut rng,
                )?);
            }
            out.push(TaskBatch {
                setup: b.setup,
                phase: Phase::Eval,
                tasks,
            });
        }
        let set = Rc::new(out);
        self.noisy_sets.borrow_mut().insert(key, set.clone());
        Ok(set)
    }

    pub fn train_key(
        &self,
        variant: ModelVariant,
        loss: LossConfig,
        setup: Setup,
        noise: &NoiseSpec,
        seed: u64,
    ) -> TrainKey {
        let (c, t) = setup.noise_placement(Phase::Train);
        let noise = (noise.effective_rate() > 0.0 && (c || t)).then(|| {
            (
                NoiseSpec::decoupled(noise.std, noise.effective_rate()),
                c,
                t,
            )
        });
        TrainKey {
            dataset: self.cfg.data.dataset.clone(),
            task: self
                .images
                .is_none()
                .then(|| self.cfg.task_config(NoiseSpec::clean())),
            images: self.cfg.data.images.clone(),
            model: ModelConfig {
                variant,
                ..self.cfg.model.clone()
            },
            loss,
            train: TrainConfig {
                seed,
                checkpoint_every: 0,
                log_every: 1,
                ..self.cfg.train.clone()
            },
            noise,
        }
    }

    /// Trains, resumes or loads the checkpoint for `key`.
    pub fn train(&self, key: &TrainKey) -> Result<Trained> {
        let model = Model::new(&key.model)?;
        let hash = key.hash();
        let ckpt = self.checkpoint_dir.join(format!("{hash}.ckpt"));
        let echo = serde_json::to_string_pretty(key)?;
        fs::write(self.checkpoint_dir.join(format!("{hash}.json")), &echo)?;
        let total = self.cfg.train.total_steps();
        if self.resume && ckpt.exists() {
            let ck: Checkpoint<f32> = Checkpoint::load(&ckpt)?;
            if ck.step >= total {
                model.layout().validate(&ck.params)?;
                return Ok(Trained {
                    model,
                    params: ck.params,
                    checkpoint: ckpt,
                });
            }
        }
        let train_cfg = TrainConfig {
            seed: key.train.seed,
            ..self.cfg.train.clone()
        };
        let log_path = self.checkpoint_dir.join(format!("{hash}.log.jsonl"));
        let resume_step = if self.resume && ckpt.exists() {
            Checkpoint::<f32>::load(&ckpt)?.step
        } else {
            0
        };
        let mut log = open_log(&log_path, resume_step)?;
        let (setup, noise) = match key.noise {
            None => (Setup::One, NoiseSpec::clean()),
            Some((n, true, false)) => (Setup::Two, n),
            Some((n, _, _)) => (Setup::Three, n),
        };
        log::info!(
            "training {} ({}) seed {} -> {}",
            key.model.variant,
            hash,
            key.train.seed,
            ckpt.display()
        );
        let state = match &self.images {
            None => {
                let tc = self.cfg.task_config(noise);
                train_with_checkpoints(
                    &model,
                    &train_cfg,
                    &key.loss,
                    &echo,
                    &ckpt,
                    self.resume,
                    |rng| make_task(&tc, setup, Phase::Train, rng),
                    |s| write_log(&mut log, s),
                )?
            }
            Some((train_set, _)) => {
                let ic = self.image_task(noise)?;
                train_with_checkpoints(
                    &model,
                    &train_cfg,
                    &key.loss,
                    &echo,
                    &ckpt,
                    self.resume,
                    |rng| sample_image_task(train_set, &ic, setup, Phase::Train, rng),
                    |s| write_log(&mut log, s),
                )?
            }
        };
        Ok(Trained {
            model,
            params: state.params,
            checkpoint: ckpt,
        })
    }

    /// Records a tuned weight for a robust model at a noise level.
    pub fn set_tuned_weight(&self, model: &str, noise: &NoiseSpec, w: f64) {
        self.tuned
            .borrow_mut()
            .insert(format!("{model}|{}", noise_id(noise)), w);
    }

    fn tuned_weight(&self, label: &str, noise: &NoiseSpec) -> Option<f64> {
        let base = label.strip_suffix(ALL_PTS).unwrap_or(label);
        self.tuned
            .borrow()
            .get(&format!("{base}|{}", noise_id(noise)))
            .copied()
    }

    pub fn cell_key(&self, cell: &Cell) -> String {
        cell_key(
            &self.dataset_label(cell.split),
            &self.cfg.data.kernel_label(),
            &cell.model,
            cell.setup,
            cell.noise.std,
            cell.noise.effective_rate(),
            cell.seed,
        )
    }

    /// Scores a trained network on the shared set of `split` at `noise`. The sampling
    /// stream depends on the label, setup, seed and split but not on the noise.
    pub fn evaluate(
        &self,
        trained: &Trained,
        label: &str,
        setup: Setup,
        seed: u64,
        split: Split,
        noise: &NoiseSpec,
    ) -> Result<(f64, usize)> {
        let set = self.eval_set(split, noise)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            "eval",
            label,
            &setup.to_string(),
            &seed.to_string(),
            split.name(),
        ]));
        evaluate_batches(
            &trained.model,
            &trained.params,
            &set,
            self.cfg.eval.k_eval,
            &mut rng,
        )
    }

    /// Runs one cell unless the store already holds it.
    pub fn run_cell(&self, cell: &Cell) -> Result<ResultRow> {
        let key = self.cell_key(cell);
        if self.store.contains(&key)? {
            if let Some(r) = self.store.rows()?.into_iter().find(|r| r.key() == key) {
                return Ok(r);
            }
        }
        let w = cell
            .w_sigma
            .or_else(|| self.tuned_weight(&cell.model, &cell.noise));
        let spec = ModelSpec::parse(&cell.model, &self.cfg, w)?;
        let set = self.eval_set(cell.split, &cell.noise)?;
        let k = self.cfg.eval.k_eval;
        let (ll, n, meta) = match spec.kind {
            ModelKind::Oracle => {
                let mut total = 0.0;
                let mut n = 0;
                for b in set.iter() {
                    let v = oracle_task_log_likelihoods(b)?;
                    total += v.iter().sum::<f64>();
                    n += v.len();
                }
                (total / n as f64, n, serde_json::json!({ "oracle": true }))
            }
            ModelKind::Network { variant, loss } => {
                let tk = self.train_key(variant, loss, cell.setup, &cell.noise, cell.seed);
                let trained = self.train(&tk)?;
                let (ll, n) = self.evaluate(
                    &trained,
                    &cell.model,
                    cell.setup,
                    cell.seed,
                    cell.split,
                    &cell.noise,
                )?;
                let meta = serde_json::json!({
                    "checkpoint": tk.hash(),
                    "w_sigma": loss.w_sigma,
                    "include_context_in_recon": loss.include_context_in_recon,
                    "steps": self.cfg.train.total_steps(),
                });
                (ll, n, meta)
            }
        };
        let row = ResultRow {
            dataset: self.dataset_label(cell.split),
            kernel: self.cfg.data.kernel_label(),
            model: cell.model.clone(),
            setup: cell.setup,
            noise_s: cell.noise.std,
            noise_r: cell.noise.effective_rate(),
            seed: cell.seed,
            target_ll: ll,
            n_tasks: n,
            k_eval: k,
        };
        self.store.append(&row, meta)?;
        log::info!("{key}: target ll {ll:.4}");
        Ok(row)
    }

    /// Every model x setup x noise level x seed on the test split.
    pub fn run_experiment(
        &self,
        models: &[String],
        setups: &[Setup],
        noise_grid: &[f64],
        seeds: &[u64],
    ) -> Result<EvalResult> {
        let noises: Vec<NoiseSpec> = noise_grid.iter().map(|&s| NoiseSpec::level(s)).collect();
        self.run_cells(models, setups, &noises, seeds)
    }

    /// The full `s x r` grid with decoupled noise.
    pub fn sweep_noise_axes(
        &self,
        models: &[String],
        setups: &[Setup],
        s_grid: &[f64],
        r_grid: &[f64],
        seeds: &[u64],
    ) -> Result<EvalResult> {
        let noises: Vec<NoiseSpec> = s_grid
            .iter()
            .flat_map(|&s| r_grid.iter().map(move |&r| NoiseSpec::decoupled(s, r)))
            .collect();
        self.run_cells(models, setups, &noises, seeds)
    }

    fn run_cells(
        &self,
        models: &[String],
        setups: &[Setup],
        noises: &[NoiseSpec],
        seeds: &[u64],
    ) -> Result<EvalResult> {
        let mut rows = Vec::new();
        for m in models {
            let seeds: &[u64] = if m == ORACLE_LABEL {
                &seeds[..seeds.len().min(1)]
            } else {
                seeds
            };
            for &setup in setups {
                for noise in noises {
                    noise.validate()?;
                    for &seed in seeds {
                        let cell = Cell {
                            model: m.clone(),
                            setup,
                            noise: *noise,
                            seed,
                            w_sigma: None,
                            split: Split::Test,
                        };
                        rows.push(self.run_cell(&cell)?);
                    }
                }
            }
        }
        Ok(EvalResult::new(rows))
    }

    /// Trains one model per candidate weight, scores each on validation tasks and picks
    /// the best; a refinement pass adds candidates around the coarse winner.
    pub fn tune_variance_weight(
        &self,
        model: &str,
        setup: Setup,
        noise: f64,
        grid: &[f64],
        refine: bool,
        seed: u64,
    ) -> Result<TuneResult> {
        if grid.is_empty() {
            return Err(Error::Config("empty weight grid".into()));
        }
        let noise_spec = NoiseSpec::level(noise);
        let score = |w: f64| -> Result<(f64, f64)> {
            let cell = Cell {
                model: ModelSpec::weight_label(model, w),
                setup,
                noise: noise_spec,
                seed,
                w_sigma: None,
                split: Split::Validation,
            };
            Ok((w, self.run_cell(&cell)?.target_ll))
        };
        let mut table = grid.iter().map(|&w| score(w)).collect::<Result<Vec<_>>>()?;
        let mut best = select_weight(&table)?;
        if refine {
            for w in refine_grid(grid, best) {
                table.push(score(w)?);
            }
            best = select_weight(&table)?;
        }
        table.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.set_tuned_weight(model, &noise_spec, best);
        Ok(TuneResult { noise, best, table })
    }

    /// The robust model against its two ablations over a noise grid.
    pub fn ablation_suite(
        &self,
        base: &str,
        setup: Setup,
        noise_grid: &[f64],
        seeds: &[u64],
    ) -> Result<EvalResult> {
        let models = [
            base.to_string(),
            format!("{base}{NO_SIG}"),
            format!("{base}{ALL_PTS}"),
        ];
        self.run_experiment(&models, &[setup], noise_grid, seeds)
    }

    pub fn run_tuning(&self, tune: &TuneSection) -> Result<Vec<TuneResult>> {
        let levels = if tune.noise_levels.is_empty() {
            self.cfg.eval.noise_grid.clone()
        } else {
            tune.noise_levels.clone()
        };
        let results = levels
            .iter()
            .map(|&s| {
                self.tune_variance_weight(
                    &tune.model,
                    self.cfg.data.setup,
                    s,
                    &tune.grid,
                    tune.refine,
                    tune.seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        fs::write(
            self.store.dir().join("tuned_weights.json"),
            serde_json::to_string_pretty(&results)?,
        )?;
        Ok(results)
    }

    pub fn run_block(&self, block: &SweepBlock) -> Result<EvalResult> {
        let seeds = block
            .seeds
            .clone()
            .unwrap_or_else(|| self.cfg.eval.seeds.clone());
        match (&block.s_grid, &block.r_grid) {
            (Some(s), Some(r)) => self.sweep_noise_axes(&block.models, &block.setups, s, r, &seeds),
            (None, None) => {
                let grid = block
                    .noise_grid
                    .clone()
                    .unwrap_or_else(|| self.cfg.eval.noise_grid.clone());
                self.run_experiment(&block.models, &block.setups, &grid, &seeds)
            }
            _ => Err(Error::Config(
                "s_grid and r_grid must be given together".into(),
            )),
        }
    }

    /// Tuning first (so robust cells pick up their weights), then every block.
    pub fn run_sweep(&self) -> Result<EvalResult> {
        if let Some(t) = &self.cfg.sweep.tune {
            self.run_tuning(t)?;
        }
        let mut rows = Vec::new();
        for b in &self.cfg.sweep.blocks {
            rows.extend(self.run_block(b)?.rows);
        }
        Ok(EvalResult::new(rows))
    }
}

fn split_images(
    all: &ImageFunctionSet,
    test_fraction: f64,
) -> Result<(ImageFunctionSet, ImageFunctionSet)> {
    let n = all.images.len();
    if n < 2 {
        return Ok((all.clone(), all.clone()));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let cut = n - n_test;
    // test images reuse the training statistics
    let train = ImageFunctionSet::new(all.images[..cut].to_vec(), all.names[..cut].to_vec())?;
    let test = ImageFunctionSet::with_stats(
        all.images[cut..].to_vec(),
        all.names[cut..].to_vec(),
        train.stats.clone(),
    )?;
    Ok((train, test))
}

/// Opens a training log for appending, dropping lines past `keep_through`.
fn open_log(path: &Path, keep_through: u64) -> Result<fs::File> {
    if path.exists() {
        let kept: Vec<String> = BufReader::new(fs::File::open(path)?)
            .lines()
            .map_while(|l| l.ok())
            .filter(|l| serde_json::from_str::<StepLog>(l).is_ok_and(|s| s.step <= keep_through))
            .collect();
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text)?;
    }
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

fn write_log(f: &mut fs::File, s: &StepLog) -> Result<()> {
    writeln!(f, "{}", serde_json::to_string(s)?)?;
    Ok(())
}
