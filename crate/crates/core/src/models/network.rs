use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bootstrap::{canonical_order, resample};
use super::variant::ModelVariant;
use crate::backbone::{
    positive_transform, BackboneConfig, Graph, Init, Linear, Mlp, MultiHeadAttention, ParamId,
    ParamLayout, ParamStore, ParamVars, Real, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::funcdata::{PointSet, TaskBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    #[serde(default = "default_dim")]
    pub dim_x: usize,
    #[serde(default = "default_dim")]
    pub dim_y: usize,
    /// Bootstrap members per training step.
    #[serde(default = "default_bootstrap_train")]
    pub bootstrap_train: usize,
    /// Bootstrap members at evaluation.
    #[serde(default = "default_bootstrap_eval")]
    pub bootstrap_eval: usize,
    /// Permit the robust flag on variants other than anp and banp.
    #[serde(default)]
    pub allow_any_robust: bool,
}

fn default_z_dim() -> usize {
    128
}
fn default_dim() -> usize {
    1
}
fn default_bootstrap_train() -> usize {
    4
}
fn default_bootstrap_eval() -> usize {
    50
}

impl ModelConfig {
    pub fn new(variant: ModelVariant) -> Self {
        ModelConfig {
            variant,
            backbone: BackboneConfig::default(),
            z_dim: default_z_dim(),
            dim_x: 1,
            dim_y: 1,
            bootstrap_train: default_bootstrap_train(),
            bootstrap_eval: default_bootstrap_eval(),
            allow_any_robust: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.variant.validate(self.allow_any_robust)?;
        if self.z_dim == 0 || self.dim_x == 0 || self.dim_y == 0 {
            return Err(Error::Config(
                "z_dim, dim_x and dim_y must be positive".into(),
            ));
        }
        if self.bootstrap_train == 0 || self.bootstrap_eval == 0 {
            return Err(Error::Config(
                "bootstrap member counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Flat, row-major model input for a batch of tasks that share set sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub n_tasks: usize,
    pub n_ctx: usize,
    pub n_tar: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    pub x_ctx: Vec<f64>,
    pub y_ctx: Vec<f64>,
    pub x_tar: Vec<f64>,
    /// Target values the posterior encoder and the loss read; absent for pure prediction.
    pub y_tar: Option<Vec<f64>>,
}

/// Which target values a [`ModelInput`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetValues {
    /// The (possibly noisy) observed targets: what training sees.
    Observed,
    /// The noise-free targets: what evaluation scores against.
    Clean,
    None,
}

impl ModelInput {
    pub fn from_batch(batch: &TaskBatch, targets: TargetValues) -> Result<Self> {
        batch.validate()?;
        let (dim_x, dim_y) = (batch.dim_x(), batch.dim_y());
        let mut input = ModelInput {
            n_tasks: batch.batch_size(),
            n_ctx: batch.n_ctx(),
            n_tar: batch.n_tar(),
            dim_x,
            dim_y,
            x_ctx: Vec::new(),
            y_ctx: Vec::new(),
            x_tar: Vec::new(),
            y_tar: (targets != TargetValues::None).then(Vec::new),
        };
        for t in &batch.tasks {
            input.x_ctx.extend_from_slice(&t.ctx.x);
            input.y_ctx.extend_from_slice(&t.ctx.y);
            input.x_tar.extend_from_slice(&t.tar.x);
            if let Some(y) = input.y_tar.as_mut() {
                y.extend_from_slice(if targets == TargetValues::Clean {
                    &t.clean_tar_y
                } else {
                    &t.tar.y
                });
            }
        }
        Ok(input)
    }

    /// A single task from a context and query locations, no target values.
    pub fn single(ctx: &PointSet, x_tar: &[f64]) -> Self {
        ModelInput {
            n_tasks: 1,
            n_ctx: ctx.len(),
            n_tar: x_tar.len() / ctx.dim_x,
            dim_x: ctx.dim_x,
            dim_y: ctx.dim_y,
            x_ctx: ctx.x.clone(),
            y_ctx: ctx.y.clone(),
            x_tar: x_tar.to_vec(),
            y_tar: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b, dx, dy) = (self.n_tasks, self.dim_x, self.dim_y);
        let ok = b > 0
            && self.x_ctx.len() == b * self.n_ctx * dx
            && self.y_ctx.len() == b * self.n_ctx * dy
            && self.x_tar.len() == b * self.n_tar * dx
            && self
                .y_tar
                .as_ref()
                .is_none_or(|y| y.len() == b * self.n_tar * dy);
        if !ok {
            return Err(Error::Shape(
                "model input buffers do not match the declared sizes".into(),
            ));
        }
        Ok(())
    }

    fn ctx_task(&self, b: usize) -> (&[f64], &[f64]) {
        let (n, dx, dy) = (self.n_ctx, self.dim_x, self.dim_y);
        (
            &self.x_ctx[b * n * dx..(b + 1) * n * dx],
            &self.y_ctx[b * n * dy..(b + 1) * n * dy],
        )
    }

    /// Query inputs laid out per task.
    fn query_x(&self, queries: Queries) -> Vec<f64> {
        match queries {
            Queries::Targets => self.x_tar.clone(),
            Queries::ContextAndTargets => {
                let (nc, nt, dx) = (self.n_ctx, self.n_tar, self.dim_x);
                let mut out = Vec::with_capacity(self.n_tasks * (nc + nt) * dx);
                for b in 0..self.n_tasks {
                    out.extend_from_slice(&self.x_ctx[b * nc * dx..(b + 1) * nc * dx]);
                    out.extend_from_slice(&self.x_tar[b * nt * dx..(b + 1) * nt * dx]);
                }
                out
            }
        }
    }

    /// Observed values at the queries, laid out like [`ModelInput::query_x`].
    pub fn query_y(&self, queries: Queries) -> Result<Vec<f64>> {
        let y_tar = self
            .y_tar
            .as_ref()
            .ok_or_else(|| Error::Config("target values are required".into()))?;
        Ok(match queries {
            Queries::Targets => y_tar.clone(),
            Queries::ContextAndTargets => {
                let (nc, nt, dy) = (self.n_ctx, self.n_tar, self.dim_y);
                let mut out = Vec::with_capacity(self.n_tasks * (nc + nt) * dy);
                for b in 0..self.n_tasks {
                    out.extend_from_slice(&self.y_ctx[b * nc * dy..(b + 1) * nc * dy]);
                    out.extend_from_slice(&y_tar[b * nt * dy..(b + 1) * nt * dy]);
                }
                out
            }
        })
    }
}

/// Which points are decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Queries {
    Targets,
    /// Context points first, then targets, per task.
    ContextAndTargets,
}

/// Which distribution latent samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    /// `q(z | context ∪ targets)`; needs target values.
    Posterior,
    /// `p(z | context)`.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Latent samples for latent variants, bootstrap members for bootstrapped ones;
    /// ignored by deterministic variants.
    pub samples: usize,
    pub queries: Queries,
    pub latent: LatentSource,
}

/// Diagonal Gaussian over `z`, one row per task.
#[derive(Debug, Clone, Copy)]
pub struct LatentDistribution {
    pub mean: Var,
    pub std: Var,
}

/// Predictions for `slots * n_tasks * n_queries` rows laid out `[slot][task][query]`.
///
/// Slots are latent samples, bootstrap members, or the single deterministic prediction.
/// For bootstrapped variants slot 0 is the base path on the original context and slots
/// `1..` are the members.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub mean: Var,
    pub std: Var,
    pub slots: usize,
    pub has_base: bool,
    pub n_tasks: usize,
    pub n_queries: usize,
    /// Leading context rows within each task's queries (0 for target-only queries).
    pub n_ctx_queries: usize,
    pub dim_y: usize,
    pub q: Option<LatentDistribution>,
    pub p: Option<LatentDistribution>,
    /// Latent samples, `[slot][task]` rows.
    pub z: Option<Var>,
}

impl ModelOutput {
    /// Slots that form the predictive mixture (members only for bootstrapped outputs).
    pub fn mixture_slots(&self) -> std::ops::Range<usize> {
        if self.has_base {
            1..self.slots
        } else {
            0..self.slots
        }
    }
}

#[derive(Debug, Clone)]
struct DetPath {
    encoder: Mlp,
    /// Present for attention-based variants.
    attention: Option<(Mlp, MultiHeadAttention)>,
    null: ParamId,
}

#[derive(Debug, Clone)]
struct LatentPath {
    encoder: Mlp,
    head: Mlp,
    prior_mean: ParamId,
    prior_raw_std: ParamId,
}

#[derive(Debug, Clone)]
struct BootPath {
    encoder: Mlp,
    null: ParamId,
}

/// One neural-process variant: the parameter layout plus its forward wiring.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    layout: ParamLayout,
    det: Option<DetPath>,
    latent: Option<LatentPath>,
    boot: Option<BootPath>,
    x_embed: Linear,
    decoder: Mlp,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let bb = &cfg.backbone;
        let (h, act, dx, dy) = (bb.hidden_dim, bb.activation, cfg.dim_x, cfg.dim_y);
        let mut layout = ParamLayout::new();
        let mut dec_in = h;

        let det = v.has_deterministic_path().then(|| {
            let encoder = Mlp::new(&mut layout, "det.enc", dx + dy, h, h, bb.depth, act);
            let attention = v.attention_based().then(|| {
                let qk = Mlp::new(&mut layout, "det.qk", dx, h, h, 2, act);
                let mha = MultiHeadAttention::new(&mut layout, "det.attn", h, h, h, h, bb.n_heads);
                (qk, mha)
            });
            let null = layout.declare("det.null", 1, h, Init::Zeros);
            dec_in += h;
            DetPath {
                encoder,
                attention,
                null,
            }
        });

        let latent = v.has_latent().then(|| {
            let encoder = Mlp::new(&mut layout, "lat.enc", dx + dy, h, h, bb.depth, act);
            let head = Mlp::new(&mut layout, "lat.head", h, h, 2 * cfg.z_dim, 2, act);
            let prior_mean = layout.declare("lat.prior.mean", 1, cfg.z_dim, Init::Zeros);
            let prior_raw_std =
                layout.declare("lat.prior.raw_std", 1, cfg.z_dim, Init::Constant(0.5413));
            dec_in += cfg.z_dim;
            LatentPath {
                encoder,
                head,
                prior_mean,
                prior_raw_std,
            }
        });

        let boot = v.bootstrapped().then(|| {
            let encoder = Mlp::new(&mut layout, "boot.enc", dx + dy, h, h, bb.depth, act);
            let null = layout.declare("boot.null", 1, h, Init::Zeros);
            dec_in += h;
            BootPath { encoder, null }
        });

        let x_embed = Linear::new(&mut layout, "dec.x", dx, h, true);
        let decoder = Mlp::new(
            &mut layout,
            "dec.mlp",
            dec_in,
            h,
            2 * dy,
            bb.decoder_depth,
            act,
        );
        Ok(Model {
            cfg: cfg.clone(),
            layout,
            det,
            latent,
            boot,
            x_embed,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> ModelVariant {
        self.cfg.variant
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        self.layout.init(rng)
    }

    /// Slot count a training step uses.
    pub fn train_samples(&self, k_train: usize) -> usize {
        if self.cfg.variant.bootstrapped() {
            self.cfg.bootstrap_train
        } else {
            k_train
        }
    }

    /// Slot count an evaluation uses.
    pub fn eval_samples(&self, k_eval: usize) -> usize {
        if self.cfg.variant.bootstrapped() {
            self.cfg.bootstrap_eval
        } else {
            k_eval
        }
    }

    /// Per-point embeddings of a set of `(x, y)` rows.
    fn embed_pairs<T: Real>(
        &self,
        g: &Graph<T>,
        p: &ParamVars,
        mlp: &Mlp,
        x: &[f64],
        y: &[f64],
        n: usize,
    ) -> Result<Var> {
        let (dx, dy) = (self.cfg.dim_x, self.cfg.dim_y);
        let xy = Tensor::from_fn(n, dx + dy, |r, c| {
            if c < dx {
                T::of(x[r * dx + c])
            } else {
                T::of(y[r * dy + c - dx])
            }
        });
        mlp.apply(g, p, g.constant(xy))
    }

    /// Mean-pooled latent distribution per task from per-point embeddings. `parts` are
    /// `(embedding rows, points per task)` whose union is pooled.
    fn latent_dist<T: Real>(
        &self,
        g: &Graph<T>,
        p: &ParamVars,
        lat: &LatentPath,
        parts: &[(Var, usize)],
        n_tasks: usize,
    ) -> Result<LatentDistribution> {
        let total: usize = parts.iter().map(|(_, n)| n).sum();
        let z = self.cfg.z_dim;
        let floor = self.cfg.backbone.sigma_floor;
        if total == 0 {
            let mean = g.repeat_rows(p[lat.prior_mean], n_tasks);
            let raw = g.repeat_rows(p[lat.prior_raw_std], n_tasks);
            return Ok(LatentDistribution {
                mean,
                std: positive_transform(g, raw, floor),
            });
        }
        let mut pooled: Option<Var> = None;
        for &(emb, n) in parts.iter().filter(|(_, n)| *n > 0) {
            let m = g.group_mean(emb, n);
            let m = if n == total {
                m
            } else {
                g.scale(m, n as f64 / total as f64)
            };
            pooled = Some(match pooled {
                Some(acc) => g.add(acc, m),
                None => m,
            });
        }
        let out = lat.head.apply(g, p, pooled.expect("nonempty"))?;
        let mean = g.slice_cols(out, 0, z);
        let raw = g.slice_cols(out, z, z);
        Ok(LatentDistribution {
            mean,
            std: positive_transform(g, raw, floor),
        })
    }

    /// Runs the model on a batch. Rows of the outputs are `[slot][task][query]`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        p: &ParamVars,
        input: &ModelInput,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        input.validate()?;
        if input.dim_x != self.cfg.dim_x || input.dim_y != self.cfg.dim_y {
            return Err(Error::Shape(format!(
                "model expects ({}, {}) dimensional points, got ({}, {})",
                self.cfg.dim_x, self.cfg.dim_y, input.dim_x, input.dim_y
            )));
        }
        let v = self.cfg.variant;
        if !v.is_deterministic() && opts.samples == 0 {
            return Err(Error::Config("at least one sample is required".into()));
        }
        let (bsz, nc, nt) = (input.n_tasks, input.n_ctx, input.n_tar);
        let dx = self.cfg.dim_x;
        let nq = match opts.queries {
            Queries::Targets => nt,
            Queries::ContextAndTargets => nc + nt,
        };
        let qx = input.query_x(opts.queries);
        let xq = g.constant(Tensor::from_fn(bsz * nq, dx, |r, c| T::of(qx[r * dx + c])));

        // deterministic readout, rows [task][query]
        let det = match &self.det {
            None => None,
            Some(d) if nc == 0 => Some(g.repeat_rows(p[d.null], bsz * nq)),
            Some(d) => {
                let emb =
                    self.embed_pairs(g, p, &d.encoder, &input.x_ctx, &input.y_ctx, bsz * nc)?;
                Some(match &d.attention {
                    None => g.repeat_rows(g.group_mean(emb, nc), nq),
                    Some((qk, mha)) => {
                        let xc = g.constant(Tensor::from_fn(bsz * nc, dx, |r, c| {
                            T::of(input.x_ctx[r * dx + c])
                        }));
                        let keys = qk.apply(g, p, xc)?;
                        let queries = qk.apply(g, p, xq)?;
                        mha.apply(g, p, queries, keys, emb, bsz)?
                    }
                })
            }
        };

        let slots = if v.is_deterministic() {
            1
        } else if v.bootstrapped() {
            opts.samples + 1
        } else {
            opts.samples
        };

        // latent path
        let (mut q_dist, mut p_dist, mut z_rows) = (None, None, None);
        if let Some(lat) = &self.latent {
            let ctx_emb = (nc > 0)
                .then(|| self.embed_pairs(g, p, &lat.encoder, &input.x_ctx, &input.y_ctx, bsz * nc))
                .transpose()?;
            let ctx_part: Vec<(Var, usize)> = ctx_emb.map(|e| (e, nc)).into_iter().collect();
            let prior = self.latent_dist(g, p, lat, &ctx_part, bsz)?;
            let post = match &input.y_tar {
                Some(y_tar) if nt > 0 => {
                    let tar_emb =
                        self.embed_pairs(g, p, &lat.encoder, &input.x_tar, y_tar, bsz * nt)?;
                    let mut parts = ctx_part.clone();
                    parts.push((tar_emb, nt));
                    Some(self.latent_dist(g, p, lat, &parts, bsz)?)
                }
                _ => None,
            };
            let source = match opts.latent {
                LatentSource::Posterior => post.ok_or_else(|| {
                    Error::Config("posterior sampling needs target values".into())
                })?,
                LatentSource::Prior => prior,
            };
            let zd = self.cfg.z_dim;
            let eps: Vec<f64> = (0..slots * bsz * zd)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let eps = g.constant(Tensor::from_f64(slots * bsz, zd, &eps)?);
            let z = g.add(
                g.tile(source.mean, slots),
                g.mul(g.tile(source.std, slots), eps),
            );
            q_dist = post;
            p_dist = Some(prior);
            z_rows = Some(z);
        }

        // bootstrap slot, rows [slot][task]
        let boot = match &self.boot {
            None => None,
            Some(bp) if nc == 0 => Some(g.repeat_rows(p[bp.null], slots * bsz)),
            Some(bp) => {
                let emb =
                    self.embed_pairs(g, p, &bp.encoder, &input.x_ctx, &input.y_ctx, bsz * nc)?;
                let orders: Vec<Vec<usize>> = (0..bsz)
                    .map(|b| {
                        let (x, y) = input.ctx_task(b);
                        canonical_order(x, y, nc, dx, self.cfg.dim_y)
                            .into_iter()
                            .map(|i| b * nc + i)
                            .collect()
                    })
                    .collect();
                let mut index = Vec::with_capacity(slots * bsz * nc);
                for order in &orders {
                    index.extend(order.iter().copied());
                }
                let mut members: Vec<Vec<Vec<usize>>> = orders
                    .iter()
                    .map(|o| resample(o, opts.samples, rng))
                    .collect();
                for j in 0..opts.samples {
                    for m in members.iter_mut() {
                        index.append(&mut m[j]);
                    }
                }
                Some(g.group_mean(g.gather_rows(emb, index), nc))
            }
        };

        let mut parts = vec![g.tile(self.x_embed.apply(g, p, xq), slots)];
        if let Some(d) = det {
            parts.push(g.tile(d, slots));
        }
        if let Some(z) = z_rows {
            parts.push(g.repeat_rows(z, nq));
        }
        if let Some(b) = boot {
            parts.push(g.repeat_rows(b, nq));
        }
        let out = self.decoder.apply(g, p, g.concat(&parts))?;
        let dy = self.cfg.dim_y;
        let mean = g.slice_cols(out, 0, dy);
        let std = positive_transform(g, g.slice_cols(out, dy, dy), self.cfg.backbone.sigma_floor);
        Ok(ModelOutput {
            mean,
            std,
            slots,
            has_base: v.bootstrapped(),
            n_tasks: bsz,
            n_queries: nq,
            n_ctx_queries: if opts.queries == Queries::ContextAndTargets {
                nc
            } else {
                0
            },
            dim_y: dy,
            q: q_dist,
            p: p_dist,
            z: z_rows,
        })
    }

    /// Predictive means and standard deviations at `x_tar` given `ctx`, without
    /// targets: latent samples come from the prior, bootstrap slots are the members.
    /// Returns `slots` prediction sets, each `[n_tar * dim_y]`.
    pub fn predict<T: Real, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        ctx: &PointSet,
        x_tar: &[f64],
        samples: usize,
        rng: &mut R,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let g = Graph::new();
        let p = params.register(&g);
        let input = ModelInput::single(ctx, x_tar);
        let opts = ForwardOptions {
            samples,
            queries: Queries::Targets,
            latent: LatentSource::Prior,
        };
        let out = self.forward(&g, &p, &input, &opts, rng)?;
        let (mean, std) = (
            g.value(out.mean).to_f64_vec(),
            g.value(out.std).to_f64_vec(),
        );
        let per = out.n_queries * out.dim_y;
        Ok(out
            .mixture_slots()
            .map(|s| {
                (
                    mean[s * per..(s + 1) * per].to_vec(),
                    std[s * per..(s + 1) * per].to_vec(),
                )
            })
            .collect())
    }
}
