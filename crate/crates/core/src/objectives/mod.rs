//! Training objectives.
//!
//! The standard objective reconstructs every point (context and targets) and adds the
//! KL between the posterior and the context-conditioned prior of `z`. The robust
//! objective reconstructs targets only and adds `w_sigma` times the mean predicted
//! target variance. Deterministic variants drop the KL term. Bootstrapped variants sum
//! the base-path loss and the mean member loss.
//!
//! The KL term is summed over latent dimensions, averaged over tasks and divided by
//! the number of points per task, so it sits on the same per-point scale as the
//! reconstruction term.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::backbone::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{LatentDistribution, ModelInput, ModelOutput, ModelVariant, Queries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub include_context_in_recon: bool,
    #[serde(default)]
    pub w_sigma: f64,
    #[serde(default = "default_k_train")]
    pub k_train: usize,
}

fn default_k_train() -> usize {
    1
}

impl LossConfig {
    pub fn standard() -> Self {
        LossConfig {
            include_context_in_recon: true,
            w_sigma: 0.0,
            k_train: 1,
        }
    }

    pub fn robust(w_sigma: f64) -> Self {
        LossConfig {
            include_context_in_recon: false,
            w_sigma,
            k_train: 1,
        }
    }

    /// The configuration a variant trains with by default.
    pub fn for_variant(variant: ModelVariant, w_sigma: f64) -> Self {
        if variant.robust {
            Self::robust(w_sigma)
        } else {
            Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_train < 1 {
            return Err(Error::Config("k_train must be at least 1".into()));
        }
        if !self.w_sigma.is_finite() {
            return Err(Error::Config("w_sigma must be finite".into()));
        }
        Ok(())
    }

    /// Points the forward pass must decode for this loss.
    pub fn queries(&self) -> Queries {
        if self.include_context_in_recon {
            Queries::ContextAndTargets
        } else {
            Queries::Targets
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub kl: f64,
    pub var_penalty: f64,
    pub w_sigma: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(recon_nll: f64, kl: f64, var_penalty: f64, w_sigma: f64) -> Self {
        LossBreakdown {
            recon_nll,
            kl,
            var_penalty,
            w_sigma,
            total: recon_nll + kl + w_sigma * var_penalty,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.recon_nll, self.kl, self.var_penalty, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A differentiable loss and its reported parts.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Elementwise `log N(y; mu, sigma^2)`.
pub fn gaussian_log_pdf<T: Real>(g: &Graph<T>, y: Var, mu: Var, sigma: Var) -> Var {
    let z = g.div(g.sub(y, mu), sigma);
    let quad = g.scale(g.square(z), -0.5);
    let norm = g.offset(g.scale(g.log(sigma), -1.0), -0.5 * (2.0 * PI).ln());
    g.add(quad, norm)
}

pub fn gaussian_log_pdf_value(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Numerical(format!(
            "standard deviation {sigma} must be positive"
        )));
    }
    let z = (y - mu) / sigma;
    Ok(-0.5 * (2.0 * PI).ln() - sigma.ln() - 0.5 * z * z)
}

/// `KL(q || p)` summed over columns: `[rows, d] -> [rows, 1]`.
pub fn diag_gaussian_kl<T: Real>(
    g: &Graph<T>,
    q: &LatentDistribution,
    p: &LatentDistribution,
) -> Var {
    let log_ratio = g.sub(g.log(p.std), g.log(q.std));
    let num = g.add(g.square(q.std), g.square(g.sub(q.mean, p.mean)));
    let frac = g.div(num, g.scale(g.square(p.std), 2.0));
    g.row_sum(g.offset(g.add(log_ratio, frac), -0.5))
}

pub fn diag_gaussian_kl_value(q_mean: &[f64], q_std: &[f64], p_mean: &[f64], p_std: &[f64]) -> f64 {
    q_mean
        .iter()
        .zip(q_std)
        .zip(p_mean.iter().zip(p_std))
        .map(|((&mq, &sq), (&mp, &sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

/// Output rows (and matching query indices) for the given slots, keeping context rows
/// only when `with_context`.
fn select_rows(
    out: &ModelOutput,
    slots: std::ops::Range<usize>,
    with_context: bool,
) -> Vec<(usize, usize)> {
    let nq = out.n_queries;
    let start = if with_context { 0 } else { out.n_ctx_queries };
    let mut rows = Vec::new();
    for s in slots {
        for b in 0..out.n_tasks {
            for q in start..nq {
                rows.push(((s * out.n_tasks + b) * nq + q, b * nq + q));
            }
        }
    }
    rows
}

/// `x` restricted to the selected rows; no copy when every row is selected in order.
fn gather<T: Real>(g: &Graph<T>, x: Var, rows: &[(usize, usize)]) -> Var {
    let (total, _) = g.shape(x);
    if rows.len() == total && rows.iter().enumerate().all(|(i, r)| r.0 == i) {
        return x;
    }
    g.gather_rows(x, rows.iter().map(|r| r.0).collect())
}

struct SlotTerms {
    recon: Var,
    var_pen: Var,
}

/// Negative mean log likelihood and mean target variance over one group of slots.
fn slot_terms<T: Real>(
    g: &Graph<T>,
    out: &ModelOutput,
    y_query: &[f64],
    slots: std::ops::Range<usize>,
    with_context: bool,
) -> SlotTerms {
    let dy = out.dim_y;
    let rows = select_rows(out, slots.clone(), with_context);
    let y = Tensor::from_fn(rows.len(), dy, |r, c| T::of(y_query[rows[r].1 * dy + c]));
    let mu = gather(g, out.mean, &rows);
    let sd = gather(g, out.std, &rows);
    let recon = g.scale(g.mean(gaussian_log_pdf(g, g.constant(y), mu, sd)), -1.0);
    let tar_rows = if with_context && out.n_ctx_queries > 0 {
        select_rows(out, slots, false)
    } else {
        rows
    };
    let sd_tar = gather(g, out.std, &tar_rows);
    let var_pen = g.mean(g.square(sd_tar));
    SlotTerms { recon, var_pen }
}

/// Mean target variance over every mixture slot, task and target.
pub fn variance_penalty<T: Real>(g: &Graph<T>, out: &ModelOutput) -> Var {
    let rows = select_rows(out, 0..out.slots, false);
    g.mean(g.square(gather(g, out.std, &rows)))
}

fn check_queries(out: &ModelOutput, input: &ModelInput, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.include_context_in_recon && input.n_ctx > 0 && out.n_ctx_queries != input.n_ctx {
        return Err(Error::Config(
            "reconstructing context points needs context queries in the forward pass".into(),
        ));
    }
    if input.y_tar.is_none() {
        return Err(Error::Config("losses need target values".into()));
    }
    Ok(())
}

fn assemble<T: Real>(
    g: &Graph<T>,
    out: &ModelOutput,
    input: &ModelInput,
    cfg: &LossConfig,
    w_sigma: f64,
    with_kl: bool,
) -> Result<Loss> {
    check_queries(out, input, cfg)?;
    let queries = if out.n_ctx_queries > 0 {
        Queries::ContextAndTargets
    } else {
        Queries::Targets
    };
    let y_query = input.query_y(queries)?;
    let with_context = cfg.include_context_in_recon;

    let (recon, var_pen) = if out.has_base {
        let base = slot_terms(g, out, &y_query, 0..1, with_context);
        let members = slot_terms(g, out, &y_query, 1..out.slots, with_context);
        (
            g.add(base.recon, members.recon),
            g.add(base.var_pen, members.var_pen),
        )
    } else {
        let t = slot_terms(g, out, &y_query, 0..out.slots, with_context);
        (t.recon, t.var_pen)
    };

    let kl = if with_kl {
        let (q, p) = match (&out.q, &out.p) {
            (Some(q), Some(p)) => (q, p),
            _ => return Err(Error::Config("KL term needs a latent variant".into())),
        };
        let points = (input.n_ctx + input.n_tar).max(1);
        Some(g.scale(g.mean(diag_gaussian_kl(g, q, p)), 1.0 / points as f64))
    } else {
        None
    };

    let mut total = match kl {
        Some(k) => g.add(recon, k),
        None => recon,
    };
    if w_sigma != 0.0 {
        total = g.add(total, g.scale(var_pen, w_sigma));
    }
    let breakdown = LossBreakdown::assemble(
        g.scalar(recon).f64(),
        kl.map_or(0.0, |k| g.scalar(k).f64()),
        g.scalar(var_pen).f64(),
        w_sigma,
    );
    Ok(Loss { total, breakdown })
}

/// The standard latent objective: reconstruction plus KL, no variance term.
pub fn np_loss<T: Real>(
    g: &Graph<T>,
    out: &ModelOutput,
    input: &ModelInput,
    cfg: &LossConfig,
) -> Result<Loss> {
    if out.q.is_none() {
        return Err(Error::Config(
            "np_loss needs a latent variant; use cnp_loss".into(),
        ));
    }
    assemble(g, out, input, cfg, 0.0, true)
}

/// Likelihood loss for variants without a latent variable.
pub fn cnp_loss<T: Real>(
    g: &Graph<T>,
    out: &ModelOutput,
    input: &ModelInput,
    cfg: &LossConfig,
) -> Result<Loss> {
    if out.q.is_some() {
        return Err(Error::Config(
            "cnp_loss is for variants without a latent; use np_loss".into(),
        ));
    }
    assemble(g, out, input, cfg, 0.0, false)
}

/// Target-only reconstruction (unless configured otherwise), KL for latent variants and
/// `w_sigma` times the variance penalty.
pub fn robust_loss<T: Real>(
    g: &Graph<T>,
    out: &ModelOutput,
    input: &ModelInput,
    cfg: &LossConfig,
) -> Result<Loss> {
    assemble(g, out, input, cfg, cfg.w_sigma, out.q.is_some())
}

/// Picks the objective for a variant: the robust one for `r-` variants, otherwise the
/// standard latent or likelihood loss.
pub fn training_loss<T: Real>(
    g: &Graph<T>,
    variant: ModelVariant,
    out: &ModelOutput,
    input: &ModelInput,
    cfg: &LossConfig,
) -> Result<Loss> {
    if variant.robust {
        robust_loss(g, out, input, cfg)
    } else if out.q.is_some() {
        np_loss(g, out, input, cfg)
    } else {
        cnp_loss(g, out, input, cfg)
    }
}
