//! Target log-likelihood on clean targets.
//!
//! Latent variants use importance sampling with `q` conditioned on the (noisy) context
//! and the clean targets: per task,
//! `(logsumexp_k [log p(y_tar | z_k) + log p(z_k | ctx) - log q(z_k | ctx, tar)] - ln K) / n_tar`.
//! Bootstrapped variants score the equal-weight mixture of their members per point, and
//! deterministic variants the plain mean log density. Log densities of multi-channel
//! points sum over channels.

use rand::Rng;

use crate::backbone::{Graph, ParamStore, Real};
use crate::error::{Error, Result};
use crate::funcdata::{gp_posterior_oracle, TaskBatch};
use crate::models::{
    ForwardOptions, LatentSource, Model, ModelInput, ModelOutput, Queries, TargetValues,
};
use crate::objectives::gaussian_log_pdf_value;

/// Latent samples decoded per forward pass; bounds memory for large `K`.
pub const SAMPLE_CHUNK: usize = 10;

/// `log(sum(exp(v)))` without overflow.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn diag_log_pdf(z: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    z.iter()
        .zip(mean.iter().zip(std))
        .map(|(&z, (&m, &s))| gaussian_log_pdf_value(z, m, s).unwrap_or(f64::NEG_INFINITY))
        .sum()
}

/// Per-task importance estimates from `[sample][task]` laid out log terms.
pub fn importance_estimate(
    log_lik: &[f64],
    log_p: &[f64],
    log_q: &[f64],
    n_tasks: usize,
    n_tar: usize,
) -> Vec<f64> {
    let k = log_lik.len() / n_tasks;
    (0..n_tasks)
        .map(|b| {
            let w: Vec<f64> = (0..k)
                .map(|s| log_lik[s * n_tasks + b] + log_p[s * n_tasks + b] - log_q[s * n_tasks + b])
                .collect();
            (logsumexp(&w) - (k as f64).ln()) / n_tar as f64
        })
        .collect()
}

/// Per-point log densities summed over channels, `[slot][task][target]`.
fn point_log_densities<T: Real>(g: &Graph<T>, out: &ModelOutput, y: &[f64]) -> Result<Vec<f64>> {
    let (mean, std) = (
        g.value(out.mean).to_f64_vec(),
        g.value(out.std).to_f64_vec(),
    );
    let dy = out.dim_y;
    let per_slot = out.n_tasks * out.n_queries;
    let mut dens = Vec::with_capacity(out.slots * per_slot);
    for s in 0..out.slots {
        for r in 0..per_slot {
            let mut acc = 0.0;
            for c in 0..dy {
                let i = (s * per_slot + r) * dy + c;
                acc += gaussian_log_pdf_value(y[r * dy + c], mean[i], std[i])?;
            }
            dens.push(acc);
        }
    }
    Ok(dens)
}

/// Per-task average log-likelihood of the clean targets of `batch`.
pub fn task_log_likelihoods<T: Real, R: Rng + ?Sized>(
    model: &Model,
    params: &ParamStore<T>,
    batch: &TaskBatch,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let input = ModelInput::from_batch(batch, TargetValues::Clean)?;
    if input.n_tar == 0 {
        return Err(Error::Config("evaluation needs at least one target".into()));
    }
    let y = input.query_y(Queries::Targets)?;
    let (bsz, nt) = (input.n_tasks, input.n_tar);
    let v = model.variant();

    if !v.has_latent() {
        let g = Graph::new();
        let p = params.register(&g);
        let opts = ForwardOptions {
            samples: model.eval_samples(k),
            queries: Queries::Targets,
            latent: LatentSource::Prior,
        };
        let out = model.forward(&g, &p, &input, &opts, rng)?;
        let dens = point_log_densities(&g, &out, &y)?;
        let per_slot = bsz * nt;
        let slots: Vec<usize> = out.mixture_slots().collect();
        let ln_m = (slots.len() as f64).ln();
        return Ok((0..bsz)
            .map(|b| {
                let total: f64 = (0..nt)
                    .map(|t| {
                        let r = b * nt + t;
                        let v: Vec<f64> = slots.iter().map(|&s| dens[s * per_slot + r]).collect();
                        logsumexp(&v) - ln_m
                    })
                    .sum();
                total / nt as f64
            })
            .collect());
    }

    let (mut log_lik, mut log_p, mut log_q) = (Vec::new(), Vec::new(), Vec::new());
    let mut done = 0;
    while done < k {
        let chunk = SAMPLE_CHUNK.min(k - done);
        let g = Graph::new();
        let p = params.register(&g);
        let opts = ForwardOptions {
            samples: chunk,
            queries: Queries::Targets,
            latent: LatentSource::Posterior,
        };
        let out = model.forward(&g, &p, &input, &opts, rng)?;
        let dens = point_log_densities(&g, &out, &y)?;
        let (q, pr, z) = match (&out.q, &out.p, out.z) {
            (Some(q), Some(p), Some(z)) => (q, p, z),
            _ => {
                return Err(Error::Config(
                    "latent variant produced no latent samples".into(),
                ))
            }
        };
        let z = g.value(z).to_f64_vec();
        let (qm, qs) = (g.value(q.mean).to_f64_vec(), g.value(q.std).to_f64_vec());
        let (pm, ps) = (g.value(pr.mean).to_f64_vec(), g.value(pr.std).to_f64_vec());
        let zd = model.config().z_dim;
        for s in 0..chunk {
            for b in 0..bsz {
                let row = s * bsz + b;
                log_lik.push((0..nt).map(|t| dens[row * nt + t]).sum::<f64>());
                let zr = &z[row * zd..(row + 1) * zd];
                let task = b * zd..(b + 1) * zd;
                log_p.push(diag_log_pdf(zr, &pm[task.clone()], &ps[task.clone()]));
                log_q.push(diag_log_pdf(zr, &qm[task.clone()], &qs[task]));
            }
        }
        done += chunk;
    }
    Ok(importance_estimate(&log_lik, &log_p, &log_q, bsz, nt))
}

/// Batch-averaged [`task_log_likelihoods`].
pub fn target_log_likelihood<T: Real, R: Rng + ?Sized>(
    model: &Model,
    params: &ParamStore<T>,
    batch: &TaskBatch,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    let v = task_log_likelihoods(model, params, batch, k, rng)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Decoder rows one forward pass may produce before the batch is split by task.
pub const MAX_ROWS: usize = 1 << 14;

/// Task-weighted mean of [`task_log_likelihoods`] over several batches, splitting large
/// batches by task to bound memory. Returns the mean and the number of tasks.
pub fn evaluate_batches<T: Real, R: Rng + ?Sized>(
    model: &Model,
    params: &ParamStore<T>,
    batches: &[TaskBatch],
    k: usize,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let v = model.variant();
    let slots = if v.bootstrapped() {
        model.eval_samples(k) + 1
    } else if v.has_latent() {
        k.min(SAMPLE_CHUNK)
    } else {
        1
    };
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        let per_task = slots * (b.n_ctx() + b.n_tar()).max(1);
        let step = (MAX_ROWS / per_task).max(1);
        for chunk in b.tasks.chunks(step) {
            let sub = TaskBatch {
                setup: b.setup,
                phase: b.phase,
                tasks: chunk.to_vec(),
            };
            let ll = task_log_likelihoods(model, params, &sub, k, rng)?;
            total += ll.iter().sum::<f64>();
            n += ll.len();
        }
    }
    if n == 0 {
        return Err(Error::Config("no evaluation tasks".into()));
    }
    Ok((total / n as f64, n))
}

/// Per-task log-likelihood of the clean targets under the generating Gaussian process,
/// conditioned on the context as given, with the sampling jitter as observation noise.
pub fn oracle_task_log_likelihoods(batch: &TaskBatch) -> Result<Vec<f64>> {
    batch
        .tasks
        .iter()
        .map(|t| {
            let params = t
                .kernel
                .as_ref()
                .ok_or_else(|| Error::Config("the oracle needs Gaussian-process tasks".into()))?;
            let post =
                gp_posterior_oracle(params, &t.ctx, t.jitter, &t.tar.x, Some(&t.clean_tar_y))?;
            Ok(post.log_likelihood.expect("query values supplied") / t.tar.len() as f64)
        })
        .collect()
}
