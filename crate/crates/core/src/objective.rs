//! The training objective: per-environment negative ELBO with annealed KL
//! weight, the expected-L0 gate sparsity term, and the cross-environment
//! gradient-variance penalty.

use crate::autodiff::{Graph, Reduce, Tensor, Var};
use crate::model::{self, GateVars, ModelVars};

/// KL of `N(mean, exp(log_sigma)^2)` to `N(0, I)`, summed per row (`B x 1`).
pub fn kl_std_gaussian(g: &mut Graph, mean: Var, log_sigma: Var) -> Var {
    let m2 = g.square(mean);
    let two_ls = g.scale(log_sigma, 2.0);
    let s2 = g.exp(two_ls);
    let a = g.add(m2, s2);
    let b = g.sub(a, two_ls);
    let one = g.scalar_constant(1.0);
    let c = g.sub(b, one);
    let rows = g.sum_over(c, Reduce::OverCols);
    g.scale(rows, 0.5)
}

/// Closed-form KL to the standard normal from explicit sigmas.
pub fn kl_std_gaussian_value(mean: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln())
        .sum::<f64>()
}

/// `sum Phi(alpha / sigma_eps) + sum Phi(beta / sigma_eps)`.
pub fn l0_surrogate(g: &mut Graph, alpha: Var, beta: Var, sigma_eps: f64) -> Var {
    let a = g.scale(alpha, 1.0 / sigma_eps);
    let b = g.scale(beta, 1.0 / sigma_eps);
    let pa = g.normal_cdf(a);
    let pb = g.normal_cdf(b);
    let sa = g.sum(pa);
    let sb = g.sum(pb);
    g.add(sa, sb)
}

/// `sum_t ||g_t - mean_t g_t||^2` where `grads[t]` lists one gradient node
/// per parameter tensor.
pub fn variance_penalty(g: &mut Graph, grads: &[Vec<Var>]) -> Var {
    let t = grads.len();
    let n_params = grads.first().map_or(0, Vec::len);
    let mut total: Option<Var> = None;
    for p in 0..n_params {
        let mut sum = grads[0][p];
        for env in &grads[1..] {
            sum = g.add(sum, env[p]);
        }
        let mean = g.scale(sum, 1.0 / t as f64);
        for env in grads {
            let d = g.sub(env[p], mean);
            let sq = g.square(d);
            let s = g.sum(sq);
            total = Some(match total {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
    }
    total.unwrap_or_else(|| g.scalar_constant(0.0))
}

/// Penalty value from flattened per-environment gradients.
pub fn variance_penalty_value(grads: &[Vec<f64>]) -> f64 {
    let t = grads.len() as f64;
    let n = grads.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..n)
        .map(|k| grads.iter().map(|gt| gt[k]).sum::<f64>() / t)
        .collect();
    grads
        .iter()
        .map(|gt| gt.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum()
}

/// Linear warmup of the KL weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub target: f64,
    pub warmup_steps: u64,
}

impl AnnealSchedule {
    pub fn new(target: f64, planned_steps: u64, fraction: f64) -> Self {
        Self {
            target,
            warmup_steps: (planned_steps as f64 * fraction).round() as u64,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.target
        } else {
            self.target * step as f64 / self.warmup_steps as f64
        }
    }
}

/// One batch of users and their per-environment inputs.
#[derive(Clone, Debug)]
pub struct EnvBatch {
    /// Multi-hot inputs, one `B x I` tensor per environment.
    pub x: Vec<Tensor>,
    /// `N_t` per environment, `counts[t][row]`.
    pub counts: Vec<Vec<usize>>,
}

impl EnvBatch {
    pub fn from_lists(envs: &[Vec<&[u32]>], items: usize) -> Self {
        Self {
            x: envs.iter().map(|lists| model::multihot_batch(lists, items)).collect(),
            counts: envs
                .iter()
                .map(|lists| lists.iter().map(|l| l.len()).collect())
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.x.first().map_or(0, Tensor::rows)
    }

    pub fn num_envs(&self) -> usize {
        self.x.len()
    }
}

/// Externally drawn randomness for one batch.
#[derive(Clone, Debug)]
pub struct BatchNoise {
    /// Dropout mask per environment; `None` disables dropout.
    pub masks: Vec<Option<Tensor>>,
    /// `e_noise[s][t]`, `B x K`, per Monte-Carlo sample and environment.
    pub e_noise: Vec<Vec<Tensor>>,
    /// `z_noise[s][t]`, `B x H`.
    pub z_noise: Vec<Vec<Tensor>>,
}

impl BatchNoise {
    /// All noise zero and no dropout: the posterior-mean path.
    pub fn zeros(batch: &EnvBatch, k: usize, h: usize) -> Self {
        let t = batch.num_envs();
        let b = batch.rows();
        Self {
            masks: vec![None; t],
            e_noise: vec![vec![Tensor::zeros(b, k); t]],
            z_noise: vec![vec![Tensor::zeros(b, h); t]],
        }
    }
}

/// Graph handles of the per-environment ELBO terms.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    /// Scaled reconstruction term per environment (`1 x 1`).
    pub recon: Vec<Var>,
    /// Scaled KL term per environment (`1 x 1`).
    pub kl: Vec<Var>,
    /// `recon_t + lambda1 * kl_t`.
    pub env_loss: Vec<Var>,
}

/// Builds the per-environment negative ELBO for a batch.
///
/// Row sums are multiplied by `scale` (the trainer passes `1 / batch size`).
/// Reconstruction is averaged over the Monte-Carlo samples in `noise`. When
/// `normalize_by_count` is set each user's reconstruction in environment `t`
/// is divided by `N_t`; empty environments contribute zero reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn elbo_terms(
    g: &mut Graph,
    mv: &ModelVars,
    gates: &GateVars,
    batch: &EnvBatch,
    noise: &BatchNoise,
    lambda1: f64,
    scale: f64,
    normalize_by_count: bool,
) -> ElboTerms {
    let t_envs = batch.num_envs();
    let samples = noise.e_noise.len();
    let mut enc = Vec::with_capacity(t_envs);
    let mut kl = Vec::with_capacity(t_envs);
    for t in 0..t_envs {
        let (mean, log_sigma) = model::encode(g, mv, &batch.x[t], noise.masks[t].as_ref());
        let rows = kl_std_gaussian(g, mean, log_sigma);
        let s = g.sum(rows);
        kl.push(g.scale(s, scale));
        enc.push((mean, log_sigma));
    }

    let mut recon_acc: Vec<Option<Var>> = vec![None; t_envs];
    for s in 0..samples {
        let b = batch.rows();
        let h = g.shape(mv.trans_w).1 / 2;
        let mut z_prev = g.constant(Tensor::zeros(b, h));
        for t in 0..t_envs {
            let (mean, log_sigma) = enc[t];
            let e = model::reparam_sample(g, mean, log_sigma, &noise.e_noise[s][t]);
            let (zm, zls) = model::transition(g, mv, e, z_prev);
            let z = model::reparam_sample(g, zm, zls, &noise.z_noise[s][t]);
            let logits = model::decode(g, mv, gates, z);
            let x = g.constant(batch.x[t].clone());
            let mut ll = model::log_multinomial(g, x, logits);
            if normalize_by_count {
                let inv: Vec<f64> = batch.counts[t]
                    .iter()
                    .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
                    .collect();
                let inv = g.constant(Tensor::col(inv));
                ll = g.mul(ll, inv);
            }
            let total = g.sum(ll);
            let term = g.scale(total, -scale / samples as f64);
            recon_acc[t] = Some(match recon_acc[t] {
                Some(a) => g.add(a, term),
                None => term,
            });
            z_prev = z;
        }
    }
    let recon: Vec<Var> = recon_acc.into_iter().map(|v| v.expect("at least one sample")).collect();
    let env_loss = recon
        .iter()
        .zip(&kl)
        .map(|(&r, &k)| {
            let wk = g.scale(k, lambda1);
            g.add(r, wk)
        })
        .collect();
    ElboTerms { recon, kl, env_loss }
}

/// `sum_t env_loss_t + lambda2 * l0 + lambda3 * penalty`, skipping absent
/// terms.
pub fn total_loss(
    g: &mut Graph,
    env_loss: &[Var],
    l0: Option<Var>,
    lambda2: f64,
    penalty: Option<Var>,
    lambda3: f64,
) -> Var {
    let mut total = env_loss[0];
    for &l in &env_loss[1..] {
        total = g.add(total, l);
    }
    if let Some(l0) = l0 {
        let w = g.scale(l0, lambda2);
        total = g.add(total, w);
    }
    if let Some(p) = penalty {
        let w = g.scale(p, lambda3);
        total = g.add(total, w);
    }
    total
}

/// Numeric summary of one evaluated loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub lambda1: f64,
    pub l0: f64,
    /// `None` when the penalty was not computed (`lambda3 = 0`).
    pub penalty: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from its parts.
    pub fn assemble(&self, lambda2: f64, lambda3: f64) -> f64 {
        let elbo: f64 = self
            .recon
            .iter()
            .zip(&self.kl)
            .map(|(r, k)| r + self.lambda1 * k)
            .sum();
        elbo + lambda2 * self.l0 + lambda3 * self.penalty.unwrap_or(0.0)
    }

    /// Adds another breakdown's components (for chunked batches).
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        if self.recon.is_empty() {
            self.recon = vec![0.0; other.recon.len()];
            self.kl = vec![0.0; other.kl.len()];
        }
        for (a, b) in self.recon.iter_mut().zip(&other.recon) {
            *a += b;
        }
        for (a, b) in self.kl.iter_mut().zip(&other.kl) {
            *a += b;
        }
        self.lambda1 = other.lambda1;
    }
}

/// The complete batch loss on one graph, penalty included.
///
/// This is the reference assembly used for gradient checks; the trainer
/// splits the same computation across user chunks.
#[allow(clippy::too_many_arguments)]
pub fn full_loss(
    g: &mut Graph,
    mv: &ModelVars,
    batch: &EnvBatch,
    noise: &BatchNoise,
    gate_noise: Option<&model::GateNoise>,
    cfg: &LossWeights,
    penalty_params: &[Var],
) -> (Var, ElboTerms, Var, Option<Var>) {
    let gates = model::draw_gates(g, mv.alpha, mv.beta, cfg.sigma_eps, gate_noise);
    let scale = 1.0 / batch.rows() as f64;
    let terms = elbo_terms(g, mv, &gates, batch, noise, cfg.lambda1, scale, cfg.normalize_by_count);
    let l0 = l0_surrogate(g, mv.alpha, mv.beta, cfg.sigma_eps);
    let penalty = if cfg.lambda3 > 0.0 {
        let grads: Vec<Vec<Var>> = terms
            .env_loss
            .iter()
            .map(|&l| g.grad(l, penalty_params).expect("scalar env loss"))
            .collect();
        Some(variance_penalty(g, &grads))
    } else {
        None
    };
    let total = total_loss(g, &terms.env_loss, Some(l0), cfg.lambda2, penalty, cfg.lambda3);
    (total, terms, l0, penalty)
}

/// Loss weights and switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub sigma_eps: f64,
    pub normalize_by_count: bool,
}
