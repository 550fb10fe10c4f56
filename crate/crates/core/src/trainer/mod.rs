//! Batched multi-environment training with Adam, early stopping on
//! validation Recall@10, and checkpointing.
//!
//! A batch is split into fixed-size user chunks, each with its own graph.
//! Chunks run in parallel; their results are reduced in chunk order, so the
//! outcome depends only on the seed and configuration. The variance penalty
//! couples chunks through the batch-mean gradients, so it is applied in two
//! passes: the first collects every chunk's per-environment gradients, the
//! second differentiates each chunk's share of the penalty against the
//! reduced residuals.

mod adam;
mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::TrainConfig;
use crate::dataio::{divide_environments, Dataset, Split};
use crate::eval::{evaluate, EvalOptions, RecallDenominator};
use crate::inference::Strategy;
use crate::model::{self, CdrModel, Dims, GateNoise, ModelVars};
use crate::objective::{self, AnnealSchedule, BatchNoise, ElboTerms, EnvBatch, LossBreakdown};
use crate::par::*;
use crate::rng::{self, Purpose};

/// Users per training graph.
pub const TRAIN_CHUNK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no user has at least {needed} training interactions")]
    NoUsers { needed: usize },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: u64,
        last_finite: Box<Checkpoint>,
    },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Training users with their environments.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub users: Vec<usize>,
    /// `envs[j][t]`: sorted items of training user `j` in environment `t`.
    pub envs: Vec<Vec<Vec<u32>>>,
    pub dropped: Vec<usize>,
}

impl TrainingSet {
    pub fn build(ds: &Dataset, t_train: usize) -> Result<Self, TrainError> {
        let mut users = Vec::new();
        let mut envs = Vec::new();
        let mut dropped = Vec::new();
        for u in 0..ds.num_users() {
            match divide_environments(&ds.split_items(u, Split::Train), t_train) {
                Ok(s) => {
                    users.push(u);
                    envs.push(s.envs);
                }
                Err(_) => dropped.push(u),
            }
        }
        if !dropped.is_empty() {
            log::warn!(
                "dropped {} users with fewer than {t_train} training interactions",
                dropped.len()
            );
        }
        if users.is_empty() {
            return Err(TrainError::NoUsers { needed: t_train });
        }
        Ok(Self { users, envs, dropped })
    }
}

/// One epoch of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub l0: f64,
    pub penalty: Option<f64>,
    pub lambda1: f64,
    pub val_recall: f64,
    pub val_ndcg: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn to_record(&self) -> String {
        let penalty = self.penalty.map_or_else(|| "skipped".to_string(), |p| format!("{p:.6e}"));
        format!(
            "epoch={} loss={:.6} recon={:.6} kl={:.6} l0={:.6} penalty={penalty} lambda1={:.4} val_recall@10={:.6} val_ndcg@10={:.6} secs={:.3}",
            self.epoch, self.loss, self.recon, self.kl, self.l0, self.lambda1, self.val_recall, self.val_ndcg, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Recall@10.
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub dropped_users: Vec<usize>,
}

/// Gradient and loss parts of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub grad: Vec<f64>,
    pub breakdown: LossBreakdown,
}

struct ChunkPass {
    g: Graph,
    mv: ModelVars,
    terms: ElboTerms,
    env_grads: Vec<Vec<Var>>,
    env_grad_values: Vec<Vec<f64>>,
}

pub fn batch_noise(
    cfg: &TrainConfig,
    dims: &Dims,
    step: u64,
    users: &[usize],
    t_envs: usize,
) -> BatchNoise {
    let (k, h, items) = (dims.k, dims.h, dims.items);
    let rows = users.len();
    let masks = (0..t_envs)
        .map(|t| {
            if cfg.dropout == 0.0 {
                return None;
            }
            let mut data = Vec::with_capacity(rows * items);
            for &u in users {
                let mut r = rng::stream(cfg.seed, step, u as u64, t as u64, Purpose::Dropout);
                data.extend_from_slice(model::dropout_mask(&mut r, 1, items, cfg.dropout).data());
            }
            Some(Tensor::new(rows, items, data))
        })
        .collect();
    let draw = |purpose: Purpose, width: usize, s: usize, t: usize| {
        let mut data = Vec::with_capacity(rows * width);
        for &u in users {
            let key = (s * t_envs + t) as u64;
            let mut r = rng::stream(cfg.seed, step, u as u64, key, purpose);
            data.extend(rng::normal_vec(&mut r, width));
        }
        Tensor::new(rows, width, data)
    };
    let e_noise = (0..cfg.mc_samples)
        .map(|s| (0..t_envs).map(|t| draw(Purpose::ENoise, k, s, t)).collect())
        .collect();
    let z_noise = (0..cfg.mc_samples)
        .map(|s| (0..t_envs).map(|t| draw(Purpose::ZNoise, h, s, t)).collect())
        .collect();
    BatchNoise {
        masks,
        e_noise,
        z_noise,
    }
}

/// Gradient of the batch loss at the current parameters.
///
/// `batch` lists positions in `set`. The returned breakdown holds the batch
/// components; its `total` is the full objective.
pub fn batch_gradient(
    model: &CdrModel,
    cfg: &TrainConfig,
    set: &TrainingSet,
    batch: &[usize],
    step: u64,
    lambda1: f64,
) -> StepResult {
    let dims = &model.dims;
    let t_envs = cfg.t_train;
    let scale = 1.0 / batch.len() as f64;
    let gate_noise = GateNoise::sample(
        &mut rng::stream(cfg.seed, step, 0, 0, Purpose::GateNoise),
        dims,
        cfg.sigma_eps,
    );
    let subset: Vec<usize> = model
        .params
        .names()
        .enumerate()
        .filter(|(_, n)| cfg.penalty_subset.includes(n))
        .map(|(i, _)| i)
        .collect();
    let with_penalty = cfg.lambda3 > 0.0 && t_envs > 1;

    let chunks: Vec<&[usize]> = batch.chunks(TRAIN_CHUNK).collect();
    let passes: Vec<ChunkPass> = chunks
        .par_iter()
        .map(|chunk| {
            let users: Vec<usize> = chunk.iter().map(|&j| set.users[j]).collect();
            let lists: Vec<Vec<&[u32]>> = (0..t_envs)
                .map(|t| chunk.iter().map(|&j| set.envs[j][t].as_slice()).collect())
                .collect();
            let eb = EnvBatch::from_lists(&lists, dims.items);
            let noise = batch_noise(cfg, dims, step, &users, t_envs);
            let mut g = Graph::new();
            let mv = model.bind(&mut g);
            let gates = model::draw_gates(&mut g, mv.alpha, mv.beta, cfg.sigma_eps, Some(&gate_noise));
            let terms = objective::elbo_terms(
                &mut g,
                &mv,
                &gates,
                &eb,
                &noise,
                lambda1,
                scale,
                cfg.normalize_by_count,
            );
            let mut env_grads = Vec::new();
            let mut env_grad_values = Vec::new();
            if with_penalty {
                let wrt: Vec<Var> = subset.iter().map(|&i| mv.all[i]).collect();
                for &l in &terms.env_loss {
                    let gs = g.grad(l, &wrt).expect("scalar environment loss");
                    env_grad_values.push(gs.iter().flat_map(|v| g.value(*v).data().to_vec()).collect());
                    env_grads.push(gs);
                }
            }
            ChunkPass {
                g,
                mv,
                terms,
                env_grads,
                env_grad_values,
            }
        })
        .collect();

    let mut breakdown = LossBreakdown {
        lambda1,
        ..LossBreakdown::default()
    };
    for p in &passes {
        breakdown.accumulate(&LossBreakdown {
            recon: p.terms.recon.iter().map(|&v| p.g.scalar(v)).collect(),
            kl: p.terms.kl.iter().map(|&v| p.g.scalar(v)).collect(),
            lambda1,
            ..LossBreakdown::default()
        });
    }

    // Reduced per-environment gradients and penalty residuals.
    let residuals: Option<Vec<Vec<f64>>> = with_penalty.then(|| {
        let n = passes[0].env_grad_values[0].len();
        let mut env_totals = vec![vec![0.0; n]; t_envs];
        for p in &passes {
            for (tot, gv) in env_totals.iter_mut().zip(&p.env_grad_values) {
                for (a, b) in tot.iter_mut().zip(gv) {
                    *a += b;
                }
            }
        }
        breakdown.penalty = Some(objective::variance_penalty_value(&env_totals));
        let mean: Vec<f64> = (0..n)
            .map(|k| env_totals.iter().map(|e| e[k]).sum::<f64>() / t_envs as f64)
            .collect();
        env_totals
            .iter()
            .map(|e| e.iter().zip(&mean).map(|(a, m)| 2.0 * (a - m)).collect())
            .collect()
    });
    if cfg.lambda3 > 0.0 && !with_penalty {
        breakdown.penalty = Some(0.0);
    }

    let grads: Vec<Vec<f64>> = passes
        .into_par_iter()
        .map(|mut p| {
            let g = &mut p.g;
            let mut obj = objective::total_loss(g, &p.terms.env_loss, None, 0.0, None, 0.0);
            if let Some(res) = &residuals {
                let mut acc: Option<Var> = None;
                for (gs, r) in p.env_grads.iter().zip(res) {
                    let mut offset = 0;
                    for &gv in gs {
                        let (rows, cols) = g.shape(gv);
                        let coef = g.constant(Tensor::new(rows, cols, r[offset..offset + rows * cols].to_vec()));
                        offset += rows * cols;
                        let prod = g.mul(gv, coef);
                        let s = g.sum(prod);
                        acc = Some(match acc {
                            Some(a) => g.add(a, s),
                            None => s,
                        });
                    }
                }
                if let Some(a) = acc {
                    let w = g.scale(a, cfg.lambda3);
                    obj = g.add(obj, w);
                }
            }
            g.grad_vector(obj, &p.mv.all).expect("scalar objective")
        })
        .collect();

    let mut grad = vec![0.0; model.params.num_params()];
    for gv in &grads {
        for (a, b) in grad.iter_mut().zip(gv) {
            *a += b;
        }
    }

    let mut g = Graph::new();
    let mv = model.bind(&mut g);
    let l0 = objective::l0_surrogate(&mut g, mv.alpha, mv.beta, cfg.sigma_eps);
    breakdown.l0 = g.scalar(l0);
    if cfg.lambda2 > 0.0 {
        let w = g.scale(l0, cfg.lambda2);
        let l0_grad = g.grad_vector(w, &mv.all).expect("scalar sparsity term");
        for (a, b) in grad.iter_mut().zip(&l0_grad) {
            *a += b;
        }
    }
    breakdown.total = breakdown.assemble(cfg.lambda2, cfg.lambda3);
    StepResult { grad, breakdown }
}

fn validate(model: &CdrModel, ds: &Dataset, t_i: usize) -> (f64, f64) {
    let opts = EvalOptions {
        split: Split::Validation,
        strategy: Strategy::LatestZ,
        t_i,
        cutoffs: vec![10],
        denominator: RecallDenominator::Relevant,
    };
    let rep = evaluate(model, ds, &opts);
    (rep.recall[0], rep.ndcg[0])
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(ds, cfg, |_| {})
}

/// Trains from a fresh initialization, calling `on_epoch` after every epoch.
pub fn train_with(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let set = TrainingSet::build(ds, cfg.t_train)?;
    let mut model = CdrModel::init(Dims::from_config(cfg, ds.num_items()), cfg.seed);
    let mut adam = AdamState::new(model.params.num_params());
    let adam_cfg = AdamConfig::with_lr(cfg.lr);

    let n = set.users.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let schedule = AnnealSchedule::new(
        cfg.lambda1,
        steps_per_epoch * cfg.max_epochs as u64,
        cfg.anneal_fraction,
    );

    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64, 0, 0, Purpose::Shuffle));
        let mut sum = LossBreakdown::default();
        let mut totals = 0.0;
        let mut batches = 0.0;
        let mut lambda1 = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lambda1 = schedule.at(step);
            let res = batch_gradient(&model, cfg, &set, batch, step, lambda1);
            if !res.breakdown.total.is_finite() || res.grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    last_finite: Box::new(Checkpoint {
                        config: cfg.clone(),
                        model,
                        adam,
                        epoch: epoch - 1,
                        best_metric: best.as_ref().map_or(f64::NAN, |b| b.best_metric),
                    }),
                });
            }
            adam_step(&mut model.params, &res.grad, &mut adam, &adam_cfg);
            step += 1;
            totals += res.breakdown.total;
            sum.accumulate(&res.breakdown);
            sum.l0 += res.breakdown.l0;
            sum.penalty = match (sum.penalty, res.breakdown.penalty) {
                (Some(a), Some(b)) => Some(a + b),
                (None, b) => b,
                (a, None) => a,
            };
            batches += 1.0;
        }
        let (val_recall, val_ndcg) = validate(&model, ds, cfg.t_train);
        let rec = EpochRecord {
            epoch,
            loss: totals / batches,
            recon: sum.recon.iter().sum::<f64>() / batches,
            kl: sum.kl.iter().sum::<f64>() / batches,
            l0: sum.l0 / batches,
            penalty: sum.penalty.map(|p| p / batches),
            lambda1,
            val_recall,
            val_ndcg,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", rec.to_record());
        on_epoch(&rec);
        log.push(rec);

        if best.as_ref().is_none_or(|b| val_recall > b.best_metric) {
            best = Some(Checkpoint {
                config: cfg.clone(),
                model: model.clone(),
                adam: adam.clone(),
                epoch,
                best_metric: val_recall,
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
        dropped_users: set.dropped,
    })
}

#[cfg(test)]
mod tests;
