use super::*;
use crate::autodiff::ParamStore;
use crate::config::PenaltySubset;
use crate::dataio::{temporal_split, InteractionRecord};
use crate::objective::LossWeights;
use rand::Rng;

fn tiny_dataset(users: usize, items: usize, per_user: usize, seed: u64) -> Dataset {
    let mut records = Vec::new();
    for u in 0..users {
        let mut r = rng::stream(seed, 0, u as u64, 0, Purpose::Oracle);
        let base = u % 2 * (items / 2);
        for n in 0..per_user {
            let item = if r.random::<f64>() < 0.8 {
                base + r.random_range(0..items / 2)
            } else {
                r.random_range(0..items)
            };
            records.push(InteractionRecord {
                user: format!("u{u}"),
                item: format!("i{item}"),
                rating: 5.0,
                timestamp: n as i64,
            });
        }
    }
    temporal_split(Dataset::from_records(&records), 0.8, 0.1, 0.1).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        k: 3,
        h: 4,
        hidden: vec![],
        batch_size: 20,
        lr: 5e-3,
        max_epochs: 3,
        patience: 5,
        lambda3: 0.05,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut p = ParamStore::new();
    p.push("w", Tensor::row(vec![1.0, -2.0]));
    let before = p.clone();
    let mut st = AdamState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::with_lr(0.1));
    assert_eq!(p, before);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = ParamStore::new();
    p.push("w", Tensor::scalar(1.0));
    let mut st = AdamState::new(1);
    adam_step(&mut p, &[1.0], &mut st, &AdamConfig::with_lr(0.1));
    assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-6);
}

#[test]
fn adam_two_steps_differ_from_one_doubled() {
    let cfg = AdamConfig::with_lr(0.1);
    let mut a = ParamStore::new();
    a.push("w", Tensor::scalar(1.0));
    let mut b = a.clone();
    let mut sa = AdamState::new(1);
    adam_step(&mut a, &[1.0], &mut sa, &cfg);
    adam_step(&mut a, &[0.5], &mut sa, &cfg);
    let mut sb = AdamState::new(1);
    adam_step(&mut b, &[1.5], &mut sb, &cfg);
    assert!((a.get("w").unwrap().item() - b.get("w").unwrap().item()).abs() > 1e-3);
}

fn sample_checkpoint(k: usize) -> Checkpoint {
    let cfg = TrainConfig {
        k,
        ..tiny_config()
    };
    let model = CdrModel::init(Dims::from_config(&cfg, 7), 3);
    let n = model.params.num_params();
    Checkpoint {
        config: cfg,
        model,
        adam: AdamState::new(n),
        epoch: 4,
        best_metric: 0.25,
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let ck = sample_checkpoint(3);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back, ck);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}

#[test]
fn checkpoint_rejects_bad_magic() {
    let mut bytes = sample_checkpoint(3).to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Format(_))));
}

#[test]
fn checkpoint_rejects_mismatched_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k8.ckpt");
    save_checkpoint(&path, &sample_checkpoint(8)).unwrap();
    let cfg16 = TrainConfig {
        k: 16,
        ..tiny_config()
    };
    let err = load_checkpoint_for(&path, &cfg16, 7).unwrap_err();
    assert!(matches!(err, CheckpointError::ShapeMismatch(_)), "{err}");
}

fn reference_gradient(model: &CdrModel, cfg: &TrainConfig, set: &TrainingSet, batch: &[usize], step: u64) -> (Vec<f64>, f64) {
    let users: Vec<usize> = batch.iter().map(|&j| set.users[j]).collect();
    let lists: Vec<Vec<&[u32]>> = (0..cfg.t_train)
        .map(|t| batch.iter().map(|&j| set.envs[j][t].as_slice()).collect())
        .collect();
    let eb = EnvBatch::from_lists(&lists, model.dims.items);
    let noise = batch_noise(cfg, &model.dims, step, &users, cfg.t_train);
    let gate_noise = GateNoise::sample(
        &mut rng::stream(cfg.seed, step, 0, 0, Purpose::GateNoise),
        &model.dims,
        cfg.sigma_eps,
    );
    let mut g = Graph::new();
    let mv = model.bind(&mut g);
    let subset: Vec<Var> = model
        .params
        .names()
        .zip(&mv.all)
        .filter(|(n, _)| cfg.penalty_subset.includes(n))
        .map(|(_, &v)| v)
        .collect();
    let weights = LossWeights {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        lambda3: cfg.lambda3,
        sigma_eps: cfg.sigma_eps,
        normalize_by_count: cfg.normalize_by_count,
    };
    let (total, ..) = objective::full_loss(&mut g, &mv, &eb, &noise, Some(&gate_noise), &weights, &subset);
    let value = g.scalar(total);
    (g.grad_vector(total, &mv.all).unwrap(), value)
}

#[test]
fn chunked_gradient_matches_single_graph() {
    let ds = tiny_dataset(21, 10, 12, 5);
    for subset in [PenaltySubset::Structure, PenaltySubset::All] {
        let cfg = TrainConfig {
            penalty_subset: subset,
            lambda3: 0.3,
            ..tiny_config()
        };
        let set = TrainingSet::build(&ds, cfg.t_train).unwrap();
        let model = CdrModel::init(Dims::from_config(&cfg, ds.num_items()), 2);
        let batch: Vec<usize> = (0..set.users.len()).rev().collect();
        let res = batch_gradient(&model, &cfg, &set, &batch, 7, cfg.lambda1);
        let (reference, value) = reference_gradient(&model, &cfg, &set, &batch, 7);
        assert!((res.breakdown.total - value).abs() < 1e-9 * value.abs().max(1.0));
        let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in res.grad.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10 * scale, "{a} vs {b}");
        }
    }
}

#[test]
fn gradient_is_independent_of_thread_count() {
    let ds = tiny_dataset(30, 10, 12, 6);
    let cfg = tiny_config();
    let set = TrainingSet::build(&ds, cfg.t_train).unwrap();
    let model = CdrModel::init(Dims::from_config(&cfg, ds.num_items()), 4);
    let batch: Vec<usize> = (0..set.users.len()).collect();
    let one = crate::par::with_threads(1, || batch_gradient(&model, &cfg, &set, &batch, 0, 0.3));
    let many = crate::par::with_threads(4, || batch_gradient(&model, &cfg, &set, &batch, 0, 0.3));
    assert_eq!(one.grad, many.grad);
    assert_eq!(one.breakdown, many.breakdown);
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let ds = tiny_dataset(24, 12, 15, 8);
    let cfg = tiny_config();
    let mut seen = 0;
    let a = train_with(&ds, &cfg, |_| seen += 1).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert_eq!(seen, a.log.len());
    assert_eq!(a.best.model, b.best.model);
    let strip = |log: &[EpochRecord]| log.iter().map(|r| (r.loss, r.val_recall)).collect::<Vec<_>>();
    assert_eq!(strip(&a.log), strip(&b.log));
    let line = a.log[0].to_record();
    assert!(line.starts_with("epoch=1 loss="), "{line}");
    assert!(line.contains("penalty="));
}

#[test]
fn loss_decreases_over_training() {
    let ds = tiny_dataset(40, 12, 15, 9);
    let cfg = TrainConfig {
        max_epochs: 25,
        patience: 100,
        anneal_fraction: 0.0,
        lr: 1e-2,
        ..tiny_config()
    };
    let out = train(&ds, &cfg).unwrap();
    let first = out.log[0].loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn short_histories_are_dropped_with_record() {
    let ds = tiny_dataset(10, 10, 12, 1);
    let cfg = TrainConfig {
        t_train: 9,
        ..tiny_config()
    };
    let set = TrainingSet::build(&ds, cfg.t_train).unwrap();
    assert!(!set.dropped.is_empty() || set.envs.iter().all(|e| e.len() == 9));
    let cfg = TrainConfig {
        t_train: 40,
        ..tiny_config()
    };
    assert!(matches!(train(&ds, &cfg), Err(TrainError::NoUsers { needed: 40 })));
}

#[test]
fn divergence_returns_last_finite_state() {
    let ds = tiny_dataset(10, 10, 12, 2);
    let cfg = TrainConfig {
        lr: 1e9,
        max_epochs: 50,
        patience: 100,
        ..tiny_config()
    };
    match train(&ds, &cfg) {
        Err(TrainError::Diverged { last_finite, .. }) => {
            assert!(last_finite.model.params.flatten().iter().all(|v| v.is_finite()));
        }
        Ok(_) => panic!("expected divergence"),
        Err(e) => panic!("{e}"),
    }
}
