use super::*;
use crate::dataio::{temporal_split, InteractionRecord};
use crate::model::Dims;
use crate::rng::{self, Purpose};
use approx::assert_abs_diff_eq;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn recall_examples() {
    let d = RecallDenominator::Relevant;
    assert_eq!(recall_at_k(&[5, 1, 2], &[1, 2], 10, d), 1.0);
    assert_eq!(recall_at_k(&[5, 6], &[1, 2], 10, d), 0.0);
    assert_eq!(recall_at_k(&[7, 3], &[3], 2, d), 1.0);
    assert_eq!(recall_at_k(&[1, 9], &[1, 2, 3, 4], 2, d), 0.25);
    assert_eq!(recall_at_k(&[1, 9], &[1, 2, 3, 4], 2, RecallDenominator::MinKRelevant), 0.5);
}

#[test]
fn ndcg_examples() {
    assert_eq!(ndcg_at_k(&[4, 1], &[4], 2), 1.0);
    assert_abs_diff_eq!(ndcg_at_k(&[7, 3], &[3], 2), 1.0 / 3f64.log2(), epsilon = 1e-15);
    assert_abs_diff_eq!(ndcg_at_k(&[7, 3], &[3], 2), 0.6309, epsilon = 1e-4);
}

fn oracle(topk: &[u32], relevant: &[u32], k: usize) -> (f64, f64) {
    let mut hit = 0usize;
    let mut dcg = 0.0;
    for r in 1..=k.min(topk.len()) {
        if relevant.iter().any(|&x| x == topk[r - 1]) {
            hit += 1;
            dcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for r in 1..=k.min(relevant.len()) {
        idcg += 1.0 / ((r + 1) as f64).log2();
    }
    (hit as f64 / relevant.len() as f64, dcg / idcg)
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = rng::stream(1, 0, 0, 0, Purpose::Oracle);
    for _ in 0..1000 {
        let n = rng.random_range(2..30u32);
        let mut items: Vec<u32> = (0..n).collect();
        items.shuffle(&mut rng);
        let topk: Vec<u32> = items[..rng.random_range(0..n as usize)].to_vec();
        items.shuffle(&mut rng);
        let mut rel: Vec<u32> = items[..rng.random_range(1..n as usize)].to_vec();
        rel.sort_unstable();
        let k = rng.random_range(1..25);
        let (r, d) = oracle(&topk, &rel, k);
        assert_eq!(recall_at_k(&topk, &rel, k, RecallDenominator::Relevant), r);
        assert_eq!(ndcg_at_k(&topk, &rel, k), d);
    }
}

#[test]
fn category_kl_examples() {
    let cats = vec![0, 1, 0, 1];
    assert_eq!(category_kl(&[0, 1], &[2, 3], &cats, 2, 1e-3, false), 0.0);
    let s = 1e-3;
    let p: [f64; 2] = [(1.0 + s) / (1.0 + 2.0 * s), s / (1.0 + 2.0 * s)];
    let q: [f64; 2] = [(0.5 + s) / (1.0 + 2.0 * s); 2];
    let expect = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
    let got = category_kl(&[0, 2], &[0, 1], &cats, 2, s, false);
    assert_abs_diff_eq!(got, expect, epsilon = 1e-15);
    let back = category_kl(&[0, 1], &[0, 2], &cats, 2, s, false);
    assert!((got - back).abs() > 1e-3);
    let sym = category_kl(&[0, 2], &[0, 1], &cats, 2, s, true);
    assert_abs_diff_eq!(sym, 0.5 * (got + back), epsilon = 1e-15);
}

#[test]
fn repr_distance_examples() {
    assert_eq!(repr_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert_eq!(repr_distance(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
    let mut rng = rng::stream(2, 0, 0, 0, Purpose::Oracle);
    for _ in 0..100 {
        let a = rng::normal_vec(&mut rng, 5);
        let b = rng::normal_vec(&mut rng, 5);
        let c = rng::normal_vec(&mut rng, 5);
        assert!(repr_distance(&a, &c) <= repr_distance(&a, &b) + repr_distance(&b, &c) + 1e-12);
    }
}

#[test]
fn spearman_examples() {
    assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0, epsilon = 1e-12);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), 0.0);
    assert_abs_diff_eq!(spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]), 1.0, epsilon = 1e-12);
}

fn toy_dataset() -> Dataset {
    let mut recs = Vec::new();
    for u in 0..12 {
        for k in 0..10 {
            let item = (u * 3 + k * 7) % 16;
            recs.push(InteractionRecord { user: format!("u{u}"), item: format!("i{item}"), rating: 5.0, timestamp: k as i64 });
        }
    }
    temporal_split(Dataset::from_records(&recs), 0.8, 0.1, 0.1).unwrap()
}

#[test]
fn relevant_items_exclude_training_history() {
    let ds = toy_dataset();
    for u in 0..ds.num_users() {
        let train = ds.train_items(u);
        for i in relevant_items(&ds, u, Split::Test) {
            assert!(!train.contains(&i));
        }
    }
}

#[test]
fn report_means_equal_per_user_means() {
    let ds = toy_dataset();
    let dims = Dims { items: ds.num_items(), k: 2, h: 3, c: 2, hidden: vec![4] };
    let m = CdrModel::init(dims, 3);
    let opts = EvalOptions { t_i: 2, cutoffs: vec![1, 5, 10], ..EvalOptions::default() };
    let rep = evaluate(&m, &ds, &opts);
    assert!(rep.users() > 0);
    for c in 0..3 {
        let mean: f64 = rep.per_user.iter().map(|u| u.recall[c]).sum::<f64>() / rep.users() as f64;
        assert!((mean - rep.recall[c]).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&rep.recall[c]) && (0.0..=1.0).contains(&rep.ndcg[c]));
    }
    assert_eq!(rep.recall_at(5), Some(rep.recall[1]));
    assert!(rep.to_records().contains("K=10"));
    assert_eq!(rep.to_table(|u| ds.user_key(u).to_string()).lines().count(), rep.users() + 1);
}

#[test]
fn oracle_scores_reach_full_recall() {
    let ds = toy_dataset();
    let opts = EvalOptions { cutoffs: vec![5], ..EvalOptions::default() };
    for (u, rel) in eval_users(&ds, Split::Test) {
        let mut scores = vec![0.0; ds.num_items()];
        for &i in &rel {
            scores[i as usize] = f64::INFINITY;
        }
        let m = metrics_for(u, &scores, &ds.train_items(u), &rel, &opts);
        assert_eq!(m.recall, vec![1.0]);
        assert_eq!(m.ndcg, vec![1.0]);
    }
    let pop = evaluate_popularity(&ds, &opts);
    assert_eq!(pop.strategy, "popularity");
}

#[test]
fn shift_groups_are_sorted_and_partition_users() {
    let ds = toy_dataset();
    let dims = Dims { items: ds.num_items(), k: 2, h: 3, c: 2, hidden: vec![] };
    let m = CdrModel::init(dims, 5);
    let cats: Vec<usize> = (0..ds.num_items()).map(|i| i % 3).collect();
    let opts = EvalOptions { t_i: 3, cutoffs: vec![10], ..EvalOptions::default() };
    let rep = shift_groups(&m, &ds, 4, &cats, 3, &opts, false).unwrap();
    let mut all: Vec<usize> = rep.groups.iter().flat_map(|g| g.users.clone()).collect();
    all.sort_unstable();
    let expected: Vec<usize> = eval_users(&ds, Split::Test).into_iter().map(|(u, _)| u).collect();
    assert_eq!(all, expected);
    for w in rep.groups.windows(2) {
        assert!(w[0].mean_kl <= w[1].mean_kl);
        assert!(w[0].kl_range.1 <= w[1].kl_range.0);
    }
    assert!(rep.to_records().contains("spearman_kl_distance"));
    assert!(matches!(shift_groups(&m, &ds, 1000, &cats, 3, &opts, false), Err(EvalError::TooFewUsers { .. })));
    assert!(matches!(shift_groups(&m, &ds, 2, &cats[1..], 3, &opts, false), Err(EvalError::CategoryMap { .. })));
}

#[test]
fn identical_behaviour_gives_zero_kl_groups() {
    let mut recs = Vec::new();
    for u in 0..8 {
        for k in 0..10 {
            recs.push(InteractionRecord { user: format!("u{u}"), item: format!("i{}", k % 5), rating: 5.0, timestamp: k as i64 });
        }
        recs.push(InteractionRecord { user: format!("u{u}"), item: format!("i{}", 5 + u % 3), rating: 5.0, timestamp: 100 });
    }
    let ds = temporal_split(Dataset::from_records(&recs), 0.8, 0.1, 0.1).unwrap();
    let dims = Dims { items: ds.num_items(), k: 2, h: 3, c: 1, hidden: vec![] };
    let m = CdrModel::init(dims, 1);
    let cats: Vec<usize> = (0..ds.num_items()).map(|i| i % 2).collect();
    let opts = EvalOptions { t_i: 2, cutoffs: vec![3], ..EvalOptions::default() };
    let rep = shift_groups(&m, &ds, 2, &cats, 2, &opts, false).unwrap();
    let kls: Vec<f64> = rep.groups.iter().map(|g| g.mean_kl).collect();
    assert_eq!(kls[0], kls[1]);
    assert_eq!(rep.groups[0].recall, rep.groups[1].recall);
}
