//! All-ranking metrics, shift-group analysis and the case-study statistics.

use std::fmt::Write as _;

use crate::dataio::{divide_environments, Dataset, Split};
use crate::inference::{rank_topk, Engine, Strategy};
use crate::model::CdrModel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{users} users cannot fill {groups} groups")]
    TooFewUsers { users: usize, groups: usize },
    #[error("category map covers {got} items, dataset has {expected}")]
    CategoryMap { expected: usize, got: usize },
}

/// Denominator of Recall@K.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RecallDenominator {
    /// `|relevant|`.
    #[default]
    Relevant,
    /// `min(K, |relevant|)`.
    MinKRelevant,
}

/// Zero-based ranks of hits among the first `k` entries; `relevant` sorted.
fn hits<'a>(topk: &'a [u32], relevant: &'a [u32], k: usize) -> impl Iterator<Item = usize> + 'a {
    topk.iter()
        .take(k)
        .enumerate()
        .filter(move |(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, _)| r)
}

/// Recall over the first `k` entries of `topk`. `relevant` must be sorted
/// and non-empty.
pub fn recall_at_k(topk: &[u32], relevant: &[u32], k: usize, denom: RecallDenominator) -> f64 {
    debug_assert!(!relevant.is_empty());
    let n = hits(topk, relevant, k).count() as f64;
    let d = match denom {
        RecallDenominator::Relevant => relevant.len(),
        RecallDenominator::MinKRelevant => relevant.len().min(k),
    };
    n / d as f64
}

/// Binary-relevance NDCG over the first `k` entries of `topk`; `relevant`
/// as for [`recall_at_k`].
pub fn ndcg_at_k(topk: &[u32], relevant: &[u32], k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let dcg: f64 = hits(topk, relevant, k)
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    dcg / idcg
}

/// Items of `split` for user `u` that are absent from the training history.
pub fn relevant_items(ds: &Dataset, u: usize, split: Split) -> Vec<u32> {
    let train = ds.train_items(u);
    let mut rel: Vec<u32> = ds
        .split_items(u, split)
        .into_iter()
        .filter(|i| !train.contains(i))
        .collect();
    rel.sort_unstable();
    rel.dedup();
    rel
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub per_user: Vec<UserMetrics>,
    pub strategy: String,
    pub t_i: usize,
}

impl MetricReport {
    pub fn users(&self) -> usize {
        self.per_user.len()
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|p| self.ndcg[p])
    }

    fn from_users(per_user: Vec<UserMetrics>, cutoffs: &[usize], strategy: &str, t_i: usize) -> Self {
        let n = per_user.len().max(1) as f64;
        let mean = |f: &dyn Fn(&UserMetrics) -> f64| per_user.iter().map(f).sum::<f64>() / n;
        let recall = (0..cutoffs.len()).map(|c| mean(&|u| u.recall[c])).collect();
        let ndcg = (0..cutoffs.len()).map(|c| mean(&|u| u.ndcg[c])).collect();
        Self {
            cutoffs: cutoffs.to_vec(),
            recall,
            ndcg,
            per_user,
            strategy: strategy.to_string(),
            t_i,
        }
    }

    /// One `key=value` record per cutoff.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (c, k) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(
                s,
                "strategy={} T_i={} K={k} users={} recall={:.6} ndcg={:.6}",
                self.strategy,
                self.t_i,
                self.users(),
                self.recall[c],
                self.ndcg[c]
            );
        }
        s
    }

    /// Tab-separated per-user table.
    pub fn to_table(&self, user_key: impl Fn(usize) -> String) -> String {
        let mut s = String::from("user");
        for k in &self.cutoffs {
            let _ = write!(s, "\trecall@{k}\tndcg@{k}");
        }
        s.push('\n');
        for u in &self.per_user {
            s.push_str(&user_key(u.user));
            for (r, n) in u.recall.iter().zip(&u.ndcg) {
                let _ = write!(s, "\t{r:.6}\t{n:.6}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub strategy: Strategy,
    pub t_i: usize,
    pub cutoffs: Vec<usize>,
    pub denominator: RecallDenominator,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            strategy: Strategy::LatestZ,
            t_i: 2,
            cutoffs: vec![10, 20],
            denominator: RecallDenominator::Relevant,
        }
    }
}

fn metrics_for(user: usize, scores: &[f64], mask: &[u32], relevant: &[u32], opts: &EvalOptions) -> UserMetrics {
    let kmax = opts.cutoffs.iter().copied().max().unwrap_or(0);
    let top = rank_topk(user, scores, mask, kmax).items;
    UserMetrics {
        user,
        recall: opts
            .cutoffs
            .iter()
            .map(|&k| recall_at_k(&top, relevant, k, opts.denominator))
            .collect(),
        ndcg: opts.cutoffs.iter().map(|&k| ndcg_at_k(&top, relevant, k)).collect(),
    }
}

/// Users with a non-empty relevant set in `split`, with those sets.
pub fn eval_users(ds: &Dataset, split: Split) -> Vec<(usize, Vec<u32>)> {
    (0..ds.num_users())
        .map(|u| (u, relevant_items(ds, u, split)))
        .filter(|(_, r)| !r.is_empty())
        .collect()
}

/// Ranks with a model and averages over users with non-empty relevant sets.
pub fn evaluate(model: &CdrModel, ds: &Dataset, opts: &EvalOptions) -> MetricReport {
    let users = eval_users(ds, opts.split);
    let histories: Vec<Vec<u32>> = users.iter().map(|(u, _)| ds.train_items(*u)).collect();
    let refs: Vec<&[u32]> = histories.iter().map(Vec::as_slice).collect();
    let scores = Engine::new(model).score(&refs, opts.t_i, opts.strategy);
    let per_user = users
        .iter()
        .zip(&scores)
        .zip(&histories)
        .map(|(((u, rel), s), h)| metrics_for(*u, s, h, rel, opts))
        .collect();
    MetricReport::from_users(per_user, &opts.cutoffs, opts.strategy.name(), opts.t_i)
}

/// Training-set interaction counts per item.
pub fn popularity_scores(ds: &Dataset) -> Vec<f64> {
    let mut pop = vec![0.0; ds.num_items()];
    for u in 0..ds.num_users() {
        for i in ds.train_items(u) {
            pop[i as usize] += 1.0;
        }
    }
    pop
}

/// The same protocol with every user ranked by training popularity.
pub fn evaluate_popularity(ds: &Dataset, opts: &EvalOptions) -> MetricReport {
    let pop = popularity_scores(ds);
    let per_user = eval_users(ds, opts.split)
        .iter()
        .map(|(u, rel)| metrics_for(*u, &pop, &ds.train_items(*u), rel, opts))
        .collect();
    MetricReport::from_users(per_user, &opts.cutoffs, "popularity", 0)
}

/// Smoothed category histogram: `(p_c + s) / (1 + C s)`.
pub fn category_histogram(items: &[u32], categories: &[usize], n_cat: usize, smoothing: f64) -> Vec<f64> {
    let mut h = vec![0.0; n_cat];
    for &i in items {
        h[categories[i as usize]] += 1.0;
    }
    let total = items.len().max(1) as f64;
    h.iter()
        .map(|c| (c / total + smoothing) / (1.0 + n_cat as f64 * smoothing))
        .collect()
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Default additive smoothing for category histograms.
pub const CATEGORY_SMOOTHING: f64 = 1e-3;

/// KL between the smoothed category histograms of two environments;
/// `symmetric` averages both directions.
pub fn category_kl(
    env_a: &[u32],
    env_b: &[u32],
    categories: &[usize],
    n_cat: usize,
    smoothing: f64,
    symmetric: bool,
) -> f64 {
    let p = category_histogram(env_a, categories, n_cat, smoothing);
    let q = category_histogram(env_b, categories, n_cat, smoothing);
    if symmetric {
        0.5 * (kl_divergence(&p, &q) + kl_divergence(&q, &p))
    } else {
        kl_divergence(&p, &q)
    }
}

pub fn repr_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "representation lengths differ");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    pearson(&ranks(a), &ranks(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftGroup {
    /// Lowest and highest user KL in the group.
    pub kl_range: (f64, f64),
    pub mean_kl: f64,
    pub mean_distance: f64,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftGroupReport {
    pub cutoffs: Vec<usize>,
    pub groups: Vec<ShiftGroup>,
    /// Spearman correlation of group mean KL against group mean distance.
    pub kl_distance_spearman: f64,
}

impl ShiftGroupReport {
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (g, grp) in self.groups.iter().enumerate() {
            let _ = write!(
                s,
                "group={g} users={} kl_lo={:.6} kl_hi={:.6} mean_kl={:.6} mean_distance={:.6}",
                grp.users.len(),
                grp.kl_range.0,
                grp.kl_range.1,
                grp.mean_kl,
                grp.mean_distance
            );
            for (c, k) in self.cutoffs.iter().enumerate() {
                let _ = write!(s, " recall@{k}={:.6} ndcg@{k}={:.6}", grp.recall[c], grp.ndcg[c]);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "spearman_kl_distance={:.6}", self.kl_distance_spearman);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("group\tusers\tmean_kl\tmean_distance");
        for k in &self.cutoffs {
            let _ = write!(s, "\trecall@{k}\tndcg@{k}");
        }
        s.push('\n');
        for (g, grp) in self.groups.iter().enumerate() {
            let _ = write!(s, "{g}\t{}\t{:.6}\t{:.6}", grp.users.len(), grp.mean_kl, grp.mean_distance);
            for (r, n) in grp.recall.iter().zip(&grp.ndcg) {
                let _ = write!(s, "\t{r:.6}\t{n:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-user shift statistics over the training history split into `t_i`
/// environments: mean consecutive category KL and mean consecutive
/// preference-state distance.
pub fn user_shift_stats(
    engine: &Engine<'_>,
    ds: &Dataset,
    users: &[usize],
    t_i: usize,
    categories: &[usize],
    n_cat: usize,
    symmetric: bool,
) -> Vec<(f64, f64)> {
    let histories: Vec<Vec<u32>> = users.iter().map(|&u| ds.train_items(u)).collect();
    let refs: Vec<&[u32]> = histories.iter().map(Vec::as_slice).collect();
    let states = engine
        .roll_states(&refs, t_i, &vec![None; refs.len()])
        .expect("no interventions");
    histories
        .iter()
        .zip(&states)
        .map(|(h, st)| {
            let t = st.num_envs();
            if t < 2 {
                return (0.0, 0.0);
            }
            let envs = divide_environments(h, t).expect("rolled with a feasible count").envs;
            let pairs = (t - 1) as f64;
            let kl = (0..t - 1)
                .map(|j| category_kl(&envs[j], &envs[j + 1], categories, n_cat, CATEGORY_SMOOTHING, symmetric))
                .sum::<f64>()
                / pairs;
            let dist = (0..t - 1).map(|j| repr_distance(&st.z[j], &st.z[j + 1])).sum::<f64>() / pairs;
            (kl, dist)
        })
        .collect()
}

/// Ranks evaluation users by mean category KL and reports `groups`
/// equal-size groups, lowest shift first.
pub fn shift_groups(
    model: &CdrModel,
    ds: &Dataset,
    groups: usize,
    categories: &[usize],
    n_cat: usize,
    opts: &EvalOptions,
    symmetric: bool,
) -> Result<ShiftGroupReport, EvalError> {
    if categories.len() != ds.num_items() {
        return Err(EvalError::CategoryMap {
            expected: ds.num_items(),
            got: categories.len(),
        });
    }
    let report = evaluate(model, ds, opts);
    let users: Vec<usize> = report.per_user.iter().map(|m| m.user).collect();
    if groups == 0 || users.len() < groups {
        return Err(EvalError::TooFewUsers {
            users: users.len(),
            groups,
        });
    }
    let engine = Engine::new(model);
    let stats = user_shift_stats(&engine, ds, &users, opts.t_i, categories, n_cat, symmetric);
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.sort_by(|&a, &b| stats[a].0.total_cmp(&stats[b].0).then(a.cmp(&b)));

    let sizes = crate::dataio::environment_sizes(users.len(), groups);
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for size in sizes {
        let members = &order[start..start + size];
        start += size;
        let n = size as f64;
        let mean = |f: &dyn Fn(usize) -> f64| members.iter().map(|&m| f(m)).sum::<f64>() / n;
        out.push(ShiftGroup {
            kl_range: (stats[members[0]].0, stats[members[size - 1]].0),
            mean_kl: mean(&|m| stats[m].0),
            mean_distance: mean(&|m| stats[m].1),
            recall: (0..opts.cutoffs.len()).map(|c| mean(&|m| report.per_user[m].recall[c])).collect(),
            ndcg: (0..opts.cutoffs.len()).map(|c| mean(&|m| report.per_user[m].ndcg[c])).collect(),
            users: members.iter().map(|&m| users[m]).collect(),
        });
    }
    let kl: Vec<f64> = out.iter().map(|g| g.mean_kl).collect();
    let dist: Vec<f64> = out.iter().map(|g| g.mean_distance).collect();
    Ok(ShiftGroupReport {
        cutoffs: opts.cutoffs.clone(),
        kl_distance_spearman: spearman(&kl, &dist),
        groups: out,
    })
}

#[cfg(test)]
mod tests;
