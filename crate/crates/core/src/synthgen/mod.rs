//! Synthetic interaction data with a known causal structure.
//!
//! Each user carries an environment factor `e_t` that drives a latent
//! preference `z_t = tanh(A e_t + B z_{t-1}) + noise`. Latent dimensions,
//! items and both weight matrices are partitioned into blocks by category,
//! so interactions with a category depend only on that category's block.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::dataio::{Dataset, Interaction, Split};
use crate::par::*;
use crate::rng::{self, Purpose};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config field '{field}': {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("{per_env} distinct interactions per environment requested but only {items} items exist")]
    TooManyInteractions { per_env: usize, items: usize },
    #[error("ground-truth file: {0}")]
    Io(#[from] std::io::Error),
    #[error("ground-truth file line {line}: {reason}")]
    Sidecar { line: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Width of `e` and `z`.
    pub latent: usize,
    /// Environments per user, including validation and test.
    pub envs: usize,
    pub per_env: usize,
    /// Fraction of `e` coordinates redrawn at each boundary for shifted users.
    pub rho: f64,
    pub shifted_fraction: f64,
    pub seed: u64,
    pub z_noise: f64,
    /// Scale of category logits.
    pub category_scale: f64,
    /// Scale of within-category item logits.
    pub item_scale: f64,
    pub burn_in: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            categories: 2,
            latent: 8,
            envs: 4,
            per_env: 20,
            rho: 0.5,
            shifted_fraction: 0.5,
            seed: 0,
            z_noise: 0.05,
            category_scale: 4.0,
            item_scale: 2.0,
            burn_in: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, reason: &str| {
            Err(SynthError::InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if self.users == 0 {
            return bad("users", "must be positive");
        }
        if self.categories == 0 {
            return bad("categories", "must be positive");
        }
        if self.items == 0 || !self.items.is_multiple_of(self.categories) {
            return bad("items", "must be a positive multiple of categories");
        }
        if self.latent == 0 || !self.latent.is_multiple_of(self.categories) {
            return bad("latent", "must be a positive multiple of categories");
        }
        if self.envs < 3 {
            return bad("envs", "need at least one training, one validation and one test environment");
        }
        if self.per_env == 0 {
            return bad("per_env", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.shifted_fraction) {
            return bad("shifted_fraction", "must lie in [0, 1]");
        }
        if self.z_noise.is_nan() || self.z_noise < 0.0 {
            return bad("z_noise", "must be non-negative");
        }
        if self.per_env > self.items {
            return Err(SynthError::TooManyInteractions {
                per_env: self.per_env,
                items: self.items,
            });
        }
        Ok(())
    }

    fn block(&self) -> usize {
        self.latent / self.categories
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub item_category: Vec<usize>,
    pub latent_category: Vec<usize>,
    /// `e -> z` map, `latent x latent`, block diagonal.
    pub a: Tensor,
    /// `z -> z` recurrence, `latent x latent`, block diagonal.
    pub b: Tensor,
    /// Category score vectors, `categories x block`.
    pub category_scores: Tensor,
    /// Item score vectors against their category's block, `items x block`.
    pub item_scores: Tensor,
    /// `e[u][t]`.
    pub e: Vec<Vec<Vec<f64>>>,
    /// `z[u][t]`.
    pub z: Vec<Vec<Vec<f64>>>,
    pub shifted: Vec<bool>,
}

impl GroundTruth {
    /// Item probabilities for latent state `z`.
    pub fn item_probabilities(&self, z: &[f64]) -> Vec<f64> {
        let c_n = self.config.categories;
        let blk = self.config.block();
        let cat_logits: Vec<f64> = (0..c_n)
            .map(|c| {
                let zc = &z[c * blk..(c + 1) * blk];
                self.config.category_scale * dot(self.category_scores.row_slice(c), zc)
            })
            .collect();
        let cat_p = softmax(&cat_logits);
        let item_logits: Vec<f64> = (0..self.config.items)
            .map(|i| {
                let c = self.item_category[i];
                let zc = &z[c * blk..(c + 1) * blk];
                self.config.item_scale * dot(self.item_scores.row_slice(i), zc)
            })
            .collect();
        let mut p = vec![0.0; self.config.items];
        for (c, &pc) in cat_p.iter().enumerate() {
            let members: Vec<usize> = (0..self.config.items).filter(|&i| self.item_category[i] == c).collect();
            let within = softmax(&members.iter().map(|&i| item_logits[i]).collect::<Vec<_>>());
            for (&i, w) in members.iter().zip(within) {
                p[i] = pc * w;
            }
        }
        p
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    rng::normal_vec(r, 1)[0]
}

fn block_diagonal(r: &mut ChaCha8Rng, n: usize, blk: usize, gain: f64) -> Tensor {
    let mut t = Tensor::zeros(n, n);
    let s = gain / (blk as f64).sqrt();
    for b0 in (0..n).step_by(blk) {
        for i in b0..b0 + blk {
            for j in b0..b0 + blk {
                t.set(i, j, s * normal(r));
            }
        }
    }
    t
}

fn step_z(gt_a: &Tensor, gt_b: &Tensor, e: &[f64], z_prev: &[f64], noise: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let n = e.len();
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                s += gt_a.get(i, j) * e[j] + gt_b.get(i, j) * z_prev[j];
            }
            s.tanh() + noise * normal(r)
        })
        .collect()
}

/// Draws `n` distinct items with Gumbel top-k, returned in random order.
fn draw_items(r: &mut ChaCha8Rng, p: &[f64], n: usize) -> Vec<u32> {
    let mut keyed: Vec<(f64, u32)> = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            let u: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
            (pi.max(1e-300).ln() - (-u.ln()).ln(), i as u32)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<u32> = keyed[..n].iter().map(|k| k.1).collect();
    out.shuffle(r);
    out
}

struct UserDraw {
    e: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    items: Vec<Vec<u32>>,
}

pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth), SynthError> {
    cfg.validate()?;
    let blk = cfg.block();
    let mut g = rng::stream(cfg.seed, 1, 0, 0, Purpose::Synth);

    let mut perm: Vec<usize> = (0..cfg.items).collect();
    perm.shuffle(&mut g);
    let per_cat = cfg.items / cfg.categories;
    let mut item_category = vec![0; cfg.items];
    for (rank, &i) in perm.iter().enumerate() {
        item_category[i] = rank / per_cat;
    }
    let latent_category: Vec<usize> = (0..cfg.latent).map(|d| d / blk).collect();
    let a = block_diagonal(&mut g, cfg.latent, blk, 1.5);
    let b = block_diagonal(&mut g, cfg.latent, blk, 0.5);
    let category_scores = Tensor::new(cfg.categories, blk, rng::normal_vec(&mut g, cfg.categories * blk));
    let item_scores = Tensor::new(cfg.items, blk, rng::normal_vec(&mut g, cfg.items * blk));

    let mut order: Vec<usize> = (0..cfg.users).collect();
    order.shuffle(&mut rng::stream(cfg.seed, 2, 0, 0, Purpose::Synth));
    let n_shifted = (cfg.shifted_fraction * cfg.users as f64).round() as usize;
    let mut shifted = vec![false; cfg.users];
    for &u in &order[..n_shifted] {
        shifted[u] = true;
    }

    let mut gt = GroundTruth {
        config: cfg.clone(),
        item_category,
        latent_category,
        a,
        b,
        category_scores,
        item_scores,
        e: Vec::new(),
        z: Vec::new(),
        shifted,
    };
    let n_resample = (cfg.rho * cfg.latent as f64).round() as usize;

    let draws: Vec<UserDraw> = (0..cfg.users)
        .into_par_iter()
        .map(|u| {
            let mut r = rng::stream(cfg.seed, 0, u as u64, 0, Purpose::Synth);
            let mut e = rng::normal_vec(&mut r, cfg.latent);
            let mut z = vec![0.0; cfg.latent];
            for _ in 0..cfg.burn_in {
                z = step_z(&gt.a, &gt.b, &e, &z, cfg.z_noise, &mut r);
            }
            let mut out = UserDraw {
                e: Vec::with_capacity(cfg.envs),
                z: Vec::with_capacity(cfg.envs),
                items: Vec::with_capacity(cfg.envs),
            };
            for t in 0..cfg.envs {
                if t > 0 && gt.shifted[u] {
                    for d in index::sample(&mut r, cfg.latent, n_resample) {
                        e[d] = normal(&mut r);
                    }
                }
                z = step_z(&gt.a, &gt.b, &e, &z, cfg.z_noise, &mut r);
                let p = gt.item_probabilities(&z);
                out.items.push(draw_items(&mut r, &p, cfg.per_env));
                out.e.push(e.clone());
                out.z.push(z.clone());
            }
            out
        })
        .collect();

    let mut lists = Vec::with_capacity(cfg.users);
    for d in draws {
        let mut list = Vec::with_capacity(cfg.envs * cfg.per_env);
        for (t, items) in d.items.iter().enumerate() {
            let split = if t + 1 == cfg.envs {
                Split::Test
            } else if t + 2 == cfg.envs {
                Split::Validation
            } else {
                Split::Train
            };
            for (n, &item) in items.iter().enumerate() {
                list.push(Interaction {
                    item,
                    rating: 1.0,
                    timestamp: (t * cfg.per_env + n) as i64,
                    split,
                });
            }
        }
        lists.push(list);
        gt.e.push(d.e);
        gt.z.push(d.z);
    }
    let ds = Dataset::new(
        (0..cfg.users).map(|u| format!("u{u}")).collect(),
        (0..cfg.items).map(|i| format!("i{i}")).collect(),
        lists,
    )
    .expect("generated lists are chronological and in range");
    Ok((ds, gt))
}

/// Result of matching learned item gates to the true categories.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureRecovery {
    pub accuracy: f64,
    /// `mapping[c]`: true category matched to learned column `c`.
    pub mapping: Vec<Option<usize>>,
    /// `false` when the learned and true category counts differ; the
    /// accuracy is then under the best injective map.
    pub comparable: bool,
}

/// Scores learned normalized item gates (`items x C`) against the true
/// item categories.
///
/// Items go to their argmax column, with exact ties broken by a fixed hash of
/// the item index.
pub fn structure_recovery(gates: &Tensor, item_category: &[usize], true_categories: usize) -> StructureRecovery {
    let (n, c) = (gates.rows(), gates.cols());
    assert_eq!(n, item_category.len(), "gate rows must match items");
    let assigned: Vec<usize> = (0..n)
        .map(|i| {
            let row = gates.row_slice(i);
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = (0..c).filter(|&j| row[j] == best).collect();
            let pick = (rng::hash_unit(i as u64 ^ 0x5eed) * ties.len() as f64) as usize;
            ties[pick.min(ties.len() - 1)]
        })
        .collect();
    let mut agree = vec![vec![0usize; true_categories]; c];
    for (i, &a) in assigned.iter().enumerate() {
        agree[a][item_category[i]] += 1;
    }

    let mut best = (0usize, vec![None; c]);
    let mut current = vec![None; c];
    let mut used = vec![false; true_categories];
    search(&agree, 0, 0, &mut current, &mut used, &mut best);
    StructureRecovery {
        accuracy: best.0 as f64 / n.max(1) as f64,
        mapping: best.1,
        comparable: c == true_categories,
    }
}

fn search(
    agree: &[Vec<usize>],
    col: usize,
    score: usize,
    current: &mut Vec<Option<usize>>,
    used: &mut [bool],
    best: &mut (usize, Vec<Option<usize>>),
) {
    if col == agree.len() {
        if score > best.0 || best.1.iter().all(Option::is_none) {
            *best = (score, current.clone());
        }
        return;
    }
    let free = used.iter().filter(|u| !**u).count();
    let remaining = agree.len() - col;
    for t in 0..used.len() {
        if !used[t] {
            used[t] = true;
            current[col] = Some(t);
            search(agree, col + 1, score + agree[col][t], current, used, best);
            current[col] = None;
            used[t] = false;
        }
    }
    if free < remaining {
        search(agree, col + 1, score, current, used, best);
    }
}

/// Item-category and shifted-user tables read back from a sidecar file.
#[derive(Clone, Debug, PartialEq)]
pub struct SidecarTables {
    pub categories: usize,
    /// Category per item, in dataset item order.
    pub item_category: Vec<usize>,
    /// Shift label per user, in dataset user order.
    pub shifted: Vec<bool>,
}

pub fn write_sidecar(path: &Path, ds: &Dataset, gt: &GroundTruth) -> Result<(), SynthError> {
    let mut s = String::new();
    let c = &gt.config;
    writeln!(s, "# synthetic ground truth").ok();
    writeln!(s, "categories = {}", c.categories).ok();
    writeln!(s, "latent = {}", c.latent).ok();
    writeln!(s, "envs = {}", c.envs).ok();
    writeln!(s, "rho = {}", c.rho).ok();
    writeln!(s, "seed = {}", c.seed).ok();
    for (i, cat) in gt.item_category.iter().enumerate() {
        writeln!(s, "item {} {cat}", ds.item_key(i)).ok();
    }
    for (u, &sh) in gt.shifted.iter().enumerate() {
        writeln!(s, "user {} {}", ds.user_key(u), u8::from(sh)).ok();
    }
    std::fs::File::create(path)?.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_sidecar(path: &Path, ds: &Dataset) -> Result<SidecarTables, SynthError> {
    let mut categories = None;
    let mut item_category = vec![usize::MAX; ds.num_items()];
    let mut shifted = vec![false; ds.num_users()];
    let reader = BufReader::new(std::fs::File::open(path)?);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |reason: &str| SynthError::Sidecar {
            line: n + 1,
            reason: reason.into(),
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "categories" {
                categories = Some(v.trim().parse::<usize>().map_err(|_| err("bad category count"))?);
            }
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["item", key, cat] => {
                let i = ds.item_index(key).ok_or_else(|| err("unknown item"))?;
                item_category[i] = cat.parse().map_err(|_| err("bad category"))?;
            }
            ["user", key, flag] => {
                let u = ds.user_index(key).ok_or_else(|| err("unknown user"))?;
                shifted[u] = *flag == "1";
            }
            _ => return Err(err("unrecognized line")),
        }
    }
    let categories = categories.ok_or_else(|| SynthError::Sidecar {
        line: 0,
        reason: "missing 'categories'".into(),
    })?;
    if item_category.iter().any(|&c| c >= categories) {
        return Err(SynthError::Sidecar {
            line: 0,
            reason: "some item lacks a valid category".into(),
        });
    }
    Ok(SidecarTables {
        categories,
        item_category,
        shifted,
    })
}
