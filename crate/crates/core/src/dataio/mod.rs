//! Interaction logs: ingestion, k-core filtering, chronological splitting and
//! division of each user's history into environments.

mod format;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

pub use format::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid interaction rows ({skipped} malformed)")]
    NoValidRows { skipped: usize },
    #[error("filtering left no interactions; thresholds too strict for this corpus")]
    EmptyAfterFilter,
    #[error("user {user} has {count} interactions, at least 3 are needed to split")]
    TooFewToSplit { user: String, count: usize },
    #[error("{have} interactions cannot fill {need} environments")]
    InsufficientInteractions { have: usize, need: usize },
    #[error("item index {index} out of range for {num_items} items")]
    IndexOutOfRange { index: usize, num_items: usize },
    #[error("invalid format spec: {0}")]
    FormatSpec(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Where each field lives in a delimited line.
#[derive(Clone, Debug, PartialEq)]
pub struct FormatSpec {
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    pub rating_col: usize,
    pub timestamp_col: usize,
    pub skip_header: bool,
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            delimiter: ',',
            user_col: 0,
            item_col: 1,
            rating_col: 2,
            timestamp_col: 3,
            skip_header: false,
        }
    }
}

impl FormatSpec {
    /// Builds a spec from a column layout such as `user,item,rating,timestamp`
    /// or `item,-,user,timestamp,rating`, where `-` marks an ignored column.
    pub fn from_columns(layout: &str, delimiter: char, skip_header: bool) -> Result<Self, DataError> {
        let mut cols: [Option<usize>; 4] = [None; 4];
        for (pos, name) in layout.split(',').map(str::trim).enumerate() {
            let slot = match name {
                "user" => 0,
                "item" => 1,
                "rating" => 2,
                "timestamp" => 3,
                "-" | "" => continue,
                other => return Err(DataError::FormatSpec(format!("unknown column name '{other}'"))),
            };
            if cols[slot].replace(pos).is_some() {
                return Err(DataError::FormatSpec(format!("column '{name}' given twice")));
            }
        }
        let need = |i: usize, name: &str| {
            cols[i].ok_or_else(|| DataError::FormatSpec(format!("missing column '{name}'")))
        };
        Ok(Self {
            delimiter,
            user_col: need(0, "user")?,
            item_col: need(1, "item")?,
            rating_col: need(2, "rating")?,
            timestamp_col: need(3, "timestamp")?,
            skip_header,
        })
    }

    fn parse_line(&self, line: &str) -> Option<InteractionRecord> {
        let fields: Vec<&str> = line.split(self.delimiter).map(str::trim).collect();
        let get = |i: usize| fields.get(i).copied().filter(|s| !s.is_empty());
        let timestamp: i64 = get(self.timestamp_col)?.parse().ok()?;
        let rating: f64 = get(self.rating_col)?.parse().ok()?;
        if timestamp < 0 || !rating.is_finite() {
            return None;
        }
        Some(InteractionRecord {
            user: get(self.user_col)?.to_string(),
            item: get(self.item_col)?.to_string(),
            rating,
            timestamp,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub records: Vec<InteractionRecord>,
    pub skipped: usize,
    /// 1-based line numbers of the first few malformed rows.
    pub skipped_lines: Vec<usize>,
}

pub fn parse_interactions(reader: impl BufRead, spec: &FormatSpec) -> Result<LoadReport, DataError> {
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut skipped_lines = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if (n == 0 && spec.skip_header) || line.trim().is_empty() {
            continue;
        }
        match spec.parse_line(&line) {
            Some(r) => records.push(r),
            None => {
                skipped += 1;
                if skipped_lines.len() < 10 {
                    skipped_lines.push(n + 1);
                }
            }
        }
    }
    if records.is_empty() {
        return Err(DataError::NoValidRows { skipped });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed rows (first at lines {skipped_lines:?})");
    }
    Ok(LoadReport {
        records,
        skipped,
        skipped_lines,
    })
}

pub fn load_interactions(path: &Path, spec: &FormatSpec) -> Result<LoadReport, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_interactions(BufReader::new(file), spec)
}

/// Keeps records rated at least `rating_threshold`, then repeatedly drops
/// users and items below their minimum degree until nothing changes.
pub fn kcore_filter(
    records: Vec<InteractionRecord>,
    min_user_deg: usize,
    min_item_deg: usize,
    rating_threshold: f64,
) -> Result<Vec<InteractionRecord>, DataError> {
    let mut kept: Vec<InteractionRecord> = records
        .into_iter()
        .filter(|r| r.rating >= rating_threshold)
        .collect();
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *user_deg.entry(&r.user).or_default() += 1;
            *item_deg.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = kept
            .iter()
            .map(|r| user_deg[r.user.as_str()] >= min_user_deg && item_deg[r.item.as_str()] >= min_item_deg)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut flags = keep.into_iter();
        kept.retain(|_| flags.next().unwrap_or(false));
    }
    if kept.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train = 0,
    Validation = 1,
    Test = 2,
}

impl Split {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Train),
            1 => Some(Self::Validation),
            2 => Some(Self::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "valid" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub item: u32,
    pub rating: f64,
    pub timestamp: i64,
    pub split: Split,
}

/// Id-remapped interactions, one chronological list per user.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    users: Vec<Vec<Interaction>>,
}

impl Dataset {
    pub fn new(
        user_keys: Vec<String>,
        item_keys: Vec<String>,
        users: Vec<Vec<Interaction>>,
    ) -> Result<Self, DataError> {
        let ds = Self {
            user_keys,
            item_keys,
            users,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Dense ids in order of first appearance; per-user lists stably sorted
    /// by timestamp (ties keep file order). Every interaction starts as train.
    pub fn from_records(records: &[InteractionRecord]) -> Self {
        let mut user_ids: HashMap<&str, usize> = HashMap::new();
        let mut item_ids: HashMap<&str, u32> = HashMap::new();
        let mut user_keys = Vec::new();
        let mut item_keys = Vec::new();
        let mut users: Vec<Vec<Interaction>> = Vec::new();
        for r in records {
            let u = *user_ids.entry(&r.user).or_insert_with(|| {
                user_keys.push(r.user.clone());
                users.push(Vec::new());
                user_keys.len() - 1
            });
            let i = *item_ids.entry(&r.item).or_insert_with(|| {
                item_keys.push(r.item.clone());
                (item_keys.len() - 1) as u32
            });
            users[u].push(Interaction {
                item: i,
                rating: r.rating,
                timestamp: r.timestamp,
                split: Split::Train,
            });
        }
        for list in &mut users {
            list.sort_by_key(|x| x.timestamp);
        }
        Self {
            user_keys,
            item_keys,
            users,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(Vec::len).sum()
    }

    pub fn user_key(&self, u: usize) -> &str {
        &self.user_keys[u]
    }

    pub fn item_key(&self, i: usize) -> &str {
        &self.item_keys[i]
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    pub fn user_index(&self, key: &str) -> Option<usize> {
        self.user_keys.iter().position(|k| k == key)
    }

    pub fn item_index(&self, key: &str) -> Option<usize> {
        self.item_keys.iter().position(|k| k == key)
    }

    pub fn interactions(&self, u: usize) -> &[Interaction] {
        &self.users[u]
    }

    /// Items of one split for user `u`, chronologically.
    pub fn split_items(&self, u: usize, split: Split) -> Vec<u32> {
        self.users[u]
            .iter()
            .filter(|x| x.split == split)
            .map(|x| x.item)
            .collect()
    }

    pub fn train_items(&self, u: usize) -> Vec<u32> {
        self.split_items(u, Split::Train)
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.users
            .iter()
            .flatten()
            .filter(|x| x.split == split)
            .count()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.users.len() != self.user_keys.len() {
            return Err(DataError::Invariant("user table and lists disagree".into()));
        }
        let n_items = self.item_keys.len();
        for (u, list) in self.users.iter().enumerate() {
            for w in list.windows(2) {
                if w[1].timestamp < w[0].timestamp {
                    return Err(DataError::Invariant(format!(
                        "user {} is not chronological",
                        self.user_keys[u]
                    )));
                }
                if w[1].split < w[0].split {
                    return Err(DataError::Invariant(format!(
                        "user {} has interleaved splits",
                        self.user_keys[u]
                    )));
                }
            }
            for x in list {
                if x.item as usize >= n_items {
                    return Err(DataError::IndexOutOfRange {
                        index: x.item as usize,
                        num_items: n_items,
                    });
                }
                if x.timestamp < 0 {
                    return Err(DataError::Invariant("negative timestamp".into()));
                }
            }
        }
        Ok(())
    }

    /// Human-readable summary.
    pub fn stats_summary(&self) -> String {
        let n = self.num_interactions();
        let density = if self.num_users() * self.num_items() == 0 {
            0.0
        } else {
            n as f64 / (self.num_users() * self.num_items()) as f64
        };
        let mut s = String::new();
        s.push_str(&format!("users = {}\n", self.num_users()));
        s.push_str(&format!("items = {}\n", self.num_items()));
        s.push_str(&format!("interactions = {n}\n"));
        s.push_str(&format!("density = {density:.6}\n"));
        for split in [Split::Train, Split::Validation, Split::Test] {
            s.push_str(&format!("{} = {}\n", split.name(), self.split_count(split)));
        }
        if self.num_users() > 0 {
            s.push_str(&format!(
                "mean_per_user = {:.2}\n",
                n as f64 / self.num_users() as f64
            ));
        }
        s
    }
}

fn ratio_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Chronological per-user split. Validation and test get `floor(ratio * n)`
/// interactions each; the rounding remainder stays in train.
pub fn temporal_split(mut dataset: Dataset, train: f64, validation: f64, test: f64) -> Result<Dataset, DataError> {
    debug_assert!((train + validation + test - 1.0).abs() < 1e-9);
    let _ = train;
    for (u, list) in dataset.users.iter_mut().enumerate() {
        let n = list.len();
        if n < 3 {
            return Err(DataError::TooFewToSplit {
                user: dataset.user_keys[u].clone(),
                count: n,
            });
        }
        let n_val = ratio_count(n, validation);
        let n_test = ratio_count(n, test);
        let n_train = n - n_val - n_test;
        for (k, x) in list.iter_mut().enumerate() {
            x.split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
    Ok(dataset)
}

/// Per-user environments: sorted, de-duplicated item lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvSlices {
    pub envs: Vec<Vec<u32>>,
}

impl EnvSlices {
    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    /// Distinct-item counts `N_t`.
    pub fn counts(&self) -> Vec<usize> {
        self.envs.iter().map(Vec::len).collect()
    }
}

/// Chunk sizes for `n` interactions in `t` environments; earlier chunks take
/// the remainder.
pub fn environment_sizes(n: usize, t: usize) -> Vec<usize> {
    let base = n / t;
    let rem = n % t;
    (0..t).map(|k| base + usize::from(k < rem)).collect()
}

/// Splits a chronological item list into `t` contiguous environments of
/// near-equal size. Repeats of an item inside one environment collapse.
pub fn divide_environments(items: &[u32], t: usize) -> Result<EnvSlices, DataError> {
    if t == 0 || items.len() < t {
        return Err(DataError::InsufficientInteractions {
            have: items.len(),
            need: t,
        });
    }
    let mut envs = Vec::with_capacity(t);
    let mut start = 0;
    for size in environment_sizes(items.len(), t) {
        let mut env = items[start..start + size].to_vec();
        env.sort_unstable();
        env.dedup();
        envs.push(env);
        start += size;
    }
    Ok(EnvSlices { envs })
}

pub fn to_multihot(indices: &[u32], num_items: usize) -> Result<Vec<f64>, DataError> {
    let mut v = vec![0.0; num_items];
    for &i in indices {
        let i = i as usize;
        if i >= num_items {
            return Err(DataError::IndexOutOfRange { index: i, num_items });
        }
        v[i] = 1.0;
    }
    Ok(v)
}

#[cfg(test)]
mod tests;
