//! Training hyperparameters and the flat `key = value` config format.

use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value for '{field}': {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
}

impl ConfigError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Self::InvalidValue {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Name of the offending field, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::UnknownKey(k) => Some(k),
            Self::InvalidValue { field, .. } => Some(field),
            Self::Syntax { .. } => None,
        }
    }
}

/// Which parameters the cross-environment variance penalty differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltySubset {
    /// Decoder parameters only: gate locations and the item layer.
    Structure,
    All,
}

impl PenaltySubset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Structure => "structure",
            Self::All => "all",
        }
    }

    pub fn includes(self, param_name: &str) -> bool {
        match self {
            Self::Structure => param_name.starts_with("decoder."),
            Self::All => true,
        }
    }
}

impl FromStr for PenaltySubset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "structure" => Ok(Self::Structure),
            "all" => Ok(Self::All),
            _ => Err(format!("expected 'structure' or 'all', got '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Environments per user during training.
    pub t_train: usize,
    /// Environments per user at inference.
    pub t_infer: usize,
    /// Width of the per-environment feature `e_t`.
    pub k: usize,
    /// Width of the preference state `z_t`.
    pub h: usize,
    /// Number of latent categories in the gated decoder.
    pub c: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub sigma_eps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub penalty_subset: PenaltySubset,
    pub mc_samples: usize,
    /// Fraction of planned optimizer steps spent ramping `lambda1`.
    pub anneal_fraction: f64,
    /// Divide each environment's reconstruction term by its item count.
    pub normalize_by_count: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_train: 2,
            t_infer: 2,
            k: 200,
            h: 200,
            c: 2,
            lambda1: 0.6,
            lambda2: 0.5,
            lambda3: 1e-4,
            sigma_eps: 0.5,
            lr: 1e-4,
            batch_size: 500,
            dropout: 0.5,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            hidden: vec![800],
            penalty_subset: PenaltySubset::Structure,
            mc_samples: 1,
            anneal_fraction: 0.2,
            normalize_by_count: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "T_t",
    "T_i",
    "K",
    "H",
    "C",
    "lambda1",
    "lambda2",
    "lambda3",
    "sigma_eps",
    "lr",
    "batch_size",
    "dropout",
    "max_epochs",
    "patience",
    "seed",
    "hidden",
    "penalty_subset",
    "mc_samples",
    "anneal_fraction",
    "normalize_by_count",
];

fn parse<T: FromStr>(field: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| ConfigError::invalid(field, format!("'{value}': {e}")))
}

fn canonical(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .copied()
        .find(|k| *k == key)
        .or_else(|| KEYS.iter().copied().find(|k| k.eq_ignore_ascii_case(key)))
}

impl TrainConfig {
    /// Sets one field from its textual form. Keys match case-insensitively.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = canonical(key.trim()).ok_or_else(|| ConfigError::UnknownKey(key.trim().to_string()))?;
        let v = value.trim();
        match key {
            "T_t" => self.t_train = parse(key, v)?,
            "T_i" => self.t_infer = parse(key, v)?,
            "K" => self.k = parse(key, v)?,
            "H" => self.h = parse(key, v)?,
            "C" => self.c = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "lambda3" => self.lambda3 = parse(key, v)?,
            "sigma_eps" => self.sigma_eps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| parse(key, s.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "penalty_subset" => {
                self.penalty_subset = v.parse().map_err(|e: String| ConfigError::invalid(key, e))?
            }
            "mc_samples" => self.mc_samples = parse(key, v)?,
            "anneal_fraction" => self.anneal_fraction = parse(key, v)?,
            "normalize_by_count" => self.normalize_by_count = parse(key, v)?,
            _ => unreachable!("canonical() only returns known keys"),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every field; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let hidden = if hidden.is_empty() { "none".to_string() } else { hidden.join(",") };
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("T_t", self.t_train.to_string());
        line("T_i", self.t_infer.to_string());
        line("K", self.k.to_string());
        line("H", self.h.to_string());
        line("C", self.c.to_string());
        line("lambda1", format!("{:?}", self.lambda1));
        line("lambda2", format!("{:?}", self.lambda2));
        line("lambda3", format!("{:?}", self.lambda3));
        line("sigma_eps", format!("{:?}", self.sigma_eps));
        line("lr", format!("{:?}", self.lr));
        line("batch_size", self.batch_size.to_string());
        line("dropout", format!("{:?}", self.dropout));
        line("max_epochs", self.max_epochs.to_string());
        line("patience", self.patience.to_string());
        line("seed", self.seed.to_string());
        line("hidden", hidden);
        line("penalty_subset", self.penalty_subset.name().to_string());
        line("mc_samples", self.mc_samples.to_string());
        line("anneal_fraction", format!("{:?}", self.anneal_fraction));
        line("normalize_by_count", self.normalize_by_count.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("T_t", self.t_train),
            ("T_i", self.t_infer),
            ("K", self.k),
            ("H", self.h),
            ("C", self.c),
            ("batch_size", self.batch_size),
            ("mc_samples", self.mc_samples),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::invalid(name, "must be at least 1"));
            }
        }
        if self.hidden.contains(&0) {
            return Err(ConfigError::invalid("hidden", "layer widths must be at least 1"));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(name, "must be finite and non-negative"));
            }
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(ConfigError::invalid("sigma_eps", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::invalid("dropout", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(ConfigError::invalid("anneal_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}
