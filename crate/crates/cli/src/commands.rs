use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cdr_core::config::{ConfigError, TrainConfig};
use cdr_core::dataio::{
    kcore_filter, load_interactions, read_dataset, temporal_split, write_dataset, Dataset, FormatSpec, Split,
};
use cdr_core::eval::{evaluate, evaluate_popularity, shift_groups, EvalOptions, RecallDenominator};
use cdr_core::inference::{rank_topk, EnvTarget, Engine, Intervention, Strategy};
use cdr_core::synthgen::{self, SynthConfig};
use cdr_core::trainer::{self, load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, TrainError};

use crate::{
    Command, ConfigArgs, EvalArgs, IngestArgs, InferArgs, InterveneArgs, ScoringArgs, SweepArgs, SynthArgs,
    TrainArgs,
};

pub enum CliError {
    /// Bad arguments or configuration: exit code 2.
    Usage(String),
    /// Failure while running: exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => f.write_str(m),
            Self::Runtime(e) => {
                let mut shown = String::new();
                for cause in e.chain().map(ToString::to_string) {
                    if !shown.contains(&cause) {
                        if !shown.is_empty() {
                            shown.push_str(": ");
                        }
                        shown.push_str(&cause);
                    }
                }
                f.write_str(&shown)
            }
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(format!("invalid config: {e}"))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Intervene(a) => intervene(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Into::into)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Into::into)
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path)
        .with_context(|| format!("reading dataset {}", path.display()))
        .map_err(Into::into)
}

fn parse_list<T: std::str::FromStr>(field: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("invalid value for --{field}: '{s}'"))))
        .collect()
}

fn ingest(a: IngestArgs) -> Result<()> {
    let spec = FormatSpec::from_columns(&a.columns, a.delimiter, a.header).map_err(|e| usage(e.to_string()))?;
    let fr: Vec<f64> = parse_list("split", &a.split)?;
    if fr.len() != 3 || fr.iter().any(|f| *f <= 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(usage("--split needs three positive fractions summing to 1"));
    }
    out_dir(&a.out.out)?;
    let report = load_interactions(&a.input, &spec).context("loading interactions")?;
    let raw = report.records.len();
    let kept = kcore_filter(report.records, a.min_user, a.min_item, a.rating_threshold).context("filtering")?;
    let filtered = kept.len();
    let ds = temporal_split(Dataset::from_records(&kept), fr[0], fr[1], fr[2]).context("splitting")?;
    write_dataset(&a.out.out.join("dataset.cdrd"), &ds).context("writing dataset")?;
    let mut summary = format!(
        "rows_read = {raw}\nrows_skipped = {}\nrows_after_filter = {filtered}\n",
        report.skipped
    );
    summary.push_str(&ds.stats_summary());
    write(a.out.out.join("ingest.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        users: a.users,
        items: a.items,
        categories: a.categories,
        latent: a.latent,
        envs: a.envs,
        per_env: a.per_env,
        rho: a.rho,
        shifted_fraction: a.shifted,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    out_dir(&a.out.out)?;
    let (ds, truth) = synthgen::generate(&cfg).context("generating")?;
    write_dataset(&a.out.out.join("dataset.cdrd"), &ds).context("writing dataset")?;
    synthgen::write_sidecar(&a.out.out.join("truth.txt"), &ds, &truth).context("writing ground truth")?;
    let echo = format!(
        "users = {}\nitems = {}\ncategories = {}\nlatent = {}\nenvs = {}\nper_env = {}\nrho = {}\nshifted = {}\nseed = {}\n",
        cfg.users, cfg.items, cfg.categories, cfg.latent, cfg.envs, cfg.per_env, cfg.rho, cfg.shifted_fraction, cfg.seed
    );
    write(a.out.out.join("synth.txt"), &echo)?;
    print!("{}", ds.stats_summary());
    Ok(())
}

fn run_training(ds: &Dataset, cfg: &TrainConfig, dir: &Path) -> Result<trainer::TrainOutcome> {
    out_dir(dir)?;
    write(dir.join("config.cfg"), &cfg.to_text())?;
    let mut log = String::new();
    let result = trainer::train_with(ds, cfg, |r: &EpochRecord| {
        log.push_str(&r.to_record());
        log.push('\n');
    });
    write(dir.join("epochs.log"), &log)?;
    match result {
        Ok(out) => {
            save_checkpoint(&dir.join("model.ckpt"), &out.best).context("saving checkpoint")?;
            if !out.dropped_users.is_empty() {
                log::warn!("{} users had too few training interactions", out.dropped_users.len());
            }
            Ok(out)
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            last_finite,
        }) => {
            let path = dir.join("last_finite.ckpt");
            save_checkpoint(&path, &last_finite).context("saving last finite checkpoint")?;
            Err(anyhow::anyhow!(
                "training diverged at epoch {epoch}, step {step}; last finite state saved to {}",
                path.display()
            )
            .into())
        }
        Err(TrainError::Config(e)) => Err(e.into()),
        Err(e) => Err(anyhow::Error::new(e).into()),
    }
}

fn test_report(ck: &Checkpoint, ds: &Dataset, cutoffs: Vec<usize>) -> String {
    let opts = EvalOptions {
        t_i: ck.config.t_infer,
        cutoffs,
        ..EvalOptions::default()
    };
    evaluate(&ck.model, ds, &opts).to_records()
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    print!("{}", cfg.to_text());
    let ds = load_data(&a.data)?;
    let out = run_training(&ds, &cfg, &a.out.out)?;
    let metrics = test_report(&out.best, &ds, vec![10, 20]);
    write(a.out.out.join("metrics.txt"), &metrics)?;
    println!("best_epoch = {}", out.best.epoch);
    print!("{metrics}");
    Ok(())
}

struct Scoring {
    ds: Dataset,
    ck: Checkpoint,
    strategy: Strategy,
    t_i: usize,
}

fn load_scoring(a: &ScoringArgs) -> Result<Scoring> {
    let strategy: Strategy = a.strategy.parse().map_err(|e| usage(format!("{e}")))?;
    if a.t_i == Some(0) {
        return Err(usage("--t-i must be positive"));
    }
    let ds = load_data(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    ck.check_compatible(&ck.config, ds.num_items())
        .context("checkpoint does not match dataset")?;
    let t_i = a.t_i.unwrap_or(ck.config.t_infer);
    Ok(Scoring { ds, ck, strategy, t_i })
}

fn eval(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse().map_err(usage)?;
    let cutoffs: Vec<usize> = parse_list("cutoffs", &a.cutoffs)?;
    let s = load_scoring(&a.scoring)?;
    out_dir(&a.out.out)?;
    let opts = EvalOptions {
        split,
        strategy: s.strategy,
        t_i: s.t_i,
        cutoffs,
        denominator: RecallDenominator::Relevant,
    };
    let report = evaluate(&s.ck.model, &s.ds, &opts);
    let pop = evaluate_popularity(&s.ds, &opts);
    let text = format!("{}{}", report.to_records(), pop.to_records());
    write(a.out.out.join("metrics.txt"), &text)?;
    write(
        a.out.out.join("per_user.tsv"),
        &report.to_table(|u| s.ds.user_key(u).to_string()),
    )?;
    print!("{text}");
    if let Some(truth) = &a.truth {
        let tables = synthgen::read_sidecar(truth, &s.ds).context("reading ground truth")?;
        let groups = shift_groups(
            &s.ck.model,
            &s.ds,
            a.groups,
            &tables.item_category,
            tables.categories,
            &opts,
            a.symmetric_kl,
        )
        .context("shift-group analysis")?;
        write(a.out.out.join("shift_groups.tsv"), &groups.to_table())?;
        write(a.out.out.join("shift_groups.txt"), &groups.to_records())?;
        println!("kl_distance_spearman = {:.6}", groups.kl_distance_spearman);
    }
    Ok(())
}

fn user_index(ds: &Dataset, key: &str) -> Result<usize> {
    ds.user_index(key).ok_or_else(|| usage(format!("unknown user '{key}'")))
}

fn infer(a: InferArgs) -> Result<()> {
    let s = load_scoring(&a.scoring)?;
    let users: Vec<usize> = match &a.users {
        Some(list) => list.split(',').map(|k| user_index(&s.ds, k.trim())).collect::<Result<_>>()?,
        None => (0..s.ds.num_users()).collect(),
    };
    out_dir(&a.out.out)?;
    let histories: Vec<Vec<u32>> = users.iter().map(|&u| s.ds.train_items(u)).collect();
    let refs: Vec<&[u32]> = histories.iter().map(Vec::as_slice).collect();
    let scores = Engine::new(&s.ck.model).score(&refs, s.t_i, s.strategy);
    let mut text = String::new();
    for ((&u, h), sc) in users.iter().zip(&histories).zip(&scores) {
        let rec = rank_topk(u, sc, h, a.k);
        text.push_str(&rec.to_record(s.ds.user_key(u), |i| s.ds.item_key(i as usize).to_string()));
        text.push('\n');
    }
    write(a.out.out.join("recommendations.txt"), &text)?;
    if users.len() <= 20 {
        print!("{text}");
    }
    Ok(())
}

fn intervene(a: InterveneArgs) -> Result<()> {
    let target = match a.target.as_str() {
        "latest" => EnvTarget::Latest,
        "all" => EnvTarget::All,
        t => EnvTarget::Index(
            t.parse()
                .map_err(|_| usage(format!("--target must be latest, all or an index, got '{t}'")))?,
        ),
    };
    let s = load_scoring(&a.scoring)?;
    let user = user_index(&s.ds, &a.user)?;
    let donor = user_index(&s.ds, &a.donor)?;
    out_dir(&a.out.out)?;
    let engine = Engine::new(&s.ck.model);
    let history = s.ds.train_items(user);
    let donor_history = s.ds.train_items(donor);
    let donor_state = engine
        .roll_state(&donor_history, s.t_i, None)
        .context("rolling donor")?;
    let iv = Intervention {
        target,
        e: donor_state.e.last().expect("at least one environment").clone(),
    };
    let own = engine.roll_state(&history, s.t_i, None).context("rolling user")?;
    let before = rank_topk(user, &engine.predict(&[own], s.strategy)[0], &history, a.k);
    let after = engine
        .intervene(user, &history, s.t_i, &iv, s.strategy, &history, a.k)
        .context("intervening")?;
    let donor_own = rank_topk(donor, &engine.predict(&[donor_state], s.strategy)[0], &history, a.k);
    let item = |i: u32| s.ds.item_key(i as usize).to_string();
    let text = format!(
        "# ranked excluding {}'s training items\nbefore {}\nafter {}\ndonor {}\n",
        a.user,
        before.to_record(&a.user, item),
        after.to_record(&a.user, item),
        donor_own.to_record(&a.donor, item),
    );
    write(a.out.out.join("intervention.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn parse_grid(grid: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = grid
        .split_once('=')
        .ok_or_else(|| usage(format!("--grid expects KEY=A..B or KEY=v1,v2, got '{grid}'")))?;
    let values: Vec<String> = if let Some((lo, hi)) = values.split_once("..") {
        let lo: i64 = lo.trim().parse().map_err(|_| usage(format!("invalid grid bound '{lo}'")))?;
        let hi: i64 = hi.trim().parse().map_err(|_| usage(format!("invalid grid bound '{hi}'")))?;
        if hi < lo {
            return Err(usage("empty grid range"));
        }
        (lo..=hi).map(|v| v.to_string()).collect()
    } else {
        values.split(',').map(|v| v.trim().to_string()).collect()
    };
    Ok((key.trim().to_string(), values))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = load_config(&a.config)?;
    let cutoffs: Vec<usize> = parse_list("cutoffs", &a.cutoffs)?;
    let (key, values) = parse_grid(&a.grid)?;
    let configs: Vec<TrainConfig> = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(&key, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let ds = load_data(&a.data)?;
    out_dir(&a.out.out)?;
    write(a.out.out.join("config.cfg"), &base.to_text())?;
    let mut table = String::new();
    for (v, cfg) in values.iter().zip(&configs) {
        let dir = a.out.out.join(format!("{key}={v}"));
        let out = run_training(&ds, cfg, &dir)?;
        let opts = EvalOptions {
            t_i: cfg.t_infer,
            cutoffs: cutoffs.clone(),
            ..EvalOptions::default()
        };
        let rep = evaluate(&out.best.model, &ds, &opts);
        let mut line = format!("{key}={v}");
        for (i, k) in cutoffs.iter().enumerate() {
            line.push_str(&format!(" recall@{k}={:.6} ndcg@{k}={:.6}", rep.recall[i], rep.ndcg[i]));
        }
        line.push_str(&format!(" best_epoch={} epochs={}", out.best.epoch, out.log.len()));
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    write(a.out.out.join("sweep.txt"), &table)?;
    Ok(())
}
