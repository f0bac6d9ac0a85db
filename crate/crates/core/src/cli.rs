//! Command-line front end.
//!
//! Settings come from a flat `key = value` file (`--config`), then from
//! `--set key=value` overrides, then from the dedicated flags. Every table
//! is written twice, as TSV and as JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::dataio::{
    filter_and_split, generate_synthetic, load_interactions, load_interactions_with_columns, load_split, save_split,
    Column, DatasetSplit, Format, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalConfig, GaucWeighting, MetricsReport, Segment};
use crate::gradsuite;
use crate::model::{Ablation, InitScheme};
use crate::predictor::Pooling;
use crate::trainer::{self, Hyperparameters, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "mgnm", version, about = "Multi-grained sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key=value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed or comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Worker threads; 1 is bit-reproducible (so is any other count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Number of interest capsules K (the metric cutoff is `eval.k`).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Output directory, created if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied after `--config`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, index and split a raw interaction log.
    Prepare {
        input: PathBuf,
    },
    /// Write a synthetic corpus with planted interests as a prepared split.
    Synth,
    /// Train a model and evaluate it on the test segment.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or a popularity/random baseline.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `popularity` or `random` instead of a checkpoint.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Train and evaluate every ablation for each seed.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate once per seed (and per grid value) and report
    /// mean and standard deviation.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Histogram of activated levels for a checkpoint.
    Inspect {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also compare max-pool and sum-pool inference.
        #[arg(long)]
        compare_pooling: bool,
    },
    /// Finite-difference checks of every op and of the full loss.
    Gradcheck,
}

/// Flat settings with typed access. Keys that no command reads are
/// logged as a warning so typos do not pass silently.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Settings> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            s.insert_pair(line)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(s)
    }

    fn insert_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in `{pair}`")));
        }
        self.values.insert(key.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// A comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.get::<String>(key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(|p| p.trim().parse().map_err(|e| Error::Config(format!("{key} = {raw}: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// `all` or a count.
    fn get_negatives(&self, key: &str, default: Option<usize>) -> Result<Option<usize>> {
        match self.get::<String>(key)?.as_deref() {
            None => Ok(default),
            Some("all") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
        }
    }

    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.values.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn hyperparameters(&self) -> Result<Hyperparameters> {
        let d = Hyperparameters::default();
        let hp = Hyperparameters {
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            train_negatives: self.get_or("train_negatives", d.train_negatives)?,
            embedding_dim: self.get_or("embedding_dim", d.embedding_dim)?,
            interests: self.get_or("interests", d.interests)?,
            layers: self.get_or("layers", d.layers)?,
            tau: self.get_or("tau", d.tau)?,
            theta1: self.get_or("theta1", d.theta1)?,
            theta2: self.get_or("theta2", d.theta2)?,
            capacity: self.get_or("capacity", d.capacity)?,
            epochs: self.get_or("epochs", d.epochs)?,
            seed: self.get_or("seed", d.seed)?,
            leaky_slope: self.get_or("leaky_slope", d.leaky_slope)?,
            patience: self.get_or("patience", d.patience)?,
            init: self.get_or::<InitScheme>("init", d.init)?,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        Ok(EvalConfig {
            k: self.get_or("eval.k", d.k)?,
            negatives: self.get_negatives("eval.negatives", d.negatives)?,
            seed: self.get_or("eval.seed", d.seed)?,
            pooling: self.get::<Pooling>("eval.pooling")?,
            weighting: self.get_or::<GaucWeighting>("eval.gauc_weighting", d.weighting)?,
            per_user: self.get_or("eval.per_user", d.per_user)?,
        })
    }

    pub fn synthetic_config(&self, seed: u64) -> Result<SyntheticConfig> {
        let mut c = SyntheticConfig::new(
            self.get_or("synth.users", 2000)?,
            self.get_or("synth.items", 500)?,
            self.get_or("synth.interests", 2)?,
            self.get_or("synth.seq_len", 20)?,
            self.get_or("synth.noise", 0.1)?,
            seed,
        );
        c.num_clusters = self.get_or("synth.clusters", c.num_clusters)?;
        c.group_size = self.get_or("synth.group_size", c.group_size)?;
        c.coarse_rate = self.get_or("synth.coarse_rate", c.coarse_rate)?;
        c.switch_prob = self.get_or("synth.switch_prob", c.switch_prob)?;
        c.successor_rate = self.get_or("synth.successor_rate", c.successor_rate)?;
        c.capacity = self.get_or("capacity", c.capacity)?;
        Ok(c)
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) | Error::NoUsers | Error::VocabularyTooSmall { .. } => 3,
        Error::Diverged { .. } | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

/// Writes `<stem>.tsv` and `<stem>.json`.
fn write_table<T: Serialize>(out: &Path, stem: &str, header: &[&str], rows: &[Vec<String>], json: &T) -> Result<()> {
    let mut tsv = header.join("\t");
    tsv.push('\n');
    for r in rows {
        tsv.push_str(&r.join("\t"));
        tsv.push('\n');
    }
    let path = out.join(format!("{stem}.tsv"));
    fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    let path = out.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(json).expect("table serialises") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

const METRIC_HEADER: [&str; 6] = ["gauc", "ndcg_at_k", "hit_at_k", "mrr_at_k", "k", "instances"];

fn metric_cells(r: &MetricsReport) -> Vec<String> {
    vec![
        format!("{:.6}", r.gauc),
        format!("{:.6}", r.ndcg_at_k),
        format!("{:.6}", r.hit_at_k),
        format!("{:.6}", r.mrr_at_k),
        r.k.to_string(),
        r.num_instances.to_string(),
    ]
}

fn write_metrics(out: &Path, stem: &str, r: &MetricsReport) -> Result<()> {
    write_table(out, stem, &METRIC_HEADER, &[metric_cells(r)], r)?;
    if r.per_user.is_some() {
        r.write_per_user_tsv(&out.join(format!("{stem}_per_user.tsv")))?;
    }
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Context {
    settings: Settings,
    seeds: Vec<u64>,
    ablation: Ablation,
    out: PathBuf,
    eval: EvalConfig,
}

impl Context {
    fn data_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or(self.settings.get("data")?)
            .ok_or_else(|| Error::Config("no prepared split: pass --data or set data=".into()))
    }

    fn checkpoint(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or(self.settings.get("checkpoint")?)
            .ok_or_else(|| Error::Config("no checkpoint: pass --checkpoint or set checkpoint=".into()))
    }

    /// Hyperparameters for one run; the capacity follows the split unless
    /// set explicitly.
    fn hyperparameters(&self, settings: &Settings, seed: u64, split: &DatasetSplit) -> Result<Hyperparameters> {
        let mut hp = settings.hyperparameters()?;
        hp.seed = seed;
        if settings.get::<usize>("capacity")?.is_none() {
            hp.capacity = split.capacity;
        }
        Ok(hp)
    }

    fn train_options<'a>(&self) -> Result<TrainOptions<'a>> {
        let negatives = self.settings.get_negatives("train.validation_negatives", Some(100))?;
        Ok(TrainOptions {
            validation: Some(EvalConfig {
                negatives,
                ..self.eval.clone()
            }),
            log: None,
            target_loss: self.settings.get("train.target_loss")?,
        })
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        if self.seeds.len() > 1 {
            self.out.join(format!("seed-{seed}"))
        } else {
            self.out.clone()
        }
    }

    fn train_and_test(
        &self,
        split: &DatasetSplit,
        ablation: Ablation,
        hp: &Hyperparameters,
        dir: Option<&Path>,
    ) -> Result<MetricsReport> {
        let mut log_buf = Vec::new();
        let mut opts = self.train_options()?;
        opts.log = Some(&mut log_buf);
        let outcome = trainer::train(split, ablation, hp, opts)?;
        let report = evaluator::evaluate(&outcome.model, split, Segment::Test, &self.eval)?;
        if let Some(dir) = dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            checkpoint::save(&outcome.model, &dir.join("model.bin"))?;
            let path = dir.join("train_log.jsonl");
            fs::write(&path, &log_buf).map_err(|e| Error::io(&path, e))?;
            let path = dir.join("hyperparameters.json");
            let text = serde_json::to_string_pretty(hp).expect("serialises") + "\n";
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            write_metrics(dir, "metrics", &report)?;
        }
        Ok(report)
    }
}

fn prepare(ctx: &Context, input: &Path) -> Result<()> {
    let s = &ctx.settings;
    let format = s.get::<Format>("format")?.unwrap_or_else(|| Format::from_path(input));
    let raw = match s.get_list::<String>("columns")? {
        None => load_interactions(input, format)?,
        Some(names) => {
            let cols = names
                .iter()
                .map(|n| match n.as_str() {
                    "user_id" | "user" => Ok(Column::User),
                    "item_id" | "item" => Ok(Column::Item),
                    "timestamp" | "time" => Ok(Column::Timestamp),
                    "rating" => Ok(Column::Rating),
                    other => Err(Error::Config(format!("unknown column `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            load_interactions_with_columns(input, format, &cols)?
        }
    };
    let ratios = match s.get_list::<u32>("ratios")? {
        None => (7, 1, 2),
        Some(r) if r.len() == 3 => (r[0], r[1], r[2]),
        Some(_) => return Err(Error::Config("ratios needs three values".into())),
    };
    let split = filter_and_split(&raw, s.get_or("min_rating", 2.0)?, ratios, s.get_or("capacity", 20)?)?;
    save_split(&split, &ctx.out)?;
    let summary = json!({
        "users": split.vocab.num_users(),
        "items": split.vocab.num_items(),
        "train": split.train.len(),
        "validation": split.validation.len(),
        "test": split.test.len(),
    });
    println!("{summary}");
    Ok(())
}

fn synth(ctx: &Context) -> Result<()> {
    let cfg = ctx.settings.synthetic_config(ctx.seeds[0])?;
    let split = generate_synthetic(&cfg)?;
    save_split(&split, &ctx.out)?;
    println!(
        "{}",
        json!({"users": cfg.num_users, "items": cfg.num_items, "train": split.train.len(), "test": split.test.len()})
    );
    Ok(())
}

fn train(ctx: &Context, data: &Path) -> Result<()> {
    let split = load_split(data)?;
    for &seed in &ctx.seeds {
        let hp = ctx.hyperparameters(&ctx.settings, seed, &split)?;
        let dir = ctx.seed_dir(seed);
        let r = ctx.train_and_test(&split, ctx.ablation, &hp, Some(&dir))?;
        println!("{}", json!({"seed": seed, "test": r}));
    }
    Ok(())
}

fn eval(ctx: &Context, data: &Path, checkpoint_path: Option<PathBuf>, baseline: Option<&str>) -> Result<()> {
    let split = load_split(data)?;
    let (report, stem) = match baseline {
        Some("popularity") => (evaluator::evaluate_popularity(&split, Segment::Test, &ctx.eval)?, "popularity"),
        Some("random") => (evaluator::evaluate_random(&split, Segment::Test, &ctx.eval)?, "random"),
        Some(other) => return Err(Error::Config(format!("unknown baseline `{other}`"))),
        None => {
            let model = checkpoint::load(&ctx.checkpoint(checkpoint_path)?)?;
            (evaluator::evaluate(&model, &split, Segment::Test, &ctx.eval)?, "metrics")
        }
    };
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    write_metrics(&ctx.out, stem, &report)?;
    println!("{}", report.to_json());
    Ok(())
}

#[derive(Serialize)]
struct Row {
    label: String,
    seed: u64,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct Summary {
    label: String,
    runs: usize,
    gauc: (f64, f64),
    ndcg_at_k: (f64, f64),
    hit_at_k: (f64, f64),
    mrr_at_k: (f64, f64),
}

fn summarise(rows: &[Row]) -> Vec<Summary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let of = |f: fn(&MetricsReport) -> f64| {
                mean_std(&rows.iter().filter(|r| r.label == label).map(|r| f(&r.metrics)).collect::<Vec<_>>())
            };
            Summary {
                label: label.to_string(),
                runs: rows.iter().filter(|r| r.label == label).count(),
                gauc: of(|m| m.gauc),
                ndcg_at_k: of(|m| m.ndcg_at_k),
                hit_at_k: of(|m| m.hit_at_k),
                mrr_at_k: of(|m| m.mrr_at_k),
            }
        })
        .collect()
}

fn write_runs(out: &Path, stem: &str, rows: &[Row]) -> Result<()> {
    let summary = summarise(rows);
    let mut header = vec!["label", "seed"];
    header.extend(METRIC_HEADER);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![r.label.clone(), r.seed.to_string()];
            c.extend(metric_cells(&r.metrics));
            c
        })
        .collect();
    write_table(out, stem, &header, &cells, &rows)?;
    let header = ["label", "runs", "gauc_mean", "gauc_std", "ndcg_mean", "ndcg_std", "hit_mean", "hit_std", "mrr_mean", "mrr_std"];
    let cells: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            let mut c = vec![s.label.clone(), s.runs.to_string()];
            for (m, sd) in [s.gauc, s.ndcg_at_k, s.hit_at_k, s.mrr_at_k] {
                c.push(format!("{m:.6}"));
                c.push(format!("{sd:.6}"));
            }
            c
        })
        .collect();
    write_table(out, &format!("{stem}_summary"), &header, &cells, &summary)?;
    for s in &summary {
        println!(
            "{}\tNDCG@k {:.4}±{:.4}\tHIT@k {:.4}±{:.4}\tGAUC {:.4}±{:.4}",
            s.label, s.ndcg_at_k.0, s.ndcg_at_k.1, s.hit_at_k.0, s.hit_at_k.1, s.gauc.0, s.gauc.1
        );
    }
    Ok(())
}

fn ablate(ctx: &Context, data: &Path) -> Result<()> {
    let split = load_split(data)?;
    let mut rows = Vec::new();
    for &seed in &ctx.seeds {
        let hp = ctx.hyperparameters(&ctx.settings, seed, &split)?;
        for ablation in Ablation::ALL {
            let metrics = ctx.train_and_test(&split, ablation, &hp, None)?;
            log::info!("seed {seed} {ablation}: ndcg {:.4}", metrics.ndcg_at_k);
            rows.push(Row {
                label: ablation.name().to_string(),
                seed,
                metrics,
            });
        }
    }
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    write_runs(&ctx.out, "ablation", &rows)
}

fn sweep(ctx: &Context, data: &Path) -> Result<()> {
    let split = load_split(data)?;
    let grid = ctx.settings.get::<String>("sweep.param")?;
    let values = ctx.settings.get_list::<String>("sweep.values")?;
    let points: Vec<(String, Option<String>)> = match (&grid, values) {
        (Some(p), Some(vs)) => vs.into_iter().map(|v| (format!("{p}={v}"), Some(v))).collect(),
        (None, None) => vec![(ctx.ablation.name().to_string(), None)],
        _ => return Err(Error::Config("sweep.param and sweep.values go together".into())),
    };
    let mut rows = Vec::new();
    for (label, value) in &points {
        for &seed in &ctx.seeds {
            let mut settings = Settings {
                values: ctx.settings.values.clone(),
                used: Default::default(),
            };
            if let (Some(p), Some(v)) = (&grid, value) {
                settings.set(p, v);
            }
            let hp = ctx.hyperparameters(&settings, seed, &split)?;
            let metrics = ctx.train_and_test(&split, ctx.ablation, &hp, None)?;
            rows.push(Row {
                label: label.clone(),
                seed,
                metrics,
            });
        }
    }
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    write_runs(&ctx.out, "sweep", &rows)
}

fn inspect(ctx: &Context, data: &Path, checkpoint_path: Option<PathBuf>, compare: bool) -> Result<()> {
    let split = load_split(data)?;
    let model = checkpoint::load(&ctx.checkpoint(checkpoint_path)?)?;
    let hist = evaluator::level_histogram(&model, &split, Segment::Test, ctx.eval.seed)?;
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let path = ctx.out.join("levels.tsv");
    fs::write(&path, hist.to_tsv()).map_err(|e| Error::io(&path, e))?;
    let path = ctx.out.join("levels.json");
    let text = serde_json::to_string_pretty(&json!({
        "levels": hist.levels,
        "aggregate": hist.aggregate,
        "per_user": hist.per_user,
    }))
    .expect("serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    println!("{}", json!({"aggregate": hist.aggregate}));
    if compare {
        let mut rows = Vec::new();
        let mut reports = Vec::new();
        for pooling in [Pooling::Max, Pooling::Sum] {
            let cfg = EvalConfig {
                pooling: Some(pooling),
                ..ctx.eval.clone()
            };
            let r = evaluator::evaluate(&model, &split, Segment::Test, &cfg)?;
            let mut cells = vec![pooling.to_string()];
            cells.extend(metric_cells(&r));
            rows.push(cells);
            reports.push(json!({"pooling": pooling.to_string(), "metrics": r}));
        }
        let mut header = vec!["pooling"];
        header.extend(METRIC_HEADER);
        write_table(&ctx.out, "pooling", &header, &rows, &reports)?;
        for r in &rows {
            println!("{}", r.join("\t"));
        }
    }
    Ok(())
}

fn gradcheck(ctx: &Context) -> Result<bool> {
    let tol = ctx.settings.get_or("gradcheck.tolerance", gradsuite::TOLERANCE)?;
    let reports = gradsuite::run_suite(ctx.seeds[0], tol)?;
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.op_name.clone(),
                format!("{:.3e}", r.max_rel_error),
                format!("{:e}", r.tolerance),
                r.coordinates.to_string(),
                if r.passed { "PASS" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    write_table(&ctx.out, "gradcheck", &["op", "max_rel_error", "tolerance", "coordinates", "status"], &rows, &reports)?;
    for r in &rows {
        println!("{}", r.join("\t"));
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn dispatch(cli: Cli) -> Result<i32> {
    let Common {
        config,
        seed,
        ablation,
        threads,
        k,
        out,
        overrides,
    } = cli.common;
    let mut settings = match &config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Settings::parse(&text, &path.display().to_string())?
        }
        None => Settings::default(),
    };
    for pair in &overrides {
        settings.insert_pair(pair)?;
    }
    if let Some(k) = k {
        settings.set("interests", k);
    }
    if let Some(a) = ablation {
        settings.set("ablation", a);
    }
    if let Some(t) = threads {
        settings.set("threads", t);
    }
    if let Some(o) = out {
        settings.set("out", o.display());
    }
    let seeds = match (seed.is_empty(), settings.get_list::<u64>("seeds")?) {
        (false, _) => seed,
        (true, Some(list)) => list,
        (true, None) => vec![settings.get_or("seed", 0)?],
    };
    if let Some(n) = settings.get::<usize>("threads")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let ctx = Context {
        ablation: settings.get_or("ablation", Ablation::Full)?,
        out: settings.get_or("out", PathBuf::from("out"))?,
        eval: settings.eval_config()?,
        seeds,
        settings,
    };
    // Reads every hyperparameter key up front, so they count as used.
    ctx.settings.hyperparameters()?;

    let mut code = 0;
    match cli.command {
        Command::Prepare { input } => prepare(&ctx, &input)?,
        Command::Synth => {
            ctx.settings.synthetic_config(0)?;
            synth(&ctx)?
        }
        Command::Train { data } => train(&ctx, &ctx.data_dir(data)?)?,
        Command::Eval {
            data,
            checkpoint,
            baseline,
        } => eval(&ctx, &ctx.data_dir(data)?, checkpoint, baseline.as_deref())?,
        Command::Ablate { data } => ablate(&ctx, &ctx.data_dir(data)?)?,
        Command::Sweep { data } => sweep(&ctx, &ctx.data_dir(data)?)?,
        Command::Inspect {
            data,
            checkpoint,
            compare_pooling,
        } => inspect(&ctx, &ctx.data_dir(data)?, checkpoint, compare_pooling)?,
        Command::Gradcheck => {
            if !gradcheck(&ctx)? {
                eprintln!("mgnm: error: gradient check failed");
                code = 1;
            }
        }
    }
    let unused = ctx.settings.unused();
    if !unused.is_empty() {
        log::warn!("settings not used by this command: {}", unused.join(", "));
    }
    Ok(code)
}

/// Runs the CLI on `args` and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MGNM_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("mgnm: {}", first.trim_start_matches("error: ").trim());
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mgnm: error: {e}");
            exit_code(&e)
        }
    }
}
