use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use ppr_core::embedding::{self, canonicalize_labels, split, EmbeddingData, SplitMode, SplitSpec};
use ppr_core::model::{self, Checkpoint, TrainConfig};
use ppr_core::runner::{self, Experiment, ExperimentConfig};
use ppr_core::synth::{self, SynthConfig};
use ppr_core::{pseudo, seed};

#[derive(Parser)]
#[command(
    name = "ppr",
    version,
    about = "Pseudo-positive regularization experiments on embedding files"
)]
struct Cli {
    /// Root seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,

    /// Override a config field, e.g. `--set train.epochs=40` (value parsed as
    /// JSON, falling back to a plain string).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark as JSON-lines files.
    Synth(ConfigArgs),
    /// Train a classifier on a labeled embedding file.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Labeled training file.
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
    },
    /// Mine and select pseudo-positives with a trained model.
    Mine {
        /// Model checkpoint used as the feature extractor.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Number of pseudo-positives to keep.
        #[arg(long)]
        k: usize,
        #[arg(long)]
        l2_normalize: bool,
    },
    /// Run a full experiment sweep.
    Run(ConfigArgs),
    /// Aggregate `runs/*/record.json` into comparison tables.
    Compare,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), value);
                    return Ok(());
                }
                map.entry((*part).to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .with_context(|| format!("`{part}` is not an array index in `{path}`"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .with_context(|| format!("index {idx} out of range ({len}) in `{path}`"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("cannot descend into `{part}` of `{path}`"),
        };
    }
    Ok(())
}

fn load_config<T: DeserializeOwned>(args: &ConfigArgs) -> Result<T> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    for o in &args.overrides {
        let (path, raw) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not PATH=VALUE"))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, path, parsed)?;
    }
    serde_json::from_value(value).with_context(|| format!("invalid config {}", args.config.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cli_dir: &Option<PathBuf>, default: &Path) -> Result<PathBuf> {
    let dir = cli_dir.clone().unwrap_or_else(|| default.to_path_buf());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(args) => {
            let mut cfg: SynthConfig = load_config(args)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out_dir(&cli.out_dir, Path::new("out"))?;
            let data = synth::generate(&cfg)?;
            for (name, d) in [
                ("train", EmbeddingData::Labeled(data.train)),
                ("query", EmbeddingData::Labeled(data.query)),
                ("gallery", EmbeddingData::Labeled(data.gallery)),
                ("pool", EmbeddingData::Pool(data.pool)),
            ] {
                let path = dir.join(format!("{name}.jsonl"));
                embedding::write_embeddings(&path, &d)?;
                log::info!("wrote {}", path.display());
            }
        }
        Command::Train {
            config,
            train,
            train_fraction,
        } => {
            let mut cfg: TrainConfig = load_config(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out_dir(&cli.out_dir, Path::new("out"))?;
            let data = embedding::read_labeled(train)?;
            let (data, labels) = canonicalize_labels(&data)?;
            let (tr, val) = split(
                &data,
                &SplitSpec {
                    train_fraction: *train_fraction,
                    seed: seed::derive(cfg.seed, "split"),
                    mode: SplitMode::ByRecord,
                },
            )?;
            let (model, log) = model::train(&tr, &val, &cfg)?;
            let hash = runner::short_hash(&serde_json::to_string(&cfg)?);
            Checkpoint::new(model, hash, cfg.seed).save(dir.join("model.json"))?;
            write_json(&dir.join("train_log.json"), &log)?;
            write_json(&dir.join("labels.json"), &labels)?;
            if let Some(last) = log.epochs.last() {
                log::info!(
                    "trained {} epochs: loss {:.4}, val accuracy {:?}",
                    log.epochs.len(),
                    last.mean_loss,
                    last.val_accuracy
                );
            }
        }
        Command::Mine {
            model: model_path,
            train,
            pool,
            k,
            l2_normalize,
        } => {
            let dir = out_dir(&cli.out_dir, Path::new("out"))?;
            let ckpt = Checkpoint::load(model_path)?;
            let train = embedding::read_labeled(train)?;
            let pool = embedding::read_pool(pool)?;
            let tf = train.with_vectors(model::extract_features(
                &ckpt.model,
                train.records().iter().map(|r| &r.vector),
            )?)?;
            let pf = pool.with_vectors(model::extract_features(&ckpt.model, pool.vectors())?)?;
            let mined = pseudo::mine_nearest(&tf, &pf, *l2_normalize)?;
            let set = pseudo::select_pseudo_positives(&mined, *k, seed::derive(cli.seed.unwrap_or(0), "select"));
            let path = dir.join("pseudo.jsonl");
            pseudo::write_pseudo_set(&path, &set)?;
            log::info!(
                "selected {} of {} mined pairs -> {}",
                set.len(),
                mined.len(),
                path.display()
            );
        }
        Command::Run(args) => {
            let mut cfg: ExperimentConfig = load_config(args)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(d) = &cli.out_dir {
                cfg.out_dir = d.clone();
            }
            let dir = out_dir(&None, &cfg.out_dir)?;
            let exp = Experiment::new(cfg)?;
            log::info!("config hash {}", exp.config_hash());
            let records = exp.run_all()?;
            runner::write_records(&dir, &records)?;
            let rows = runner::compare(&records);
            runner::write_comparison(&dir, &rows)?;
            for r in &rows {
                log::info!(
                    "{:<13} k={:<6} rank-1 {:.4} ± {:.4}  mAP {:.4} ± {:.4}  (n={})",
                    r.method.as_str(),
                    r.k.map_or("-".to_string(), |k| k.to_string()),
                    r.rank1_mean,
                    r.rank1_std,
                    r.map_mean,
                    r.map_std,
                    r.runs
                );
            }
        }
        Command::Compare => {
            let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
            let records = runner::read_records(&dir)?;
            if records.is_empty() {
                bail!("no run records under {}", dir.join("runs").display());
            }
            let rows = runner::compare(&records);
            runner::write_comparison(&dir, &rows)?;
            log::info!("{} records -> {} rows", records.len(), rows.len());
        }
    }
    Ok(())
}
