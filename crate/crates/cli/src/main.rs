mod config;
mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmckd_core::datamodel::{load_dataset, save_dataset, Dataset, ModalityDims, Split, SyntheticConfig, MANIFEST_FILE};
use mmckd_core::losses::LossMode;
use mmckd_core::train::{
    ablate, cost_report, evaluate_fixed, evaluate_random, load_checkpoint, save_checkpoint, train,
    DEFAULT_MR_GRID,
};
use serde_json::json;

use config::RunConfig;
use manifest::{dataset_ref, now, RunManifest};

const CHECKPOINT_FILE: &str = "best.ckpt";
const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "mmckd", version, about = "Multimodal sentiment regression with contrastive knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train teacher and students jointly.
    Train(TrainArgs),
    /// Evaluate a checkpoint under a missing-modality protocol.
    Eval(EvalArgs),
    /// Compare auxiliary loss modes.
    Ablate(AblateArgs),
    /// Parameter count and FLOP estimate.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Feature dimensions, e.g. `l=768,v=47,a=74`.
    #[arg(long, default_value_t = ModalityDims::default())]
    dims: ModalityDims,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value_t = 20.0)]
    snr: f64,
    /// Inclusive sequence-length range `min,max`.
    #[arg(long, default_value = "4,12", value_parser = parse_range)]
    len_range: (usize, usize),
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Training dataset directory.
    #[arg(long, env = "MMCKD_DATA")]
    data: PathBuf,
    /// Validation dataset; defaults to the last 10% of the training data.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Flat JSON config; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Fixed,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test dataset directory.
    #[arg(long, env = "MMCKD_DATA")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "fixed")]
    protocol: Protocol,
    /// Target missing rates for the random protocol.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_MR_GRID)]
    mr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the sampled random-protocol masks here.
    #[arg(long)]
    masks_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "mvsc,uniview,none")]
    modes: Vec<LossMode>,
    /// Seeds per mode, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dims: Option<ModalityDims>,
    #[arg(long, default_value_t = 4)]
    bs: usize,
    #[arg(long)]
    json: bool,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `min,max`, got `{s}`"))?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("{} is not empty; pass --force to overwrite", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn resolve(flags: &TrainFlags, loss_mode: Option<LossMode>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(flags.config.as_deref())?;
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(m) = loss_mode {
        cfg.train.loss_mode = m;
    }
    Ok(cfg)
}

/// Training and validation sets with the model input dims set from the data.
fn training_data(flags: &TrainFlags, cfg: &mut RunConfig) -> Result<(Dataset, Dataset)> {
    let train_set = load(&flags.data)?;
    let (train_set, valid_set) = match &flags.valid {
        Some(dir) => (train_set, load(dir)?),
        None => {
            let n = (train_set.len() / 10).max(1);
            train_set.split_tail(n, Split::Valid)
        }
    };
    cfg.model.input_dims = train_set.dims();
    Ok((train_set, valid_set))
}

fn inputs(flags: &TrainFlags, m: &mut RunManifest) -> Result<()> {
    m.datasets.push(dataset_ref(&flags.data)?);
    if let Some(v) = &flags.valid {
        m.datasets.push(dataset_ref(v)?);
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let started = now();
    prepare_out(&a.out, a.force)?;
    let cfg = SyntheticConfig {
        n_samples: a.n,
        dims: a.dims,
        len_range: a.len_range,
        seed: a.seed,
        snr: a.snr,
        split: a.split,
        ..SyntheticConfig::default()
    };
    let ds = cfg.generate()?;
    save_dataset(&ds, &a.out)?;
    let config = json!({
        "n_samples": a.n, "dims": a.dims.to_string(), "len_range": a.len_range,
        "seed": a.seed, "snr": a.snr, "split": a.split.as_str(),
    });
    let mut m = RunManifest::new("gen-data", config, vec![a.seed], started);
    m.outputs.push(a.out.join(MANIFEST_FILE));
    m.write(&a.out)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = now();
    let mut cfg = resolve(&a.flags, a.loss_mode)?;
    let (train_set, valid_set) = training_data(&a.flags, &mut cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join(LOG_FILE);
    let mut log = BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let outcome = train(&train_set, &valid_set, &cfg.model, &cfg.train, Some(&mut log))?;
    log.flush()?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let best = outcome.best();
    let meta = json!({
        "best_epoch": outcome.best_epoch,
        "valid_mean_mae": best.valid_mean_mae,
        "train": cfg.train,
    });
    save_checkpoint(&outcome.model, &meta, &ckpt)?;
    let mut m = RunManifest::new("train", serde_json::to_value(&cfg)?, vec![cfg.train.seed], started);
    inputs(&a.flags, &mut m)?;
    m.outputs = vec![ckpt.clone(), log_path];
    m.write(&a.out)?;
    println!(
        "best epoch {} (validation mean MAE {:.4}); checkpoint {}",
        outcome.best_epoch,
        best.valid_mean_mae,
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let started = now();
    let (model, _) = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let test = load(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut m;
    let (table, name) = match a.protocol {
        Protocol::Fixed => {
            m = RunManifest::new("eval", json!({"protocol": "fixed"}), vec![], started);
            (evaluate_fixed(&model, &test)?, "eval_fixed")
        }
        Protocol::Random => {
            let (table, masks) = evaluate_random(&model, &test, &a.mr, a.seed)?;
            m = RunManifest::new(
                "eval",
                json!({"protocol": "random", "mr": a.mr}),
                vec![a.seed],
                started,
            );
            if let Some(path) = &a.masks_out {
                let entries: Vec<_> = a
                    .mr
                    .iter()
                    .zip(&masks)
                    .map(|(mr, assignment)| {
                        json!({
                            "target_mr": mr,
                            "realized_mr": assignment.realized_mr(),
                            "masks": assignment,
                        })
                    })
                    .collect();
                fs::write(path, serde_json::to_string(&entries)?)
                    .with_context(|| format!("writing {}", path.display()))?;
                m.outputs.push(path.clone());
            }
            (table, "eval_random")
        }
    };
    let json_path = a.out.join(format!("{name}.json"));
    let text_path = a.out.join(format!("{name}.txt"));
    fs::write(&json_path, table.to_json()?)?;
    fs::write(&text_path, table.to_text())?;
    m.datasets.push(dataset_ref(&a.data)?);
    m.outputs.extend([json_path, text_path]);
    m.config["checkpoint"] = json!(a.checkpoint);
    m.write(&a.out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let started = now();
    let mut cfg = resolve(&a.flags, None)?;
    let (train_set, valid_set) = training_data(&a.flags, &mut cfg)?;
    let test = load(&a.test)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let table = ablate(&train_set, &valid_set, &test, &cfg.model, &cfg.train, &a.modes, a.repeats)?;
    let json_path = a.out.join("ablation.json");
    let text_path = a.out.join("ablation.txt");
    fs::write(&json_path, serde_json::to_string_pretty(&table)?)?;
    fs::write(&text_path, table.to_text())?;
    let seeds = (0..a.repeats as u64).map(|r| cfg.train.seed + r).collect();
    let mut config = serde_json::to_value(&cfg)?;
    config["modes"] = json!(a.modes);
    config["repeats"] = json!(a.repeats);
    let mut m = RunManifest::new("ablate", config, seeds, started);
    inputs(&a.flags, &mut m)?;
    m.datasets.push(dataset_ref(&a.test)?);
    m.outputs = vec![json_path, text_path];
    m.write(&a.out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(d) = a.dims {
        cfg.model.input_dims = d;
    }
    let report = cost_report(&cfg.model, a.bs)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
