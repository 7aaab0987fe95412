use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use indexmap::IndexMap;
use log::info;
use serde_json::json;

use taxovis::ablate::{self, Suite};
use taxovis::checkpoint::Checkpoint;
use taxovis::config::RunConfig;
use taxovis::corpus::{self, Split};
use taxovis::error::{Error, Result};
use taxovis::report;
use taxovis::synth::{stock_config, SynthConfig};
use taxovis::taxonomy::DatasetId;
use taxovis::train::{evaluate_checkpoint, evaluate_model, build_model, train_with};

#[derive(Parser)]
#[command(name = "taxovis", version, about = "Taxonomy-aware multi-dataset video instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        /// Corpus spec (JSON); the stock three-dataset corpus when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the stock corpus.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of training clips per dataset.
        #[arg(long)]
        train_clips: Option<usize>,
        /// Override the number of validation clips per dataset.
        #[arg(long)]
        val_clips: Option<usize>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory, overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on validation splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Allow datasets the checkpoint was not trained on.
        #[arg(long)]
        zero_shot: bool,
        /// Datasets to evaluate; all trained ones (or all, with --zero-shot) by default.
        #[arg(long)]
        dataset: Vec<String>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation suite: components, ratio, nt-size, aggregation or zero-shot.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Base config; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory; a stock corpus is generated under <out>/corpus when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Comma-separated seeds; rows report per-seed results and their mean.
        /// Defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write report.json and SVG plots for a run or ablation directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn synth(spec: Option<PathBuf>, out: &Path, seed: u64, train: Option<usize>, val: Option<usize>) -> Result<()> {
    let mut cfg: SynthConfig = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => stock_config(seed),
    };
    for d in &mut cfg.datasets {
        if let Some(n) = train {
            d.train_clips = n;
        }
        if let Some(n) = val {
            d.val_clips = n;
        }
    }
    let c = corpus::generate(&cfg)?;
    corpus::write(&c, out)?;
    println!("{}", c.space.overlap_report().map(|r| r.to_string()).unwrap_or_default());
    for (id, ds) in &c.datasets {
        println!("{id}: {} train, {} val clips", ds.train.len(), ds.val.len());
    }
    Ok(())
}

fn train(config: &Path, out: &Path, data: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(d) = data {
        cfg.data.corpus = d;
    }
    let corpus = corpus::read(&cfg.data.corpus)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut lines = String::new();
    let every = (cfg.optim.iterations / 20).max(1);
    let outcome = train_with(&cfg, &corpus, |l| {
        lines.push_str(&serde_json::to_string(l).expect("log serializes"));
        lines.push('\n');
        if (l.iteration + 1) % every == 0 {
            info!("iteration {} loss {:.4}", l.iteration + 1, l.loss.total);
        }
    })?;
    fs::write(out.join("metrics.jsonl"), lines)?;
    write_json(&out.join("evals.json"), &outcome.evals)?;
    let ck = &outcome.checkpoint;
    ck.save(&out.join("checkpoint.bin"))?;
    let model = build_model(&cfg, &corpus.space)?;
    let mut results = IndexMap::new();
    for d in cfg.train_datasets() {
        let (r, sel) = evaluate_model(&model, &ck.params, &corpus, &d, Split::Val)?;
        results.insert(d.to_string(), json!({"metrics": r, "selection": sel}));
    }
    let summary = json!({
        "iterations": ck.iteration,
        "checkpoint_hash": ck.hash()?,
        "config_hash": ck.config_hash(),
        "taxonomy_hash": ck.space.hash(),
        "val": results,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(Error::UnknownMode(other.to_string())),
    }
}

fn eval(ckpt: &Path, data: &Path, zero_shot: bool, datasets: Vec<String>, split: &str, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let corpus = corpus::read(data)?;
    let split = parse_split(split)?;
    let ids: Vec<DatasetId> = if datasets.is_empty() {
        if zero_shot {
            corpus.space.dataset_ids.clone()
        } else {
            ck.config.train_datasets()
        }
    } else {
        datasets.into_iter().map(DatasetId::new).collect()
    };
    let mut results = IndexMap::new();
    for d in &ids {
        let (r, sel) = evaluate_checkpoint(&ck, &corpus, d, split, zero_shot)?;
        let names: IndexMap<&str, f64> = r
            .per_category
            .iter()
            .map(|(&c, &ap)| (corpus.space.categories[c].name.as_str(), ap))
            .collect();
        results.insert(
            d.to_string(),
            json!({
                "AP": r.ap, "AP50": r.ap50, "AP75": r.ap75, "AR1": r.ar1, "AR10": r.ar10,
                "per_category": names,
                "selection": sel,
                "zero_shot": zero_shot && !ck.config.train_datasets().contains(d),
            }),
        );
    }
    let doc = json!({ "checkpoint_hash": ck.hash()?, "results": results });
    let text = serde_json::to_string_pretty(&doc)?;
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn ablate_cmd(
    suite: &str,
    out: &Path,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    iterations: Option<usize>,
    seeds: Vec<u64>,
) -> Result<()> {
    let suite: Suite = suite.parse()?;
    let mut base = match config {
        Some(p) => RunConfig::load(&p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c
        }
    };
    if let Some(n) = iterations {
        base.optim.iterations = n;
    }
    fs::create_dir_all(out)?;
    let corpus = match data {
        Some(d) => corpus::read(&d)?,
        None => {
            let dir = out.join("corpus");
            if !dir.join("taxonomy.json").exists() {
                corpus::write(&corpus::generate(&stock_config(base.seed))?, &dir)?;
            }
            corpus::read(&dir)?
        }
    };
    let every = (base.optim.iterations / 10).max(1);
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
    let report = ablate::run(suite, &base, &seeds, &corpus, |row, l| {
        if (l.iteration + 1) % every == 0 {
            info!("[{row}] iteration {} loss {:.4}", l.iteration + 1, l.loss.total);
        }
    })?;
    write_json(&out.join("ablation.json"), &report)?;
    let files = report::report(out)?;
    println!("{}", fs::read_to_string(files.json)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, seed, train_clips, val_clips } => synth(spec, &out, seed, train_clips, val_clips),
        Command::Train { config, out, data } => train(&config, &out, data),
        Command::Eval { ckpt, data, zero_shot, dataset, split, out } => eval(&ckpt, &data, zero_shot, dataset, &split, out),
        Command::Ablate { suite, out, config, data, iterations, seeds } => {
            ablate_cmd(&suite, &out, config, data, iterations, seeds)
        }
        Command::Report { run } => {
            let files = report::report(&run)?;
            println!("{}", files.json.display());
            for p in files.plots {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
