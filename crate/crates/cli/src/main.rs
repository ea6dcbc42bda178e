use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use geoloc::config::RunConfig;
use geoloc::error::Error;
use geoloc::supervision::{parse_labels, write_labels};
use geoloc::synth::{generate_world, label_overlaps, Dataset};
use geoloc::trainer::{evaluate, load_dataset, metrics_csv, run_pipeline, TrainData};
use geoloc::{checkpoint::Checkpoint, eval::spearman, gradcheck};
use serde_json::json;
use sha2::{Digest, Sha256};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "geoloc", version, about = "Self-supervised region similarity training for image geo-localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic street and write a dataset directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all generations and write checkpoints, labels and metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Report test recall@{1,5,10} of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print a soft-label file, optionally joined with ground-truth overlaps.
    Labels {
        #[arg(long)]
        file: PathBuf,
        /// Join every entry with its true region overlap (needs the dataset
        /// the labels were computed on).
        #[arg(long)]
        truth: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override a config key, e.g. `--set train.generations=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    no_regions: bool,
    #[arg(long)]
    no_quarters: bool,
    #[arg(long)]
    no_neg_regions: bool,
    #[arg(long)]
    no_soft: bool,
    #[arg(long)]
    const_tau: bool,
    #[arg(long)]
    naive_topk: bool,
}

impl AblationArgs {
    fn apply(&self, config: &mut RunConfig) -> geoloc::Result<()> {
        let flags = [
            ("no_regions", self.no_regions),
            ("no_quarters", self.no_quarters),
            ("no_neg_regions", self.no_neg_regions),
            ("no_soft", self.no_soft),
            ("const_tau", self.const_tau),
            ("naive_topk", self.naive_topk),
        ];
        for (name, on) in flags {
            if on {
                config.set(&format!("ablation.{name}"), "true")?;
            }
        }
        config.validate()
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::Config(_) | Error::Validation(_) | Error::Parameter(_)) => EXIT_CONFIG,
            CliError::Core(Error::Io(_) | Error::Format(_)) => EXIT_IO,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut config = if args.config == "default" {
        RunConfig::default()
    } else {
        RunConfig::from_toml(&fs::read_to_string(&args.config)?)?
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8], hashes: &mut serde_json::Map<String, serde_json::Value>) -> CliResult<()> {
    fs::write(dir.join(name), bytes)?;
    hashes.insert(name.to_string(), json!(hex::encode(Sha256::digest(bytes))));
    Ok(())
}

fn provenance(command: &str, config: &RunConfig, artifacts: serde_json::Map<String, serde_json::Value>) -> String {
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config.entries(),
        "config_hash": config.hash(),
        "seeds": { "train": config.seed, "world": config.world.seed },
        "artifacts": artifacts,
    });
    let mut text = serde_json::to_string_pretty(&record).expect("json values serialize");
    text.push('\n');
    text
}

fn gen_data(args: &ConfigArgs, out: &Path) -> CliResult<()> {
    let config = load_config(args)?;
    let dataset = generate_world(&config.world)?;
    dataset.save(out)?;
    let stats = dataset.weak_label_stats();
    let mut artifacts = serde_json::Map::new();
    for name in ["manifest.csv", "truth.csv", "world.toml"] {
        artifacts.insert(name.into(), json!(sha256_file(&out.join(name))?));
    }
    fs::write(out.join("run.json"), provenance("gen-data", &config, artifacts))?;
    println!(
        "wrote {} images to {} (zero-overlap weak positives {:.3})",
        dataset.images.len(),
        out.display(),
        stats.zero_overlap_fraction()
    );
    Ok(())
}

fn train(args: &ConfigArgs, ablation: &AblationArgs, out: &Path) -> CliResult<()> {
    let mut config = load_config(args)?;
    ablation.apply(&mut config)?;
    let dataset = load_dataset(&config)?;
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let report = run_pipeline(&config, &dataset)?;
    let mut artifacts = serde_json::Map::new();
    write_artifact(out, "config.toml", config.to_text().as_bytes(), &mut artifacts)?;
    for g in &report.generations {
        let n = g.checkpoint.generation;
        write_artifact(out, &format!("gen{n}.ckpt"), &g.checkpoint.to_bytes()?, &mut artifacts)?;
        if !g.labels.is_empty() {
            write_artifact(out, &format!("labels_gen{n}.txt"), write_labels(&g.labels.records()).as_bytes(), &mut artifacts)?;
        }
    }
    write_artifact(out, "metrics.csv", metrics_csv(&report.metrics).as_bytes(), &mut artifacts)?;
    fs::write(out.join("run.json"), provenance("train", &config, artifacts))?;
    for row in &report.metrics {
        println!(
            "generation {} recall@1 {:.3} recall@5 {:.3} recall@10 {:.3}",
            row.generation, row.recall[0], row.recall[1], row.recall[2]
        );
    }
    println!("wrote {} in {:.1}s", out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn eval(args: &ConfigArgs, ablation: &AblationArgs, path: &Path) -> CliResult<()> {
    let checkpoint = Checkpoint::load(path)?;
    let mut config = load_config(args)?;
    ablation.apply(&mut config)?;
    if checkpoint.config_hash != config.hash() {
        eprintln!("warning: checkpoint was trained under config {}", checkpoint.config_hash);
    }
    let dataset = load_dataset(&config)?;
    let data = TrainData::prepare(&dataset, &config)?;
    let r = evaluate(&data, &checkpoint.model, &config)?;
    println!(
        "generation {} recall@1 {:.3} recall@5 {:.3} recall@10 {:.3}",
        checkpoint.generation, r[0], r[1], r[2]
    );
    Ok(())
}

fn labels(file: &Path, truth: bool, args: &ConfigArgs) -> CliResult<()> {
    let records = parse_labels(&fs::read_to_string(file)?)?;
    if !truth {
        print!("{}", write_labels(&records));
        return Ok(());
    }
    let config = load_config(args)?;
    let dataset: Dataset = load_dataset(&config)?;
    let first = &dataset.images.first().ok_or_else(|| Error::Validation("empty dataset".into()))?.image;
    let dims = config.encoder.output_dims(first.height, first.width);
    let pairs = label_overlaps(&dataset, &records, dims)?;
    println!("query,gallery,region,weight,overlap");
    let mut it = pairs.iter();
    for r in &records {
        for e in &r.entries {
            let (w, o) = it.next().expect("one pair per entry");
            println!("{},{},{},{w:.6},{o:.3}", r.query, e.gallery, e.region);
        }
    }
    let (w, o): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    println!("spearman {:.3}", spearman(&w, &o)?);
    Ok(())
}

fn gradcheck_cmd(seed: u64) -> CliResult<()> {
    let start = Instant::now();
    let results = gradcheck::run_suite(seed)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{:<20} {:.3e} {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} ({:.2}s)", start.elapsed().as_secs_f64());
    if worst > gradcheck::TOLERANCE {
        return Err(Error::Evaluation(format!("gradient check failed: {worst:.3e}")).into());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, ablation, out } => train(&config, &ablation, &out),
        Command::Eval { config, ablation, checkpoint } => eval(&config, &ablation, &checkpoint),
        Command::Labels { file, truth, config } => labels(&file, truth, &config),
        Command::Gradcheck { seed } => gradcheck_cmd(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
