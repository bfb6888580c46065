//! `wvad`: prepare datasets, train, score, evaluate and benchmark.
//!
//! Exit codes: 0 on success, 2 for invalid input or usage, 3 when training or
//! scoring fails numerically.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use wvad::checkpoint::Checkpoint;
use wvad::data::{load_csv, CsvOptions, LabeledDataset};
use wvad::metrics::{auprc, auroc};
use wvad::synthetic::{make_synthetic, SyntheticSpec};
use wvad::trainer::{bench, scores_csv, train, TrainConfig};

#[derive(Parser)]
#[command(name = "wvad", version)]
#[command(about = "Weakly-supervised anomaly detection with a deep variational mixture model")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Standardize a CSV and draw the labeled anomalies
    Prepare(PrepareArgs),
    /// Train one model on a prepared dataset
    Train(TrainArgs),
    /// Score every row of a prepared dataset with a checkpoint
    Score(ScoreArgs),
    /// AUROC and AUPRC of a scores file
    Eval(EvalArgs),
    /// Train and evaluate over several seeds
    Bench(BenchArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw CSV with a 0/1 label column
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Synthetic dataset spec (key = value file) instead of a CSV
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Zero-based label column; defaults to the last one
    #[arg(long)]
    label_col: Option<usize>,
    /// The CSV starts with a header row
    #[arg(long)]
    header: bool,
    /// Fraction of true anomalies that get a weak label
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; statistics go to `<out>.meta`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (key = value); defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; the per-epoch record goes to `<out>.record.csv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset
    #[arg(long)]
    data: PathBuf,
    /// Scores CSV: row,score,weak_label,label
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Scores CSV as written by `score`
    #[arg(long)]
    scores: PathBuf,
    /// Include weak-labeled rows; by default only unlabeled rows count
    #[arg(long)]
    all_rows: bool,
    /// Print one JSON object instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Prepared dataset; each seed draws its own labeled anomalies
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds, counted up from --first-seed
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Label ratio; overrides the configuration
    #[arg(long)]
    ratio: Option<f64>,
    /// Directory for report.csv and per-seed scores
    #[arg(long)]
    out: PathBuf,
    /// Print one JSON object per line instead of a table
    #[arg(long)]
    jsonl: bool,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn dataset_name(data: &LabeledDataset, path: &Path) -> String {
    let source = Path::new(&data.provenance.source);
    source
        .file_stem()
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    })
}

fn prepare(args: PrepareArgs) -> Result<()> {
    let data = match (&args.input, &args.synthetic) {
        (Some(input), _) => {
            let opts = CsvOptions {
                label_column: args.label_col,
                has_header: args.header,
            };
            let raw = load_csv(input, opts)?;
            LabeledDataset::prepare(&raw, args.ratio, args.seed, input.display().to_string())?
        }
        (None, Some(spec)) => {
            let mut data = make_synthetic(&SyntheticSpec::read(spec)?, args.ratio)?;
            data = data.resplit(args.ratio, args.seed)?;
            data.provenance.source = spec.display().to_string();
            data
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    data.save(&args.out)?;
    println!(
        "{} rows, {} dims, {} labeled anomalies",
        data.rows(),
        data.dim(),
        data.labeled_anomalies().len()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let data = LabeledDataset::load(&args.data)?;
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let trained = train(&data, &config)?;
    let ck = Checkpoint::new(&trained.model, &data.standardization, config.to_kv_string());
    ck.save(&args.out)?;
    write(&with_suffix(&args.out, ".record.csv"), &trained.record.to_csv())?;
    println!(
        "trained {} epochs in {:.1}s, checkpoint {}",
        trained.record.epochs.len(),
        trained.record.wall_clock().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn score_cmd(args: ScoreArgs) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    let data = LabeledDataset::load(&args.data)?;
    let scored = model.score(data.features.view())?;
    write(&args.out, &scores_csv(scored.scores.as_slice().expect("contiguous"), &data))?;
    println!("{} rows scored", data.rows());
    Ok(())
}

fn read_scores(path: &Path, all_rows: bool) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let field = |j: usize| -> Result<f64> {
            let cell = rec.get(j).unwrap_or("");
            cell.parse()
                .map_err(|_| wvad::Error::Input(format!("{}: row {}: bad value `{cell}`", path.display(), i + 1)).into())
        };
        if !all_rows && field(2)? != 0.0 {
            continue;
        }
        scores.push(field(1)?);
        labels.push(field(3)? as u8);
    }
    Ok((scores, labels))
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let (scores, labels) = read_scores(&args.scores, args.all_rows)?;
    let (roc, pr) = (auroc(&scores, &labels)?, auprc(&scores, &labels)?);
    if args.json {
        println!(
            "{}",
            serde_json::json!({ "rows": scores.len(), "auroc": roc, "auprc": pr })
        );
    } else {
        println!("rows  {}\nAUROC {roc:.3}\nAUPRC {pr:.3}", scores.len());
    }
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let data = LabeledDataset::load(&args.data)?;
    let mut config = load_config(args.config.as_deref())?;
    if let Some(r) = args.ratio {
        config.label_ratio = r;
        config.validate()?;
    }
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let name = dataset_name(&data, &args.data);
    let out = bench(&data, &config, &seeds, &name)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("report.csv"), &out.report.to_csv())?;
    for ((run, split), seed) in out.runs.iter().zip(&out.splits).zip(&seeds) {
        let scores = run.scored.scores.as_slice().expect("contiguous");
        write(&args.out.join(format!("scores_seed{seed}.csv")), &scores_csv(scores, split))?;
        write(&args.out.join(format!("record_seed{seed}.csv")), &run.record.to_csv())?;
    }
    let r = &out.report;
    if args.jsonl {
        for m in &r.runs {
            println!(
                "{}",
                serde_json::json!({
                    "kind": "run", "dataset": m.dataset, "label_ratio": m.label_ratio,
                    "config": m.config_hash, "seed": m.seed, "auroc": m.auroc, "auprc": m.auprc,
                })
            );
        }
        println!(
            "{}",
            serde_json::json!({
                "kind": "summary", "dataset": r.dataset, "label_ratio": r.label_ratio,
                "config": r.config_hash, "seeds": r.runs.len(),
                "auroc_mean": r.auroc.mean, "auroc_std": r.auroc.std,
                "auprc_mean": r.auprc.mean, "auprc_std": r.auprc.std,
            })
        );
    } else {
        println!("{r}");
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<wvad::Error>() {
            return if e.is_validation() { 2 } else { 3 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
