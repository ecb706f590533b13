//! Command-line front end: detect bias neurons, prune them, evaluate the
//! four scoring methods, run the full pipeline from a config file, generate
//! the planted fixture, and run the verification oracles.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crispr::checkpoint::{load_model, save_model};
use crispr::detector::{
    aggregate_instances, detect_averaged, rank_neurons, Dataset, Granularity, InstructionSet,
    MapProvenance,
};
use crispr::eval::{evaluate, render_tables, run_pipeline, sample_detection_set, Method, PipelineConfig};
use crispr::oracles::{build_planted_fixture, planted_instruction_set, run_oracle_suite};
use crispr::pruner::{
    apply_mask, compact, load_mask, save_mask, select_top_n, MaskProvenance, DEFAULT_TOP_N,
};

#[derive(Parser)]
#[command(
    name = "crispr",
    version,
    about = "Bias-neuron detection, structured pruning, and calibrated evaluation \
             for a small encoder-decoder transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Locate bias neurons and write a prune mask.
    Detect(DetectArgs),
    /// Apply a prune mask to a checkpoint.
    Prune(PruneArgs),
    /// Score a dataset with one method and write a report.
    Eval(EvalArgs),
    /// Run detection, pruning, and all evaluations from a config file.
    Pipeline(PipelineArgs),
    /// Run the verification oracles and print a pass/fail summary.
    OracleCheck(OracleCheckArgs),
    /// Generate the planted-bias fixture (model, dataset, instructions).
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct DetectArgs {
    /// Model checkpoint to inspect.
    #[arg(long)]
    model: PathBuf,
    /// Dataset (JSON lines) to sample detection instances from.
    #[arg(long)]
    dataset: PathBuf,
    /// Instruction templates (JSON array).
    #[arg(long)]
    instructions: PathBuf,
    /// Instances sampled per trial.
    #[arg(long)]
    k: usize,
    /// Independent sampled trials averaged into the final scores.
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Base RNG seed; trial t uses seed + t.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neurons kept in the mask.
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    n: usize,
    /// Output path for the prune mask (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional dump of the averaged bias-score map.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    /// Model checkpoint to prune.
    #[arg(long)]
    model: PathBuf,
    /// Prune mask produced by `detect`.
    #[arg(long)]
    mask: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Physically remove masked FFN channels instead of zeroing them.
    #[arg(long)]
    compact: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Dataset (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Instruction templates (JSON array).
    #[arg(long)]
    instructions: PathBuf,
    /// Scoring method: original, cc, dc, or crispr.
    #[arg(long)]
    method: String,
    /// Prune mask; required by (and only accepted for) the crispr method.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Seed for domain-context calibration sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the evaluation report (JSON).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct OracleCheckArgs {
    /// Optional path for the JSON summary in addition to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Seed for the dataset's choice-order shuffling.
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Directory receiving model.crsp, dataset.jsonl, instructions.json,
    /// and notes.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Detect(args) => run_detect(args),
        Command::Prune(args) => run_prune(args),
        Command::Eval(args) => run_eval(args),
        Command::Pipeline(args) => run_pipeline_cmd(args),
        Command::OracleCheck(args) => run_oracle_check(args),
        Command::Fixture(args) => run_fixture(args),
    }
}

fn run_detect(args: DetectArgs) -> Result<()> {
    let model = load_model(&args.model).context("loading model checkpoint")?;
    let dataset = Dataset::load(&args.dataset).context("loading dataset")?;
    let instructions = InstructionSet::load(&args.instructions).context("loading instructions")?;
    if args.trials == 0 {
        bail!("--trials must be at least 1");
    }

    let mut trial_maps = Vec::with_capacity(args.trials);
    for trial in 0..args.trials {
        let sample = sample_detection_set(&dataset, args.k, args.seed + trial as u64)?;
        trial_maps.push(detect_averaged(&model, &sample, &instructions)?);
    }
    let mut map = aggregate_instances(&trial_maps)?;
    let mut sample_ids: Vec<String> = trial_maps
        .iter()
        .flat_map(|m| m.provenance.sample_ids.iter().cloned())
        .collect();
    sample_ids.sort();
    sample_ids.dedup();
    map.granularity = Granularity::Dataset;
    map.provenance = MapProvenance {
        dataset: dataset.name.clone(),
        instruction_ids: (0..instructions.len()).collect(),
        sample_ids: sample_ids.clone(),
        seed: Some(args.seed),
    };

    let ranking = rank_neurons(&map)?;
    let mask = select_top_n(
        &ranking,
        args.n,
        model.base_fingerprint(),
        MaskProvenance {
            dataset: dataset.name.clone(),
            instruction_ids: (0..instructions.len()).collect(),
            sample_ids,
            seed: args.seed,
            trials: args.trials,
        },
    )?;
    save_mask(&mask, &args.out).context("writing prune mask")?;
    if let Some(path) = &args.scores {
        map.save(path).context("writing bias-score map")?;
    }
    println!(
        "wrote mask of {} neurons from {} trials to {}",
        args.n,
        args.trials,
        args.out.display()
    );
    Ok(())
}

fn run_prune(args: PruneArgs) -> Result<()> {
    let model = load_model(&args.model).context("loading model checkpoint")?;
    let mask = load_mask(&args.mask).context("loading prune mask")?;
    let pruned = if args.compact {
        compact(&model, &mask)?
    } else {
        apply_mask(&model, &mask)?
    };
    save_model(&pruned, &args.out).context("writing pruned checkpoint")?;
    println!(
        "pruned {} neurons ({}) -> {}",
        mask.n,
        if args.compact { "compacted" } else { "masked" },
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let method = match args.method.as_str() {
        "original" => Method::Original,
        "cc" => Method::Cc,
        "dc" => Method::Dc,
        "crispr" => Method::Crispr,
        other => bail!("unknown method {other:?}; expected original, cc, dc, or crispr"),
    };
    let model = load_model(&args.model).context("loading model checkpoint")?;
    let dataset = Dataset::load(&args.dataset).context("loading dataset")?;
    let instructions = InstructionSet::load(&args.instructions).context("loading instructions")?;

    let model = match (method, &args.mask) {
        (Method::Crispr, Some(path)) => {
            let mask = load_mask(path).context("loading prune mask")?;
            apply_mask(&model, &mask)?
        }
        (Method::Crispr, None) => bail!("the crispr method requires --mask"),
        (_, Some(_)) => bail!("--mask is only accepted with --method crispr"),
        (_, None) => model,
    };

    let report = evaluate(&model, &dataset, &instructions, method, args.seed)?;
    report.save(&args.report).context("writing report")?;
    println!(
        "{} on {}: mean accuracy {:.2}% over {} instructions -> {}",
        method,
        report.dataset,
        report.mean_accuracy,
        report.per_instruction_accuracy.len(),
        args.report.display()
    );
    Ok(())
}

fn run_pipeline_cmd(args: PipelineArgs) -> Result<()> {
    let config = PipelineConfig::load(&args.config).context("loading pipeline config")?;
    let output = run_pipeline(&config)?;
    print!(
        "{}",
        render_tables(&[&output.original, &output.cc, &output.dc, &output.crispr])
    );
    println!("artifacts written to {}", config.out_dir.display());
    Ok(())
}

fn run_oracle_check(args: OracleCheckArgs) -> Result<()> {
    let summary = run_oracle_suite()?;
    let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    println!("{json}");
    if let Some(path) = &args.out {
        fs::write(path, format!("{json}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if !summary.all_pass {
        std::process::exit(1);
    }
    Ok(())
}

fn run_fixture(args: FixtureArgs) -> Result<()> {
    let fixture = build_planted_fixture(args.seed)?;
    let instructions = planted_instruction_set();
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    save_model(&fixture.model, &args.out_dir.join("model.crsp"))?;
    fixture.dataset.save(&args.out_dir.join("dataset.jsonl"))?;
    instructions.save(&args.out_dir.join("instructions.json"))?;
    fs::write(args.out_dir.join("notes.txt"), format!("{}\n", fixture.notes))
        .context("writing notes")?;
    println!(
        "fixture written to {} (planted neuron: {})",
        args.out_dir.display(),
        fixture.planted
    );
    Ok(())
}
