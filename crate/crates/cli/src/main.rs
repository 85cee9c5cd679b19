use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use scribble_transfer::config::ExperimentConfig;
use scribble_transfer::data::synth::{generate_synthetic_dataset, Domain, SynthSpec, Task};
use scribble_transfer::data::{scribble_dataset, DatasetManifest, ScribbleParams};
use scribble_transfer::evaluation::TableFormat;
use scribble_transfer::models::Checkpoint;
use scribble_transfer::pipeline::{
    build_report, collect_runs, evaluate_checkpoint, finetune_to_disk, pretrain_to_disk, reproduce, write_report,
    DeskPlan,
};
use scribble_transfer::Result;

#[derive(Parser)]
#[command(
    name = "sxfer",
    version,
    about = "Scribble-supervised pre-training and cross-domain transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; runs land in `<out>/<config-hash>/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Runs are always single-threaded and deterministic; `false` is accepted
    /// for interface compatibility.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Seg,
    Cls,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
    Json,
}

impl From<FormatArg> for TableFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => TableFormat::Csv,
            FormatArg::Markdown => TableFormat::Markdown,
            FormatArg::Json => TableFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, masks, manifest.jsonl).
    SynthData {
        #[arg(long, value_enum)]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "seg")]
        task: TaskArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long)]
        num_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive scribble masks from a dense-mask manifest.
    MakeScribbles {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        stroke_width: usize,
        #[arg(long, default_value_t = 0.05)]
        coverage: f64,
        #[arg(long, default_value_t = 16)]
        min_region_area: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on the source domain.
    Pretrain(RunArgs),
    /// Run the fine-tuning seed battery on the target domain.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// `none` for random initialization, or a checkpoint path.
        #[arg(long, default_value = "none")]
        init: String,
    },
    /// Accuracy of a checkpoint on the dataset of a config.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        init: PathBuf,
    },
    /// Aggregate results into a blocked results table.
    Report {
        /// Result directories or `runs.json` files.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the whole desk-scale reproduction under one directory.
    Reproduce {
        #[arg(long, default_value = "repro")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Seconds-scale plan that exercises every stage.
        #[arg(long)]
        smoke: bool,
    },
}

fn load_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        config.seed = seed;
    }
    if !run.deterministic {
        info!("non-deterministic mode requested; runs are single-threaded and deterministic regardless");
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            domain,
            task,
            n,
            image_size,
            num_classes,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                domain: match domain {
                    DomainArg::A => Domain::A,
                    DomainArg::B => Domain::B,
                },
                task: match task {
                    TaskArg::Seg => Task::Seg,
                    TaskArg::Cls => Task::Cls,
                },
                n,
                image_size,
                num_classes,
                seed,
            };
            let m = generate_synthetic_dataset(&spec, &out)?;
            println!("{}", out.join("manifest.jsonl").display());
            info!("wrote {} records", m.len());
        }
        Command::MakeScribbles {
            manifest,
            stroke_width,
            coverage,
            min_region_area,
            seed,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let params = ScribbleParams {
                stroke_width,
                coverage_budget: coverage,
                min_region_area,
                seed,
            };
            scribble_dataset(&m, &params, &out)?;
            println!("{}", out.join("manifest.jsonl").display());
        }
        Command::Pretrain(args) => {
            let config = load_config(&args)?;
            let art = pretrain_to_disk(&config, &args.out)?;
            println!("{}", art.checkpoint_path.display());
        }
        Command::Finetune { run, init } => {
            let config = load_config(&run)?;
            let init = (init != "none").then(|| PathBuf::from(init));
            let art = finetune_to_disk(&config, init.as_deref(), &run.out)?;
            for r in &art.runs.runs {
                println!("seed {:>20}  accuracy {:.4}", r.seed, r.final_test_accuracy);
            }
            println!("{}", art.dir.results().join("runs.json").display());
        }
        Command::Evaluate { run, init } => {
            let config = load_config(&run)?;
            let ckpt = Checkpoint::load(&init)?;
            println!("{:.6}", evaluate_checkpoint(&config, &ckpt)?);
        }
        Command::Report { results, format, out } => {
            let files = collect_runs(&results)?;
            let report = build_report(&files, format.into())?;
            write_report(&report, format.into(), &out)?;
            print!("{}", report.table);
        }
        Command::Reproduce { out, seed, smoke } => {
            let mut plan = if smoke { DeskPlan::smoke() } else { DeskPlan::default() };
            if let Some(s) = seed {
                plan.seed = s;
            }
            let r = reproduce(&out, &plan)?;
            print!("{}", r.report.table);
            println!("{}", r.report_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
