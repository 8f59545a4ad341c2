use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dcnet_harness::attack::attack_eval;
use dcnet_harness::check::gradcheck;
use dcnet_harness::export::export_long;
use dcnet_harness::train::{
    adversarial_train, evaluate, load_datasets, load_trained, train, RunSummary,
};
use dcnet_harness::ExperimentConfig;

/// Decoupled network experiments on MNIST and CIFAR-10.
#[derive(Parser)]
#[command(name = "dcnet", version)]
struct Cli {
    /// Worker threads for GEMM and batch loops.
    #[arg(long, global = true, env = "DCNET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, a checkpoint and a summary.
    Train(RunArgs),
    /// Evaluate a checkpoint on the full test set.
    Eval(RunArgs),
    /// Finite-difference check of the configured operator and a small network.
    Gradcheck(RunArgs),
    /// Clean, FGSM and BIM accuracy of a checkpoint.
    Attack(RunArgs),
    /// Train on batches mixed with FGSM examples.
    AdvTrain(RunArgs),
    /// Merge the metrics of several runs into one long-format CSV.
    ExportCsv {
        /// Run directories, each holding a metrics.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initial weights for training; the evaluated checkpoint for eval and
    /// attack (default `<output_dir>/final.ckpt`).
    #[arg(long)]
    init: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.run.seed = seed;
        }
        if let Some(out) = &self.out {
            config.run.output_dir = out.clone();
        }
        Ok(config)
    }

    fn training_config(&self) -> Result<ExperimentConfig> {
        let mut config = self.config()?;
        if let Some(init) = &self.init {
            config.run.init_checkpoint = Some(init.clone());
        }
        Ok(config)
    }

    fn checkpoint(&self, config: &ExperimentConfig) -> PathBuf {
        self.init
            .clone()
            .unwrap_or_else(|| config.run.output_dir.join("final.ckpt"))
    }
}

fn print_summary(s: &RunSummary) {
    println!("steps         {}", s.steps);
    println!("test loss     {:.6}", s.test_loss);
    println!(
        "test accuracy {:.4} ({} examples)",
        s.test_acc, s.test_examples
    );
    for l in &s.layers {
        match l.mean_rho {
            Some(rho) => println!(
                "layer {:>2} {:<14} mean |w| {:.6}  mean rho {:.6}",
                l.index, l.kind, l.mean_w_norm, rho
            ),
            None => println!(
                "layer {:>2} {:<14} mean |w| {:.6}",
                l.index, l.kind, l.mean_w_norm
            ),
        }
    }
    println!("outputs in    {}", s.output_dir.display());
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    match cli.command {
        Command::Train(args) => {
            let config = args.training_config()?;
            let data = load_datasets(&config)?;
            print_summary(&train(&config, &data)?.summary);
        }
        Command::AdvTrain(args) => {
            let config = args.training_config()?;
            let data = load_datasets(&config)?;
            print_summary(&adversarial_train(&config, &data)?.summary);
        }
        Command::Eval(args) => {
            let config = args.config()?;
            let ckpt = args.checkpoint(&config);
            let data = load_datasets(&config)?;
            let mut net = load_trained(&config, &ckpt)
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let (loss, acc) = evaluate(
                &mut net,
                &data.test,
                data.test.len(),
                config.train.eval_batch_size,
            )?;
            println!("test loss     {loss:.6}");
            println!("test accuracy {acc:.4} ({} examples)", data.test.len());
        }
        Command::Attack(args) => {
            let config = args.config()?;
            let ckpt = args.checkpoint(&config);
            let data = load_datasets(&config)?;
            let mut net = load_trained(&config, &ckpt)
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let report = attack_eval(
                &mut net,
                &data.test,
                &config.attack,
                config.train.eval_batch_size,
            )?;
            let csv = report.to_csv();
            write_file(&config.run.output_dir.join("attack.csv"), &csv)?;
            print!("{csv}");
            if !report.within_budget {
                bail!("an adversarial example left the epsilon ball");
            }
        }
        Command::Gradcheck(args) => {
            let config = args.config()?;
            let report = gradcheck(&config, config.run.seed)?;
            if let Some(e) = report.point_error {
                println!("{:<24} {e:.3e}", "operator points");
            }
            for g in &report.groups {
                println!(
                    "{:<24} {:.3e}  ({} checked, {} excluded)",
                    g.name, g.rel_error, g.checked, g.excluded
                );
            }
            let passed = report.passed();
            println!(
                "{} (tolerance {:e})",
                if passed { "PASS" } else { "FAIL" },
                report.tolerance
            );
            if !passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportCsv { runs, out } => {
            let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            match out {
                Some(path) => {
                    let file = File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?;
                    export_long(&dirs, BufWriter::new(file))?;
                }
                None => {
                    let mut stdout = io::stdout().lock();
                    export_long(&dirs, &mut stdout)?;
                    stdout.flush()?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
