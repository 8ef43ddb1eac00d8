//! `retrieval-lab`: runs incremental-retrieval experiments from TOML specs
//! and scores precomputed embeddings.
//!
//! Exit status is 0 on success, 1 when a run fails and 2 for invalid
//! specs or arguments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use retrieval_lab::data::{load_feature_csv_with, FeatureSchema};
use retrieval_lab::experiment::{run_experiment, write_outputs, ExperimentOutput, ExperimentSpec, Mode};
use retrieval_lab::retrieval::{evaluate, RetrievalIndex, DEFAULT_KS};
use retrieval_lab::train::Method;
use retrieval_lab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "retrieval-lab",
    version,
    about = "Incremental fine-grained retrieval experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the spec's arms and its optional sweep block.
    Run(Common),
    /// Run the four loss-component ablation arms.
    Ablate(Common),
    /// Run the α × β grid of the combined objective.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        beta: Vec<f64>,
    },
    /// Retrieval metrics over a CSV of precomputed embeddings.
    EvalCsv {
        file: PathBuf,
        #[arg(long, default_value = "label")]
        label_column: String,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        k: Vec<usize>,
        /// Include the precision-recall curve.
        #[arg(long)]
        pr: bool,
    },
}

#[derive(Args)]
struct Common {
    spec: PathBuf,
    /// Arms trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs of every training stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Replaces the spec's arm list; repeatable.
    #[arg(long = "arm")]
    arms: Vec<Method>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::from_path(&self.spec)?;
        if let Some(seed) = self.seed {
            spec.seed = Some(seed);
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
            spec.train.stage_a_epochs = e;
        }
        if !self.arms.is_empty() {
            spec.arms = self.arms.clone();
        }
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
        spec.validate()?;
        Ok(spec)
    }

    fn execute(&self, mode: Mode) -> Result<()> {
        let spec = self.load()?;
        // Refuse a used directory before spending time on training.
        if !self.force && is_non_empty(&spec.output_dir) {
            return Err(Error::Config {
                field: "output_dir".into(),
                message: format!(
                    "{} already exists and is not empty; pass --force to overwrite",
                    spec.output_dir.display()
                ),
            });
        }
        let out = run_experiment(&spec, &mode, self.jobs)?;
        write_outputs(&out, &spec.output_dir, self.force)?;
        print_overview(&out);
        println!("results written to {}", spec.output_dir.display());
        Ok(())
    }
}

fn is_non_empty(dir: &std::path::Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn print_overview(out: &ExperimentOutput) {
    let r1 = |r: &retrieval_lab::train::MetricsReport, g: usize| {
        r.group(g)
            .and_then(|m| m.recall_at(1))
            .map(|v| format!("{:.3}", v))
            .unwrap_or_else(|| "-".into())
    };
    println!("{:<20} {:<14} {:>8} {:>8}", "arm", "cell", "old R@1", "new R@1");
    println!("{:<20} {:<14} {:>8} {:>8}", "initial", "s0", r1(&out.initial, 0), "-");
    for c in &out.cells {
        println!(
            "{:<20} {:<14} {:>8} {:>8}",
            c.arm,
            c.cell,
            r1(&c.report, 0),
            r1(&c.report, c.report.step)
        );
    }
}

fn eval_csv(file: &Path, label_column: &str, ks: &[usize], pr: bool) -> Result<()> {
    let schema = FeatureSchema {
        label_column: label_column.to_string(),
        ..FeatureSchema::default()
    };
    let data = load_feature_csv_with(file, &schema)?;
    let index = RetrievalIndex::new(&data.features, data.dim, &data.labels)?;
    let m = evaluate(&index, ks)?;
    let recall: serde_json::Map<String, serde_json::Value> =
        m.recall.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let mut value = json!({ "items": index.len(), "recall": recall, "map": m.map });
    if pr {
        value["pr"] = json!(m.pr);
    }
    println!("{}", serde_json::to_string_pretty(&value).expect("metrics serialize"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => c.execute(Mode::Run),
        Command::Ablate(c) => c.execute(Mode::Ablate),
        Command::Sweep { common, alpha, beta } => common.execute(Mode::Sweep {
            alpha: alpha.clone(),
            beta: beta.clone(),
        }),
        Command::EvalCsv {
            file,
            label_column,
            k,
            pr,
        } => eval_csv(file, label_column, k, *pr),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
