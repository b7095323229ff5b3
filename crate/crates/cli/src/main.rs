use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gst_core::llm::LlmCallLedger;
use gst_core::pipeline::{Pipeline, PipelineConfig, PipelineError, Space, REPORT_FILE, GENERIC_REPORT_FILE};
use tracing_subscriber::filter::LevelFilter;

#[derive(Parser)]
#[command(name = "gst", version, about = "Adapt generic text embeddings to an instruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Embed corpus texts missing from the store.
    Embed(Common),
    /// Build the label taxonomy and annotate the sample.
    BuildTaxonomy(Common),
    /// Train the transformation on the annotations.
    Train(Common),
    /// Apply the trained transformation to the whole store.
    Transform {
        #[command(flatten)]
        common: Common,
        /// Print pairwise cosine distances among these ids before and after.
        #[arg(long, num_args = 2.., value_name = "ID")]
        report_distances: Option<Vec<String>>,
    },
    /// Score the configured task and write a report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SpaceArg::Transformed)]
        space: SpaceArg,
    },
    /// Run every stage, reusing artifacts that are still current.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Cluster raw-text embeddings instead of summaries.
    #[arg(long)]
    no_summarize: bool,
    /// Ask the LLM for the label list directly instead of clustering.
    #[arg(long)]
    directed_labels: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    d_out: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Generic,
    Transformed,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if self.no_summarize {
            cfg.taxonomy.summarize = false;
        }
        if self.directed_labels {
            cfg.taxonomy.directed_labels = true;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k {
            cfg.taxonomy.k = k;
        }
        if let Some(n) = self.sample_size {
            cfg.taxonomy.sample_size = n;
        }
        if let Some(m) = self.margin {
            cfg.train.margin = m;
        }
        if let Some(d) = self.d_out {
            cfg.train.d_out = Some(d);
        }
        Ok(cfg)
    }
}

fn print_ledger(label: &str, l: &LlmCallLedger) {
    println!(
        "{label}: summarize {} generate_label {} classify {} retry {} (total {})",
        l.summarize,
        l.generate_label,
        l.classify,
        l.retry,
        l.total()
    );
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Embed(c) => {
            let s = Pipeline::new(c.load()?)?.embed()?;
            println!("cached {} embedded {}", s.cached, s.embedded);
        }
        Command::BuildTaxonomy(c) => {
            let s = Pipeline::new(c.load()?)?.build_taxonomy()?;
            println!("provenance {:?}, {} categories:", s.provenance, s.categories.len());
            for (i, label) in s.categories.iter().enumerate() {
                println!("  {i:>3}  {label}");
            }
            println!("annotated {} dropped {}", s.annotated, s.dropped);
            print_ledger("llm calls", &s.ledger);
        }
        Command::Train(c) => {
            let s = Pipeline::new(c.load()?)?.train()?;
            let m = &s.metadata;
            println!("{:?} {} -> {}", s.kind, s.d_in, s.d_out);
            println!(
                "epochs {} (best {}), train/val samples {}/{}",
                m.epochs_run, m.best_epoch, m.train_samples, m.val_samples
            );
            println!(
                "val loss {} -> {}, final train loss {}",
                opt(m.initial_val_loss),
                opt(m.final_val_loss),
                opt(m.final_train_loss)
            );
        }
        Command::Transform { common, report_distances } => {
            let mut p = Pipeline::new(common.load()?)?;
            let before = p.ledger();
            let s = p.transform()?;
            println!("transformed {} vectors to dimension {}", s.count, s.d_out);
            print_ledger("llm calls", &p.ledger().since(&before));
            if let Some(ids) = report_distances {
                println!("{:<20} {:<20} {:>10} {:>12}", "a", "b", "generic", "transformed");
                for r in p.report_distances(&ids)? {
                    println!("{:<20} {:<20} {:>10.4} {:>12.4}", r.a, r.b, r.generic, r.transformed);
                }
            }
        }
        Command::Evaluate { common, space } => {
            let mut p = Pipeline::new(common.load()?)?;
            let (space, file) = match space {
                SpaceArg::Generic => (Space::Generic, GENERIC_REPORT_FILE),
                SpaceArg::Transformed => (Space::Transformed, REPORT_FILE),
            };
            let r = p.evaluate(space)?;
            for (aspect, score) in &r.per_aspect_scores {
                println!("{} {aspect}: {score:.4}", r.task);
            }
            println!("aggregate {:.4} -> {}", r.aggregate, p.artifact(file).display());
        }
        Command::Pipeline(c) => {
            let mut p = Pipeline::new(c.load()?)?;
            let s = p.run()?;
            for (stage, outcome) in &s.stages {
                println!("{stage:<15} {outcome:?}");
            }
            println!("cached {} embedded {}", s.embed.cached, s.embed.embedded);
            print_ledger("llm calls", &s.ledger);
            if let Some(r) = &s.report {
                for (aspect, score) in &r.per_aspect_scores {
                    println!("{} {aspect}: {score:.4}", r.task);
                }
                println!("aggregate {:.4}", r.aggregate);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        LevelFilter::ERROR
    } else {
        match cli.verbose {
            0 => LevelFilter::INFO,
            1 => LevelFilter::DEBUG,
            _ => LevelFilter::TRACE,
        }
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
