use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use openset_har::pipeline::{self, ExportTarget, HierarchySource, RunConfig};
use openset_har::{Error, ExportFormat, FeatureKind};

#[derive(Parser)]
#[command(
    name = "openset-har",
    version,
    about = "Hierarchical open-set activity recognition from windowed sensor data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load recordings, resample, window, and plan subject-wise folds
    Prepare(Common),
    /// Extract per-window feature vectors
    Features(Common),
    /// Build or import the class hierarchy of every fold
    Hierarchy(Common),
    /// Train one head per fold and repeat and fit entropy thresholds
    Train(Common),
    /// Closed-set macro F1 on the test subjects
    EvalId(Common),
    /// OOD detection with mean path entropy and a kNN baseline
    EvalOod(Common),
    /// Threshold sweep of where unknown classes land in the tree
    Localize(Common),
    /// Rerun the pipeline for several window lengths
    SweepWindow(Common),
    /// Run prepare through localize in one go
    Run(Common),
    /// Print or write a fold's hierarchy
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value_t = Target::Hierarchy)]
        target: Target,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Destination file; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Hierarchy,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Handcrafted,
    Ecdf,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Built,
    Imported,
    Flat,
}

/// Config file plus overrides for its most common fields.
#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output root
    #[arg(long, env = "OPENSET_HAR_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    window_seconds: Option<f64>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    target_hz: Option<f64>,
    #[arg(long, value_enum)]
    feature_kind: Option<Kind>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum)]
    hierarchy_source: Option<Source>,
    #[arg(long)]
    hierarchy_path: Option<PathBuf>,
    #[arg(long)]
    subjects_per_fold: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Held-out class; repeat for several
    #[arg(long = "ood-class")]
    ood_classes: Vec<String>,
    #[arg(long)]
    lambda_hat: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.output_dir, self.output.clone());
        set!(cfg.data_path, self.data.clone().map(Some));
        set!(cfg.schema_path, self.schema.clone().map(Some));
        if self.schema.is_some() {
            cfg.schema = None;
        }
        set!(cfg.window_seconds, self.window_seconds);
        set!(cfg.overlap, self.overlap);
        set!(cfg.target_hz, self.target_hz);
        set!(
            cfg.features.kind,
            self.feature_kind.map(|k| match k {
                Kind::Handcrafted => FeatureKind::Handcrafted,
                Kind::Ecdf => FeatureKind::Ecdf,
                Kind::External => FeatureKind::External,
            })
        );
        set!(cfg.features.external_path, self.embeddings.clone().map(Some));
        set!(
            cfg.hierarchy.source,
            self.hierarchy_source.map(|s| match s {
                Source::Built => HierarchySource::Built,
                Source::Imported => HierarchySource::Imported,
                Source::Flat => HierarchySource::Flat,
            })
        );
        set!(cfg.hierarchy.path, self.hierarchy_path.clone().map(Some));
        set!(cfg.subjects_per_fold, self.subjects_per_fold);
        set!(cfg.repeats, self.repeats);
        if !self.ood_classes.is_empty() {
            cfg.ood_classes = self.ood_classes.clone();
        }
        set!(cfg.lambda_hat, self.lambda_hat);
        set!(cfg.seed, self.seed);
        set!(cfg.train.max_epochs, self.max_epochs);
        set!(cfg.train.learning_rate, self.learning_rate);
        set!(cfg.train.batch_size, self.batch_size);
        Ok(cfg)
    }
}

fn print_summary<D>(report: &pipeline::Report<D>) {
    for (metric, s) in &report.aggregate {
        println!("{metric}: {:.4} ({:.4})", s.mean, s.std);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare(c) => pipeline::prepare(&c.config()?),
        Command::Features(c) => pipeline::features(&c.config()?),
        Command::Hierarchy(c) => pipeline::hierarchy(&c.config()?),
        Command::Train(c) => pipeline::train_stage(&c.config()?),
        Command::EvalId(c) => pipeline::eval_id(&c.config()?).map(|r| print_summary(&r)),
        Command::EvalOod(c) => pipeline::eval_ood(&c.config()?).map(|r| print_summary(&r)),
        Command::Localize(c) => pipeline::localize(&c.config()?).map(|r| print_summary(&r)),
        Command::SweepWindow(c) => pipeline::sweep_window(&c.config()?).map(|rows| {
            for r in rows {
                println!("{}s {}: {:.4} ({:.4})", r.window_seconds, r.metric, r.mean, r.std);
            }
        }),
        Command::Run(c) => pipeline::run_all(&c.config()?),
        Command::Export {
            common,
            fold,
            target,
            format,
            out,
        } => {
            let text = pipeline::export(
                &common.config()?,
                fold,
                match target {
                    Target::Hierarchy => ExportTarget::Hierarchy,
                    Target::Reference => ExportTarget::Reference,
                },
                match format {
                    Format::Json => ExportFormat::JsonTree,
                    Format::Dot => ExportFormat::Dot,
                },
            )?;
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e }),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
