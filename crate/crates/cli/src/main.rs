use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxaug::dataset::{load_dir, Format, Manifest, MANIFEST_FILE};
use ctxaug::pipeline::{
    augment_dir, connect_scorer, export_context_set, preview, stats, AugmentConfig, Engine, Mode,
    Regime, Schedule, StatsReport,
};
use ctxaug::Error;

#[derive(Parser)]
#[command(name = "ctxaug", version, about = "Context-driven copy-paste augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an augmented copy of a dataset.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Write contextual training images and labels for a scorer.
    ExportContext {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// small-data or normal-data
        #[arg(long)]
        regime: Option<Regime>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Per-class counts and the box shape histogram.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format_in: Format,
        #[arg(long)]
        json: bool,
    },
    /// Render one image before and after augmentation, plus its candidates.
    Preview {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Load a dataset and check its invariants.
    Validate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format_in: Format,
    },
}

/// Flags shared by the commands that run the pipeline. Each overrides the
/// same key of `--config`.
#[derive(Args, Default)]
struct Opts {
    /// TOML file with pipeline settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// context, random or enlarge
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    prob: Option<f64>,
    /// constant or linear-decay
    #[arg(long)]
    schedule: Option<Schedule>,
    #[arg(long)]
    seed: Option<u64>,
    /// process:<cmd>, tcp:<host:port>, uniform or oracle
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    format_in: Option<Format>,
    #[arg(long)]
    format_out: Option<Format>,
    #[arg(long)]
    max_paste: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    bg_ratio: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for per-image candidate JSON
    #[arg(long)]
    dump_candidates: Option<PathBuf>,
}

fn read_config(path: &Path) -> Result<AugmentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl Opts {
    fn resolve(&self) -> Result<AugmentConfig, Error> {
        let mut c = match &self.config {
            Some(p) => read_config(p)?,
            None => AugmentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = &self.$flag {
                    c.$field = v.clone();
                }
            };
            ($flag:ident => some $field:ident) => {
                if let Some(v) = &self.$flag {
                    c.$field = Some(v.clone());
                }
            };
        }
        set!(mode => mode);
        set!(prob => paste_probability);
        set!(schedule => schedule);
        set!(seed => seed);
        set!(scorer => some scorer);
        set!(format_in => some format_in);
        set!(format_out => some format_out);
        set!(max_paste => max_placements);
        set!(threshold => threshold);
        set!(candidates => candidates);
        set!(variants => variants);
        set!(bg_ratio => bg_ratio);
        set!(workers => workers);
        set!(dump_candidates => some dump_candidates);
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::NotFound(_) | Error::Precondition(_) => 2,
        Error::ScorerUnavailable(_) | Error::Protocol { .. } => 3,
        Error::Parse { .. }
        | Error::Integrity(_)
        | Error::UnsupportedMask { .. }
        | Error::Io { .. }
        | Error::Codec { .. }
        | Error::MissingMasks
        | Error::EmptyDistribution => 4,
        Error::NoFit | Error::NoMatch => 1,
    }
}

fn input_format(c: &AugmentConfig) -> Result<Format, Error> {
    c.format_in
        .ok_or_else(|| Error::Config("--format-in is required".into()))
}

fn print_stats(report: &StatsReport, manifest: Option<&Manifest>) {
    println!("images: {}", report.images);
    println!("instances: {} ({} synthetic)", report.instances, report.synthetic);
    if let Some(m) = manifest {
        println!("manifest pastes: {}", m.paste_count());
    }
    if report.classes.is_empty() {
        return;
    }
    println!("{:>4}  {:<20} {:>9} {:>9} {:>9}", "id", "class", "instances", "synthetic", "masks");
    for c in &report.classes {
        println!(
            "{:>4}  {:<20} {:>9} {:>9} {:>9}",
            c.id, c.name, c.instances, c.synthetic, c.with_mask
        );
    }
    if let Some(counts) = &report.shape_counts {
        println!("shape histogram (rows: scale bins, columns: log2 aspect bins)");
        for row in counts {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>4}")).collect();
            println!("{}", cells.join(""));
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Augment { input, output, opts } => {
            let config = opts.resolve()?;
            let manifest = augment_dir(&config, &input, &output, None)?;
            let augmented = manifest.images.iter().filter(|r| r.augmented).count();
            println!(
                "{} images, {augmented} augmented, {} pastes -> {}",
                manifest.images.len(),
                manifest.paste_count(),
                output.display()
            );
        }
        Command::ExportContext {
            input,
            output,
            regime,
            opts,
        } => {
            let mut config = opts.resolve()?;
            if let Some(r) = regime {
                config.regime = r;
            }
            let dataset = load_dir(input_format(&config)?, &input)?;
            for s in export_context_set(&config, &dataset, &output)? {
                println!(
                    "{}: {} positives, {} backgrounds",
                    s.dir.display(),
                    s.positives,
                    s.backgrounds
                );
            }
        }
        Command::Stats {
            input,
            format_in,
            json,
        } => {
            let dataset = load_dir(format_in, &input)?;
            let report = stats(&dataset);
            let manifest_path = input.join(MANIFEST_FILE);
            let manifest = if manifest_path.is_file() {
                Some(Manifest::load(&manifest_path)?)
            } else {
                None
            };
            if json {
                let mut v = serde_json::to_value(&report).expect("serializable");
                if let Some(m) = &manifest {
                    v["manifest_pastes"] = m.paste_count().into();
                }
                println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
            } else {
                print_stats(&report, manifest.as_ref());
            }
        }
        Command::Preview {
            input,
            image_id,
            output,
            opts,
        } => {
            let config = opts.resolve()?;
            let dataset = load_dir(input_format(&config)?, &input)?;
            let scorer = connect_scorer(&config, &dataset)?;
            let engine = Engine::prepare(config, &dataset, scorer)?;
            let out = preview(&engine, &dataset, &image_id, &output)?;
            println!("{}", out.side_by_side.display());
            println!("{}", out.overlay.display());
        }
        Command::Validate { input, format_in } => {
            let dataset = load_dir(format_in, &input)?;
            dataset.validate()?;
            println!(
                "ok: {} images, {} objects, {} classes",
                dataset.images.len(),
                dataset.box_count(),
                dataset.num_classes()
            );
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
            ExitCode::from(exit_code(&e))
        }
    }
}
