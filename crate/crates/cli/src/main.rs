use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use neurorecon::error::Error;
use neurorecon::experiment::{self, Context, ExperimentConfig, GuidanceSource, Layout, RunSpec};

#[derive(Parser)]
#[command(name = "neurorecon", version, about = "Feature-guided latent diffusion on synthetic fMRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Experiment root holding data/, models/, recon/ and reports/.
    #[arg(long, short, default_value = "run")]
    root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dataset into <root>/data.
    GenerateData(Common),
    /// Train the denoiser and the per-subject decoders (resumable).
    Train(Common),
    /// Sample reconstructions for one subject.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        subject: usize,
        /// Run label; without it the configured guided and unguided runs are made.
        #[arg(long)]
        label: Option<String>,
        /// Guidance scale as a multiple of the calibrated κ_op.
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// feature-decoders | ground-truth-features | brain-encoder
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Score decoding and every reconstruction run found on disk.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to every target subject.
        #[arg(long, short)]
        subject: Option<usize>,
    },
    /// Sweep the κ × η grid.
    Ablate(Common),
    /// Print the default config as TOML.
    DefaultConfig,
}

fn load(common: &Common) -> neurorecon::error::Result<(ExperimentConfig, Layout)> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok((cfg, Layout::new(&common.root)))
}

fn run(cli: Cli) -> neurorecon::error::Result<()> {
    match cli.command {
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
        Command::GenerateData(c) => {
            let (cfg, layout) = load(&c)?;
            let ds = experiment::generate_data(&cfg, &layout)?;
            info!("wrote {} subjects to {}", ds.subjects.len(), layout.data().display());
        }
        Command::Train(c) => {
            let (cfg, layout) = load(&c)?;
            experiment::train(&cfg, &layout)?;
        }
        Command::Reconstruct {
            common,
            subject,
            label,
            kappa,
            eta,
            source,
            items,
            repeats,
        } => {
            let (cfg, layout) = load(&common)?;
            let mut guided = RunSpec::guided(&cfg);
            if let Some(s) = source {
                guided.source = GuidanceSource::parse(&s)?;
            }
            guided.eta = eta.unwrap_or(guided.eta);
            guided.items = items.unwrap_or(guided.items);
            guided.repeats = repeats.unwrap_or(guided.repeats);
            let specs = match (label, kappa) {
                (Some(label), k) => vec![RunSpec {
                    label,
                    kappa: k.unwrap_or(guided.kappa),
                    ..guided
                }],
                (None, Some(_)) => return Err(Error::Config("--kappa needs --label".into())),
                (None, None) => vec![
                    RunSpec {
                        label: "unguided".into(),
                        kappa: 0.0,
                        ..guided.clone()
                    },
                    guided,
                ],
            };
            let ctx = Context::load(&cfg, &layout, subject)?;
            for spec in &specs {
                let set = experiment::reconstruct(&cfg, &layout, &ctx, spec)?;
                info!("{}: κ = {:.4e}, {} samples", spec.label, set.record.kappa, set.record.samples.len());
            }
        }
        Command::Evaluate { common, subject } => {
            let (cfg, layout) = load(&common)?;
            let subjects = subject.map_or_else(|| cfg.targets(), |s| vec![s]);
            for k in subjects {
                for rep in experiment::evaluate(&cfg, &layout, k)? {
                    let agg = rep.aggregate();
                    let cols: Vec<String> = agg.iter().map(|(c, v)| format!("{c}={v:.4}")).collect();
                    println!("subj{k} {}: {}", rep.meta.label, cols.join(" "));
                }
            }
        }
        Command::Ablate(c) => {
            let (cfg, layout) = load(&c)?;
            let reports = experiment::ablate(&cfg, &layout)?;
            info!("{} ablation cells written", reports.len());
        }
    }
    Ok(())
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
