use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};
use pivotcap::runtime::{pretrain_phase, CaptionTarget, Runtime};
use pivotcap::trainer::Variant;
use pivotcap::Error;

/// Unpaired image captioning through a pivot language.
#[derive(Parser, Debug)]
#[command(name = "pivotcap", version)]
struct Cli {
    /// key = value config file; missing keys take their defaults
    #[arg(short, long, global = true, default_value = "pivotcap.conf")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpora, features and vocabularies
    GenData,
    /// Pretrain one model on its own corpus
    Pretrain {
        /// captioner | translator | autoencoder
        #[arg(long)]
        which: String,
    },
    /// Joint training from the pretrained models
    JointTrain {
        /// full | pivot-only | control | lower-bound
        #[arg(long, default_value = "full")]
        variant: String,
        /// Stop after this many steps; continue later with --resume
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from the saved joint state
        #[arg(long)]
        resume: bool,
    },
    /// Caption evaluation images through the pivot
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        feature_index: Option<usize>,
        #[arg(long)]
        all: bool,
    },
    /// Score checkpoints on the evaluation set
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
    },
    /// Finite-difference gradient suites
    Gradcheck,
    /// Print every config key with its default
    Keys,
}

/// Usage problems exit with 1, everything else with 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.into()),
            e => Failure::Runtime(e.into()),
        }
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg))
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Keys = cli.command {
        print!("{}", pivotcap::config::describe());
        return Ok(());
    }
    let rt = Runtime::load(&cli.config).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(anyhow::Error::new(e).context("cannot read the config file")),
        e => e.into(),
    })?;
    let report = match cli.command {
        Command::GenData => rt.gen_data()?,
        Command::Pretrain { which } => {
            let phase = pretrain_phase(&which)
                .ok_or_else(|| usage(format!("--which `{which}`: expected captioner, translator or autoencoder")))?;
            rt.pretrain(phase)?
        }
        Command::JointTrain {
            variant,
            max_steps,
            resume,
        } => {
            let v = Variant::parse(&variant).ok_or_else(|| {
                usage(format!("--variant `{variant}`: expected full, pivot-only, control or lower-bound"))
            })?;
            rt.joint_train(v, max_steps, resume)?
        }
        Command::Caption {
            ckpt,
            feature_index,
            all,
        } => {
            let target = match (feature_index, all) {
                (_, true) => CaptionTarget::All,
                (Some(i), false) => CaptionTarget::Index(i),
                (None, false) => return Err(usage("pass --feature-index or --all".into())),
            };
            rt.caption(&ckpt, target)?
        }
        Command::Evaluate { ckpt } => rt.evaluate(&ckpt)?,
        Command::Gradcheck => {
            let (report, ok) = rt.gradcheck()?;
            print!("{report}");
            if !ok {
                return Err(Failure::Runtime(anyhow::anyhow!("gradient check above tolerance")));
            }
            return Ok(());
        }
        Command::Keys => unreachable!("handled above"),
    };
    print!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let config = cli.config.clone();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {:#}", e.context(format!("config {}", config.display())));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
