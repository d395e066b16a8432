use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdycnn::model::ConvMode;
use tdycnn::Result;
use tdycnn_cli::{cmd_analyze, cmd_eval, cmd_params, cmd_synth, cmd_train, exit_code, Config};

#[derive(Parser)]
#[command(name = "tdycnn", version, about = "Temporal dynamic CNN speaker verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [model], [train] and [synth] sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    conv_mode: Option<ConvMode>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with phone labels and a trial list
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt and train.log
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list; writes scores.tsv and report.txt
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention and frame-embedding CSVs
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated dynamic layer ids; default first, middle, last
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        per_speaker: bool,
    },
    /// Print parameter counts and the ratio to the static model
    Params {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> std::result::Result<ConvMode, String> {
    s.parse().map_err(|e: tdycnn::Error| e.to_string())
}

fn config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(mode) = common.conv_mode {
        cfg.model.conv_mode = mode;
    }
    if let Some(k) = common.k {
        cfg.model.k = k;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => cmd_synth(&config(&common)?.synth, &out),
        Command::Train { common, data, out } => {
            let outcome = cmd_train(&config(&common)?, &data, &out)?;
            println!("final_loss={:.9} checkpoint={}", outcome.final_loss(), outcome.checkpoint.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, trials, out } => {
            let report = cmd_eval(&checkpoint, &data, trials.as_deref(), &out)?;
            println!("{}", report.summary());
            Ok(())
        }
        Command::Analyze { checkpoint, data, out, layers, per_speaker } => {
            let report = cmd_analyze(&checkpoint, &data, &layers, per_speaker, &out)?;
            for (layer, ratio) in &report.dispersion {
                println!("layer {layer}\tdispersion {ratio:.6}");
            }
            Ok(())
        }
        Command::Params { common } => {
            print!("{}", cmd_params(&config(&common)?.model)?.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
