use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spoofnet::config::RunConfig;
use spoofnet::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "spoofnet", version, about = "Raw-waveform spoofing countermeasure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides run.dir and RUN_DIR
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override (train: run.seeds, gen-synth: synth.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured seed
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a protocol with a checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to data.eval_protocol
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Also write embeddings.csv
        #[arg(long)]
        embeddings: bool,
    },
    /// PGD robustness sweep over attack.deltas
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to data.eval_protocol
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Write the synthetic corpus
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, seed_key: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.run_dir())
}

fn protocol_or_default(cfg: &RunConfig, protocol: Option<PathBuf>) -> Result<PathBuf> {
    protocol
        .or_else(|| cfg.path("data.eval_protocol"))
        .ok_or_else(|| Error::Config("no --protocol given and data.eval_protocol is not set".into()))
}

fn run(cli: Cli) -> Result<()> {
    spoofnet::runtime::tune_allocator();
    match cli.command {
        Command::Train { common } => {
            let cfg = load_config(&common, "run.seeds")?;
            let out = out_dir(&common, &cfg);
            for o in pipeline::train(&cfg, &out)? {
                match &o.eval {
                    Some(r) => println!("seed {}: eval EER {:.6} min t-DCF {:.6}", o.seed, r.eer, r.min_tdcf),
                    None => println!("seed {}: trained, run dir {}", o.seed, o.run_dir.display()),
                }
            }
        }
        Command::Evaluate { common, checkpoint, protocol, embeddings } => {
            let cfg = load_config(&common, "run.seeds")?;
            let out = out_dir(&common, &cfg);
            let protocol = protocol_or_default(&cfg, protocol)?;
            let r = pipeline::evaluate(&cfg, &checkpoint, &protocol, &out)?;
            if embeddings {
                pipeline::dump_embeddings(&cfg, &checkpoint, &protocol, &out.join("embeddings.csv"))?;
            }
            println!("pooled EER {:.6} min t-DCF {:.6}", r.eer, r.min_tdcf);
            for (attack, eer) in &r.per_attack_eer {
                println!("  {attack}: EER {eer:.6}");
            }
        }
        Command::Attack { common, checkpoint, protocol } => {
            let cfg = load_config(&common, "run.seeds")?;
            let out = out_dir(&common, &cfg);
            let protocol = protocol_or_default(&cfg, protocol)?;
            for r in pipeline::attack(&cfg, &checkpoint, &protocol, &out)? {
                println!("delta {}: accuracy {:.4} max |x_adv - x| {:e}", r.delta, r.accuracy, r.max_perturbation);
            }
        }
        Command::GenSynth { common } => {
            let cfg = load_config(&common, "synth.seed")?;
            let out = out_dir(&common, &cfg);
            let c = pipeline::gen_synth(&cfg, Path::new(&out))?;
            println!("{} train / {} eval utterances in {}", c.train.len(), c.eval.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
