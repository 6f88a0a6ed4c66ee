use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rawdarts::config::RunConfig;
use rawdarts::metrics::TdcfCosts;
use rawdarts::pipeline;
use rawdarts::trainer::{Checkpoint, EpochRecord};
use rawdarts::Error;

/// Raw-waveform differentiable architecture search for spoofing detection.
#[derive(Parser)]
#[command(name = "rawdarts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic harmonic/inharmonic dataset as WAV files plus a protocol.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generate 1 s utterances at this rate instead of 4 s at 16 kHz.
        #[arg(long)]
        toy_rate: Option<u32>,
    },
    /// Architecture search with warm-up; writes the selected genotype.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Train a searched architecture from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        genotype: PathBuf,
        /// Frontend kernels written by `search` (frontend.txt).
        #[arg(long)]
        frontend: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        print_config: bool,
    },
    /// Score a protocol with a checkpoint and report EER (and min t-DCF).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        /// Defaults to the protocol's directory.
        #[arg(long)]
        wav_dir: Option<PathBuf>,
        /// Score file to write.
        #[arg(long)]
        out: PathBuf,
        /// TOML cost model; without it only EERs are reported.
        #[arg(long)]
        tdcf_config: Option<PathBuf>,
        /// Also write the report as tab-separated values.
        #[arg(long)]
        tsv: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Count learnable parameters per subsystem.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the built-in reference genotype.
        #[arg(long)]
        genotype: Option<PathBuf>,
        #[arg(long)]
        print_config: bool,
    },
    /// Print a complete configuration file.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Toy,
}

/// 2 usage/configuration, 3 data, 4 numeric failure or invariant breach.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Parse { .. }
        | Error::Audio { .. }
        | Error::Io { .. }
        | Error::Checkpoint(_)
        | Error::Version { .. } => 3,
        Error::NonFinite(_) | Error::Invariant(_) | Error::Shape(_) => 4,
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Error> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
}

fn report_epoch(stage: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        eprintln!(
            "{stage} epoch {:>3}  train_loss {:.6}  val_loss {:.6}  dev_acc {:.4}  lr {}",
            r.epoch, r.train_loss, r.val_loss, r.dev_acc, r.lr
        )
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Error> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthData {
            out,
            n_per_class,
            seed,
            toy_rate,
        } => {
            let d = pipeline::synth_data(&out, n_per_class, seed, toy_rate)?;
            let rate = toy_rate.unwrap_or(16000) as f64;
            println!("count {}", d.count);
            println!("duration_s {:.3}", d.total_samples as f64 / rate);
            println!("sha256 {}", d.sha256);
        }
        Command::Search {
            config,
            out,
            resume,
            print_config,
        } => {
            let cfg = RunConfig::load(&config)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let out = out_dir(out, &cfg)?;
            let train =
                pipeline::load_configured(&cfg, &cfg.train_protocol, &cfg.train_wav_dir, "train")?;
            let dev = pipeline::load_configured(&cfg, &cfg.dev_protocol, &cfg.dev_wav_dir, "dev")?;
            let sel = pipeline::run_search(
                &cfg,
                &train,
                &dev,
                &out,
                resume,
                &mut report_epoch("search"),
            )?;
            println!("selected epoch {}", sel.epoch);
            print!("{}", sel.genotype.to_text());
        }
        Command::Train {
            config,
            genotype,
            frontend,
            out,
            resume,
            print_config,
        } => {
            let cfg = RunConfig::load(&config)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            require_file(&genotype, "genotype file")?;
            let geno = pipeline::read_genotype(&genotype)?;
            let fe = frontend
                .as_deref()
                .map(pipeline::read_frontend)
                .transpose()?;
            let out = out_dir(out, &cfg)?;
            let train =
                pipeline::load_configured(&cfg, &cfg.train_protocol, &cfg.train_wav_dir, "train")?;
            let dev = pipeline::load_configured(&cfg, &cfg.dev_protocol, &cfg.dev_wav_dir, "dev")?;
            let best = pipeline::run_train(
                &cfg,
                &geno,
                fe.as_ref(),
                &train,
                &dev,
                &out,
                resume,
                &mut report_epoch("train"),
            )?;
            let r = best.history.last().expect("best checkpoint has history");
            println!("best epoch {} dev_acc {}", r.epoch, r.dev_acc);
        }
        Command::Eval {
            checkpoint,
            protocol,
            wav_dir,
            out,
            tdcf_config,
            tsv,
            batch,
        } => {
            require_file(&checkpoint, "checkpoint")?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let costs = tdcf_config.as_deref().map(TdcfCosts::load).transpose()?;
            let wav_dir = wav_dir
                .unwrap_or_else(|| protocol.parent().map(Path::to_path_buf).unwrap_or_default());
            let report =
                pipeline::run_eval(&ckpt, &protocol, &wav_dir, &out, costs.as_ref(), batch)?;
            print!("{}", report.to_text());
            if let Some(path) = tsv {
                std::fs::write(&path, report.to_tsv())
                    .map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::ParamCount {
            config,
            genotype,
            print_config,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let geno = genotype
                .as_deref()
                .map(pipeline::read_genotype)
                .transpose()?;
            let c = pipeline::param_counts(&cfg.model(), geno.as_ref())?;
            for (name, n) in [
                ("frontend", c.frontend),
                ("stem", c.stem),
                ("cells", c.cells),
                ("gru", c.gru),
                ("fc+head", c.fc_head),
                ("total", c.total()),
            ] {
                println!("{name:<9} {n:>12}");
            }
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Full => RunConfig::default(),
                Preset::Toy => RunConfig::toy(),
            };
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
