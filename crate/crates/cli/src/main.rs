use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use ssr_core::corpus::SyntheticSpec;
use ssr_core::metrics::{parse_grid, ClozeMethod, DEFAULT_K_GRID};
use ssr_core::pipeline::{self, GenMode, Run, RunConfig};
use ssr_core::realization::DecoderVariant;
use ssr_core::ssr::{SsrLoss, SsrMode};
use ssr_core::Error;

#[derive(Parser, Debug)]
#[command(name = "ssr", version, about = "Sentence-level language modeling pipeline")]
struct Cli {
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    /// key=value configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic story corpus and its splits.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split a user corpus: one paragraph per line, sentences separated by tabs.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train,val,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
    },
    TrainEncoder,
    EncodeCorpus,
    TrainSsr {
        /// ar or nonar.
        #[arg(long, default_value = "ar")]
        mode: String,
        /// cosine or contrastive; defaults to the config's ssr_loss.
        #[arg(long)]
        loss: Option<String>,
    },
    TrainDecoder {
        /// vanilla or mixed.
        #[arg(long, default_value = "mixed")]
        variant: String,
    },
    TrainBaseline {
        /// Train the infilling variant instead of the left-to-right model.
        #[arg(long)]
        infill: bool,
    },
    /// One generated ending per test context.
    Generate {
        /// ssr-vanilla, ssr-mixed or baseline.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    SelectEnding {
        /// ssr-ar, ssr-nonar or ppl.
        #[arg(long)]
        method: String,
    },
    /// BLEU-1..4 and Distinct-1..4 of a generation file.
    Evaluate {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    SweepK {
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "ssr-mixed,baseline")]
        generators: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Corpus(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Argument(_) => 4,
        _ => 1,
    }
}

fn parse_split(s: &str) -> ssr_core::Result<(f64, f64, f64)> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad_split(s))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(bad_split(s)),
    }
}

fn bad_split(s: &str) -> Error {
    Error::Argument(format!("split {s:?} must be three comma-separated fractions"))
}

fn parse_ssr_mode(s: &str) -> ssr_core::Result<SsrMode> {
    match s {
        "ar" => Ok(SsrMode::Ar),
        "nonar" => Ok(SsrMode::NonAr),
        _ => Err(Error::Argument(format!("unknown SSR mode {s:?} (ar or nonar)"))),
    }
}

fn parse_loss(s: &str) -> ssr_core::Result<SsrLoss> {
    match s {
        "cosine" => Ok(SsrLoss::Cosine),
        "contrastive" => Ok(SsrLoss::Contrastive),
        _ => Err(Error::Argument(format!("unknown loss {s:?} (cosine or contrastive)"))),
    }
}

fn parse_variant(s: &str) -> ssr_core::Result<DecoderVariant> {
    match s {
        "vanilla" => Ok(DecoderVariant::Vanilla),
        "mixed" => Ok(DecoderVariant::Mixed),
        _ => Err(Error::Argument(format!("unknown decoder variant {s:?} (vanilla or mixed)"))),
    }
}

fn parse_method(s: &str) -> ssr_core::Result<ClozeMethod> {
    match s {
        "ssr-ar" => Ok(ClozeMethod::SsrArMatch),
        "ssr-nonar" => Ok(ClozeMethod::SsrNonArMatch),
        "ppl" => Ok(ClozeMethod::PplBaseline),
        _ => Err(Error::Argument(format!("unknown method {s:?} (ssr-ar, ssr-nonar or ppl)"))),
    }
}

fn execute(cli: Cli) -> ssr_core::Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let run = Run::new(&cli.run, config, cli.force);
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let mut s = match spec {
                Some(p) => pipeline::load_spec(&p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let out = out.unwrap_or(cli.run);
            for p in pipeline::synth(&s, &out, cli.force)? {
                println!("{}", p.display());
            }
        }
        Command::Ingest { corpus, out, seed, split } => {
            let split = parse_split(&split)?;
            let out = out.unwrap_or(cli.run);
            for p in pipeline::ingest(&corpus, &out, split, seed, cli.force)? {
                println!("{}", p.display());
            }
        }
        Command::TrainEncoder => println!("{}", run.train_encoder()?),
        Command::EncodeCorpus => println!("{}", run.encode_corpus()?),
        Command::TrainSsr { mode, loss } => {
            let mode = parse_ssr_mode(&mode)?;
            let loss = loss.as_deref().map(parse_loss).transpose()?.unwrap_or(run.config.ssr_loss);
            println!("{}", run.train_ssr(mode, loss)?);
        }
        Command::TrainDecoder { variant } => println!("{}", run.train_decoder(parse_variant(&variant)?)?),
        Command::TrainBaseline { infill } => println!("{}", run.train_baseline(infill)?),
        Command::Generate { mode, k, seed } => {
            let path = run.generate(GenMode::parse(&mode)?, k.unwrap_or(run.config.k), seed)?;
            println!("{}", path.display());
        }
        Command::SelectEnding { method } => {
            let report = run.select_ending(parse_method(&method)?)?;
            print!("{}", report.to_csv());
        }
        Command::Evaluate { mode, k, seed } => {
            let report = run.evaluate(GenMode::parse(&mode)?, k.unwrap_or(run.config.k), seed)?;
            let cols: Vec<String> = ["B-1", "B-2", "B-3", "B-4", "D-1", "D-2", "D-3", "D-4"]
                .iter()
                .map(|c| format!("{c} {:.4}", report.get(c).unwrap_or(f64::NAN)))
                .collect();
            println!("{}", cols.join("  "));
        }
        Command::SweepK { grid, generators, seed } => {
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => DEFAULT_K_GRID.to_vec(),
            };
            let modes: Vec<GenMode> = generators.split(',').map(|g| GenMode::parse(g.trim())).collect::<ssr_core::Result<_>>()?;
            let (path, rows) = run.sweep_k(&modes, &grid, seed)?;
            info!("{} sweep rows", rows.len());
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    let threads = match std::env::var("SSR_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: SSR_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(4);
            }
        },
        Err(_) => 1,
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("warning: thread pool already initialized: {e}");
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
