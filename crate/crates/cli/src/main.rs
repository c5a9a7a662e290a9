use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use xmprobe::pipeline::{Pipeline, StageStatus};
use xmprobe::report::write_report;
use xmprobe::{verify, PipelineConfig};
use xmprobe_core::probe::MetricsReport;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "xmprobe", version, about = "Toy vision-language pipeline with per-layer SAE probes")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate every dataset.
    Gen,
    TrainLm,
    TrainVit,
    /// Capture text-corpus residual streams for SAE training.
    DumpActs,
    TrainSaes,
    /// Describe SAE features from max-activating corpus contexts.
    Describe,
    TrainAdapter {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    Probe {
        #[arg(long)]
        n_rs: Option<usize>,
        #[arg(long)]
        n_align: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        img_freq: Option<f64>,
        #[arg(long)]
        corpus_freq: Option<f64>,
    },
    /// Summary and figures. With --metrics, renders that directory directly
    /// instead of running the pipeline.
    Report {
        #[arg(long, requires = "out")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check checksums, the manifest DAG and orphan files.
    Verify,
    RunAll,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Cmd::Probe { n_rs, n_align, k, img_freq, corpus_freq } = &cli.cmd {
        let p = &mut cfg.probe;
        p.n_rs = n_rs.unwrap_or(p.n_rs);
        p.n_align = n_align.unwrap_or(p.n_align);
        p.k = k.unwrap_or(p.k);
        p.image_freq_max = img_freq.unwrap_or(p.image_freq_max);
        p.corpus_freq_max = corpus_freq.unwrap_or(p.corpus_freq_max);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(cfg: PipelineConfig, target: &str) -> ExitCode {
    match Pipeline::new(cfg).run(target) {
        Ok(done) => {
            for (name, status) in done {
                let s = if status == StageStatus::Cached { "cached" } else { "ran" };
                println!("{name:<16} {s}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let target = match &cli.cmd {
        Cmd::Gen => "gen",
        Cmd::TrainLm => "train-lm",
        Cmd::TrainVit => "train-vit",
        Cmd::DumpActs => "dump-acts",
        Cmd::TrainSaes => "train-saes",
        Cmd::Describe => "describe",
        Cmd::TrainAdapter { stage: 1 } => "train-adapter-1",
        Cmd::TrainAdapter { .. } => "train-adapter-2",
        Cmd::Probe { .. } => "probe",
        Cmd::Report { metrics: Some(dir), out } => {
            let out = out.as_ref().expect("clap enforces --out");
            let res = MetricsReport::read(dir).map_err(anyhow::Error::from).and_then(|r| write_report(out, &r, None, None));
            return match res {
                Ok(files) => {
                    files.iter().for_each(|f| println!("{}", out.join(f).display()));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_STAGE)
                }
            };
        }
        Cmd::Report { .. } => "report",
        Cmd::RunAll => "report",
        Cmd::Verify => {
            return match verify(&cfg.paths.artifacts) {
                Ok(r) if r.passed() => {
                    println!("verify: ok ({} stages)", r.stages.len());
                    ExitCode::SUCCESS
                }
                Ok(r) => {
                    r.failures.iter().for_each(|f| eprintln!("verify: {f}"));
                    ExitCode::from(EXIT_VERIFY)
                }
                Err(e) => {
                    eprintln!("verify: {e:#}");
                    ExitCode::from(EXIT_VERIFY)
                }
            };
        }
    };
    run_stage(cfg, target)
}
