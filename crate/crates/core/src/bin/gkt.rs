use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gkt_core::analysis::{emit_plot_data, kendall_tau, load_metrics, subnet_grid_eval};
use gkt_core::config::{parse_list, RunConfig, RunPaths};
use gkt_core::data::{gen_data, Dataset};
use gkt_core::model::{load_checkpoint, NetworkConfig, DEFAULT_MASK_CAP};
use gkt_core::sampler::{group_statistics, SamplingRule};
use gkt_core::trainer::{train_to_dir, MetricRecord};

#[derive(Parser)]
#[command(
    name = "gkt",
    version,
    about = "Group knowledge based training on residual MLPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 0.35)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write metrics, checkpoint and knowledge into a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-group statistics of SIS-sampled subnets, as CSV on stdout.
    SampleStats {
        #[arg(long, default_value_t = 0.2)]
        q: f64,
        #[arg(long, default_value_t = 3)]
        groups: usize,
        /// Stage list as width:blocks pairs, e.g. 16:4,32:4,64:4.
        #[arg(long, default_value = "16:4,32:4,64:4")]
        stages: String,
        /// Number of complete SIS loops.
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    #[command(subcommand)]
    Analyze(Analyze),
    /// Turn a metrics trail into loss, accuracy and retained-fraction CSVs.
    EmitPlots {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Accuracy of every ordered subnet of a checkpoint, as CSV on stdout.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config; its network section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
    },
    /// Kendall's tau-a between the two columns of a headerless CSV.
    Kendall {
        #[arg(long)]
        file: PathBuf,
    },
}

fn parse_stages(s: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut widths = Vec::new();
    let mut blocks = Vec::new();
    for part in s.split(',') {
        let (w, l) = part
            .split_once(':')
            .with_context(|| format!("stage {part:?} is not width:blocks"))?;
        let w = parse_list(w).map_err(anyhow::Error::msg)?;
        let l = parse_list(l).map_err(anyhow::Error::msg)?;
        widths.extend(w);
        blocks.extend(l);
    }
    Ok((widths, blocks))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            classes,
            features,
            per_class,
            sigma,
            seed,
            out,
        } => {
            gen_data(classes, features, per_class, sigma, seed)?.save_csv(&out)?;
        }
        Command::Train {
            config,
            data,
            test,
            out,
        } => {
            let run = RunConfig::load(&config)?;
            let train_data = Dataset::load_csv(&data)?;
            let test_data = Dataset::load_csv(&test)?;
            let outcome = train_to_dir(&run.train, &run.network, &train_data, &test_data, &out)?;
            if let Some(MetricRecord::Eval(e)) = outcome
                .metrics
                .iter()
                .rev()
                .find(|r| matches!(r, MetricRecord::Eval(_)))
            {
                println!("epoch {} main_acc {:.4}", e.epoch, e.main_acc);
            }
            println!("wrote {}", RunPaths::in_dir(&out).metrics.display());
        }
        Command::SampleStats {
            q,
            groups,
            stages,
            draws,
            seed,
            features,
            classes,
        } => {
            let (stage_widths, stage_blocks) = parse_stages(&stages)?;
            let net = NetworkConfig {
                features,
                classes,
                stage_widths,
                stage_blocks,
            };
            net.validate()?;
            let stats = group_statistics(&net, &SamplingRule::Edr { q }, groups, draws, seed)?;
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for s in stats {
                w.serialize(s)?;
            }
            w.flush()?;
        }
        Command::Analyze(Analyze::Grid {
            checkpoint,
            config,
            test,
        }) => {
            let model = load_checkpoint(&checkpoint)?;
            if let Some(cfg) = config {
                let run = RunConfig::load(&cfg)?;
                if &run.network != model.config() {
                    bail!("network in {} does not match the checkpoint", cfg.display());
                }
            }
            let data = Dataset::load_csv(&test)?;
            let report = subnet_grid_eval(&model, &data, DEFAULT_MASK_CAP)?;
            println!("mask,retained_fraction,accuracy");
            for r in &report.rows {
                let mask: Vec<String> = r.mask.retained().iter().map(|v| v.to_string()).collect();
                println!("{},{},{}", mask.join(":"), r.retained_fraction, r.accuracy);
            }
            eprintln!("mean_all {:.4}", report.mean_all);
            if let Some(m) = report.mean_large {
                eprintln!("mean_large {m:.4}");
            }
        }
        Command::Analyze(Analyze::Kendall { file }) => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_path(&file)
                .with_context(|| format!("opening {}", file.display()))?;
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for (n, rec) in reader.records().enumerate() {
                let rec = rec.with_context(|| format!("{}:{}", file.display(), n + 1))?;
                if rec.len() != 2 {
                    bail!(
                        "{}:{}: expected 2 columns, found {}",
                        file.display(),
                        n + 1,
                        rec.len()
                    );
                }
                let parse = |i: usize| -> Result<f64> {
                    rec[i].trim().parse().with_context(|| {
                        format!("{}:{}: bad number {:?}", file.display(), n + 1, &rec[i])
                    })
                };
                xs.push(parse(0)?);
                ys.push(parse(1)?);
            }
            println!("{}", kendall_tau(&xs, &ys)?);
        }
        Command::EmitPlots { metrics, out } => {
            emit_plot_data(&load_metrics(&metrics)?, &out)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
