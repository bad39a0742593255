use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use come_bench::config::{parse_bool, parse_grid};
use come_bench::sweep::{summary_table, write_csv, write_json};
use come_bench::{runtime_breakdown, tradeoff_table, BreakdownConfig, Strategy, SweepConfig, SweepContext};
use come_core::metrics::{chamfer, write_record, PointCloud};
use come_core::predictor::{train, write_trace_csv, TrainConfig};
use come_core::synth::Workload;

#[derive(Parser)]
#[command(name = "bench", about = "Merged vs exact transformer pipeline benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured grid and write records.csv and records.json.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write first-layer pre/post-merge tensors of every point here.
        #[arg(long)]
        dump_activations: Option<PathBuf>,
        /// Also save the generated block weights under <out>/weights.
        #[arg(long)]
        save_weights: bool,
    },
    /// Error and speedup per strategy, bias setting and merge ratio.
    Tradeoff {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "confidence,similarity,pick-one,drop-all")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "on")]
        bias: Vec<String>,
        /// Rescale drop-all ratios so every strategy keeps the same token count.
        #[arg(long)]
        match_tokens: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-time shares of the merged pipeline at one point.
    Breakdown {
        #[arg(long)]
        tokens: usize,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 4)]
        group: usize,
        #[arg(long, default_value = "32x32")]
        grid: String,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        d_ff: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Score tokens with a predictor instead of teacher confidence.
        #[arg(long)]
        predictor: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Distil the confidence predictor; writes trace.csv and predictor.bin.
    Train {
        #[arg(long, default_value = "8x8")]
        grid: String,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        latent: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chamfer completeness and accuracy of two xyz point files, as JSON.
    Chamfer {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<SweepConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SweepConfig::parse(&text)?
        }
        None => SweepConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sweep { config, out, dump_activations, save_weights } => {
            let cfg = load_config(config.as_deref())?;
            std::fs::create_dir_all(&out)?;
            let ctx = SweepContext::new(cfg)?;
            let points = ctx.points();
            let records = ctx.run_points(&points)?;
            write_csv(&mut BufWriter::new(File::create(out.join("records.csv"))?), &records)?;
            write_json(&mut BufWriter::new(File::create(out.join("records.json"))?), &records)?;
            if let Some(dir) = dump_activations {
                for (i, p) in points.iter().enumerate() {
                    ctx.dump_activations(p, &dir, &format!("point_{i}"))?;
                }
            }
            if save_weights {
                ctx.model.save(&out.join("weights"))?;
            }
            print!("{}", summary_table(&records));
        }
        Command::Tradeoff { config, strategies, ratios, bias, match_tokens, out } => {
            let cfg = load_config(config.as_deref())?;
            let strategies = strategies.iter().map(|s| s.parse()).collect::<Result<Vec<Strategy>, _>>()?;
            let bias = bias.iter().map(|b| parse_bool(b)).collect::<Result<Vec<bool>, _>>()?;
            let records = tradeoff_table(&cfg, &strategies, &bias, &ratios, match_tokens)?;
            match out {
                Some(path) => {
                    write_csv(&mut BufWriter::new(File::create(&path)?), &records)?;
                    print!("{}", summary_table(&records));
                }
                None => write_csv(&mut std::io::stdout().lock(), &records)?,
            }
        }
        Command::Breakdown {
            tokens,
            ratio,
            group,
            grid,
            channels,
            d_ff,
            layers,
            repetitions,
            predictor,
            seed,
            json,
        } => {
            let cfg = BreakdownConfig {
                tokens,
                ratio,
                group,
                grid: parse_grid(&grid)?,
                channels,
                d_ff,
                layers,
                repetitions,
                predictor,
                seed,
                ..BreakdownConfig::default()
            };
            let b = runtime_breakdown(&cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&b)?);
            } else {
                println!("tokens {} -> {} merged, {:.3} ms per run", b.tokens, b.merged_tokens, b.total_ms);
                for (name, v) in [
                    ("attention", b.attention),
                    ("mlp", b.mlp),
                    ("merge/split", b.merge_split),
                    ("mask generation", b.mask_generation),
                    ("predictor", b.predictor),
                    ("other", b.other),
                ] {
                    println!("{name:<16} {v:>7.3} %");
                }
                println!("{:<16} {:>7.3} %", "overhead", b.overhead());
                println!("{:<16} {:>7.3} %", "sum", b.share_sum());
            }
        }
        Command::Train { grid, channels, latent, steps, lr, seed, out } => {
            let wl = Workload::smooth(parse_grid(&grid)?, channels, 1);
            let cfg = TrainConfig { steps, lr, seed, latent, ..TrainConfig::default() };
            let outcome = train(&wl, &cfg)?;
            std::fs::create_dir_all(&out)?;
            write_trace_csv(&mut BufWriter::new(File::create(out.join("trace.csv"))?), &outcome.trace)?;
            outcome.params.write(&mut BufWriter::new(File::create(out.join("predictor.bin"))?))?;
            println!(
                "loss {:.5} -> {:.5}, hold-out IoU {:.3}",
                outcome.initial_loss(),
                outcome.final_loss(),
                outcome.final_iou().unwrap_or(f64::NAN)
            );
        }
        Command::Chamfer { pred, gt } => {
            let read = |p: &Path| -> Result<PointCloud> {
                Ok(PointCloud::read_xyz(BufReader::new(
                    File::open(p).with_context(|| format!("opening {}", p.display()))?,
                ))?)
            };
            let (p, g) = (read(&pred)?, read(&gt)?);
            if p.is_empty() || g.is_empty() {
                bail!("both point files must contain points");
            }
            let mut stdout = std::io::stdout().lock();
            write_record(&mut stdout, "chamfer", &chamfer(&p, &g)?)?;
            stdout.flush()?;
        }
    }
    Ok(())
}
