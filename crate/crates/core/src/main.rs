//! `map` command-line tool: pretraining, fine-tuning, evaluation, mask
//! inspection, dataset generation, and ablation sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use map_pretrain::config::{keys_help, load_config, Mode, TrainConfig};
use map_pretrain::data::{synth_dataset, write_archive};
use map_pretrain::error::{MapError, Result};
use map_pretrain::masking::{build_mask_plan, build_visibility, DecoderStrategy, MaskStrategy};
use map_pretrain::trainer::{builtin_grid, finetune, pretrain, run_ablation_grid, Checkpoint, Trainer};

#[derive(Parser)]
#[command(
    name = "map",
    version,
    about = "Masked autoregressive pretraining for hybrid Mamba-Transformer backbones",
    after_help = keys_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file: key=value lines, `#` comments, optional [sections]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed (overrides the config's seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run masked autoregressive pretraining and write a checkpoint
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint output path
        #[arg(long, default_value = "map_pretrain.ckpt")]
        out: PathBuf,
        /// Per-epoch metrics CSV output path
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
    },
    /// Fine-tune a classifier, optionally from a pretraining checkpoint
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint to initialize the encoder from
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long, default_value = "map_finetune.ckpt")]
        out: PathBuf,
    },
    /// Report held-out accuracy of a fine-tuned checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print a mask plan's decoder visibility matrix
    MaskDump {
        #[command(flatten)]
        common: Common,
        /// Token grid as ROWSxCOLS, e.g. 8x8 (default: config geometry)
        #[arg(long)]
        grid: Option<String>,
        /// Masking ratio in [0,1] (default: config mask_ratio)
        #[arg(long)]
        ratio: Option<f64>,
        /// Mask plan strategy: random|sequential|diagonal
        #[arg(long)]
        mask_strategy: Option<MaskStrategy>,
        /// Decoder visibility strategy: ar|mae|local_mae|map
        #[arg(long, default_value = "map")]
        strategy: DecoderStrategy,
        /// Output format
        #[arg(long, default_value = "csv", value_parser = ["csv", "pbm"])]
        format: String,
        /// Write to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic labeled dataset archive
    MakeData {
        #[command(flatten)]
        common: Common,
        /// Archive output path
        #[arg(long)]
        out: PathBuf,
        /// Number of images (default: config dataset_size)
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run a named ablation grid and emit a results CSV
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grid name: decoder_mask|mask_strategy|mask_ratio|scan_order
        #[arg(long)]
        grid: String,
        /// Write the CSV to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn effective_config(common: &Common, mode: Mode) -> Result<TrainConfig> {
    let base = TrainConfig::default_for(mode);
    let mut cfg = match &common.config {
        Some(path) => load_config(path, base)?,
        None => base,
    };
    cfg.mode = mode;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, content)?,
        None => print!("{}", content),
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (m, n) = s
        .split_once('x')
        .ok_or_else(|| MapError::Usage(format!("grid `{}` is not ROWSxCOLS", s)))?;
    let rows = m
        .parse()
        .map_err(|_| MapError::Usage(format!("bad grid rows `{}`", m)))?;
    let cols = n
        .parse()
        .map_err(|_| MapError::Usage(format!("bad grid cols `{}`", n)))?;
    if rows == 0 || cols == 0 {
        return Err(MapError::Usage("grid dims must be positive".into()));
    }
    Ok((rows, cols))
}

fn run(cli: Cli) -> Result<()> {
    if std::env::var("MAP_DETERMINISTIC").as_deref() == Ok("1") {
        eprintln!("event=deterministic mode=forced");
    }
    match cli.command {
        Command::Pretrain {
            common,
            out,
            metrics,
        } => {
            let cfg = effective_config(&common, Mode::Pretrain)?;
            eprintln!(
                "event=start cmd=pretrain seed={} pattern={} ratio={}",
                cfg.seed, cfg.pattern, cfg.mask_ratio
            );
            let (trainer, outcome) = pretrain(&cfg)?;
            for (i, s) in outcome.epoch_stats.iter().enumerate() {
                eprintln!("event=epoch idx={} masked_mse={}", i, s.mean_loss);
            }
            std::fs::write(&metrics, &outcome.metrics_csv)?;
            trainer.save(&out)?;
            eprintln!(
                "event=done cmd=pretrain ckpt={} metrics={} skipped_steps={}",
                out.display(),
                metrics.display(),
                outcome.skipped
            );
            Ok(())
        }
        Command::Finetune { common, init, out } => {
            let cfg = effective_config(&common, Mode::Finetune)?;
            let ckpt = match &init {
                Some(p) => Some(Checkpoint::load(p)?),
                None => None,
            };
            eprintln!(
                "event=start cmd=finetune seed={} init={}",
                cfg.seed,
                init.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_else(|| "scratch".into())
            );
            let (trainer, outcome) = finetune(&cfg, ckpt.as_ref())?;
            for (i, l) in outcome.epoch_loss.iter().enumerate() {
                eprintln!("event=epoch idx={} loss={}", i, l);
            }
            trainer.save(&out)?;
            println!("accuracy={}", outcome.accuracy);
            eprintln!("event=done cmd=finetune ckpt={}", out.display());
            Ok(())
        }
        Command::Eval { common, ckpt } => {
            let mut snapshot = Checkpoint::load(&ckpt)?;
            if snapshot.config.mode != Mode::Finetune {
                return Err(MapError::Usage(
                    "eval requires a fine-tuned checkpoint".into(),
                ));
            }
            // --config/--seed may redirect evaluation data; architecture
            // fields must stay compatible with the stored tensors
            if common.config.is_some() || common.seed.is_some() {
                let mut cfg = match &common.config {
                    Some(path) => load_config(path, snapshot.config.clone())?,
                    None => snapshot.config.clone(),
                };
                if let Some(seed) = common.seed {
                    cfg.seed = seed;
                }
                snapshot.config = cfg;
            }
            let mut trainer = Trainer::resume(&snapshot)?;
            let acc = trainer.evaluate()?;
            println!("accuracy={}", acc);
            Ok(())
        }
        Command::MaskDump {
            common,
            grid,
            ratio,
            mask_strategy,
            strategy,
            format,
            out,
        } => {
            let cfg = effective_config(&common, Mode::Pretrain)?;
            let (rows, cols) = match &grid {
                Some(g) => parse_grid(g)?,
                None => {
                    let m = cfg.model_config()?;
                    (m.grid_rows(), m.grid_cols())
                }
            };
            let plan = build_mask_plan(
                rows,
                cols,
                ratio.unwrap_or(cfg.mask_ratio),
                mask_strategy.unwrap_or(cfg.mask_strategy),
                cfg.seed,
            )?;
            let vis = build_visibility(&plan, strategy, cfg.map_self_visible);
            let text = match format.as_str() {
                "pbm" => vis.to_pbm(),
                _ => vis.to_csv(),
            };
            eprintln!(
                "event=mask_dump grid={}x{} masked={} strategy={}",
                rows,
                cols,
                plan.total_masked(),
                strategy
            );
            emit(out.as_deref(), &text)
        }
        Command::MakeData { common, out, count } => {
            let cfg = effective_config(&common, Mode::Pretrain)?;
            let records = synth_dataset(
                cfg.seed,
                count.unwrap_or(cfg.dataset_size),
                cfg.num_classes,
                cfg.image_size,
                cfg.image_size,
            );
            write_archive(&out, &records)?;
            eprintln!(
                "event=make_data path={} count={} classes={}",
                out.display(),
                records.len(),
                cfg.num_classes
            );
            Ok(())
        }
        Command::Ablate { common, grid, out } => {
            let cfg = effective_config(&common, Mode::Pretrain)?;
            let cells = builtin_grid(&grid)?;
            eprintln!("event=ablate grid={} cells={}", grid, cells.len());
            let csv = run_ablation_grid(&cfg, &cells);
            emit(out.as_deref(), &csv)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version exit 0, genuine usage errors exit 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
