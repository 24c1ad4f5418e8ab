use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cat_cli::{
    cmd_attn_map, cmd_bench, cmd_eval, cmd_gen_data, cmd_train, config_for_checkpoint, CliError, Overrides, RunConfig,
    SeedTarget,
};
use cat_core::bench::AblationAxis;
use cat_core::cat::StreamMode;
use cat_core::data::SampleSplit;

#[derive(Parser)]
#[command(
    name = "cat",
    version,
    about = "Cross-attention one-shot detector on synthetic glyphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
}

impl From<SplitArg> for SampleSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Seen => SampleSplit::Seen,
            SplitArg::Unseen => SampleSplit::Unseen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "one_stream")]
    OneStream,
    #[value(name = "two_stream")]
    TwoStream,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Layers,
    #[value(name = "d_m")]
    DModel,
    Stream,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; the bundled desk config when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dataset seed for gen-data, model seed otherwise.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_name = "N")]
    layers: Option<usize>,
    /// Model width; the FFN width follows as 4x.
    #[arg(long, value_name = "N")]
    dm: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::OneStream => StreamMode::OneStream,
                ModeArg::TwoStream => StreamMode::TwoStream,
            }),
            layers: self.layers,
            d_model: self.dm,
        }
    }

    fn file_config(&self) -> Result<Option<RunConfig>, CliError> {
        self.config.as_deref().map(RunConfig::load).transpose()
    }

    fn resolve(&self, target: SeedTarget) -> Result<RunConfig, CliError> {
        let mut cfg = self.file_config()?.unwrap_or_else(RunConfig::desk);
        self.overrides().apply(&mut cfg, target)?;
        Ok(cfg)
    }

    /// Config for a trained checkpoint: `--config`, else the one saved beside it.
    fn resolve_for(&self, checkpoint: &std::path::Path) -> Result<RunConfig, CliError> {
        let mut cfg = config_for_checkpoint(checkpoint, self.file_config()?.as_ref())?;
        self.overrides().apply(&mut cfg, SeedTarget::Model)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark into a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the seen-class training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Continue from a checkpoint with optimizer state.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the seen or unseen split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "unseen")]
        split: SplitArg,
    },
    /// Export per-layer response maps and focus ratios.
    AttnMap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "unseen")]
        split: SplitArg,
        /// Sample id for the exported maps; the first of the split by default.
        #[arg(long)]
        sample: Option<String>,
    },
    /// Timing and ablation sweeps along one axis.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values; the standard sweep by default.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        /// Train and evaluate each value on this dataset; timing only without it.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.resolve(SeedTarget::Dataset)?;
            let s = cmd_gen_data(&cfg, &common.out, common.force)?;
            println!("{} samples, manifest sha256 {}", s.samples, s.manifest_sha256);
        }
        Command::Train { common, data, resume } => {
            let cfg = common.resolve(SeedTarget::Model)?;
            let s = cmd_train(&cfg, &data, &common.out, common.force, resume.as_deref())?;
            if let Some(last) = s.epochs.last() {
                println!("trained {} epochs, final loss {:.4}", last.epoch + 1, last.loss);
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
        } => {
            let cfg = common.resolve_for(&checkpoint)?;
            let s = cmd_eval(&cfg, &checkpoint, &data, split.into(), &common.out)?;
            for c in &s.report.per_class {
                println!("class {:2}: AP {:.4} AP50 {:.4}", c.class, c.ap, c.ap50);
            }
            println!(
                "{}: mean AP {:.4} AP50 {:.4}",
                s.split, s.report.mean_ap, s.report.mean_ap50
            );
            for n in &s.report.notes {
                println!("note: {n}");
            }
        }
        Command::AttnMap {
            common,
            data,
            checkpoint,
            split,
            sample,
        } => {
            let cfg = common.resolve_for(&checkpoint)?;
            let s = cmd_attn_map(&cfg, &checkpoint, &data, split.into(), sample.as_deref(), &common.out)?;
            println!(
                "{} maps for {}; focus improved on {}/{} samples ({:.1}%)",
                s.maps_written,
                s.maps_for,
                s.improved,
                s.evaluated,
                100.0 * s.improved_fraction
            );
        }
        Command::Bench {
            common,
            axis,
            values,
            data,
        } => {
            let cfg = common.resolve(SeedTarget::Model)?;
            let axis = match axis {
                AxisArg::Layers => AblationAxis::Layers,
                AxisArg::DModel => AblationAxis::DModel,
                AxisArg::Stream => AblationAxis::Stream,
            };
            let s = cmd_bench(&cfg, axis, values, data.as_deref(), &common.out, common.force)?;
            for r in &s.fps {
                println!(
                    "{}={}: {:.3} fps, {} params",
                    s.axis, r.value, r.report.fps, r.report.params
                );
            }
            for r in &s.ablation {
                println!(
                    "{}={} seed {} {}: AP {:.4} AP50 {:.4}",
                    r.axis, r.value, r.seed, r.split, r.ap, r.ap50
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
