use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthpatch::config::{load_config, RunConfig};
use depthpatch::dataset::Split;
use depthpatch::kitti::{default_class_map, parse_class_map};
use depthpatch::run::{self, EvaluateArgs, ExperimentArgs};
use depthpatch::AppResult;
use depthpatch_core::experiment::ExperimentKind;
use depthpatch_core::metrics::{EvalConfig, EvalTransforms};
use depthpatch_core::model::{SceneParams, ToyTrainConfig};

/// Adversarial patches against monocular depth estimation.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
/// failure. The common flags (config, model, dataset, seed, out, log) also
/// read DEPTHPATCH_* variables.
#[derive(Parser)]
#[command(name = "depthpatch", version)]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "DEPTHPATCH_LOG", default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground-truth disparity.
    GenScenes {
        #[arg(long, env = "DEPTHPATCH_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, env = "DEPTHPATCH_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Fit the toy depth network to a dataset's disparity maps.
    TrainModel {
        #[arg(long, env = "DEPTHPATCH_DATASET")]
        dataset: PathBuf,
        #[arg(long, env = "DEPTHPATCH_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, env = "DEPTHPATCH_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Optimize a patch; resumes from the latest checkpoint in --out.
    TrainPatch {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "DEPTHPATCH_OUT")]
        out: PathBuf,
    },
    /// Measure a patch's effect on a dataset.
    Evaluate {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long, env = "DEPTHPATCH_MODEL")]
        model: PathBuf,
        #[arg(long, env = "DEPTHPATCH_DATASET")]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write per-scene records as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// train or test (default: test when present).
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value_t = 0.2)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        target_class: u32,
        /// Sample placement transforms from this seed instead of identity.
        #[arg(long)]
        transform_seed: Option<u64>,
        /// Before/after image grid of the first N scenes.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        examples: usize,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Train one patch per loss combination.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "DEPTHPATCH_OUT")]
        out: PathBuf,
        /// Run up to N variants at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Train one patch per patch scale.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "DEPTHPATCH_OUT")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Convert KITTI label_2 files to the JSON annotation format.
    ConvertAnnotations {
        /// Directory of <id>.txt label files.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, env = "DEPTHPATCH_OUT")]
        out: PathBuf,
        /// NAME=ID, repeatable; replaces the default Car/Pedestrian/Cyclist map.
        #[arg(long = "class")]
        classes: Vec<String>,
    },
    /// Summarize a run or experiment directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Emit PNG charts next to report.md.
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long, env = "DEPTHPATCH_CONFIG")]
    config: Option<PathBuf>,
    /// Model directory (or a name under models/).
    #[arg(long, env = "DEPTHPATCH_MODEL")]
    model: PathBuf,
    #[arg(long, env = "DEPTHPATCH_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "DEPTHPATCH_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Collapse every placement transform to the identity.
    #[arg(long)]
    freeze_transforms: bool,
}

impl Common {
    fn run_config(&self) -> AppResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.attack.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.attack.epochs = e;
        }
        if self.freeze_transforms {
            cfg.freeze_transforms();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn model(&self) -> PathBuf {
        run::resolve_model(&self.model)
    }
}

fn experiment(kind: ExperimentKind, common: &Common, out: &Path, scales: Vec<f64>, workers: usize) -> AppResult<()> {
    let table = run::experiment(&ExperimentArgs {
        kind,
        config: common.run_config()?,
        scales,
        model: &common.model(),
        dataset: &common.dataset,
        out,
        workers,
    })?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn dispatch(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::GenScenes { out, train, test, seed } => {
            run::gen_scenes(&out, train, test, seed, &SceneParams::default())?;
            println!("wrote {train} train and {test} test scenes to {}", out.display());
        }
        Command::TrainModel { dataset, out, epochs, seed } => {
            let cfg = ToyTrainConfig {
                epochs,
                seed,
                ..Default::default()
            };
            let m = run::train_model(&dataset, &out, &cfg)?;
            println!("model {} ({})", out.display(), m.parameter_checksum);
        }
        Command::TrainPatch { common, out } => {
            let cfg = common.run_config()?;
            let o = run::train_patch(&cfg, &common.model(), &common.dataset, &out)?;
            let a = o.eval.report.aggregate;
            println!(
                "epochs {} | E_d {:.4} R_a {:.4} MSE {:.5} over {} scenes",
                o.state.patch.epoch, a.e_d, a.r_a, a.mse, a.scenes
            );
        }
        Command::Evaluate {
            patch,
            model,
            dataset,
            report,
            csv,
            split,
            scale,
            target_class,
            transform_seed,
            grid,
            examples,
            parallel,
        } => {
            let transforms = match transform_seed {
                None => EvalTransforms::Identity,
                Some(seed) => EvalTransforms::Sampled {
                    seed,
                    ranges: Default::default(),
                },
            };
            let f = run::evaluate(&EvaluateArgs {
                patch: &patch,
                model: &run::resolve_model(&model),
                dataset: &dataset,
                split,
                report: &report,
                csv: csv.as_deref(),
                examples: grid.as_deref().map(|g| (g, examples)),
                workers: parallel,
                eval: EvalConfig {
                    patch_scale_factor: scale,
                    transforms,
                    ..Default::default()
                },
                target_class,
                detector: Default::default(),
            })?;
            let a = f.report.aggregate;
            println!("E_d {:.4} R_a {:.4} MSE {:.5} over {} scenes", a.e_d, a.r_a, a.mse, a.scenes);
        }
        Command::Ablate { common, out, parallel } => {
            experiment(ExperimentKind::Ablation, &common, &out, Vec::new(), parallel)?
        }
        Command::Sweep {
            common,
            out,
            scales,
            parallel,
        } => experiment(ExperimentKind::ScaleSweep, &common, &out, scales, parallel)?,
        Command::ConvertAnnotations { labels, out, classes } => {
            let map = if classes.is_empty() {
                default_class_map()
            } else {
                parse_class_map(&classes)?
            };
            let c = run::convert_annotations(&labels, &out, &map)?;
            println!("{} boxes from {} files", c.rows.len(), c.files);
        }
        Command::Report { run: dir, plot } => {
            for p in run::report(&dir, plot)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
