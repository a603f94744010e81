//! Command-line front end: `gen-data`, `train`, `eval`, `score-grid`,
//! `grad-check`. Configuration comes from a JSON document plus flag
//! overrides (flags win). Exit codes: 0 success, 2 config/input error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::beta::BetaMode;
use crate::checkpoint;
use crate::data::{embed, mix_scene, FrozenBackbone, GridMeta, GENERATOR_VERSION};
use crate::error::{Error, Result};
use crate::flow::ClassConditionalFlows;
use crate::grid::LabeledGrid;
use crate::io::{write_loss_csv, write_pgm};
use crate::loss::{LossConfig, OutMode};
use crate::metrics::{method_scores, write_metrics_csv, MetricsReport};
use crate::train::{
    grad_check_report, mix_seed, LossRow, ResidualHead, TrainConfig, Trainer, GRAD_CHECK_TERMS,
};

const EVAL_PHASE: u64 = 101;
const GRAD_CHECK_PHASE: u64 = 102;

/// Run configuration: the training knobs plus data/eval/output settings.
/// Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub outlier_fraction: f64,
    pub feature_dim: usize,
    pub use_backbone: bool,
    pub flow_blocks: usize,
    pub hidden_width: usize,
    pub steps_flow: usize,
    pub steps_buce: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_reg: f64,
    pub uce_scale: f64,
    pub out_mode: OutMode,
    pub out_enabled: bool,
    pub beta_mode: BetaMode,
    pub var_normalize: bool,
    pub cells_per_step: usize,
    pub prior_in: f64,
    pub update_flows_in_buce: bool,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            grid_height: t.grid_height,
            grid_width: t.grid_width,
            outlier_fraction: t.outlier_fraction,
            feature_dim: t.feature_dim,
            use_backbone: t.use_backbone,
            flow_blocks: t.flow_blocks,
            hidden_width: t.hidden_width,
            steps_flow: t.steps_flow,
            steps_buce: t.steps_buce,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            lambda1: t.loss.lambda1,
            lambda2: t.loss.lambda2,
            lambda_reg: t.loss.lambda_reg,
            uce_scale: t.loss.uce_scale,
            out_mode: t.loss.out_mode,
            out_enabled: t.loss.out_enabled,
            beta_mode: t.loss.beta_mode,
            var_normalize: t.loss.var_normalize,
            cells_per_step: t.cells_per_step,
            prior_in: t.prior_in,
            update_flows_in_buce: t.update_flows_in_buce,
            eval_scenes: 4,
            eval_seed: 1000,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps_flow: self.steps_flow,
            steps_buce: self.steps_buce,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            loss: LossConfig {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda_reg: self.lambda_reg,
                uce_scale: self.uce_scale,
                out_mode: self.out_mode,
                out_enabled: self.out_enabled,
                beta_mode: self.beta_mode,
                var_normalize: self.var_normalize,
            },
            seed: self.seed,
            grid_height: self.grid_height,
            grid_width: self.grid_width,
            outlier_fraction: self.outlier_fraction,
            cells_per_step: self.cells_per_step,
            feature_dim: self.feature_dim,
            use_backbone: self.use_backbone,
            flow_blocks: self.flow_blocks,
            hidden_width: self.hidden_width,
            prior_in: self.prior_in,
            update_flows_in_buce: self.update_flows_in_buce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.to_train_config().validate()?;
        if self.eval_scenes == 0 {
            return Err(Error::Config("eval_scenes must be positive".into()));
        }
        Ok(())
    }

    /// Held-out scene for evaluation index `s`, embedded like training data.
    pub fn eval_scene(&self, s: u64) -> Result<LabeledGrid> {
        let raw = mix_scene(
            self.grid_height,
            self.grid_width,
            self.outlier_fraction,
            mix_seed(self.eval_seed, EVAL_PHASE, s),
        )?;
        if self.use_backbone {
            let backbone = FrozenBackbone::new(self.seed, self.feature_dim)?;
            embed(&backbone, &raw)
        } else {
            Ok(raw)
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "fepn",
    version,
    about = "Flow-based Beta evidential OoD detection on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one labeled scene (CSV plus metadata sidecar).
    GenData,
    /// Density-fit the flows, then BUCE fine-tuning; writes a checkpoint and
    /// losses.csv.
    Train {
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score held-out scenes with all four methods; writes metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export per-method score maps (CSV + PGM) and the Beta field for one
    /// held-out scene.
    ScoreGrid {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare tape gradients with central differences on a small scene.
    GradCheck,
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Training { .. } | Error::Degenerate(_) => 3,
                _ => 2,
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;

    match cli.command {
        Command::GenData => cmd_gen_data(&config),
        Command::Train { resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(&config, &checkpoint),
        Command::ScoreGrid { checkpoint } => cmd_score_grid(&config, &checkpoint),
        Command::GradCheck => cmd_grad_check(&config),
    }
}

fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let raw = mix_scene(
        config.grid_height,
        config.grid_width,
        config.outlier_fraction,
        config.seed,
    )?;
    let grid = if config.use_backbone {
        let backbone = FrozenBackbone::new(config.seed, config.feature_dim)?;
        embed(&backbone, &raw)?
    } else {
        raw
    };

    let grid_path = config.out_dir.join("grid.csv");
    let mut f = fs::File::create(&grid_path)?;
    grid.write_csv(&mut f)?;

    let meta = GridMeta {
        seed: config.seed,
        outlier_fraction: config.outlier_fraction,
        feat_dim: grid.feat_dim(),
        height: grid.height(),
        width: grid.width(),
        generator_version: GENERATOR_VERSION,
    };
    let meta_path = config.out_dir.join("grid.meta.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    println!("wrote {} and {}", grid_path.display(), meta_path.display());
    Ok(())
}

fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let trainer = Trainer::new(config.to_train_config())?;
    let (init_flows, init_head) = match resume {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "resume checkpoint {} does not exist",
                    path.display()
                )));
            }
            let (flows, head) = checkpoint::load(path)?;
            if flows.dim() != trainer.config().flow_dim() {
                return Err(Error::Config(format!(
                    "checkpoint dimension {} does not match configured {}",
                    flows.dim(),
                    trainer.config().flow_dim()
                )));
            }
            (Some(flows), head)
        }
        None => (None, trainer.identity_head()?),
    };

    let (flows, flow_history) = trainer.fit_flows(init_flows)?;
    let (flows, head, buce_history) = trainer.fit_buce(flows, init_head)?;

    let mut rows: Vec<LossRow> = flow_history;
    let offset = rows.len();
    rows.extend(buce_history.into_iter().map(|mut r| {
        r.step += offset;
        r
    }));

    let ckpt_path = config.out_dir.join("checkpoint.fepn");
    checkpoint::save(&ckpt_path, &flows, &head)?;
    let loss_path = config.out_dir.join("losses.csv");
    write_loss_csv(fs::File::create(&loss_path)?, &rows)?;

    let last = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps (final loss {last:.6}); wrote {} and {}",
        rows.len(),
        ckpt_path.display(),
        loss_path.display()
    );
    Ok(())
}

/// Score `eval_scenes` held-out scenes with all four methods, pooling cells
/// across scenes, and rank each method against the OoD masks.
pub fn evaluate_reports(
    config: &RunConfig,
    flows: &ClassConditionalFlows,
    head: &ResidualHead,
) -> Result<Vec<MetricsReport>> {
    let mut pooled: Vec<(&'static str, Vec<f64>)> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for s in 0..config.eval_scenes {
        let grid = config.eval_scene(s as u64)?;
        labels.extend_from_slice(grid.mask().cells());
        let scored = method_scores(flows, head, &grid, config.beta_mode)?;
        if pooled.is_empty() {
            pooled = scored
                .into_iter()
                .map(|(name, f)| (name, f.cells().to_vec()))
                .collect();
        } else {
            for ((_, acc), (_, f)) in pooled.iter_mut().zip(scored) {
                acc.extend_from_slice(f.cells());
            }
        }
    }
    pooled
        .iter()
        .map(|(name, scores)| MetricsReport::from_slices(name, scores, &labels))
        .collect()
}

fn load_matching_checkpoint(
    config: &RunConfig,
    ckpt: &Path,
) -> Result<(ClassConditionalFlows, ResidualHead)> {
    let (flows, head) = checkpoint::load(ckpt)?;
    let expect_dim = config.to_train_config().flow_dim();
    if flows.dim() != expect_dim {
        return Err(Error::Config(format!(
            "checkpoint dimension {} does not match configured {}",
            flows.dim(),
            expect_dim
        )));
    }
    Ok((flows, head))
}

fn cmd_eval(config: &RunConfig, ckpt: &Path) -> Result<()> {
    let (flows, head) = load_matching_checkpoint(config, ckpt)?;
    let reports = evaluate_reports(config, &flows, &head)?;
    let path = config.out_dir.join("metrics.csv");
    write_metrics_csv(fs::File::create(&path)?, &reports)?;
    for r in &reports {
        println!(
            "{:<13} fpr95 {:.4}  auroc {:.4}  auprc {:.4}",
            r.method, r.fpr95, r.auroc, r.auprc
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_score_grid(config: &RunConfig, ckpt: &Path) -> Result<()> {
    let (flows, head) = load_matching_checkpoint(config, ckpt)?;
    let grid = config.eval_scene(0)?;
    let scored = method_scores(&flows, &head, &grid, config.beta_mode)?;
    for (name, field) in &scored {
        let csv_path = config.out_dir.join(format!("scores_{name}.csv"));
        field.write_csv(fs::File::create(&csv_path)?)?;
        let pgm_path = config.out_dir.join(format!("score_{name}.pgm"));
        write_pgm(fs::File::create(&pgm_path)?, field)?;
        println!("wrote {} and {}", csv_path.display(), pgm_path.display());
    }
    let field = flows.beta_field_from_flows(&grid, config.beta_mode)?;
    let beta_path = config.out_dir.join("beta_field.csv");
    field.write_csv(fs::File::create(&beta_path)?)?;
    println!("wrote {}", beta_path.display());
    Ok(())
}

fn cmd_grad_check(config: &RunConfig) -> Result<()> {
    let train_cfg = TrainConfig {
        grid_height: 8,
        grid_width: 8,
        ..config.to_train_config()
    };
    let trainer = Trainer::new(train_cfg)?;
    let flows = trainer.identity_flows()?;
    let head = trainer.identity_head()?;
    let grid = trainer.scene(GRAD_CHECK_PHASE, 0)?;

    let report = grad_check_report(&flows, &head, &grid, &trainer.config().loss, 1e-5)?;
    let mut worst = 0.0f64;
    for ((name, _), (_, err)) in GRAD_CHECK_TERMS.iter().zip(report) {
        println!("{name:<6} max relative gradient error {err:.3e}");
        worst = worst.max(err);
    }
    if worst > 1e-4 {
        return Err(Error::Training {
            step: 0,
            reason: format!("gradient check failed: max relative error {worst:.3e}"),
        });
    }
    println!("gradient check passed (max {worst:.3e} <= 1e-4)");
    Ok(())
}
