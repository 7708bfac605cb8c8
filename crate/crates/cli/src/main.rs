use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crdpkt::config::{RunConfig, VariantFlags};
use crdpkt::dpopt;
use crdpkt::ingest::{self, Dataset};
use crdpkt::pipeline::{self, Metrics, Stage, StageError};
use crdpkt::predict::{self, EmbeddingTable, Model};
use crdpkt::pretrain::{self, EmbeddingSet};
use crdpkt::seed;
use crdpkt::stats;
use crdpkt::synth;

#[derive(Parser, Debug)]
#[command(name = "crdpkt", version, about = "Correct student response records and evaluate knowledge tracing")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DetectorFlags {
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long = "h", global = true)]
    lower: Option<f64>,
    #[arg(long = "H", global = true)]
    upper: Option<f64>,
    #[arg(long = "e", global = true)]
    min_gap: Option<u32>,
    #[arg(long = "Lmax", global = true)]
    max_gap: Option<u32>,
    #[arg(long = "Y", global = true)]
    excellent: Option<f64>,
    #[arg(long = "y", global = true)]
    poor: Option<f64>,
}

#[derive(Args, Debug, Default, Clone, Copy)]
struct VariantArgs {
    /// Fuse pretrained embeddings.
    #[arg(long)]
    be: bool,
    /// Whole-sequence optimisation.
    #[arg(long)]
    ov: bool,
    /// Per-interval optimisation.
    #[arg(long)]
    su: bool,
    /// Interval-performance and continuity predicates.
    #[arg(long)]
    per: bool,
}

impl VariantArgs {
    fn any(&self) -> bool {
        self.be || self.ov || self.su || self.per
    }

    fn flags(&self) -> VariantFlags {
        VariantFlags { be: self.be, ov: self.ov, su: self.su, per: self.per }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an interaction log into the canonical dataset JSON.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "assist_csv")]
        format: String,
    },
    /// Per-question difficulty table of a dataset.
    Difficulty {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Correct a dataset's records.
    Optimize {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        variant: VariantArgs,
        /// Optimise only this leading fraction of each sequence.
        #[arg(long)]
        prefix: Option<f64>,
    },
    /// Train question and skill embeddings.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the response predictor.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Embeddings trained on the same dataset.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Evaluate a trained predictor.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Full pipeline: split, correct, pretrain, train and evaluate.
    Run {
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Every ablation variant on one split.
    Ablate,
    /// One full run per parameter value.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Generate a synthetic dataset and its latent responses.
    Synth,
    /// Optimise only leading fractions of each sequence.
    Quantize {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.3, 0.5, 0.7])]
        fractions: Vec<f64>,
        #[command(flatten)]
        variant: VariantArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<StageError>().map_or(1, StageError::exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(StageError::missing(Stage::Config, path).into());
            }
            RunConfig::load(path).map_err(|e| StageError::new(Stage::Config, e))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.paths.out_dir = Some(d.clone());
    }
    let f = &cli.detector;
    if let Some(v) = f.alpha {
        cfg.coherence.alpha = v;
    }
    if let Some(v) = f.lower {
        cfg.coherence.lower = v;
    }
    if let Some(v) = f.upper {
        cfg.coherence.upper = v;
    }
    if let Some(v) = f.min_gap {
        cfg.continuity.min_gap = v;
    }
    if let Some(v) = f.max_gap {
        cfg.continuity.max_gap = v;
    }
    if let Some(v) = f.excellent {
        cfg.continuity.excellent = v;
    }
    if let Some(v) = f.poor {
        cfg.continuity.poor = v;
    }
    cfg.validate().map_err(|e| StageError::new(Stage::Config, e))?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read_dataset(path: &Path, stage: Stage) -> Result<Dataset, StageError> {
    if !path.exists() {
        return Err(StageError::missing(stage, path));
    }
    Dataset::from_json_file(path).map_err(|e| StageError::new(stage, e))
}

fn require(path: &Path, stage: Stage) -> Result<(), StageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError::missing(stage, path))
    }
}

fn print_metrics(m: &Metrics) {
    print!("{}", m.to_json());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { input, format } => {
            require(&input, Stage::Ingest)?;
            let fmt: ingest::InputFormat = format.parse().map_err(|e| StageError::new(Stage::Ingest, e))?;
            let ds = ingest::parse_dataset(&input, fmt).map_err(|e| StageError::new(Stage::Ingest, e))?;
            let path = out_dir(&cfg)?.join("dataset.json");
            ds.to_json_file(&path).map_err(|e| StageError::new(Stage::Output, e))?;
            println!(
                "{} students, {} questions, {} skills, {} records ({} dropped) -> {}",
                ds.num_students(),
                ds.num_questions,
                ds.num_skills,
                ds.num_records,
                ds.dropped_count,
                path.display()
            );
        }
        Command::Difficulty { dataset } => {
            let ds = read_dataset(&dataset, Stage::Difficulty)?;
            let table = stats::compute_difficulty(&ds);
            let path = out_dir(&cfg)?.join("difficulty.csv");
            table.write_csv(&path).map_err(|e| StageError::new(Stage::Output, e))?;
            println!("{} questions -> {}", table.len(), path.display());
        }
        Command::Optimize { dataset, variant, prefix } => {
            let mut ds = read_dataset(&dataset, Stage::Optimize)?;
            if variant.any() {
                cfg.variant = variant.flags();
            }
            let stages = cfg.variant.variant().stages;
            let stages = if stages.any_optimisation() { stages } else { dpopt::Stages::ALL };
            let table = stats::compute_difficulty(&ds);
            stats::apply_difficulty(&mut ds, &table);
            let mut dp = cfg.dp_params();
            dp.performance = stages.per;
            let (opt, corrections) = dpopt::optimize_dataset(&ds, &table, &dp, &cfg.partition, stages, prefix.or(cfg.prefix));
            let dir = out_dir(&cfg)?;
            opt.to_json_file(&dir.join("optimized.json")).map_err(|e| StageError::new(Stage::Output, e))?;
            dpopt::write_corrections_csv(&dir.join("corrections.csv"), &corrections).map_err(|e| StageError::new(Stage::Output, e))?;
            println!("{} corrections -> {}", corrections.len(), dir.display());
        }
        Command::Pretrain { dataset } => {
            let ds = read_dataset(&dataset, Stage::Pretrain)?;
            let table = stats::compute_difficulty(&ds);
            let p = pipeline::pretrain_embeddings(&cfg, &ds, &table)?;
            let dir = out_dir(&cfg)?;
            p.embeddings.save(&dir.join("embeddings.bin")).map_err(|e| StageError::new(Stage::Output, e))?;
            pretrain::write_loss_csv(&p.losses, &dir.join("pretrain_loss.csv")).map_err(|e| StageError::new(Stage::Output, e))?;
            println!(
                "loss {:.4} -> {:.4} over {} epochs",
                p.losses.first().copied().unwrap_or(f64::NAN),
                p.losses.last().copied().unwrap_or(f64::NAN),
                p.losses.len()
            );
        }
        Command::Train { dataset, embeddings } => {
            let ds = read_dataset(&dataset, Stage::Train)?;
            let table = match &embeddings {
                Some(path) => {
                    require(path, Stage::Train)?;
                    let emb = EmbeddingSet::load(path).map_err(|e| StageError::new(Stage::Train, e))?;
                    let graphs = pretrain::build_graphs(&ds);
                    Some(EmbeddingTable::from_pretrained(&emb, &graphs))
                }
                None => None,
            };
            let fusion = predict::FusionParams { w: cfg.fusion.w, use_embeddings: table.is_some() };
            let params = predict::PredictorParams { seed: seed::derive(cfg.seed, "predict"), ..cfg.predictor.clone() };
            let out = predict::train_predictor(&ds, table, &fusion, &params).map_err(|e| StageError::new(Stage::Train, e))?;
            let path = out_dir(&cfg)?.join("model.bin");
            out.model.save(&path).map_err(|e| StageError::new(Stage::Output, e))?;
            println!("train bce per epoch: {:?} -> {}", out.losses, path.display());
        }
        Command::Eval { model, dataset } => {
            require(&model, Stage::Evaluate)?;
            let m = Model::load(&model).map_err(|e| StageError::new(Stage::Evaluate, e))?;
            let ds = read_dataset(&dataset, Stage::Evaluate)?;
            let e = predict::evaluate(&m, &ds).map_err(|e| StageError::new(Stage::Evaluate, e))?;
            let mut name = cfg.variant.variant();
            name.be = m.fusion.use_embeddings;
            let metrics = Metrics {
                auc: e.auc,
                acc: e.acc,
                n_predictions: e.n_predictions,
                variant_name: name.name(),
                auc_note: e.auc_note,
            };
            pipeline::write_text(&out_dir(&cfg)?.join("metrics.json"), &metrics.to_json())?;
            print_metrics(&metrics);
        }
        Command::Run { variant } => {
            if variant.any() {
                cfg.variant = variant.flags();
            }
            cfg.paths.out_dir = Some(out_dir(&cfg)?);
            print_metrics(&pipeline::run_pipeline(&cfg)?);
        }
        Command::Ablate => {
            cfg.paths.out_dir = Some(out_dir(&cfg)?);
            for m in pipeline::ablate(&cfg)? {
                println!("{:<20} auc {} acc {:.4}", m.variant_name, m.auc.map_or("n/a".into(), |a| format!("{a:.4}")), m.acc);
            }
        }
        Command::Sweep { param, values } => {
            let rows = pipeline::sweep(&cfg, &param, &values)?;
            let csv = pipeline::sweep_csv(&rows);
            pipeline::write_text(&out_dir(&cfg)?.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Synth => {
            let (ds, truth) = synth::generate(&cfg.synth);
            let dir = out_dir(&cfg)?;
            ds.to_json_file(&dir.join("dataset.json")).map_err(|e| StageError::new(Stage::Output, e))?;
            let latent = serde_json::to_string(&truth).context("serialising latent responses")?;
            pipeline::write_text(&dir.join("latent.json"), &latent)?;
            println!("{} students x {} interactions -> {}", ds.num_students(), cfg.synth.seq_len, dir.display());
        }
        Command::Quantize { fractions, variant } => {
            if variant.any() {
                cfg.variant = variant.flags();
            }
            cfg.paths.out_dir = Some(out_dir(&cfg)?);
            for (f, m) in pipeline::quantize_all(&cfg, &fractions)? {
                println!("{f:<5} auc {} acc {:.4}", m.auc.map_or("n/a".into(), |a| format!("{a:.4}")), m.acc);
            }
        }
    }
    Ok(())
}
