//! End-to-end runs: load or synthesise data, split, compute difficulty,
//! correct records, pretrain embeddings, train and evaluate the predictor.
//! Also ablations over the variant grid, parameter sweeps and prefix
//! quantisation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpopt::{self, Stages};
use crate::ingest::{self, Dataset, IngestError};
use crate::predict::{self, EmbeddingTable};
use crate::pretrain::{self, EmbeddingSet, RelationGraphs};
use crate::seed;
use crate::stats::{self, DifficultyTable};
use crate::synth;

pub use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub be: bool,
    pub stages: Stages,
}

impl Variant {
    pub fn name(&self) -> String {
        let mut s = String::from("DKT");
        for (on, tag) in [(self.be, "+Be"), (self.stages.ov, "+ov"), (self.stages.su, "+su"), (self.stages.per, "+per")] {
            if on {
                s.push_str(tag);
            }
        }
        s
    }

    pub const fn new(be: bool, ov: bool, su: bool, per: bool) -> Self {
        Self { be, stages: Stages { ov, su, per } }
    }
}

/// The rows of the ablation table, in table order.
pub const ABLATION_VARIANTS: [Variant; 14] = [
    Variant::new(false, false, false, false),
    Variant::new(false, true, false, false),
    Variant::new(false, false, true, false),
    Variant::new(false, true, true, false),
    Variant::new(false, true, false, true),
    Variant::new(false, false, true, true),
    Variant::new(false, true, true, true),
    Variant::new(true, false, false, false),
    Variant::new(true, true, false, false),
    Variant::new(true, false, true, false),
    Variant::new(true, true, true, false),
    Variant::new(true, true, false, true),
    Variant::new(true, false, true, true),
    Variant::new(true, true, true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub acc: f64,
    pub n_predictions: usize,
    pub variant_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_note: Option<String>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialise");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Split,
    Difficulty,
    Optimize,
    Pretrain,
    Train,
    Evaluate,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Difficulty => "difficulty",
            Stage::Optimize => "optimize",
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
    /// The stage could not find an input file.
    pub missing_input: bool,
}

impl StageError {
    pub fn new(stage: Stage, err: impl fmt::Display) -> Self {
        Self { stage, message: err.to_string(), missing_input: false }
    }

    pub fn missing(stage: Stage, path: &Path) -> Self {
        Self { stage, message: format!("input not found: {}", path.display()), missing_input: true }
    }

    pub fn exit_code(&self) -> i32 {
        if self.missing_input {
            2
        } else {
            1
        }
    }
}

type Result<T> = std::result::Result<T, StageError>;

/// Load the configured input, or generate the synthetic dataset when no
/// input is configured.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let Some(path) = &cfg.paths.input else {
        return Ok(synth::generate(&cfg.synth).0);
    };
    if !path.exists() {
        return Err(StageError::missing(Stage::Ingest, path));
    }
    let format = cfg.input_format().map_err(|e| StageError::new(Stage::Config, e))?;
    let ds = match format {
        Some(f) => ingest::parse_dataset(path, f),
        None => Dataset::from_json_file(path),
    };
    ds.map_err(|e| match e {
        IngestError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => StageError::missing(Stage::Ingest, path),
        e => StageError::new(Stage::Ingest, e),
    })
}

/// Train/test splits with difficulty computed on the training split and
/// attached to both.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub table: DifficultyTable,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate().map_err(|e| StageError::new(Stage::Config, e))?;
    let ds = load_dataset(cfg)?;
    let (mut train, mut test) =
        ingest::split_train_test(&ds, cfg.test_fraction, seed::derive(cfg.seed, "split")).map_err(|e| StageError::new(Stage::Split, e))?;
    let table = stats::compute_difficulty(&train);
    stats::apply_difficulty(&mut train, &table);
    stats::apply_difficulty(&mut test, &table);
    Ok(Prepared { train, test, table })
}

/// Pretrained embeddings together with the graphs they were trained on.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub embeddings: EmbeddingSet,
    pub graphs: RelationGraphs,
    pub losses: Vec<f64>,
}

impl Pretrained {
    pub fn table(&self) -> EmbeddingTable {
        EmbeddingTable::from_pretrained(&self.embeddings, &self.graphs)
    }
}

pub fn pretrain_embeddings(cfg: &RunConfig, train: &Dataset, table: &DifficultyTable) -> Result<Pretrained> {
    let graphs = pretrain::build_graphs(train);
    let attributes: Vec<f64> = (0..train.num_questions as u32).map(|q| table.difficulty(q)).collect();
    let params = pretrain::PretrainParams { seed: seed::derive(cfg.seed, "pretrain"), ..cfg.pretrain.clone() };
    let out = pretrain::train_embeddings(&graphs, &attributes, &params).map_err(|e| StageError::new(Stage::Pretrain, e))?;
    Ok(Pretrained { embeddings: out.embeddings, graphs, losses: out.losses })
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub train_opt: Dataset,
    pub test_opt: Dataset,
    pub corrections: Vec<dpopt::Correction>,
    pub model: predict::Model,
    pub train_losses: Vec<f64>,
}

fn optimise(cfg: &RunConfig, prep: &Prepared, data: &Dataset) -> (Dataset, Vec<dpopt::Correction>) {
    let stages = cfg.variant.variant().stages;
    if !stages.any_optimisation() || cfg.prefix == Some(0.0) {
        return (data.clone(), Vec::new());
    }
    dpopt::optimize_dataset(data, &prep.table, &cfg.dp_params(), &cfg.partition, stages, cfg.prefix)
}

/// Run from prepared splits, reusing `pretrained` when given.
pub fn run_prepared(cfg: &RunConfig, prep: &Prepared, pretrained: Option<&Pretrained>) -> Result<RunOutput> {
    let (train_opt, mut corrections) = optimise(cfg, prep, &prep.train);
    let (test_opt, test_corrections) = optimise(cfg, prep, &prep.test);
    corrections.extend(test_corrections);

    let owned;
    let pretrained = match (cfg.variant.be, pretrained) {
        (false, _) => None,
        (true, Some(p)) => Some(p),
        (true, None) => {
            owned = pretrain_embeddings(cfg, &prep.train, &prep.table)?;
            Some(&owned)
        }
    };
    let predictor = predict::PredictorParams { seed: seed::derive(cfg.seed, "predict"), ..cfg.predictor.clone() };
    let trained = predict::train_predictor(&train_opt, pretrained.map(Pretrained::table), &cfg.fusion_params(), &predictor)
        .map_err(|e| StageError::new(Stage::Train, e))?;
    let eval = predict::evaluate(&trained.model, &test_opt).map_err(|e| StageError::new(Stage::Evaluate, e))?;
    let metrics = Metrics {
        auc: eval.auc,
        acc: eval.acc,
        n_predictions: eval.n_predictions,
        variant_name: cfg.variant.variant().name(),
        auc_note: eval.auc_note,
    };
    log::info!("{}: auc {:?} acc {:.4} over {} predictions", metrics.variant_name, metrics.auc, metrics.acc, metrics.n_predictions);
    Ok(RunOutput {
        metrics,
        train_opt,
        test_opt,
        corrections,
        model: trained.model,
        train_losses: trained.losses,
    })
}

fn out_err(e: impl fmt::Display) -> StageError {
    StageError::new(Stage::Output, e)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| out_err(format!("{}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| out_err(format!("{}: {e}", path.display())))
}

/// Write the artifacts of one run under `dir`.
pub fn write_artifacts(dir: &Path, prep: &Prepared, out: &RunOutput, pretrained: Option<&Pretrained>) -> Result<()> {
    ensure_dir(dir)?;
    prep.table.write_csv(&dir.join("difficulty.csv")).map_err(out_err)?;
    out.train_opt.to_json_file(&dir.join("optimized_train.json")).map_err(out_err)?;
    out.test_opt.to_json_file(&dir.join("optimized_test.json")).map_err(out_err)?;
    dpopt::write_corrections_csv(&dir.join("corrections.csv"), &out.corrections).map_err(out_err)?;
    if let Some(p) = pretrained {
        p.embeddings.save(&dir.join("embeddings.bin")).map_err(out_err)?;
        pretrain::write_loss_csv(&p.losses, &dir.join("pretrain_loss.csv")).map_err(out_err)?;
    }
    out.model.save(&dir.join("model.bin")).map_err(out_err)?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in out.train_losses.iter().enumerate() {
        losses.push_str(&format!("{e},{l}\n"));
    }
    write_text(&dir.join("train_loss.csv"), &losses)?;
    write_text(&dir.join("metrics.json"), &out.metrics.to_json())
}

/// One full run. Artifacts go to `cfg.paths.out_dir` when set.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Metrics> {
    let prep = prepare(cfg)?;
    let pretrained = if cfg.variant.be {
        Some(pretrain_embeddings(cfg, &prep.train, &prep.table)?)
    } else {
        None
    };
    let out = run_prepared(cfg, &prep, pretrained.as_ref())?;
    if let Some(dir) = &cfg.paths.out_dir {
        write_artifacts(dir, &prep, &out, pretrained.as_ref())?;
    }
    Ok(out.metrics)
}

fn metrics_csv(header: &str, rows: &[(String, &Metrics)]) -> String {
    let mut s = format!("{header},auc,acc,n_predictions\n");
    for (key, m) in rows {
        let auc = m.auc.map_or(String::new(), |a| a.to_string());
        s.push_str(&format!("{key},{auc},{},{}\n", m.acc, m.n_predictions));
    }
    s
}

/// Run every ablation variant on one split. Embeddings are trained once.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<Metrics>> {
    ablate_variants(cfg, &ABLATION_VARIANTS)
}

pub fn ablate_variants(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<Metrics>> {
    let prep = prepare(cfg)?;
    let pretrained = if variants.iter().any(|v| v.be) {
        Some(pretrain_embeddings(cfg, &prep.train, &prep.table)?)
    } else {
        None
    };
    let mut all = Vec::with_capacity(variants.len());
    for v in variants {
        let mut c = cfg.clone();
        c.variant = crate::config::VariantFlags::from_variant(*v);
        all.push(run_prepared(&c, &prep, pretrained.as_ref())?.metrics);
    }
    if let Some(dir) = &cfg.paths.out_dir {
        ensure_dir(dir)?;
        let rows: Vec<(String, &Metrics)> = all.iter().map(|m| (m.variant_name.clone(), m)).collect();
        write_text(&dir.join("ablation.csv"), &metrics_csv("variant", &rows))?;
    }
    Ok(all)
}

pub const SWEEP_PARAMS: [&str; 11] = ["alpha", "h", "H", "e", "Lmax", "Y", "y", "gamma", "p", "lambda", "w"];

fn integral(name: &str, v: f64) -> Result<u32> {
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(StageError::new(Stage::Config, format!("{name} takes whole numbers, got {v}")));
    }
    Ok(v as u32)
}

/// Copy of `base` with one named parameter set to `value`.
pub fn with_param(base: &RunConfig, name: &str, value: f64) -> Result<RunConfig> {
    let mut c = base.clone();
    match name {
        "alpha" => c.coherence.alpha = value,
        "h" => c.coherence.lower = value,
        "H" => c.coherence.upper = value,
        "e" => c.continuity.min_gap = integral(name, value)?,
        "Lmax" => c.continuity.max_gap = integral(name, value)?,
        "Y" => c.continuity.excellent = value,
        "y" => c.continuity.poor = value,
        "gamma" => c.dp.gamma = value,
        "p" => c.partition.p = integral(name, value)? as usize,
        "lambda" => c.pretrain.lambda = value,
        "w" => c.fusion.w = value,
        other => {
            return Err(StageError::new(
                Stage::Config,
                format!("unknown sweep parameter {other:?}; expected one of {}", SWEEP_PARAMS.join(", ")),
            ))
        }
    }
    c.validate().map_err(|e| StageError::new(Stage::Config, e))?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: Metrics,
}

/// One full run per value with the same seed, sorted by value.
pub fn sweep(base: &RunConfig, name: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(StageError::new(Stage::Config, "sweep needs at least one value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let configs = sorted.iter().map(|&v| with_param(base, name, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(sorted.len());
    for (v, mut c) in sorted.into_iter().zip(configs) {
        c.paths.out_dir = None;
        rows.push(SweepRow { value: v, metrics: run_pipeline(&c)? });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,auc,acc\n");
    for r in rows {
        let auc = r.metrics.auc.map_or(String::new(), |a| a.to_string());
        s.push_str(&format!("{},{auc},{}\n", r.value, r.metrics.acc));
    }
    s
}

/// Optimise only the leading `fraction` of each sequence, then train and
/// evaluate as usual. A fraction of 0 leaves the records untouched.
pub fn quantize_prefix(fraction: f64, cfg: &RunConfig) -> Result<Metrics> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(StageError::new(Stage::Config, format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let mut c = cfg.clone();
    c.prefix = Some(fraction);
    c.paths.out_dir = None;
    run_pipeline(&c)
}

/// Quantisation over several fractions sharing one split and one set of embeddings.
pub fn quantize_all(cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<(f64, Metrics)>> {
    let prep = prepare(cfg)?;
    let pretrained = if cfg.variant.be {
        Some(pretrain_embeddings(cfg, &prep.train, &prep.table)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(StageError::new(Stage::Config, format!("fraction must lie in [0, 1], got {f}")));
        }
        let mut c = cfg.clone();
        c.prefix = Some(f);
        out.push((f, run_prepared(&c, &prep, pretrained.as_ref())?.metrics));
    }
    if let Some(dir) = &cfg.paths.out_dir {
        ensure_dir(dir)?;
        let rows: Vec<(String, &Metrics)> = out.iter().map(|(f, m)| (f.to_string(), m)).collect();
        write_text(&dir.join("quantize.csv"), &metrics_csv("fraction", &rows))?;
    }
    Ok(out)
}
