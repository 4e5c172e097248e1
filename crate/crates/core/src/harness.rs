//! Experiment harness: plain-text configs, the variant x fraction accuracy
//! matrix with per-rotation alpha selection, the speed benchmark, the
//! out-of-domain transfer run, and deterministic report emission.
//!
//! Every run is keyed by (dataset, variant, fraction, rotation); completed
//! keys recorded in raw.csv are skipped on re-invocation, so an interrupted
//! matrix resumes where it stopped. Aggregates are always recomputed from
//! the raw rows at emission time and never stored.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::data::{
    build_vocab, corpus_stats, encode_labeled, load_pretrained_vectors, load_tsv_dataset,
    make_splits, prepare_rotation, synth_generate, Corpus, CorpusStats, SplitPlan, SynthSpec,
    Vocabulary, ROTATIONS,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::VariantConfig;
use crate::parallel;
use crate::rng::{derive, Domain};
use crate::scalar::Scalar;
use crate::stochastic::AnnealSchedule;
use crate::training::{
    accuracy_of, mean_std, time_iterations, welch_t_test, PreparedData, RunReport, TrainConfig,
    Trainer,
};
use crate::verify::{run_suite, Suite, SuiteReport};

/// Ratio band measured in full-scale training on the original corpora.
/// Reported alongside desk-scale results for context, never asserted.
pub const FULL_SCALE_RATIO_BAND: (f64, f64) = (0.742, 0.867);

/// Significance level for the markers in emitted tables.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Variant anchoring the significance tests in accuracy tables.
pub const BASELINE_VARIANT: &str = "SSVAE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    Tsv {
        labeled: PathBuf,
        unlabeled: Option<PathBuf>,
        test: PathBuf,
    },
}

/// Everything a harness command needs, assembled from a key=value config
/// file plus command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_name: String,
    pub dataset: DatasetSource,
    pub variants: Vec<String>,
    pub alpha_grid: Vec<f64>,
    pub fractions: Vec<f64>,
    pub rotations: usize,
    pub seed: u64,
    pub outdir: PathBuf,
    pub precision: Precision,
    /// Pretrained vector file; scratch initialization when absent.
    pub vectors: Option<PathBuf>,
    pub min_count: u64,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub z_dim: usize,
    pub dec_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub anneal: AnnealSchedule,
    pub tau: f64,
    pub workers: Option<usize>,
    pub bench_iterations: usize,
    /// Blend toward uniform for the synthetic out-of-domain target.
    pub ood_blend: f64,
    /// Labeled test TSV for out-of-domain evaluation of a TSV source.
    pub ood_target: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// Desk-scale synthetic defaults. Dims are sized so a full matrix run
    /// finishes in minutes; the protocol (splits, schedule, annealing
    /// shape) is the full-scale one.
    fn default() -> Self {
        ExperimentConfig {
            dataset_name: "synthetic".into(),
            dataset: DatasetSource::Synthetic(
                SynthSpec::disjoint_dominant(4, 8, 0.9, 4, 12, 200, 5000, 2000, 42)
                    .expect("static spec"),
            ),
            variants: crate::objectives::VARIANT_NAMES.iter().map(|s| s.to_string()).collect(),
            alpha_grid: vec![1.0, 0.1, 0.01, 0.001],
            fractions: vec![1.0],
            rotations: ROTATIONS,
            seed: 42,
            outdir: PathBuf::from("runs"),
            precision: Precision::F64,
            vectors: None,
            min_count: 1,
            embed_dim: 32,
            enc_hidden: 32,
            z_dim: 8,
            dec_hidden: 64,
            max_len: 40,
            dropout: 0.5,
            batch_size: 32,
            max_epochs: 30,
            lr: crate::training::DEFAULT_LR,
            anneal: AnnealSchedule { flat_steps: 60, ramp_steps: 60 },
            tau: 0.5,
            workers: None,
            bench_iterations: 200,
            ood_blend: 0.5,
            ood_target: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_num::<f64>(key, v))
        .collect()
}

impl ExperimentConfig {
    /// Apply one key=value setting. Unknown keys are rejected so typos in
    /// config files fail loudly.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => self.dataset_name = v.into(),
            "dataset" => match v {
                "synthetic" => {
                    if !matches!(self.dataset, DatasetSource::Synthetic(_)) {
                        self.dataset = DatasetSource::Synthetic(default_synth_spec());
                    }
                }
                "tsv" => {
                    self.dataset = DatasetSource::Tsv {
                        labeled: PathBuf::new(),
                        unlabeled: None,
                        test: PathBuf::new(),
                    }
                }
                other => {
                    return Err(Error::config(format!(
                        "dataset: `{other}` is not synthetic|tsv"
                    )))
                }
            },
            "labeled_path" | "unlabeled_path" | "test_path" => {
                let DatasetSource::Tsv { labeled, unlabeled, test } = &mut self.dataset else {
                    return Err(Error::config(format!("{key} requires dataset=tsv")));
                };
                match key {
                    "labeled_path" => *labeled = v.into(),
                    "unlabeled_path" => *unlabeled = Some(v.into()),
                    _ => *test = v.into(),
                }
            }
            "variants" => {
                self.variants = v
                    .split(',')
                    .map(|name| Ok(VariantConfig::from_name(name.trim(), 1.0)?.name().to_string()))
                    .collect::<Result<_>>()?
            }
            "alphas" => self.alpha_grid = parse_list(key, v)?,
            "fractions" => self.fractions = parse_list(key, v)?,
            "rotations" => self.rotations = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "outdir" => self.outdir = v.into(),
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => return Err(Error::config(format!("precision: `{other}`"))),
                }
            }
            "vectors" => self.vectors = Some(v.into()),
            "min_count" => self.min_count = parse_num(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "enc_hidden" => self.enc_hidden = parse_num(key, v)?,
            "z_dim" => self.z_dim = parse_num(key, v)?,
            "dec_hidden" => self.dec_hidden = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "anneal_flat" => self.anneal.flat_steps = parse_num(key, v)?,
            "anneal_ramp" => self.anneal.ramp_steps = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "workers" => self.workers = Some(parse_num(key, v)?),
            "bench_iterations" => self.bench_iterations = parse_num(key, v)?,
            "ood_blend" => self.ood_blend = parse_num(key, v)?,
            "ood_target" => self.ood_target = Some(v.into()),
            _ if is_synth_key(key) => {
                self.apply_synth(&[(key.to_string(), v.to_string())])?;
            }
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply a batch of `synth_*` keys in one rebuild, so settings like a
    /// raised `synth_min_len` paired with a raised `synth_max_len` never
    /// trip validation against a half-updated spec.
    fn apply_synth(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let DatasetSource::Synthetic(spec) = &mut self.dataset else {
            return Err(Error::config(format!(
                "{} requires dataset=synthetic",
                pairs[0].0
            )));
        };
        *spec = rebuild_synth(spec, pairs)?;
        Ok(())
    }

    /// Read a plain-text config file (`key = value` lines, `#` comments)
    /// and apply overrides on top. Either source may be empty. `synth_*`
    /// keys accumulate and rebuild the spec once, after everything else.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut synth: Vec<(String, String)> = Vec::new();
        let mut stage = |cfg: &mut Self, key: &str, value: &str| -> Result<()> {
            if is_synth_key(key) {
                synth.push((key.to_string(), value.to_string()));
                Ok(())
            } else {
                cfg.apply(key, value)
            }
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim_end_matches('\r').trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: "expected `key = value`".into(),
                })?;
                stage(&mut cfg, key.trim(), value)?;
            }
        }
        for (key, value) in overrides {
            stage(&mut cfg, key, value)?;
        }
        cfg.apply_synth(&synth)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reject bad grids and missing files before any run starts.
    pub fn validate(&self) -> Result<()> {
        if self.dataset_name.is_empty() || self.dataset_name.contains(',') {
            return Err(Error::config("dataset name must be nonempty and comma-free"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variant list is empty"));
        }
        for name in &self.variants {
            VariantConfig::from_name(name, 1.0)?;
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::config("alpha grid must be nonempty and positive"));
        }
        if self.fractions.is_empty()
            || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::config("fractions must lie in (0, 1]"));
        }
        if self.rotations == 0 || self.rotations > ROTATIONS {
            return Err(Error::config(format!(
                "rotations must be in 1..={ROTATIONS}"
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("max_epochs and batch_size must be positive"));
        }
        match &self.dataset {
            DatasetSource::Synthetic(spec) => spec.validate()?,
            DatasetSource::Tsv { labeled, unlabeled, test } => {
                for path in [Some(labeled), unlabeled.as_ref(), Some(test)].into_iter().flatten() {
                    if !path.exists() {
                        return Err(Error::config(format!(
                            "dataset file {} does not exist",
                            path.display()
                        )));
                    }
                }
            }
        }
        for path in [self.vectors.as_ref(), self.ood_target.as_ref()].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    fn model_config(&self, vocab_size: usize, n_classes: usize, drop_z: bool) -> ModelConfig {
        let mut model = ModelConfig::new(vocab_size, n_classes);
        model.embed_dim = self.embed_dim;
        model.enc_hidden = self.enc_hidden;
        model.z_dim = self.z_dim;
        model.dec_hidden = self.dec_hidden;
        model.max_len = self.max_len;
        model.dropout = self.dropout;
        model.drop_z = drop_z;
        model
    }

    fn variant(&self, name: &str, alpha: f64) -> Result<VariantConfig> {
        let mut v = VariantConfig::from_name(name, alpha)?;
        v.anneal = self.anneal;
        v.tau = self.tau;
        Ok(v)
    }
}

fn default_synth_spec() -> SynthSpec {
    match ExperimentConfig::default().dataset {
        DatasetSource::Synthetic(spec) => spec,
        DatasetSource::Tsv { .. } => unreachable!("default is synthetic"),
    }
}

fn is_synth_key(key: &str) -> bool {
    matches!(
        key,
        "synth_classes"
            | "synth_block"
            | "synth_dominant"
            | "synth_min_len"
            | "synth_max_len"
            | "synth_labeled"
            | "synth_unlabeled"
            | "synth_test"
    )
}

/// Fold `synth_*` edits into the spec's constructor parameters and rebuild
/// through the constructor, so distributions re-derive and validate once.
fn rebuild_synth(spec: &SynthSpec, pairs: &[(String, String)]) -> Result<SynthSpec> {
    let mut classes = spec.classes;
    let mut block = spec.vocab / (spec.classes + 1);
    let mut dominant: f64 = spec.class_dist[0][0] * block as f64;
    let mut min_len = spec.min_len;
    let mut max_len = spec.max_len;
    let mut labeled = spec.labeled_rows;
    let mut unlabeled = spec.unlabeled_rows;
    let mut test = spec.test_rows;
    for (key, value) in pairs {
        match key.as_str() {
            "synth_classes" => classes = parse_num(key, value)?,
            "synth_block" => block = parse_num(key, value)?,
            "synth_dominant" => dominant = parse_num(key, value)?,
            "synth_min_len" => min_len = parse_num(key, value)?,
            "synth_max_len" => max_len = parse_num(key, value)?,
            "synth_labeled" => labeled = parse_num(key, value)?,
            "synth_unlabeled" => unlabeled = parse_num(key, value)?,
            "synth_test" => test = parse_num(key, value)?,
            other => return Err(Error::config(format!("unknown synth key `{other}`"))),
        }
    }
    SynthSpec::disjoint_dominant(
        classes, block, dominant, min_len, max_len, labeled, unlabeled, test, spec.seed,
    )
}

/// Corpora, vocabulary, and the split plan shared by every cell of a run.
pub struct MaterializedData {
    pub labeled: Corpus,
    pub unlabeled: Corpus,
    pub test: Corpus,
    pub vocab: Vocabulary,
    pub plan: SplitPlan,
    pub n_classes: usize,
}

pub fn materialize(cfg: &ExperimentConfig) -> Result<MaterializedData> {
    let (labeled, unlabeled, test) = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => synth_generate(spec)?,
        DatasetSource::Tsv { labeled, unlabeled, test } => {
            let l = load_tsv_dataset(labeled)?;
            let u = match unlabeled {
                Some(path) => load_tsv_dataset(path)?,
                None => Corpus::new(crate::data::Provenance::Unlabeled),
            };
            let t = load_tsv_dataset(test)?;
            (l, u, t)
        }
    };
    if !labeled.is_labeled() || labeled.classes.is_empty() {
        return Err(Error::config("training corpus must be fully labeled"));
    }
    if test.classes.len() != labeled.classes.len() {
        return Err(Error::config(format!(
            "class count mismatch: train {} vs test {}",
            labeled.classes.len(),
            test.classes.len()
        )));
    }
    let vocab = build_vocab(&[&labeled, &unlabeled], cfg.min_count);
    let plan = make_splits(&labeled, &unlabeled, cfg.seed)?;
    let n_classes = labeled.classes.len();
    Ok(MaterializedData {
        labeled,
        unlabeled,
        test,
        vocab,
        plan,
        n_classes,
    })
}

// ---- matrix ----------------------------------------------------------------------------

/// One raw result row; the unit of resumability.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub dataset: String,
    pub variant: String,
    pub fraction: f64,
    pub rotation: usize,
    pub alpha: f64,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub test_accuracy: f64,
    pub parameter_count: usize,
    pub mean_step_ms: f64,
    pub std_step_ms: f64,
    pub skipped: u64,
    /// "ok" or the failure message with commas stripped.
    pub status: String,
}

pub const RAW_HEADER: &str = "dataset,variant,fraction,rotation,alpha,seed,epochs,best_epoch,\
best_dev,test_accuracy,parameter_count,mean_step_ms,std_step_ms,skipped,status";

impl MatrixRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn key(&self) -> (String, String, String, usize) {
        (
            self.dataset.clone(),
            self.variant.clone(),
            format!("{}", self.fraction),
            self.rotation,
        )
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.variant,
            self.fraction,
            self.rotation,
            self.alpha,
            self.seed,
            self.epochs,
            self.best_epoch,
            self.best_dev,
            self.test_accuracy,
            self.parameter_count,
            self.mean_step_ms,
            self.std_step_ms,
            self.skipped,
            self.status
        )
    }

    /// Variant names may contain commas (`SSVAE-{KL,z}`), so the 13 scalar
    /// fields split off from the right and the variant keeps the middle.
    pub fn parse_line(line: &str) -> Result<MatrixRow> {
        let (dataset, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::invalid("raw row has no fields"))?;
        let mut fields: Vec<&str> = rest.rsplitn(14, ',').collect();
        if fields.len() != 14 {
            return Err(Error::invalid(format!(
                "raw row has {} fields, expected 15",
                fields.len() + 1
            )));
        }
        fields.reverse();
        fields.insert(0, dataset);
        let num = |i: usize| parse_num::<f64>("raw", fields[i]);
        Ok(MatrixRow {
            dataset: fields[0].into(),
            variant: fields[1].into(),
            fraction: num(2)?,
            rotation: parse_num("raw", fields[3])?,
            alpha: num(4)?,
            seed: parse_num("raw", fields[5])?,
            epochs: parse_num("raw", fields[6])?,
            best_epoch: parse_num("raw", fields[7])?,
            best_dev: num(8)?,
            test_accuracy: num(9)?,
            parameter_count: parse_num("raw", fields[10])?,
            mean_step_ms: num(11)?,
            std_step_ms: num(12)?,
            skipped: parse_num("raw", fields[13])?,
            status: fields[14].into(),
        })
    }

    fn from_report(rotation: usize, report: &RunReport) -> MatrixRow {
        MatrixRow {
            dataset: report.dataset.clone(),
            variant: report.variant.clone(),
            fraction: report.labeled_fraction,
            rotation,
            alpha: report.alpha,
            seed: report.seed,
            epochs: report.dev_accuracy.len(),
            best_epoch: report.best_epoch,
            best_dev: report.best_dev_accuracy(),
            test_accuracy: report.test_accuracy,
            parameter_count: report.parameter_count,
            mean_step_ms: report.mean_step_ms,
            std_step_ms: report.std_step_ms,
            skipped: report.skipped_batches,
            status: "ok".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<MatrixRow>,
    /// Emission order for variants; aggregation is recomputed from rows.
    pub variant_order: Vec<String>,
}

pub fn load_raw(path: &Path) -> Result<Vec<MatrixRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MatrixRow::parse_line)
        .collect()
}

fn append_raw(file: &Mutex<fs::File>, row: &MatrixRow) {
    let mut guard = file.lock().expect("raw.csv writer");
    let _ = writeln!(guard, "{}", row.csv_line());
    let _ = guard.flush();
}

/// Train every alpha in the grid on one rotation and keep the run whose dev
/// accuracy wins; alpha is selected per rotation, never globally.
fn run_cell<F: Scalar>(
    cfg: &ExperimentConfig,
    data: &MaterializedData,
    variant_name: &str,
    fraction: f64,
    rotation: usize,
) -> MatrixRow {
    match run_cell_inner::<F>(cfg, data, variant_name, fraction, rotation) {
        Ok(row) => row,
        Err(e) => MatrixRow {
            dataset: cfg.dataset_name.clone(),
            variant: variant_name.into(),
            fraction,
            rotation,
            alpha: 0.0,
            seed: 0,
            epochs: 0,
            best_epoch: 0,
            best_dev: 0.0,
            test_accuracy: 0.0,
            parameter_count: 0,
            mean_step_ms: 0.0,
            std_step_ms: 0.0,
            skipped: 0,
            status: e.to_string().replace([',', '\n'], ";"),
        },
    }
}

fn cell_seed(cfg: &ExperimentConfig, rotation: usize, alpha_idx: usize) -> u64 {
    derive(
        cfg.seed,
        Domain::Harness,
        (rotation as u64) * 64 + alpha_idx as u64,
    )
}

fn run_cell_inner<F: Scalar>(
    cfg: &ExperimentConfig,
    data: &MaterializedData,
    variant_name: &str,
    fraction: f64,
    rotation: usize,
) -> Result<MatrixRow> {
    let probe = cfg.variant(variant_name, cfg.alpha_grid[0])?;
    let alphas: &[f64] = if probe.supervised_only {
        &cfg.alpha_grid[..1]
    } else {
        &cfg.alpha_grid
    };
    let prepared = prepare_rotation(
        &data.labeled,
        &data.unlabeled,
        &data.test,
        &data.plan,
        rotation,
        fraction,
        &data.vocab,
        cfg.max_len,
    )?;

    let mut best: Option<(RunReport, Vec<f64>)> = None;
    let mut last_err: Option<Error> = None;
    for (i, &alpha) in alphas.iter().enumerate() {
        let variant = cfg.variant(variant_name, alpha)?;
        let model = cfg.model_config(
            data.vocab.size(),
            data.n_classes,
            variant.drop_z || variant.supervised_only,
        );
        let mut tc = TrainConfig::new(variant, model, cell_seed(cfg, rotation, i));
        tc.batch_size = cfg.batch_size;
        tc.max_epochs = cfg.max_epochs;
        tc.lr = cfg.lr;
        tc.dataset = cfg.dataset_name.clone();
        tc.labeled_fraction = fraction;
        match run_single::<F>(cfg, &data.vocab, tc, prepared.clone()) {
            Ok((report, _)) => {
                let better = best
                    .as_ref()
                    .map(|(b, _)| report.best_dev_accuracy() > b.best_dev_accuracy())
                    .unwrap_or(true);
                if better {
                    let history = report.dev_accuracy.clone();
                    best = Some((report, history));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (report, history) =
        best.ok_or_else(|| last_err.unwrap_or_else(|| Error::config("empty alpha grid")))?;
    write_cell_log(cfg, variant_name, fraction, rotation, &history)?;
    Ok(MatrixRow::from_report(rotation, &report))
}

/// Train one configuration to completion, returning the report and the
/// best parameters (needed for out-of-domain evaluation). Pretrained
/// vectors overwrite the scratch embedding before the first step; the best
/// snapshot refreshes on epoch one, so the overwrite is never lost.
fn run_single<F: Scalar>(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    tc: TrainConfig,
    prepared: PreparedData,
) -> Result<(RunReport, ModelParams<F>)> {
    let max_epochs = tc.max_epochs;
    let mut trainer = Trainer::<F>::new(tc, prepared)?;
    if let Some(path) = &cfg.vectors {
        let loaded = load_pretrained_vectors::<F>(path, vocab, cfg.embed_dim, cfg.seed)?;
        trainer.params.embedding = loaded.table;
    }
    for _ in 0..max_epochs {
        if trainer.run_epoch()?.stop {
            break;
        }
    }
    let params = trainer.best_params().clone();
    Ok((trainer.into_report()?, params))
}

fn cell_log_path(
    cfg: &ExperimentConfig,
    variant: &str,
    fraction: f64,
    rotation: usize,
) -> PathBuf {
    let slug = variant.to_ascii_lowercase().replace(['{', '}'], "").replace(',', "-");
    cfg.outdir
        .join("logs")
        .join(format!("{}-{slug}-f{fraction}-r{rotation}.csv", cfg.dataset_name))
}

fn write_cell_log(
    cfg: &ExperimentConfig,
    variant: &str,
    fraction: f64,
    rotation: usize,
    dev_history: &[f64],
) -> Result<()> {
    let mut out = String::from("epoch,dev_accuracy\n");
    for (epoch, acc) in dev_history.iter().enumerate() {
        let _ = writeln!(out, "{},{}", epoch + 1, acc);
    }
    fs::write(cell_log_path(cfg, variant, fraction, rotation), out)?;
    Ok(())
}

/// Train the first configured variant once: rotation 0, first fraction,
/// first alpha. The quick interactive entry point.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunReport> {
    match cfg.precision {
        Precision::F64 => run_train_t::<f64>(cfg),
        Precision::F32 => run_train_t::<f32>(cfg),
    }
}

fn run_train_t<F: Scalar>(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = materialize(cfg)?;
    let fraction = cfg.fractions[0];
    let prepared = prepare_rotation(
        &data.labeled,
        &data.unlabeled,
        &data.test,
        &data.plan,
        0,
        fraction,
        &data.vocab,
        cfg.max_len,
    )?;
    let variant = cfg.variant(&cfg.variants[0], cfg.alpha_grid[0])?;
    let model = cfg.model_config(
        data.vocab.size(),
        data.n_classes,
        variant.drop_z || variant.supervised_only,
    );
    let mut tc = TrainConfig::new(variant, model, cell_seed(cfg, 0, 0));
    tc.batch_size = cfg.batch_size;
    tc.max_epochs = cfg.max_epochs;
    tc.lr = cfg.lr;
    tc.dataset = cfg.dataset_name.clone();
    tc.labeled_fraction = fraction;
    let (report, _) = run_single::<F>(cfg, &data.vocab, tc, prepared)?;
    Ok(report)
}

/// Run the full (variant, fraction, rotation) matrix, skipping cells whose
/// keys already appear in `<outdir>/raw.csv`. Failed cells are recorded and
/// the matrix continues.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    match cfg.precision {
        Precision::F64 => run_matrix_t::<f64>(cfg),
        Precision::F32 => run_matrix_t::<f32>(cfg),
    }
}

fn run_matrix_t<F: Scalar>(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    fs::create_dir_all(cfg.outdir.join("logs"))?;
    let raw_path = cfg.outdir.join("raw.csv");
    let existing = load_raw(&raw_path)?;
    let done: BTreeSet<_> = existing.iter().map(MatrixRow::key).collect();

    let data = materialize(cfg)?;
    let mut pending: Vec<(String, f64, usize)> = Vec::new();
    for &fraction in &cfg.fractions {
        for variant in &cfg.variants {
            for rotation in 0..cfg.rotations {
                let key = (
                    cfg.dataset_name.clone(),
                    variant.clone(),
                    format!("{fraction}"),
                    rotation,
                );
                if !done.contains(&key) {
                    pending.push((variant.clone(), fraction, rotation));
                }
            }
        }
    }

    let mut rows = existing;
    if !pending.is_empty() {
        if !raw_path.exists() {
            fs::write(&raw_path, format!("{RAW_HEADER}\n"))?;
        }
        let file = Mutex::new(fs::OpenOptions::new().append(true).open(&raw_path)?);
        let workers = parallel::resolve_workers(cfg.workers);
        let new_rows = parallel::map_indexed(pending.len(), workers, |i| {
            let (variant, fraction, rotation) = &pending[i];
            let row = run_cell::<F>(cfg, &data, variant, *fraction, *rotation);
            append_raw(&file, &row);
            row
        });
        rows.extend(new_rows);
    }

    sort_rows(&mut rows, &cfg.variants);
    let table = ResultsTable {
        rows,
        variant_order: cfg.variants.clone(),
    };
    emit_report(&table, &cfg.outdir)?;
    Ok(table)
}

fn variant_rank(order: &[String], name: &str) -> usize {
    order.iter().position(|v| v == name).unwrap_or(order.len())
}

fn sort_rows(rows: &mut [MatrixRow], order: &[String]) {
    rows.sort_by(|a, b| {
        a.fraction
            .partial_cmp(&b.fraction)
            .expect("finite fraction")
            .then(variant_rank(order, &a.variant).cmp(&variant_rank(order, &b.variant)))
            .then(a.rotation.cmp(&b.rotation))
    });
}

// ---- aggregation and emission ------------------------------------------------------------

/// One aggregate cell recomputed from raw rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub variant: String,
    pub fraction: f64,
    /// Test accuracies of successful rotations, rotation order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub failed: usize,
}

pub fn aggregate(table: &ResultsTable) -> Vec<CellSummary> {
    let mut fractions: Vec<f64> = table.rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    fractions.dedup();
    let mut variants: Vec<String> = table.variant_order.clone();
    for row in &table.rows {
        if !variants.contains(&row.variant) {
            variants.push(row.variant.clone());
        }
    }

    let mut cells = Vec::new();
    for &fraction in &fractions {
        for variant in &variants {
            let mut group: Vec<&MatrixRow> = table
                .rows
                .iter()
                .filter(|r| r.variant == *variant && r.fraction == fraction)
                .collect();
            if group.is_empty() {
                continue;
            }
            group.sort_by_key(|r| r.rotation);
            let accuracies: Vec<f64> =
                group.iter().filter(|r| r.ok()).map(|r| r.test_accuracy).collect();
            let failed = group.len() - accuracies.len();
            let (mean, std) = mean_std(&accuracies);
            cells.push(CellSummary {
                variant: variant.clone(),
                fraction,
                accuracies,
                mean,
                std,
                failed,
            });
        }
    }
    cells
}

fn fraction_label(f: f64) -> String {
    let pct = f * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}%", pct.round() as i64)
    } else {
        format!("{pct}%")
    }
}

fn cell_text(cell: &CellSummary, bold: bool, significant: bool) -> String {
    if cell.accuracies.is_empty() {
        return "failed".into();
    }
    let mut text = format!("{:.2}({:.2})", cell.mean * 100.0, cell.std * 100.0);
    if significant {
        text.push('*');
    }
    if bold {
        text = format!("**{text}**");
    }
    if cell.failed > 0 {
        let _ = write!(text, " [{} failed]", cell.failed);
    }
    text
}

/// Welch p-value against the baseline cell in the same column; None when
/// either side has fewer than two successful rotations.
fn baseline_p(cell: &CellSummary, cells: &[CellSummary]) -> Option<f64> {
    if cell.variant == BASELINE_VARIANT {
        return None;
    }
    let base = cells
        .iter()
        .find(|c| c.variant == BASELINE_VARIANT && c.fraction == cell.fraction)?;
    if cell.accuracies.len() < 2 || base.accuracies.len() < 2 {
        return None;
    }
    welch_t_test(&cell.accuracies, &base.accuracies).ok()
}

/// Write `table.csv` and `table.md` under `outdir`. Same table, same bytes:
/// everything is recomputed from the rows in a fixed order.
pub fn emit_report(table: &ResultsTable, outdir: &Path) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::invalid("emit_report on an empty table"));
    }
    fs::create_dir_all(outdir)?;
    let cells = aggregate(table);
    let dataset = &table.rows[0].dataset;

    let mut csv = String::from("dataset,variant,fraction,mean,std,runs,failed,p_vs_baseline\n");
    for cell in &cells {
        let p = baseline_p(cell, &cells);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            dataset,
            cell.variant,
            cell.fraction,
            cell.mean,
            cell.std,
            cell.accuracies.len(),
            cell.failed,
            p.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    fs::write(outdir.join("table.csv"), csv)?;

    let mut fractions: Vec<f64> = cells.iter().map(|c| c.fraction).collect();
    fractions.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    fractions.dedup();
    let mut variants: Vec<String> = Vec::new();
    for cell in &cells {
        if !variants.contains(&cell.variant) {
            variants.push(cell.variant.clone());
        }
    }

    let mut md = format!(
        "# {dataset}: test accuracy, mean(std)% over rotations\n\nBold marks the \
best mean per column; `*` marks p < {SIGNIFICANCE_LEVEL} vs {BASELINE_VARIANT} (Welch).\n\n"
    );
    md.push_str("| variant |");
    for &f in &fractions {
        let _ = write!(md, " {} |", fraction_label(f));
    }
    md.push('\n');
    md.push_str("|---|");
    md.push_str(&"---|".repeat(fractions.len()));
    md.push('\n');
    for variant in &variants {
        let _ = write!(md, "| {variant} |");
        for &f in &fractions {
            let cell = cells
                .iter()
                .find(|c| &c.variant == variant && c.fraction == f);
            match cell {
                None => md.push_str(" |"),
                Some(cell) => {
                    let best = cells
                        .iter()
                        .filter(|c| c.fraction == f && !c.accuracies.is_empty())
                        .map(|c| c.mean)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let bold = !cell.accuracies.is_empty() && cell.mean == best;
                    let significant = baseline_p(cell, &cells)
                        .map(|p| p < SIGNIFICANCE_LEVEL)
                        .unwrap_or(false);
                    let _ = write!(md, " {} |", cell_text(cell, bold, significant));
                }
            }
        }
        md.push('\n');
    }
    fs::write(outdir.join("table.md"), md)?;
    Ok(())
}

// ---- speed benchmark ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRow {
    pub variant: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub ratio: f64,
    pub parameter_count: usize,
    /// std/mean > 0.2: timing was noisy, likely background load.
    pub noisy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedReport {
    pub rows: Vec<SpeedRow>,
    pub iterations: usize,
}

/// Time every variant on identical batch streams, single-threaded, and
/// report ratios against the standard SSVAE row.
pub fn run_speed_bench(cfg: &ExperimentConfig) -> Result<SpeedReport> {
    match cfg.precision {
        Precision::F64 => run_speed_bench_t::<f64>(cfg),
        Precision::F32 => run_speed_bench_t::<f32>(cfg),
    }
}

fn run_speed_bench_t<F: Scalar>(cfg: &ExperimentConfig) -> Result<SpeedReport> {
    cfg.validate()?;
    if !cfg.variants.iter().any(|v| v == BASELINE_VARIANT) {
        return Err(Error::config(format!(
            "speed bench needs the {BASELINE_VARIANT} variant as its ratio anchor"
        )));
    }
    let data = materialize(cfg)?;
    let prepared = prepare_rotation(
        &data.labeled,
        &data.unlabeled,
        &data.test,
        &data.plan,
        0,
        1.0,
        &data.vocab,
        cfg.max_len,
    )?;

    let mut measured: Vec<(String, f64, f64, usize)> = Vec::new();
    for name in &cfg.variants {
        let variant = cfg.variant(name, cfg.alpha_grid[0])?;
        let model = cfg.model_config(
            data.vocab.size(),
            data.n_classes,
            variant.drop_z || variant.supervised_only,
        );
        let params = ModelParams::<F>::init(&model, cfg.seed)?.numel();
        let mut tc = TrainConfig::new(variant, model, cfg.seed);
        tc.batch_size = cfg.batch_size;
        tc.dataset = cfg.dataset_name.clone();
        let timing = time_iterations::<F>(&tc, &prepared, cfg.bench_iterations)?;
        measured.push((name.clone(), timing.mean_ms, timing.std_ms, params));
    }
    let baseline = measured
        .iter()
        .find(|(name, ..)| name == BASELINE_VARIANT)
        .map(|&(_, mean, ..)| mean)
        .expect("anchor checked above");
    let rows = measured
        .into_iter()
        .map(|(variant, mean_ms, std_ms, parameter_count)| SpeedRow {
            variant,
            ratio: mean_ms / baseline,
            noisy: std_ms / mean_ms > 0.2,
            mean_ms,
            std_ms,
            parameter_count,
        })
        .collect();
    Ok(SpeedReport {
        rows,
        iterations: cfg.bench_iterations,
    })
}

impl SpeedReport {
    pub fn emit(&self, outdir: &Path) -> Result<()> {
        fs::create_dir_all(outdir)?;
        let mut csv = String::from("variant,mean_ms,std_ms,ratio,parameter_count,noisy\n");
        for r in &self.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.variant, r.mean_ms, r.std_ms, r.ratio, r.parameter_count, r.noisy
            );
        }
        fs::write(outdir.join("table.csv"), &csv)?;

        let (lo, hi) = FULL_SCALE_RATIO_BAND;
        let mut md = format!(
            "# Iteration time, mean(std) ms over {} iterations\n\nRatios are relative to \
{BASELINE_VARIANT}. Full-scale reference band for the reduced variants: {lo}-{hi} \
(context only, not asserted at desk scale).\n\n",
            self.iterations
        );
        md.push_str("| variant | ms/iteration | ratio | parameters |\n|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                md,
                "| {} | {:.2}({:.2}){} | {:.3} | {} |",
                r.variant,
                r.mean_ms,
                r.std_ms,
                if r.noisy { " !" } else { "" },
                r.ratio,
                r.parameter_count
            );
        }
        if self.rows.iter().any(|r| r.noisy) {
            md.push_str("\n`!` timing std/mean above 0.2; rerun on an idle machine.\n");
        }
        fs::write(outdir.join("table.md"), md)?;
        Ok(())
    }
}

// ---- out-of-domain -----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OodRow {
    pub variant: String,
    pub rotation: usize,
    pub alpha: f64,
    pub in_domain: f64,
    pub out_domain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodReport {
    pub rows: Vec<OodRow>,
    pub variant_order: Vec<String>,
}

/// Train on the source domain with 100% labels and evaluate the best model
/// of each rotation on the target domain's test set.
pub fn run_ood(cfg: &ExperimentConfig) -> Result<OodReport> {
    match cfg.precision {
        Precision::F64 => run_ood_t::<f64>(cfg),
        Precision::F32 => run_ood_t::<f32>(cfg),
    }
}

fn target_test_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match (&cfg.dataset, &cfg.ood_target) {
        (_, Some(path)) => load_tsv_dataset(path),
        (DatasetSource::Synthetic(spec), None) => {
            let shifted = spec.shifted(cfg.ood_blend)?;
            Ok(synth_generate(&shifted)?.2)
        }
        (DatasetSource::Tsv { .. }, None) => Err(Error::config(
            "out-of-domain on a tsv dataset needs ood_target=<labeled test tsv>",
        )),
    }
}

fn run_ood_t<F: Scalar>(cfg: &ExperimentConfig) -> Result<OodReport> {
    cfg.validate()?;
    let data = materialize(cfg)?;
    let target = target_test_corpus(cfg)?;
    if target.classes.len() != data.n_classes {
        return Err(Error::config(format!(
            "class count mismatch: source {} vs target {}",
            data.n_classes,
            target.classes.len()
        )));
    }
    let target_rows = encode_labeled(&target, &data.vocab, cfg.max_len)?;

    let mut rows = Vec::new();
    for variant_name in &cfg.variants {
        let probe = cfg.variant(variant_name, cfg.alpha_grid[0])?;
        let alphas: &[f64] = if probe.supervised_only {
            &cfg.alpha_grid[..1]
        } else {
            &cfg.alpha_grid
        };
        for rotation in 0..cfg.rotations {
            let prepared = prepare_rotation(
                &data.labeled,
                &data.unlabeled,
                &data.test,
                &data.plan,
                rotation,
                1.0,
                &data.vocab,
                cfg.max_len,
            )?;
            let mut best: Option<(RunReport, ModelParams<F>, ModelConfig)> = None;
            for (i, &alpha) in alphas.iter().enumerate() {
                let variant = cfg.variant(variant_name, alpha)?;
                let model = cfg.model_config(
                    data.vocab.size(),
                    data.n_classes,
                    variant.drop_z || variant.supervised_only,
                );
                let mut tc = TrainConfig::new(variant, model.clone(), cell_seed(cfg, rotation, i));
                tc.batch_size = cfg.batch_size;
                tc.max_epochs = cfg.max_epochs;
                tc.lr = cfg.lr;
                tc.dataset = cfg.dataset_name.clone();
                let (report, params) = run_single::<F>(cfg, &data.vocab, tc, prepared.clone())?;
                let better = best
                    .as_ref()
                    .map(|(b, ..)| report.best_dev_accuracy() > b.best_dev_accuracy())
                    .unwrap_or(true);
                if better {
                    best = Some((report, params, model));
                }
            }
            let (report, params, model) = best.expect("alpha grid is nonempty");
            let out_domain = accuracy_of(&params, &model, &target_rows, cfg.batch_size)?;
            rows.push(OodRow {
                variant: variant_name.clone(),
                rotation,
                alpha: report.alpha,
                in_domain: report.test_accuracy,
                out_domain,
            });
        }
    }
    Ok(OodReport {
        rows,
        variant_order: cfg.variants.clone(),
    })
}

impl OodReport {
    /// Welch p-value of a variant's out-of-domain accuracies against the
    /// supervised baseline's.
    fn supervised_p(&self, variant: &str) -> Option<f64> {
        if variant == "Supervised" {
            return None;
        }
        let of = |name: &str| -> Vec<f64> {
            self.rows
                .iter()
                .filter(|r| r.variant == name)
                .map(|r| r.out_domain)
                .collect()
        };
        let ours = of(variant);
        let base = of("Supervised");
        if ours.len() < 2 || base.len() < 2 {
            return None;
        }
        welch_t_test(&ours, &base).ok()
    }

    pub fn emit(&self, outdir: &Path) -> Result<()> {
        fs::create_dir_all(outdir)?;
        let mut csv = String::from("variant,rotation,alpha,in_domain,out_domain\n");
        for r in &self.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.variant, r.rotation, r.alpha, r.in_domain, r.out_domain
            );
        }
        fs::write(outdir.join("raw.csv"), &csv)?;

        let mut md = String::from(
            "# Out-of-domain accuracy, mean(std)% over rotations\n\n`*` marks p < 0.05 vs \
Supervised (Welch).\n\n| variant | in-domain | out-of-domain |\n|---|---|---|\n",
        );
        let mut table_csv =
            String::from("variant,in_mean,in_std,out_mean,out_std,runs,p_vs_supervised\n");
        for variant in &self.variant_order {
            let group: Vec<&OodRow> = self.rows.iter().filter(|r| &r.variant == variant).collect();
            if group.is_empty() {
                continue;
            }
            let (in_mean, in_std) =
                mean_std(&group.iter().map(|r| r.in_domain).collect::<Vec<_>>());
            let (out_mean, out_std) =
                mean_std(&group.iter().map(|r| r.out_domain).collect::<Vec<_>>());
            let p = self.supervised_p(variant);
            let mark = p.map(|p| p < SIGNIFICANCE_LEVEL).unwrap_or(false);
            let _ = writeln!(
                md,
                "| {variant} | {:.2}({:.2}) | {:.2}({:.2}){} |",
                in_mean * 100.0,
                in_std * 100.0,
                out_mean * 100.0,
                out_std * 100.0,
                if mark { "*" } else { "" }
            );
            let _ = writeln!(
                table_csv,
                "{variant},{in_mean},{in_std},{out_mean},{out_std},{},{}",
                group.len(),
                p.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        fs::write(outdir.join("table.md"), md)?;
        fs::write(outdir.join("table.csv"), table_csv)?;
        Ok(())
    }
}

// ---- stats and verification ----------------------------------------------------------------

/// Corpus statistics for each split the config materializes.
pub fn dataset_stats(cfg: &ExperimentConfig) -> Result<Vec<(String, CorpusStats)>> {
    cfg.validate()?;
    let data = materialize(cfg)?;
    let mut out = vec![("labeled".to_string(), corpus_stats(&data.labeled)?)];
    if !data.unlabeled.is_empty() {
        out.push(("unlabeled".into(), corpus_stats(&data.unlabeled)?));
    }
    out.push(("test".into(), corpus_stats(&data.test)?));
    Ok(out)
}

/// Run a verification suite; 64-bit math is forced by construction.
pub fn run_verify(suite: &str) -> Result<SuiteReport> {
    run_suite(Suite::from_name(suite)?, None)
}

// ---- alpha sweep -----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub alpha: f64,
    pub dev_mean: f64,
    pub dev_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub runs: usize,
}

/// Dev/test accuracy per (variant, alpha) over the configured rotations at
/// the first configured fraction; the exploration behind alpha selection.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    match cfg.precision {
        Precision::F64 => run_sweep_t::<f64>(cfg),
        Precision::F32 => run_sweep_t::<f32>(cfg),
    }
}

fn run_sweep_t<F: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = materialize(cfg)?;
    let fraction = cfg.fractions[0];
    let mut out = Vec::new();
    for variant_name in &cfg.variants {
        let probe = cfg.variant(variant_name, cfg.alpha_grid[0])?;
        let alphas: &[f64] = if probe.supervised_only {
            &cfg.alpha_grid[..1]
        } else {
            &cfg.alpha_grid
        };
        for (i, &alpha) in alphas.iter().enumerate() {
            let mut dev = Vec::new();
            let mut test = Vec::new();
            for rotation in 0..cfg.rotations {
                let prepared = prepare_rotation(
                    &data.labeled,
                    &data.unlabeled,
                    &data.test,
                    &data.plan,
                    rotation,
                    fraction,
                    &data.vocab,
                    cfg.max_len,
                )?;
                let variant = cfg.variant(variant_name, alpha)?;
                let model = cfg.model_config(
                    data.vocab.size(),
                    data.n_classes,
                    variant.drop_z || variant.supervised_only,
                );
                let mut tc = TrainConfig::new(variant, model, cell_seed(cfg, rotation, i));
                tc.batch_size = cfg.batch_size;
                tc.max_epochs = cfg.max_epochs;
                tc.lr = cfg.lr;
                tc.dataset = cfg.dataset_name.clone();
                tc.labeled_fraction = fraction;
                let (report, _) = run_single::<F>(cfg, &data.vocab, tc, prepared)?;
                dev.push(report.best_dev_accuracy());
                test.push(report.test_accuracy);
            }
            let (dev_mean, dev_std) = mean_std(&dev);
            let (test_mean, test_std) = mean_std(&test);
            out.push(SweepRow {
                variant: variant_name.clone(),
                alpha,
                dev_mean,
                dev_std,
                test_mean,
                test_std,
                runs: dev.len(),
            });
        }
    }
    Ok(out)
}

/// Emit the sweep as csv + markdown under `outdir`.
pub fn emit_sweep(rows: &[SweepRow], outdir: &Path) -> Result<()> {
    fs::create_dir_all(outdir)?;
    let mut csv = String::from("variant,alpha,dev_mean,dev_std,test_mean,test_std,runs\n");
    let mut md = String::from(
        "# Alpha sweep, mean(std)% over rotations\n\n| variant | alpha | dev | test |\n|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.variant, r.alpha, r.dev_mean, r.dev_std, r.test_mean, r.test_std, r.runs
        );
        let _ = writeln!(
            md,
            "| {} | {} | {:.2}({:.2}) | {:.2}({:.2}) |",
            r.variant,
            r.alpha,
            r.dev_mean * 100.0,
            r.dev_std * 100.0,
            r.test_mean * 100.0,
            r.test_std * 100.0
        );
    }
    fs::write(outdir.join("table.csv"), csv)?;
    fs::write(outdir.join("table.md"), md)?;
    Ok(())
}
