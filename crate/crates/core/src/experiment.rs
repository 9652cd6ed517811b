//! End-to-end experiment plumbing: one JSON config, a fixed output tree and
//! one function per pipeline stage.
//!
//! ```text
//! OUT/
//!   config.json            exact config of the last stage that ran
//!   incomplete             present while a stage runs or after it failed
//!   checkpoints/NAME.ckpt
//!   reports/               data.json, eval_NAME.json, prune_CELL.json,
//!                          scores_CELL.csv, summary.json, summary.csv
//!   curves/NAME.csv
//!   attn/NAME/             distance.json, distance.csv, NNN_cls.pgm, NNN_mask.pgm
//! ```

use std::sync::OnceLock;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{analyze_dataset, attention_map, AttentionDistanceTable, MapMode};
use crate::data::{ingest_folder, split, synth_generate, DomainDataset, SplitProtocol, Splits, SynthConfig};
use crate::depgraph::{DependencyGraph, Site};
use crate::error::{Error, Result};
use crate::importance::{score_groups, Aggregation, CalibrationBatch, Criterion, GradientStats, ScoringOptions};
use crate::metrics::{curves_csv, evaluate_split, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, TransformerModel};
use crate::pruner::{apply_prune, hms, measure_speedup, plan_prune, MinWidths, PruneReport, PruneSpec};
use crate::tensor::AdamConfig;
use crate::train::{train, FreezePolicy, Schedule, TrainConfig};

pub const BASELINE: &str = "baseline";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { config: SynthConfig, seed: u64 },
    /// `root/domain/class/*`, resized to the model's input size.
    Folder { root: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneGrid {
    pub criteria: Vec<Criterion>,
    pub ratios: Vec<f64>,
    pub sites: Vec<Site>,
    pub min_widths: MinWidths,
    pub aggregation: Aggregation,
    /// Seed of the random criterion.
    pub seed: u64,
    pub calibration_batches: usize,
    pub calibration_batch_size: usize,
    pub speedup_trials: usize,
    pub speedup_batch: usize,
    /// Fine-tune every pruned model during `sweep`.
    pub finetune: bool,
}

impl Default for PruneGrid {
    fn default() -> Self {
        Self {
            criteria: Criterion::ALL.to_vec(),
            ratios: vec![0.5, 0.75, 0.95],
            sites: Site::ALL.to_vec(),
            min_widths: MinWidths::default(),
            aggregation: Aggregation::Mean,
            seed: 0,
            calibration_batches: 8,
            calibration_batch_size: 8,
            speedup_trials: 5,
            speedup_batch: 16,
            finetune: true,
        }
    }
}

impl PruneGrid {
    pub fn spec(&self, criterion: Criterion, ratio: f64) -> PruneSpec {
        PruneSpec {
            ratio,
            criterion,
            sites: self.sites.clone(),
            min_widths: self.min_widths,
            aggregation: self.aggregation,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Layer used for attention maps; `None` means the last one.
    pub layer: Option<usize>,
    /// Test images reduced into the distance table.
    pub max_images: usize,
    /// Test images rendered as heatmaps (both modes).
    pub maps: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            layer: None,
            max_images: 256,
            maps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub data: DataSource,
    pub split: SplitProtocol,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub prune: PruneGrid,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale setup: toy model trained from scratch on the synthetic
    /// shapes task, every parameter trainable.
    fn default() -> Self {
        let train = TrainConfig {
            optimizer: AdamConfig::adam(1e-3, 0.0),
            freeze: FreezePolicy::None,
            ..TrainConfig::dg_finetune()
        };
        let finetune = TrainConfig {
            optimizer: AdamConfig::adamw(5e-4, 0.05),
            schedule: Schedule::WarmupCosine {
                warmup_epochs: 1,
                start_factor: 0.033,
            },
            max_epochs: 15,
            freeze: FreezePolicy::None,
            seed: 1,
            ..TrainConfig::postprune_finetune()
        };
        Self {
            model: ModelConfig::toy(),
            init_seed: 0,
            data: DataSource::Synthetic {
                config: SynthConfig::default(),
                seed: 0,
            },
            split: SplitProtocol::pooled(0),
            train,
            finetune,
            prune: PruneGrid::default(),
            analysis: AnalysisConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidExperiment(vec![format!("config: {e}")]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as JSON and
    /// falls back to a plain string; the key must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let mut errors = Vec::new();
        for o in overrides {
            let o = o.as_ref();
            let Some((key, raw)) = o.split_once('=') else {
                errors.push(format!("override `{o}` is not key=value"));
                continue;
            };
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            if let Err(e) = set_path(&mut doc, key.trim(), value) {
                errors.push(e);
            }
        }
        if !errors.is_empty() {
            return Err(Error::InvalidExperiment(errors));
        }
        serde_json::from_value(doc).map_err(|e| Error::InvalidExperiment(vec![format!("after overrides: {e}")]))
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                errors.push(format!("{section}: {e}"));
            }
        };
        check("model", self.model.validate());
        match &self.data {
            DataSource::Synthetic { config, .. } => {
                check("data", config.validate());
                if config.image_size != self.model.image_size {
                    check(
                        "data",
                        Err(Error::InvalidDataset(format!(
                            "image_size {} differs from the model's {}",
                            config.image_size, self.model.image_size
                        ))),
                    );
                }
                if config.classes != self.model.num_classes {
                    check(
                        "data",
                        Err(Error::InvalidDataset(format!(
                            "{} classes but the model head has {}",
                            config.classes, self.model.num_classes
                        ))),
                    );
                }
                if self.model.channels != 3 {
                    check("data", Err(Error::InvalidDataset("synthetic images have 3 channels".into())));
                }
            }
            DataSource::Folder { root } => {
                if !root.is_dir() {
                    check("data", Err(Error::InvalidDataset(format!("{} is not a directory", root.display()))));
                }
            }
        }
        check("split", self.split.validate());
        check("train", self.train.validate());
        check("finetune", self.finetune.validate());
        let g = &self.prune;
        if g.criteria.is_empty() || g.ratios.is_empty() {
            check("prune", Err(Error::InvalidSpec("criteria and ratios must be non-empty".into())));
        }
        let mut names = BTreeMap::new();
        for &r in &g.ratios {
            check("prune", g.spec(Criterion::Random, r).validate());
            if let Some(prev) = names.insert(ratio_tag(r), r) {
                check(
                    "prune",
                    Err(Error::InvalidSpec(format!("ratios {prev} and {r} share the run name {}", ratio_tag(r)))),
                );
            }
        }
        if g.criteria.iter().any(|c| c.needs_gradients()) && (g.calibration_batches == 0 || g.calibration_batch_size == 0) {
            check("prune", Err(Error::InvalidSpec("gradient criteria need calibration batches".into())));
        }
        if g.speedup_batch == 0 {
            check("prune", Err(Error::InvalidSpec("speedup_batch must be positive".into())));
        }
        if let Some(l) = self.analysis.layer {
            if l >= self.model.num_layers() {
                check("analysis", Err(Error::InvalidConfig(format!("layer {l} out of range"))));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidExperiment(errors))
        }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        node = match node {
            Value::Object(map) => map.get_mut(*part).ok_or_else(|| format!("unknown key `{here}`"))?,
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| format!("`{here}` needs a numeric index"))?;
                items.get_mut(idx).ok_or_else(|| format!("index `{here}` out of range"))?
            }
            _ => return Err(format!("`{}` is not an object", parts[..i].join("."))),
        };
    }
    *node = value;
    Ok(())
}

fn ratio_tag(ratio: f64) -> String {
    format!("r{:02}", (ratio * 100.0).round() as i64)
}

/// Run name of one grid cell, e.g. `hessian_r50`.
pub fn cell_name(criterion: Criterion, ratio: f64) -> String {
    format!("{}_{}", criterion, ratio_tag(ratio))
}

pub fn finetuned_name(cell: &str) -> String {
    format!("{cell}_ft")
}

/// One row of the consolidated table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub criterion: Option<Criterion>,
    pub ratio: Option<f64>,
    pub params: u64,
    pub macs: u64,
    pub valid_top1: Option<f64>,
    pub test_top1: Option<f64>,
    pub delta_acc: Option<f64>,
    pub theoretical_speedup: f64,
    pub timing: SummaryTiming,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTiming {
    pub measured_speedup: Option<f64>,
    pub finetune_wall_clock: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub samples: usize,
    pub per_domain: Vec<usize>,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Paths of the output tree.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }

    pub fn eval_report(&self, name: &str) -> PathBuf {
        self.report(&format!("eval_{name}.json"))
    }

    pub fn prune_report(&self, cell: &str) -> PathBuf {
        self.report(&format!("prune_{cell}.json"))
    }

    pub fn curves(&self, name: &str) -> PathBuf {
        self.root.join("curves").join(format!("{name}.csv"))
    }

    pub fn attn(&self, name: &str) -> PathBuf {
        self.root.join("attn").join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn marker(&self) -> PathBuf {
        self.root.join("incomplete")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// A validated config bound to an output directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub layout: Layout,
    data: OnceLock<(DomainDataset, Splits)>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout {
            root: config.output_dir.clone(),
        };
        Ok(Self {
            config,
            layout,
            data: OnceLock::new(),
        })
    }

    /// Runs `f` as stage `name`: the config is written first and the
    /// `incomplete` marker stays behind if `f` fails.
    fn stage<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        write(&self.layout.config(), self.config.to_json()? + "\n")?;
        let marker = self.layout.marker();
        write(&marker, format!("{name}\n"))?;
        let out = f()?;
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        Ok(out)
    }

    pub fn data(&self) -> Result<&(DomainDataset, Splits)> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let c = &self.config;
        let ds = match &c.data {
            DataSource::Synthetic { config, seed } => synth_generate(config, *seed)?,
            DataSource::Folder { root } => ingest_folder(root, c.model.channels, c.model.image_size)?,
        };
        if ds.num_classes() != c.model.num_classes {
            return Err(Error::InvalidDataset(format!(
                "dataset has {} classes but the model head has {}",
                ds.num_classes(),
                c.model.num_classes
            )));
        }
        let splits = split(&ds, &c.split)?;
        Ok(self.data.get_or_init(|| (ds, splits)))
    }

    pub fn load_model(&self, name: &str) -> Result<TransformerModel> {
        load_checkpoint(self.layout.checkpoint(name))
    }

    /// Builds the dataset and splits; `export` also writes the images as a
    /// folder tree under `data/`.
    pub fn gen_data(&self, export: bool) -> Result<DataSummary> {
        self.stage("gen-data", || {
            let (ds, splits) = self.data()?;
            if export {
                ds.export_folder(&self.layout.root.join("data"))?;
            }
            let summary = DataSummary {
                classes: ds.classes.clone(),
                domains: ds.domains.clone(),
                samples: ds.len(),
                per_domain: (0..ds.domains.len()).map(|d| ds.domain_samples(d).len()).collect(),
                train: splits.train.len(),
                valid: splits.valid.len(),
                test: splits.test.len(),
            };
            write_json(&self.layout.report("data.json"), &summary)?;
            write_json(&self.layout.report("splits.json"), splits)?;
            Ok(summary)
        })
    }

    fn eval_all(&self, name: &str, model: &TransformerModel) -> Result<EvalReport> {
        let (ds, splits) = self.data()?;
        let start = std::time::Instant::now();
        let mut report = EvalReport::new(name, ds.num_classes());
        report.train = Some(evaluate_split(model, ds, &splits.train)?);
        report.valid = Some(evaluate_split(model, ds, &splits.valid)?);
        if !splits.test.is_empty() {
            report.test = Some(evaluate_split(model, ds, &splits.test)?);
        }
        if name != BASELINE {
            let base = self.layout.eval_report(BASELINE);
            if base.exists() {
                report = report.with_baseline(&read_json(&base)?);
            }
        }
        report.timing.eval_seconds = Some(start.elapsed().as_secs_f64());
        Ok(report)
    }

    fn fit(&self, name: &str, start: &TransformerModel, config: &TrainConfig) -> Result<EvalReport> {
        let (ds, splits) = self.data()?;
        let out = train(start, ds, splits, config)?;
        save_checkpoint(&out.best, self.layout.checkpoint(name))?;
        write(&self.layout.curves(name), curves_csv(&out.curves))?;
        let mut report = self.eval_all(name, &out.best)?;
        report.curves = out.curves;
        report.timing.finetune_wall_clock = Some(hms(out.wall_clock));
        write_json(&self.layout.eval_report(name), &report)?;
        Ok(report)
    }

    /// Trains the baseline from a fresh initialization.
    pub fn train_baseline(&self) -> Result<EvalReport> {
        self.stage("train", || {
            let model = TransformerModel::init(self.config.model.clone(), self.config.init_seed)?;
            self.fit(BASELINE, &model, &self.config.train)
        })
    }

    /// Re-evaluates a checkpoint, keeping curves and training time from an
    /// earlier report of the same model.
    pub fn evaluate(&self, name: &str) -> Result<EvalReport> {
        self.stage("eval", || self.evaluate_inner(name))
    }

    fn evaluate_inner(&self, name: &str) -> Result<EvalReport> {
        let model = self.load_model(name)?;
        let mut report = self.eval_all(name, &model)?;
        let path = self.layout.eval_report(name);
        if path.exists() {
            let old: EvalReport = read_json(&path)?;
            report.curves = old.curves;
            report.timing.finetune_wall_clock = old.timing.finetune_wall_clock;
        }
        write_json(&path, &report)?;
        Ok(report)
    }

    fn calibration(&self) -> Result<Vec<CalibrationBatch>> {
        let (ds, splits) = self.data()?;
        let g = &self.config.prune;
        let mut idx = splits.train.clone();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(g.seed));
        Ok(idx
            .chunks(g.calibration_batch_size)
            .take(g.calibration_batches)
            .map(|c| {
                let (images, labels) = ds.batch(c, None);
                CalibrationBatch { images, labels }
            })
            .collect())
    }

    /// Scores, plans and applies one grid cell against the baseline.
    pub fn prune(&self, criterion: Criterion, ratio: f64) -> Result<PruneReport> {
        self.stage("prune", || self.prune_inner(criterion, ratio, &mut None))
    }

    fn prune_inner(&self, criterion: Criterion, ratio: f64, grads: &mut Option<GradientStats>) -> Result<PruneReport> {
        let base = self.load_model(BASELINE)?;
        let graph = DependencyGraph::build(&base)?;
        let grid = &self.config.prune;
        let spec = grid.spec(criterion, ratio);
        if criterion.needs_gradients() && grads.is_none() {
            *grads = Some(GradientStats::collect(&base, &self.calibration()?)?);
        }
        let scores = score_groups(
            &graph,
            &base,
            &ScoringOptions {
                criterion,
                sites: &spec.sites,
                aggregation: spec.aggregation,
                seed: spec.seed,
                gradients: grads.as_ref().filter(|_| criterion.needs_gradients()),
            },
        )?;
        let plan = plan_prune(&graph, &scores, &spec)?;
        let pruned = apply_prune(&base, &plan)?;
        let cell = cell_name(criterion, ratio);
        let mut report = PruneReport::new(&plan, &pruned);
        let (ds, splits) = self.data()?;
        let probe: Vec<usize> = splits.test.iter().chain(&splits.valid).take(grid.speedup_batch).copied().collect();
        if grid.speedup_trials > 0 && !probe.is_empty() {
            let (images, _) = ds.batch(&probe, None);
            report.timing.speedup = Some(measure_speedup(&base, &pruned, &images, grid.speedup_trials)?);
        }
        save_checkpoint(&pruned, self.layout.checkpoint(&cell))?;
        write(&self.layout.report(&format!("scores_{cell}.csv")), scores.to_csv())?;
        write_json(&self.layout.prune_report(&cell), &report)?;
        Ok(report)
    }

    /// Post-prune fine-tuning of one grid cell.
    pub fn finetune(&self, criterion: Criterion, ratio: f64) -> Result<EvalReport> {
        self.stage("finetune", || self.finetune_inner(&cell_name(criterion, ratio)))
    }

    fn finetune_inner(&self, cell: &str) -> Result<EvalReport> {
        let pruned = self.load_model(cell)?;
        let report = self.fit(&finetuned_name(cell), &pruned, &self.config.finetune)?;
        let path = self.layout.prune_report(cell);
        if path.exists() {
            let mut pr: PruneReport = read_json(&path)?;
            pr.timing.finetune_wall_clock = report.timing.finetune_wall_clock.clone();
            write_json(&path, &pr)?;
        }
        Ok(report)
    }

    /// Mean attention distance over the test split plus heatmaps of the
    /// first few test images.
    pub fn analyze_attention(&self, name: &str) -> Result<AttentionDistanceTable> {
        self.stage("analyze-attn", || {
            let model = self.load_model(name)?;
            let (ds, splits) = self.data()?;
            let a = &self.config.analysis;
            let pool = if splits.test.is_empty() { &splits.valid } else { &splits.test };
            let chosen: Vec<usize> = pool.iter().take(a.max_images).copied().collect();
            let table = analyze_dataset(&model, ds, &chosen)?;
            let dir = self.layout.attn(name);
            write_json(&dir.join("distance.json"), &table)?;
            write(&dir.join("distance.csv"), table.to_csv())?;
            if model.config().use_cls_token {
                let layer = a.layer.unwrap_or(model.config().num_layers() - 1);
                for (i, &idx) in chosen.iter().take(a.maps).enumerate() {
                    let (img, _) = ds.batch(&[idx], None);
                    let c = model.config();
                    let img = img.reshaped(&[c.channels, c.image_size, c.image_size])?;
                    for (mode, tag) in [(MapMode::ClsQuery, "cls"), (MapMode::TokenMask, "mask")] {
                        attention_map(&model, &img, layer, mode)?.save_pgm(&dir.join(format!("{i:03}_{tag}.pgm")))?;
                    }
                }
            }
            Ok(table)
        })
    }

    /// Merges every prune and eval report under `reports/` into
    /// `summary.json` and `summary.csv`.
    pub fn report(&self) -> Result<Vec<SummaryRow>> {
        self.stage("report", || self.report_inner())
    }

    fn report_inner(&self) -> Result<Vec<SummaryRow>> {
        let mut rows = Vec::new();
        let base_path = self.layout.eval_report(BASELINE);
        if base_path.exists() {
            let ev: EvalReport = read_json(&base_path)?;
            let cfg = self.load_model(BASELINE)?.config().clone();
            rows.push(SummaryRow {
                model: BASELINE.into(),
                criterion: None,
                ratio: None,
                params: crate::model::param_count(&cfg),
                macs: crate::model::macs_count(&cfg),
                valid_top1: ev.valid.as_ref().map(|m| m.top1),
                test_top1: ev.test.as_ref().map(|m| m.top1),
                delta_acc: None,
                theoretical_speedup: 1.0,
                timing: SummaryTiming {
                    measured_speedup: None,
                    finetune_wall_clock: ev.timing.finetune_wall_clock,
                },
            });
        }
        let grid = &self.config.prune;
        let mut cells: Vec<(Criterion, f64)> = Vec::new();
        for &c in &grid.criteria {
            for &r in &grid.ratios {
                cells.push((c, r));
            }
        }
        for (c, r) in cells {
            let cell = cell_name(c, r);
            let path = self.layout.prune_report(&cell);
            if !path.exists() {
                continue;
            }
            let pr: PruneReport = read_json(&path)?;
            let ft = finetuned_name(&cell);
            let (name, ev) = if self.layout.eval_report(&ft).exists() {
                (ft.clone(), Some(read_json::<EvalReport>(&self.layout.eval_report(&ft))?))
            } else if self.layout.eval_report(&cell).exists() {
                (cell.clone(), Some(read_json::<EvalReport>(&self.layout.eval_report(&cell))?))
            } else {
                (cell.clone(), None)
            };
            rows.push(SummaryRow {
                model: name,
                criterion: Some(c),
                ratio: Some(r),
                params: pr.params_after,
                macs: pr.macs_after,
                valid_top1: ev.as_ref().and_then(|e| e.valid.as_ref().map(|m| m.top1)),
                test_top1: ev.as_ref().and_then(|e| e.test.as_ref().map(|m| m.top1)),
                delta_acc: ev.as_ref().and_then(EvalReport::delta_acc),
                theoretical_speedup: pr.theoretical_speedup,
                timing: SummaryTiming {
                    measured_speedup: pr.timing.speedup.as_ref().map(|s| s.measured),
                    finetune_wall_clock: pr.timing.finetune_wall_clock.clone(),
                },
            });
        }
        write_json(&self.layout.report("summary.json"), &rows)?;
        write(&self.layout.report("summary.csv"), summary_csv(&rows))?;
        Ok(rows)
    }

    /// Baseline (trained unless a checkpoint exists), then every criterion ×
    /// ratio cell: prune, evaluate, optionally fine-tune; finally `report`.
    pub fn sweep(&self) -> Result<Vec<PruneReport>> {
        self.stage("sweep", || {
            if !self.layout.checkpoint(BASELINE).exists() {
                let model = TransformerModel::init(self.config.model.clone(), self.config.init_seed)?;
                self.fit(BASELINE, &model, &self.config.train)?;
            }
            let grid = &self.config.prune;
            let mut grads = None;
            let mut reports = Vec::new();
            for &c in &grid.criteria {
                for &r in &grid.ratios {
                    let mut report = self.prune_inner(c, r, &mut grads)?;
                    let cell = cell_name(c, r);
                    self.evaluate_inner(&cell)?;
                    if grid.finetune {
                        let ft = self.finetune_inner(&cell)?;
                        report.timing.finetune_wall_clock = ft.timing.finetune_wall_clock;
                    }
                    reports.push(report);
                }
            }
            self.report_inner()?;
            Ok(reports)
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("model,criterion,ratio,params,macs,valid_top1,test_top1,delta_acc,speedup,measured_speedup,ft_time\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.4},{},{}\n",
            r.model,
            r.criterion.map(|c| c.to_string()).unwrap_or_default(),
            r.ratio.map(|x| x.to_string()).unwrap_or_default(),
            r.params,
            r.macs,
            opt(r.valid_top1),
            opt(r.test_top1),
            opt(r.delta_acc),
            r.theoretical_speedup,
            opt(r.timing.measured_speedup),
            r.timing.finetune_wall_clock.clone().unwrap_or_default(),
        ));
    }
    out
}

/// Removes every `timing` key, at any depth.
pub fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("timing");
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}
