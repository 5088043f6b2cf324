//! Reproducible experiments described by a TOML manifest.
//!
//! ```toml
//! output = "out"                  # paths are relative to the manifest
//! schema = "altitude3.toml"       # evaluation strata
//!
//! [data.generate]                 # or: [data] train = "...", test = "..."
//! n_train = 600
//! n_test = 150
//! balance = "balanced"            # or { imbalanced = [0.7, 0.2, 0.1] }
//!
//! [train]
//! epochs_pretrain = 20
//! seed = 1
//!
//! [[runs]]
//! kind = "baseline"
//!
//! [[runs]]
//! kind = "expert"
//! split = 2
//! ```
//!
//! Each run writes `runs/<name>/{model.ckpt, record.json, report.json,
//! report.txt, done.json}`. A run whose `done.json` matches the manifest
//! digest is not retrained. Pooled pretraining is cached under `pretrain/`
//! and shared by every run with the same data, model and pretraining
//! settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{decode_archive, decode_detector, load_detector, save_detector, DETECTOR_KIND};
use crate::dataset::{content_digest, hex, load_dataset, read_json, write_json, Dataset};
use crate::detector::{Detection, DetectorConfig, DetectorParams};
use crate::domain::DomainSchema;
use crate::error::{Error, Result};
use crate::evaluation::{compare_reports, emit_report, evaluate, metric_name, ComparisonTable, EvalConfig, EvalReport};
use crate::expert::{Detector, ExpertDetector, ExpertInit, EXPERT_KIND};
use crate::scenes::{generate_dataset, Balance, GenerationRecord, SceneSpec, Split, GENERATION_FILE};
use crate::training::{
    continue_baseline, domain_counts, domain_indices, key_names, plan_budget, pretrain, train_expert_phase,
    BudgetMode, BudgetPlan, PhaseRecord, RunRecord, TrainConfig,
};
use crate::AnnotatedImage;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub output: PathBuf,
    /// Schema used to stratify evaluation; also the default for expert runs.
    pub schema: PathBuf,
    pub data: DataSource,
    /// Detector architecture. Defaults to the standard five-stage detector
    /// with the dataset's class count.
    #[serde(default)]
    pub model: Option<DetectorConfig>,
    /// Training settings shared by all runs; runs may override keys.
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Also write SVG plots next to each report.
    #[serde(default)]
    pub plots: bool,
    #[serde(default)]
    pub compare: Option<CompareSpec>,
    pub runs: Vec<RunSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub generate: Option<GenerateSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    #[serde(default)]
    pub scene: SceneSpec,
    /// Domain cells to balance over; defaults to the manifest schema.
    #[serde(default)]
    pub layout: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "balanced")]
    pub balance: Balance,
}

fn balanced() -> Balance {
    Balance::Balanced
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub baseline: String,
    #[serde(default)]
    pub metric: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Baseline,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Defaults to `baseline` or `<dims>@<split>`.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: RunKind,
    /// Expert schema; defaults to the manifest schema.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<usize>,
    #[serde(default)]
    pub train: toml::Table,
}

/// A run with every reference resolved.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub name: String,
    pub spec: RunSpec,
    pub schema: DomainSchema,
    pub split: usize,
    pub train: TrainConfig,
}

/// A manifest with files read, data loaded and runs resolved.
#[derive(Debug)]
pub struct Experiment {
    pub manifest: Manifest,
    pub digest: String,
    pub base_dir: PathBuf,
    pub output: PathBuf,
    pub schema: DomainSchema,
    pub model: DetectorConfig,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub runs: Vec<ResolvedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub name: String,
    pub kind: RunKind,
    pub split: Option<usize>,
    pub budget: BudgetPlan,
    /// Total gradient steps of the run.
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Trained,
    Resumed,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub status: RunStatus,
    pub dir: PathBuf,
    pub report: EvalReport,
    pub record: RunRecord,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub digest: String,
    pub runs: Vec<RunOutcome>,
    pub comparison: ComparisonTable,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct DoneMarker {
    manifest_digest: String,
    run: RunSpec,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn merged_train_config(shared: &toml::Table, overrides: &toml::Table) -> Result<TrainConfig> {
    let mut table = shared.clone();
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    let config: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::parse("train settings", e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Directory-safe form of a run name.
fn dir_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_@+.".contains(c) { c } else { '_' })
        .collect()
}

impl Experiment {
    /// Reads the manifest and everything it references, generating the
    /// dataset when asked to. With `write_data` false a generated dataset is
    /// only built in memory.
    pub fn load(manifest_path: &Path, write_data: bool) -> Result<Self> {
        let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let digest = sha256_hex(&bytes);
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::parse(manifest_path.display().to_string(), "manifest is not UTF-8"))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::parse(manifest_path.display().to_string(), e.to_string()))?;
        let base_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &Path| base_dir.join(p);
        let output = resolve(&manifest.output);

        if manifest.runs.is_empty() {
            return Err(Error::invalid("manifest lists no runs"));
        }
        manifest.eval.validate()?;
        let schema = DomainSchema::load(&resolve(&manifest.schema))?;

        // Resolve every run before touching data so bad references fail fast.
        let mut runs = Vec::with_capacity(manifest.runs.len());
        for spec in &manifest.runs {
            let run_schema = match &spec.schema {
                Some(p) => DomainSchema::load(&resolve(p))?,
                None => schema.clone(),
            };
            let split = match (spec.kind, spec.split) {
                (RunKind::Expert, Some(s)) => s,
                (RunKind::Expert, None) => return Err(Error::invalid("expert run without `split`")),
                (RunKind::Baseline, _) => 0,
            };
            let name = spec.name.clone().unwrap_or_else(|| match spec.kind {
                RunKind::Baseline => "baseline".to_string(),
                RunKind::Expert => format!("{}@{split}", run_schema.name()),
            });
            let train = merged_train_config(&manifest.train, &spec.train)
                .map_err(|e| Error::invalid(format!("run `{name}`: {e}")))?;
            runs.push(ResolvedRun {
                name,
                spec: spec.clone(),
                schema: run_schema,
                split,
                train,
            });
        }
        let mut names: Vec<&str> = runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate run name `{}`", w[0])));
        }

        let (train_set, test_set) = load_data(&manifest.data, &base_dir, &output, &schema, write_data)?;
        let model = match &manifest.model {
            Some(m) => {
                if m.class_count != train_set.class_count() {
                    return Err(Error::invalid(format!(
                        "model has {} classes, dataset has {}",
                        m.class_count,
                        train_set.class_count()
                    )));
                }
                m.clone()
            }
            None => DetectorConfig {
                class_count: train_set.class_count(),
                ..DetectorConfig::default()
            },
        };
        model.validate()?;
        for run in &runs {
            if run.split > model.stage_count() {
                return Err(Error::invalid(format!(
                    "run `{}`: split {} outside [0, {}]",
                    run.name,
                    run.split,
                    model.stage_count()
                )));
            }
            domain_indices(&train_set, &run.schema)?;
        }
        domain_indices(&test_set, &schema)?;

        Ok(Experiment {
            manifest,
            digest,
            base_dir,
            output,
            schema,
            model,
            train_set,
            test_set,
            runs,
        })
    }

    /// Planned gradient steps for every run.
    pub fn plan(&self) -> Result<Vec<RunPlan>> {
        self.runs
            .iter()
            .map(|run| {
                let (budget, steps) = match run.spec.kind {
                    RunKind::Baseline => {
                        let b = plan_budget(vec!["all".into()], &[self.train_set.len()], &run.train);
                        let steps = b.baseline_total();
                        (b, steps)
                    }
                    RunKind::Expert => {
                        let idx = domain_indices(&self.train_set, &run.schema)?;
                        let counts = domain_counts(&idx, run.schema.key_count());
                        let b = plan_budget(key_names(&run.schema), &counts, &run.train);
                        let steps = b.expert_total();
                        (b, steps)
                    }
                };
                Ok(RunPlan {
                    name: run.name.clone(),
                    kind: run.spec.kind,
                    split: (run.spec.kind == RunKind::Expert).then_some(run.split),
                    budget,
                    steps,
                })
            })
            .collect()
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.output.join("runs").join(dir_name(name))
    }

    /// Trains and evaluates every run not already completed under this
    /// manifest digest, then writes the comparison table.
    pub fn execute(&self) -> Result<ExperimentOutcome> {
        fs::create_dir_all(&self.output).map_err(|e| Error::io(&self.output, e))?;
        let _lock = OutputLock::acquire(&self.output)?;
        let mut outcomes = Vec::with_capacity(self.runs.len());
        for run in &self.runs {
            outcomes.push(self.execute_run(run)?);
        }
        let comparison = self.write_comparison(&outcomes)?;
        Ok(ExperimentOutcome {
            digest: self.digest.clone(),
            runs: outcomes,
            comparison,
        })
    }

    fn execute_run(&self, run: &ResolvedRun) -> Result<RunOutcome> {
        let dir = self.run_dir(&run.name);
        let fail = |phase: &str| {
            let run = run.name.clone();
            let phase = phase.to_string();
            move |e: Error| Error::Run {
                run,
                phase,
                source: Box::new(e),
            }
        };
        let marker = DoneMarker {
            manifest_digest: self.digest.clone(),
            run: run.spec.clone(),
        };
        let done_path = dir.join("done.json");
        if let Ok(existing) = read_json::<DoneMarker>(&done_path) {
            if existing == marker {
                let report = EvalReport::load(&dir.join("report.json")).map_err(fail("resume"))?;
                let record: RunRecord = read_json(&dir.join("record.json")).map_err(fail("resume"))?;
                return Ok(RunOutcome {
                    name: run.name.clone(),
                    status: RunStatus::Resumed,
                    dir,
                    report,
                    record,
                });
            }
        }
        fs::create_dir_all(&dir).map_err(|e| fail("setup")(Error::io(&dir, e)))?;
        let _ = fs::remove_file(&done_path);

        let (pretrained, phase) = self.pretrained(run).map_err(fail("pretrain"))?;
        let model_path = dir.join("model.ckpt");
        let (model, mut record) = match run.spec.kind {
            RunKind::Baseline => {
                let (params, record) =
                    continue_baseline(&self.train_set, &pretrained, &phase, &run.train).map_err(fail("train"))?;
                save_detector(&params, &model_path).map_err(fail("save"))?;
                (Model::Base(params), record)
            }
            RunKind::Expert => {
                let (expert, record) =
                    train_expert_phase(&self.train_set, &pretrained, &phase, &run.schema, run.split, &run.train)
                        .map_err(fail("train"))?;
                expert.save(&model_path).map_err(fail("save"))?;
                (Model::Expert(expert), record)
            }
        };
        record.model = run.name.clone();
        record.manifest_digest = Some(self.digest.clone());

        let mut report = evaluate(&run.name, &model, &self.test_set, Some(&self.schema), &self.manifest.eval)
            .map_err(fail("evaluate"))?;
        report.manifest_digest = Some(self.digest.clone());
        write_json(&dir.join("record.json"), &record).map_err(fail("save"))?;
        emit_report(&report, &dir, "report", self.manifest.plots).map_err(fail("save"))?;
        write_json(&done_path, &marker).map_err(fail("save"))?;
        Ok(RunOutcome {
            name: run.name.clone(),
            status: RunStatus::Trained,
            dir,
            report,
            record,
        })
    }

    /// Pooled pretraining for `run`, loaded from the cache when an identical
    /// one was already computed.
    fn pretrained(&self, run: &ResolvedRun) -> Result<(DetectorParams, PhaseRecord)> {
        let pretrain_view = TrainConfig {
            epochs_expert: 0,
            expert_learning_rate: None,
            expert_init: ExpertInit::Clone,
            budget_mode: BudgetMode::MatchedTotal,
            ..run.train.clone()
        };
        let key_source = serde_json::json!({
            "data": content_digest(&self.train_set),
            "model": self.model,
            "train": pretrain_view,
            "balanced_schema": run.train.balanced_sampling.then_some(&run.schema),
        });
        let key = sha256_hex(key_source.to_string().as_bytes());
        let dir = self.output.join("pretrain");
        let ckpt = dir.join(format!("{}.ckpt", &key[..16]));
        let rec = dir.join(format!("{}.json", &key[..16]));
        if ckpt.is_file() && rec.is_file() {
            return Ok((load_detector(&ckpt)?, read_json(&rec)?));
        }
        let init = DetectorParams::init(self.model.clone(), run.train.seed)?;
        let (params, phase) = pretrain(&self.train_set, init, Some(&run.schema), &run.train)?;
        save_detector(&params, &ckpt)?;
        write_json(&rec, &phase)?;
        Ok((params, phase))
    }

    fn write_comparison(&self, outcomes: &[RunOutcome]) -> Result<ComparisonTable> {
        let (baseline, metric) = match &self.manifest.compare {
            Some(c) => (c.baseline.clone(), c.metric.clone()),
            None => {
                let base = self
                    .runs
                    .iter()
                    .find(|r| r.spec.kind == RunKind::Baseline)
                    .unwrap_or(&self.runs[0]);
                (base.name.clone(), None)
            }
        };
        let metric = metric.unwrap_or_else(|| metric_name(self.manifest.eval.iou_thresholds[0]));
        let records: Vec<RunRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
        let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.report.clone()).collect();
        let table = compare_runs(&records, &reports, &baseline, &metric)?;
        write_comparison(&table, &self.output, "comparison", self.manifest.plots)?;
        Ok(table)
    }
}

/// Compares run reports and fills in each row's gradient step count from
/// the matching training record.
pub fn compare_runs(records: &[RunRecord], reports: &[EvalReport], baseline: &str, metric: &str) -> Result<ComparisonTable> {
    let mut table = compare_reports(reports, baseline, metric)?;
    for row in &mut table.rows {
        row.steps = records.iter().find(|r| r.model == row.name).map(|r| r.total_steps);
    }
    Ok(table)
}

/// Writes `<stem>.json`, `<stem>.txt` and, with `plots`, `<stem>.svg`.
pub fn write_comparison(table: &ComparisonTable, dir: &Path, stem: &str, plots: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    write_json(&json, table)?;
    let txt = dir.join(format!("{stem}.txt"));
    fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
    let mut out = vec![json, txt];
    if plots {
        let svg = dir.join(format!("{stem}.svg"));
        fs::write(&svg, table.to_svg()).map_err(|e| Error::io(&svg, e))?;
        out.push(svg);
    }
    Ok(out)
}

/// Loads report files and compares them against `baseline`.
pub fn compare_report_files(paths: &[PathBuf], baseline: &str, metric: &str) -> Result<ComparisonTable> {
    let reports = paths.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>>>()?;
    compare_reports(&reports, baseline, metric)
}

fn load_data(
    source: &DataSource,
    base_dir: &Path,
    output: &Path,
    schema: &DomainSchema,
    write: bool,
) -> Result<(Dataset, Dataset)> {
    match (source, &source.generate) {
        (
            DataSource {
                train: Some(train),
                test: Some(test),
                generate: None,
            },
            _,
        ) => Ok((load_dataset(&base_dir.join(train))?, load_dataset(&base_dir.join(test))?)),
        (
            DataSource {
                train: None,
                test: None,
                ..
            },
            Some(gen),
        ) => {
            let layout = match &gen.layout {
                Some(p) => DomainSchema::load(&base_dir.join(p))?,
                None => schema.clone(),
            };
            if !write {
                let train = crate::scenes::generate_split(&gen.scene, &layout, gen.n_train, &gen.balance, Split::Train)?;
                let test = crate::scenes::generate_split(&gen.scene, &layout, gen.n_test, &gen.balance, Split::Test)?;
                return Ok((train, test));
            }
            let dir = output.join("data");
            let existing: Option<GenerationRecord> = read_json(&dir.join(GENERATION_FILE)).ok();
            let fresh = existing.is_some_and(|r| {
                r.spec == gen.scene
                    && r.layout == layout
                    && r.balance == gen.balance
                    && r.n_train == gen.n_train
                    && r.n_test == gen.n_test
            });
            if !fresh {
                generate_dataset(&gen.scene, &layout, gen.n_train, gen.n_test, &gen.balance, &dir)?;
            }
            Ok((
                load_dataset(&dir.join(Split::Train.dir_name()))?,
                load_dataset(&dir.join(Split::Test.dir_name()))?,
            ))
        }
        _ => Err(Error::invalid(
            "data needs either both `train` and `test` directories or a `generate` table",
        )),
    }
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A saved model of either kind.
#[derive(Debug, Clone)]
pub enum Model {
    Base(DetectorParams),
    Expert(ExpertDetector),
}

impl Model {
    /// Loads a detector or expert archive. Expert models must have been
    /// built for `schema` when one is given.
    pub fn load(path: &Path, schema: Option<&DomainSchema>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let kind = decode_archive(&bytes)?.kind;
        match kind.as_str() {
            DETECTOR_KIND => Ok(Model::Base(decode_detector(&bytes)?)),
            EXPERT_KIND => Ok(Model::Expert(ExpertDetector::from_bytes(&bytes, schema)?)),
            other => Err(Error::Checkpoint(format!("unknown archive kind `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Model::Base(_) => "baseline".into(),
            Model::Expert(m) => m.name(),
        }
    }
}

impl Detector for Model {
    fn detect_image(&self, image: &AnnotatedImage, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        match self {
            Model::Base(m) => m.detect_image(image, score_threshold, nms_iou),
            Model::Expert(m) => m.detect_image(image, score_threshold, nms_iou),
        }
    }
}
