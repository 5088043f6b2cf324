//! Command-line front end: dataset generation, manifest-driven training,
//! evaluation and report comparison.
//!
//! Exit codes: 0 on success, 2 for invalid input (bad flags, missing or
//! malformed files, schema mismatches), 3 for failures while running
//! (divergence, I/O errors, a locked output directory).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use domexperts::dataset::load_dataset;
use domexperts::evaluation::{emit_report, evaluate, evaluate_dump, load_dump};
use domexperts::experiment::{compare_report_files, write_comparison, Experiment, Model, RunKind, RunStatus};
use domexperts::scenes::{generate_dataset, preset, Balance, SceneSpec, Split, GENERATION_FILE, PRESETS};
use domexperts::training::{domain_counts, domain_indices, key_names};
use domexperts::{Dataset, DomainSchema, Error, EvalConfig, Result};

const EXIT_INPUT: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "domexperts", version, about = "Metadata-routed domain expert detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aerial dataset with per-image flight metadata.
    GenData(GenDataArgs),
    /// Train and evaluate every run listed in a manifest.
    Train(TrainArgs),
    /// Evaluate a saved model or a detection dump on a dataset.
    Eval(EvalArgs),
    /// Tabulate saved reports side by side with deltas against a baseline.
    Compare(CompareArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Output directory; receives train/, test/ and generation.json.
    #[arg(long)]
    out: PathBuf,
    /// Named setup providing scene, layout and balance.
    #[arg(long, conflicts_with_all = ["spec", "layout"])]
    preset: Option<String>,
    /// Scene settings (TOML). Defaults apply to omitted keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Domain schema whose cells the images are spread over.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    n_train: usize,
    #[arg(long, default_value_t = 150)]
    n_test: usize,
    /// Per-cell image shares, comma separated, summing to 1. Omit for equal shares.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Overrides the scene seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    manifest: PathBuf,
    /// Validate the manifest and print each run's step budget without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Saved model (baseline or expert checkpoint).
    #[arg(long, required_unless_present = "dump", conflicts_with = "dump")]
    model: Option<PathBuf>,
    /// Detection dump (JSON list of image_id, bbox, score, category_id).
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    /// Domain schema used to stratify results.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    thresholds: Vec<f64>,
    /// Report per-domain AP and the domain average (needs --schema).
    #[arg(long)]
    per_domain: bool,
    /// Also write SVG precision-recall and per-domain plots.
    #[arg(long)]
    plots: bool,
    #[arg(long, default_value_t = 0.01)]
    score_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// Name recorded in the report; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    /// Directory for report.json, report.txt and plots.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CompareArgs {
    /// Report JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Model name of the reference report.
    #[arg(long)]
    baseline: String,
    #[arg(long, default_value = "AP50")]
    metric: String,
    /// Directory for comparison.json/.txt (and .svg with --plots).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plots: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_INPUT);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { EXIT_INPUT } else { EXIT_RUNTIME })
        }
    }
}

/// `DOMEXPERTS_THREADS` caps the worker pool; results do not depend on it.
fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("DOMEXPERTS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("DOMEXPERTS_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let (mut spec, layout, mut balance) = match &args.preset {
        Some(name) => preset(name)?,
        None => {
            let spec = match &args.spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    toml::from_str::<SceneSpec>(&text).map_err(|e| Error::Parse {
                        context: p.display().to_string(),
                        message: e.to_string(),
                    })?
                }
                None => SceneSpec::default(),
            };
            let layout = match &args.layout {
                Some(p) => DomainSchema::load(p)?,
                None => {
                    return Err(Error::InvalidInput(format!(
                        "--layout is required unless --preset is given (presets: {PRESETS:?})"
                    )))
                }
            };
            (spec, layout, Balance::Balanced)
        }
    };
    if let Some(w) = args.weights {
        balance = Balance::Imbalanced(w);
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    generate_dataset(&spec, &layout, args.n_train, args.n_test, &balance, &args.out)?;
    let train = load_dataset(&args.out.join(Split::Train.dir_name()))?;
    let test = load_dataset(&args.out.join(Split::Test.dir_name()))?;
    println!("wrote {} ({})", args.out.display(), GENERATION_FILE);
    print!("{}", count_table(&layout, &[("train", &train), ("test", &test)])?);
    Ok(())
}

/// Image and object counts per domain cell for each split.
fn count_table(layout: &DomainSchema, splits: &[(&str, &Dataset)]) -> Result<String> {
    let keys = key_names(layout);
    let width = keys.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut out = format!("{:width$}", "domain");
    for (name, _) in splits {
        out.push_str(&format!(" {:>10} {:>8}", format!("{name} img"), "objects"));
    }
    out.push('\n');
    let mut per_split = Vec::new();
    for (_, ds) in splits {
        let idx = domain_indices(ds, layout)?;
        let images = domain_counts(&idx, keys.len());
        let mut objects = vec![0usize; keys.len()];
        for (img, &k) in ds.images.iter().zip(&idx) {
            objects[k] += img.objects.len();
        }
        per_split.push((images, objects, ds.len(), ds.object_count()));
    }
    for (k, key) in keys.iter().enumerate() {
        out.push_str(&format!("{key:width$}"));
        for (images, objects, _, _) in &per_split {
            out.push_str(&format!(" {:>10} {:>8}", images[k], objects[k]));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:width$}", "total"));
    for (_, _, n, o) in &per_split {
        out.push_str(&format!(" {n:>10} {o:>8}"));
    }
    out.push('\n');
    Ok(out)
}

fn train(args: TrainArgs) -> Result<()> {
    let experiment = Experiment::load(&args.manifest, !args.dry_run)?;
    println!("manifest {}", experiment.digest);
    if args.dry_run {
        println!(
            "train {} images, test {} images, {} runs",
            experiment.train_set.len(),
            experiment.test_set.len(),
            experiment.runs.len()
        );
        for plan in experiment.plan()? {
            let detail = match plan.kind {
                RunKind::Baseline => format!(
                    "pretrain {} + continuation {}",
                    plan.budget.pretrain_steps, plan.budget.continuation_steps
                ),
                RunKind::Expert => {
                    let per: Vec<String> = plan.budget.expert_steps.iter().map(|(k, s)| format!("{k}:{s}")).collect();
                    format!("pretrain {} + experts [{}]", plan.budget.pretrain_steps, per.join(", "))
                }
            };
            println!("  {:<20} {:>7} steps  {detail}", plan.name, plan.steps);
        }
        return Ok(());
    }
    let outcome = experiment.execute()?;
    for run in &outcome.runs {
        let status = match run.status {
            RunStatus::Trained => "trained",
            RunStatus::Resumed => "resumed",
        };
        println!("  {:<20} {status:<8} {}", run.name, run.dir.display());
    }
    print!("{}", outcome.comparison.to_text());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let schema = args.schema.as_deref().map(DomainSchema::load).transpose()?;
    if args.per_domain && schema.is_none() {
        return Err(Error::InvalidInput("--per-domain needs --schema".into()));
    }
    let config = EvalConfig {
        iou_thresholds: args.thresholds.clone(),
        score_threshold: args.score_threshold,
        nms_iou: args.nms_iou,
        per_domain: args.per_domain,
    };
    let source = args.model.as_ref().or(args.dump.as_ref()).expect("clap requires one");
    let name = args.name.clone().unwrap_or_else(|| file_stem(source));
    let report = if let Some(path) = &args.model {
        let model = Model::load(path, schema.as_ref())?;
        let start = Instant::now();
        let report = evaluate(&name, &model, &dataset, schema.as_ref(), &config)?;
        let per_image = start.elapsed().as_secs_f64() / dataset.len() as f64;
        println!(
            "{} ({}): {:.2} ms per image including matching; wall clock on this machine, not a benchmark",
            name,
            model.name(),
            per_image * 1e3
        );
        report
    } else {
        let dump = load_dump(args.dump.as_ref().expect("checked"))?;
        evaluate_dump(&name, &dump, &dataset, schema.as_ref(), &config)?
    };
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        for p in emit_report(&report, out, "report", args.plots)? {
            println!("wrote {}", p.display());
        }
    } else if args.plots {
        log::warn!("--plots has no effect without --out");
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let table = compare_report_files(&args.reports, &args.baseline, &args.metric)?;
    print!("{}", table.to_text());
    if let Some(out) = &args.out {
        for p in write_comparison(&table, out, "comparison", args.plots)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}
