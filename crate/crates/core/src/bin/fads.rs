use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;

use fads_icl::data::FeatureKind;
use fads_icl::harness::{compare_table, evaluate, mean_std, DEFAULT_SEEDS, STD_ESTIMATOR};
use fads_icl::modulators::ModulatorKind;
use fads_icl::pipeline::{extract_features, run, ExperimentConfig, Method, ModelBundle};
use fads_icl::{BackendDescriptor, CacheDir, DemoRegime, Error, ErrorClass, NeighborK, Result, TaskDataset};

#[derive(Parser)]
#[command(name = "fads", version, about = "Few-shot classification with LLM features and a fitted modulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Populate the feature cache for every seed.
    Extract(CommonArgs),
    /// Train a modulator on one seed and write a model bundle.
    Fit(CommonArgs),
    /// Score a file of texts with a model bundle.
    Predict(PredictArgs),
    /// Evaluate one configuration over seeds.
    Eval(CommonArgs),
    /// Evaluate a grid of configurations and print a comparison table.
    Compare(CompareArgs),
}

#[derive(Args, Clone)]
struct Setup {
    /// Dataset manifest (JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Backend descriptor (JSON).
    #[arg(long)]
    backend: PathBuf,
    /// Feature cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CommonArgs {
    #[command(flatten)]
    setup: Setup,
    /// Base configuration file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// Shots per class.
    #[arg(long)]
    shots: Option<usize>,
    /// Demonstrations per class, `most` or `none`.
    #[arg(long)]
    demos: Option<String>,
    /// `hidden` or `fuzzy:<k>`.
    #[arg(long)]
    features: Option<String>,
    /// lr, svm, mlp, knn or tree.
    #[arg(long)]
    modulator: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Neighbour count for the voting baselines, or `auto`.
    #[arg(long)]
    k: Option<String>,
    /// Interpolation weight for knn-prompt.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_test: Option<usize>,
    #[arg(long)]
    context_budget: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    setup: Setup,
    /// Model bundle written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Texts to score: JSON Lines with a `text` field, or one text per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    setup: Setup,
    /// JSON list of configurations. Without it the grid is the product of
    /// the comma-separated `--method` and `--shots` lists.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    #[arg(long)]
    demos: Option<String>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    modulator: Option<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    max_test: Option<usize>,
    /// Cells evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Where to write the CSV table; a JSON dump of the results goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Backend => 3,
        ErrorClass::Data => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config_err<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Config(format!("{what}: {e}"))
}

/// Loads the dataset and backend. Manifest and descriptor problems are
/// configuration errors.
fn load(setup: &Setup) -> Result<(TaskDataset, Box<dyn fads_icl::Backend>, Option<CacheDir>)> {
    let dataset = TaskDataset::load(&setup.dataset).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", setup.dataset.display())),
        other => other,
    })?;
    let descriptor = BackendDescriptor::load(&setup.backend).map_err(config_err(&setup.backend.display().to_string()))?;
    let backend = descriptor.build(&dataset)?;
    Ok((dataset, backend, setup.cache.as_ref().map(CacheDir::new)))
}

fn apply(
    cfg: &mut ExperimentConfig,
    demos: &Option<String>,
    features: &Option<String>,
    modulator: &Option<String>,
    max_test: Option<usize>,
) -> Result<()> {
    if let Some(d) = demos {
        cfg.demos = Some(d.parse::<DemoRegime>()?);
    }
    if let Some(f) = features {
        cfg.features = f.parse::<FeatureKind>().map_err(config_err("--features"))?;
    }
    if let Some(m) = modulator {
        cfg.modulator = m.parse::<ModulatorKind>()?;
    }
    if max_test.is_some() {
        cfg.max_test = max_test;
    }
    Ok(())
}

fn read_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(config_err(&p.display().to_string()))?)
            .map_err(config_err(&p.display().to_string())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn build_config(a: &CommonArgs) -> Result<(ExperimentConfig, Vec<u64>)> {
    let mut cfg = read_config(&a.config)?;
    if let Some(m) = &a.method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(m) = a.shots {
        cfg.shots = m;
    }
    apply(&mut cfg, &a.demos, &a.features, &a.modulator, a.max_test)?;
    if let Some(k) = &a.k {
        cfg.neighbors.k = k.parse::<NeighborK>()?;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if a.context_budget.is_some() {
        cfg.context_budget = a.context_budget;
    }
    let seeds = a.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    cfg.validate()?;
    Ok((cfg, seeds))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn cmd_extract(a: CommonArgs) -> Result<()> {
    let (cfg, seeds) = build_config(&a)?;
    if a.setup.cache.is_none() {
        return Err(Error::Config("extract needs --cache".into()));
    }
    let (dataset, backend, cache) = load(&a.setup)?;
    for seed in seeds {
        let (split, features) = extract_features(&dataset, &cfg.with_seed(seed), backend.as_ref(), cache.as_ref())?;
        println!(
            "seed {seed}: {} residual + {} test features ({} dims), {} backend calls, {} demonstrations",
            features.train.len(),
            features.test.len(),
            features.train.first().map(|f| f.dim()).unwrap_or(0),
            features.backend_calls,
            split.demonstrations.len()
        );
    }
    Ok(())
}

fn cmd_fit(a: CommonArgs) -> Result<()> {
    let (cfg, seeds) = build_config(&a)?;
    let out = a
        .out
        .clone()
        .ok_or_else(|| Error::Config("fit needs --out for the model bundle".into()))?;
    let (dataset, backend, cache) = load(&a.setup)?;
    let cfg = cfg.with_seed(seeds[0]);
    let (bundle, run) = ModelBundle::fit(&dataset, &cfg, backend.as_ref(), cache.as_ref())?;
    bundle.save(&out)?;
    println!(
        "fitted {} on {} residual samples (seed {}); test accuracy {:.4}; wrote {}",
        cfg.modulator,
        run.metadata.residual,
        cfg.seed,
        run.accuracy(),
        out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct TextRecord {
    text: String,
    #[serde(default)]
    text_b: Option<String>,
}

fn read_texts(path: &Path, joiner: Option<&str>) -> Result<Vec<String>> {
    let body = fs::read_to_string(path)?;
    let mut texts = Vec::new();
    for (n, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if line.trim_start().starts_with('{') {
            let r: TextRecord = serde_json::from_str(line)
                .map_err(|e| Error::InvalidData(format!("{}:{}: {e}", path.display(), n + 1)))?;
            texts.push(match (r.text_b, joiner) {
                (Some(b), Some(j)) => format!("{}{j}{b}", r.text),
                (Some(b), None) => format!("{} {b}", r.text),
                (None, _) => r.text,
            });
        } else {
            texts.push(line.to_string());
        }
    }
    Ok(texts)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (dataset, backend, _) = load(&a.setup)?;
    let bundle = ModelBundle::load(&a.model)?;
    let texts = read_texts(&a.input, dataset.template.pair_joiner())?;
    let preds = bundle.predict_texts(&dataset, backend.as_ref(), &texts)?;
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for (index, (label, probs)) in preds.into_iter().enumerate() {
        serde_json::to_writer(
            &mut w,
            &serde_json::json!({ "index": index, "predicted": label, "label": bundle.classes[label], "probs": probs }),
        )?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(a: CommonArgs) -> Result<()> {
    let (cfg, seeds) = build_config(&a)?;
    let (dataset, backend, cache) = load(&a.setup)?;
    let mut writer = a.out.as_deref().map(create).transpose()?;
    let mut accs = Vec::new();
    for &seed in &seeds {
        let out = run(&dataset, &cfg.with_seed(seed), backend.as_ref(), cache.as_ref())?;
        info!("seed {seed}: {:?}", out.metadata.timings);
        println!("seed {seed}: accuracy {:.4} ({} test samples)", out.accuracy(), out.predictions.len());
        accs.push(out.accuracy());
        if let Some(w) = writer.as_mut() {
            out.write_jsonl(&mut *w)?;
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let (mean, std) = mean_std(&accs).expect("at least one seed");
    println!(
        "{}: {:.1}±{:.1} over {} seeds (std: {STD_ESTIMATOR})",
        cfg.fingerprint(),
        100.0 * mean,
        100.0 * std,
        seeds.len()
    );
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut grid: Vec<ExperimentConfig> = match &a.grid {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(config_err(&p.display().to_string()))?)
            .map_err(config_err(&p.display().to_string()))?,
        None => {
            let methods = a.method.clone().unwrap_or_else(|| {
                ["icl", "knn-prompt", "knn-prompting", "fads"].map(String::from).to_vec()
            });
            let shots = a.shots.clone().unwrap_or_else(|| vec![32]);
            let mut grid = Vec::new();
            for m in &methods {
                let method = m.parse::<Method>()?;
                for &s in &shots {
                    grid.push(ExperimentConfig {
                        method,
                        shots: s,
                        ..Default::default()
                    });
                }
            }
            grid
        }
    };
    for cfg in &mut grid {
        apply(cfg, &a.demos, &a.features, &a.modulator, a.max_test)?;
        cfg.validate()?;
    }
    let seeds = a.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    let (dataset, backend, cache) = load(&a.setup)?;
    let results = evaluate(&dataset, &grid, &seeds, backend.as_ref(), cache.as_ref(), a.workers)?;
    let table = compare_table(&results);
    print!("{}", table.pretty());
    for r in &results {
        for e in &r.errors {
            eprintln!("{} seed {}: {}", r.fingerprint, e.seed, e.message);
        }
    }
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        w.write_all(table.csv().as_bytes())?;
        w.flush()?;
        let json = p.with_extension("json");
        fs::write(
            &json,
            serde_json::to_string_pretty(&serde_json::json!({ "std_estimator": STD_ESTIMATOR, "results": results }))?,
        )?;
    }
    if results.iter().all(|r| r.mean.is_none()) {
        if let Some(e) = results.iter().flat_map(|r| &r.errors).next() {
            eprintln!("error: every cell failed");
            return Err(match e.class {
                ErrorClass::Config => Error::Config(e.message.clone()),
                ErrorClass::Backend => Error::BackendUnavailable(e.message.clone()),
                ErrorClass::Data => Error::InvalidData(e.message.clone()),
            });
        }
    }
    Ok(())
}
