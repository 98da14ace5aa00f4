use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcdicd::autoencoder::{AeModel, TrainConfig};
use lcdicd::config;
use lcdicd::ensemble::{train_ensemble, AeEnsemble};
use lcdicd::heatmap::read_loc_csv;
use lcdicd::manifest::{read_annotations, save_map, load_map, write_jsonl, Manifest};
use lcdicd::pipeline::{
    evaluate_methods, process_query, train_feature_model, write_method_maps, LocalizationRecord, AE_METHOD, LCD_METHOD,
};
use lcdicd::{generate_synthetic, BoundingBox, FeatureExtractor, GrayImage, LocMap, MapDatabase, SynthConfig};
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lcdicd::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Simultaneous loop-closure and change detection over a map of reference images.
#[derive(Debug, Parser)]
#[command(name = "lcdicd", version)]
struct Cli {
    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice (weight init, shuffling, clustering, synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the feature autoencoder, or the per-cluster baseline ensemble.
    TrainAe(TrainAeArgs),
    /// Extract BoLFs of the reference images and write the map file.
    BuildMap(BuildMapArgs),
    /// Rank viewpoint hypotheses for each query.
    Localize(LocalizeArgs),
    /// Localize and write likelihood-of-change maps for each query.
    Detect(DetectArgs),
    /// Top-X accuracy of LoC maps against annotated changes.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic reference/query dataset with annotated changes.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainAeArgs {
    /// Manifest of training images (image_path records).
    #[arg(long)]
    input: PathBuf,
    /// Input side in pixels (default 32, or 128 with --ensemble).
    #[arg(long)]
    side: Option<usize>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Train k cluster-specific models on full images instead.
    #[arg(long)]
    ensemble: bool,
    /// Number of clusters for --ensemble.
    #[arg(long, default_value_t = config::DEFAULT_ENSEMBLE_K)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildMapArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature model; not needed when every record carries features.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    query: PathBuf,
    /// Feature model; not needed when every query carries features.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of viewpoint hypotheses.
    #[arg(long = "Y", default_value_t = config::DEFAULT_HYPOTHESES)]
    y: usize,
    /// Weight of the mean OPR distance against the full-image distance.
    #[arg(long, default_value_t = config::DEFAULT_OPR_WEIGHT)]
    w_opr: f64,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Output JSONL, one record per query.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Baseline ensemble; adds reconstruction-error maps under <out>/AE.
    #[arg(long)]
    ae_ensemble: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of per-query CSVs, or of one subdirectory per method.
    #[arg(long)]
    loc_dir: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Top-X percentages.
    #[arg(long = "X", value_delimiter = ',', default_values_t = config::DEFAULT_TOP_X)]
    x: Vec<f64>,
    /// Overlap thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = config::DEFAULT_IOU)]
    iou: Vec<f64>,
    #[arg(long, default_value_t = config::DEFAULT_CELL_SIZE)]
    cell_size: u32,
    /// Report file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    n_refs: usize,
    #[arg(long, default_value_t = 50)]
    n_destructors: usize,
    #[arg(long, default_value_t = 0.8)]
    change_rate: f64,
    /// Standard deviation of the additive pixel noise.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::TrainAe(a) => train(a, cli.seed),
        Command::BuildMap(a) => build_map(a),
        Command::Localize(a) => localize(a),
        Command::Detect(a) => detect(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a, cli.seed),
    }
}

fn train(a: &TrainAeArgs, seed: u64) -> CliResult<()> {
    let manifest = Manifest::read(&a.input)?;
    if manifest.records.is_empty() {
        return Err(lcdicd::Error::EmptyTrainingSet.into());
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed,
    };
    let images = manifest
        .records
        .par_iter()
        .map(|r| Ok((r.id.clone(), manifest.load_image(r)?, Manifest::external_boxes(r)?)))
        .collect::<lcdicd::Result<Vec<(String, GrayImage, Vec<BoundingBox>)>>>()?;
    if a.ensemble {
        let side = a.side.unwrap_or(config::DEFAULT_BASELINE_SIDE);
        let named: Vec<(String, GrayImage)> = images.into_iter().map(|(id, img, _)| (id, img)).collect();
        let ensemble = train_ensemble(&named, a.k, side, &cfg)?;
        ensemble.save(&a.out)?;
        eprintln!("trained {} background models on {} images -> {}", ensemble.k(), named.len(), a.out.display());
    } else {
        let side = a.side.unwrap_or(config::DEFAULT_FEATURE_SIDE);
        let inputs: Vec<(&GrayImage, &[BoundingBox])> = images.iter().map(|(_, img, b)| (img, b.as_slice())).collect();
        let model = train_feature_model(&inputs, side, &cfg)?;
        model.save(&a.out)?;
        eprintln!("trained feature model on {} images -> {}", images.len(), a.out.display());
    }
    Ok(())
}

fn load_model(path: Option<&Path>) -> CliResult<Option<AeModel>> {
    Ok(path.map(AeModel::load).transpose()?)
}

fn bolfs(manifest: &Manifest, model: Option<&AeModel>) -> CliResult<Vec<lcdicd::BolfImage>> {
    let extractor = model.map(|m| m as &dyn FeatureExtractor);
    Ok(manifest
        .records
        .par_iter()
        .map(|r| manifest.to_bolf(r, extractor))
        .collect::<lcdicd::Result<Vec<_>>>()?)
}

fn build_map(a: &BuildMapArgs) -> CliResult<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let model = load_model(a.model.as_deref())?;
    let db = MapDatabase::from_images(bolfs(&manifest, model.as_ref())?)?;
    save_map(&db, &a.out)?;
    eprintln!(
        "map of {} images, {} features -> {}",
        db.len(),
        db.feature_count(),
        a.out.display()
    );
    Ok(())
}

fn check_query_args(q: &QueryArgs, db: &MapDatabase) -> CliResult<()> {
    if q.y == 0 || q.y > db.len() {
        return Err(CliError::Usage(format!(
            "--Y must be between 1 and the map size {}, got {}",
            db.len(),
            q.y
        )));
    }
    if !(q.w_opr >= 0.0 && q.w_opr.is_finite()) {
        return Err(CliError::Usage(format!("--w-opr must be finite and nonnegative, got {}", q.w_opr)));
    }
    Ok(())
}

fn summary(record: &LocalizationRecord) -> String {
    let top = &record.hypotheses[0];
    let mut line = format!("{}: top {} (score {:.6})", record.query_id, top.image_id, top.score);
    if let Some(gt) = &record.reference_id {
        let verdict = if *gt == top.image_id { "correct" } else { "wrong" };
        line.push_str(&format!(", reference {gt} {verdict}"));
    }
    line
}

fn localize(a: &LocalizeArgs) -> CliResult<()> {
    let db = load_map(&a.query.map)?;
    check_query_args(&a.query, &db)?;
    let manifest = Manifest::read(&a.query.query)?;
    let model = load_model(a.query.model.as_deref())?;
    let queries = bolfs(&manifest, model.as_ref())?;
    let outcomes = queries
        .par_iter()
        .zip(&manifest.records)
        .map(|(q, r)| process_query(&db, q, None, r.reference_id.as_deref(), None, a.query.y, a.query.w_opr))
        .collect::<lcdicd::Result<Vec<_>>>()?;
    let records: Vec<&LocalizationRecord> = outcomes.iter().map(|o| &o.localization).collect();
    for r in &records {
        eprintln!("{}", summary(r));
    }
    write_jsonl(&a.out, &records)?;
    Ok(())
}

fn detect(a: &DetectArgs) -> CliResult<()> {
    let db = load_map(&a.query.map)?;
    check_query_args(&a.query, &db)?;
    let manifest = Manifest::read(&a.query.query)?;
    let model = load_model(a.query.model.as_deref())?;
    let ensemble = a.ae_ensemble.as_deref().map(AeEnsemble::load).transpose()?;
    let queries = bolfs(&manifest, model.as_ref())?;
    let outcomes = queries
        .par_iter()
        .zip(&manifest.records)
        .map(|(q, r)| {
            let pixels = match &ensemble {
                Some(_) => Some(manifest.load_image(r)?),
                None => None,
            };
            process_query(
                &db,
                q,
                pixels.as_ref(),
                r.reference_id.as_deref(),
                ensemble.as_ref(),
                a.query.y,
                a.query.w_opr,
            )
        })
        .collect::<lcdicd::Result<Vec<_>>>()?;

    std::fs::create_dir_all(&a.out).map_err(|e| lcdicd::Error::io(&a.out, e))?;
    let records: Vec<&LocalizationRecord> = outcomes.iter().map(|o| &o.localization).collect();
    write_jsonl(&a.out.join("hypotheses.jsonl"), &records)?;
    let lcd: BTreeMap<String, LocMap> = outcomes
        .iter()
        .map(|o| (o.localization.query_id.clone(), o.lcd.clone()))
        .collect();
    write_method_maps(&a.out, LCD_METHOD, &lcd)?;
    if ensemble.is_some() {
        let ae: BTreeMap<String, LocMap> = outcomes
            .iter()
            .filter_map(|o| Some((o.localization.query_id.clone(), o.ae.clone()?)))
            .collect();
        write_method_maps(&a.out, AE_METHOD, &ae)?;
    }
    for o in &outcomes {
        let (x, y) = o.lcd.argmax();
        eprintln!("{}, LoC peak {} at ({x}, {y})", summary(&o.localization), o.lcd.get(x, y));
    }
    Ok(())
}

fn csv_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| lcdicd::Error::io(dir, e))? {
        let path = entry.map_err(|e| lcdicd::Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Methods found under `dir`: each subdirectory holding CSVs is one method;
/// CSVs directly inside `dir` form a method named after `dir`.
fn discover_methods(dir: &Path) -> CliResult<Vec<(String, Vec<PathBuf>)>> {
    let mut methods = Vec::new();
    let own = csv_files(dir)?;
    if !own.is_empty() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| LCD_METHOD.to_string());
        methods.push((name, own));
    }
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| lcdicd::Error::io(dir, e))? {
        let path = entry.map_err(|e| lcdicd::Error::io(dir, e))?.path();
        if path.is_dir() {
            subdirs.push(path);
        }
    }
    subdirs.sort();
    for sub in subdirs {
        let files = csv_files(&sub)?;
        if !files.is_empty() {
            methods.push((sub.file_name().unwrap().to_string_lossy().into_owned(), files));
        }
    }
    Ok(methods)
}

fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    if a.cell_size == 0 {
        return Err(CliError::Usage("--cell-size must be positive".into()));
    }
    if let Some(x) = a.x.iter().find(|&&x| !(x > 0.0 && x <= 100.0)) {
        return Err(CliError::Usage(format!("--X values must lie in (0, 100], got {x}")));
    }
    if let Some(t) = a.iou.iter().find(|&&t| !(0.0..=1.0).contains(&t)) {
        return Err(CliError::Usage(format!("--iou values must lie in [0, 1], got {t}")));
    }
    let methods = discover_methods(&a.loc_dir)?;
    if methods.is_empty() {
        return Err(CliError::Usage(format!("no LoC CSV files under {}", a.loc_dir.display())));
    }
    let annotations = read_annotations(&a.annotations)?;
    let maps = methods
        .iter()
        .map(|(name, files)| {
            let m = files
                .par_iter()
                .map(|f| {
                    let id = f.file_stem().unwrap().to_string_lossy().into_owned();
                    read_loc_csv(f).map(|loc| (id, loc))
                })
                .collect::<lcdicd::Result<BTreeMap<_, _>>>()?;
            Ok((name.clone(), m))
        })
        .collect::<lcdicd::Result<Vec<_>>>()?;
    let eval = evaluate_methods(&maps, &annotations, &a.x, &a.iou, a.cell_size)?;
    match &a.out {
        Some(path) => std::fs::write(path, &eval.report).map_err(|e| lcdicd::Error::io(path, e))?,
        None => print!("{}", eval.report),
    }
    for (name, m) in &maps {
        eprintln!("{name}: {} LoC maps evaluated", m.len());
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> CliResult<()> {
    let cfg = SynthConfig {
        n_refs: a.n_refs,
        n_destructors: a.n_destructors,
        change_rate: a.change_rate,
        noise_sigma: a.noise,
        seed,
        ..SynthConfig::default()
    };
    let dataset = generate_synthetic(&cfg)?;
    dataset.write_to(&a.out)?;
    eprintln!(
        "{} references, {} queries, {} annotated changes -> {}",
        dataset.references.len(),
        dataset.queries.len(),
        dataset.annotations.len(),
        a.out.display()
    );
    Ok(())
}
