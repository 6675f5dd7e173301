use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dslds_core::eval::{alpha_grid, build_fold_plan, write_alpha_sweep_csv, write_auc_table_csv, write_per_fold_csv, write_roc_csv, AucTable, Grid, Roc};
use dslds_core::experiment::{evaluate_bundle, evaluate_models, run_model, EvalConfig, ModelKind, RunOptions};
use dslds_core::features::{feature_matrix, feature_schema, write_feature_csv, WindowSpec};
use dslds_core::inference::{observations, write_inference_csv, FilterInit, InferenceOutput, Provenance, SwitchPosterior, StreamingDslds};
use dslds_core::io::{load_bundle, load_dataset, save_bundle, save_dataset, AnnotatedDataset, ModelBundle, PatientRecord};
use dslds_core::gaussian::GaussianBelief;
use dslds_core::sim::{benchmark_scenario, ScenarioSpec};
use dslds_core::switch::ObservationConvention;
use dslds_core::train::{train_bundle, TrainConfig};

const OUT_ENV: &str = "DSLDS_OUT_DIR";

#[derive(Parser)]
#[command(name = "dslds", version, about = "Switching-state monitoring of multichannel vital signs")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset.
    Simulate(SimulateArgs),
    /// Learn dynamics and classifiers; write a model bundle.
    Train(TrainArgs),
    /// Run a bundle on patients and write per-step CSVs.
    Infer(InferArgs),
    /// AUC tables, ROC curves and the α sweep.
    Evaluate(EvaluateArgs),
    /// Write per-step feature matrices.
    Features(FeaturesArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML; the built-in benchmark when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainConfigArgs {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Forest seed.
    #[arg(long = "forest-seed")]
    forest_seed: Option<u64>,
    /// Use every n-th step as a classifier training row.
    #[arg(long)]
    feature_stride: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Bundle path (default: `$DSLDS_OUT_DIR/model.json`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated patient ids (default: all).
    #[arg(long, value_delimiter = ',')]
    patients: Vec<String>,
    #[command(flatten)]
    cfg: TrainConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Dslds,
    Fslds,
    Mixture,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "dslds")]
    model: ModelArg,
    /// α of the mixture (default: the bundle's).
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Fixed-lag context; must equal the bundle's window `r`. Runs the
    /// DSLDS online, releasing step t once t + r has arrived.
    #[arg(long)]
    lag: Option<usize>,
    /// Weight the x-filter with the mixed switch posterior.
    #[arg(long)]
    feed_x: bool,
    /// Mix joint posteriors instead of per-factor marginals.
    #[arg(long)]
    joint: bool,
    /// Comma-separated patient ids (default: all).
    #[arg(long, value_delimiter = ',')]
    patients: Vec<String>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Score this bundle on the data instead of running nested CV.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    /// Fold-plan seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    grid_trees: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    grid_l: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    grid_r: Vec<usize>,
    /// Row stride of the inner grid search.
    #[arg(long, default_value_t = 1)]
    grid_stride: usize,
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    alpha_min: f64,
    #[arg(long, default_value_t = 6.0, allow_negative_numbers = true)]
    alpha_max: f64,
    #[arg(long, default_value_t = 0.25)]
    alpha_step: f64,
    #[command(flatten)]
    cfg: TrainConfigArgs,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 9)]
    l: usize,
    #[arg(long, default_value_t = 5)]
    r: usize,
    #[arg(long, value_delimiter = ',')]
    patients: Vec<String>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<dslds_core::Error> for Failure {
    fn from(e: dslds_core::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            eprintln!("error[usage]: {}", text.trim_start_matches("error: ").trim_end());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error[usage]: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error[data]: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Features(a) => features(a),
    }
}

fn out_dir(out: Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = out.ok_or_else(|| Failure::Usage(format!("no output directory: pass --out or set {OUT_ENV}")))?;
    fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut spec = match &a.scenario {
        Some(p) => ScenarioSpec::from_toml(&read_text(p)?).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        None => benchmark_scenario(2000, 6, 0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.patients {
        spec.patients = n;
    }
    if let Some(t) = a.length {
        spec.length = t;
    }
    let out = out_dir(a.out)?;
    let ds = spec.simulate()?;
    save_dataset(&ds, &out)?;
    write_text(&out.join("scenario.toml"), &spec.to_toml()?)?;
    println!("simulated {} patients x {} steps into {}", spec.patients, spec.length, out.display());
    Ok(())
}

fn train_config(a: &TrainConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.l {
        cfg.l = v;
    }
    if let Some(v) = a.r {
        cfg.r = v;
    }
    if let Some(v) = a.trees {
        cfg.forest.n_trees = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.forest_seed {
        cfg.forest.seed = v;
    }
    if let Some(v) = a.feature_stride {
        cfg.feature_stride = v;
    }
    if cfg.feature_stride == 0 || cfg.forest.n_trees == 0 {
        return Err(Failure::Usage("trees and feature stride must be positive".into()));
    }
    Ok(cfg)
}

fn patient_indices(ds: &AnnotatedDataset, ids: &[String]) -> CliResult<Vec<usize>> {
    if ids.is_empty() {
        return Ok((0..ds.patients.len()).collect());
    }
    ids.iter()
        .map(|id| {
            ds.patients
                .iter()
                .position(|p| &p.id == id)
                .ok_or_else(|| Failure::Data(format!("unknown patient {id}")))
        })
        .collect()
}

fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = train_config(&a.cfg)?;
    let ds = load_dataset(&a.data)?;
    let patients = patient_indices(&ds, &a.patients)?;
    let path = match a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
            }
            p
        }
        None => out_dir(std::env::var_os(OUT_ENV).map(PathBuf::from))?.join("model.json"),
    };
    let bundle = train_bundle(&ds, &patients, &cfg)?;
    save_bundle(&bundle, &path)?;
    println!("trained on {} patients; bundle written to {}", patients.len(), path.display());
    Ok(())
}

fn streaming_dslds(bundle: &ModelBundle, rec: &PatientRecord) -> CliResult<InferenceOutput> {
    let regimes = bundle.regimes(ObservationConvention::Discriminative)?;
    let mut stream = StreamingDslds::new(bundle.window, &bundle.classifiers, &regimes, FilterInit::Stats(bundle.init.clone()));
    let mut steps = Vec::with_capacity(rec.len());
    for (t, y) in observations(&rec.series).into_iter().enumerate() {
        if let Some(s) = stream.push(rec.timestamps[t], y)? {
            steps.push(s);
        }
    }
    steps.extend(stream.finish()?);
    let (posteriors, beliefs): (Vec<SwitchPosterior>, Vec<GaussianBelief>) =
        steps.into_iter().map(|s| (s.posterior, s.belief)).unzip();
    Ok(InferenceOutput::assemble(
        Provenance::Dslds,
        rec.timestamps.clone(),
        bundle.channels.clone(),
        posteriors,
        beliefs,
        &regimes,
    )?)
}

fn infer(a: InferArgs) -> CliResult<()> {
    let bundle = load_bundle(&a.bundle)?;
    let ds = load_dataset(&a.data)?;
    bundle.check_channels(&ds.channel_names())?;
    if let Some(lag) = a.lag {
        if lag != bundle.window.r {
            return Err(Failure::Data(format!(
                "--lag {lag} differs from the bundle's fixed-lag context r = {}",
                bundle.window.r
            )));
        }
    }
    let out = out_dir(a.out)?;
    let kind = match a.model {
        ModelArg::Dslds => ModelKind::Dslds,
        ModelArg::Fslds => ModelKind::Fslds,
        ModelArg::Mixture => ModelKind::Mixture,
    };
    let opts = RunOptions { alpha: a.alpha, mixture_feeds_x: a.feed_x, joint_level: a.joint };
    for p in patient_indices(&ds, &a.patients)? {
        let rec = &ds.patients[p];
        let output = if a.lag.is_some() && kind == ModelKind::Dslds {
            streaming_dslds(&bundle, rec)?
        } else {
            run_model(&bundle, rec, kind, &opts)?
        };
        let path = out.join(format!("{}.{}.csv", rec.id, output.provenance.label()));
        write_inference_csv(create(&path)?, &output)?;
    }
    println!("wrote {} outputs to {}", kind.label(), out.display());
    Ok(())
}

fn write_tables(out: &Path, table: &AucTable, rocs: &[Vec<Roc>], curves: &[Vec<(f64, f64)>]) -> CliResult<()> {
    write_auc_table_csv(create(&out.join("auc_table.csv"))?, table)?;
    write_per_fold_csv(create(&out.join("auc_per_fold.csv"))?, table)?;
    write_alpha_sweep_csv(create(&out.join("alpha_sweep.csv"))?, curves)?;
    let roc_dir = out.join("roc");
    fs::create_dir_all(&roc_dir).map_err(|e| Failure::Data(format!("{}: {e}", roc_dir.display())))?;
    for (model, row) in table.models.iter().zip(rocs) {
        for (factor, roc) in table.factors.iter().zip(row) {
            write_roc_csv(create(&roc_dir.join(format!("{model}__{factor}.csv")))?, roc)?;
        }
    }
    let stdout = std::io::stdout();
    write_auc_table_csv(stdout.lock(), table)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    if !(a.alpha_step > 0.0) || a.alpha_max < a.alpha_min {
        return Err(Failure::Usage("α grid needs a positive step and min ≤ max".into()));
    }
    let alphas = alpha_grid(a.alpha_min, a.alpha_max, a.alpha_step);
    let ds = load_dataset(&a.data)?;
    let out = out_dir(a.out.clone())?;
    if let Some(path) = &a.bundle {
        let bundle = load_bundle(path)?;
        let report = evaluate_bundle(&ds, &bundle, &alphas)?;
        return write_tables(&out, &report.table, &report.rocs, &[report.alpha_curve]);
    }
    let train = train_config(&a.cfg)?;
    let mut grid = Grid::default();
    if !a.grid_trees.is_empty() {
        grid.n_trees = a.grid_trees.clone();
    }
    if !a.grid_l.is_empty() {
        grid.l = a.grid_l.clone();
    }
    if !a.grid_r.is_empty() {
        grid.r = a.grid_r.clone();
    }
    if a.grid_stride == 0 {
        return Err(Failure::Usage("--grid-stride must be positive".into()));
    }
    let cfg = EvalConfig { train, grid, grid_stride: a.grid_stride, alphas };
    let plan = build_fold_plan(&ds.patient_ids(), a.folds, a.seed)?;
    let report = evaluate_models(&ds, &plan, &cfg)?;
    let curves: Vec<Vec<(f64, f64)>> = report.alpha_curves.iter().map(|c| c.curve.clone()).collect();
    write_tables(&out, &report.table, &report.rocs, &curves)?;
    let manifest = serde_json::to_string_pretty(&report.manifest(&cfg)).map_err(|e| Failure::Data(e.to_string()))?;
    write_text(&out.join("manifest.json"), &manifest)
}

fn features(a: FeaturesArgs) -> CliResult<()> {
    let spec = WindowSpec::new(a.l, a.r).map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = load_dataset(&a.data)?;
    let out = out_dir(a.out)?;
    let schema = feature_schema(&spec, &ds.channel_names());
    for p in patient_indices(&ds, &a.patients)? {
        let rec = &ds.patients[p];
        let rows = feature_matrix(&rec.series, &spec);
        let mut w = create(&out.join(format!("{}.features.csv", rec.id)))?;
        write_feature_csv(&mut w, &schema, &rec.timestamps, &rows)?;
        w.flush().map_err(|e| Failure::Data(e.to_string()))?;
    }
    Ok(())
}
