//! `myoschema`: pretrain, grow, retrain, evaluate and sweep from the shell.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 runtime fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use myoschema::harness::{
    collect_post_growth, derive_seed, evaluate_control, load_config, pretrain, read_dataset, run_sweep,
    tension_similarity, tension_spread, write_dataset, CollectionConfig, EvaluationConfig, PretrainConfig,
    RunOptions, SweepConfig,
};
use myoschema::sim::write_trajectory_csv;
use myoschema::{
    grow_network, grow_normalizer, retrain, Architecture, BodySchemaNet, Mask, Method, PlantConfig, RetrainConfig,
    SamplerRanges, SensorSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

const RESULTS_ENV: &str = "MYOSCHEMA_RESULTS_DIR";

#[derive(Parser)]
#[command(name = "myoschema", version, about = "Body schema learning for tendon-driven plants with added muscles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Babble on the old plant, train the autoencoder, write model and sampler ranges.
    Pretrain(PretrainArgs),
    /// Transplant an old model into a wider one for the added muscles.
    Grow(GrowArgs),
    /// Retrain a grown model with one of the old-loss schedules.
    Retrain(RetrainArgs),
    /// Closed-loop evaluation over the target sweep.
    Evaluate(EvaluateArgs),
    /// Every (method, N_new, seed) cell, resumable.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Pretraining TOML (`[collection]`, `[train]`, `[architecture]`, `holdout_fraction`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Plant TOML; the built-in three-muscle arrangement when absent.
    #[arg(long)]
    plant: Option<PathBuf>,
    /// Sets the collection, initialization and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Babbling sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Model file; ranges go to `<out>.ranges`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GrowArgs {
    /// Old model file.
    #[arg(long)]
    model: PathBuf,
    /// Muscle count after growth; taken from the plant when absent.
    #[arg(long)]
    muscles: Option<usize>,
    /// Existing post-growth dataset CSV.
    #[arg(long, conflicts_with = "n_new")]
    data: Option<PathBuf>,
    /// Collect this many post-growth samples; written to `<out>.dnew.csv`.
    #[arg(long)]
    n_new: Option<usize>,
    /// Grown plant TOML for collection; the built-in four-muscle arrangement when absent.
    #[arg(long)]
    plant: Option<PathBuf>,
    /// Collection TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; the collection seed derives from it and N_new as in `sweep`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    I,
    Ii,
    Iii,
    /// Method (i) from a freshly initialized network.
    Nocopy,
}

#[derive(Args)]
struct RetrainArgs {
    /// Grown model file.
    #[arg(long)]
    model: PathBuf,
    /// Old model file; its ranges sidecar bounds the pseudo-data.
    #[arg(long)]
    old: PathBuf,
    /// Post-growth dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Retraining TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file; the loss history goes to `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Plant TOML; a built-in arrangement matching the model's muscle count when absent.
    #[arg(long)]
    plant: Option<PathBuf>,
    /// Evaluation TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Muscle pair for E_f and f_max; the last two flexors when absent.
    #[arg(long, num_args = 2, value_names = ["I", "J"])]
    pair: Option<Vec<usize>>,
    /// Directory for `targets.csv` and `trajectory.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; `results/sweep` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Also write SVG plots of E_θ and σ_f.
    #[arg(long)]
    plot: bool,
    /// Per-cell target and loss CSVs under `cells/`.
    #[arg(long)]
    cells: bool,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<myoschema::Error> for Failure {
    fn from(e: myoschema::Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Relative output paths live under `MYOSCHEMA_RESULTS_DIR` when it is set.
fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(RESULTS_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Config(format!("{}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn config_or_default<T: Default + DeserializeOwned>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(T::default()),
    }
}

fn plant_or(path: &Option<PathBuf>, builtin: impl FnOnce() -> PlantConfig) -> CliResult<PlantConfig> {
    match path {
        Some(p) => Ok(PlantConfig::load(p)?),
        None => Ok(builtin()),
    }
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let mut cfg: PretrainConfig = config_or_default(&a.config)?;
    let plant = plant_or(&a.plant, PlantConfig::old_arrangement)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.collection.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = a.samples {
        cfg.collection.count = n;
    }
    let out = output_path(&a.out);
    ensure_parent(&out)?;
    let outcome = pretrain(&plant, &cfg)?;
    outcome.net.save(&out)?;
    outcome.ranges.save(SamplerRanges::sidecar_path(&out))?;
    println!("model {} ({} training samples, seed {})", out.display(), outcome.train.len(), cfg.seed);
    match outcome.quality {
        Some(q) => println!(
            "held-out ({} samples): theta error {:.3} deg, length error {:.3} mm, tension error {:.3} N",
            outcome.holdout.len(),
            q.theta_error.to_degrees(),
            q.length_error * 1e3,
            q.tension_error
        ),
        None => println!("no held-out samples"),
    }
    Ok(())
}

/// Old-channel outputs of the grown network against the old one, with
/// garbage in the added channels.
fn transplant_deviation(old: &BodySchemaNet, grown: &BodySchemaNet, ranges: &SamplerRanges, seed: u64) -> CliResult<f64> {
    let (n, m_old, m_new) = (old.n_joints(), old.n_muscles(), grown.n_muscles());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let theta: Vec<f64> = ranges.theta.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect();
        let tension: Vec<f64> = ranges.tension.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect();
        let length: Vec<f64> = old.normalizer().length.mean.iter().map(|mu| mu + rng.gen_range(-0.05..0.05)).collect();
        let s = SensorSample::new(theta, tension, length);
        let mut padded = s.clone();
        for _ in m_old..m_new {
            padded.tension.push(rng.gen_range(-1e3..1e3));
            padded.length.push(rng.gen_range(-1e3..1e3));
        }
        for mask in Mask::ALL {
            let a = old.mae_forward(&s, mask)?;
            let b = grown.mae_forward(&padded, mask)?;
            let pairs = a.theta.iter().zip(&b.theta[..n])
                .chain(a.tension.iter().zip(&b.tension[..m_old]))
                .chain(a.length.iter().zip(&b.length[..m_old]));
            for (x, y) in pairs {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

fn cmd_grow(a: &GrowArgs) -> CliResult<()> {
    let old = BodySchemaNet::load(&a.model)?;
    let plant = match (&a.plant, a.muscles) {
        (Some(p), _) => Some(PlantConfig::load(p)?),
        (None, None) => Some(PlantConfig::new_arrangement()),
        (None, Some(m)) if m == PlantConfig::new_arrangement().n_muscles() => Some(PlantConfig::new_arrangement()),
        (None, Some(_)) => None,
    };
    let m_new = match (a.muscles, &plant) {
        (Some(m), _) => m,
        (None, Some(p)) => p.n_muscles(),
        (None, None) => unreachable!(),
    };
    let grown = grow_network(&old, m_new)?;
    let ranges = SamplerRanges::load(SamplerRanges::sidecar_path(&a.model))?;
    let deviation = transplant_deviation(&old, &grown, &ranges, a.seed)?;
    if deviation > 1e-9 {
        return Err(Failure::Runtime(format!("transplant self-check failed: old outputs moved by {deviation:e}")));
    }
    println!("transplant self-check: max deviation {deviation:e} over 100 probes");

    let out = output_path(&a.out);
    ensure_parent(&out)?;
    let mut net = grown;
    let d_new = match (&a.data, a.n_new) {
        (Some(path), _) => Some(read_dataset(path)?),
        (None, Some(count)) => {
            let plant = plant
                .ok_or_else(|| Failure::Config(format!("no built-in plant with {m_new} muscles; pass --plant")))?;
            let base: CollectionConfig = config_or_default(&a.config)?;
            let seed = derive_seed(a.seed, count, "collect");
            let cfg = CollectionConfig { count, seed, ..base };
            let data = collect_post_growth(&plant, &net, &cfg, count, old.n_muscles())?;
            let path = with_suffix(&out, ".dnew.csv");
            write_dataset(&path, &data)?;
            println!("collected {count} samples (collection seed {seed}) into {}", path.display());
            net.metadata.insert("collection_seed".into(), seed.to_string());
            Some(data)
        }
        (None, None) => None,
    };
    if let Some(data) = &d_new {
        if data.iter().any(|s| s.n_muscles() != m_new) {
            return Err(Failure::Config(format!("dataset rows must have {m_new} muscles")));
        }
        net.set_normalizer(grow_normalizer(old.normalizer(), data)?)?;
    }
    net.metadata.insert("tag".into(), "transplant-untrained".into());
    net.metadata.insert("grow_seed".into(), a.seed.to_string());
    net.save(&out)?;
    println!("grown model {} ({} -> {} muscles)", out.display(), old.n_muscles(), m_new);
    Ok(())
}

fn cmd_retrain(a: &RetrainArgs) -> CliResult<()> {
    let grown = BodySchemaNet::load(&a.model)?;
    let old = BodySchemaNet::load(&a.old)?;
    let ranges = SamplerRanges::load(SamplerRanges::sidecar_path(&a.old))?;
    let d_new = read_dataset(&a.data)?;
    let mut cfg: RetrainConfig = config_or_default(&a.config)?;
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (method, start) = match a.method {
        MethodArg::I => (Method::I, grown),
        MethodArg::Ii => (Method::II, grown),
        MethodArg::Iii => (Method::III, grown),
        MethodArg::Nocopy => {
            let arch = Architecture { hidden: old.encoder().layer_sizes()[1], latent: old.latent_width() };
            let fresh = BodySchemaNet::new(
                grown.n_joints(),
                grown.n_muscles(),
                arch,
                grown.normalizer().clone(),
                derive_seed(a.seed, d_new.len(), "nocopy-init"),
            )?;
            (Method::I, fresh)
        }
    };
    cfg.method = method;
    let (mut net, history) = retrain(&start, &old, &d_new, &cfg, &ranges)?;
    let method_name = match a.method {
        MethodArg::Nocopy => "nocopy",
        _ => method.name(),
    };
    net.metadata.insert("tag".into(), format!("retrained-{method_name}"));
    net.metadata.insert("retrain_seed".into(), a.seed.to_string());
    net.metadata.insert("retrain_epochs".into(), history.len().to_string());
    let out = output_path(&a.out);
    ensure_parent(&out)?;
    net.save(&out)?;
    let loss_path = with_suffix(&out, ".loss.csv");
    myoschema::retrain::write_loss_history(&loss_path, &history)?;
    let last = history.last().map_or(f64::NAN, |r| r.total);
    println!(
        "retrained ({method_name}, {} of {} epochs, seed {}): final loss {last:.5}, model {}",
        history.len(),
        cfg.epochs,
        a.seed,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let net = BodySchemaNet::load(&a.model)?;
    let plant = match &a.plant {
        Some(p) => PlantConfig::load(p)?,
        None => [PlantConfig::old_arrangement(), PlantConfig::new_arrangement()]
            .into_iter()
            .find(|p| p.n_muscles() == net.n_muscles())
            .ok_or_else(|| Failure::Config(format!("no built-in plant with {} muscles; pass --plant", net.n_muscles())))?,
    };
    let mut cfg: EvaluationConfig = config_or_default(&a.config)?;
    if a.out.is_some() && cfg.record_every.is_none() {
        cfg.record_every = Some(10);
    }
    let eval = evaluate_control(&net, &plant, &cfg)?;
    let tensions = eval.settled_tensions();
    let flexors = plant.flexor_indices();
    let sigma_f = tension_spread(&tensions, &flexors)?;
    println!("E_theta {:.5} rad over {} targets ({} failed)", eval.e_theta, eval.targets.len(), eval.failures());
    println!("sigma_f {sigma_f:.4} N over flexors {flexors:?}");
    let pair = match &a.pair {
        Some(p) => Some((p[0], p[1])),
        None if flexors.len() >= 2 => Some((flexors[flexors.len() - 2], flexors[flexors.len() - 1])),
        None => None,
    };
    if let Some((i, j)) = pair {
        let (e_f, f_max) = tension_similarity(&tensions, i, j)?;
        println!("E_f {e_f:.4} between muscles {i} and {j}, f_max {f_max:.3} N");
    }
    if let Some(dir) = &a.out {
        let dir = output_path(dir);
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
        eval.write_targets_csv(dir.join("targets.csv"))?;
        write_trajectory_csv(dir.join("trajectory.csv"), &eval.trajectory)?;
        println!("targets and trajectory in {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => SweepConfig::load(p)?,
        None => SweepConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.retrain.epochs = e;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    let out_dir = output_path(a.out.as_deref().unwrap_or(Path::new("results/sweep")));
    let opts = RunOptions { out_dir: out_dir.clone(), plot: a.plot, cell_outputs: a.cells, max_groups: None };
    let result = run_sweep(&cfg, &opts)?;
    let failed = result.rows.iter().filter(|r| !r.ok()).count();
    println!("{} rows in {} ({} failed)", result.rows.len(), out_dir.join("sweep.csv").display(), failed);
    for m in result.methods() {
        let medians: Vec<String> = result
            .n_new_values()
            .iter()
            .map(|&n| match result.median(m, n, |r| r.e_theta) {
                Some(v) => format!("{n}:{v:.4}"),
                None => format!("{n}:-"),
            })
            .collect();
        println!("  median E_theta {:<10} {}", m.name(), medians.join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Grow(a) => cmd_grow(a),
        Command::Retrain(a) => cmd_retrain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("fault: {msg}");
            ExitCode::from(3)
        }
    }
}
