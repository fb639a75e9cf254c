//! `ckil generate | train | eval | sweep | probe`.
//!
//! Every option may also come from a flat TOML file passed with `--config`
//! (keys are the long flag names with `_` for `-`). Precedence is
//! flag > config file > `--preset` > built-in default.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::demos::{generate_dataset, load_dataset, save_dataset, to_buffer_with, ScriptedExpert, Trajectory};
use crate::density::{ActionDistance, KernelConfig};
use crate::env::{env_spec, EnvId};
use crate::error::{Error, Result};
use crate::eval::{
    consistency_probe, evaluate, sweep, Actor, Algorithm, BandwidthRule, EvalMode, EvalReport, Estimator, LearnedPolicy,
    SweepConfig, SyntheticMdp, CONTINUOUS_LADDER, DEFAULT_EVAL_EPISODES, DEFAULT_PROBE_REPLICATES, DEFAULT_REPEATS,
    DISCRETE_LADDER, POOL_SIZE,
};
use crate::experiments::preset;
use crate::policy::param_count;
use crate::train::{train_bc, train_ckil, LossRecord, StopReason, TrainConfig, TrainOutcome};

#[derive(Parser, Debug)]
#[command(name = "ckil", version, about = "Conditional kernel imitation learning on classic-control tasks")]
pub struct Cli {
    /// Flat TOML file with option values (flags take precedence)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Cap on worker threads [default: one per core]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out a scripted expert and write a demonstration dataset
    Generate(GenerateArgs),
    /// Fit a CKIL or behavioral-cloning policy to a dataset
    Train(TrainArgs),
    /// Roll out a checkpoint (or the expert / random baseline)
    Eval(EvalArgs),
    /// Sample-complexity sweep over trajectory counts and repeats
    Sweep(SweepArgs),
    /// Kernel-estimate error against a closed-form density as n grows
    Probe(ProbeArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenerateArgs {
    /// mountaincar | cartpole | acrobot
    #[arg(long)]
    env: Option<EnvId>,
    /// Scripted controller to roll out [default: the one for --env]
    #[arg(long)]
    expert: Option<EnvId>,
    /// Number of episodes [default: 50]
    #[arg(long)]
    n_traj: Option<usize>,
    /// Base seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Probability of a uniformly random action [default: 0, or the preset's]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Use the tuned settings for --env as defaults
    #[arg(long, num_args = 0, default_missing_value = "true")]
    preset: Option<bool>,
    /// Output dataset path (JSON lines); a manifest is written next to it
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFlags {
    /// Entropy weight [default: 0.1, or the preset's]
    #[arg(long)]
    lambda: Option<f64>,
    /// Adam step size [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size [default: 256, or the preset's]
    #[arg(long)]
    batch: Option<usize>,
    /// Maximum iterations [default: 20000, or the preset's]
    #[arg(long)]
    iters: Option<usize>,
    /// Iterations without improvement before stopping [default: 2000]
    #[arg(long)]
    patience: Option<usize>,
    /// Hidden width [default: 64]
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct KernelFlags {
    /// kernel | counting [default: counting for mountaincar, kernel otherwise]
    #[arg(long)]
    estimator: Option<String>,
    /// Bandwidth of the (s', a') | (s, a) joint kernel [default: 0.25]
    #[arg(long)]
    h1: Option<f64>,
    /// Bandwidth of the (s, a) kernel [default: 0.25]
    #[arg(long)]
    h2: Option<f64>,
    /// Bandwidth of the s' kernel [default: 0.25]
    #[arg(long)]
    h3: Option<f64>,
    /// exact_match | one_hot [default: exact_match]
    #[arg(long)]
    action_dist: Option<ActionDistance>,
    /// Grid cells per dimension for the counting estimator [default: 15]
    #[arg(long)]
    grid_cells: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainArgs {
    /// mountaincar | cartpole | acrobot
    #[arg(long)]
    env: Option<EnvId>,
    /// Dataset written by `generate`
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// ckil | bc [default: ckil]
    #[arg(long)]
    algo: Option<Algorithm>,
    /// Initialization and minibatch seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Use the tuned settings for --env as defaults
    #[arg(long, num_args = 0, default_missing_value = "true")]
    preset: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    kernel: KernelFlags,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a baseline instead of a checkpoint: expert | random
    #[arg(long)]
    baseline: Option<String>,
    /// Environment (required for baselines; checked against the checkpoint)
    #[arg(long)]
    env: Option<EnvId>,
    /// Exploration rate of the expert baseline [default: 0]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of rollouts [default: 300]
    #[arg(long)]
    episodes: Option<usize>,
    /// sampled | argmax; the other mode is reported alongside [default: sampled]
    #[arg(long)]
    mode: Option<EvalMode>,
    /// Seed of the first episode [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SweepArgs {
    /// mountaincar | cartpole | acrobot
    #[arg(long)]
    env: Option<EnvId>,
    /// Trajectory counts [default: 1,3,10,30,50 for mountaincar, 1,3,7,10,15 otherwise]
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    /// Repeats per count [default: 10]
    #[arg(long)]
    repeats: Option<usize>,
    /// Demonstration pool to draw from; generated when absent
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Size of the generated pool [default: 1000]
    #[arg(long)]
    pool_size: Option<usize>,
    /// Exploration rate of the demonstrator [default: 0, or the preset's]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Algorithms to train [default: ckil,bc]
    #[arg(long, value_delimiter = ',')]
    algos: Option<Vec<Algorithm>>,
    /// Rollouts per trained policy [default: 300]
    #[arg(long)]
    episodes: Option<usize>,
    /// sampled | argmax [default: sampled]
    #[arg(long)]
    mode: Option<EvalMode>,
    /// Base seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Use the tuned settings for --env as defaults
    #[arg(long, num_args = 0, default_missing_value = "true")]
    preset: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    kernel: KernelFlags,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ProbeArgs {
    /// Sample sizes, strictly increasing [default: 100,1000,10000]
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Transition noise scale [default: 0.7]
    #[arg(long)]
    sigma: Option<f64>,
    /// Bandwidth at the reference size [default: 0.02]
    #[arg(long)]
    h_ref: Option<f64>,
    /// Reference size [default: 100]
    #[arg(long)]
    n_ref: Option<usize>,
    /// Bandwidth decay exponent [default: 0.333…]
    #[arg(long)]
    exponent: Option<f64>,
    /// Independent buffers averaged per size [default: 5]
    #[arg(long)]
    replicates: Option<usize>,
    /// Base seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let err = Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, msg);
            let _ = err.print();
            2
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("the argument '--{flag}' is required (on the command line or in --config)")))
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => load_config(p)?,
        None => Map::new(),
    };
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => file.get("threads").map(|v| from_value::<usize>(v.clone(), "threads")).transpose()?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        // Fails only if a pool already exists (e.g. repeated calls in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(layer(&a, &file)?),
        Command::Train(a) => cmd_train(layer(&a, &file)?),
        Command::Eval(a) => cmd_eval(layer(&a, &file)?),
        Command::Sweep(a) => cmd_sweep(layer(&a, &file)?),
        Command::Probe(a) => cmd_probe(layer(&a, &file)?),
    }
}

fn from_value<T: DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config value for `{what}`: {e}")))
}

fn known_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::from(["threads".to_string()]);
    let values = [
        serde_json::to_value(GenerateArgs::default()),
        serde_json::to_value(TrainArgs::default()),
        serde_json::to_value(EvalArgs::default()),
        serde_json::to_value(SweepArgs::default()),
        serde_json::to_value(ProbeArgs::default()),
    ];
    for v in values.into_iter().flatten() {
        if let Value::Object(m) = v {
            keys.extend(m.keys().cloned());
        }
    }
    keys
}

fn load_config(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path)?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    let known = known_keys();
    let mut out = Map::new();
    for (k, v) in table {
        if !known.contains(&k) {
            return Err(Error::Config(format!("{}: unknown key `{k}`", path.display())));
        }
        if v.is_table() {
            return Err(Error::Config(format!("{}: `{k}` must be a plain value (the file is flat)", path.display())));
        }
        out.insert(k, serde_json::to_value(v)?);
    }
    Ok(out)
}

/// Overlays the flags that were given onto the config-file values.
fn layer<T: Serialize + DeserializeOwned>(flags: &T, file: &Map<String, Value>) -> Result<T> {
    let Value::Object(given) = serde_json::to_value(flags)? else {
        unreachable!("argument structs serialize to objects")
    };
    let mut merged = Map::new();
    for (k, v) in given {
        let v = if v.is_null() { file.get(&k).cloned().unwrap_or(Value::Null) } else { v };
        merged.insert(k, v);
    }
    from_value(Value::Object(merged), "arguments")
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    inputs: Vec<InputDigest>,
    /// Digest of the resolved configuration and every input's content.
    input_hash: String,
    started_at: String,
    finished_at: String,
    artifacts: Vec<String>,
}

/// `sha256("blob <len>\0" ++ bytes)`, as git does for blobs.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

struct Run<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    started_at: String,
    inputs: Vec<InputDigest>,
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl<'a, C: Serialize> Run<'a, C> {
    fn start(command: &'a str, config: &'a C, dir: &Path, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| Error::Input(format!("cannot read {}: {e}", p.display())))?;
                Ok(InputDigest { path: p.display().to_string(), sha256: blob_hash(&bytes) })
            })
            .collect::<Result<Vec<_>>>()?;
        fs::create_dir_all(dir)?;
        Ok(Self {
            command,
            config,
            started_at: chrono::Utc::now().to_rfc3339(),
            inputs,
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(p, bytes)?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.config)?);
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
        }
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config: self.config,
            input_hash: hex::encode(h.finalize()),
            inputs: self.inputs,
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            artifacts: self.artifacts,
        };
        fs::write(self.dir.join("manifest.json"), pretty(&manifest)?)?;
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Serialize)]
struct GenerateConfig {
    env: EnvId,
    expert: EnvId,
    n_traj: usize,
    seed: u64,
    epsilon: f64,
    out: PathBuf,
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let env = required(a.env, "env")?;
    let out = required(a.out, "out")?;
    let p = a.preset.unwrap_or(false).then(|| preset(env));
    let cfg = GenerateConfig {
        env,
        expert: a.expert.unwrap_or(env),
        n_traj: a.n_traj.unwrap_or(50),
        seed: a.seed.unwrap_or(0),
        epsilon: a.epsilon.or(p.map(|p| p.epsilon)).unwrap_or(0.0),
        out,
    };
    let expert = ScriptedExpert::for_env(cfg.expert, env, cfg.epsilon)?;
    let dir = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let mut run = Run::start("generate", &cfg, &dir, &[])?;
    let trajs = generate_dataset(env, &expert, cfg.n_traj, cfg.seed)?;
    let name = cfg.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset.jsonl".into());
    save_dataset(&trajs, &run.path(&name))?;
    run.finish()?;
    let steps: usize = trajs.iter().map(|t| t.len()).sum();
    println!("wrote {} episodes ({steps} steps) to {}", trajs.len(), cfg.out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Serialize)]
struct TrainRunConfig {
    env: EnvId,
    data: PathBuf,
    algo: Algorithm,
    estimator: Estimator,
    train: TrainConfig,
}

fn resolve_train(env: EnvId, seed: Option<u64>, use_preset: bool, t: &TrainFlags) -> Result<TrainConfig> {
    let base = if use_preset { preset(env).train } else { TrainConfig::default() };
    let cfg = TrainConfig {
        lambda: t.lambda.unwrap_or(base.lambda),
        learning_rate: t.lr.unwrap_or(base.learning_rate),
        batch_size: t.batch.unwrap_or(base.batch_size),
        max_iters: t.iters.unwrap_or(base.max_iters),
        patience: t.patience.unwrap_or(base.patience),
        width: t.width.unwrap_or(base.width),
        seed: seed.unwrap_or(base.seed),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_estimator(env: EnvId, use_preset: bool, k: &KernelFlags) -> Result<Estimator> {
    let spec = env_spec(env);
    let base = if use_preset {
        preset(env).estimator
    } else if env == EnvId::MountainCar {
        Estimator::Counting { cells: 15 }
    } else {
        Estimator::Kernel(KernelConfig::default_for(spec.state_dim, spec.action_count))
    };
    let kind = k.estimator.clone().unwrap_or_else(|| match base {
        Estimator::Kernel(_) => "kernel".into(),
        Estimator::Counting { .. } => "counting".into(),
    });
    match kind.as_str() {
        "kernel" => {
            let d = match base {
                Estimator::Kernel(c) => c,
                Estimator::Counting { .. } => KernelConfig::default_for(spec.state_dim, spec.action_count),
            };
            let h = |v: Option<f64>, dflt: f64| v.unwrap_or(dflt);
            let cfg = KernelConfig {
                h1: h(k.h1, d.h1),
                h2: h(k.h2, d.h2),
                h3: h(k.h3, d.h3),
                action_distance: k.action_dist.unwrap_or(d.action_distance),
                ..d
            };
            Ok(Estimator::Kernel(cfg.with_space(spec.state_dim, spec.action_count)?))
        }
        "counting" => {
            let cells = k.grid_cells.unwrap_or(match base {
                Estimator::Counting { cells } => cells,
                Estimator::Kernel(_) => 15,
            });
            if cells == 0 {
                return Err(Error::Config("--grid-cells must be positive".into()));
            }
            if [k.h1, k.h2, k.h3].iter().any(Option::is_some) {
                return Err(Error::Config("bandwidths apply to the kernel estimator only".into()));
            }
            Ok(Estimator::Counting { cells })
        }
        other => Err(Error::Config(format!("unknown estimator `{other}` (expected kernel or counting)"))),
    }
}

fn check_dataset(env: EnvId, trajs: &[Trajectory]) -> Result<()> {
    let spec = env_spec(env);
    if trajs.is_empty() {
        return Err(Error::Input("dataset contains no episodes".into()));
    }
    for t in trajs {
        for (s, a) in &t.steps {
            if s.len() != spec.state_dim {
                return Err(Error::Input(format!(
                    "episode {} has {}-dimensional states but {env} expects {}",
                    t.episode_id,
                    s.len(),
                    spec.state_dim
                )));
            }
            if *a >= spec.action_count {
                return Err(Error::Input(format!("episode {} uses action {a} outside 0..{}", t.episode_id, spec.action_count)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyShape {
    pub state_dim: usize,
    pub width: usize,
    pub action_count: usize,
    pub param_count: usize,
}

/// On-disk form of a trained policy.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub env: EnvId,
    pub algo: Algorithm,
    pub shape: PolicyShape,
    pub policy: LearnedPolicy,
    pub estimator: Option<Estimator>,
    pub train: TrainConfig,
    pub stop: StopReason,
    pub best_iter: usize,
    pub n_tuples: usize,
}

pub const CHECKPOINT_FORMAT: &str = "ckil-checkpoint/1";

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Input(format!("{}: not a checkpoint: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!("{}: unsupported checkpoint format `{}`", path.display(), ck.format)));
        }
        let p = &ck.policy.params;
        p.check_shape()?;
        if ck.shape.param_count != param_count(p.state_dim, p.width, p.action_count) || ck.shape.width != p.width {
            return Err(Error::Input(format!("{}: shape header does not match parameters", path.display())));
        }
        Ok(ck)
    }
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let env = required(a.env, "env")?;
    let data = required(a.data, "data")?;
    let out_dir = required(a.out_dir, "out-dir")?;
    let use_preset = a.preset.unwrap_or(false);
    let algo = a.algo.unwrap_or(Algorithm::Ckil);
    let cfg = TrainRunConfig {
        env,
        algo,
        estimator: resolve_estimator(env, use_preset, &a.kernel)?,
        train: resolve_train(env, a.seed, use_preset, &a.train)?,
        data,
    };
    let mut run = Run::start("train", &cfg, &out_dir, &[&cfg.data])?;
    let trajs = load_dataset(&cfg.data)?;
    check_dataset(env, &trajs)?;

    let (buffer, outcome, estimator) = match algo {
        Algorithm::Ckil => {
            let (buffer, cache) = cfg.estimator.prepare(env, &trajs)?;
            cache.save(&run.path("cache.jsonl"))?;
            let outcome = train_ckil(&buffer, &cache, &cfg.train)?;
            (buffer, outcome, Some(cfg.estimator.clone()))
        }
        Algorithm::Bc => {
            let grid = cfg.estimator.grid(env)?;
            let buffer = to_buffer_with(&trajs, env_spec(env).action_count, true, grid)?;
            let outcome = train_bc(&buffer, &cfg.train)?;
            (buffer, outcome, None)
        }
        other => return Err(Error::Config(format!("`{other}` is not trainable")).into()),
    };
    let TrainOutcome { params, history, stop, best_iter } = outcome;
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        env,
        algo,
        shape: PolicyShape {
            state_dim: params.state_dim,
            width: params.width,
            action_count: params.action_count,
            param_count: params.len(),
        },
        policy: LearnedPolicy::new(params, &buffer),
        estimator,
        train: cfg.train.clone(),
        stop,
        best_iter,
        n_tuples: buffer.len(),
    };
    run.write("checkpoint.json", &pretty(&ck)?)?;
    run.write("loss.csv", &csv_bytes(history.iter())?)?;
    run.finish()?;
    let last: Option<&LossRecord> = history.last();
    println!(
        "{algo} on {env}: {} tuples, {} iterations, stop={:?}, best smoothed loss {:.6e} at {best_iter}",
        buffer.len(),
        history.len(),
        stop,
        last.map_or(f64::NAN, |r| r.best_smoothed)
    );
    if stop == StopReason::Diverged {
        return Err(Error::Numeric(format!(
            "training diverged; the last finite parameters were saved to {}",
            out_dir.join("checkpoint.json").display()
        ))
        .into());
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Serialize)]
struct EvalRunConfig {
    env: EnvId,
    actor: String,
    checkpoint: Option<PathBuf>,
    epsilon: Option<f64>,
    episodes: usize,
    mode: EvalMode,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    env: EnvId,
    actor: &'a str,
    report: &'a EvalReport,
    /// The other action-selection mode, for learned policies.
    alongside: Option<&'a EvalReport>,
}

#[derive(Serialize)]
struct ReturnRow {
    episode: usize,
    seed: u64,
    mode: String,
    #[serde(rename = "return")]
    ret: f64,
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let out_dir = required(a.out_dir, "out-dir")?;
    let mode = a.mode.unwrap_or(EvalMode::Sampled);
    let episodes = a.episodes.unwrap_or(DEFAULT_EVAL_EPISODES);
    let seed = a.seed.unwrap_or(0);
    let ck = match (&a.checkpoint, a.baseline.as_deref()) {
        (Some(p), None) => Some(Checkpoint::load(p)?),
        (None, Some("expert" | "random")) => None,
        (None, Some(other)) => {
            return Err(Error::Config(format!("unknown baseline `{other}` (expected expert or random)")).into())
        }
        (Some(_), Some(_)) => return Err(CliError::Usage("--checkpoint and --baseline are mutually exclusive".into())),
        (None, None) => return Err(CliError::Usage("one of '--checkpoint' or '--baseline' is required".into())),
    };
    let env = match (&ck, a.env) {
        (Some(c), Some(e)) if c.env != e => {
            return Err(Error::Config(format!("checkpoint was trained on {} but --env is {e}", c.env)).into())
        }
        (Some(c), _) => c.env,
        (None, e) => required(e, "env")?,
    };
    let actor_name = if ck.is_some() { "learned".to_string() } else { a.baseline.clone().unwrap_or_default() };
    let cfg = EvalRunConfig {
        env,
        actor: actor_name.clone(),
        checkpoint: a.checkpoint.clone(),
        epsilon: (actor_name == "expert").then(|| a.epsilon.unwrap_or(0.0)),
        episodes,
        mode,
        seed,
    };
    let inputs: Vec<&Path> = a.checkpoint.as_deref().into_iter().collect();
    let mut run = Run::start("eval", &cfg, &out_dir, &inputs)?;
    let (report, alongside) = match &ck {
        Some(c) => {
            let other = match mode {
                EvalMode::Sampled => EvalMode::Argmax,
                EvalMode::Argmax => EvalMode::Sampled,
            };
            let r = evaluate(env, &Actor::Learned(&c.policy, mode), episodes, seed)?;
            let o = evaluate(env, &Actor::Learned(&c.policy, other), episodes, seed)?;
            (r, Some(o))
        }
        None => {
            let actor = match cfg.epsilon {
                Some(eps) => Actor::Expert(ScriptedExpert::new(env, eps)?),
                None => Actor::Random,
            };
            (evaluate(env, &actor, episodes, seed)?, None)
        }
    };
    let out = EvalOutput { env, actor: &actor_name, report: &report, alongside: alongside.as_ref() };
    run.write("eval.json", &pretty(&out)?)?;
    let rows = std::iter::once(&report).chain(alongside.iter()).flat_map(|r| {
        r.returns.iter().enumerate().map(move |(k, &ret)| ReturnRow {
            episode: k,
            seed: seed + k as u64,
            mode: r.policy_mode.clone(),
            ret,
        })
    });
    run.write("returns.csv", &csv_bytes(rows)?)?;
    run.finish()?;
    println!("{actor_name} on {env}: mean {:.2} ± {:.2} over {episodes} episodes ({})", report.mean_return, report.std_return, report.policy_mode);
    if let Some(o) = &alongside {
        println!("  {}: mean {:.2} ± {:.2}", o.policy_mode, o.mean_return, o.std_return);
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Serialize)]
struct SweepRunConfig {
    env: EnvId,
    data: Option<PathBuf>,
    pool_size: usize,
    epsilon: f64,
    sweep: SweepConfig,
}

#[derive(Serialize)]
struct SweepCsvRow {
    traj_count: Option<usize>,
    repeat_index: usize,
    algorithm: Algorithm,
    mean_return: f64,
    std_return: f64,
}

/// Slack, relative to the expert's mean, before a learner beating the
/// expert is reported as an ordering violation.
const ORDERING_TOLERANCE: f64 = 0.1;

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let env = required(a.env, "env")?;
    let out_dir = required(a.out_dir, "out-dir")?;
    let use_preset = a.preset.unwrap_or(false);
    let p = preset(env);
    let default_counts = if env == EnvId::MountainCar { DISCRETE_LADDER.to_vec() } else { CONTINUOUS_LADDER.to_vec() };
    let mut sweep_cfg = SweepConfig::new(
        a.counts.clone().unwrap_or(default_counts),
        a.repeats.unwrap_or(DEFAULT_REPEATS),
        resolve_estimator(env, use_preset, &a.kernel)?,
        resolve_train(env, a.seed, use_preset, &a.train)?,
    );
    if let Some(algos) = &a.algos {
        if algos.is_empty() {
            return Err(Error::Config("--algos needs at least one algorithm".into()).into());
        }
        sweep_cfg.algorithms = algos.clone();
    }
    sweep_cfg.eval_episodes = a.episodes.unwrap_or(DEFAULT_EVAL_EPISODES);
    sweep_cfg.eval_mode = a.mode.unwrap_or(EvalMode::Sampled);
    sweep_cfg.seed = a.seed.unwrap_or(0);
    if sweep_cfg.eval_episodes == 0 {
        return Err(Error::Config("--episodes must be at least 1".into()).into());
    }
    let cfg = SweepRunConfig {
        env,
        data: a.data.clone(),
        pool_size: a.pool_size.unwrap_or(POOL_SIZE),
        epsilon: a.epsilon.unwrap_or(if use_preset { p.epsilon } else { 0.0 }),
        sweep: sweep_cfg,
    };
    let expert = ScriptedExpert::new(env, cfg.epsilon)?;
    let inputs: Vec<&Path> = cfg.data.as_deref().into_iter().collect();
    let mut run = Run::start("sweep", &cfg, &out_dir, &inputs)?;
    let pool = match &cfg.data {
        Some(path) => {
            let t = load_dataset(path)?;
            check_dataset(env, &t)?;
            t
        }
        None => generate_dataset(env, &expert, cfg.pool_size, cfg.sweep.seed)?,
    };
    let report = sweep(env, &pool, &expert, &cfg.sweep)?;
    let summary = report.summary();
    let expert_mean = report.returns(Algorithm::Expert, None).first().copied().unwrap_or(0.0);
    let violations = report.ordering_violations(ORDERING_TOLERANCE * expert_mean.abs());
    for v in &violations {
        eprintln!("warning: {v}");
    }
    run.write(
        "sweep.csv",
        &csv_bytes(report.rows.iter().map(|r| SweepCsvRow {
            traj_count: r.traj_count,
            repeat_index: r.repeat_index,
            algorithm: r.algorithm,
            mean_return: r.mean_return,
            std_return: r.std_return,
        }))?,
    )?;
    run.write("summary.csv", &csv_bytes(summary.iter())?)?;
    run.write("sweep.json", &pretty(&serde_json::json!({ "report": &report, "summary": &summary, "ordering_violations": &violations }))?)?;
    run.finish()?;
    for s in &summary {
        let count = s.traj_count.map_or("-".to_string(), |c| c.to_string());
        println!(
            "{:>6} {:>4}  mean {:9.2}  median {:9.2}  stderr {:7.2}",
            s.algorithm.to_string(),
            count,
            s.mean_return,
            s.median_return,
            s.stderr_return
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- probe

#[derive(Debug, Serialize)]
struct ProbeRunConfig {
    n: Vec<usize>,
    mdp: SyntheticMdp,
    bandwidth: BandwidthRule,
    replicates: usize,
    seed: u64,
}

fn cmd_probe(a: ProbeArgs) -> CliResult<()> {
    let out_dir = required(a.out_dir, "out-dir")?;
    let mdp = SyntheticMdp { sigma: a.sigma.unwrap_or(SyntheticMdp::default().sigma), ..SyntheticMdp::default() };
    let d = BandwidthRule::default();
    let rule = BandwidthRule {
        h_ref: a.h_ref.unwrap_or(d.h_ref),
        n_ref: a.n_ref.unwrap_or(d.n_ref),
        exponent: a.exponent.unwrap_or(d.exponent),
    };
    rule.validate()?;
    mdp.validate()?;
    let cfg = ProbeRunConfig {
        n: a.n.unwrap_or_else(|| vec![100, 1000, 10000]),
        mdp,
        bandwidth: rule,
        replicates: a.replicates.unwrap_or(DEFAULT_PROBE_REPLICATES),
        seed: a.seed.unwrap_or(0),
    };
    let mut run = Run::start("probe", &cfg, &out_dir, &[])?;
    let report = consistency_probe(&cfg.mdp, &cfg.n, &cfg.bandwidth, cfg.replicates, cfg.seed)?;
    run.write("probe.csv", &csv_bytes(report.rows.iter())?)?;
    run.write("probe.json", &pretty(&report)?)?;
    run.finish()?;
    for r in &report.rows {
        println!("n={:>7}  h={:.5}  mean |T̂ - T| = {:.6}", r.n, r.bandwidth, r.mean_abs_error);
    }
    Ok(())
}
