//! Experiment configuration and the `train`, `eval`, `sweep` and `compare`
//! commands.
//!
//! Every command writes below one output directory. File layouts are
//! versioned by [`SCHEMA_VERSION`], recorded in each directory's
//! `manifest.json`.

use std::fs;
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::InertiaModel;
use crate::env::{
    encode_action, Coordination, DecodedAction, EpisodeSummary, ReachingEnv, StepRecord, TaskConfig,
    VmcConfiguration, ACTION_DIM, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::kinematics::ChainModel;
use crate::neural::{sample_and_logprob, Checkpoint, GaussianPolicy, Parameters};
use crate::ppo::{
    evaluate_episode, DescentConfig, EpisodeRecord, IterationMetrics, PpoConfig, ShapingSetup, Trainer, TrainerConfig,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::semantic::{
    GuidanceConfig, GuidanceRecord, LabelSource, Labeler, RemoteSettings, RuleThresholds, SemanticLabels,
    ShapingWeights,
};
use crate::vmc::{CoordinationWeights, GainSet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// `builtin:planar3`, `builtin:panda`, or a chain file relative to the
    /// config file.
    #[serde(default = "default_chain")]
    pub chain: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_chain() -> String {
    "builtin:planar3".into()
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            chain: default_chain(),
            out_dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelerKind {
    Rules,
    Remote,
}

impl LabelerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rules" => Ok(Self::Rules),
            "remote" => Ok(Self::Remote),
            other => Err(Error::config("labeler.backend", format!("unknown labeler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelerConfig {
    /// Semantic shaping on or off.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "rules")]
    pub backend: LabelerKind,
    #[serde(default)]
    pub thresholds: RuleThresholds,
    #[serde(default)]
    pub initial_weights: ShapingWeights,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteSettings>,
}

fn yes() -> bool {
    true
}
fn rules() -> LabelerKind {
    LabelerKind::Rules
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            backend: LabelerKind::Rules,
            thresholds: RuleThresholds::default(),
            initial_weights: ShapingWeights::default(),
            guidance: GuidanceConfig::default(),
            remote: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training budget in episodes of `task.episode_steps` steps.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Explicit iteration count; derived from the episode budget when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default = "default_vmc")]
    pub vmc_configuration: VmcConfiguration,
    #[serde(default = "yes")]
    pub lyapunov: bool,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Keep the step trace of every n-th training episode (0 = none).
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    /// Write a checkpoint every n iterations (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_episodes() -> usize {
    500
}
fn default_vmc() -> VmcConfiguration {
    VmcConfiguration::FourSixE
}
fn default_eval_episodes() -> usize {
    20
}
fn default_trace_every() -> usize {
    10
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            episodes: default_episodes(),
            iterations: None,
            vmc_configuration: default_vmc(),
            lyapunov: true,
            eval_episodes: default_eval_episodes(),
            trace_every: default_trace_every(),
            checkpoint_every: 0,
        }
    }
}

/// Hand-tuned fixed-gain controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kp: f64,
    pub kd: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kp: 300.0,
            kd: 30.0,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_grid")]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_cell_episodes")]
    pub episodes_per_cell: usize,
}

fn default_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}
fn default_cell_episodes() -> usize {
    10
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha_grid: default_grid(),
            beta_grid: default_grid(),
            episodes_per_cell: default_cell_episodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_compare")]
    pub configs: Vec<VmcConfiguration>,
}

fn default_compare() -> Vec<VmcConfiguration> {
    VmcConfiguration::ALL.to_vec()
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            configs: default_compare(),
        }
    }
}

/// A complete experiment description, as read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    pub task: TaskConfig,
    pub inertia: InertiaModel,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub descent: DescentConfig,
    #[serde(default)]
    pub labeler: LabelerConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

impl ExperimentConfig {
    /// Parse TOML text. Relative chain paths resolve against `base_dir`.
    pub fn from_toml(text: &str, origin: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if let Some(dir) = base_dir {
            if !cfg.paths.chain.starts_with("builtin:") && Path::new(&cfg.paths.chain).is_relative() {
                cfg.paths.chain = dir.join(&cfg.paths.chain).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string(), path.parent())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            path: "resolved config".into(),
            message: e.to_string(),
        })
    }

    pub fn chain(&self) -> Result<ChainModel> {
        ChainModel::load(&self.paths.chain).map_err(|e| Error::config("paths.chain", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let chain = self.chain()?;
        self.inertia
            .validate(chain.dof())
            .map_err(|e| rekey(e, "inertia"))?;
        self.task.validate(&chain)?;
        self.ppo.validate()?;
        self.descent.validate()?;
        self.descent.goal_metric.validate(OBS_DIM)?;
        self.labeler.initial_weights.validate()?;
        let g = &self.labeler.guidance;
        if !(0.0..=1.0).contains(&g.incidence_threshold) {
            return Err(Error::config("labeler.guidance.incidence_threshold", "must lie in [0, 1]"));
        }
        if !(g.factor >= 1.0 && g.factor.is_finite()) {
            return Err(Error::config("labeler.guidance.factor", "must be >= 1"));
        }
        if !(g.cap >= 0.0 && g.cap.is_finite()) {
            return Err(Error::config("labeler.guidance.cap", "must be non-negative"));
        }
        if g.every_n_iterations == Some(0) {
            return Err(Error::config("labeler.guidance.every_n_iterations", "must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "at least one seed is required"));
        }
        if self.run.episodes == 0 && self.run.iterations.is_none() {
            return Err(Error::config("run.episodes", "must be positive"));
        }
        if self.run.iterations == Some(0) {
            return Err(Error::config("run.iterations", "must be positive"));
        }
        if self.run.eval_episodes == 0 {
            return Err(Error::config("run.eval_episodes", "must be positive"));
        }
        if let Some(b) = &self.baseline {
            let gains = GainSet::uniform(b.kp, b.kd);
            if !gains.within(&self.task.gains) {
                return Err(Error::config("baseline.kp", "baseline gains lie outside task.gains"));
            }
            if !(0.0..=1.0).contains(&b.alpha) || !(0.0..=1.0).contains(&b.beta) {
                return Err(Error::config("baseline.alpha", "alpha and beta must lie in [0, 1]"));
            }
        }
        validate_grid(&self.sweep.alpha_grid, "sweep.alpha_grid")?;
        validate_grid(&self.sweep.beta_grid, "sweep.beta_grid")?;
        if self.sweep.episodes_per_cell == 0 {
            return Err(Error::config("sweep.episodes_per_cell", "must be positive"));
        }
        if self.compare.configs.is_empty() {
            return Err(Error::config("compare.configs", "at least one configuration is required"));
        }
        if self.labeler.enabled && self.labeler.backend == LabelerKind::Remote {
            RemoteSettings::from_env(self.labeler.remote.as_ref())?;
        }
        Ok(())
    }

    /// PPO iterations of one training run.
    pub fn iterations(&self) -> usize {
        self.run
            .iterations
            .unwrap_or_else(|| (self.run.episodes * self.task.episode_steps).div_ceil(self.ppo.batch))
    }

    pub fn env(&self, coordination: Coordination) -> Result<ReachingEnv> {
        ReachingEnv::new(self.chain()?, self.inertia.clone(), self.task.clone(), coordination)
    }

    pub fn labeler(&self) -> Result<Labeler> {
        let th = self.labeler.thresholds;
        let success = self.task.success_threshold;
        Ok(match self.labeler.backend {
            LabelerKind::Rules => Labeler::rules(th, success),
            LabelerKind::Remote => Labeler::remote(RemoteSettings::from_env(self.labeler.remote.as_ref())?, th, success),
        })
    }

    pub fn trainer_config(&self, seed: u64) -> Result<TrainerConfig> {
        let shaping = if self.labeler.enabled {
            Some(ShapingSetup {
                labeler: self.labeler()?,
                initial_weights: self.labeler.initial_weights,
                guidance: self.labeler.guidance,
            })
        } else {
            None
        };
        Ok(TrainerConfig {
            ppo: self.ppo.clone(),
            descent: self.descent.clone(),
            lyapunov: self.run.lyapunov,
            shaping,
            seed,
            iterations: self.iterations(),
            trace_every: self.run.trace_every,
        })
    }

    pub fn trainer(&self, seed: u64) -> Result<Trainer<ReachingEnv>> {
        let coordination = Coordination::Policy(self.run.vmc_configuration);
        let envs = (0..self.ppo.num_envs)
            .map(|_| self.env(coordination))
            .collect::<Result<Vec<_>>>()?;
        Trainer::new(self.trainer_config(seed)?, envs)
    }
}

fn rekey(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { key, reason } => {
            let key = match key.split_once('.') {
                Some((_, rest)) => format!("{prefix}.{rest}"),
                None => format!("{prefix}.{key}"),
            };
            Error::Config { key, reason }
        }
        other => other,
    }
}

fn validate_grid(grid: &[f64], key: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config(key, "grid must not be empty"));
    }
    if !grid.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::config(key, "grid values must lie in [0, 1]"));
    }
    Ok(())
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub no_llm: bool,
    pub no_lyapunov: bool,
    pub labeler: Option<LabelerKind>,
    pub vmc_configuration: Option<VmcConfiguration>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        if let Some(o) = &self.out_dir {
            cfg.paths.out_dir = o.clone();
        }
        if self.no_llm {
            cfg.labeler.enabled = false;
        }
        if self.no_lyapunov {
            cfg.run.lyapunov = false;
        }
        if let Some(l) = self.labeler {
            cfg.labeler.backend = l;
        }
        if let Some(v) = self.vmc_configuration {
            cfg.run.vmc_configuration = v;
        }
        cfg
    }
}

/// Map an error to the process exit code: 1 for configuration problems,
/// 2 for faults while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } => 1,
        _ => 2,
    }
}

/// Output directory that refuses paths escaping its root.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolve `rel` below the root, creating parent directories.
    pub fn path(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let rel = rel.as_ref();
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(Error::config(
                "paths.out_dir",
                format!("refusing to write `{}` outside the output directory", rel.display()),
            ));
        }
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn sub(&self, rel: impl AsRef<Path>) -> Result<OutDir> {
        let p = self.path(rel)?;
        OutDir::create(p)
    }

    /// Write through a temporary sibling and rename into place.
    pub fn write_atomic(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        let mut tmp = p.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn write_manifest(&self, command: &str, files: &[&str]) -> Result<()> {
        let m = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "files": files,
        });
        self.write_atomic("manifest.json", serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(())
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Parse {
        path: "csv".into(),
        message: e.to_string(),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        path: "csv".into(),
        message: e.to_string(),
    }
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// One line of `episodes.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLine {
    pub iteration: usize,
    pub env: usize,
    pub truncated: bool,
    pub summary: EpisodeSummary,
    pub base_return: f64,
    pub shaped_return: f64,
    pub labels: Option<SemanticLabels>,
    pub label_source: Option<LabelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepRecord>>,
}

impl EpisodeLine {
    fn new(iteration: usize, ep: EpisodeRecord) -> Self {
        Self {
            iteration,
            env: ep.env,
            truncated: ep.truncated,
            summary: ep.summary,
            base_return: ep.base_return,
            shaped_return: ep.shaped_return,
            labels: ep.labels,
            label_source: ep.label_source,
            trace: ep.trace,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointInfo {
    seed: u64,
    vmc_configuration: VmcConfiguration,
    obs_dim: usize,
    action_dim: usize,
}

/// Result of training one seed.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub seed: u64,
    pub metrics: Vec<IterationMetrics>,
    pub guidance: Vec<GuidanceRecord>,
    pub policy: GaussianPolicy,
    pub checkpoint: Checkpoint,
    /// Directory holding the artifacts, when written.
    pub dir: Option<PathBuf>,
}

/// Train one seed. With `out`, artifacts stream into it as training runs.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&OutDir>) -> Result<TrainRun> {
    let mut trainer = cfg.trainer(seed)?;
    let info = serde_json::to_string(&CheckpointInfo {
        seed,
        vmc_configuration: cfg.run.vmc_configuration,
        obs_dim: OBS_DIM,
        action_dim: ACTION_DIM,
    })?;
    let mut writers = match out {
        Some(dir) => {
            let metrics = csv::Writer::from_path(dir.path("metrics.csv")?).map_err(csv_err)?;
            let episodes = fs::File::create(dir.path("episodes.jsonl")?).map_err(|e| Error::io(dir.root(), e))?;
            let guidance = fs::File::create(dir.path("guidance.jsonl")?).map_err(|e| Error::io(dir.root(), e))?;
            dir.write_atomic("resolved_config.toml", cfg.to_toml()?.as_bytes())?;
            Some((
                metrics,
                std::io::BufWriter::new(episodes),
                std::io::BufWriter::new(guidance),
            ))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut guidance = Vec::new();
    let total = cfg.iterations();
    while !trainer.is_finished() {
        let report = trainer.train_iteration()?;
        let it = report.metrics.iteration;
        log::info!(
            "seed {seed} iteration {it}/{total}: return {:.3} final error {:.4} success {:.2}",
            report.metrics.mean_return,
            report.metrics.mean_final_error,
            report.metrics.success_rate
        );
        if let (Some((mw, ew, gw)), Some(dir)) = (writers.as_mut(), out) {
            mw.serialize(&report.metrics).map_err(csv_err)?;
            mw.flush().map_err(|e| Error::io(dir.root(), e))?;
            for ep in report.episodes {
                serde_json::to_writer(&mut *ew, &EpisodeLine::new(it, ep))?;
                ew.write_all(b"\n").map_err(|e| Error::io(dir.root(), e))?;
            }
            if let Some(g) = &report.guidance {
                serde_json::to_writer(&mut *gw, g)?;
                gw.write_all(b"\n").map_err(|e| Error::io(dir.root(), e))?;
            }
            if cfg.run.checkpoint_every > 0 && it % cfg.run.checkpoint_every == 0 && it < total {
                let ck = trainer.checkpoint(&info)?;
                dir.write_atomic(format!("checkpoints/iter_{it:05}.ckpt"), &ck.to_bytes())?;
            }
        }
        if let Some(g) = report.guidance {
            guidance.push(g);
        }
        metrics.push(report.metrics);
    }
    let checkpoint = trainer.checkpoint(&info)?;
    let dir = match (out, writers) {
        (Some(dir), Some((mut mw, mut ew, mut gw))) => {
            mw.flush().map_err(|e| Error::io(dir.root(), e))?;
            ew.flush().map_err(|e| Error::io(dir.root(), e))?;
            gw.flush().map_err(|e| Error::io(dir.root(), e))?;
            dir.write_atomic("checkpoints/final.ckpt", &checkpoint.to_bytes())?;
            dir.write_manifest(
                "train",
                &["metrics.csv", "episodes.jsonl", "guidance.jsonl", "resolved_config.toml", "checkpoints/final.ckpt"],
            )?;
            Some(dir.root().to_path_buf())
        }
        _ => None,
    };
    Ok(TrainRun {
        seed,
        metrics,
        guidance,
        policy: trainer.policy.clone(),
        checkpoint,
        dir,
    })
}

/// Train every configured seed into `<out>/seed_<n>/`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainRun>> {
    cfg.validate()?;
    let out = OutDir::create(&cfg.paths.out_dir)?;
    out.write_atomic("resolved_config.toml", cfg.to_toml()?.as_bytes())?;
    let mut runs = Vec::new();
    for &seed in &cfg.run.seeds {
        let dir = out.sub(format!("seed_{seed}"))?;
        runs.push(train_seed(cfg, seed, Some(&dir))?);
    }
    out.write_manifest("train", &["resolved_config.toml"])?;
    Ok(runs)
}

/// What drives the controller during evaluation.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Mean action of a trained policy.
    Policy(GaussianPolicy),
    /// Actions sampled from a policy; `seed` drives the noise.
    Sampled { policy: GaussianPolicy, seed: u64 },
    /// Constant gains and weights.
    Fixed(BaselineConfig),
}

impl Controller {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut policy = GaussianPolicy::new(OBS_DIM, ACTION_DIM, 0.0, &mut stream_rng(0, Stream::PolicyInit, 0));
        policy.load_flat(ck.section("policy")?)?;
        Ok(Controller::Policy(policy))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
    }

    fn baseline_action(b: &BaselineConfig, cfg: &TaskConfig) -> Vec<f64> {
        let a = DecodedAction {
            gains: GainSet::uniform(b.kp, b.kd),
            weights: CoordinationWeights::new(b.alpha, b.beta),
        };
        encode_action(&a, &cfg.gains).to_vec()
    }

    /// Coordination for an evaluation environment, unless a sweep forces one.
    fn coordination(&self, vmc: VmcConfiguration) -> Coordination {
        match self {
            Controller::Fixed(b) => Coordination::Fixed {
                alpha: b.alpha,
                beta: b.beta,
            },
            _ => Coordination::Policy(vmc),
        }
    }
}

/// Evaluation seed of episode `k` under master `seed`.
pub fn eval_episode_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, Stream::Evaluation, k as u64)
}

/// One evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub seed: u64,
    pub episode: usize,
    pub summary: EpisodeSummary,
    pub episode_return: f64,
}

/// Run `n` episodes of `controller` from master `seed`.
pub fn evaluate(
    env: &mut ReachingEnv,
    controller: &Controller,
    seed: u64,
    n: usize,
) -> Result<Vec<EvalEpisode>> {
    let task = env.config().clone();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let ep_seed = eval_episode_seed(seed, k);
        let (summary, episode_return) = match controller {
            Controller::Policy(p) => evaluate_episode(env, &mut |o| p.mlp.forward_one(o), ep_seed)?,
            Controller::Sampled { policy, seed: s } => {
                let mut rng: ChaCha8Rng = stream_rng(*s, Stream::Evaluation, (1 << 32) | k as u64);
                let log_std = policy.clamped_log_std();
                evaluate_episode(
                    env,
                    &mut |o| {
                        let m = policy.mlp.forward_one(o)?;
                        Ok(sample_and_logprob(&m, &log_std, &mut rng).0)
                    },
                    ep_seed,
                )?
            }
            Controller::Fixed(b) => {
                let a = Controller::baseline_action(b, &task);
                evaluate_episode(env, &mut |_| Ok(a.clone()), ep_seed)?
            }
        };
        out.push(EvalEpisode {
            seed,
            episode: k,
            summary,
            episode_return,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = xs.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Aggregate of evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub final_error: MeanStd,
    pub reach_time: MeanStd,
    pub peak_f_rep: MeanStd,
    pub mean_f_rep: MeanStd,
    pub episode_return: MeanStd,
    pub success_rate: f64,
}

impl EvalSummary {
    pub fn of(eps: &[EvalEpisode]) -> Self {
        let m = |f: fn(&EvalEpisode) -> f64| MeanStd::of(eps.iter().map(f));
        Self {
            episodes: eps.len(),
            final_error: m(|e| e.summary.final_error),
            reach_time: m(|e| e.summary.reach_time),
            peak_f_rep: m(|e| e.summary.peak_f_rep),
            mean_f_rep: m(|e| e.summary.mean_f_rep),
            episode_return: m(|e| e.episode_return),
            success_rate: m(|e| e.summary.success as u8 as f64).mean,
        }
    }
}

/// Flat row of `eval_summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: String,
    pub episodes: usize,
    pub final_error_mean: f64,
    pub final_error_std: f64,
    pub reach_time_mean: f64,
    pub reach_time_std: f64,
    pub peak_f_rep_mean: f64,
    pub peak_f_rep_std: f64,
    pub mean_f_rep_mean: f64,
    pub mean_f_rep_std: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub success_rate: f64,
}

impl EvalRow {
    fn new(seed: String, s: &EvalSummary) -> Self {
        Self {
            seed,
            episodes: s.episodes,
            final_error_mean: s.final_error.mean,
            final_error_std: s.final_error.std,
            reach_time_mean: s.reach_time.mean,
            reach_time_std: s.reach_time.std,
            peak_f_rep_mean: s.peak_f_rep.mean,
            peak_f_rep_std: s.peak_f_rep.std,
            mean_f_rep_mean: s.mean_f_rep.mean,
            mean_f_rep_std: s.mean_f_rep.std,
            return_mean: s.episode_return.mean,
            return_std: s.episode_return.std,
            success_rate: s.success_rate,
        }
    }
}

/// Evaluation output: per-seed rows plus the pooled row.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub episodes: Vec<EvalEpisode>,
    pub per_seed: Vec<(u64, EvalSummary)>,
    pub overall: EvalSummary,
}

/// Pick the controller for `eval` and `sweep`: a checkpoint when given,
/// otherwise the config's fixed-gain baseline.
pub fn resolve_controller(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Controller> {
    match (checkpoint, &cfg.baseline) {
        (Some(p), _) => Controller::load(p),
        (None, Some(b)) => Ok(Controller::Fixed(*b)),
        (None, None) => Err(Error::config(
            "baseline",
            "no checkpoint given and the config has no [baseline] section",
        )),
    }
}

/// Deterministic evaluation over every configured seed.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let controller = resolve_controller(cfg, checkpoint)?;
    let report = eval_report(cfg, &controller)?;
    let out = OutDir::create(&cfg.paths.out_dir)?;
    let mut rows: Vec<EvalRow> = report
        .per_seed
        .iter()
        .map(|(s, sum)| EvalRow::new(s.to_string(), sum))
        .collect();
    rows.push(EvalRow::new("all".into(), &report.overall));
    out.write_atomic("eval_summary.csv", &csv_bytes(&rows)?)?;
    out.write_atomic("eval_episodes.jsonl", &jsonl_bytes(&report.episodes)?)?;
    out.write_atomic("resolved_config.toml", cfg.to_toml()?.as_bytes())?;
    out.write_manifest("eval", &["eval_summary.csv", "eval_episodes.jsonl", "resolved_config.toml"])?;
    Ok(report)
}

pub fn eval_report(cfg: &ExperimentConfig, controller: &Controller) -> Result<EvalReport> {
    let mut env = cfg.env(controller.coordination(cfg.run.vmc_configuration))?;
    let mut episodes = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.run.seeds {
        let eps = evaluate(&mut env, controller, seed, cfg.run.eval_episodes)?;
        per_seed.push((seed, EvalSummary::of(&eps)));
        episodes.extend(eps);
    }
    let overall = EvalSummary::of(&episodes);
    Ok(EvalReport {
        episodes,
        per_seed,
        overall,
    })
}

/// One (α, β) cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub mean_return: f64,
    pub mean_final_error: f64,
    pub mean_peak_f_rep: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Row-major over α then β.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, i: usize, j: usize) -> &SweepCell {
        &self.cells[i * self.beta_grid.len() + j]
    }

    /// `alpha\beta` header row, then one row per α.
    pub fn grid_csv(&self, value: fn(&SweepCell) -> f64) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["alpha\\beta".to_string()];
        header.extend(self.beta_grid.iter().map(|b| b.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (i, a) in self.alpha_grid.iter().enumerate() {
            let mut row = vec![a.to_string()];
            row.extend((0..self.beta_grid.len()).map(|j| value(self.cell(i, j)).to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Parse {
            path: "csv".into(),
            message: e.to_string(),
        })
    }
}

/// Evaluate `controller` with the coordination forced to every grid cell.
/// All cells share the same evaluation targets.
pub fn sweep(cfg: &ExperimentConfig, controller: &Controller) -> Result<SweepResult> {
    validate_grid(&cfg.sweep.alpha_grid, "sweep.alpha_grid")?;
    validate_grid(&cfg.sweep.beta_grid, "sweep.beta_grid")?;
    let seed = cfg.run.seeds.first().copied().unwrap_or(0);
    let mut env = cfg.env(Coordination::Fixed { alpha: 0.0, beta: 0.0 })?;
    let mut cells = Vec::new();
    for &alpha in &cfg.sweep.alpha_grid {
        for &beta in &cfg.sweep.beta_grid {
            env.set_coordination(Coordination::Fixed { alpha, beta });
            let eps = evaluate(&mut env, controller, seed, cfg.sweep.episodes_per_cell)?;
            let s = EvalSummary::of(&eps);
            cells.push(SweepCell {
                alpha,
                beta,
                mean_return: s.episode_return.mean,
                mean_final_error: s.final_error.mean,
                mean_peak_f_rep: s.peak_f_rep.mean,
                success_rate: s.success_rate,
            });
        }
    }
    Ok(SweepResult {
        alpha_grid: cfg.sweep.alpha_grid.clone(),
        beta_grid: cfg.sweep.beta_grid.clone(),
        cells,
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<SweepResult> {
    cfg.validate()?;
    let controller = resolve_controller(cfg, checkpoint)?;
    let result = sweep(cfg, &controller)?;
    let out = OutDir::create(&cfg.paths.out_dir)?;
    out.write_atomic("sweep_reward.csv", &result.grid_csv(|c| c.mean_return)?)?;
    out.write_atomic("sweep_final_error.csv", &result.grid_csv(|c| c.mean_final_error)?)?;
    out.write_atomic("sweep_peak_f_rep.csv", &result.grid_csv(|c| c.mean_peak_f_rep)?)?;
    out.write_atomic("sweep_cells.csv", &csv_bytes(&result.cells)?)?;
    out.write_atomic("resolved_config.toml", cfg.to_toml()?.as_bytes())?;
    out.write_manifest(
        "sweep",
        &[
            "sweep_reward.csv",
            "sweep_final_error.csv",
            "sweep_peak_f_rep.csv",
            "sweep_cells.csv",
            "resolved_config.toml",
        ],
    )?;
    Ok(result)
}

/// One row of `compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub config: String,
    pub seed: u64,
    pub final_error: f64,
    pub reach_time: f64,
    pub peak_f_rep: f64,
    pub mean_f_rep: f64,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// One row of a learning-curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub mean_base_return: f64,
    pub mean_final_error: f64,
    pub success_rate: f64,
    pub mean_peak_f_rep: f64,
    pub descent_violation_rate: f64,
}

impl From<&IterationMetrics> for CurveRow {
    fn from(m: &IterationMetrics) -> Self {
        Self {
            iteration: m.iteration,
            env_steps: m.env_steps,
            mean_return: m.mean_return,
            mean_base_return: m.mean_base_return,
            mean_final_error: m.mean_final_error,
            success_rate: m.success_rate,
            mean_peak_f_rep: m.mean_peak_f_rep,
            descent_violation_rate: m.descent_violation_rate,
        }
    }
}

/// `config,n,<metric>_mean,<metric>_std,...` per configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummaryRow {
    pub config: String,
    pub seeds: usize,
    pub final_error_mean: f64,
    pub final_error_std: f64,
    pub peak_f_rep_mean: f64,
    pub peak_f_rep_std: f64,
    pub mean_f_rep_mean: f64,
    pub mean_f_rep_std: f64,
    pub reach_time_mean: f64,
    pub reach_time_std: f64,
    pub success_rate_mean: f64,
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub rows: Vec<CompareRow>,
    pub summary: Vec<CompareSummaryRow>,
    pub curves: Vec<(VmcConfiguration, u64, Vec<CurveRow>)>,
}

/// Train and evaluate each configuration under the same seeds.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareResult> {
    cfg.validate()?;
    let out = OutDir::create(&cfg.paths.out_dir)?;
    out.write_atomic("resolved_config.toml", cfg.to_toml()?.as_bytes())?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut files = vec!["compare.csv".to_string(), "compare_summary.csv".to_string()];
    for &vmc in &cfg.compare.configs {
        let mut c = cfg.clone();
        c.run.vmc_configuration = vmc;
        for &seed in &c.run.seeds {
            let dir = out.sub(format!("runs/{}/seed_{seed}", vmc.name()))?;
            let run = train_seed(&c, seed, Some(&dir))?;
            let mut env = c.env(Coordination::Policy(vmc))?;
            let eps = evaluate(&mut env, &Controller::Policy(run.policy.clone()), seed, c.run.eval_episodes)?;
            let s = EvalSummary::of(&eps);
            rows.push(CompareRow {
                config: vmc.name().into(),
                seed,
                final_error: s.final_error.mean,
                reach_time: s.reach_time.mean,
                peak_f_rep: s.peak_f_rep.mean,
                mean_f_rep: s.mean_f_rep.mean,
                success_rate: s.success_rate,
                mean_return: s.episode_return.mean,
            });
            let curve: Vec<CurveRow> = run.metrics.iter().map(CurveRow::from).collect();
            let name = format!("curves/{}_seed{seed}.csv", vmc.name());
            out.write_atomic(&name, &csv_bytes(&curve)?)?;
            files.push(name);
            curves.push((vmc, seed, curve));
        }
    }
    let summary = compare_summary(&cfg.compare.configs, &rows);
    out.write_atomic("compare.csv", &csv_bytes(&rows)?)?;
    out.write_atomic("compare_summary.csv", &csv_bytes(&summary)?)?;
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    out.write_manifest("compare", &names)?;
    Ok(CompareResult { rows, summary, curves })
}

pub fn compare_summary(configs: &[VmcConfiguration], rows: &[CompareRow]) -> Vec<CompareSummaryRow> {
    configs
        .iter()
        .map(|vmc| {
            let r: Vec<&CompareRow> = rows.iter().filter(|r| r.config == vmc.name()).collect();
            let m = |f: fn(&CompareRow) -> f64| MeanStd::of(r.iter().map(|x| f(x)));
            let (fe, pf, mf, rt) = (
                m(|x| x.final_error),
                m(|x| x.peak_f_rep),
                m(|x| x.mean_f_rep),
                m(|x| x.reach_time),
            );
            CompareSummaryRow {
                config: vmc.name().into(),
                seeds: r.len(),
                final_error_mean: fe.mean,
                final_error_std: fe.std,
                peak_f_rep_mean: pf.mean,
                peak_f_rep_std: pf.std,
                mean_f_rep_mean: mf.mean,
                mean_f_rep_std: mf.std,
                reach_time_mean: rt.mean,
                reach_time_std: rt.std,
                success_rate_mean: m(|x| x.success_rate).mean,
            }
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 4]), 0.0);
    }

    #[test]
    fn out_dir_refuses_escape() {
        let tmp = tempfile::tempdir().unwrap();
        let out = OutDir::create(tmp.path().join("o")).unwrap();
        assert!(out.path("../x").is_err());
        assert!(out.path("/etc/x").is_err());
        assert!(out.path("a/b.csv").is_ok());
    }

    #[test]
    fn mean_std_population() {
        let m = MeanStd::of([1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
