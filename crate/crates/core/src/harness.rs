//! Run configuration, the online training loop, evaluation and sweeps.
//!
//! A run is a pure function of its [`RunConfig`]: every random stream is
//! derived from `seed`, so the same file produces the same CSV bytes.
//!
//! Training CSV columns (one row per `log_interval` steps, then a summary):
//!
//! `kind,step,episodes,window_episodes,mean_reward,mean_depth,min_reward,
//! reward_variance,mean_beta,mean_alpha,mean_action_td_loss,
//! mean_state_td_loss,mean_td_loss,mean_policy_loss,divergences`
//!
//! `kind` is `log`, `summary`, or `diverged` (the run stopped after more than
//! [`DIVERGENCE_PATIENCE`] consecutive non-finite batches). Window metrics
//! cover the last `eval_window` finished episodes; loss columns average the
//! updates made during those episodes and are `NaN` where a quantity does
//! not exist for the configured agent.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentConfig, Backbone, TdMode, UpdateReport};
use crate::buffer::{ReplayBuffer, Transition};
use crate::env::{env_step, Env, EnvConfig, TraceWriter};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Environment variable that redirects every output file into a directory.
pub const OUTPUT_DIR_ENV: &str = "TDLAB_OUTPUT_DIR";
/// Consecutive skipped batches tolerated before a run is halted.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub eval_window: usize,
    pub log_interval: usize,
    pub output_path: String,
    pub batch_size: usize,
    pub warmup_episodes: usize,
    pub buffer_capacity: usize,
    /// Also write the replay buffer as CSV at the end of the run.
    pub dump_buffer: bool,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    /// Grid used by `tdlab sweep` when no axes are given on the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

/// Axes and seeds of a sweep, as stored in a config file:
///
/// ```toml
/// [sweep]
/// seeds = [1, 2, 3]
/// axes = [{ axis = "sigma", values = [0.1, 0.5] }, { axis = "td_mode", values = ["original", "decomposed"] }]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub axes: Vec<AxisValues>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 30_000,
            eval_window: 100,
            log_interval: 100,
            output_path: "runs/train.csv".into(),
            batch_size: 128,
            warmup_episodes: 100,
            buffer_capacity: 100_000,
            dump_buffer: false,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `total_steps = 0` is allowed (warm-up only); otherwise it must cover
    /// at least one evaluation window.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.eval_window == 0 || self.log_interval == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("eval_window, log_interval, batch_size and buffer_capacity must be positive");
        }
        if self.total_steps != 0 && self.total_steps < self.eval_window {
            return bad("total_steps must be at least eval_window");
        }
        Ok(())
    }

    /// Where this run's CSV goes, honouring [`OUTPUT_DIR_ENV`].
    pub fn resolved_output(&self) -> PathBuf {
        resolve_output(Path::new(&self.output_path))
    }
}

/// Relative paths are placed under `$TDLAB_OUTPUT_DIR`; absolute paths keep
/// only their file name there. Without the variable the path is unchanged.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => {
            let dir = PathBuf::from(dir);
            if path.is_absolute() {
                dir.join(path.file_name().unwrap_or_default())
            } else {
                dir.join(path)
            }
        }
        _ => path.to_path_buf(),
    }
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Window aggregates. Fields that do not apply are `NaN`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_depth: f64,
    pub min_reward: f64,
    pub reward_variance: f64,
    pub mean_beta: f64,
    pub mean_alpha: f64,
    pub mean_action_td_loss: f64,
    pub mean_state_td_loss: f64,
    pub mean_td_loss: f64,
    pub mean_policy_loss: f64,
}

impl SweepMetrics {
    pub const COLUMNS: [&'static str; 11] = [
        "window_episodes",
        "mean_reward",
        "mean_depth",
        "min_reward",
        "reward_variance",
        "mean_beta",
        "mean_alpha",
        "mean_action_td_loss",
        "mean_state_td_loss",
        "mean_td_loss",
        "mean_policy_loss",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.episodes as f64,
            self.mean_reward,
            self.mean_depth,
            self.min_reward,
            self.reward_variance,
            self.mean_beta,
            self.mean_alpha,
            self.mean_action_td_loss,
            self.mean_state_td_loss,
            self.mean_td_loss,
            self.mean_policy_loss,
        ]
    }

    /// Aggregates finished episodes.
    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a EpisodeRecord>) -> Self {
        let eps: Vec<&EpisodeRecord> = episodes.into_iter().collect();
        let n = eps.len();
        let nan = f64::NAN;
        if n == 0 {
            return Self {
                episodes: 0,
                mean_reward: nan,
                mean_depth: nan,
                min_reward: nan,
                reward_variance: nan,
                mean_beta: nan,
                mean_alpha: nan,
                mean_action_td_loss: nan,
                mean_state_td_loss: nan,
                mean_td_loss: nan,
                mean_policy_loss: nan,
            };
        }
        let rewards: Vec<f64> = eps.iter().map(|e| e.total_reward).collect();
        let mean_reward = rewards.iter().sum::<f64>() / n as f64;
        let reward_variance = rewards.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / n as f64;
        let pooled = |f: fn(&UpdateStats) -> (f64, usize)| {
            let (s, c) = eps.iter().map(|e| f(&e.updates)).fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
            if c == 0 {
                nan
            } else {
                s / c as f64
            }
        };
        Self {
            episodes: n,
            mean_reward,
            mean_depth: eps.iter().map(|e| e.depth as f64).sum::<f64>() / n as f64,
            min_reward: rewards.iter().copied().fold(f64::INFINITY, f64::min),
            reward_variance,
            mean_beta: pooled(|u| u.beta),
            mean_alpha: pooled(|u| u.alpha),
            mean_action_td_loss: pooled(|u| u.action_td),
            mean_state_td_loss: pooled(|u| u.state_td),
            mean_td_loss: pooled(|u| u.td),
            mean_policy_loss: pooled(|u| u.policy),
        }
    }
}

/// Sums and counts of update diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub beta: (f64, usize),
    pub alpha: (f64, usize),
    pub action_td: (f64, usize),
    pub state_td: (f64, usize),
    pub td: (f64, usize),
    pub policy: (f64, usize),
}

impl UpdateStats {
    fn add(&mut self, r: &UpdateReport) {
        let push = |slot: &mut (f64, usize), v: Option<f64>| {
            if let Some(v) = v {
                slot.0 += v;
                slot.1 += 1;
            }
        };
        push(&mut self.beta, r.mean_beta);
        push(&mut self.alpha, r.mean_alpha);
        push(&mut self.action_td, r.action_td_loss);
        push(&mut self.state_td, r.state_td_loss);
        push(&mut self.td, r.td_loss);
        push(&mut self.policy, r.policy_loss);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// Undiscounted return.
    pub total_reward: f64,
    pub depth: usize,
    pub updates: UpdateStats,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_metrics: SweepMetrics,
    /// Window metrics after 25% of `total_steps`.
    pub early_metrics: SweepMetrics,
    pub diverged: bool,
    pub divergences: u64,
    pub csv_path: PathBuf,
    pub agent: Agent,
}

struct CsvLog {
    out: csv::Writer<fs::File>,
}

impl CsvLog {
    const HEAD: [&'static str; 3] = ["kind", "step", "episodes"];

    fn create(path: &Path) -> Result<Self> {
        create_parent(path)?;
        let mut out = csv::Writer::from_writer(fs::File::create(path)?);
        let mut header: Vec<&str> = Self::HEAD.to_vec();
        header.extend(SweepMetrics::COLUMNS);
        header.push("divergences");
        out.write_record(&header)?;
        Ok(Self { out })
    }

    fn row(&mut self, kind: &str, step: usize, episodes: usize, m: &SweepMetrics, divergences: u64) -> Result<()> {
        let mut rec = vec![kind.to_string(), step.to_string(), episodes.to_string()];
        rec.extend(m.values().iter().map(|v| v.to_string()));
        rec.push(divergences.to_string());
        self.out.write_record(&rec)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

struct Episode {
    id: u64,
    state: crate::env::UserSimState,
    obs: crate::env::Observation,
    record: EpisodeRecord,
}

impl Episode {
    fn start(env: &Env, seed: u64, id: u64) -> Self {
        let (state, obs) = env.reset(rng::derive_seed(seed, streams::EPISODE, id));
        Self { id, state, obs, record: EpisodeRecord { total_reward: 0.0, depth: 0, updates: UpdateStats::default() } }
    }
}

/// Executes warm-up and `total_steps` interact/push/sample/update steps,
/// writing the CSV and a checkpoint next to it.
pub fn run_training(config: &RunConfig) -> Result<RunOutcome> {
    run_training_to(config, &config.resolved_output())
}

/// [`run_training`] with an explicit CSV path.
pub fn run_training_to(config: &RunConfig, csv_path: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let seed = config.seed;
    let env = Env::new(config.env.clone())?;
    let mut agent = Agent::new(config.agent.clone(), &env, seed)?;
    let (lo, hi) = config.env.reward_bounds();
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?.with_reward_bounds(lo, hi);
    let mut act_rng = rng::stream(seed, streams::ACTIONS, 0);
    let mut replay_rng = rng::stream(seed, streams::REPLAY, 0);
    let mut log = CsvLog::create(csv_path)?;

    let mut next_id = 0u64;
    let mut new_episode = |env: &Env| {
        let e = Episode::start(env, seed, next_id);
        next_id += 1;
        e
    };

    // warm-up: uniformly random behaviour, no updates
    let mut warmup: Vec<EpisodeRecord> = Vec::with_capacity(config.warmup_episodes);
    for _ in 0..config.warmup_episodes {
        let mut ep = new_episode(&env);
        loop {
            let action = agent.random_action(&mut act_rng);
            let done = interact(&mut ep, action, &mut buffer)?;
            if done {
                break;
            }
        }
        warmup.push(ep.record);
    }

    let mut finished: VecDeque<EpisodeRecord> = VecDeque::with_capacity(config.eval_window + 1);
    let mut n_finished = 0usize;
    let mut early = None;
    let early_step = config.total_steps / 4;
    let mut consecutive_bad = 0usize;
    let mut diverged = false;
    let mut ep = new_episode(&env);
    let window = |f: &VecDeque<EpisodeRecord>| SweepMetrics::from_episodes(f.iter());

    for step in 0..config.total_steps {
        if step == early_step && early.is_none() {
            early = Some(window(&finished));
        }
        let action = agent.select_action(&ep.obs, true, &mut act_rng)?;
        let done = interact(&mut ep, action, &mut buffer)?;
        let batch = buffer.sample(config.batch_size, &mut replay_rng)?;
        let report = agent.update(&batch)?;
        if report.skipped {
            consecutive_bad += 1;
        } else {
            consecutive_bad = 0;
            ep.record.updates.add(&report);
        }
        if done {
            finished.push_back(std::mem::replace(&mut ep, new_episode(&env)).record);
            n_finished += 1;
            if finished.len() > config.eval_window {
                finished.pop_front();
            }
        }
        if consecutive_bad > DIVERGENCE_PATIENCE {
            log.row("diverged", step + 1, n_finished, &window(&finished), agent.divergences())?;
            diverged = true;
            break;
        }
        if (step + 1) % config.log_interval == 0 {
            log.row("log", step + 1, n_finished, &window(&finished), agent.divergences())?;
        }
    }

    let final_metrics = if config.total_steps == 0 {
        SweepMetrics::from_episodes(warmup.iter())
    } else {
        window(&finished)
    };
    let early_metrics = early.unwrap_or(final_metrics);
    let steps_done = if diverged { 0 } else { config.total_steps };
    if !diverged {
        log.row("summary", steps_done, n_finished, &final_metrics, agent.divergences())?;
    }
    log.finish()?;
    fs::write(with_suffix(csv_path, "", "ckpt"), agent.to_checkpoint())?;
    if config.dump_buffer {
        buffer.dump_csv(fs::File::create(with_suffix(csv_path, "_buffer", "csv"))?)?;
    }
    Ok(RunOutcome {
        final_metrics,
        early_metrics,
        diverged,
        divergences: agent.divergences(),
        csv_path: csv_path.to_path_buf(),
        agent,
    })
}

/// Steps the environment once and stores the transition; true if the episode ended.
fn interact(ep: &mut Episode, action: crate::agents::PolicyOutput, buffer: &mut ReplayBuffer) -> Result<bool> {
    let out = env_step(&mut ep.state, &action.slate)?;
    let t = Transition {
        obs: std::mem::replace(&mut ep.obs, out.observation.clone()),
        action,
        reward: out.reward,
        next_obs: out.observation,
        done: out.done,
        episode_id: ep.id,
        step_index: ep.record.depth,
    };
    ep.record.total_reward += out.reward;
    ep.record.depth += 1;
    buffer.push(t)?;
    Ok(out.done)
}

/// Greedy (`explore = false`) episodes; loss and β columns are `NaN`.
pub fn evaluate(agent: &mut Agent, env_config: &EnvConfig, n_episodes: usize, seed: u64) -> Result<SweepMetrics> {
    evaluate_traced::<fs::File>(agent, env_config, n_episodes, seed, None)
}

/// [`evaluate`], optionally writing every step to an episode trace.
pub fn evaluate_traced<W: Write>(
    agent: &mut Agent,
    env_config: &EnvConfig,
    n_episodes: usize,
    seed: u64,
    mut trace: Option<&mut TraceWriter<W>>,
) -> Result<SweepMetrics> {
    let env = Env::new(env_config.clone())?;
    let mut r = rng::stream(seed, streams::EVAL, 0);
    let mut records = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes as u64 {
        let (mut state, mut obs) = env.reset(rng::derive_seed(seed, streams::EVAL, i));
        let mut rec = EpisodeRecord { total_reward: 0.0, depth: 0, updates: UpdateStats::default() };
        loop {
            let action = agent.select_action(&obs, false, &mut r)?;
            let out = env_step(&mut state, &action.slate)?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(i, &state, &action.slate, &out)?;
            }
            rec.total_reward += out.reward;
            rec.depth += 1;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        records.push(rec);
    }
    if let Some(t) = trace {
        t.flush()?;
    }
    Ok(SweepMetrics::from_episodes(records.iter()))
}

/// Uniformly random slates on the same episodes [`evaluate`] would play.
pub fn random_baseline(env_config: &EnvConfig, n_episodes: usize, seed: u64) -> Result<SweepMetrics> {
    let env = Env::new(env_config.clone())?;
    let mut r = rng::stream(seed, streams::EVAL, 0);
    let mut records = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes as u64 {
        let (mut state, _) = env.reset(rng::derive_seed(seed, streams::EVAL, i));
        let mut rec = EpisodeRecord { total_reward: 0.0, depth: 0, updates: UpdateStats::default() };
        loop {
            let slate = crate::env::random_slate(&state, &mut r);
            let out = env_step(&mut state, &slate)?;
            rec.total_reward += out.reward;
            rec.depth += 1;
            if out.done {
                break;
            }
        }
        records.push(rec);
    }
    Ok(SweepMetrics::from_episodes(records.iter()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sigma,
    Epsilon,
    LrV,
    LrQ,
    BetaAblation,
    Backbone,
    TdMode,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Sigma,
        SweepAxis::Epsilon,
        SweepAxis::LrV,
        SweepAxis::LrQ,
        SweepAxis::BetaAblation,
        SweepAxis::Backbone,
        SweepAxis::TdMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sigma => "sigma",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::LrV => "lr_v",
            SweepAxis::LrQ => "lr_q",
            SweepAxis::BetaAblation => "beta_ablation",
            SweepAxis::Backbone => "backbone",
            SweepAxis::TdMode => "td_mode",
        }
    }

    /// Writes `value` into the config.
    pub fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let num = || value.parse::<f64>().map_err(|e| Error::Parse(format!("{}: `{value}`: {e}", self.name())));
        match self {
            SweepAxis::Sigma => cfg.agent.exploration.sigma = num()?,
            SweepAxis::Epsilon => cfg.agent.exploration.epsilon = num()?,
            SweepAxis::LrV => cfg.agent.lr_v = num()?,
            SweepAxis::LrQ => cfg.agent.lr_q = num()?,
            SweepAxis::BetaAblation => {
                cfg.agent.use_beta = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    other => return Err(Error::Parse(format!("beta_ablation expects on/off, got `{other}`"))),
                }
            }
            SweepAxis::Backbone => cfg.agent.backbone = Backbone::from_str(value)?,
            SweepAxis::TdMode => cfg.agent.td_mode = TdMode::from_str(value)?,
        }
        Ok(())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisValues {
    pub axis: SweepAxis,
    #[serde(deserialize_with = "scalars_as_strings")]
    pub values: Vec<String>,
}

/// Accepts numbers and booleans as well as strings.
fn scalars_as_strings<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Scalar {
        S(String),
        I(i64),
        F(f64),
        B(bool),
    }
    Ok(Vec::<Scalar>::deserialize(d)?
        .into_iter()
        .map(|v| match v {
            Scalar::S(s) => s,
            Scalar::I(i) => i.to_string(),
            Scalar::F(f) => f.to_string(),
            Scalar::B(b) => if b { "on" } else { "off" }.to_string(),
        })
        .collect())
}

impl AxisValues {
    pub fn new(axis: SweepAxis, values: &[&str]) -> Self {
        Self { axis, values: values.iter().map(|v| v.to_string()).collect() }
    }
}

/// Result of one (cell, seed) run; `None` metrics mean the run failed or diverged.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub final_metrics: Option<SweepMetrics>,
    pub early_metrics: Option<SweepMetrics>,
    pub diverged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    /// `(axis, value)` in axis order.
    pub assignment: Vec<(SweepAxis, String)>,
    pub runs: Vec<SeedRun>,
}

impl SweepCell {
    pub fn value(&self, axis: SweepAxis) -> Option<&str> {
        self.assignment.iter().find(|(a, _)| *a == axis).map(|(_, v)| v.as_str())
    }

    fn finals(&self) -> Vec<&SweepMetrics> {
        self.runs.iter().filter_map(|r| r.final_metrics.as_ref()).collect()
    }

    /// Median over seeds of a final-window metric, ignoring failed runs and `NaN`s.
    pub fn median(&self, f: impl Fn(&SweepMetrics) -> f64) -> f64 {
        median(&self.finals().into_iter().map(f).collect::<Vec<_>>())
    }

    pub fn median_early(&self, f: impl Fn(&SweepMetrics) -> f64) -> f64 {
        median(&self.runs.iter().filter_map(|r| r.early_metrics.as_ref()).map(f).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub csv_path: PathBuf,
}

impl SweepResult {
    /// The cell whose assignment contains every `(axis, value)` pair given.
    pub fn cell(&self, pairs: &[(SweepAxis, &str)]) -> Option<&SweepCell> {
        self.cells.iter().find(|c| pairs.iter().all(|(a, v)| c.value(*a) == Some(v)))
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample standard deviation; 0 for a single value.
pub fn std_dev(xs: &[f64]) -> f64 {
    let v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    if v.len() == 1 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Runs the cross product of all axis values with every seed. Each run
/// writes its own CSV under `<output stem>_cells/`; the aggregate CSV (one
/// row per cell with median and standard deviation across seeds) is written
/// to the resolved `output_path` once all runs are done.
pub fn run_sweep(base: &RunConfig, axes: &[AxisValues], seeds: &[u64]) -> Result<SweepResult> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one axis, one value per axis and one seed".into()));
    }
    base.validate()?;
    let mut assignments: Vec<Vec<(SweepAxis, String)>> = vec![Vec::new()];
    for ax in axes {
        assignments = assignments
            .into_iter()
            .flat_map(|prefix| {
                ax.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((ax.axis, v.clone()));
                    p
                })
            })
            .collect();
    }
    let out = base.resolved_output();
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep").to_string();
    let cell_dir = out.with_file_name(format!("{stem}_cells"));
    fs::create_dir_all(&cell_dir)?;

    let jobs: Vec<(usize, u64)> =
        (0..assignments.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let prepared = assignments[c].iter().try_for_each(|(axis, v)| axis.apply(&mut cfg, v));
            let path = cell_dir.join(format!("cell{c:03}_seed{seed}.csv"));
            match prepared.and_then(|_| run_training_to(&cfg, &path)) {
                Ok(o) if !o.diverged => SeedRun {
                    seed,
                    final_metrics: Some(o.final_metrics),
                    early_metrics: Some(o.early_metrics),
                    diverged: false,
                    error: None,
                },
                Ok(_) => SeedRun { seed, final_metrics: None, early_metrics: None, diverged: true, error: None },
                Err(e) => SeedRun { seed, final_metrics: None, early_metrics: None, diverged: false, error: Some(e.to_string()) },
            }
        })
        .collect();

    let mut runs = runs.into_iter();
    let cells: Vec<SweepCell> = assignments
        .into_iter()
        .map(|assignment| SweepCell { assignment, runs: runs.by_ref().take(seeds.len()).collect() })
        .collect();
    write_sweep_csv(&out, axes, &cells)?;
    Ok(SweepResult { cells, csv_path: out })
}

fn write_sweep_csv(path: &Path, axes: &[AxisValues], cells: &[SweepCell]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_writer(fs::File::create(path)?);
    let mut header: Vec<String> = axes.iter().map(|a| a.axis.name().to_string()).collect();
    header.extend(["n_seeds", "n_failed"].map(String::from));
    for c in SweepMetrics::COLUMNS {
        header.push(format!("median_{c}"));
        header.push(format!("std_{c}"));
    }
    header.extend(["median_early_mean_reward", "std_early_mean_reward"].map(String::from));
    w.write_record(&header)?;
    for cell in cells {
        let mut rec: Vec<String> = cell.assignment.iter().map(|(_, v)| v.clone()).collect();
        let finals = cell.finals();
        rec.push(cell.runs.len().to_string());
        rec.push((cell.runs.len() - finals.len()).to_string());
        for k in 0..SweepMetrics::COLUMNS.len() {
            let xs: Vec<f64> = finals.iter().map(|m| m.values()[k]).collect();
            rec.push(median(&xs).to_string());
            rec.push(std_dev(&xs).to_string());
        }
        let early: Vec<f64> = cell.runs.iter().filter_map(|r| r.early_metrics.map(|m| m.mean_reward)).collect();
        rec.push(median(&early).to_string());
        rec.push(std_dev(&early).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint written by [`run_training`] into an agent built from `config`.
pub fn load_agent(config: &RunConfig, checkpoint: &str) -> Result<Agent> {
    let env = Env::new(config.env.clone())?;
    let mut agent = Agent::new(config.agent.clone(), &env, config.seed)?;
    agent.load_checkpoint(checkpoint)?;
    Ok(agent)
}
