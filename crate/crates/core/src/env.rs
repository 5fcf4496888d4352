//! Synthetic stochastic user for the recommendation process.
//!
//! A user is a unit latent vector. Each item has a fixed unit embedding and
//! is clicked independently with probability `logistic(3 <latent, item>)`.
//! Clicks pull the latent toward the clicked items (`drift_rate`), misses
//! drain a temper budget, and the session ends when the budget reaches the
//! threshold or the depth cap is hit. Agents only see a noisy copy of the
//! latent plus the normalized step counter.

use std::io::Write;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

/// Slope of the click logistic.
pub const CLICK_SHARPNESS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub n_items: usize,
    pub slate_size: usize,
    pub state_dim: usize,
    pub max_depth: usize,
    pub click_reward: f64,
    pub miss_reward: f64,
    pub temper_init: f64,
    pub temper_threshold: f64,
    pub temper_miss_cost: f64,
    pub temper_base_cost: f64,
    pub drift_rate: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Test hook: click iff probability >= 0.5 instead of sampling.
    pub deterministic_clicks: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_items: 30,
            slate_size: 6,
            state_dim: 6,
            max_depth: 20,
            click_reward: 1.0,
            miss_reward: -0.2,
            temper_init: 10.0,
            temper_threshold: 0.0,
            temper_miss_cost: 0.2,
            temper_base_cost: 0.3,
            drift_rate: 0.1,
            noise_scale: 0.3,
            seed: 0,
            deterministic_clicks: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env: {m}")));
        if self.n_items == 0 || self.slate_size == 0 || self.state_dim == 0 {
            return bad("n_items, slate_size and state_dim must be positive");
        }
        if self.slate_size > self.n_items {
            return bad("slate_size exceeds n_items");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !(self.temper_threshold < self.temper_init) || self.temper_init <= 0.0 {
            return bad("need 0 < temper_init and temper_threshold < temper_init");
        }
        if self.temper_miss_cost < 0.0 || self.temper_base_cost < 0.0 {
            return bad("temper costs must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.drift_rate) {
            return bad("drift_rate must lie in [0, 1]");
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be nonnegative");
        }
        if !self.click_reward.is_finite() || !self.miss_reward.is_finite() {
            return bad("rewards must be finite");
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.state_dim + 1
    }

    /// Bounds on a single step's reward.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let k = self.slate_size as f64;
        let (a, b) = (k * self.miss_reward, k * self.click_reward);
        (a.min(b), a.max(b))
    }
}

/// Unit-norm item embeddings, `n_items x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddings {
    dim: usize,
    data: Vec<f64>,
}

impl ItemEmbeddings {
    pub fn generate(n_items: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut data = Vec::with_capacity(n_items * dim);
        for _ in 0..n_items {
            data.extend(random_unit(dim, rng));
        }
        Self { dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("embedding rows must share a positive length".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let n = norm(r);
            if n == 0.0 {
                return Err(Error::Invalid("zero embedding row".into()));
            }
            data.extend(r.iter().map(|x| x / n));
        }
        Ok(Self { dim, data })
    }

    pub fn n_items(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `<v, e_i>` for every item.
    pub fn scores(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_items()).map(|i| dot(self.row(i), v)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct UserSimState {
    pub latent: Vec<f64>,
    pub temper: f64,
    pub step: usize,
    pub done: bool,
    pub item_embeddings: Arc<ItemEmbeddings>,
    pub config: Arc<EnvConfig>,
    rng: Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub step_fraction: f64,
}

impl Observation {
    /// Network input: features followed by the step fraction.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.features.len() + 1);
        v.extend_from_slice(&self.features);
        v.push(self.step_fraction);
        v
    }

    pub fn len(&self) -> usize {
        self.features.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlateAction {
    pub items: Vec<usize>,
}

impl SlateAction {
    pub fn new(items: Vec<usize>, config: &EnvConfig) -> Result<Self> {
        let s = Self { items };
        s.validate(config)?;
        Ok(s)
    }

    pub fn validate(&self, config: &EnvConfig) -> Result<()> {
        if self.items.len() != config.slate_size {
            return Err(Error::Invalid(format!(
                "slate has {} items, expected {}",
                self.items.len(),
                config.slate_size
            )));
        }
        if let Some(&i) = self.items.iter().find(|&&i| i >= config.n_items) {
            return Err(Error::Invalid(format!("item {i} out of range")));
        }
        for (k, i) in self.items.iter().enumerate() {
            if self.items[..k].contains(i) {
                return Err(Error::Invalid(format!("duplicate item {i} in slate")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub clicks: Vec<bool>,
}

impl Feedback {
    pub fn n_clicks(&self) -> usize {
        self.clicks.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub feedback: Feedback,
    pub reward: f64,
    pub observation: Observation,
    pub done: bool,
}

/// An environment instance: config plus the item embeddings keyed to its seed.
#[derive(Debug, Clone)]
pub struct Env {
    config: Arc<EnvConfig>,
    embeddings: Arc<ItemEmbeddings>,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, streams::EMBEDDINGS, 0);
        let embeddings = ItemEmbeddings::generate(config.n_items, config.state_dim, &mut r);
        Ok(Self { config: Arc::new(config), embeddings: Arc::new(embeddings) })
    }

    pub fn with_embeddings(config: EnvConfig, embeddings: ItemEmbeddings) -> Result<Self> {
        config.validate()?;
        if embeddings.n_items() != config.n_items || embeddings.dim() != config.state_dim {
            return Err(Error::Shape("embeddings do not match the config".into()));
        }
        Ok(Self { config: Arc::new(config), embeddings: Arc::new(embeddings) })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Arc<ItemEmbeddings> {
        &self.embeddings
    }

    pub fn reset(&self, episode_seed: u64) -> (UserSimState, Observation) {
        let mut r = rng::stream(self.config.seed, streams::EPISODE, episode_seed);
        let latent = random_unit(self.config.state_dim, &mut r);
        let mut state = UserSimState {
            latent,
            temper: self.config.temper_init,
            step: 0,
            done: false,
            item_embeddings: Arc::clone(&self.embeddings),
            config: Arc::clone(&self.config),
            rng: r,
        };
        let obs = state.observe();
        (state, obs)
    }

    /// Same as [`Env::reset`] but with an explicit initial latent (normalized).
    pub fn reset_with_latent(&self, latent: &[f64], episode_seed: u64) -> Result<(UserSimState, Observation)> {
        if latent.len() != self.config.state_dim {
            return Err(Error::Shape("latent has the wrong dimension".into()));
        }
        let n = norm(latent);
        if n == 0.0 {
            return Err(Error::Invalid("latent must be nonzero".into()));
        }
        let (mut state, _) = self.reset(episode_seed);
        state.latent = latent.iter().map(|x| x / n).collect();
        let obs = state.observe();
        Ok((state, obs))
    }
}

impl UserSimState {
    fn observe(&mut self) -> Observation {
        let cfg = &self.config;
        let features = if cfg.noise_scale == 0.0 {
            self.latent.clone()
        } else {
            let noise = cfg.noise_scale;
            self.latent
                .iter()
                .map(|&z| {
                    let e: f64 = StandardNormal.sample(&mut self.rng);
                    z + noise * e
                })
                .collect()
        };
        Observation { features, step_fraction: self.step as f64 / cfg.max_depth as f64 }
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }
}

/// Builds the first state and observation of an episode.
pub fn env_reset(config: &EnvConfig, episode_seed: u64) -> Result<(UserSimState, Observation)> {
    Ok(Env::new(config.clone())?.reset(episode_seed))
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-slot click probabilities; pure.
pub fn click_probabilities(state: &UserSimState, slate: &SlateAction) -> Result<Vec<f64>> {
    let n = state.n_items();
    slate
        .items
        .iter()
        .map(|&i| {
            if i >= n {
                Err(Error::Invalid(format!("item {i} out of range")))
            } else {
                Ok(logistic(CLICK_SHARPNESS * dot(&state.latent, state.item_embeddings.row(i))))
            }
        })
        .collect()
}

/// Advances the user by one recommendation.
pub fn env_step(state: &mut UserSimState, slate: &SlateAction) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::EpisodeFinished);
    }
    slate.validate(&state.config)?;
    let probs = click_probabilities(state, slate)?;
    let cfg = Arc::clone(&state.config);
    let clicks: Vec<bool> = probs
        .iter()
        .map(|&p| {
            if cfg.deterministic_clicks {
                p >= 0.5
            } else {
                state.rng.random::<f64>() < p
            }
        })
        .collect();
    let n_click = clicks.iter().filter(|&&c| c).count();
    let n_miss = clicks.len() - n_click;
    let reward = n_click as f64 * cfg.click_reward + n_miss as f64 * cfg.miss_reward;

    if n_click > 0 && cfg.drift_rate > 0.0 {
        let dim = cfg.state_dim;
        let mut mean = vec![0.0; dim];
        for (&i, _) in slate.items.iter().zip(&clicks).filter(|(_, &c)| c) {
            for (m, e) in mean.iter_mut().zip(state.item_embeddings.row(i)) {
                *m += e / n_click as f64;
            }
        }
        let mixed: Vec<f64> = state
            .latent
            .iter()
            .zip(&mean)
            .map(|(z, m)| (1.0 - cfg.drift_rate) * z + cfg.drift_rate * m)
            .collect();
        let n = norm(&mixed);
        if n > 0.0 {
            state.latent = mixed.iter().map(|x| x / n).collect();
        }
    }
    state.temper -= cfg.temper_base_cost + cfg.temper_miss_cost * n_miss as f64;
    state.step += 1;
    state.done = state.temper <= cfg.temper_threshold || state.step >= cfg.max_depth;
    let observation = state.observe();
    Ok(StepOutcome { feedback: Feedback { clicks }, reward, observation, done: state.done })
}

/// Uniform slate without replacement.
pub fn random_slate<R: rand::Rng + ?Sized>(state: &UserSimState, rng: &mut R) -> SlateAction {
    random_slate_for(state.config.n_items, state.config.slate_size, rng)
}

pub fn random_slate_for<R: rand::Rng + ?Sized>(n_items: usize, k: usize, rng: &mut R) -> SlateAction {
    SlateAction { items: index::sample(rng, n_items, k).into_vec() }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn random_unit<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Per-step episode trace rows: `episode,step,items,clicks,reward,temper`.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(["episode", "step", "items", "clicks", "reward", "temper"])?;
        Ok(Self { inner })
    }

    pub fn record(
        &mut self,
        episode: u64,
        state: &UserSimState,
        slate: &SlateAction,
        outcome: &StepOutcome,
    ) -> Result<()> {
        let items: Vec<String> = slate.items.iter().map(ToString::to_string).collect();
        let clicks: String = outcome.feedback.clicks.iter().map(|&c| if c { '1' } else { '0' }).collect();
        self.inner.write_record([
            episode.to_string(),
            state.step.to_string(),
            items.join(" "),
            clicks,
            outcome.reward.to_string(),
            state.temper.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
