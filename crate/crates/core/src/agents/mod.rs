//! Recommendation agents over slates.
//!
//! Five backbones share one [`Agent`] type:
//!
//! * `a2c`: Plackett–Luce policy over item scores `<u(s), e_i>`, trained by
//!   the advantage-weighted log-likelihood.
//! * `dqn`: item-wise Q scores, slate value is the sum over the slate, the
//!   greedy slate is the top-K items, ε-greedy at the slate level.
//! * `ddpg` / `hac_lite`: a continuous hyper-action `h = 2 tanh(actor(s))`
//!   scored against item embeddings; Gaussian exploration with std σ.
//! * `dueling_dqn`: item-wise `V(s) + A(s,i) - mean_j A(s,j)`.
//!
//! Every TD backbone runs either the original objective (value TD for A2C,
//! Q TD otherwise) or the decomposed pair: action TD for Q against a frozen
//! V(s'), and β-weighted state TD for V against a frozen Q(s,a).

pub mod likelihood;
mod update;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, ForwardCache, MlpParams, OptimRule, OptimState};
use crate::env::{dot, Env, ItemEmbeddings, Observation, SlateAction};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub use likelihood::{gaussian_log_density, plackett_luce_log_prob, top_k};
pub use update::{actor_gradient, dueling_q, policy_gradient, LossTerm, TermGrads, UpdateReport};

/// Hyper-actions are `ACTOR_BOUND * tanh(actor output)`.
pub const ACTOR_BOUND: f64 = 2.0;
/// Std of the Gaussian hyper-action drawn during random warm-up.
pub const WARMUP_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    A2c,
    Dqn,
    Ddpg,
    HacLite,
    DuelingDqn,
}

impl Backbone {
    pub const ALL: [Backbone; 5] = [Backbone::A2c, Backbone::Dqn, Backbone::Ddpg, Backbone::HacLite, Backbone::DuelingDqn];

    pub fn is_continuous(self) -> bool {
        matches!(self, Backbone::Ddpg | Backbone::HacLite)
    }

    pub fn name(self) -> &'static str {
        match self {
            Backbone::A2c => "a2c",
            Backbone::Dqn => "dqn",
            Backbone::Ddpg => "ddpg",
            Backbone::HacLite => "hac_lite",
            Backbone::DuelingDqn => "dueling_dqn",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown backbone `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdMode {
    Original,
    Decomposed,
}

impl TdMode {
    pub fn name(self) -> &'static str {
        match self {
            TdMode::Original => "original",
            TdMode::Decomposed => "decomposed",
        }
    }
}

impl fmt::Display for TdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(TdMode::Original),
            "decomposed" => Ok(TdMode::Decomposed),
            other => Err(Error::Parse(format!("unknown td mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    /// Gaussian std on continuous hyper-actions.
    pub sigma: f64,
    /// Slate-level ε for the Q-greedy backbones.
    pub epsilon: f64,
    /// Exponential decay rate of σ and ε per environment step.
    pub decay: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self { sigma: 0.1, epsilon: 0.1, decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub backbone: Backbone,
    pub td_mode: TdMode,
    pub gamma: f64,
    pub lr_v: f64,
    pub lr_q: f64,
    pub lr_policy: f64,
    pub exploration: ExplorationConfig,
    pub use_target_net: bool,
    pub target_tau: f64,
    pub beta_clip: (f64, f64),
    /// When false the state TD weight is fixed to 1 (β is still measured).
    pub use_beta: bool,
    /// Standardize A2C advantages within each batch before the policy step.
    pub normalize_advantage: bool,
    /// Hyper-action size; defaults to the item embedding size, which it must equal.
    pub hyper_dim: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimRule,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::HacLite,
            td_mode: TdMode::Decomposed,
            gamma: 0.9,
            lr_v: 1e-3,
            lr_q: 1e-3,
            lr_policy: 1e-3,
            exploration: ExplorationConfig::default(),
            use_target_net: false,
            target_tau: 0.005,
            beta_clip: crate::tdcore::DEFAULT_BETA_CLIP,
            use_beta: true,
            normalize_advantage: false,
            hyper_dim: None,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            optimizer: OptimRule::Adam,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("agent: {m}")));
        if self.backbone == Backbone::DuelingDqn && self.td_mode == TdMode::Decomposed {
            return bad("dueling_dqn is already a V/A decomposition and only runs with td_mode = original".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        for (name, lr) in [("lr_v", self.lr_v), ("lr_q", self.lr_q), ("lr_policy", self.lr_policy)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be positive"));
            }
        }
        let e = &self.exploration;
        if !(e.sigma >= 0.0) || !(0.0..=1.0).contains(&e.epsilon) || !(e.decay >= 0.0) {
            return bad("exploration needs sigma >= 0, epsilon in [0, 1], decay >= 0".into());
        }
        if !(self.beta_clip.0 > 0.0 && self.beta_clip.0 <= self.beta_clip.1) {
            return bad(format!("beta_clip {:?} must satisfy 0 < lo <= hi", self.beta_clip));
        }
        if !(self.target_tau > 0.0 && self.target_tau <= 1.0) {
            return bad("target_tau must lie in (0, 1]".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive".into());
        }
        if self.hyper_dim == Some(0) {
            return bad("hyper_dim must be positive".into());
        }
        Ok(())
    }
}

/// What the policy emitted, with the likelihood it assigned at emission time.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub slate: SlateAction,
    pub hyper_action: Option<Vec<f64>>,
    pub log_likelihood: f64,
    /// Emitted by a point-mass policy (σ = 0, ε = 0 or `explore = false`);
    /// its importance weight is fixed to 1.
    pub deterministic: bool,
}

/// A trainable network with its optimizer and optional target copy.
#[derive(Debug, Clone)]
pub struct Net {
    pub params: MlpParams,
    opt: OptimState,
    pub target: Option<MlpParams>,
}

impl Net {
    fn new(params: MlpParams, rule: OptimRule, lr: f64, with_target: bool) -> Result<Self> {
        let target = with_target.then(|| params.clone());
        Ok(Self { params, opt: OptimState::new(rule, lr)?, target })
    }

    /// Parameters used for bootstrapped targets.
    fn bootstrap_params(&self) -> &MlpParams {
        self.target.as_ref().unwrap_or(&self.params)
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    embeddings: Arc<ItemEmbeddings>,
    n_items: usize,
    slate_size: usize,
    obs_dim: usize,
    item_dim: usize,
    /// A2C policy (`obs -> u`) or continuous actor (`obs -> z`).
    pub policy: Option<Net>,
    /// State value `obs -> V` (dueling: the V stream).
    pub v: Option<Net>,
    /// Item-wise `obs ++ e_i -> q`, continuous `obs ++ h -> Q`, dueling: the A stream.
    pub q: Option<Net>,
    env_steps: u64,
    updates: u64,
    divergences: u64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, env: &Env, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ec = env.config();
        let embeddings = Arc::clone(env.embeddings());
        let item_dim = embeddings.dim();
        let obs_dim = ec.obs_dim();
        if cfg.backbone.is_continuous() {
            let h = cfg.hyper_dim.unwrap_or(item_dim);
            if h != item_dim {
                return Err(Error::Config(format!(
                    "agent: hyper_dim {h} must equal the item embedding size {item_dim}"
                )));
            }
        }
        let acts = vec![cfg.activation; cfg.hidden.len()];
        // one init stream per role, so paired arms share the networks they have in common
        let build = |role: u64, n_in: usize, n_out: usize, lr: f64, target: bool| -> Result<Net> {
            let mut r = rng::stream(seed, streams::NETWORK_INIT, role);
            let mut sizes = vec![n_in];
            sizes.extend(&cfg.hidden);
            sizes.push(n_out);
            Net::new(MlpParams::init(&sizes, &acts, &mut r)?, cfg.optimizer, lr, target)
        };
        let decomposed = cfg.td_mode == TdMode::Decomposed;
        let tgt = cfg.use_target_net;
        let (policy, v, q) = match cfg.backbone {
            Backbone::A2c => (
                Some(build(0, obs_dim, item_dim, cfg.lr_policy, false)?),
                // V bootstraps in both modes
                Some(build(1, obs_dim, 1, cfg.lr_v, tgt)?),
                if decomposed { Some(build(2, obs_dim + item_dim, 1, cfg.lr_q, false)?) } else { None },
            ),
            Backbone::Dqn => (
                None,
                if decomposed { Some(build(1, obs_dim, 1, cfg.lr_v, tgt)?) } else { None },
                Some(build(2, obs_dim + item_dim, 1, cfg.lr_q, tgt && !decomposed)?),
            ),
            Backbone::Ddpg | Backbone::HacLite => (
                Some(build(0, obs_dim, item_dim, cfg.lr_policy, tgt && !decomposed)?),
                if decomposed { Some(build(1, obs_dim, 1, cfg.lr_v, tgt)?) } else { None },
                Some(build(2, obs_dim + item_dim, 1, cfg.lr_q, tgt && !decomposed)?),
            ),
            Backbone::DuelingDqn => (
                None,
                Some(build(1, obs_dim, 1, cfg.lr_v, tgt)?),
                Some(build(2, obs_dim + item_dim, 1, cfg.lr_q, tgt)?),
            ),
        };
        Ok(Self {
            cfg,
            embeddings,
            n_items: ec.n_items,
            slate_size: ec.slate_size,
            obs_dim,
            item_dim,
            policy,
            v,
            q,
            env_steps: 0,
            updates: 0,
            divergences: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn embeddings(&self) -> &ItemEmbeddings {
        &self.embeddings
    }

    pub fn divergences(&self) -> u64 {
        self.divergences
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn decay_factor(&self) -> f64 {
        (-self.cfg.exploration.decay * self.env_steps as f64).exp()
    }

    /// Exploration std after decay.
    pub fn current_sigma(&self) -> f64 {
        self.cfg.exploration.sigma * self.decay_factor()
    }

    pub fn current_epsilon(&self) -> f64 {
        self.cfg.exploration.epsilon * self.decay_factor()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape(format!("observation has length {}, agent expects {}", obs.len(), self.obs_dim)));
        }
        Ok(())
    }

    pub(crate) fn concat(obs: &[f64], tail: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(obs.len() + tail.len());
        v.extend_from_slice(obs);
        v.extend_from_slice(tail);
        v
    }

    /// A2C item logits `<u(s), e_i>` plus the cached policy pass.
    pub(crate) fn policy_logits(&self, obs: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let p = &self.policy.as_ref().expect("a2c has a policy").params;
        let cache = p.forward_cached(obs)?;
        let logits = self.embeddings.scores(cache.output());
        Ok((logits, cache))
    }

    /// Deterministic hyper-action `2 tanh(actor(s))` from the given actor parameters.
    pub(crate) fn actor_mean_with(&self, actor: &MlpParams, obs: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let cache = actor.forward_cached(obs)?;
        let mu = cache.output().iter().map(|z| ACTOR_BOUND * z.tanh()).collect();
        Ok((mu, cache))
    }

    pub fn actor_mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let p = &self.policy.as_ref().ok_or_else(|| Error::Invalid("backbone has no actor".into()))?.params;
        Ok(self.actor_mean_with(p, obs)?.0)
    }

    /// Item-wise scores `q(s, i)` for every item under `params`.
    pub(crate) fn item_scores(&self, params: &MlpParams, obs: &[f64]) -> Result<Vec<f64>> {
        (0..self.n_items)
            .map(|i| Ok(params.forward_cached(&Self::concat(obs, self.embeddings.row(i)))?.output()[0]))
            .collect()
    }

    /// Greedy slate of the discrete Q backbones.
    fn greedy_slate(&self, obs: &[f64]) -> Result<Vec<usize>> {
        let q = &self.q.as_ref().expect("q backbone").params;
        // dueling: V and the mean advantage are shared by all items
        Ok(top_k(&self.item_scores(q, obs)?, self.slate_size))
    }

    /// Picks a slate. With `explore = false` σ and ε are treated as zero and
    /// the output is marked deterministic with log-likelihood 0.
    pub fn select_action<R: Rng + ?Sized>(&mut self, obs: &Observation, explore: bool, rng: &mut R) -> Result<PolicyOutput> {
        let x = obs.to_vec();
        self.check_obs(&x)?;
        let out = match self.cfg.backbone {
            Backbone::A2c => {
                let (logits, _) = self.policy_logits(&x)?;
                if explore {
                    let items = likelihood::gumbel_top_k(&logits, self.slate_size, rng);
                    let ll = plackett_luce_log_prob(&logits, &items);
                    PolicyOutput { slate: SlateAction { items }, hyper_action: None, log_likelihood: ll, deterministic: false }
                } else {
                    point_mass(top_k(&logits, self.slate_size), None)
                }
            }
            Backbone::Dqn | Backbone::DuelingDqn => {
                let greedy = self.greedy_slate(&x)?;
                let eps = if explore { self.current_epsilon() } else { 0.0 };
                if eps == 0.0 {
                    point_mass(greedy, None)
                } else {
                    let items = if rng.random::<f64>() < eps {
                        crate::env::random_slate_for(self.n_items, self.slate_size, rng).items
                    } else {
                        greedy.clone()
                    };
                    let ll = likelihood::epsilon_greedy_log_prob(eps, self.n_items, &items, &greedy);
                    PolicyOutput { slate: SlateAction { items }, hyper_action: None, log_likelihood: ll, deterministic: false }
                }
            }
            Backbone::Ddpg | Backbone::HacLite => {
                let mu = self.actor_mean(&x)?;
                let sigma = if explore { self.current_sigma() } else { 0.0 };
                if sigma == 0.0 {
                    let slate = top_k(&self.embeddings.scores(&mu), self.slate_size);
                    point_mass(slate, Some(mu))
                } else {
                    let h: Vec<f64> = mu
                        .iter()
                        .map(|m| {
                            let e: f64 = StandardNormal.sample(rng);
                            m + sigma * e
                        })
                        .collect();
                    let ll = gaussian_log_density(&h, &mu, sigma);
                    let slate = top_k(&self.embeddings.scores(&h), self.slate_size);
                    PolicyOutput { slate: SlateAction { items: slate }, hyper_action: Some(h), log_likelihood: ll, deterministic: false }
                }
            }
        };
        if explore {
            self.env_steps += 1;
        }
        Ok(out)
    }

    /// Uniformly random behaviour used during warm-up: a uniform ordered slate
    /// for discrete backbones, `h ~ N(0, WARMUP_SIGMA^2 I)` for continuous ones.
    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> PolicyOutput {
        if self.cfg.backbone.is_continuous() {
            let h: Vec<f64> = (0..self.item_dim)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    WARMUP_SIGMA * e
                })
                .collect();
            let ll = gaussian_log_density(&h, &vec![0.0; self.item_dim], WARMUP_SIGMA);
            let slate = top_k(&self.embeddings.scores(&h), self.slate_size);
            PolicyOutput { slate: SlateAction { items: slate }, hyper_action: Some(h), log_likelihood: ll, deterministic: false }
        } else {
            let slate = crate::env::random_slate_for(self.n_items, self.slate_size, rng);
            PolicyOutput {
                slate,
                hyper_action: None,
                log_likelihood: -likelihood::log_ordered_slates(self.n_items, self.slate_size),
                deterministic: false,
            }
        }
    }

    /// Log-likelihood the current policy (at the current σ / ε) assigns to a
    /// stored action.
    pub fn current_log_likelihood(&self, obs: &[f64], action: &PolicyOutput) -> Result<f64> {
        self.check_obs(obs)?;
        match self.cfg.backbone {
            Backbone::A2c => {
                let (logits, _) = self.policy_logits(obs)?;
                Ok(plackett_luce_log_prob(&logits, &action.slate.items))
            }
            Backbone::Dqn | Backbone::DuelingDqn => {
                let greedy = self.greedy_slate(obs)?;
                let eps = self.current_epsilon();
                Ok(likelihood::epsilon_greedy_log_prob(eps, self.n_items, &action.slate.items, &greedy))
            }
            Backbone::Ddpg | Backbone::HacLite => {
                let h = action
                    .hyper_action
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("continuous transition without a hyper-action".into()))?;
                let mu = self.actor_mean(obs)?;
                let sigma = self.current_sigma();
                if sigma == 0.0 {
                    // point mass: density is 0 off the mean
                    return Ok(if h == &mu { 0.0 } else { f64::NEG_INFINITY });
                }
                Ok(gaussian_log_density(h, &mu, sigma))
            }
        }
    }

    /// Textual checkpoint with every trainable network.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!("tdlab-agent v1\nbackbone {}\ntd_mode {}\n", self.cfg.backbone, self.cfg.td_mode);
        for (name, net) in [("policy", &self.policy), ("v", &self.v), ("q", &self.q)] {
            if let Some(n) = net {
                s.push_str(&format!("net {name}\n"));
                s.push_str(&n.params.to_checkpoint());
            }
        }
        s
    }

    /// Loads network weights saved by [`Agent::to_checkpoint`] into an agent
    /// built from the same config.
    pub fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("tdlab-agent v1") {
            return Err(Error::Parse("missing `tdlab-agent v1` header".into()));
        }
        let expect = |line: Option<&str>, key: &str, want: &str| -> Result<()> {
            match line.and_then(|l| l.strip_prefix(key)).map(str::trim) {
                Some(v) if v == want => Ok(()),
                other => Err(Error::Parse(format!("checkpoint {key} is {other:?}, config says {want}"))),
            }
        };
        expect(lines.next(), "backbone", self.cfg.backbone.name())?;
        expect(lines.next(), "td_mode", self.cfg.td_mode.name())?;
        while let Some(line) = lines.next() {
            let name = line
                .strip_prefix("net ")
                .ok_or_else(|| Error::Parse(format!("expected `net <name>`, found `{line}`")))?;
            let params = MlpParams::from_checkpoint_lines(&mut lines)?;
            let slot = match name {
                "policy" => &mut self.policy,
                "v" => &mut self.v,
                "q" => &mut self.q,
                other => return Err(Error::Parse(format!("unknown network `{other}`"))),
            };
            let net = slot.as_mut().ok_or_else(|| Error::Parse(format!("config has no `{name}` network")))?;
            if net.params.layer_sizes() != params.layer_sizes() {
                return Err(Error::Shape(format!("network `{name}` shape differs from the config")));
            }
            if let Some(t) = net.target.as_mut() {
                *t = params.clone();
            }
            net.params = params;
        }
        Ok(())
    }
}

fn point_mass(items: Vec<usize>, hyper_action: Option<Vec<f64>>) -> PolicyOutput {
    PolicyOutput { slate: SlateAction { items }, hyper_action, log_likelihood: 0.0, deterministic: true }
}

/// `<h, e_i>` scores, exposed for slate mapping outside the agent.
pub fn hyper_action_scores(h: &[f64], embeddings: &ItemEmbeddings) -> Vec<f64> {
    (0..embeddings.n_items()).map(|i| dot(h, embeddings.row(i))).collect()
}
