//! Lookup-table TD learners on a [`TabularMdp`].
//!
//! V and Q are linear networks over one-hot inputs, so every parameter is a
//! table entry and the only error left is that of the TD rule itself. The
//! losses and their stop-gradients come from [`crate::tdcore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{optim_step, ForwardCache, GradBuffer, MlpParams, OptimState};
use crate::error::{Error, Result};
use crate::oracle::{StochasticPolicy, TabularMdp};
use crate::rng::{self, streams};
use crate::tdcore::{action_td_loss, beta_state_td_loss, beta_weight, vtd_loss, TdSample, DEFAULT_BETA_CLIP};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TabularRule {
    /// Action TD on Q and state TD on V, β from the target/behaviour ratio
    /// when `use_beta`, else 1.
    Decomposed { use_beta: bool },
    /// Classical TD(0) on V alone; the bootstrap `V(s')` is held fixed.
    Vtd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub updates: usize,
    /// Initial SGD step; decays as `lr0 / (1 + t / lr_half_life)`.
    pub lr0: f64,
    pub lr_half_life: f64,
    /// Episodes are cut (without a terminal flag) after this many steps.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self { updates: 200_000, lr0: 0.1, lr_half_life: 2_000.0, horizon: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularEstimate {
    pub v: Vec<f64>,
    /// Empty for [`TabularRule::Vtd`].
    pub q: Vec<Vec<f64>>,
}

impl TabularEstimate {
    pub fn v_error(&self, v_star: &[f64]) -> f64 {
        self.v.iter().zip(v_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn q_error(&self, q_star: &[Vec<f64>]) -> f64 {
        self.q
            .iter()
            .flatten()
            .zip(q_star.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

struct Table {
    params: MlpParams,
    opt: OptimState,
}

impl Table {
    fn new(n: usize, lr: f64) -> Result<Self> {
        Ok(Self { params: MlpParams::zeros(&[n, 1], &[])?, opt: OptimState::sgd(lr)? })
    }

    fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.params.input_dim()];
        x[i] = 1.0;
        x
    }

    fn eval(&self, i: usize) -> Result<(f64, ForwardCache)> {
        let c = self.params.forward_cached(&self.one_hot(i))?;
        Ok((c.output()[0], c))
    }

    fn step(&mut self, cache: &ForwardCache, dloss: f64, lr: f64) -> Result<()> {
        if dloss == 0.0 {
            return Ok(());
        }
        let mut g = GradBuffer::zeros_like(&self.params);
        self.params.backward_into(cache, &[1.0], dloss, &mut g)?;
        // the bias stays at zero so each weight is exactly one table entry
        g.biases[0][0] = 0.0;
        self.opt.learning_rate = lr;
        optim_step(&mut self.params, &g, &mut self.opt)
    }

    fn values(&self) -> Vec<f64> {
        self.params.weights()[0].clone()
    }
}

/// Runs `cfg.updates` single-sample updates from trajectories of `behaviour`,
/// estimating the values of `target` (which only enters through β).
pub fn train_tabular(
    mdp: &TabularMdp,
    behaviour: &StochasticPolicy,
    target: &StochasticPolicy,
    rule: TabularRule,
    cfg: &TabularConfig,
) -> Result<TabularEstimate> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if cfg.horizon == 0 || !(cfg.lr0 > 0.0) || !(cfg.lr_half_life > 0.0) {
        return Err(Error::Config("tabular: horizon, lr0 and lr_half_life must be positive".into()));
    }
    let starts: Vec<usize> = (0..ns).filter(|&s| !mdp.is_terminal(s)).collect();
    if starts.is_empty() {
        return Err(Error::Invalid("every state is terminal".into()));
    }
    let mut r = rng::stream(cfg.seed, streams::EPISODE, 0);
    let mut v = Table::new(ns, cfg.lr0)?;
    let mut q = Table::new(ns * na, cfg.lr0)?;
    let (lo, hi) = DEFAULT_BETA_CLIP;
    let mut s = starts[r.random_range(0..starts.len())];
    let mut t_ep = 0;
    for t in 0..cfg.updates {
        let lr = cfg.lr0 / (1.0 + t as f64 / cfg.lr_half_life);
        let a = behaviour.sample(s, &mut r);
        let next = mdp.sample_next(s, a, &mut r);
        let done = mdp.is_terminal(next);
        let reward = mdp.reward(s, a);
        let (v_s, v_cache) = v.eval(s)?;
        let v_next = if done { 0.0 } else { v.eval(next)?.0 };
        match rule {
            TabularRule::Vtd => {
                let mut sample = TdSample::new(reward, v_s, v_next, 0.0, mdp.gamma());
                if done {
                    sample = sample.terminal();
                }
                v.step(&v_cache, vtd_loss(&sample)?.grads.v_s, lr)?;
            }
            TabularRule::Decomposed { use_beta } => {
                let (q_sa, q_cache) = q.eval(s * na + a)?;
                let mut sample = TdSample::new(reward, v_s, v_next, q_sa, mdp.gamma());
                if done {
                    sample = sample.terminal();
                }
                let beta = if use_beta {
                    let pi = target.prob(s, a);
                    if pi == 0.0 { lo } else { beta_weight(pi.ln(), behaviour.prob(s, a).ln(), lo, hi)? }
                } else {
                    1.0
                };
                let action = action_td_loss(&sample)?;
                let state = beta_state_td_loss(&sample, beta)?;
                q.step(&q_cache, action.grads.q, lr)?;
                v.step(&v_cache, state.grads.v_s, lr)?;
            }
        }
        t_ep += 1;
        if done || t_ep >= cfg.horizon {
            s = starts[r.random_range(0..starts.len())];
            t_ep = 0;
        } else {
            s = next;
        }
    }
    let q_vals = match rule {
        TabularRule::Vtd => Vec::new(),
        TabularRule::Decomposed { .. } => q.values().chunks(na).map(<[f64]>::to_vec).collect(),
    };
    Ok(TabularEstimate { v: v.values(), q: q_vals })
}

/// The committed 5-state, 3-action MDP used by the oracle accuracy checks.
/// State 4 is terminal; actions trade immediate reward against the chance of
/// ending the episode.
pub fn reference_mdp() -> TabularMdp {
    TabularMdp::from_text(REFERENCE_MDP).expect("committed MDP is valid")
}

/// Fixed stochastic policy for [`reference_mdp`].
pub fn reference_policy() -> StochasticPolicy {
    StochasticPolicy::new(vec![
        vec![0.7, 0.2, 0.1],
        vec![0.1, 0.8, 0.1],
        vec![0.6, 0.1, 0.3],
        vec![0.2, 0.2, 0.6],
        vec![1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0],
    ])
    .expect("valid policy")
}

pub const REFERENCE_MDP: &str = include_str!("../fixtures/reference_mdp.txt");
