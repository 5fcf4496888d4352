//! Built-in correctness checks behind `tdlab selftest`.
//!
//! Every check is seeded and fast (the whole suite runs in a few seconds).

use std::fmt;
use std::time::Instant;

use rand::Rng as _;
use rand::SeedableRng;

use crate::agents::{actor_gradient, policy_gradient, Agent, AgentConfig, Backbone, LossTerm, TdMode};
use crate::approx::{grad_check_with, mlp_backward, mlp_forward, Activation, GradBuffer, MlpParams};
use crate::buffer::Transition;
use crate::env::{env_step, Env, EnvConfig, ItemEmbeddings};
use crate::error::Result;
use crate::oracle::{make_alignment_fixture, mc_return, policy_evaluation, StochasticPolicy, TabularMdp, DEFAULT_TOL};
use crate::rng::Rng;
use crate::tabular::{reference_mdp, reference_policy};
use crate::tdcore::{
    action_td_loss, beta_state_td_loss, beta_weight, bound_check, qtd_loss, residuals, state_td_loss, vtd_loss,
    AlignmentCase, LossReport, TdSample, DEFAULT_BETA_CLIP,
};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        write!(f, "{} checks, {} failed, {:.2}s", self.checks.len(), self.checks.iter().filter(|c| !c.passed).count(), self.seconds)
    }
}

/// Runs every check over `seeds` seeds.
pub fn run_selftest(seeds: u64) -> SelftestReport {
    let start = Instant::now();
    let mut report = SelftestReport::default();
    let mut worst = [0.0f64; 7];
    let mut grad_err: Option<String> = None;
    let mut stop_ok = true;
    let mut stop_detail = String::from("all buffers exactly zero");
    for seed in 0..seeds {
        match composed_grad_errors(seed) {
            Ok(errs) => {
                for (w, e) in worst.iter_mut().zip(errs) {
                    *w = w.max(e);
                }
            }
            Err(e) => grad_err = Some(format!("seed {seed}: {e}")),
        }
        match stop_gradients(seed) {
            Ok(None) => {}
            Ok(Some(msg)) => {
                stop_ok = false;
                stop_detail = format!("seed {seed}: {msg}");
            }
            Err(e) => {
                stop_ok = false;
                stop_detail = format!("seed {seed}: {e}");
            }
        }
    }
    for (name, w) in GRAD_NAMES.iter().zip(worst) {
        let ok = grad_err.is_none() && w < GRAD_TOL;
        let detail = match &grad_err {
            Some(e) => e.clone(),
            None => format!("max rel err {w:.2e} over {seeds} seeds"),
        };
        report.push(format!("grad/{name}"), ok, detail);
    }
    report.push("stop_gradient", stop_ok, stop_detail);

    let push_result = |report: &mut SelftestReport, name: &str, r: Result<(bool, String)>| match r {
        Ok((ok, d)) => report.push(name, ok, d),
        Err(e) => report.push(name, false, e.to_string()),
    };
    push_result(&mut report, "oracle/bellman", oracle_bellman());
    push_result(&mut report, "oracle/monte_carlo", oracle_monte_carlo());
    push_result(&mut report, "bound/vtd", vtd_bound(10_000));
    push_result(&mut report, "witness/misguidance", misguidance_witness());
    push_result(&mut report, "beta/stationary_point", beta_stationary_point(100));
    report.seconds = start.elapsed().as_secs_f64();
    report
}

const GRAD_NAMES: [&str; 7] = ["vtd", "qtd", "policy", "actor", "action_td", "state_td", "beta_state_td"];

struct Fixture {
    v: MlpParams,
    q: MlpParams,
    obs: Vec<Vec<f64>>,
    next: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    next_act: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    done: Vec<bool>,
    betas: Vec<f64>,
    gamma: f64,
}

const OBS: usize = 4;
const ACT: usize = 3;
const BATCH: usize = 4;

fn random_vec(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let mut r = Rng::seed_from_u64(seed);
        let tanh = [Activation::Tanh, Activation::Tanh];
        let v = MlpParams::init(&[OBS, 6, 5, 1], &tanh, &mut r)?;
        let q = MlpParams::init(&[OBS + ACT, 6, 5, 1], &tanh, &mut r)?;
        let mut vecs = |n: usize| (0..BATCH).map(|_| random_vec(n, &mut r)).collect::<Vec<_>>();
        let (obs, next, act, next_act) = (vecs(OBS), vecs(OBS), vecs(ACT), vecs(ACT));
        let rewards = random_vec(BATCH, &mut r);
        let done = (0..BATCH).map(|i| i == BATCH - 1 && seed % 2 == 0).collect();
        let (lo, hi) = DEFAULT_BETA_CLIP;
        let betas = (0..BATCH)
            .map(|_| beta_weight(r.random_range(-3.0..0.0), r.random_range(-3.0..0.0), lo, hi))
            .collect::<Result<_>>()?;
        Ok(Self { v, q, obs, next, act, next_act, rewards, done, betas, gamma: r.random_range(0.5..0.99) })
    }

    fn sample(&self, i: usize, v: &MlpParams, q: &MlpParams) -> Result<TdSample> {
        let mut s = TdSample::new(
            self.rewards[i],
            mlp_forward(v, &self.obs[i])?[0],
            mlp_forward(v, &self.next[i])?[0],
            mlp_forward(q, &concat(&self.obs[i], &self.act[i]))?[0],
            self.gamma,
        )
        .with_q_next(mlp_forward(q, &concat(&self.next[i], &self.next_act[i]))?[0]);
        if self.done[i] {
            s = s.terminal();
        }
        Ok(s)
    }

    /// Mean loss over the batch and the gradients it routes into V and Q.
    fn batch_loss(
        &self,
        v: &MlpParams,
        q: &MlpParams,
        loss: &dyn Fn(&TdSample, f64) -> Result<LossReport>,
    ) -> Result<(f64, GradBuffer, GradBuffer)> {
        let scale = 1.0 / BATCH as f64;
        let (mut gv, mut gq) = (GradBuffer::zeros_like(v), GradBuffer::zeros_like(q));
        let mut total = 0.0;
        for i in 0..BATCH {
            let rep = loss(&self.sample(i, v, q)?, self.betas[i])?;
            total += rep.loss * scale;
            let g = rep.grads;
            for (x, d) in [(self.obs[i].clone(), g.v_s), (self.next[i].clone(), g.v_next)] {
                v.backward_into(&v.forward_cached(&x)?, &[1.0], d * scale, &mut gv)?;
            }
            let q_inputs = [
                (concat(&self.obs[i], &self.act[i]), g.q),
                (concat(&self.next[i], &self.next_act[i]), g.q_next),
            ];
            for (x, d) in q_inputs {
                q.backward_into(&q.forward_cached(&x)?, &[1.0], d * scale, &mut gq)?;
            }
        }
        Ok((total, gv, gq))
    }
}

type LossFn = fn(&TdSample, f64) -> Result<LossReport>;

fn td_losses() -> [(&'static str, LossFn, bool, bool); 5] {
    // (name, loss, check V, check Q)
    [
        ("vtd", |s, _| vtd_loss(s), true, false),
        ("qtd", |s, _| qtd_loss(s), false, true),
        ("action_td", |s, _| action_td_loss(s), false, true),
        ("state_td", |s, _| state_td_loss(s), true, false),
        ("beta_state_td", |s, b| beta_state_td_loss(s, b), true, false),
    ]
}

/// Worst relative gradient error per loss, in [`GRAD_NAMES`] order.
fn composed_grad_errors(seed: u64) -> Result<[f64; 7]> {
    let fx = Fixture::new(seed)?;
    let mut out = [0.0; 7];
    for (name, loss, check_v, check_q) in td_losses() {
        let idx = GRAD_NAMES.iter().position(|n| *n == name).expect("known loss");
        let mut e = 0.0f64;
        if check_v {
            e = e.max(grad_check_with(&fx.v, |v| fx.batch_loss(v, &fx.q, &loss).map(|(l, g, _)| (l, g)))?);
        }
        if check_q {
            e = e.max(grad_check_with(&fx.q, |q| fx.batch_loss(&fx.v, q, &loss).map(|(l, _, g)| (l, g)))?);
        }
        out[idx] = e;
    }
    // policy gradient through a Plackett-Luce slate likelihood
    let mut r = Rng::seed_from_u64(seed ^ 0x5eed);
    let n_items = 7;
    let emb = ItemEmbeddings::generate(n_items, ACT, &mut r);
    let policy = MlpParams::init(&[OBS, 6, ACT], &[Activation::Tanh], &mut r)?;
    let batch: Vec<(Vec<f64>, Vec<usize>, f64)> = fx
        .obs
        .iter()
        .map(|o| {
            let slate = rand::seq::index::sample(&mut r, n_items, 3).into_vec();
            (o.clone(), slate, r.random_range(-1.0..1.0))
        })
        .collect();
    out[2] = grad_check_with(&policy, |p| policy_gradient(p, &emb, &batch))?;
    // deterministic actor through the critic Q(s, h)
    let actor = MlpParams::init(&[OBS, 6, ACT], &[Activation::Tanh], &mut r)?;
    let critic = |o: &[f64], h: &[f64]| {
        let x = concat(o, h);
        Ok((mlp_forward(&fx.q, &x)?[0], mlp_backward(&fx.q, &x, &[1.0])?.input_grad[OBS..].to_vec()))
    };
    out[3] = grad_check_with(&actor, |p| actor_gradient(p, &fx.obs, critic))?;
    Ok(out)
}

/// `None` when every stop-gradient holds; otherwise a description.
fn stop_gradients(seed: u64) -> Result<Option<String>> {
    let fx = Fixture::new(seed)?;
    for (name, loss, _, _) in td_losses() {
        let (_, gv, gq) = fx.batch_loss(&fx.v, &fx.q, &loss)?;
        let bad = match name {
            "action_td" => !gv.is_zero(),
            "state_td" | "beta_state_td" => !gq.is_zero(),
            _ => false,
        };
        if bad {
            return Ok(Some(format!("{name} leaked gradient across a stop-gradient")));
        }
    }
    // the same contract through full agent updates
    let env = Env::new(EnvConfig { n_items: 8, slate_size: 2, state_dim: 3, seed, ..EnvConfig::default() })?;
    for b in [Backbone::A2c, Backbone::Dqn, Backbone::Ddpg, Backbone::HacLite] {
        let cfg = AgentConfig { backbone: b, td_mode: TdMode::Decomposed, hidden: vec![6], ..AgentConfig::default() };
        let mut agent = Agent::new(cfg, &env, seed)?;
        let data = rollout(&mut agent, &env, 16, seed)?;
        let batch: Vec<&Transition> = data.iter().collect();
        let rep = agent.update(&batch)?;
        for t in &rep.term_grads {
            let leaked = match t.term {
                LossTerm::ActionTd => t.v.as_ref().is_some_and(|g| !g.is_zero()),
                LossTerm::StateTd => t.q.as_ref().is_some_and(|g| !g.is_zero()),
                _ => false,
            };
            if leaked {
                return Ok(Some(format!("{b}: {:?} leaked gradient", t.term)));
            }
        }
    }
    Ok(None)
}

fn rollout(agent: &mut Agent, env: &Env, n: usize, seed: u64) -> Result<Vec<Transition>> {
    let mut r = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut ep = 0u64;
    let (mut state, mut obs) = env.reset(seed);
    while out.len() < n {
        let action = agent.select_action(&obs, true, &mut r)?;
        let step = env_step(&mut state, &action.slate)?;
        out.push(Transition {
            obs: std::mem::replace(&mut obs, step.observation.clone()),
            action,
            reward: step.reward,
            next_obs: step.observation,
            done: step.done,
            episode_id: ep,
            step_index: 0,
        });
        if step.done {
            ep += 1;
            (state, obs) = env.reset(seed + ep);
        }
    }
    Ok(out)
}

/// The reference MDP's oracle satisfies both Bellman expectation equations.
fn oracle_bellman() -> Result<(bool, String)> {
    let mdp = reference_mdp();
    let pi = reference_policy();
    let o = policy_evaluation(&mdp, &pi, DEFAULT_TOL)?;
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states() {
        let v: f64 = (0..mdp.n_actions()).map(|a| pi.prob(s, a) * o.q_star[s][a]).sum();
        worst = worst.max((v - o.v_star[s]).abs());
        for a in 0..mdp.n_actions() {
            let cont: f64 = if mdp.is_terminal(s) {
                0.0
            } else {
                mdp.transition(s, a).iter().zip(&o.v_star).map(|(p, v)| p * v).sum()
            };
            worst = worst.max((mdp.reward(s, a) + mdp.gamma() * cont - o.q_star[s][a]).abs());
        }
    }
    Ok((worst < 1e-8, format!("max Bellman residual {worst:.2e}")))
}

/// Seeded rollouts agree with the oracle within four standard errors.
fn oracle_monte_carlo() -> Result<(bool, String)> {
    let mdp = reference_mdp();
    let pi = reference_policy();
    let o = policy_evaluation(&mdp, &pi, DEFAULT_TOL)?;
    let mut r = Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for s in (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)) {
        let mc = mc_return(&mdp, &pi, s, 4_000, 200, &mut r)?;
        worst = worst.max((mc.mean_return - o.v_star[s]).abs() / mc.std_error.max(1e-12));
    }
    Ok((worst < 4.0, format!("max deviation {worst:.2} standard errors")))
}

/// Every per-sample value TD loss stays within `(δ1 + δ2)^2`.
pub fn vtd_bound(n: usize) -> Result<(bool, String)> {
    let mut r = Rng::seed_from_u64(7);
    let samples = (0..n)
        .map(|_| {
            let s = TdSample::new(
                r.random_range(-2.0..2.0),
                r.random_range(-5.0..5.0),
                r.random_range(-5.0..5.0),
                r.random_range(-5.0..5.0),
                r.random_range(0.0..1.0),
            );
            residuals(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let b = bound_check(&samples)?;
    Ok((b.violations == 0, format!("{} violations in {n} samples", b.violations)))
}

/// Zero value TD loss while both decomposed losses stay large.
pub fn misguidance_witness() -> Result<(bool, String)> {
    let fx = make_alignment_fixture(AlignmentCase::B);
    let n = fx.len() as f64;
    let mean = |f: fn(&TdSample) -> Result<LossReport>| -> Result<f64> {
        Ok(fx.iter().map(f).collect::<Result<Vec<_>>>()?.iter().map(|l| l.loss).sum::<f64>() / n)
    };
    let (v, s, a) = (mean(vtd_loss)?, mean(state_td_loss)?, mean(action_td_loss)?);
    Ok((v < 1e-12 && s > 0.1 && a > 0.1, format!("vtd {v:.1e}, state_td {s:.3}, action_td {a:.3}")))
}

/// The β-weighted state TD minimizer, found from the loss gradients alone,
/// equals `Σ π(a) Q(a)` when behaviour samples `a ~ p`.
pub fn beta_stationary_point(instances: usize) -> Result<(bool, String)> {
    let mut r = Rng::seed_from_u64(13);
    let (lo, hi) = DEFAULT_BETA_CLIP;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        // probabilities bounded away from 0 keep every ratio inside the clip
        let dist = |r: &mut Rng| {
            let w: Vec<f64> = (0..3).map(|_| r.random_range(0.2..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.into_iter().map(|x| x / t).collect::<Vec<f64>>()
        };
        let (pi, p) = (dist(&mut r), dist(&mut r));
        let q: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
        let betas = (0..3).map(|a| beta_weight(pi[a].ln(), p[a].ln(), lo, hi)).collect::<Result<Vec<_>>>()?;
        // expected gradient under a ~ p is affine in V; two evaluations give its root
        let grad = |v: f64| -> Result<f64> {
            (0..3).try_fold(0.0, |acc, a| {
                Ok(acc + p[a] * beta_state_td_loss(&TdSample::new(0.0, v, 0.0, q[a], 0.0), betas[a])?.grads.v_s)
            })
        };
        let (g0, g1) = (grad(0.0)?, grad(1.0)?);
        let v_min = -g0 / (g1 - g0);
        let closed: f64 = (0..3).map(|a| pi[a] * q[a]).sum();
        worst = worst.max((v_min - closed).abs());
    }
    Ok((worst < 1e-9, format!("max |V - Σπ Q| = {worst:.1e} over {instances} instances")))
}

/// A small random MDP for property tests.
pub fn random_instance(seed: u64) -> Result<(TabularMdp, StochasticPolicy)> {
    let mut r = Rng::seed_from_u64(seed);
    let mdp = TabularMdp::random(4, 3, 0.9, &mut r)?;
    let probs = (0..4)
        .map(|_| {
            let w: Vec<f64> = (0..3).map(|_| r.random_range(0.05..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.into_iter().map(|x| x / t).collect()
        })
        .collect();
    Ok((mdp, StochasticPolicy::new(probs)?))
}
