//! Browser bindings for the static demo page in `www/`.
//!
//! Every export returns a flat `Float64Array` so the page needs no glue
//! beyond what `wasm-bindgen` generates.

use tdlab::agents::{Agent, AgentConfig, Backbone, TdMode};
use tdlab::buffer::{ReplayBuffer, Transition};
use tdlab::env::{env_step, random_slate, Env, EnvConfig};
use tdlab::oracle::{policy_evaluation, DEFAULT_TOL};
use tdlab::rng::{self, streams};
use tdlab::tabular::{reference_mdp, reference_policy, train_tabular, TabularConfig, TabularRule};
use wasm_bindgen::prelude::*;

fn js_err(e: tdlab::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn top_k_by_affinity(env: &Env, features: &[f64], k: usize) -> Vec<usize> {
    let scores = env.embeddings().scores(features);
    tdlab::agents::top_k(&scores, k)
}

/// Plays one session with the given seed and returns the per-step rewards.
///
/// `policy` is `"random"` or `"greedy"` (top-K items by affinity with the
/// observed user features).
#[wasm_bindgen]
pub fn simulate_session(policy: &str, env_seed: u64, episode_seed: u64) -> Result<Vec<f64>, JsError> {
    let env = Env::new(EnvConfig { seed: env_seed, ..EnvConfig::default() }).map_err(js_err)?;
    let (mut state, mut obs) = env.reset(episode_seed);
    let mut r = rng::stream(episode_seed, streams::ACTIONS, 0);
    let mut rewards = Vec::new();
    loop {
        let slate = match policy {
            "random" => random_slate(&state, &mut r),
            "greedy" => tdlab::env::SlateAction::new(
                top_k_by_affinity(&env, &obs.features, env.config().slate_size),
                env.config(),
            )
            .map_err(js_err)?,
            other => return Err(JsError::new(&format!("unknown policy `{other}`"))),
        };
        let out = env_step(&mut state, &slate).map_err(js_err)?;
        rewards.push(out.reward);
        obs = out.observation;
        if out.done {
            return Ok(rewards);
        }
    }
}

/// Sup-norm error against the oracle V of the reference policy, after each
/// budget in `budgets`. Output is `[decomposed_0, value_td_0, decomposed_1, ...]`.
///
/// The decomposed learner follows the policy itself; the value TD learner
/// follows a copy mixed with `noise` uniform exploration.
#[wasm_bindgen]
pub fn tabular_error_curve(noise: f64, budgets: Vec<u32>, seed: u64) -> Result<Vec<f64>, JsError> {
    let mdp = reference_mdp();
    let pi = reference_policy();
    let noisy = pi.with_exploration(noise).map_err(js_err)?;
    let oracle = policy_evaluation(&mdp, &pi, DEFAULT_TOL).map_err(js_err)?;
    let mut out = Vec::with_capacity(2 * budgets.len());
    for b in budgets {
        let cfg = TabularConfig { updates: b as usize, seed, ..TabularConfig::default() };
        let dec = train_tabular(&mdp, &pi, &pi, TabularRule::Decomposed { use_beta: false }, &cfg).map_err(js_err)?;
        let vtd = train_tabular(&mdp, &noisy, &pi, TabularRule::Vtd, &cfg).map_err(js_err)?;
        out.push(dec.v_error(&oracle.v_star));
        out.push(vtd.v_error(&oracle.v_star));
    }
    Ok(out)
}

/// Short decomposed HAC-lite run at exploration scale `sigma`; returns
/// `[mean_beta, mean_alpha, mean_episode_reward]`.
#[wasm_bindgen]
pub fn beta_at_sigma(sigma: f64, steps: u32, seed: u64) -> Result<Vec<f64>, JsError> {
    let env_cfg = EnvConfig { n_items: 20, slate_size: 4, state_dim: 4, ..EnvConfig::default() };
    let env = Env::new(env_cfg).map_err(js_err)?;
    let mut cfg = AgentConfig { backbone: Backbone::HacLite, td_mode: TdMode::Decomposed, hidden: vec![16], ..AgentConfig::default() };
    cfg.exploration.sigma = sigma;
    let mut agent = Agent::new(cfg, &env, seed).map_err(js_err)?;
    let mut buffer = ReplayBuffer::new(10_000).map_err(js_err)?;
    let mut act = rng::stream(seed, streams::ACTIONS, 0);
    let mut replay = rng::stream(seed, streams::REPLAY, 0);
    let (mut betas, mut alphas) = (Vec::new(), Vec::new());
    let (mut episode, mut ep_reward, mut finished) = (0u64, 0.0, Vec::new());
    let (mut state, mut obs) = env.reset(rng::derive_seed(seed, streams::EPISODE, 0));
    for step in 0..steps as usize {
        let action = agent.select_action(&obs, true, &mut act).map_err(js_err)?;
        let out = env_step(&mut state, &action.slate).map_err(js_err)?;
        ep_reward += out.reward;
        let t = Transition {
            obs: std::mem::replace(&mut obs, out.observation.clone()),
            action,
            reward: out.reward,
            next_obs: out.observation,
            done: out.done,
            episode_id: episode,
            step_index: step,
        };
        buffer.push(t).map_err(js_err)?;
        if out.done {
            finished.push(ep_reward);
            ep_reward = 0.0;
            episode += 1;
            (state, obs) = env.reset(rng::derive_seed(seed, streams::EPISODE, episode));
        }
        if buffer.len() >= 32 {
            let batch = buffer.sample(32, &mut replay).map_err(js_err)?;
            let rep = agent.update(&batch).map_err(js_err)?;
            betas.extend(rep.mean_beta);
            alphas.extend(rep.mean_alpha);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(vec![mean(&betas), mean(&alphas), mean(&finished)])
}
