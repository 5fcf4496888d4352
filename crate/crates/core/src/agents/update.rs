//! Batch updates for every backbone.
//!
//! Each loss term reports derivatives with respect to the value estimates it
//! consumed (`InputGrads`); those are pushed back through whichever network
//! passes produced the estimates. Estimates taken from a target network, or
//! behind a stop-gradient, carry no passes and receive nothing.

use crate::approx::{mlp_backward, mlp_forward, optim_step, soft_update, ForwardCache, GradBuffer, MlpParams};
use crate::buffer::Transition;
use crate::env::ItemEmbeddings;
use crate::error::{Error, Result};
use crate::tdcore::{
    action_td_loss, advantage, beta_state_td_loss, beta_weight, qtd_loss, vtd_loss, InputGrads, LossReport, TdSample,
};

use super::likelihood::{plackett_luce_grad, plackett_luce_log_prob, top_k};
use super::{Agent, Backbone, TdMode, ACTOR_BOUND};

/// `v + adv - mean_adv`.
pub fn dueling_q(v: f64, adv: f64, mean_adv: f64) -> f64 {
    v + adv - mean_adv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Vtd,
    Qtd,
    ActionTd,
    StateTd,
}

/// Gradient one loss term sent to each critic network (None if the agent has
/// no such network).
#[derive(Debug, Clone)]
pub struct TermGrads {
    pub term: LossTerm,
    pub v: Option<GradBuffer>,
    pub q: Option<GradBuffer>,
}

#[derive(Debug, Clone, Default)]
pub struct UpdateReport {
    pub batch_size: usize,
    /// Mean VTD (a2c) or QTD loss in original mode.
    pub td_loss: Option<f64>,
    pub action_td_loss: Option<f64>,
    pub state_td_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub mean_advantage: f64,
    /// Measured importance weight, reported even when the update used β = 1.
    pub mean_beta: Option<f64>,
    pub mean_alpha: Option<f64>,
    pub grad_norm_v: f64,
    pub grad_norm_q: f64,
    pub grad_norm_policy: f64,
    /// Batch rejected for non-finite losses or gradients; no parameter moved.
    pub skipped: bool,
    pub term_grads: Vec<TermGrads>,
    pub policy_grads: Option<GradBuffer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    V,
    Q,
}

/// A scalar estimate with the network passes it was built from:
/// `value = sum coef * output(pass)` up to constants.
struct Probe {
    value: f64,
    parts: Vec<(Slot, ForwardCache, f64)>,
}

impl Probe {
    fn constant(value: f64) -> Self {
        Self { value, parts: Vec::new() }
    }
}

struct Accum {
    v: Option<GradBuffer>,
    q: Option<GradBuffer>,
}

impl Accum {
    fn new(agent: &Agent) -> Self {
        Self {
            v: agent.v.as_ref().map(|n| GradBuffer::zeros_like(&n.params)),
            q: agent.q.as_ref().map(|n| GradBuffer::zeros_like(&n.params)),
        }
    }

    fn route(&mut self, agent: &Agent, probe: &Probe, upstream: f64) -> Result<()> {
        if upstream == 0.0 {
            return Ok(());
        }
        for (slot, cache, coef) in &probe.parts {
            let (net, acc) = match slot {
                Slot::V => (agent.v.as_ref(), self.v.as_mut()),
                Slot::Q => (agent.q.as_ref(), self.q.as_mut()),
            };
            let (net, acc) = net.zip(acc).expect("probe refers to an existing network");
            net.params.backward_into(cache, &[1.0], upstream * coef, acc)?;
        }
        Ok(())
    }

    fn into_term(self, term: LossTerm) -> TermGrads {
        TermGrads { term, v: self.v, q: self.q }
    }
}

struct Estimates {
    sample: TdSample,
    v_s: Option<Probe>,
    v_next: Option<Probe>,
    q: Option<Probe>,
    q_next: Option<Probe>,
}

fn route_all(acc: &mut Accum, agent: &Agent, est: &Estimates, g: &InputGrads, scale: f64) -> Result<()> {
    for (probe, d) in [(&est.v_s, g.v_s), (&est.v_next, g.v_next), (&est.q, g.q), (&est.q_next, g.q_next)] {
        if let Some(p) = probe {
            acc.route(agent, p, d * scale)?;
        }
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean of `-A * log pi(slate | s)` over the batch and its gradient for
/// the policy network, advantages held constant.
pub fn policy_gradient(
    policy: &MlpParams,
    embeddings: &ItemEmbeddings,
    batch: &[(Vec<f64>, Vec<usize>, f64)],
) -> Result<(f64, GradBuffer)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradBuffer::zeros_like(policy);
    let mut loss = 0.0;
    for (obs, slate, adv) in batch {
        let cache = policy.forward_cached(obs)?;
        let logits = embeddings.scores(cache.output());
        loss -= adv * plackett_luce_log_prob(&logits, slate) * scale;
        if *adv == 0.0 {
            continue;
        }
        let dlogits = plackett_luce_grad(&logits, slate);
        let mut du = vec![0.0; embeddings.dim()];
        for (i, d) in dlogits.iter().enumerate() {
            for (u, e) in du.iter_mut().zip(embeddings.row(i)) {
                *u += d * e;
            }
        }
        policy.backward_into(&cache, &du, -adv * scale, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Mean of `-Q(s, 2 tanh(actor(s)))` over `observations` and its gradient for
/// the actor. `critic(obs, h)` returns `(Q, dQ/dh)`; it is never modified.
pub fn actor_gradient<F>(actor: &MlpParams, observations: &[Vec<f64>], mut critic: F) -> Result<(f64, GradBuffer)>
where
    F: FnMut(&[f64], &[f64]) -> Result<(f64, Vec<f64>)>,
{
    if observations.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let scale = 1.0 / observations.len() as f64;
    let mut grads = GradBuffer::zeros_like(actor);
    let mut loss = 0.0;
    for obs in observations {
        let cache = actor.forward_cached(obs)?;
        let t: Vec<f64> = cache.output().iter().map(|z| z.tanh()).collect();
        let h: Vec<f64> = t.iter().map(|x| ACTOR_BOUND * x).collect();
        let (q, dq) = critic(obs, &h)?;
        if dq.len() != h.len() {
            return Err(Error::Shape("critic action gradient has the wrong length".into()));
        }
        loss -= q * scale;
        let dz: Vec<f64> = dq.iter().zip(&t).map(|(g, x)| -g * ACTOR_BOUND * (1.0 - x * x)).collect();
        actor.backward_into(&cache, &dz, scale, &mut grads)?;
    }
    Ok((loss, grads))
}

impl Agent {
    fn bootstrap_net(&self, slot: Slot) -> (&MlpParams, bool) {
        let net = match slot {
            Slot::V => self.v.as_ref(),
            Slot::Q => self.q.as_ref(),
        }
        .expect("network present");
        (net.bootstrap_params(), net.target.is_none())
    }

    fn single(&self, slot: Slot, params: &MlpParams, input: &[f64], tracked: bool) -> Result<Probe> {
        let cache = params.forward_cached(input)?;
        let value = cache.output()[0];
        Ok(if tracked { Probe { value, parts: vec![(slot, cache, 1.0)] } } else { Probe::constant(value) })
    }

    fn v_probe(&self, obs: &[f64], bootstrap: bool) -> Result<Probe> {
        let (params, tracked) = if bootstrap { self.bootstrap_net(Slot::V) } else { (&self.v.as_ref().unwrap().params, true) };
        self.single(Slot::V, params, obs, tracked)
    }

    /// Sum of item-wise scores over the slate.
    fn slate_q_probe(&self, obs: &[f64], items: &[usize], bootstrap: bool) -> Result<Probe> {
        let (params, tracked) = if bootstrap { self.bootstrap_net(Slot::Q) } else { (&self.q.as_ref().unwrap().params, true) };
        let mut value = 0.0;
        let mut parts = Vec::new();
        for &i in items {
            let cache = params.forward_cached(&Self::concat(obs, self.embeddings.row(i)))?;
            value += cache.output()[0];
            if tracked {
                parts.push((Slot::Q, cache, 1.0));
            }
        }
        Ok(Probe { value, parts })
    }

    /// Slate value `K V(s) + sum_slate A(s,i) - K mean_j A(s,j)`.
    fn dueling_probe(&self, obs: &[f64], items: &[usize], bootstrap: bool) -> Result<Probe> {
        let (vp, vt) = if bootstrap { self.bootstrap_net(Slot::V) } else { (&self.v.as_ref().unwrap().params, true) };
        let (ap, at) = if bootstrap { self.bootstrap_net(Slot::Q) } else { (&self.q.as_ref().unwrap().params, true) };
        let k = items.len() as f64;
        let n = self.n_items as f64;
        let vc = vp.forward_cached(obs)?;
        let v = vc.output()[0];
        let mut parts = Vec::new();
        if vt {
            parts.push((Slot::V, vc, k));
        }
        let mut adv = Vec::with_capacity(self.n_items);
        for i in 0..self.n_items {
            let cache = ap.forward_cached(&Self::concat(obs, self.embeddings.row(i)))?;
            adv.push(cache.output()[0]);
            if at {
                let in_slate = f64::from(u8::from(items.contains(&i)));
                parts.push((Slot::Q, cache, in_slate - k / n));
            }
        }
        let mean_adv = mean(&adv);
        let value = items.iter().map(|&i| dueling_q(v, adv[i], mean_adv)).sum();
        Ok(Probe { value, parts })
    }

    /// Bootstrapped value of the greedy next slate.
    fn greedy_next_probe(&self, obs: &[f64]) -> Result<Probe> {
        let (params, _) = self.bootstrap_net(Slot::Q);
        let slate = top_k(&self.item_scores(params, obs)?, self.slate_size);
        match self.cfg.backbone {
            Backbone::DuelingDqn => self.dueling_probe(obs, &slate, true),
            _ => self.slate_q_probe(obs, &slate, true),
        }
    }

    fn critic_probe(&self, obs: &[f64], h: &[f64], bootstrap: bool) -> Result<Probe> {
        let (params, tracked) = if bootstrap { self.bootstrap_net(Slot::Q) } else { (&self.q.as_ref().unwrap().params, true) };
        self.single(Slot::Q, params, &Self::concat(obs, h), tracked)
    }

    /// The action vector the critic sees for a stored transition.
    fn critic_action(&self, t: &Transition, obs: &[f64]) -> Result<Vec<f64>> {
        match self.cfg.backbone {
            Backbone::Ddpg => Ok(self.actor_mean(obs)?),
            _ => t
                .action
                .hyper_action
                .clone()
                .ok_or_else(|| Error::Invalid("continuous transition without a hyper-action".into())),
        }
    }

    fn q_probe(&self, t: &Transition, obs: &[f64]) -> Result<Probe> {
        match self.cfg.backbone {
            Backbone::Ddpg | Backbone::HacLite => self.critic_probe(obs, &self.critic_action(t, obs)?, false),
            Backbone::DuelingDqn => self.dueling_probe(obs, &t.action.slate.items, false),
            Backbone::A2c | Backbone::Dqn => self.slate_q_probe(obs, &t.action.slate.items, false),
        }
    }

    fn q_next_probe(&self, next: &[f64]) -> Result<Probe> {
        match self.cfg.backbone {
            Backbone::Ddpg | Backbone::HacLite => {
                let actor = self.policy.as_ref().unwrap().bootstrap_params();
                let (mu, _) = self.actor_mean_with(actor, next)?;
                self.critic_probe(next, &mu, true)
            }
            _ => self.greedy_next_probe(next),
        }
    }

    fn estimates(&self, t: &Transition) -> Result<Estimates> {
        let obs = t.obs.to_vec();
        let next = t.next_obs.to_vec();
        let skip_next = t.done;
        let (v_s, v_next, q, q_next) = match (self.cfg.backbone, self.cfg.td_mode) {
            (Backbone::A2c, TdMode::Original) => {
                let vn = if skip_next { Probe::constant(0.0) } else { self.v_probe(&next, true)? };
                (Some(self.v_probe(&obs, false)?), Some(vn), None, None)
            }
            (_, TdMode::Original) => {
                let qn = if skip_next { Probe::constant(0.0) } else { self.q_next_probe(&next)? };
                (None, None, Some(self.q_probe(t, &obs)?), Some(qn))
            }
            (_, TdMode::Decomposed) => {
                // V(s') sits behind a stop-gradient in action TD
                let vn = if skip_next { 0.0 } else { self.v_probe(&next, true)?.value };
                (Some(self.v_probe(&obs, false)?), Some(Probe::constant(vn)), Some(self.q_probe(t, &obs)?), None)
            }
        };
        let value = |p: &Option<Probe>| p.as_ref().map_or(0.0, |p| p.value);
        let mut sample = TdSample::new(t.reward, value(&v_s), value(&v_next), value(&q), self.cfg.gamma);
        if let Some(qn) = &q_next {
            sample = sample.with_q_next(qn.value);
        }
        if t.done {
            sample = sample.terminal();
        }
        Ok(Estimates { sample, v_s, v_next, q, q_next })
    }

    /// `(measured β, α)` for a stored action under the current policy.
    fn importance(&self, t: &Transition) -> Result<(f64, f64)> {
        if t.action.deterministic {
            return Ok((1.0, 0.0));
        }
        let (lo, hi) = self.cfg.beta_clip;
        let log_pi = self.current_log_likelihood(&t.obs.to_vec(), &t.action)?;
        let log_p = t.action.log_likelihood;
        let alpha = (log_pi.exp() - log_p.exp()).abs();
        if log_pi == f64::NEG_INFINITY {
            return Ok((lo, alpha));
        }
        Ok((beta_weight(log_pi, log_p, lo, hi)?, alpha))
    }

    /// One gradient step on a batch, dispatched on the backbone.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateReport> {
        match self.cfg.backbone {
            Backbone::A2c => self.a2c_update(batch),
            Backbone::Dqn => self.dqn_update(batch),
            Backbone::Ddpg => self.ddpg_update(batch),
            Backbone::HacLite => self.hac_lite_update(batch),
            Backbone::DuelingDqn => self.dqn_update(batch),
        }
    }

    pub fn a2c_update(&mut self, batch: &[&Transition]) -> Result<UpdateReport> {
        self.expect_backbone(&[Backbone::A2c])?;
        self.step_batch(batch)
    }

    /// Also serves the dueling backbone.
    pub fn dqn_update(&mut self, batch: &[&Transition]) -> Result<UpdateReport> {
        self.expect_backbone(&[Backbone::Dqn, Backbone::DuelingDqn])?;
        self.step_batch(batch)
    }

    pub fn ddpg_update(&mut self, batch: &[&Transition]) -> Result<UpdateReport> {
        self.expect_backbone(&[Backbone::Ddpg])?;
        self.step_batch(batch)
    }

    pub fn hac_lite_update(&mut self, batch: &[&Transition]) -> Result<UpdateReport> {
        self.expect_backbone(&[Backbone::HacLite])?;
        self.step_batch(batch)
    }

    fn expect_backbone(&self, allowed: &[Backbone]) -> Result<()> {
        if allowed.contains(&self.cfg.backbone) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("update rule does not apply to backbone {}", self.cfg.backbone)))
        }
    }

    fn step_batch(&mut self, batch: &[&Transition]) -> Result<UpdateReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        match self.compute(batch) {
            Ok(Some((mut report, steps))) => {
                self.apply(steps)?;
                if self.cfg.backbone.is_continuous() {
                    self.actor_step(batch, &mut report)?;
                }
                self.updates += 1;
                Ok(report)
            }
            Ok(None) | Err(Error::NonFinite(_)) => {
                self.divergences += 1;
                Ok(UpdateReport { batch_size: batch.len(), skipped: true, ..UpdateReport::default() })
            }
            Err(e) => Err(e),
        }
    }

    /// Losses and gradients for a batch; `None` if anything is non-finite.
    pub(super) fn compute(&self, batch: &[&Transition]) -> Result<Option<(UpdateReport, Steps)>> {
        let scale = 1.0 / batch.len() as f64;
        let decomposed = self.cfg.td_mode == TdMode::Decomposed;
        let mut report = UpdateReport { batch_size: batch.len(), ..UpdateReport::default() };
        let mut losses: Vec<Vec<f64>> = vec![Vec::new(); 2];
        let mut betas = Vec::new();
        let mut alphas = Vec::new();
        let mut advantages = Vec::new();
        let mut acc_main = Accum::new(self);
        let mut acc_state = Accum::new(self);
        for t in batch {
            let est = self.estimates(t)?;
            if decomposed {
                let a = action_td_loss(&est.sample)?;
                route_all(&mut acc_main, self, &est, &a.grads, scale)?;
                let (beta, alpha) = self.importance(t)?;
                betas.push(beta);
                alphas.push(alpha);
                let used = if self.cfg.use_beta { beta } else { 1.0 };
                let s = beta_state_td_loss(&est.sample, used)?;
                route_all(&mut acc_state, self, &est, &s.grads, scale)?;
                losses[0].push(a.loss);
                losses[1].push(s.loss);
                advantages.push(est.sample.q - est.sample.v_s);
            } else {
                let l: LossReport = if self.cfg.backbone == Backbone::A2c {
                    advantages.push(advantage(&est.sample)?);
                    vtd_loss(&est.sample)?
                } else {
                    qtd_loss(&est.sample)?
                };
                route_all(&mut acc_main, self, &est, &l.grads, scale)?;
                losses[0].push(l.loss);
                // β and α are still measured for the diagnostics
                let (beta, alpha) = self.importance(t)?;
                betas.push(beta);
                alphas.push(alpha);
            }
        }
        if decomposed {
            report.action_td_loss = Some(mean(&losses[0]));
            report.state_td_loss = Some(mean(&losses[1]));
            report.term_grads = vec![acc_main.into_term(LossTerm::ActionTd), acc_state.into_term(LossTerm::StateTd)];
        } else {
            report.td_loss = Some(mean(&losses[0]));
            let term = if self.cfg.backbone == Backbone::A2c { LossTerm::Vtd } else { LossTerm::Qtd };
            report.term_grads = vec![acc_main.into_term(term)];
        }
        if !betas.is_empty() {
            report.mean_beta = Some(mean(&betas));
            report.mean_alpha = Some(mean(&alphas));
        }
        if !advantages.is_empty() {
            report.mean_advantage = mean(&advantages);
        }

        let mut steps = Steps::default();
        let total = |pick: fn(&TermGrads) -> Option<&GradBuffer>| -> Result<Option<GradBuffer>> {
            let mut out: Option<GradBuffer> = None;
            for tg in &report.term_grads {
                if let Some(g) = pick(tg) {
                    match out.as_mut() {
                        Some(o) => o.add_scaled(g, 1.0)?,
                        None => out = Some(g.clone()),
                    }
                }
            }
            Ok(out)
        };
        steps.v = total(|t| t.v.as_ref())?;
        steps.q = total(|t| t.q.as_ref())?;
        report.grad_norm_v = steps.v.as_ref().map_or(0.0, GradBuffer::norm);
        report.grad_norm_q = steps.q.as_ref().map_or(0.0, GradBuffer::norm);

        if self.cfg.backbone == Backbone::A2c {
            if self.cfg.normalize_advantage && advantages.len() > 1 {
                let m = mean(&advantages);
                let sd = (advantages.iter().map(|a| (a - m).powi(2)).sum::<f64>() / advantages.len() as f64).sqrt();
                for a in &mut advantages {
                    *a = (*a - m) / (sd + 1e-8);
                }
            }
            let items: Vec<(Vec<f64>, Vec<usize>, f64)> = batch
                .iter()
                .zip(&advantages)
                .map(|(t, &a)| (t.obs.to_vec(), t.action.slate.items.clone(), a))
                .collect();
            let (loss, g) = policy_gradient(&self.policy.as_ref().unwrap().params, &self.embeddings, &items)?;
            report.policy_loss = Some(loss);
            report.grad_norm_policy = g.norm();
            report.policy_grads = Some(g.clone());
            steps.policy = Some(g);
        }

        let finite = [&steps.v, &steps.q, &steps.policy].iter().all(|g| g.as_ref().is_none_or(GradBuffer::is_finite))
            && losses.iter().flatten().all(|l| l.is_finite());
        Ok(finite.then_some((report, steps)))
    }

    /// Deterministic policy gradient through the (already updated, frozen) critic.
    fn actor_step(&mut self, batch: &[&Transition], report: &mut UpdateReport) -> Result<()> {
        let observations: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.to_vec()).collect();
        let critic = &self.q.as_ref().expect("continuous backbone has a critic").params;
        let actor = self.policy.as_ref().expect("continuous backbone has an actor");
        let (loss, grads) = actor_gradient(&actor.params, &observations, |obs, h| {
            let input = Self::concat(obs, h);
            let back = mlp_backward(critic, &input, &[1.0])?;
            let q = mlp_forward(critic, &input)?[0];
            Ok((q, back.input_grad[obs.len()..].to_vec()))
        })?;
        if !(loss.is_finite() && grads.is_finite()) {
            self.divergences += 1;
            return Ok(());
        }
        report.policy_loss = Some(loss);
        report.grad_norm_policy = grads.norm();
        let net = self.policy.as_mut().unwrap();
        optim_step(&mut net.params, &grads, &mut net.opt)?;
        if let Some(t) = net.target.as_mut() {
            soft_update(t, &net.params, self.cfg.target_tau);
        }
        report.policy_grads = Some(grads);
        Ok(())
    }

    fn apply(&mut self, steps: Steps) -> Result<()> {
        if let (Some(net), Some(g)) = (self.v.as_mut(), steps.v.as_ref()) {
            optim_step(&mut net.params, g, &mut net.opt)?;
        }
        if let (Some(net), Some(g)) = (self.q.as_mut(), steps.q.as_ref()) {
            optim_step(&mut net.params, g, &mut net.opt)?;
        }
        if let (Some(net), Some(g)) = (self.policy.as_mut(), steps.policy.as_ref()) {
            optim_step(&mut net.params, g, &mut net.opt)?;
        }
        let tau = self.cfg.target_tau;
        for net in [self.v.as_mut(), self.q.as_mut()].into_iter().flatten() {
            if let Some(t) = net.target.as_mut() {
                soft_update(t, &net.params, tau);
            }
        }
        Ok(())
    }
}

#[derive(Default)]
pub(super) struct Steps {
    v: Option<GradBuffer>,
    q: Option<GradBuffer>,
    policy: Option<GradBuffer>,
}
