//! Exactly solvable references: tabular MDPs evaluated by dynamic
//! programming, Monte Carlo returns, and hand-built alignment fixtures.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tdcore::{AlignmentCase, TdSample};

pub const MAX_STATES: usize = 64;
pub const MAX_ACTIONS: usize = 16;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `p[s][a][s']`
    p: Vec<Vec<Vec<f64>>>,
    /// `r[s][a]`
    r: Vec<Vec<f64>>,
    terminal: Vec<bool>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        p: Vec<Vec<Vec<f64>>>,
        r: Vec<Vec<f64>>,
        terminal: Vec<bool>,
        gamma: f64,
    ) -> Result<Self> {
        let n_states = p.len();
        let n_actions = p.first().map(Vec::len).unwrap_or(0);
        let bad = |m: String| Err(Error::Config(format!("tabular mdp: {m}")));
        if n_states == 0 || n_states > MAX_STATES {
            return bad(format!("{n_states} states (allowed 1..={MAX_STATES})"));
        }
        if n_actions == 0 || n_actions > MAX_ACTIONS {
            return bad(format!("{n_actions} actions (allowed 1..={MAX_ACTIONS})"));
        }
        if r.len() != n_states || terminal.len() != n_states {
            return bad("reward / terminal tables have the wrong number of states".into());
        }
        if !(0.0..=1.0).contains(&gamma) {
            return bad(format!("gamma {gamma} outside [0, 1]"));
        }
        for s in 0..n_states {
            if p[s].len() != n_actions || r[s].len() != n_actions {
                return bad(format!("state {s} has the wrong number of actions"));
            }
            for a in 0..n_actions {
                let row = &p[s][a];
                if row.len() != n_states || row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return bad(format!("P[{s}][{a}] is not a distribution over {n_states} states"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return bad(format!("P[{s}][{a}] sums to {sum}"));
                }
                if !r[s][a].is_finite() {
                    return bad(format!("R[{s}][{a}] is not finite"));
                }
                if terminal[s] && (row[s] != 1.0 || r[s][a] != 0.0) {
                    return bad(format!("terminal state {s} must self-loop with zero reward"));
                }
            }
        }
        Ok(Self { n_states, n_actions, p, r, terminal, gamma })
    }

    /// Dense random MDP without terminal states.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let p = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        let w: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.05).collect();
                        let total: f64 = w.iter().sum();
                        let mut row: Vec<f64> = w.iter().map(|x| x / total).collect();
                        // pin the row sum to 1 within rounding
                        let drift: f64 = 1.0 - row.iter().sum::<f64>();
                        row[0] += drift;
                        row
                    })
                    .collect()
            })
            .collect();
        let r = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Self::new(p, r, vec![false; n_states], gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s][a]
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.p[s][a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    /// Samples `s'` given `(s, a)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(&self.p[s][a], rng)
    }

    /// Plain-text format:
    ///
    /// ```text
    /// tabular-mdp v1
    /// states <S> actions <A> gamma <g>
    /// terminal <S flags, 0 or 1>
    /// P
    /// <S*A rows, row (s, a) in s-major order, S probabilities each>
    /// R
    /// <S rows, A rewards each>
    /// ```
    ///
    /// Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap().trim())
            .filter(|l| !l.is_empty());
        let mut next = || lines.next().ok_or_else(|| Error::Parse("truncated tabular mdp".into()));
        if next()? != "tabular-mdp v1" {
            return Err(Error::Parse("missing `tabular-mdp v1` header".into()));
        }
        let dims: Vec<&str> = next()?.split_whitespace().collect();
        if dims.len() != 6 || dims[0] != "states" || dims[2] != "actions" || dims[4] != "gamma" {
            return Err(Error::Parse("expected `states S actions A gamma g`".into()));
        }
        let n_s: usize = dims[1].parse().map_err(|e| Error::Parse(format!("states: {e}")))?;
        let n_a: usize = dims[3].parse().map_err(|e| Error::Parse(format!("actions: {e}")))?;
        let gamma: f64 = dims[5].parse().map_err(|e| Error::Parse(format!("gamma: {e}")))?;
        let term_line = next()?;
        let mut term = term_line.split_whitespace();
        if term.next() != Some("terminal") {
            return Err(Error::Parse("expected `terminal` line".into()));
        }
        let terminal: Vec<bool> = term
            .map(|t| match t {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse(format!("terminal flag `{other}`"))),
            })
            .collect::<Result<_>>()?;
        if next()? != "P" {
            return Err(Error::Parse("expected `P` section".into()));
        }
        let mut p = vec![Vec::with_capacity(n_a); n_s];
        for s in 0..n_s {
            for _ in 0..n_a {
                let row = floats(next()?)?;
                p[s].push(row);
            }
        }
        if next()? != "R" {
            return Err(Error::Parse("expected `R` section".into()));
        }
        let mut r = Vec::with_capacity(n_s);
        for _ in 0..n_s {
            r.push(floats(next()?)?);
        }
        Self::new(p, r, terminal, gamma)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        writeln!(s, "tabular-mdp v1").unwrap();
        writeln!(s, "states {} actions {} gamma {:?}", self.n_states, self.n_actions, self.gamma).unwrap();
        let flags: Vec<&str> = self.terminal.iter().map(|&t| if t { "1" } else { "0" }).collect();
        writeln!(s, "terminal {}", flags.join(" ")).unwrap();
        writeln!(s, "P").unwrap();
        for st in 0..self.n_states {
            for a in 0..self.n_actions {
                writeln!(s, "{}", fmt(&self.p[st][a])).unwrap();
            }
        }
        writeln!(s, "R").unwrap();
        for st in 0..self.n_states {
            writeln!(s, "{}", fmt(&self.r[st])).unwrap();
        }
        s
    }
}

fn floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("`{t}`: {e}"))))
        .collect()
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum: take the last nonzero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    probs: Vec<Vec<f64>>,
}

impl StochasticPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            if row.is_empty() || row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Invalid(format!("policy row {s} is not a distribution")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!("policy row {s} does not sum to 1")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    /// Deterministic policy choosing `actions[s]` in each state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let probs = actions
            .iter()
            .map(|&a| {
                if a >= n_actions {
                    return Err(Error::Invalid(format!("action {a} out of range")));
                }
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Ok(Self { probs })
    }

    /// `(1 - noise) base + noise uniform`: a tabular analogue of action exploration.
    pub fn with_exploration(&self, noise: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Invalid(format!("exploration mix {noise} outside [0, 1]")));
        }
        let probs = self
            .probs
            .iter()
            .map(|row| {
                let u = 1.0 / row.len() as f64;
                row.iter().map(|&p| (1.0 - noise) * p + noise * u).collect()
            })
            .collect();
        Self::new(probs)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(&self.probs[s], rng)
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.len() != mdp.n_states || self.probs.iter().any(|r| r.len() != mdp.n_actions) {
            return Err(Error::Shape("policy does not match the MDP".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleValues {
    pub v_star: Vec<f64>,
    pub q_star: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    /// Sup-norm change of every sweep, in order.
    pub residual_history: Vec<f64>,
}

/// States from which a terminal state is reachable with positive probability
/// under `policy`.
fn reaches_terminal(mdp: &TabularMdp, policy: &StochasticPolicy) -> Vec<bool> {
    let mut ok = mdp.terminal.clone();
    loop {
        let mut changed = false;
        for s in 0..mdp.n_states {
            if ok[s] {
                continue;
            }
            let reach = (0..mdp.n_actions).any(|a| {
                policy.prob(s, a) > 0.0 && (0..mdp.n_states).any(|t| ok[t] && mdp.p[s][a][t] > 0.0)
            });
            if reach {
                ok[s] = true;
                changed = true;
            }
        }
        if !changed {
            return ok;
        }
    }
}

/// Iterative Bellman expectation updates until the sup-norm change drops below `tol`.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &StochasticPolicy, tol: f64) -> Result<OracleValues> {
    policy.check_against(mdp)?;
    if !(tol > 0.0) {
        return Err(Error::Invalid("tolerance must be positive".into()));
    }
    if mdp.gamma >= 1.0 && reaches_terminal(mdp, policy).iter().any(|&r| !r) {
        return Err(Error::Invalid("gamma = 1 needs every state to reach a terminal state".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let q_of = |v: &[f64], s: usize, a: usize| -> f64 {
        if mdp.terminal[s] {
            return 0.0;
        }
        mdp.r[s][a] + mdp.gamma * mdp.p[s][a].iter().zip(v).map(|(p, x)| p * x).sum::<f64>()
    };
    let mut v = vec![0.0; ns];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let next: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| policy.prob(s, a) * q_of(&v, s, a)).sum())
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        iterations += 1;
        history.push(delta);
        if delta < tol {
            break;
        }
        if iterations >= MAX_ITERATIONS {
            return Err(Error::Invalid(format!("policy evaluation did not converge in {MAX_ITERATIONS} sweeps")));
        }
    }
    let q_star: Vec<Vec<f64>> = (0..ns).map(|s| (0..na).map(|a| q_of(&v, s, a)).collect()).collect();
    let v_star: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| policy.prob(s, a) * q_star[s][a]).sum())
        .collect();
    let residual = *history.last().unwrap();
    Ok(OracleValues { v_star, q_star, iterations, residual, residual_history: history })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean_return: f64,
    pub std_error: f64,
}

/// Mean discounted return of seeded rollouts truncated at `horizon` steps.
pub fn mc_return<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    start_state: usize,
    n_episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    policy.check_against(mdp)?;
    if n_episodes == 0 {
        return Err(Error::Invalid("need at least one episode".into()));
    }
    if start_state >= mdp.n_states {
        return Err(Error::Invalid(format!("start state {start_state} out of range")));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_episodes {
        let mut s = start_state;
        let mut g = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            if mdp.terminal[s] {
                break;
            }
            let a = policy.sample(s, rng);
            g += disc * mdp.r[s][a];
            disc *= mdp.gamma;
            s = mdp.sample_next(s, a, rng);
        }
        sum += g;
        sum_sq += g * g;
    }
    let n = n_episodes as f64;
    let mean = sum / n;
    let var = if n_episodes > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(McEstimate { mean_return: mean, std_error: (var / n).sqrt() })
}

/// Hand-built sample sets realizing each alignment case. All use `gamma = 0.5`
/// and values exactly representable in binary so the identities are exact.
pub fn make_alignment_fixture(case: AlignmentCase) -> Vec<TdSample> {
    let g = 0.5;
    let offsets = [0.0, 1.0, -2.0, 3.5];
    offsets
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let flip = if i % 2 == 0 { 1.0 } else { -1.0 };
            match case {
                // V target = c + 1, v_s = c, q = c + 0.5 in between; Q target = c - 0.5 so V sits between.
                AlignmentCase::A => TdSample {
                    r: 1.0 + c - g * c,
                    v_s: c,
                    v_next: c,
                    q: c + 0.5,
                    q_next: Some((c - 0.5 - (1.0 + c - g * c)) / g),
                    gamma: g,
                    done: false,
                },
                // V target = v_s = c + 1, q = c + 1 -/+ 0.5 off to one side: zero value TD error.
                // Q target = q, so V is not between them either.
                AlignmentCase::B => {
                    let v = c + 1.0;
                    let q = v - 0.5 * flip;
                    TdSample { r: 0.5, v_s: v, v_next: (v - 0.5) / g, q, q_next: Some((q - 0.5) / g), gamma: g, done: false }
                }
                // Q target = c + 1, q = c, v_s = c + 0.5 between; V target = c + 1 so Q lies outside.
                AlignmentCase::C => TdSample {
                    r: 0.5,
                    v_s: c + 0.5,
                    v_next: (c + 0.5) / g,
                    q: c,
                    q_next: Some((c + 0.5) / g),
                    gamma: g,
                    done: false,
                },
                // Q target = q (zero Q TD error) with q = v_s -/+ 0.5; V target on the far side of q.
                AlignmentCase::D => {
                    let v = c + 1.0;
                    let q = v - 0.5 * flip;
                    let v_target = v - 1.0 * flip;
                    TdSample { r: 0.5, v_s: v, v_next: (v_target - 0.5) / g, q, q_next: Some((q - 0.5) / g), gamma: g, done: false }
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng as ChaCha;
    use crate::tdcore::{action_td_loss, classify_alignment, qtd_loss, residuals, state_td_loss, vtd_loss};
    use rand::SeedableRng;

    fn single_loop(gamma: f64) -> TabularMdp {
        TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], vec![false], gamma).unwrap()
    }

    fn chain3() -> TabularMdp {
        // s0 -> s1 -> s2 (terminal), one action
        TabularMdp::new(
            vec![vec![vec![0.0, 1.0, 0.0]], vec![vec![0.0, 0.0, 1.0]], vec![vec![0.0, 0.0, 1.0]]],
            vec![vec![1.0], vec![-0.2], vec![0.0]],
            vec![false, false, true],
            0.9,
        )
        .unwrap()
    }

    fn two_state() -> TabularMdp {
        TabularMdp::new(
            vec![
                vec![vec![0.7, 0.3], vec![0.2, 0.8]],
                vec![vec![0.5, 0.5], vec![0.9, 0.1]],
            ],
            vec![vec![1.0, -0.5], vec![0.25, 2.0]],
            vec![false, false],
            0.8,
        )
        .unwrap()
    }

    #[test]
    fn geometric_series() {
        let mdp = single_loop(0.9);
        let v = policy_evaluation(&mdp, &StochasticPolicy::uniform(1, 1), DEFAULT_TOL).unwrap();
        assert!((v.v_star[0] - 10.0).abs() < 1e-8);
    }

    #[test]
    fn gamma_zero_is_expected_reward() {
        let mdp = two_state().with_gamma(0.0).unwrap();
        let pi = StochasticPolicy::new(vec![vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap();
        let v = policy_evaluation(&mdp, &pi, DEFAULT_TOL).unwrap();
        assert!((v.v_star[0] - (0.25 * 1.0 + 0.75 * -0.5)).abs() < 1e-12);
        assert!((v.v_star[1] - (0.6 * 0.25 + 0.4 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn chain_back_substitution() {
        let v = policy_evaluation(&chain3(), &StochasticPolicy::uniform(3, 1), DEFAULT_TOL).unwrap();
        assert!((v.v_star[0] - 0.82).abs() < 1e-12);
        assert!((v.v_star[1] + 0.2).abs() < 1e-12);
        assert_eq!(v.v_star[2], 0.0);
    }

    #[test]
    fn consistency_relations_and_contraction() {
        let mut r = ChaCha::seed_from_u64(1);
        for _ in 0..10 {
            let mdp = TabularMdp::random(6, 3, 0.9, &mut r).unwrap();
            let pi = StochasticPolicy::uniform(6, 3).with_exploration(0.3).unwrap();
            let o = policy_evaluation(&mdp, &pi, DEFAULT_TOL).unwrap();
            for s in 0..6 {
                let v: f64 = (0..3).map(|a| pi.prob(s, a) * o.q_star[s][a]).sum();
                assert!((v - o.v_star[s]).abs() < 1e-9);
                for a in 0..3 {
                    let q = mdp.reward(s, a)
                        + 0.9 * mdp.transition(s, a).iter().zip(&o.v_star).map(|(p, v)| p * v).sum::<f64>();
                    assert!((q - o.q_star[s][a]).abs() < 1e-9);
                }
            }
            assert!(o.residual_history.windows(2).skip(1).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn gamma_one_needs_absorption() {
        let mdp = single_loop(1.0);
        assert!(policy_evaluation(&mdp, &StochasticPolicy::uniform(1, 1), DEFAULT_TOL).is_err());
        let chain = chain3().with_gamma(1.0).unwrap();
        let v = policy_evaluation(&chain, &StochasticPolicy::uniform(3, 1), DEFAULT_TOL).unwrap();
        assert!((v.v_star[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn invalid_mdps_rejected() {
        assert!(TabularMdp::new(vec![vec![vec![0.5]]], vec![vec![0.0]], vec![false], 0.9).is_err());
        assert!(TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], vec![true], 0.9).is_err());
        assert!(StochasticPolicy::new(vec![vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn mc_deterministic_matches_exactly() {
        let mut r = ChaCha::seed_from_u64(0);
        let est = mc_return(&chain3(), &StochasticPolicy::uniform(3, 1), 0, 3, 50, &mut r).unwrap();
        assert!((est.mean_return - 0.82).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
        let loop_est = mc_return(&single_loop(0.9), &StochasticPolicy::uniform(1, 1), 0, 1, 200, &mut r).unwrap();
        assert!((loop_est.mean_return - 10.0).abs() < 1e-8);
    }

    #[test]
    fn mc_stochastic_within_four_standard_errors() {
        let mdp = two_state();
        let pi = StochasticPolicy::new(vec![vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        let o = policy_evaluation(&mdp, &pi, DEFAULT_TOL).unwrap();
        let mut r = ChaCha::seed_from_u64(17);
        // horizon 150: truncation 0.8^150 is ~3e-15
        let est = mc_return(&mdp, &pi, 0, 100_000, 150, &mut r).unwrap();
        assert!((est.mean_return - o.v_star[0]).abs() < 4.0 * est.std_error, "{est:?} vs {}", o.v_star[0]);
    }

    #[test]
    fn mc_error_shrinks_like_root_n() {
        let mdp = two_state();
        let pi = StochasticPolicy::uniform(2, 2);
        let mut r = ChaCha::seed_from_u64(3);
        let small = mc_return(&mdp, &pi, 1, 2_000, 150, &mut r).unwrap();
        let large = mc_return(&mdp, &pi, 1, 32_000, 150, &mut r).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn text_round_trip() {
        let mdp = TabularMdp::random(4, 2, 0.9, &mut ChaCha::seed_from_u64(8)).unwrap();
        assert_eq!(TabularMdp::from_text(&mdp.to_text()).unwrap(), mdp);
        let with_comments = format!("# fixture\n\n{}", chain3().to_text().replace("P\n", "P # transitions\n"));
        assert_eq!(TabularMdp::from_text(&with_comments).unwrap(), chain3());
        assert!(TabularMdp::from_text("tabular-mdp v2\n").is_err());
    }

    #[test]
    fn fixtures_realize_their_cases() {
        for case in [AlignmentCase::A, AlignmentCase::B, AlignmentCase::C, AlignmentCase::D] {
            for s in make_alignment_fixture(case) {
                assert_eq!(classify_alignment(&s).unwrap(), case, "{s:?}");
            }
        }
    }

    #[test]
    fn case_b_fixture_hides_both_errors() {
        let fx = make_alignment_fixture(AlignmentCase::B);
        let n = fx.len() as f64;
        let vtd: f64 = fx.iter().map(|s| vtd_loss(s).unwrap().loss).sum::<f64>() / n;
        let st: f64 = fx.iter().map(|s| state_td_loss(s).unwrap().loss).sum::<f64>() / n;
        let at: f64 = fx.iter().map(|s| action_td_loss(s).unwrap().loss).sum::<f64>() / n;
        assert!(vtd < 1e-12 && st > 0.1 && at > 0.1);
        let first = residuals(&fx[1]).unwrap();
        assert_eq!((first.delta_u, first.delta_pi), (-0.5, 0.5));
        let zero = residuals(&fx[0]).unwrap();
        assert_eq!((zero.delta_u, zero.delta_pi), (0.5, -0.5));
    }

    #[test]
    fn case_d_fixture_hides_policy_error() {
        for s in make_alignment_fixture(AlignmentCase::D) {
            assert_eq!(qtd_loss(&s).unwrap().loss, 0.0);
            assert!(residuals(&s).unwrap().delta_pi.abs() > 0.1);
        }
    }
}
