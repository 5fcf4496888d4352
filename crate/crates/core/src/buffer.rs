//! FIFO experience replay. Each transition keeps the behaviour policy's
//! log-likelihood of the emitted action; it is never recomputed.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;

use crate::agents::PolicyOutput;
use crate::env::Observation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: PolicyOutput,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub episode_id: u64,
    pub step_index: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
    reward_bounds: Option<(f64, f64)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)), inserted: 0, reward_bounds: None })
    }

    /// Rejects transitions whose reward lies outside `[lo, hi]`.
    pub fn with_reward_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.reward_bounds = Some((lo, hi));
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of transitions ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    fn validate(&self, t: &Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("transition reward"));
        }
        if let Some((lo, hi)) = self.reward_bounds {
            // small slack for accumulated float error in reward sums
            if t.reward < lo - 1e-9 || t.reward > hi + 1e-9 {
                return Err(Error::Invalid(format!("reward {} outside [{lo}, {hi}]", t.reward)));
            }
        }
        if !t.action.log_likelihood.is_finite() {
            return Err(Error::NonFinite("behaviour log-likelihood"));
        }
        if t.obs.to_vec().iter().chain(t.next_obs.to_vec().iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        self.validate(&t)?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
        Ok(())
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let n = self.items.len();
        Ok((0..batch_size).map(|_| &self.items[rng.random_range(0..n)]).collect())
    }

    /// One transition per row, oldest first.
    pub fn dump_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "episode", "step", "obs", "items", "hyper_action", "log_likelihood", "reward", "next_obs", "done",
        ])?;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        for t in &self.items {
            let items: Vec<String> = t.action.slate.items.iter().map(ToString::to_string).collect();
            out.write_record([
                t.episode_id.to_string(),
                t.step_index.to_string(),
                join(&t.obs.to_vec()),
                items.join(" "),
                t.action.hyper_action.as_deref().map(join).unwrap_or_default(),
                format!("{:?}", t.action.log_likelihood),
                format!("{:?}", t.reward),
                join(&t.next_obs.to_vec()),
                (t.done as u8).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SlateAction;
    use crate::rng::Rng as ChaCha;
    use rand::SeedableRng;

    fn tr(id: u64) -> Transition {
        let obs = Observation { features: vec![id as f64, 0.0], step_fraction: 0.0 };
        Transition {
            obs: obs.clone(),
            action: PolicyOutput {
                slate: SlateAction { items: vec![0] },
                hyper_action: None,
                log_likelihood: -1.0,
                deterministic: false,
            },
            reward: 1.0,
            next_obs: obs,
            done: false,
            episode_id: id,
            step_index: 0,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2).unwrap();
        for id in 0..3 {
            b.push(tr(id)).unwrap();
        }
        let ids: Vec<u64> = b.iter().map(|t| t.episode_id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn push_to_empty() {
        let mut b = ReplayBuffer::new(5).unwrap();
        b.push(tr(0)).unwrap();
        assert_eq!(b.len(), 1);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn size_saturates_at_capacity() {
        let mut b = ReplayBuffer::new(10_000).unwrap();
        for id in 0..100_000 {
            b.push(tr(id)).unwrap();
        }
        assert_eq!(b.len(), 10_000);
        assert_eq!(b.inserted(), 100_000);
        assert_eq!(b.get(0).unwrap().episode_id, 90_000);
    }

    #[test]
    fn invalid_transitions_rejected() {
        let mut b = ReplayBuffer::new(4).unwrap().with_reward_bounds(-1.2, 6.0);
        let mut t = tr(0);
        t.reward = 7.0;
        assert!(b.push(t).is_err());
        let mut t = tr(0);
        t.action.log_likelihood = f64::NAN;
        assert!(b.push(t).is_err());
        assert!(b.is_empty());
    }

    #[test]
    fn sampling() {
        let mut b = ReplayBuffer::new(10).unwrap();
        assert!(matches!(b.sample(3, &mut ChaCha::seed_from_u64(0)), Err(Error::EmptyBuffer)));
        b.push(tr(7)).unwrap();
        let s = b.sample(16, &mut ChaCha::seed_from_u64(0)).unwrap();
        assert!(s.iter().all(|t| t.episode_id == 7));
        for id in 0..9 {
            b.push(tr(id)).unwrap();
        }
        let a: Vec<u64> = b.sample(32, &mut ChaCha::seed_from_u64(5)).unwrap().iter().map(|t| t.episode_id).collect();
        let c: Vec<u64> = b.sample(32, &mut ChaCha::seed_from_u64(5)).unwrap().iter().map(|t| t.episode_id).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for id in 0..100 {
            b.push(tr(id)).unwrap();
        }
        let mut counts = vec![0usize; 100];
        for t in b.sample(100_000, &mut ChaCha::seed_from_u64(99)).unwrap() {
            counts[t.episode_id as usize] += 1;
        }
        let sd = (100_000.0f64 * 0.01 * 0.99).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 1000.0).abs() <= 4.0 * sd));
    }

    #[test]
    fn csv_dump() {
        let mut b = ReplayBuffer::new(3).unwrap();
        b.push(tr(1)).unwrap();
        let mut out = Vec::new();
        b.dump_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("1,0,1.0 0.0 0.0,0,,-1.0,1.0,"));
    }
}
