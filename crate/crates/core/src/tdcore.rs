//! TD objectives and the residual decomposition.
//!
//! Every loss is a weighted square of a signed residual. [`InputGrads`]
//! carries the partial derivative of the loss with respect to each value
//! estimate that feeds it; inputs behind a stop-gradient get exactly `0.0`.
//!
//! | loss               | residual                       | receives gradient  |
//! |--------------------|--------------------------------|--------------------|
//! | value TD           | `r + g V(s') - V(s)`           | `V(s)`, `V(s')`    |
//! | Q TD               | `r + g Q(s',a') - Q(s,a)`      | `Q(s,a)`, `Q(s',a')` |
//! | action TD          | `r + g V(s') - Q(s,a)`         | `Q(s,a)` only      |
//! | state TD           | `V(s) - Q(s,a)`                | `V(s)` only        |
//! | β state TD         | `V(s) - Q(s,a)`, weight β      | `V(s)` only        |
//!
//! Bootstrapped terms are multiplied by `1 - done`.

use crate::error::{ensure_finite, Error, Result};

/// Default clip range for the importance weight.
pub const DEFAULT_BETA_CLIP: (f64, f64) = (0.1, 10.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdSample {
    pub r: f64,
    pub v_s: f64,
    pub v_next: f64,
    pub q: f64,
    pub q_next: Option<f64>,
    pub gamma: f64,
    pub done: bool,
}

impl TdSample {
    pub fn new(r: f64, v_s: f64, v_next: f64, q: f64, gamma: f64) -> Self {
        Self { r, v_s, v_next, q, q_next: None, gamma, done: false }
    }

    pub fn with_q_next(mut self, q_next: f64) -> Self {
        self.q_next = Some(q_next);
        self
    }

    pub fn terminal(mut self) -> Self {
        self.done = true;
        self
    }

    fn bootstrap(&self) -> f64 {
        if self.done {
            0.0
        } else {
            self.gamma
        }
    }

    /// `r + g (1 - done) V(s')`.
    pub fn v_target(&self) -> f64 {
        self.r + self.bootstrap() * self.v_next
    }

    /// `r + g (1 - done) Q(s',a')`, if `Q(s',a')` is known or irrelevant.
    pub fn q_target(&self) -> Option<f64> {
        match (self.q_next, self.done) {
            (_, true) => Some(self.r),
            (Some(qn), false) => Some(self.r + self.gamma * qn),
            (None, false) => None,
        }
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        ensure_finite(self.r, "reward")?;
        ensure_finite(self.v_s, "V(s)")?;
        ensure_finite(self.v_next, "V(s')")?;
        ensure_finite(self.q, "Q(s,a)")?;
        if let Some(qn) = self.q_next {
            ensure_finite(qn, "Q(s',a')")?;
        }
        Ok(())
    }
}

/// Partial derivatives of a loss with respect to its value inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InputGrads {
    pub v_s: f64,
    pub v_next: f64,
    pub q: f64,
    pub q_next: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub residual: f64,
    pub weight: f64,
    pub grads: InputGrads,
    pub advantage: Option<f64>,
    pub beta: Option<f64>,
}

impl LossReport {
    fn squared(residual: f64, weight: f64, grads: InputGrads) -> Self {
        Self { loss: weight * residual * residual, residual, weight, grads, advantage: None, beta: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionResiduals {
    /// User-side residual `r + g V(s') - Q(s,a)`.
    pub delta_u: f64,
    /// Policy-side residual `Q(s,a) - V(s)`.
    pub delta_pi: f64,
}

/// `(r + g V(s') - V(s))^2`, gradient to both value estimates.
pub fn vtd_loss(sample: &TdSample) -> Result<LossReport> {
    sample.check()?;
    let res = sample.v_target() - sample.v_s;
    let grads = InputGrads {
        v_s: -2.0 * res,
        v_next: 2.0 * res * sample.bootstrap(),
        ..InputGrads::default()
    };
    Ok(LossReport::squared(res, 1.0, grads))
}

/// `(r + g Q(s',a') - Q(s,a))^2`, gradient to both Q estimates.
pub fn qtd_loss(sample: &TdSample) -> Result<LossReport> {
    sample.check()?;
    let target = sample
        .q_target()
        .ok_or_else(|| Error::Invalid("Q TD needs Q(s',a') for a non-terminal sample".into()))?;
    let res = target - sample.q;
    let grads = InputGrads {
        q: -2.0 * res,
        q_next: 2.0 * res * sample.bootstrap(),
        ..InputGrads::default()
    };
    Ok(LossReport::squared(res, 1.0, grads))
}

/// `(r + g V(s') - Q(s,a))^2` with `V(s')` held fixed.
pub fn action_td_loss(sample: &TdSample) -> Result<LossReport> {
    sample.check()?;
    let res = sample.v_target() - sample.q;
    let grads = InputGrads { q: -2.0 * res, ..InputGrads::default() };
    Ok(LossReport::squared(res, 1.0, grads))
}

/// `(V(s) - Q(s,a))^2` with `Q(s,a)` held fixed.
pub fn state_td_loss(sample: &TdSample) -> Result<LossReport> {
    beta_state_td_loss(sample, 1.0)
}

/// `β (V(s) - Q(s,a))^2` with `Q(s,a)` and β held fixed.
pub fn beta_state_td_loss(sample: &TdSample, beta: f64) -> Result<LossReport> {
    sample.check()?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Invalid(format!("beta must be positive and finite, got {beta}")));
    }
    let res = sample.v_s - sample.q;
    let grads = InputGrads { v_s: 2.0 * beta * res, ..InputGrads::default() };
    let mut rep = LossReport::squared(res, beta, grads);
    rep.beta = Some(beta);
    Ok(rep)
}

/// Importance weight `clamp(π/p, lo, hi)` from log-likelihoods.
pub fn beta_weight(log_pi: f64, log_p: f64, clip_lo: f64, clip_hi: f64) -> Result<f64> {
    ensure_finite(log_pi, "log π")?;
    ensure_finite(log_p, "log p")?;
    if !(clip_lo <= clip_hi) {
        return Err(Error::Invalid(format!("beta clip range ({clip_lo}, {clip_hi}) is empty")));
    }
    // exp may overflow to inf for huge gaps; clamp handles it.
    Ok((log_pi - log_p).exp().clamp(clip_lo, clip_hi))
}

/// One-step advantage `r + g V(s') - V(s)`, a constant for the policy loss.
pub fn advantage(sample: &TdSample) -> Result<f64> {
    sample.check()?;
    Ok(sample.v_target() - sample.v_s)
}

pub fn residuals(sample: &TdSample) -> Result<DecompositionResiduals> {
    sample.check()?;
    Ok(DecompositionResiduals { delta_u: sample.v_target() - sample.q, delta_pi: sample.q - sample.v_s })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub delta1: f64,
    pub delta2: f64,
    pub vtd_bound_ok: bool,
    pub violations: usize,
}

/// Checks every per-sample value TD loss `(Δu + Δπ)^2` against `(δ1 + δ2)^2`
/// with `δ1 = max |Δu|`, `δ2 = max |Δπ|`.
pub fn bound_check(samples: &[DecompositionResiduals]) -> Result<BoundCheck> {
    if samples.is_empty() {
        return Err(Error::Invalid("bound check needs at least one sample".into()));
    }
    let delta1 = samples.iter().map(|s| s.delta_u.abs()).fold(0.0, f64::max);
    let delta2 = samples.iter().map(|s| s.delta_pi.abs()).fold(0.0, f64::max);
    let bound = (delta1 + delta2).powi(2);
    let violations = samples
        .iter()
        .filter(|s| (s.delta_u + s.delta_pi).powi(2) > bound)
        .count();
    Ok(BoundCheck { delta1, delta2, vtd_bound_ok: violations == 0, violations })
}

/// Geometric relation between consecutive V and Q estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignmentCase {
    /// Q lies between V(s) and the V target.
    A,
    /// V(s) and the V target lie on the same side of Q.
    B,
    /// V lies between Q(s,a) and the Q target.
    C,
    /// Q(s,a) and the Q target lie on the same side of V.
    D,
}

fn between(x: f64, a: f64, b: f64) -> bool {
    a.min(b) <= x && x <= a.max(b)
}

/// Labels a sample by the alignment of its V side (`{V(s), Q, r + g V(s')}`)
/// and Q side (`{Q, V(s), r + g Q(s',a')}`). Misalignment wins over
/// alignment, the V side wins over the Q side, ties count as aligned:
///
/// | V side     | Q side      | label |
/// |------------|-------------|-------|
/// | aligned    | aligned / — | a     |
/// | misaligned | aligned     | c     |
/// | aligned    | misaligned  | d     |
/// | misaligned | misaligned / — | b  |
pub fn classify_alignment(sample: &TdSample) -> Result<AlignmentCase> {
    sample.check()?;
    let v_aligned = between(sample.q, sample.v_s, sample.v_target());
    let q_aligned = sample
        .q_next
        .map(|_| between(sample.v_s, sample.q, sample.q_target().expect("q_next present")));
    Ok(match (v_aligned, q_aligned) {
        (true, None | Some(true)) => AlignmentCase::A,
        (false, Some(true)) => AlignmentCase::C,
        (true, Some(false)) => AlignmentCase::D,
        (false, None | Some(false)) => AlignmentCase::B,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn vtd_examples() {
        let zero = vtd_loss(&TdSample::new(0.0, 0.0, 0.0, 0.0, 0.9)).unwrap();
        assert_eq!(zero.loss, 0.0);
        let r = vtd_loss(&TdSample::new(1.0, 2.5, 2.0, 0.0, 0.9)).unwrap();
        assert!(close(r.residual, 0.3) && close(r.loss, 0.09));
        assert!(close(r.grads.v_s, -0.6) && close(r.grads.v_next, 0.54));
        let t = vtd_loss(&TdSample::new(1.0, 2.5, 99.0, 0.0, 0.9).terminal()).unwrap();
        assert!(close(t.residual, -1.5) && close(t.loss, 2.25));
        assert_eq!(t.grads.v_next, 0.0);
        assert!(vtd_loss(&TdSample::new(f64::NAN, 0.0, 0.0, 0.0, 0.9)).is_err());
        assert!(vtd_loss(&TdSample::new(0.0, 0.0, 0.0, 0.0, 1.5)).is_err());
    }

    #[test]
    fn qtd_examples() {
        let z = qtd_loss(&TdSample::new(0.0, 0.0, 0.0, 0.0, 0.9).with_q_next(0.0)).unwrap();
        assert_eq!(z.loss, 0.0);
        let r = qtd_loss(&TdSample::new(1.0, 0.0, 0.0, 2.0, 0.9).with_q_next(1.0)).unwrap();
        assert!(close(r.residual, -0.1) && close(r.loss, 0.01));
        let t = qtd_loss(&TdSample::new(-0.2, 0.0, 0.0, -0.2, 0.9).terminal()).unwrap();
        assert_eq!(t.loss, 0.0);
        assert!(qtd_loss(&TdSample::new(1.0, 0.0, 0.0, 2.0, 0.9)).is_err());
    }

    #[test]
    fn action_td_examples() {
        let r = action_td_loss(&TdSample::new(1.0, 0.0, 2.0, 2.8, 0.9)).unwrap();
        assert!(r.residual.abs() < 1e-12 && r.loss < 1e-24);
        let r = action_td_loss(&TdSample::new(-0.2, 0.0, 1.0, 0.0, 0.9)).unwrap();
        assert!(close(r.residual, 0.7) && close(r.loss, 0.49));
        assert!(close(r.grads.q, -1.4));
        assert_eq!(r.grads.v_next, 0.0);
        assert_eq!(r.grads.v_s, 0.0);
    }

    #[test]
    fn state_td_examples() {
        assert_eq!(state_td_loss(&TdSample::new(0.0, 0.7, 0.0, 0.7, 0.9)).unwrap().loss, 0.0);
        let r = state_td_loss(&TdSample::new(0.0, 1.0, 0.0, 0.4, 0.9)).unwrap();
        assert!(close(r.residual, 0.6) && close(r.loss, 0.36));
        assert!(close(r.grads.v_s, 1.2));
        assert_eq!(r.grads.q, 0.0);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_weight(-3.2, -3.2, 0.1, 10.0).unwrap(), 1.0);
        assert!(close(beta_weight(2f64.ln(), 0.0, 0.1, 10.0).unwrap(), 2.0));
        assert_eq!(beta_weight(10.0, 0.0, 0.1, 10.0).unwrap(), 10.0);
        assert_eq!(beta_weight(-800.0, 800.0, 0.1, 10.0).unwrap(), 0.1);
        assert_eq!(beta_weight(800.0, -800.0, 0.1, 10.0).unwrap(), 10.0);
        assert!(beta_weight(f64::NEG_INFINITY, 0.0, 0.1, 10.0).is_err());
        assert!(beta_weight(0.0, 0.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn beta_state_td_examples() {
        let s = TdSample::new(0.3, 1.3, 0.2, 0.1, 0.9);
        assert_eq!(beta_state_td_loss(&s, 1.0).unwrap().loss, state_td_loss(&s).unwrap().loss);
        let r = beta_state_td_loss(&TdSample::new(0.0, 1.0, 0.0, 0.0, 0.9), 2.0).unwrap();
        assert!(close(r.loss, 2.0) && close(r.grads.v_s, 4.0) && r.grads.q == 0.0);
        assert!(beta_state_td_loss(&s, 0.0).is_err());
        assert!(beta_state_td_loss(&s, -1.0).is_err());
    }

    #[test]
    fn beta_weighted_minimizer_three_actions() {
        // Closed-form weighted least squares: v* = Σ βq / Σ β. Check that the
        // gradient of Σ β (v - q)^2 built from beta_state_td_loss vanishes there.
        let qs = [0.4, -1.0, 2.5];
        let betas = [0.5, 2.0, 1.25];
        let v_star = qs.iter().zip(&betas).map(|(q, b)| q * b).sum::<f64>() / betas.iter().sum::<f64>();
        let grad: f64 = qs
            .iter()
            .zip(&betas)
            .map(|(&q, &b)| beta_state_td_loss(&TdSample::new(0.0, v_star, 0.0, q, 0.9), b).unwrap().grads.v_s)
            .sum();
        assert!(grad.abs() < 1e-12);
    }

    #[test]
    fn advantage_examples() {
        assert!(close(advantage(&TdSample::new(1.0, 2.5, 2.0, 0.0, 0.9)).unwrap(), 0.3));
        assert!(close(advantage(&TdSample::new(1.0, 2.8, 2.0, 0.0, 0.9)).unwrap(), 0.0));
        assert!(close(advantage(&TdSample::new(1.0, 2.5, 7.0, 0.0, 0.9).terminal()).unwrap(), -1.5));
    }

    #[test]
    fn residual_examples() {
        let d = residuals(&TdSample::new(1.0, 0.3, 2.0, 2.8, 0.9)).unwrap();
        assert!(d.delta_u.abs() < 1e-12);
        let d = residuals(&TdSample::new(1.0, 0.3, 2.0, 0.3, 0.9)).unwrap();
        assert_eq!(d.delta_pi, 0.0);
        let s = TdSample::new(1.0, 2.5, 2.0, 2.6, 0.9);
        let d = residuals(&s).unwrap();
        assert!(close(d.delta_u, 0.2) && close(d.delta_pi, 0.1));
        assert!(close(d.delta_u + d.delta_pi, vtd_loss(&s).unwrap().residual));
    }

    #[test]
    fn bound_examples() {
        let b = bound_check(&[DecompositionResiduals { delta_u: 0.1, delta_pi: 0.2 }]).unwrap();
        assert!(close(b.delta1, 0.1) && close(b.delta2, 0.2) && b.vtd_bound_ok);
        assert!(close((b.delta1 + b.delta2).powi(2), 0.09));
        let z = bound_check(&[DecompositionResiduals { delta_u: 0.0, delta_pi: 0.0 }; 3]).unwrap();
        assert_eq!((z.delta1, z.delta2, z.vtd_bound_ok), (0.0, 0.0, true));
        assert!(bound_check(&[]).is_err());
    }

    #[test]
    fn alignment_examples() {
        // V target = 1 via r = 1, v_next = 0
        let a = TdSample::new(1.0, 0.0, 0.0, 0.5, 0.9);
        assert_eq!(classify_alignment(&a).unwrap(), AlignmentCase::A);
        let b = TdSample::new(0.1, 0.0, 0.0, 0.5, 0.9);
        assert_eq!(classify_alignment(&b).unwrap(), AlignmentCase::B);
        // q = 0, v_s = 0.5, Q target = 1, V target = 1 (V side misaligned)
        let c = TdSample::new(1.0, 0.5, 0.0, 0.0, 0.9).with_q_next(0.0);
        assert_eq!(classify_alignment(&c).unwrap(), AlignmentCase::C);
        // V side aligned, Q target equal to Q on the far side from V
        let d = TdSample::new(0.0, 1.0, 0.0, 0.5, 0.9).with_q_next(0.5 / 0.9);
        assert_eq!(classify_alignment(&d).unwrap(), AlignmentCase::D);
        // boundary ties are aligned
        let tie = TdSample::new(0.0, 0.0, 0.0, 0.0, 0.9);
        assert_eq!(classify_alignment(&tie).unwrap(), AlignmentCase::A);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sample() -> impl Strategy<Value = TdSample> {
            (-2.0..2.0f64, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, 0.0..=1.0f64, any::<bool>())
                .prop_map(|(r, v_s, v_next, q, qn, gamma, done)| TdSample {
                    r,
                    v_s,
                    v_next,
                    q,
                    q_next: Some(qn),
                    gamma,
                    done,
                })
        }

        proptest! {
            #[test]
            fn decomposition_identity(s in sample()) {
                let d = residuals(&s).unwrap();
                let v = vtd_loss(&s).unwrap();
                prop_assert!((d.delta_u + d.delta_pi - v.residual).abs() < 1e-12);
            }

            #[test]
            fn stop_gradient_contracts(s in sample(), beta in 0.01..20.0f64) {
                let a = action_td_loss(&s).unwrap();
                prop_assert_eq!(a.grads.v_next, 0.0);
                prop_assert_eq!(a.grads.v_s, 0.0);
                let st = beta_state_td_loss(&s, beta).unwrap();
                prop_assert_eq!(st.grads.q, 0.0);
                prop_assert_eq!(st.grads.q_next, 0.0);
            }

            #[test]
            fn losses_nonnegative_and_zero_iff_residual_zero(s in sample(), beta in 0.01..20.0f64) {
                for rep in [
                    vtd_loss(&s).unwrap(),
                    qtd_loss(&s).unwrap(),
                    action_td_loss(&s).unwrap(),
                    state_td_loss(&s).unwrap(),
                    beta_state_td_loss(&s, beta).unwrap(),
                ] {
                    prop_assert!(rep.loss >= 0.0);
                    prop_assert_eq!(rep.loss == 0.0, rep.residual == 0.0);
                    prop_assert!((rep.loss - rep.weight * rep.residual * rep.residual).abs() < 1e-12);
                }
            }

            #[test]
            fn bound_never_violated(pairs in proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..200)) {
                let rs: Vec<_> = pairs.iter().map(|&(u, p)| DecompositionResiduals { delta_u: u, delta_pi: p }).collect();
                prop_assert!(bound_check(&rs).unwrap().vtd_bound_ok);
            }
        }
    }
}
