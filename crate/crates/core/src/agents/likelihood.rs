//! Action likelihoods: Plackett–Luce slates, ε-greedy mixtures and Gaussian
//! hyper-actions.

use std::f64::consts::PI;

use rand::Rng;

fn log_sum_exp<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-probability of drawing `slate` (in order, without replacement) under
/// the sequential Plackett–Luce model with the given logits.
pub fn plackett_luce_log_prob(logits: &[f64], slate: &[usize]) -> f64 {
    let mut remaining = vec![true; logits.len()];
    let mut lp = 0.0;
    for &a in slate {
        let lse = log_sum_exp(logits.iter().zip(&remaining).filter(|(_, &r)| r).map(|(l, _)| l));
        lp += logits[a] - lse;
        remaining[a] = false;
    }
    lp
}

/// Gradient of [`plackett_luce_log_prob`] with respect to the logits.
pub fn plackett_luce_grad(logits: &[f64], slate: &[usize]) -> Vec<f64> {
    let mut remaining = vec![true; logits.len()];
    let mut g = vec![0.0; logits.len()];
    for &a in slate {
        let lse = log_sum_exp(logits.iter().zip(&remaining).filter(|(_, &r)| r).map(|(l, _)| l));
        for j in 0..logits.len() {
            if remaining[j] {
                g[j] -= (logits[j] - lse).exp();
            }
        }
        g[a] += 1.0;
        remaining[a] = false;
    }
    g
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gumbel-top-k: an exact Plackett–Luce sample.
pub fn gumbel_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let perturbed: Vec<f64> = logits
        .iter()
        .map(|&l| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            l - (-u.ln()).ln()
        })
        .collect();
    top_k(&perturbed, k)
}

/// `ln(N! / (N-K)!)`, the log count of ordered slates.
pub fn log_ordered_slates(n_items: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n_items - i) as f64).ln()).sum()
}

/// Log-likelihood of an ordered slate under "uniform with probability ε,
/// otherwise the greedy slate".
pub fn epsilon_greedy_log_prob(epsilon: f64, n_items: usize, slate: &[usize], greedy: &[usize]) -> f64 {
    let uniform = epsilon * (-log_ordered_slates(n_items, slate.len())).exp();
    let greedy_mass = if slate == greedy { 1.0 - epsilon } else { 0.0 };
    (uniform + greedy_mass).ln()
}

/// Isotropic Gaussian log-density `log N(x; mean, sigma^2 I)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng as ChaCha;
    use rand::SeedableRng;

    #[test]
    fn pl_sums_to_one_over_ordered_slates() {
        let logits = [0.3, -1.2, 2.0, 0.0, 0.7];
        let mut total = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    total += plackett_luce_log_prob(&logits, &[a, b]).exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pl_single_slot_is_softmax() {
        let logits = [1.0, 2.0, 3.0];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        assert!((plackett_luce_log_prob(&logits, &[2]) - (3.0f64.exp() / z).ln()).abs() < 1e-12);
    }

    #[test]
    fn pl_grad_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.0, 0.7, -0.4];
        let slate = [2, 0, 5];
        let g = plackett_luce_grad(&logits, &slate);
        for j in 0..logits.len() {
            let mut up = logits.clone();
            up[j] += 1e-6;
            let mut dn = logits.clone();
            dn[j] -= 1e-6;
            let num = (plackett_luce_log_prob(&up, &slate) - plackett_luce_log_prob(&dn, &slate)) / 2e-6;
            assert!((num - g[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn gumbel_top_one_frequencies_follow_softmax() {
        let logits = [0.0, 1.0, -0.5];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let mut r = ChaCha::seed_from_u64(0);
        let n = 40_000;
        let mut c = [0usize; 3];
        for _ in 0..n {
            c[gumbel_top_k(&logits, 1, &mut r)[0]] += 1;
        }
        for i in 0..3 {
            let p = logits[i].exp() / z;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c[i] as f64 - n as f64 * p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k(&[1.0, 0.0, -1.0], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.5, 0.5, 0.9, 0.5], 3), vec![2, 0, 1]);
    }

    #[test]
    fn epsilon_greedy_mass() {
        // N = 4, K = 1: greedy item gets (1 - ε) + ε/4
        let lp = epsilon_greedy_log_prob(0.2, 4, &[1], &[1]);
        assert!((lp.exp() - 0.85).abs() < 1e-12);
        let lp = epsilon_greedy_log_prob(0.2, 4, &[0], &[1]);
        assert!((lp.exp() - 0.05).abs() < 1e-12);
        assert!((log_ordered_slates(5, 2) - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_density_closed_form() {
        let lp = gaussian_log_density(&[0.0], &[0.0], 1.0);
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        let lp = gaussian_log_density(&[1.0, 1.0], &[0.0, 0.0], 0.5);
        assert!((lp - (-(2.0 * PI * 0.25).ln() - 4.0)).abs() < 1e-12);
    }
}
