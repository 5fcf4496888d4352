//! Small feed-forward approximators with analytic reverse-mode gradients.
//!
//! Every V, Q, actor and policy network in the crate is an [`MlpParams`].
//! Weights are stored row-major (`out x in`) per layer, all arithmetic is
//! `f64` so central finite differences stay clean.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation applied after every hidden layer. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Gradient with the exact shape of an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Result of a backward pass: parameter gradients plus the gradient with
/// respect to the network input.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: GradBuffer,
    pub input_grad: Vec<f64>,
}

/// Post-activation values of every layer, `outputs[0]` being the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("cache always holds the input")
    }
}

impl MlpParams {
    /// Zero-initialized network. `activations` must have one entry per hidden layer.
    pub fn zeros(layer_sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape("need at least an input and an output size".into()));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Shape("layer sizes must be positive".into()));
        }
        if activations.len() != layer_sizes.len() - 2 {
            return Err(Error::Shape(format!(
                "{} hidden layers but {} activations",
                layer_sizes.len() - 2,
                activations.len()
            )));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activations: activations.to_vec(),
            weights,
            biases,
        })
    }

    /// Uniform Glorot initialization, biases zero.
    pub fn init<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, activations)?;
        for (l, w) in p.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.iter_mut() {
                *x = rng.random_range(-limit..=limit);
            }
        }
        Ok(p)
    }

    /// Builds a network from explicit per-layer weights (`out x in`, row-major) and biases.
    pub fn from_parts(
        layer_sizes: &[usize],
        activations: &[Activation],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, activations)?;
        if weights.len() != p.weights.len() || biases.len() != p.biases.len() {
            return Err(Error::Shape("layer count does not match layer_sizes".into()));
        }
        for l in 0..p.weights.len() {
            if weights[l].len() != p.weights[l].len() || biases[l].len() != p.biases[l].len() {
                return Err(Error::Shape(format!("layer {l} has the wrong number of values")));
            }
        }
        if weights.iter().chain(biases.iter()).flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        p.weights = weights;
        p.biases = biases;
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).flatten().all(|x| x.is_finite())
    }

    fn activation_of(&self, layer: usize) -> Activation {
        self.activations.get(layer).copied().unwrap_or(Activation::Identity)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut outputs = Vec::with_capacity(self.layer_sizes.len());
        outputs.push(input.to_vec());
        for l in 0..self.weights.len() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let act = self.activation_of(l);
            let x = &outputs[l];
            let w = &self.weights[l];
            let mut y = self.biases[l].clone();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                *yo = act.apply(*yo);
            }
            debug_assert_eq!(y.len(), n_out);
            outputs.push(y);
        }
        Ok(ForwardCache { outputs })
    }

    /// Accumulates `scale * d(output . upstream)/d(params)` into `acc` and
    /// returns `scale * d(output . upstream)/d(input)`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        scale: f64,
        acc: &mut GradBuffer,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has length {}, network output is {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if cache.outputs.len() != self.layer_sizes.len()
            || cache.outputs[0].len() != self.input_dim()
        {
            return Err(Error::Shape("forward cache does not belong to this network".into()));
        }
        let mut delta: Vec<f64> = upstream.iter().map(|g| g * scale).collect();
        for l in (0..self.weights.len()).rev() {
            let n_in = self.layer_sizes[l];
            let act = self.activation_of(l);
            let y = &cache.outputs[l + 1];
            for (d, &yo) in delta.iter_mut().zip(y) {
                *d *= act.derivative_from_output(yo);
            }
            let x = &cache.outputs[l];
            let w = &self.weights[l];
            let gw = &mut acc.weights[l];
            let gb = &mut acc.biases[l];
            let mut next = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = o * n_in;
                for i in 0..n_in {
                    gw[row + i] += d * x[i];
                    next[i] += d * w[row + i];
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

/// Evaluates the network.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    Ok(params.forward_cached(input)?.outputs.pop().unwrap())
}

/// Exact gradients of `output . upstream` with respect to parameters and input.
pub fn mlp_backward(params: &MlpParams, input: &[f64], upstream: &[f64]) -> Result<Backward> {
    let cache = params.forward_cached(input)?;
    let mut grads = GradBuffer::zeros_like(params);
    let input_grad = params.backward_into(&cache, upstream, 1.0, &mut grads)?;
    Ok(Backward { grads, input_grad })
}

impl GradBuffer {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.biases.iter()).flatten()
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).flatten()
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|x| *x *= s);
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, s: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("gradient buffers differ in shape".into()));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &GradBuffer) -> bool {
        self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.len() == b.len())
            && self.biases.iter().zip(&other.biases).all(|(a, b)| a.len() == b.len())
    }

    fn matches(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.weights.len()
            && self.weights.iter().zip(&params.weights).all(|(a, b)| a.len() == b.len())
            && self.biases.iter().zip(&params.biases).all(|(a, b)| a.len() == b.len())
    }

    /// Flat view in declaration order (layer weights, then layer biases).
    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }
}

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares analytic and central-difference gradients of `loss(net(input))`.
///
/// `loss` returns the scalar loss and its gradient with respect to the network
/// output. The result is the maximum over parameters of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(params: &MlpParams, input: &[f64], loss: F) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_with(params, |p| {
        let cache = p.forward_cached(input)?;
        let (l, upstream) = loss(cache.output());
        let mut g = GradBuffer::zeros_like(p);
        p.backward_into(&cache, &upstream, 1.0, &mut g)?;
        Ok((l, g))
    })
}

/// General form of [`grad_check`]: `objective` maps parameters to a loss and
/// its analytic parameter gradient, so compositions of several networks can
/// be checked one network at a time.
pub fn grad_check_with<F>(params: &MlpParams, objective: F) -> Result<f64>
where
    F: Fn(&MlpParams) -> Result<(f64, GradBuffer)>,
{
    let (l0, analytic) = objective(params)?;
    if !l0.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let analytic = analytic.flat();
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *probe.slot_mut(k);
        *probe.slot_mut(k) = orig + FD_STEP;
        let (lp, _) = objective(&probe)?;
        *probe.slot_mut(k) = orig - FD_STEP;
        let (lm, _) = objective(&probe)?;
        *probe.slot_mut(k) = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

impl MlpParams {
    /// Parameter `k` in flat declaration order (all weights, then all biases).
    fn slot_mut(&mut self, mut k: usize) -> &mut f64 {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            if k < v.len() {
                return &mut v[k];
            }
            k -= v.len();
        }
        panic!("parameter index out of range")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimRule {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimState {
    pub rule: OptimRule,
    pub learning_rate: f64,
    pub step: u64,
    first: Option<GradBuffer>,
    second: Option<GradBuffer>,
}

impl OptimState {
    pub fn new(rule: OptimRule, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {learning_rate}")));
        }
        Ok(Self { rule, learning_rate, step: 0, first: None, second: None })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimRule::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimRule::Adam, learning_rate)
    }
}

/// Applies one optimizer step in place. Non-finite gradients leave the
/// parameters and the optimizer state untouched and return an error.
pub fn optim_step(params: &mut MlpParams, grads: &GradBuffer, state: &mut OptimState) -> Result<()> {
    if !grads.matches(params) {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let lr = state.learning_rate;
    match state.rule {
        OptimRule::Sgd => {
            for (p, g) in params
                .weights
                .iter_mut()
                .chain(params.biases.iter_mut())
                .flatten()
                .zip(grads.values())
            {
                *p -= lr * g;
            }
        }
        OptimRule::Adam => {
            let m = state.first.get_or_insert_with(|| GradBuffer::zeros_like(params));
            let v = state.second.get_or_insert_with(|| GradBuffer::zeros_like(params));
            let t = (state.step + 1) as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, g), mi), vi) in params
                .weights
                .iter_mut()
                .chain(params.biases.iter_mut())
                .flatten()
                .zip(grads.values())
                .zip(m.values_mut())
                .zip(v.values_mut())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    state.step += 1;
    Ok(())
}

/// Polyak averaging `target <- (1 - tau) target + tau source`.
pub fn soft_update(target: &mut MlpParams, source: &MlpParams, tau: f64) {
    for (t, s) in target
        .weights
        .iter_mut()
        .chain(target.biases.iter_mut())
        .flatten()
        .zip(source.weights.iter().chain(source.biases.iter()).flatten())
    {
        *t += tau * (s - *t);
    }
}

const CHECKPOINT_MAGIC: &str = "tdlab-mlp v1";

impl MlpParams {
    /// Textual checkpoint: a versioned header with layer sizes and hidden
    /// activations, then one line per weight matrix / bias vector in
    /// declaration order, values row-major and printed round-trip exact.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        let sizes: Vec<String> = self.layer_sizes.iter().map(ToString::to_string).collect();
        writeln!(s, "layers {}", sizes.join(" ")).unwrap();
        let acts: Vec<&str> = self.activations.iter().map(|a| a.name()).collect();
        writeln!(s, "activations {}", acts.join(" ")).unwrap();
        for l in 0..self.weights.len() {
            let w: Vec<String> = self.weights[l].iter().map(|x| format!("{x:?}")).collect();
            writeln!(s, "w{l} {}", w.join(" ")).unwrap();
            let b: Vec<String> = self.biases[l].iter().map(|x| format!("{x:?}")).collect();
            writeln!(s, "b{l} {}", b.join(" ")).unwrap();
        }
        s
    }

    /// Parses a checkpoint produced by [`MlpParams::to_checkpoint`]. Reads
    /// lines from the iterator until the network is complete.
    pub fn from_checkpoint_lines<'a, I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = &'a str>,
    {
        let mut next = || -> Result<&'a str> {
            lines
                .by_ref()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .ok_or_else(|| Error::Parse("truncated network checkpoint".into()))
        };
        let magic = next()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!("bad checkpoint header `{magic}`")));
        }
        let sizes = tagged(next()?, "layers")?
            .iter()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let acts = tagged(next()?, "activations")?
            .iter()
            .map(|t| t.parse::<Activation>())
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len().saturating_sub(1) {
            weights.push(parse_floats(&tagged(next()?, &format!("w{l}"))?)?);
            biases.push(parse_floats(&tagged(next()?, &format!("b{l}"))?)?);
        }
        Self::from_parts(&sizes, &acts, weights, biases)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        Self::from_checkpoint_lines(&mut text.lines())
    }
}

fn tagged<'a>(line: &'a str, tag: &str) -> Result<Vec<&'a str>> {
    let mut it = line.split_whitespace();
    match it.next() {
        Some(t) if t == tag => Ok(it.collect()),
        _ => Err(Error::Parse(format!("expected `{tag}` line, found `{line}`"))),
    }
}

fn parse_floats(tokens: &[&str]) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("`{t}`: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut p = MlpParams::zeros(&[3, 2], &[]).unwrap();
        p.biases_mut()[0] = vec![0.25, -1.5];
        assert_eq!(mlp_forward(&p, &[9.0, -3.0, 1.0]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let p = MlpParams::from_parts(
            &[3, 3],
            &[],
            vec![vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0; 3]],
        )
        .unwrap();
        let x = [0.3, -2.0, 7.5];
        assert_eq!(mlp_forward(&p, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_hand_unrolled() {
        let p = MlpParams::init(&[2, 4, 1], &[Activation::Tanh], &mut rng(11)).unwrap();
        let x = [0.5, -0.5];
        let w0 = &p.weights()[0];
        let b0 = &p.biases()[0];
        let w1 = &p.weights()[1];
        let b1 = &p.biases()[1];
        let h0 = (w0[0] * x[0] + w0[1] * x[1] + b0[0]).tanh();
        let h1 = (w0[2] * x[0] + w0[3] * x[1] + b0[1]).tanh();
        let h2 = (w0[4] * x[0] + w0[5] * x[1] + b0[2]).tanh();
        let h3 = (w0[6] * x[0] + w0[7] * x[1] + b0[3]).tanh();
        let y = w1[0] * h0 + w1[1] * h1 + w1[2] * h2 + w1[3] * h3 + b1[0];
        let out = mlp_forward(&p, &x).unwrap();
        assert!((out[0] - y).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = MlpParams::zeros(&[2, 1], &[]).unwrap();
        assert!(matches!(mlp_forward(&p, &[1.0]), Err(Error::Shape(_))));
        assert!(MlpParams::zeros(&[2, 3, 1], &[]).is_err());
        assert!(MlpParams::zeros(&[2], &[]).is_err());
    }

    #[test]
    fn linear_backward() {
        let p = MlpParams::from_parts(&[1, 1], &[], vec![vec![0.7]], vec![vec![0.1]]).unwrap();
        let b = mlp_backward(&p, &[2.0], &[1.0]).unwrap();
        assert_eq!(b.grads.weights[0], vec![2.0]);
        assert_eq!(b.grads.biases[0], vec![1.0]);
        assert_eq!(b.input_grad, vec![0.7]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = MlpParams::init(&[3, 5, 2], &[Activation::Tanh], &mut rng(2)).unwrap();
        let b = mlp_backward(&p, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(b.grads.is_zero());
        assert!(b.input_grad.iter().all(|&g| g == 0.0));
        assert!(mlp_backward(&p, &[0.1, 0.2, 0.3], &[1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = MlpParams::init(&[3, 5, 1], &[Activation::Tanh], &mut rng(5)).unwrap();
        let x = [0.4, -0.9, 0.2];
        let b = mlp_backward(&p, &x, &[1.0]).unwrap();
        // Independent oracle: perturb each parameter directly.
        let mut probe = p.clone();
        let mut worst = 0.0_f64;
        for l in 0..2 {
            for j in 0..p.weights()[l].len() {
                let orig = probe.weights()[l][j];
                probe.weights_mut()[l][j] = orig + 1e-5;
                let up = mlp_forward(&probe, &x).unwrap()[0];
                probe.weights_mut()[l][j] = orig - 1e-5;
                let dn = mlp_forward(&probe, &x).unwrap()[0];
                probe.weights_mut()[l][j] = orig;
                let num = (up - dn) / 2e-5;
                let a = b.grads.weights[l][j];
                worst = worst.max((a - num).abs() / (a.abs() + num.abs()).max(1e-8));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
        // Input gradient too.
        for i in 0..3 {
            let mut xp = x;
            xp[i] += 1e-5;
            let mut xm = x;
            xm[i] -= 1e-5;
            let num = (mlp_forward(&p, &xp).unwrap()[0] - mlp_forward(&p, &xm).unwrap()[0]) / 2e-5;
            assert!((num - b.input_grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn grad_check_quadratic_on_linear() {
        let p = MlpParams::init(&[4, 2], &[], &mut rng(3)).unwrap();
        let err = grad_check(&p, &[0.1, 0.5, -0.3, 2.0], |y| {
            (y.iter().map(|v| v * v).sum(), y.iter().map(|v| 2.0 * v).collect())
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_constant_loss_is_zero() {
        let p = MlpParams::init(&[2, 3, 1], &[Activation::Tanh], &mut rng(4)).unwrap();
        let err = grad_check(&p, &[0.3, 0.1], |_| (4.2, vec![0.0])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_tanh_squared_error() {
        let p = MlpParams::init(&[3, 8, 8, 1], &[Activation::Tanh, Activation::Tanh], &mut rng(8))
            .unwrap();
        let err = grad_check(&p, &[0.2, -0.7, 1.1], |y| {
            let r = y[0] - 0.75;
            (r * r, vec![2.0 * r])
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_rejects_nonfinite_loss() {
        let p = MlpParams::zeros(&[1, 1], &[]).unwrap();
        assert!(grad_check(&p, &[1.0], |_| (f64::NAN, vec![0.0])).is_err());
    }

    #[test]
    fn sgd_step() {
        let mut p = MlpParams::from_parts(&[1, 1], &[], vec![vec![1.0]], vec![vec![0.0]]).unwrap();
        let mut g = GradBuffer::zeros_like(&p);
        g.weights[0][0] = 0.5;
        let mut st = OptimState::sgd(0.1).unwrap();
        optim_step(&mut p, &g, &mut st).unwrap();
        assert!((p.weights()[0][0] - 0.95).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = MlpParams::from_parts(&[1, 1], &[], vec![vec![1.0]], vec![vec![0.0]]).unwrap();
        let mut g = GradBuffer::zeros_like(&p);
        g.weights[0][0] = 1.0;
        let mut st = OptimState::adam(0.001).unwrap();
        optim_step(&mut p, &g, &mut st).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p.weights()[0][0] - expected).abs() < 1e-15);
        // zero-gradient bias is untouched
        assert_eq!(p.biases()[0][0], 0.0);
    }

    #[test]
    fn nonfinite_gradient_is_rejected() {
        let mut p = MlpParams::zeros(&[1, 1], &[]).unwrap();
        let before = p.clone();
        let mut g = GradBuffer::zeros_like(&p);
        g.biases[0][0] = f64::INFINITY;
        let mut st = OptimState::adam(0.01).unwrap();
        assert!(optim_step(&mut p, &g, &mut st).is_err());
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
        assert!(OptimState::sgd(-1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = MlpParams::init(&[3, 4, 2], &[Activation::Relu], &mut rng(9)).unwrap();
        let text = p.to_checkpoint();
        assert!(text.starts_with("tdlab-mlp v1\nlayers 3 4 2\nactivations relu\n"));
        assert_eq!(MlpParams::from_checkpoint(&text).unwrap(), p);
        assert!(MlpParams::from_checkpoint("tdlab-mlp v2\n").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn forward_is_pure(seed in 0u64..1000, a in -3.0..3.0f64, b in -3.0..3.0f64) {
                let p = MlpParams::init(&[2, 6, 1], &[Activation::Tanh], &mut rng(seed)).unwrap();
                let y1 = mlp_forward(&p, &[a, b]).unwrap();
                let y2 = mlp_forward(&p, &[a, b]).unwrap();
                prop_assert_eq!(y1[0].to_bits(), y2[0].to_bits());
            }

            #[test]
            fn zero_lr_is_identity(seed in 0u64..1000, adam in any::<bool>()) {
                let mut p = MlpParams::init(&[2, 3, 1], &[Activation::Tanh], &mut rng(seed)).unwrap();
                let before = p.clone();
                let g = mlp_backward(&p, &[0.5, 0.1], &[1.0]).unwrap().grads;
                let mut st = OptimState::new(if adam { OptimRule::Adam } else { OptimRule::Sgd }, 0.0).unwrap();
                optim_step(&mut p, &g, &mut st).unwrap();
                prop_assert_eq!(p, before);
            }

            #[test]
            fn init_within_glorot_bounds(seed in 0u64..1000) {
                let p = MlpParams::init(&[5, 7, 3], &[Activation::Relu], &mut rng(seed)).unwrap();
                let l0 = (6.0f64 / 12.0).sqrt();
                let l1 = (6.0f64 / 10.0).sqrt();
                prop_assert!(p.weights()[0].iter().all(|w| w.abs() <= l0));
                prop_assert!(p.weights()[1].iter().all(|w| w.abs() <= l1));
            }
        }
    }
}
