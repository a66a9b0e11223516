//! Parameterized stochastic policies and their derivatives.
//!
//! A policy maps an observation to a vector of distribution parameters (the
//! "head" coordinates): `[mean, log_std]` for a diagonal Gaussian, or the
//! pre-softmax logits of each factor for a factored categorical. The network
//! part is a stack of dense `tanh` layers with a linear output layer. The
//! Gaussian log standard deviation is a free parameter slice, independent of
//! the observation.
//!
//! Derivatives are hand-written for this architecture: [`Policy::vjp`]
//! backpropagates a head-space cotangent (`J^T c`) and [`Policy::jvp`] pushes a
//! parameter-space tangent forward (`J v`). Together with the head Fisher
//! ([`DistParams::fisher_product`]) they give the Fisher-vector product
//! `J^T M J v` without forming any matrix.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut, Range};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Flat parameter vector `theta`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    /// `self + scale * dir`.
    pub fn offset(&self, scale: f64, dir: &[f64]) -> Self {
        Self(self.0.iter().zip(dir).map(|(a, d)| a + scale * d).collect())
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self(self.0.iter().map(|a| a * scale).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub range: Range<usize>,
}

/// Named slices of the parameter vector, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub slices: Vec<ParamSlice>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.slices.last().map_or(0, |s| s.range.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        self.slices.iter().find(|s| s.name == name).map(|s| s.range.clone())
    }

    /// True when the slices tile `0..len` with no overlap and no gap.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for s in &self.slices {
            if s.range.start != next || s.range.end < s.range.start {
                return false;
            }
            next = s.range.end;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadKind {
    GaussianDiag { action_dim: usize },
    Categorical { factors: Vec<usize> },
    /// One logit per (state, action); observations must be discrete indices.
    TabularSoftmax { num_states: usize, num_actions: usize },
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::GaussianDiag { .. } => "gaussian-diag",
            HeadKind::Categorical { .. } => "categorical-factored",
            HeadKind::TabularSoftmax { .. } => "tabular-softmax",
        }
    }

    /// Dimension of the distribution-parameter (head) coordinates.
    pub fn head_dim(&self) -> usize {
        match self {
            HeadKind::GaussianDiag { action_dim } => 2 * action_dim,
            HeadKind::Categorical { factors } => factors.iter().sum(),
            HeadKind::TabularSoftmax { num_actions, .. } => *num_actions,
        }
    }
}

/// Architecture of a policy: dense tanh layers followed by a distribution head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: HeadKind,
}

impl NetworkSpec {
    pub fn gaussian(input_dim: usize, hidden_sizes: Vec<usize>, action_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_sizes,
            activation: Activation::Tanh,
            head: HeadKind::GaussianDiag { action_dim },
        }
    }

    pub fn categorical(input_dim: usize, hidden_sizes: Vec<usize>, factors: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_sizes,
            activation: Activation::Tanh,
            head: HeadKind::Categorical { factors },
        }
    }

    pub fn tabular(num_states: usize, num_actions: usize) -> Self {
        Self {
            input_dim: num_states,
            hidden_sizes: Vec::new(),
            activation: Activation::Tanh,
            head: HeadKind::TabularSoftmax {
                num_states,
                num_actions,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("network input dimension is zero"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden layer of width zero"));
        }
        match &self.head {
            HeadKind::GaussianDiag { action_dim } if *action_dim == 0 => {
                Err(Error::invalid("Gaussian head needs a positive action dimension"))
            }
            HeadKind::Categorical { factors } if factors.is_empty() || factors.iter().any(|&n| n < 1) => {
                Err(Error::invalid("categorical head needs factors of size >= 1"))
            }
            HeadKind::TabularSoftmax {
                num_states,
                num_actions,
            } => {
                if !self.hidden_sizes.is_empty() {
                    return Err(Error::invalid("tabular softmax has no hidden layers"));
                }
                if *num_states != self.input_dim || *num_actions == 0 {
                    return Err(Error::invalid("tabular softmax dimensions inconsistent"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Width of the network's linear output layer.
    fn output_dim(&self) -> usize {
        match &self.head {
            HeadKind::GaussianDiag { action_dim } => *action_dim,
            HeadKind::Categorical { factors } => factors.iter().sum(),
            HeadKind::TabularSoftmax { num_actions, .. } => *num_actions,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_sizes {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim()));
        dims
    }

    pub fn layout(&self) -> ParamLayout {
        let mut slices = Vec::new();
        let mut push = |name: String, len: usize| {
            let start = slices.last().map_or(0, |s: &ParamSlice| s.range.end);
            slices.push(ParamSlice {
                name,
                range: start..start + len,
            });
        };
        if let HeadKind::TabularSoftmax {
            num_states,
            num_actions,
        } = &self.head
        {
            push("logits".into(), num_states * num_actions);
            return ParamLayout { slices };
        }
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            push(format!("layer{l}.weight"), fan_in * fan_out);
            push(format!("layer{l}.bias"), fan_out);
        }
        if let HeadKind::GaussianDiag { action_dim } = &self.head {
            push("log_std".into(), *action_dim);
        }
        ParamLayout { slices }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases, log-std and
    /// tabular logits zero.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let layout = self.layout();
        let mut theta = ParamVector::zeros(layout.len());
        if matches!(self.head, HeadKind::TabularSoftmax { .. }) {
            return theta;
        }
        for (l, (fan_in, _)) in self.layer_dims().into_iter().enumerate() {
            let w = 1.0 / (fan_in as f64).sqrt();
            let range = layout.get(&format!("layer{l}.weight")).expect("layer in layout");
            for x in &mut theta[range] {
                *x = rng.random_range(-w..=w);
            }
        }
        theta
    }
}

/// Policy input.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Discrete state index; fed to networks as a one-hot vector.
    Discrete(usize),
    Vector(Vec<f64>),
}

impl Observation {
    pub fn features(&self, dim: usize) -> Result<Vec<f64>> {
        match self {
            Observation::Discrete(i) => {
                if *i >= dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: *i,
                        context: "discrete observation index",
                    });
                }
                let mut v = vec![0.0; dim];
                v[*i] = 1.0;
                Ok(v)
            }
            Observation::Vector(v) => {
                if v.len() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: v.len(),
                        context: "observation vector",
                    });
                }
                Ok(v.clone())
            }
        }
    }
}

/// A sampled action.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// One index per categorical factor.
    Discrete(Vec<usize>),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(a: usize) -> Self {
        Action::Discrete(vec![a])
    }

    pub fn as_index(&self) -> Option<usize> {
        match self {
            Action::Discrete(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    GaussianDiag,
    CategoricalFactored,
    TabularSoftmax,
}

/// Distribution parameters produced by the policy for one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum DistParams {
    Gaussian {
        mean: Vec<f64>,
        log_std: Vec<f64>,
    },
    Categorical {
        kind: DistKind,
        logits: Vec<Vec<f64>>,
        probs: Vec<Vec<f64>>,
    },
}

impl DistParams {
    pub fn categorical(kind: DistKind, logits: Vec<Vec<f64>>) -> Self {
        let probs = logits.iter().map(|l| softmax(l)).collect();
        DistParams::Categorical { kind, logits, probs }
    }

    pub fn kind(&self) -> DistKind {
        match self {
            DistParams::Gaussian { .. } => DistKind::GaussianDiag,
            DistParams::Categorical { kind, .. } => *kind,
        }
    }

    pub fn head_dim(&self) -> usize {
        match self {
            DistParams::Gaussian { mean, .. } => 2 * mean.len(),
            DistParams::Categorical { logits, .. } => logits.iter().map(Vec::len).sum(),
        }
    }

    pub fn stddev(&self) -> Option<Vec<f64>> {
        match self {
            DistParams::Gaussian { log_std, .. } => Some(log_std.iter().map(|r| r.exp()).collect()),
            _ => None,
        }
    }

    /// Log-likelihood of `action`; `-inf` for a zero-probability discrete action.
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (DistParams::Gaussian { mean, log_std }, Action::Continuous(a)) => {
                if a.len() != mean.len() {
                    return Err(Error::Dimension {
                        expected: mean.len(),
                        got: a.len(),
                        context: "Gaussian action",
                    });
                }
                Ok(mean
                    .iter()
                    .zip(log_std)
                    .zip(a)
                    .map(|((m, r), x)| {
                        let z = (x - m) * (-r).exp();
                        -0.5 * z * z - r - 0.5 * (2.0 * PI).ln()
                    })
                    .sum())
            }
            (DistParams::Categorical { logits, .. }, Action::Discrete(idx)) => {
                if idx.len() != logits.len() {
                    return Err(Error::Dimension {
                        expected: logits.len(),
                        got: idx.len(),
                        context: "categorical action factors",
                    });
                }
                let mut total = 0.0;
                for (l, &i) in logits.iter().zip(idx) {
                    if i >= l.len() {
                        return Err(Error::invalid(format!("action {i} out of range for factor of size {}", l.len())));
                    }
                    total += log_softmax(l)[i];
                }
                Ok(total)
            }
            _ => Err(Error::invalid("action kind does not match distribution")),
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Action {
        match self {
            DistParams::Gaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(log_std)
                    .map(|(m, r)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + r.exp() * z
                    })
                    .collect(),
            ),
            DistParams::Categorical { probs, .. } => {
                Action::Discrete(probs.iter().map(|p| sample_index(p, rng.random::<f64>())).collect())
            }
        }
    }

    /// Gradient of `log p(action)` with respect to the head coordinates.
    pub fn grad_log_prob_head(&self, action: &Action) -> Result<Vec<f64>> {
        match (self, action) {
            (DistParams::Gaussian { mean, log_std }, Action::Continuous(a)) => {
                let d = mean.len();
                let mut g = vec![0.0; 2 * d];
                for i in 0..d {
                    let inv_var = (-2.0 * log_std[i]).exp();
                    let diff = a[i] - mean[i];
                    g[i] = diff * inv_var;
                    g[d + i] = diff * diff * inv_var - 1.0;
                }
                Ok(g)
            }
            (DistParams::Categorical { probs, .. }, Action::Discrete(idx)) => {
                let mut g = Vec::with_capacity(self.head_dim());
                for (p, &i) in probs.iter().zip(idx) {
                    g.extend(p.iter().enumerate().map(|(j, &pj)| f64::from(u8::from(j == i)) - pj));
                }
                Ok(g)
            }
            _ => Err(Error::invalid("action kind does not match distribution")),
        }
    }

    /// `KL(self || other)` in closed form.
    pub fn kl(&self, other: &DistParams) -> Result<f64> {
        match (self, other) {
            (
                DistParams::Gaussian { mean: m0, log_std: r0 },
                DistParams::Gaussian { mean: m1, log_std: r1 },
            ) if m0.len() == m1.len() => Ok((0..m0.len())
                .map(|i| {
                    let var_ratio = (2.0 * (r0[i] - r1[i])).exp();
                    let d = (m0[i] - m1[i]) * (-r1[i]).exp();
                    r1[i] - r0[i] + 0.5 * (var_ratio + d * d) - 0.5
                })
                .sum()),
            (DistParams::Categorical { logits: l0, probs: p0, .. }, DistParams::Categorical { logits: l1, .. })
                if l0.len() == l1.len() && l0.iter().zip(l1).all(|(a, b)| a.len() == b.len()) =>
            {
                let mut total = 0.0;
                for ((a, p), b) in l0.iter().zip(p0).zip(l1) {
                    let la = log_softmax(a);
                    let lb = log_softmax(b);
                    total += p
                        .iter()
                        .zip(la.iter().zip(&lb))
                        .map(|(&pi, (x, y))| if pi == 0.0 { 0.0 } else { pi * (x - y) })
                        .sum::<f64>();
                }
                Ok(total)
            }
            _ => Err(Error::invalid("KL between distributions of different kind or shape")),
        }
    }

    /// Fisher information of the distribution in head coordinates applied to `v`.
    ///
    /// Gaussian: `diag(1/sigma^2)` on the mean block and `2` on the log-std block.
    /// Categorical: per factor `(diag(p) - p p^T) v` in logit coordinates.
    pub fn fisher_product(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.head_dim() {
            return Err(Error::Dimension {
                expected: self.head_dim(),
                got: v.len(),
                context: "head-space vector",
            });
        }
        match self {
            DistParams::Gaussian { log_std, .. } => {
                let d = log_std.len();
                let mut out = vec![0.0; 2 * d];
                for i in 0..d {
                    out[i] = v[i] * (-2.0 * log_std[i]).exp();
                    out[d + i] = 2.0 * v[d + i];
                }
                Ok(out)
            }
            DistParams::Categorical { probs, .. } => {
                let mut out = Vec::with_capacity(v.len());
                let mut offset = 0;
                for p in probs {
                    let block = &v[offset..offset + p.len()];
                    let pv: f64 = p.iter().zip(block).map(|(a, b)| a * b).sum();
                    out.extend(p.iter().zip(block).map(|(pi, vi)| pi * (vi - pv)));
                    offset += p.len();
                }
                Ok(out)
            }
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            DistParams::Gaussian { log_std, .. } => log_std
                .iter()
                .map(|r| r + 0.5 * (2.0 * PI * std::f64::consts::E).ln())
                .sum(),
            DistParams::Categorical { probs, .. } => probs
                .iter()
                .flatten()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum(),
        }
    }
}

/// Index `i` with `cdf[i-1] <= u < cdf[i]`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just below one.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// KL between two distributions together with the head Fisher at `mu_new`.
pub fn kl_and_fisher_head<'a>(
    mu_new: &'a DistParams,
    mu_old: &DistParams,
) -> Result<(f64, impl Fn(&[f64]) -> Result<Vec<f64>> + 'a)> {
    if mu_new.kind() != mu_old.kind() || mu_new.head_dim() != mu_old.head_dim() {
        return Err(Error::invalid("kl between mismatched heads"));
    }
    let kl = mu_old.kl(mu_new)?;
    Ok((kl, move |v: &[f64]| mu_new.fisher_product(v)))
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Inputs to each dense layer (`inputs[0]` is the feature vector); hidden
    /// layers store their post-activation output in the next slot.
    inputs: Vec<Vec<f64>>,
    discrete_state: Option<usize>,
    pub dist: DistParams,
}

/// A policy architecture; parameters are passed explicitly to every call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub spec: NetworkSpec,
    layout: ParamLayout,
}

impl Policy {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        Ok(Self { spec, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.layout.len() {
            return Err(Error::Dimension {
                expected: self.layout.len(),
                got: theta.len(),
                context: "parameter vector",
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, theta: &[f64], obs: &Observation) -> Result<ForwardCache> {
        self.check_theta(theta)?;
        if let HeadKind::TabularSoftmax {
            num_states,
            num_actions,
        } = &self.spec.head
        {
            let s = match obs {
                Observation::Discrete(s) if s < num_states => *s,
                _ => return Err(Error::invalid("tabular policy needs a discrete observation in range")),
            };
            let logits = theta[s * num_actions..(s + 1) * num_actions].to_vec();
            return Ok(ForwardCache {
                inputs: Vec::new(),
                discrete_state: Some(s),
                dist: DistParams::categorical(DistKind::TabularSoftmax, vec![logits]),
            });
        }
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        let mut inputs = vec![obs.features(self.spec.input_dim)?];
        let mut output = Vec::new();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &theta[offset..offset + fan_in * fan_out];
            let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let x = &inputs[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|j| b[j] + w[j * fan_in..(j + 1) * fan_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            if l == last {
                output = z;
            } else {
                inputs.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        let dist = match &self.spec.head {
            HeadKind::GaussianDiag { action_dim } => {
                let log_std = theta[offset..offset + action_dim].to_vec();
                DistParams::Gaussian { mean: output, log_std }
            }
            HeadKind::Categorical { factors } => {
                let mut logits = Vec::with_capacity(factors.len());
                let mut start = 0;
                for &n in factors {
                    logits.push(output[start..start + n].to_vec());
                    start += n;
                }
                DistParams::categorical(DistKind::CategoricalFactored, logits)
            }
            HeadKind::TabularSoftmax { .. } => unreachable!("handled above"),
        };
        Ok(ForwardCache {
            inputs,
            discrete_state: None,
            dist,
        })
    }

    pub fn forward(&self, theta: &[f64], obs: &Observation) -> Result<DistParams> {
        Ok(self.forward_cached(theta, obs)?.dist)
    }

    /// `J^T c` where `J = d(head coords)/d(theta)` at the cached point.
    pub fn vjp(&self, theta: &[f64], cache: &ForwardCache, cotangent: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; theta.len()];
        if let HeadKind::TabularSoftmax { num_actions, .. } = &self.spec.head {
            let s = cache.discrete_state.expect("tabular cache has a state");
            grad[s * num_actions..(s + 1) * num_actions].copy_from_slice(cotangent);
            return grad;
        }
        let dims = self.spec.layer_dims();
        let offsets = layer_offsets(&dims);
        let out_dim = dims.last().expect("at least one layer").1;
        if let HeadKind::GaussianDiag { action_dim } = &self.spec.head {
            let start = theta.len() - action_dim;
            grad[start..].copy_from_slice(&cotangent[*action_dim..2 * action_dim]);
        }
        let mut delta: Vec<f64> = cotangent[..out_dim].to_vec();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let off = offsets[l];
            let x = &cache.inputs[l];
            for j in 0..fan_out {
                let row = off + j * fan_in;
                for i in 0..fan_in {
                    grad[row + i] += delta[j] * x[i];
                }
                grad[off + fan_in * fan_out + j] += delta[j];
            }
            if l == 0 {
                break;
            }
            let w = &theta[off..off + fan_in * fan_out];
            // x is the tanh output of the previous layer.
            delta = (0..fan_in)
                .map(|i| {
                    let back: f64 = (0..fan_out).map(|j| w[j * fan_in + i] * delta[j]).sum();
                    back * (1.0 - x[i] * x[i])
                })
                .collect();
        }
        grad
    }

    /// `J v`, the directional derivative of the head coordinates.
    pub fn jvp(&self, theta: &[f64], cache: &ForwardCache, tangent: &[f64]) -> Vec<f64> {
        if let HeadKind::TabularSoftmax { num_actions, .. } = &self.spec.head {
            let s = cache.discrete_state.expect("tabular cache has a state");
            return tangent[s * num_actions..(s + 1) * num_actions].to_vec();
        }
        let dims = self.spec.layer_dims();
        let offsets = layer_offsets(&dims);
        let last = dims.len() - 1;
        // Tangent of the current layer input; the raw features are constant.
        let mut dx = vec![0.0; self.spec.input_dim];
        let mut out = Vec::new();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let off = offsets[l];
            let w = &theta[off..off + fan_in * fan_out];
            let dw = &tangent[off..off + fan_in * fan_out];
            let db = &tangent[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let x = &cache.inputs[l];
            let dz: Vec<f64> = (0..fan_out)
                .map(|j| {
                    let r = j * fan_in;
                    db[j]
                        + (0..fan_in)
                            .map(|i| dw[r + i] * x[i] + w[r + i] * dx[i])
                            .sum::<f64>()
                })
                .collect();
            if l == last {
                out = dz;
            } else {
                let h = &cache.inputs[l + 1];
                dx = dz.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
            }
        }
        if let HeadKind::GaussianDiag { action_dim } = &self.spec.head {
            out.extend_from_slice(&tangent[tangent.len() - action_dim..]);
        }
        out
    }

    pub fn log_prob(&self, theta: &[f64], obs: &Observation, action: &Action) -> Result<f64> {
        self.forward(theta, obs)?.log_prob(action)
    }

    /// Gradient of `log pi_theta(action | obs)` by reverse accumulation.
    pub fn grad_log_prob(&self, theta: &[f64], obs: &Observation, action: &Action) -> Result<ParamVector> {
        let cache = self.forward_cached(theta, obs)?;
        let head_grad = cache.dist.grad_log_prob_head(action)?;
        Ok(ParamVector(self.vjp(theta, &cache, &head_grad)))
    }

    /// `J^T M J v` for one observation, with `M` the head Fisher at `theta`.
    pub fn fisher_vector_product(&self, theta: &[f64], obs: &Observation, v: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(theta, obs)?;
        let jv = self.jvp(theta, &cache, v);
        let mjv = cache.dist.fisher_product(&jv)?;
        Ok(self.vjp(theta, &cache, &mjv))
    }
}

fn layer_offsets(dims: &[(usize, usize)]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(fan_in, fan_out) in dims {
        offsets.push(off);
        off += fan_in * fan_out + fan_out;
    }
    offsets
}
