//! Directional controller: an ensemble of Monte-Carlo Q-approximators whose
//! disagreement at `(s, a)` defines where exploration should push the action.
//!
//! * `ψ(s, a)` is the population variance of the member predictions.
//! * `∇ₐψ = (2/n)·Σᵢ (qᵢ − μ)·∂qᵢ/∂a` gives the direction of growing
//!   disagreement at the policy's base action.
//! * The correction is `a_e = (g/‖g‖₂) ⊙ ε·ζ`, with `ε` the expected norm of
//!   a uniformly random action and `ζ ∈ [0,1]^|A|` the ratio between the
//!   recent spread of the gradient stream and its historical maximum.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numcore::{concat_columns, AdamState, MlpParams, OutputHead};
use crate::replay::McBatch;
use crate::rng::derive_seed;

/// Below this gradient norm the correction is zero.
pub const ZERO_GRADIENT_NORM: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<MlpParams>,
    optimizers: Vec<AdamState>,
    obs_dim: usize,
    action_dim: usize,
}

impl Ensemble {
    /// `n` members of shape `(obs+act) → hidden… → 1`, each initialized from
    /// its own seed derived from `seed`.
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        n: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![obs_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let members = (0..n as u64)
            .map(|i| MlpParams::init(&sizes, derive_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, obs_dim, learning_rate)
    }

    pub fn from_members(members: Vec<MlpParams>, obs_dim: usize, learning_rate: f64) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let sizes = members[0].layer_sizes().to_vec();
        if members.iter().any(|m| m.layer_sizes() != sizes.as_slice()) {
            return Err(Error::Config("ensemble members must share one topology".into()));
        }
        if sizes[sizes.len() - 1] != 1 {
            return Err(Error::shape("ensemble member output", 1, sizes[sizes.len() - 1]));
        }
        if sizes[0] <= obs_dim {
            return Err(Error::Config(format!(
                "member input {} leaves no action coordinates after {obs_dim} state dims",
                sizes[0]
            )));
        }
        let optimizers = members.iter().map(|m| AdamState::new(m, learning_rate)).collect();
        Ok(Self {
            action_dim: sizes[0] - obs_dim,
            obs_dim,
            members,
            optimizers,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[MlpParams] {
        &self.members
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn joint_input(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.obs_dim {
            return Err(Error::shape("ensemble state", self.obs_dim, state.len()));
        }
        if action.len() != self.action_dim {
            return Err(Error::shape("ensemble action", self.action_dim, action.len()));
        }
        let mut x = Vec::with_capacity(self.obs_dim + self.action_dim);
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        Ok(x)
    }

    /// One prediction per member.
    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let x = self.joint_input(state, action)?;
        self.members
            .iter()
            .map(|m| Ok(m.forward(&x, &OutputHead::Identity)?[0]))
            .collect()
    }

    /// Batch predictions, `batch × n`.
    pub fn predict_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = concat_columns(states, actions);
        let mut out = Array2::zeros((x.nrows(), self.members.len()));
        for (i, m) in self.members.iter().enumerate() {
            let q = m.forward_batch(x.view(), &OutputHead::Identity)?;
            out.column_mut(i).assign(&q.column(0));
        }
        Ok(out)
    }

    /// Ensemble mean per sample: the Monte-Carlo value estimate `Q^MC`.
    pub fn mean_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let q = self.predict_batch(states, actions)?;
        Ok(q.mean_axis(Axis(1)).expect("ensemble is non-empty"))
    }

    /// `ψ(s, a)`: population variance of the member predictions.
    pub fn uncertainty(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(population_variance(&self.predict(state, action)?))
    }

    /// `∇ₐψ(s, a)`.
    pub fn uncertainty_grad(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let x = self.joint_input(state, action)?;
        let n = self.members.len() as f64;
        let mut preds = Vec::with_capacity(self.members.len());
        let mut grads = Vec::with_capacity(self.members.len());
        let xv = ArrayView2::from_shape((1, x.len()), &x).expect("single row");
        let unit = Array2::from_elem((1, 1), 1.0);
        for m in &self.members {
            let cache = m.forward_cached(xv, &OutputHead::Identity)?;
            preds.push(cache.output()[[0, 0]]);
            let (_, dx) = m.backward(&cache, unit.view(), &OutputHead::Identity)?;
            grads.push(dx.into_raw_vec_and_offset().0);
        }
        let mut out = vec![0.0; self.action_dim];
        for (dev, g) in deviations(&preds).iter().zip(&grads) {
            let w = 2.0 / n * dev;
            for (o, gi) in out.iter_mut().zip(&g[self.obs_dim..]) {
                *o += w * gi;
            }
        }
        Ok(out)
    }

    /// One Adam step per member on `Σᵢ mean_b (R_b − qᵢ(s_b, a_b))²`.
    /// Returns the loss before the step. Non-finite targets or gradients
    /// abort without touching any member.
    pub fn train_step(&mut self, batch: &McBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty Monte-Carlo batch".into()));
        }
        if batch.returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("Monte-Carlo targets"));
        }
        let x = concat_columns(batch.states.view(), batch.actions.view());
        let b = batch.len() as f64;
        let mut loss = 0.0;
        let mut all_grads = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let cache = m.forward_cached(x.view(), &OutputHead::Identity)?;
            let q = cache.output().column(0);
            let diff = &q - &batch.returns;
            loss += diff.mapv(|d| d * d).sum() / b;
            let upstream = diff.mapv(|d| 2.0 * d / b).insert_axis(Axis(1));
            let (grads, _) = m.backward(&cache, upstream.view(), &OutputHead::Identity)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite("ensemble gradients"));
            }
            all_grads.push(grads);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("ensemble loss"));
        }
        for ((m, opt), g) in self.members.iter_mut().zip(&mut self.optimizers).zip(&all_grads) {
            opt.step(m, g)?;
        }
        Ok(loss)
    }
}

/// Deviations are taken from the first element first, so equal inputs give
/// exactly zero.
pub fn population_variance(xs: &[f64]) -> f64 {
    let devs = deviations(xs);
    devs.iter().map(|d| d * d).sum::<f64>() / xs.len() as f64
}

/// `xᵢ − mean(x)`, computed on values shifted by `x₀`.
fn deviations(xs: &[f64]) -> Vec<f64> {
    let Some(&x0) = xs.first() else {
        return Vec::new();
    };
    let shifted: Vec<f64> = xs.iter().map(|x| x - x0).collect();
    let m = shifted.iter().sum::<f64>() / xs.len() as f64;
    shifted.iter().map(|d| d - m).collect()
}

/// `ε = E‖a‖₂` for `a ~ U(low, high)`. Exact for one action dimension,
/// Monte-Carlo with `sample_count` draws otherwise.
pub fn epsilon_init(spec: &EnvSpec, sample_count: usize, seed: u64) -> f64 {
    if spec.action_dim == 1 {
        return expected_abs_uniform(spec.action_low[0], spec.action_high[0]);
    }
    let n = sample_count.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let sq: f64 = spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(&lo, &hi)| {
                let a = rng.gen_range(lo..hi);
                a * a
            })
            .sum();
        total += sq.sqrt();
    }
    total / n as f64
}

/// `E|a|` for `a ~ U(lo, hi)`.
fn expected_abs_uniform(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 || hi <= 0.0 {
        ((lo + hi) / 2.0).abs()
    } else {
        (lo * lo + hi * hi) / (2.0 * (hi - lo))
    }
}

/// Running statistics turning the raw gradient stream into `ζ`.
#[derive(Debug, Clone)]
pub struct ScalingState {
    windows: Vec<VecDeque<f64>>,
    running_max_sigma: Vec<f64>,
    epsilon: f64,
    window_capacity: usize,
}

impl ScalingState {
    pub fn new(action_dim: usize, window_capacity: usize, epsilon: f64) -> Result<Self> {
        if window_capacity == 0 {
            return Err(Error::Config("scaling window must hold at least one gradient".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        Ok(Self {
            windows: vec![VecDeque::with_capacity(window_capacity); action_dim],
            running_max_sigma: vec![0.0; action_dim],
            epsilon,
            window_capacity,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn window_capacity(&self) -> usize {
        self.window_capacity
    }

    pub fn window_len(&self) -> usize {
        self.windows.first().map_or(0, VecDeque::len)
    }

    pub fn running_max_sigma(&self) -> &[f64] {
        &self.running_max_sigma
    }

    /// Push one gradient and return `ζ`. The running maximum is raised before
    /// dividing, so `ζ ≤ 1`; with fewer than two samples, or no spread seen
    /// yet, `ζ = 1`.
    pub fn update(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.windows.len() {
            return Err(Error::shape("scaling gradient", self.windows.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("scaling gradient"));
        }
        let mut zeta = Vec::with_capacity(grad.len());
        for ((window, max_sigma), &g) in self.windows.iter_mut().zip(&mut self.running_max_sigma).zip(grad) {
            if window.len() == self.window_capacity {
                window.pop_front();
            }
            window.push_back(g);
            if window.len() < 2 {
                zeta.push(1.0);
                continue;
            }
            let n = window.len() as f64;
            let mean = window.iter().sum::<f64>() / n;
            let sigma = (window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if sigma > *max_sigma {
                *max_sigma = sigma;
            }
            zeta.push(if *max_sigma > 0.0 {
                (sigma / *max_sigma).clamp(0.0, 1.0)
            } else {
                1.0
            });
        }
        Ok(zeta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub a_e: Vec<f64>,
    pub zeta: Vec<f64>,
    pub raw_gradient: Vec<f64>,
}

impl Correction {
    pub fn norm(&self) -> f64 {
        l2(&self.a_e)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `a_e = (g/‖g‖₂) ⊙ ε·ζ` with `g = ∇ₐψ(s, a_b)`. The scaling state always
/// sees `g`; a near-zero `g` yields `a_e = 0`.
pub fn exploratory_correction(
    ensemble: &Ensemble,
    scaling: &mut ScalingState,
    state: &[f64],
    base_action: &[f64],
) -> Result<Correction> {
    let g = ensemble.uncertainty_grad(state, base_action)?;
    let zeta = scaling.update(&g)?;
    let norm = l2(&g);
    let a_e = if norm < ZERO_GRADIENT_NORM {
        vec![0.0; g.len()]
    } else {
        g.iter()
            .zip(&zeta)
            .map(|(gi, z)| gi / norm * scaling.epsilon * z)
            .collect()
    };
    Ok(Correction {
        a_e,
        zeta,
        raw_gradient: g,
    })
}

/// The ensemble plus the scaling state that drive guided exploration.
#[derive(Debug, Clone)]
pub struct DirectionalController {
    pub ensemble: Ensemble,
    pub scaling: ScalingState,
}

impl DirectionalController {
    pub fn correction(&mut self, state: &[f64], base_action: &[f64]) -> Result<Correction> {
        exploratory_correction(&self.ensemble, &mut self.scaling, state, base_action)
    }
}
