//! Deterministic actor-critic learners.
//!
//! [`AgentKind::Td3`] keeps twin critics and regresses both onto the clipped
//! double-Q target. [`AgentKind::Mocco`] keeps a single critic and adds a
//! penalty pulling it toward the ensemble mean `Q^MC`:
//!
//! ```text
//! J_Q = mean[(Q − Q′)² + β·(Q − Q^MC)²]
//! ```
//!
//! Both share target policy smoothing, delayed actor updates and Polyak
//! averaged target networks. Exploration noise is chosen independently of the
//! learner via [`ExplorationMode`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{Correction, DirectionalController, Ensemble};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numcore::{concat_columns, AdamState, MlpParams, OutputHead};
use crate::replay::TransitionBatch;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationMode {
    None,
    Gaussian,
    Ou,
    Guided,
}

impl ExplorationMode {
    pub const ALL: [ExplorationMode; 4] = [
        ExplorationMode::None,
        ExplorationMode::Gaussian,
        ExplorationMode::Ou,
        ExplorationMode::Guided,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExplorationMode::None => "none",
            ExplorationMode::Gaussian => "gaussian",
            ExplorationMode::Ou => "ou",
            ExplorationMode::Guided => "guided",
        }
    }
}

impl fmt::Display for ExplorationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExplorationMode {
    type Err = Error;

    /// Accepts the table labels too: `no_expl`, `normal`, `ge`.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "no_expl" | "no-expl" => Ok(ExplorationMode::None),
            "gaussian" | "normal" => Ok(ExplorationMode::Gaussian),
            "ou" => Ok(ExplorationMode::Ou),
            "guided" | "ge" => Ok(ExplorationMode::Guided),
            other => Err(Error::Config(format!("unknown exploration mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Td3,
    Mocco,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Td3 => "td3",
            AgentKind::Mocco => "mocco",
        }
    }

    pub fn num_critics(self) -> usize {
        match self {
            AgentKind::Td3 => 2,
            AgentKind::Mocco => 1,
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "td3" => Ok(AgentKind::Td3),
            "mocco" => Ok(AgentKind::Mocco),
            other => Err(Error::Config(format!("unknown agent '{other}'"))),
        }
    }
}

/// Learner hyperparameters. Noise scales (`gaussian_sigma`, `ou_sigma`,
/// `target_noise_*`) are fractions of the half action range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub exploration_mode: ExplorationMode,
    pub gaussian_sigma: f64,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    pub target_noise_sigma: f64,
    pub target_noise_clip: f64,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub hidden_sizes: Vec<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            batch_size: 256,
            beta: 0.1,
            exploration_mode: ExplorationMode::Gaussian,
            gaussian_sigma: 0.1,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            target_noise_sigma: 0.2,
            target_noise_clip: 0.5,
            warmup_steps: 1000,
            learning_rate: AdamState::DEFAULT_LR,
            hidden_sizes: vec![256, 256],
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("beta", self.beta),
            ("gaussian_sigma", self.gaussian_sigma),
            ("ou_theta", self.ou_theta),
            ("ou_sigma", self.ou_sigma),
            ("target_noise_sigma", self.target_noise_sigma),
            ("target_noise_clip", self.target_noise_clip),
            ("learning_rate", self.learning_rate),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be finite, got {v}")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.policy_delay == 0 {
            return Err(Error::Config("policy_delay must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.gaussian_sigma < 0.0 || self.ou_sigma < 0.0 || self.target_noise_sigma < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "hidden_sizes must be non-empty and positive, got {:?}",
                self.hidden_sizes
            )));
        }
        Ok(())
    }
}

/// Ornstein-Uhlenbeck noise, `x ← x + θ·(0 − x) + σ·N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OUState {
    pub x: Vec<f64>,
    pub theta: f64,
    pub sigma: f64,
}

impl OUState {
    pub fn new(dim: usize, theta: f64, sigma: f64) -> Self {
        Self {
            x: vec![0.0; dim],
            theta,
            sigma,
        }
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        for x in &mut self.x {
            let n: f64 = StandardNormal.sample(rng);
            *x += self.theta * (0.0 - *x) + self.sigma * n;
        }
        &self.x
    }
}

/// What the behaviour policy emitted at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChoice {
    pub action: Vec<f64>,
    pub base_action: Vec<f64>,
    /// Present in guided mode.
    pub correction: Option<Correction>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    kind: AgentKind,
    config: AgentConfig,
    spec: EnvSpec,
    head: OutputHead,
    half_range: Vec<f64>,
    pub actor: MlpParams,
    pub actor_target: MlpParams,
    actor_opt: AdamState,
    pub critics: Vec<MlpParams>,
    pub critic_targets: Vec<MlpParams>,
    critic_opts: Vec<AdamState>,
    ou: OUState,
}

impl Agent {
    /// Fresh networks; each one gets its own seed derived from `seed`.
    pub fn new(kind: AgentKind, config: AgentConfig, spec: EnvSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut actor_sizes = vec![spec.obs_dim];
        actor_sizes.extend_from_slice(&config.hidden_sizes);
        actor_sizes.push(spec.action_dim);
        let mut critic_sizes = vec![spec.obs_dim + spec.action_dim];
        critic_sizes.extend_from_slice(&config.hidden_sizes);
        critic_sizes.push(1);

        let actor = MlpParams::init(&actor_sizes, derive_seed(seed, 0))?;
        let critics = (0..kind.num_critics() as u64)
            .map(|k| MlpParams::init(&critic_sizes, derive_seed(seed, k + 1)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_networks(kind, config, spec, actor, critics)
    }

    /// Assemble an agent from given networks; targets start as copies.
    pub fn from_networks(
        kind: AgentKind,
        config: AgentConfig,
        spec: EnvSpec,
        actor: MlpParams,
        critics: Vec<MlpParams>,
    ) -> Result<Self> {
        config.validate()?;
        if critics.len() != kind.num_critics() {
            return Err(Error::Config(format!(
                "{kind} uses {} critic(s), got {}",
                kind.num_critics(),
                critics.len()
            )));
        }
        if actor.input_dim() != spec.obs_dim {
            return Err(Error::shape("actor input", spec.obs_dim, actor.input_dim()));
        }
        if actor.output_dim() != spec.action_dim {
            return Err(Error::shape("actor output", spec.action_dim, actor.output_dim()));
        }
        for c in &critics {
            if c.input_dim() != spec.obs_dim + spec.action_dim {
                return Err(Error::shape(
                    "critic input",
                    spec.obs_dim + spec.action_dim,
                    c.input_dim(),
                ));
            }
            if c.output_dim() != 1 {
                return Err(Error::shape("critic output", 1, c.output_dim()));
            }
        }
        let head = OutputHead::tanh_bounds(&spec.action_low, &spec.action_high);
        let half_range = spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect();
        let lr = config.learning_rate;
        Ok(Self {
            kind,
            ou: OUState::new(spec.action_dim, config.ou_theta, config.ou_sigma),
            actor_opt: AdamState::new(&actor, lr),
            actor_target: actor.clone(),
            actor,
            critic_opts: critics.iter().map(|c| AdamState::new(c, lr)).collect(),
            critic_targets: critics.clone(),
            critics,
            head,
            half_range,
            config,
            spec,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn actor_head(&self) -> &OutputHead {
        &self.head
    }

    pub fn ou_state(&self) -> &OUState {
        &self.ou
    }

    /// Called at every episode start.
    pub fn reset_noise(&mut self) {
        self.ou.reset();
    }

    pub fn base_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(state, &self.head)
    }

    /// Deterministic, clipped actor output.
    pub fn select_action_eval(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.base_action(state)?;
        self.spec.clip_action(&mut a);
        Ok(a)
    }

    /// Uniform action over the box, used during warm-up.
    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.spec
            .action_low
            .iter()
            .zip(&self.spec.action_high)
            .map(|(&lo, &hi)| rng.gen_range(lo..=hi))
            .collect()
    }

    /// Behaviour action after warm-up: `a_b` plus the configured exploration
    /// term, clipped to the action box.
    pub fn select_action_train<R: Rng + ?Sized>(
        &mut self,
        controller: Option<&mut DirectionalController>,
        state: &[f64],
        rng: &mut R,
    ) -> Result<ActionChoice> {
        let base = self.base_action(state)?;
        let mut action = base.clone();
        let mut correction = None;
        match self.config.exploration_mode {
            ExplorationMode::None => {}
            ExplorationMode::Gaussian => {
                let sigma = self.config.gaussian_sigma;
                for (a, half) in action.iter_mut().zip(&self.half_range) {
                    let n: f64 = StandardNormal.sample(rng);
                    *a += sigma * half * n;
                }
            }
            ExplorationMode::Ou => {
                let noise = self.ou.step(rng);
                for ((a, half), x) in action.iter_mut().zip(&self.half_range).zip(noise) {
                    *a += half * x;
                }
            }
            ExplorationMode::Guided => {
                let dc = controller
                    .ok_or_else(|| Error::Config("guided exploration needs a directional controller".into()))?;
                let c = dc.correction(state, &base)?;
                for (a, e) in action.iter_mut().zip(&c.a_e) {
                    *a += e;
                }
                correction = Some(c);
            }
        }
        self.spec.clip_action(&mut action);
        Ok(ActionChoice {
            action,
            base_action: base,
            correction,
        })
    }

    /// Smoothed target actions `clip(π′(s′) + clip(σ·half·n, ±c·half))`.
    /// Noise is drawn row-major, one standard normal per (sample, dim).
    pub fn target_actions<R: Rng + ?Sized>(&self, next_states: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let mut a = self.actor_target.forward_batch(next_states, &self.head)?;
        let sigma = self.config.target_noise_sigma;
        let clip = self.config.target_noise_clip;
        for mut row in a.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                let n: f64 = StandardNormal.sample(rng);
                let half = self.half_range[j];
                let noise = (sigma * half * n).clamp(-clip * half, clip * half);
                *v = (*v + noise).clamp(self.spec.action_low[j], self.spec.action_high[j]);
            }
        }
        Ok(a)
    }

    fn critic_input(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        concat_columns(states, actions)
    }

    /// Critic predictions `Q_k(s, a)` of critic `k`.
    pub fn q_values(&self, k: usize, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let x = self.critic_input(states, actions);
        Ok(self.critics[k]
            .forward_batch(x.view(), &OutputHead::Identity)?
            .column(0)
            .to_owned())
    }

    /// Bootstrapped target `r + γ·(1 − d)·Q_tgt(s′, a′)`; the min over twin
    /// targets for TD3.
    pub fn td_targets<R: Rng + ?Sized>(&self, batch: &TransitionBatch, rng: &mut R) -> Result<Array1<f64>> {
        let next_actions = self.target_actions(batch.next_states.view(), rng)?;
        let x = self.critic_input(batch.next_states.view(), next_actions.view());
        let mut next_q: Option<Array1<f64>> = None;
        for t in &self.critic_targets {
            let q = t.forward_batch(x.view(), &OutputHead::Identity)?.column(0).to_owned();
            next_q = Some(match next_q {
                None => q,
                Some(prev) => ndarray::Zip::from(&prev).and(&q).map_collect(|a, b| a.min(*b)),
            });
        }
        let next_q = next_q.expect("at least one critic");
        let gamma = self.config.gamma;
        let y = ndarray::Zip::from(&batch.rewards)
            .and(&batch.dones)
            .and(&next_q)
            .map_collect(|r, d, q| r + gamma * (1.0 - d) * q);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("TD targets"));
        }
        Ok(y)
    }

    /// Clipped double-Q update of both TD3 critics. Returns the summed loss.
    pub fn td3_critic_update<R: Rng + ?Sized>(&mut self, batch: &TransitionBatch, rng: &mut R) -> Result<f64> {
        if self.kind != AgentKind::Td3 {
            return Err(Error::Unsupported("td3_critic_update on a single-critic agent".into()));
        }
        let y = self.td_targets(batch, rng)?;
        let x = self.critic_input(batch.states.view(), batch.actions.view());
        self.regress_critics(&x, &y, None)
    }

    /// Single-critic update with the Monte-Carlo penalty. `Q^MC` is the
    /// ensemble mean at the batch's `(s, a)` and is held constant. With
    /// `β = 0` the ensemble is not consulted.
    pub fn mocco_critic_update<R: Rng + ?Sized>(
        &mut self,
        batch: &TransitionBatch,
        ensemble: Option<&Ensemble>,
        rng: &mut R,
    ) -> Result<f64> {
        if self.kind != AgentKind::Mocco {
            return Err(Error::Unsupported("mocco_critic_update on a twin-critic agent".into()));
        }
        let y = self.td_targets(batch, rng)?;
        let x = self.critic_input(batch.states.view(), batch.actions.view());
        let penalty = if self.config.beta != 0.0 {
            let ens = ensemble.ok_or_else(|| Error::Config("MC penalty needs the ensemble".into()))?;
            let q_mc = ens.mean_batch(batch.states.view(), batch.actions.view())?;
            if q_mc.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("Monte-Carlo estimates"));
            }
            Some((self.config.beta, q_mc))
        } else {
            None
        };
        self.regress_critics(&x, &y, penalty.as_ref())
    }

    fn regress_critics(
        &mut self,
        x: &Array2<f64>,
        y: &Array1<f64>,
        penalty: Option<&(f64, Array1<f64>)>,
    ) -> Result<f64> {
        let b = y.len() as f64;
        let mut total = 0.0;
        let mut updates = Vec::with_capacity(self.critics.len());
        for critic in &self.critics {
            let cache = critic.forward_cached(x.view(), &OutputHead::Identity)?;
            let q = cache.output().column(0);
            let td = &q - y;
            let mut loss = td.mapv(|d| d * d).sum() / b;
            let mut dq = td;
            if let Some((beta, q_mc)) = penalty {
                let mc = &q - q_mc;
                loss += beta * mc.mapv(|d| d * d).sum() / b;
                dq.zip_mut_with(&mc, |g, m| *g += beta * m);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite("critic loss"));
            }
            let upstream = dq.mapv(|g| 2.0 * g / b).insert_axis(Axis(1));
            let (grads, _) = critic.backward(&cache, upstream.view(), &OutputHead::Identity)?;
            updates.push(grads);
            total += loss;
        }
        for ((critic, opt), g) in self.critics.iter_mut().zip(&mut self.critic_opts).zip(&updates) {
            opt.step(critic, g)?;
        }
        Ok(total)
    }

    /// Ascent on `mean Q₁(s, π(s))`. Returns `−mean Q` before the step.
    pub fn actor_update(&mut self, batch: &TransitionBatch) -> Result<f64> {
        let states = batch.states.view();
        let actor_cache = self.actor.forward_cached(states, &self.head)?;
        let actions = actor_cache.output().clone();
        let x = self.critic_input(states, actions.view());
        let critic = &self.critics[0];
        let critic_cache = critic.forward_cached(x.view(), &OutputHead::Identity)?;
        let b = batch.len() as f64;
        let loss = -critic_cache.output().column(0).sum() / b;
        if !loss.is_finite() {
            return Err(Error::NonFinite("actor loss"));
        }
        let up = Array2::from_elem((batch.len(), 1), -1.0 / b);
        let (_, dx) = critic.backward(&critic_cache, up.view(), &OutputHead::Identity)?;
        let da = dx.slice(s![.., self.spec.obs_dim..]).to_owned();
        let (grads, _) = self.actor.backward(&actor_cache, da.view(), &self.head)?;
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(loss)
    }

    /// `θ′ ← τθ + (1−τ)θ′` for the actor and every critic target.
    pub fn target_soft_update(&mut self, tau: f64) {
        self.actor_target.soft_update_from(&self.actor, tau);
        for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
            t.soft_update_from(c, tau);
        }
    }

    /// Writes `actor.txt` and `critic_<k>.txt` snapshots into `dir`.
    pub fn save_snapshots(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.actor.save(&dir.join("actor.txt"))?;
        for (k, c) in self.critics.iter().enumerate() {
            c.save(&dir.join(format!("critic_{k}.txt")))?;
        }
        Ok(())
    }
}
