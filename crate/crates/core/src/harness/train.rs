//! The training loop and the evaluation protocol.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentKind};
use crate::controller::{epsilon_init, DirectionalController, Ensemble, ScalingState};
use crate::envs::{EnvName, Environment, StepResult};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::diagnostics::{q_diagnostics_probe, write_qdiag_csv};
use crate::harness::metrics::{mean_std, Mean, MetricRecord, MetricsWriter, QDiagnostics};
use crate::replay::{finalize_episode, EpisodeBuffer, MCRecord, McBatch, RingBuffer, Transition, TransitionBatch};
use crate::rng::{derive_seed, stream, Rng, Stream};

pub const CONFIG_ECHO: &str = "config.toml";
pub const SUMMARY_JSON: &str = "summary.json";
pub const FAILURE_MARKER: &str = "FAILED";
pub const QDIAG_CSV: &str = "qdiag.csv";
pub const TRACE_CSV: &str = "correction_trace.csv";

/// Undiscounted return of `episodes` greedy rollouts, reset seed `i` derived
/// from `seed`. Returns (mean, population std).
pub fn evaluate_policy(agent: &Agent, env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Input("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut obs = env.reset(derive_seed(seed, i as u64));
        let mut total = 0.0;
        loop {
            let a = agent.select_action_eval(&obs)?;
            let r = env.step(&a)?;
            total += r.reward;
            if r.done() {
                break;
            }
            obs = r.observation;
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Whether one step counts as solving the task: reaching the goal in the
/// mountain car, full reward elsewhere.
pub fn is_success(env: EnvName, r: &StepResult) -> bool {
    match env {
        EnvName::SparseMountainCar => r.terminated,
        EnvName::PointMass | EnvName::PendulumSwingup => r.reward >= 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub error: Option<String>,
    pub env_name: EnvName,
    pub agent_name: AgentKind,
    pub exploration_mode: String,
    pub seed: u64,
    pub steps_completed: usize,
    pub episodes: usize,
    pub critic_updates: usize,
    pub policy_updates: usize,
    pub controller_updates: usize,
    pub first_success_step: Option<usize>,
    pub final10_mean: Option<f64>,
    pub best_eval_mean: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// What happened at one environment step.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub critic_loss: Option<f64>,
    pub controller_loss: Option<f64>,
    pub policy_updated: bool,
    pub episode_finished: bool,
}

/// All state of one run. `step` advances the loop by one environment step;
/// `run` drives it to the end and writes the artifacts.
pub struct Trainer {
    pub config: RunConfig,
    pub env: Box<dyn Environment>,
    pub eval_env: Box<dyn Environment>,
    pub agent: Agent,
    pub controller: Option<DirectionalController>,
    pub main: RingBuffer<Transition>,
    pub mc: RingBuffer<MCRecord>,
    episode: EpisodeBuffer,
    obs: Vec<f64>,
    reset_rng: Rng,
    explore_rng: Rng,
    sample_rng: Rng,
    target_rng: Rng,
    warmup_rng: Rng,
    diag_rng: Rng,
    eval_seed: u64,
    pub t: usize,
    pub episodes: usize,
    pub critic_updates: usize,
    pub policy_updates: usize,
    pub controller_updates: usize,
    pub first_success_step: Option<usize>,
    last_correction: Option<crate::controller::Correction>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut env = config.env_name.make();
        let eval_env = config.env_name.make();
        let spec = env.spec().clone();
        let init_seed = stream(seed, Stream::Init).next_u64();
        let agent = Agent::new(
            config.agent_name,
            config.agent_config(),
            spec.clone(),
            derive_seed(init_seed, 0),
        )?;
        let controller = if config.needs_controller() {
            let ensemble = Ensemble::new(
                spec.obs_dim,
                spec.action_dim,
                &config.ensemble_hidden_sizes,
                config.ensemble_size,
                config.ensemble_learning_rate,
                derive_seed(init_seed, 1),
            )?;
            let eps = epsilon_init(&spec, config.epsilon_samples, derive_seed(init_seed, 2));
            let scaling = ScalingState::new(spec.action_dim, config.scaling_window, eps)?;
            Some(DirectionalController { ensemble, scaling })
        } else {
            None
        };
        let mut reset_rng = stream(seed, Stream::EnvReset);
        let obs = env.reset(reset_rng.next_u64());
        Ok(Self {
            main: RingBuffer::new(config.replay_capacity),
            mc: RingBuffer::new(config.mc_capacity),
            episode: EpisodeBuffer::new(),
            obs,
            reset_rng,
            explore_rng: stream(seed, Stream::Exploration),
            sample_rng: stream(seed, Stream::Sampling),
            target_rng: stream(seed, Stream::TargetNoise),
            warmup_rng: stream(seed, Stream::Warmup),
            diag_rng: stream(seed, Stream::Diagnostics),
            eval_seed: stream(seed, Stream::Evaluation).next_u64(),
            t: 0,
            episodes: 0,
            critic_updates: 0,
            policy_updates: 0,
            controller_updates: 0,
            first_success_step: None,
            last_correction: None,
            config,
            env,
            eval_env,
            agent,
            controller,
        })
    }

    /// The correction applied at the most recent guided step.
    pub fn last_correction(&self) -> Option<&crate::controller::Correction> {
        self.last_correction.as_ref()
    }

    /// One pass of the loop body: act, stage, maybe finalize the episode,
    /// then critic, controller and delayed actor updates.
    pub fn step(&mut self) -> Result<StepReport> {
        self.t += 1;
        let t = self.t;
        let warm = t <= self.config.warmup_steps;
        self.last_correction = None;
        let action = if warm {
            self.agent.random_action(&mut self.warmup_rng)
        } else {
            let choice = self
                .agent
                .select_action_train(self.controller.as_mut(), &self.obs, &mut self.explore_rng)?;
            self.last_correction = choice.correction;
            choice.action
        };
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("behaviour action"));
        }
        let res = self.env.step(&action)?;
        if self.first_success_step.is_none() && is_success(self.config.env_name, &res) {
            self.first_success_step = Some(t);
        }
        self.episode.stage_step(Transition {
            state: std::mem::take(&mut self.obs),
            action,
            reward: res.reward,
            next_state: res.observation.clone(),
            done: res.terminated,
        });
        let mut report = StepReport::default();
        if res.done() {
            finalize_episode(&mut self.episode, &mut self.main, &mut self.mc, self.config.gamma);
            self.episodes += 1;
            self.obs = self.env.reset(self.reset_rng.next_u64());
            self.agent.reset_noise();
            report.episode_finished = true;
        } else {
            self.obs = res.observation;
        }

        if warm {
            return Ok(report);
        }
        let batch_size = self.config.batch_size;
        if let Some(refs) = self.main.sample_uniform(batch_size, &mut self.sample_rng) {
            let batch = TransitionBatch::from_refs(&refs);
            let loss = match self.agent.kind() {
                AgentKind::Td3 => self.agent.td3_critic_update(&batch, &mut self.target_rng)?,
                AgentKind::Mocco => self.agent.mocco_critic_update(
                    &batch,
                    self.controller.as_ref().map(|c| &c.ensemble),
                    &mut self.target_rng,
                )?,
            };
            report.critic_loss = Some(loss);
            self.critic_updates += 1;

            if let Some(dc) = self.controller.as_mut() {
                if let Some(mc_refs) = self.mc.sample_uniform(batch_size, &mut self.sample_rng) {
                    report.controller_loss = Some(dc.ensemble.train_step(&McBatch::from_refs(&mc_refs))?);
                    self.controller_updates += 1;
                }
            }

            if self.critic_updates.is_multiple_of(self.config.policy_delay) {
                self.agent.actor_update(&batch)?;
                self.agent.target_soft_update(self.config.tau);
                self.policy_updates += 1;
                report.policy_updated = true;
            }
        }
        Ok(report)
    }

    pub fn evaluate(&mut self) -> Result<(f64, f64)> {
        evaluate_policy(
            &self.agent,
            self.eval_env.as_mut(),
            self.config.eval_episodes,
            self.eval_seed,
        )
    }

    /// Probe on a fresh environment instance; `None` until the main buffer
    /// holds a full probe batch.
    pub fn probe(&mut self) -> Result<Option<QDiagnostics>> {
        let n = self.config.q_probe_batch;
        let Some(refs) = self.main.sample_uniform(n, &mut self.diag_rng) else {
            return Ok(None);
        };
        let mut env = self.config.env_name.make();
        let horizon = env.spec().max_episode_steps;
        let ens = self.controller.as_ref().map(|c| &c.ensemble);
        q_diagnostics_probe(&self.agent, ens, env.as_mut(), &refs, horizon, self.t).map(Some)
    }

    /// Run to `total_steps`, writing every artifact into `output_dir`.
    /// Numeric divergence ends the run early with a failure marker and a
    /// `Failed` summary rather than an error.
    pub fn run(&mut self) -> Result<RunSummary> {
        let dir = self.config.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let marker = dir.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        let echo = dir.join(CONFIG_ECHO);
        fs::write(&echo, self.config.to_toml_string()).map_err(|e| Error::io(&echo, e))?;

        let mut metrics = MetricsWriter::create(&dir)?;
        let mut trace = if self.config.trace_correction && self.controller.is_some() {
            let mut w = csv::Writer::from_path(dir.join(TRACE_CSV))?;
            let k = self.agent.spec().action_dim;
            let mut header = vec!["step".to_string()];
            header.extend((0..k).map(|i| format!("zeta_{i}")));
            header.extend((0..k).map(|i| format!("a_e_{i}")));
            header.push("a_e_norm".into());
            w.write_record(&header)?;
            Some(w)
        } else {
            None
        };
        let mut qdiag = Vec::new();
        let start = Instant::now();
        let mut critic_loss = Mean::default();
        let mut controller_loss = Mean::default();
        let mut zeta = Mean::default();
        let mut ae_norm = Mean::default();
        let mut evals = Vec::new();
        let mut failure = None;

        while self.t < self.config.total_steps {
            let report = match self.step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            };
            if let Some(l) = report.critic_loss {
                critic_loss.push(l);
            }
            if let Some(l) = report.controller_loss {
                controller_loss.push(l);
            }
            if let Some(c) = &self.last_correction {
                zeta.push(c.zeta.iter().sum::<f64>() / c.zeta.len() as f64);
                ae_norm.push(c.norm());
                if let Some(w) = trace.as_mut() {
                    let mut row = vec![self.t.to_string()];
                    row.extend(c.zeta.iter().map(f64::to_string));
                    row.extend(c.a_e.iter().map(f64::to_string));
                    row.push(c.norm().to_string());
                    w.write_record(&row)?;
                }
            }
            let t = self.t;
            if self.config.q_probe_interval > 0 && t.is_multiple_of(self.config.q_probe_interval) {
                match self.probe() {
                    Ok(Some(d)) => qdiag.push(d),
                    Ok(None) => {}
                    Err(Error::Unsupported(msg)) => log::warn!("q diagnostics disabled: {msg}"),
                    Err(e @ Error::NonFinite(_)) => {
                        failure = Some(e.to_string());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if t.is_multiple_of(self.config.eval_interval) {
                let (mean, std) = self.evaluate()?;
                let rec = MetricRecord {
                    step: t,
                    eval_return_mean: mean,
                    eval_return_std: std,
                    critic_loss: critic_loss.take(),
                    controller_loss: controller_loss.take(),
                    zeta_mean: zeta.take(),
                    a_e_norm_mean: ae_norm.take(),
                    wall_time_s: self.config.log_wall_time.then(|| start.elapsed().as_secs_f64()),
                };
                log::info!("step {t}: eval {mean:.3} ± {std:.3}");
                metrics.write(&rec)?;
                metrics.flush()?;
                evals.push(rec);
            }
        }
        metrics.flush()?;
        if let Some(mut w) = trace {
            w.flush().map_err(|e| Error::io(dir.join(TRACE_CSV), e))?;
        }
        if self.config.q_probe_interval > 0 {
            write_qdiag_csv(&dir.join(QDIAG_CSV), &qdiag)?;
        }
        if failure.is_none() && self.config.save_snapshots {
            let snap = dir.join("snapshots");
            self.agent.save_snapshots(&snap)?;
            if let Some(dc) = &self.controller {
                for (i, m) in dc.ensemble.members().iter().enumerate() {
                    m.save(&snap.join(format!("ensemble_{i}.txt")))?;
                }
            }
        }
        if let Some(msg) = &failure {
            log::error!("run aborted at step {}: {msg}", self.t);
            fs::write(&marker, format!("step {}: {msg}\n", self.t)).map_err(|e| Error::io(&marker, e))?;
        }

        let summary = RunSummary {
            status: if failure.is_some() {
                RunStatus::Failed
            } else {
                RunStatus::Completed
            },
            error: failure,
            env_name: self.config.env_name,
            agent_name: self.config.agent_name,
            exploration_mode: self.config.exploration_mode.to_string(),
            seed: self.config.seed,
            steps_completed: self.t,
            episodes: self.episodes,
            critic_updates: self.critic_updates,
            policy_updates: self.policy_updates,
            controller_updates: self.controller_updates,
            first_success_step: self.first_success_step,
            final10_mean: crate::harness::metrics::final_mean(&evals, 10),
            best_eval_mean: evals.iter().map(|r| r.eval_return_mean).reduce(f64::max),
            wall_time_s: self.config.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        let path = dir.join(SUMMARY_JSON);
        fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(summary)
    }
}

/// Train per `config`; artifacts land in `config.output_dir`.
pub fn run_training(config: RunConfig) -> Result<RunSummary> {
    Trainer::new(config)?.run()
}

/// Path of the metrics stream a run writes.
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join(crate::harness::metrics::METRICS_JSONL)
}
