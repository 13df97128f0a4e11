//! Q-value probes and action-plane surface dumps.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::controller::Ensemble;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::harness::metrics::QDiagnostics;
use crate::replay::Transition;

/// Means over `batch` of the critic, of a discounted rollout of the current
/// deterministic policy after replaying `(s, a)`, and of the ensemble.
///
/// Rollouts stop at termination or after `rollout_horizon` steps, whichever
/// comes first, so `q_true_mean` is biased low for long-horizon tasks.
pub fn q_diagnostics_probe(
    agent: &Agent,
    ensemble: Option<&Ensemble>,
    env: &mut dyn Environment,
    batch: &[&Transition],
    rollout_horizon: usize,
    step: usize,
) -> Result<QDiagnostics> {
    if batch.is_empty() {
        return Err(Error::Input("q probe needs a non-empty batch".into()));
    }
    if !env.supports_state_injection() {
        return Err(Error::Unsupported(format!(
            "{} does not support state injection",
            env.name()
        )));
    }
    let obs_dim = agent.spec().obs_dim;
    let act_dim = agent.spec().action_dim;
    let n = batch.len();
    let mut states = Array2::zeros((n, obs_dim));
    let mut actions = Array2::zeros((n, act_dim));
    for (i, t) in batch.iter().enumerate() {
        states.row_mut(i).assign(&ndarray::ArrayView1::from(&t.state[..]));
        actions.row_mut(i).assign(&ndarray::ArrayView1::from(&t.action[..]));
    }
    let q_td = agent.q_values(0, states.view(), actions.view())?.mean().unwrap_or(0.0);
    let q_mc = match ensemble {
        Some(e) => Some(e.mean_batch(states.view(), actions.view())?.mean().unwrap_or(0.0)),
        None => None,
    };

    let gamma = agent.config().gamma;
    let mut total = 0.0;
    for t in batch {
        total += discounted_rollout(agent, env, &t.state, &t.action, gamma, rollout_horizon)?;
    }
    let out = QDiagnostics {
        step,
        q_td_mean: q_td,
        q_true_mean: total / n as f64,
        q_mc_mean: q_mc,
    };
    if !(out.q_td_mean.is_finite() && out.q_true_mean.is_finite() && out.q_mc_mean.is_none_or(f64::is_finite)) {
        return Err(Error::NonFinite("q diagnostics"));
    }
    Ok(out)
}

/// `r₀ + γr₁ + …` from state `s` taking `a` first and the eval policy after.
pub fn discounted_rollout(
    agent: &Agent,
    env: &mut dyn Environment,
    state: &[f64],
    action: &[f64],
    gamma: f64,
    horizon: usize,
) -> Result<f64> {
    env.set_state_from_observation(state)?;
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut a = action.to_vec();
    for _ in 0..horizon {
        let res = env.step(&a)?;
        ret += discount * res.reward;
        discount *= gamma;
        if res.done() {
            break;
        }
        a = agent.select_action_eval(&res.observation)?;
    }
    Ok(ret)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub a1: f64,
    pub a2: f64,
    pub psi: f64,
    pub q: f64,
}

/// `r` evenly spaced points from `lo` to `hi` inclusive.
fn lattice(lo: f64, hi: f64, r: usize) -> Vec<f64> {
    if r == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..r).map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64).collect()
}

/// `ψ(s, a)` and `Q(s, a)` on an `r × r` lattice over the action box,
/// `a₁` varying slowest.
pub fn surface_dump(agent: &Agent, ensemble: &Ensemble, state: &[f64], resolution: usize) -> Result<Vec<SurfaceRow>> {
    let spec = agent.spec();
    if spec.action_dim != 2 {
        return Err(Error::Unsupported(format!(
            "surface dump needs a 2-D action space, got {}",
            spec.action_dim
        )));
    }
    if resolution == 0 {
        return Err(Error::Input("grid resolution must be positive".into()));
    }
    let xs = lattice(spec.action_low[0], spec.action_high[0], resolution);
    let ys = lattice(spec.action_low[1], spec.action_high[1], resolution);
    let n = resolution * resolution;
    let mut states = Array2::zeros((n, spec.obs_dim));
    let mut actions = Array2::zeros((n, 2));
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            let k = i * resolution + j;
            states.row_mut(k).assign(&ndarray::ArrayView1::from(state));
            actions[[k, 0]] = *x;
            actions[[k, 1]] = *y;
        }
    }
    let preds = ensemble.predict_batch(states.view(), actions.view())?;
    let q = agent.q_values(0, states.view(), actions.view())?;
    Ok((0..n)
        .map(|k| {
            let row: Vec<f64> = preds.row(k).to_vec();
            SurfaceRow {
                a1: actions[[k, 0]],
                a2: actions[[k, 1]],
                psi: crate::controller::population_variance(&row),
                q: q[k],
            }
        })
        .collect())
}

pub fn write_surface_csv(path: &Path, rows: &[SurfaceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_qdiag_csv(path: &Path, rows: &[QDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "q_td_mean", "q_true_mean", "q_mc_mean"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.q_td_mean.to_string(),
            r.q_true_mean.to_string(),
            r.q_mc_mean.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentConfig, AgentKind};
    use crate::envs::{EnvName, PointMass2D};
    use crate::numcore::MlpParams;
    use crate::rng::{stream, Stream};

    fn small_agent(env: EnvName, gamma: f64) -> Agent {
        let cfg = AgentConfig {
            hidden_sizes: vec![8],
            gamma,
            ..AgentConfig::default()
        };
        Agent::new(AgentKind::Mocco, cfg, env.make().spec().clone(), 3).unwrap()
    }

    fn sample_transitions(env: EnvName, n: usize) -> Vec<Transition> {
        let mut e = env.make();
        let mut rng = stream(1, Stream::Diagnostics);
        let mut s = e.reset(5);
        let agent = small_agent(env, 0.99);
        (0..n)
            .map(|_| {
                let a = agent.random_action(&mut rng);
                let r = e.step(&a).unwrap();
                let t = Transition {
                    state: s.clone(),
                    action: a,
                    reward: r.reward,
                    next_state: r.observation.clone(),
                    done: r.terminated,
                };
                s = r.observation;
                t
            })
            .collect()
    }

    #[test]
    fn zero_critic_gives_zero_q_td() {
        let mut agent = small_agent(EnvName::PointMass, 0.99);
        let sizes = agent.critics[0].layer_sizes().to_vec();
        agent.critics[0] = MlpParams::zeros(&sizes).unwrap();
        let ts = sample_transitions(EnvName::PointMass, 6);
        let refs: Vec<&Transition> = ts.iter().collect();
        let mut env = EnvName::PointMass.make();
        let d = q_diagnostics_probe(&agent, None, env.as_mut(), &refs, 250, 0).unwrap();
        assert_eq!(d.q_td_mean, 0.0);
        assert_eq!(d.q_mc_mean, None);
    }

    #[test]
    fn gamma_zero_gives_immediate_reward() {
        for name in EnvName::ALL {
            let agent = small_agent(name, 0.0);
            let ts = sample_transitions(name, 10);
            let refs: Vec<&Transition> = ts.iter().collect();
            let mut env = name.make();
            let d = q_diagnostics_probe(&agent, None, env.as_mut(), &refs, 1000, 0).unwrap();
            let mean_r = ts.iter().map(|t| t.reward).sum::<f64>() / ts.len() as f64;
            assert!(
                (d.q_true_mean - mean_r).abs() < 1e-12,
                "{name}: {} vs {mean_r}",
                d.q_true_mean
            );
        }
    }

    #[test]
    fn rollout_is_capped_by_horizon() {
        let agent = small_agent(EnvName::PointMass, 1.0);
        let mut env = PointMass2D::new();
        env.reset(0);
        // at most one unit of reward per step
        let g = discounted_rollout(&agent, &mut env, &[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0], 1.0, 7).unwrap();
        assert!(g <= 7.0 + 1e-12 && g > 0.0);
    }

    fn ensemble(identical: bool) -> Ensemble {
        let e = Ensemble::new(4, 2, &[8], 3, 1e-3, 11).unwrap();
        if identical {
            let m = e.members()[0].clone();
            Ensemble::from_members(vec![m.clone(), m.clone(), m], 4, 1e-3).unwrap()
        } else {
            e
        }
    }

    #[test]
    fn surface_has_r_squared_rows_and_zero_psi_for_clones() {
        let agent = small_agent(EnvName::PointMass, 0.99);
        let rows = surface_dump(&agent, &ensemble(true), &[0.1, -0.1, 0.0, 0.0], 7).unwrap();
        assert_eq!(rows.len(), 49);
        assert!(rows.iter().all(|r| r.psi == 0.0));
        assert_eq!((rows[0].a1, rows[0].a2), (-1.0, -1.0));
        assert_eq!((rows[48].a1, rows[48].a2), (1.0, 1.0));
    }

    #[test]
    fn surface_argmax_matches_brute_force() {
        let agent = small_agent(EnvName::PointMass, 0.99);
        let ens = ensemble(false);
        let s = [0.1, -0.2, 0.3, 0.0];
        let r = 9;
        let rows = surface_dump(&agent, &ens, &s, r).unwrap();
        let best = rows
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.psi.total_cmp(&b.1.psi))
            .unwrap()
            .0;
        let mut brute = (0, f64::NEG_INFINITY);
        for i in 0..r {
            for j in 0..r {
                let a = [-1.0 + 2.0 * i as f64 / 8.0, -1.0 + 2.0 * j as f64 / 8.0];
                let u = ens.uncertainty(&s, &a).unwrap();
                if u > brute.1 {
                    brute = (i * r + j, u);
                }
            }
        }
        assert_eq!(best, brute.0);
        assert!((rows[best].psi - brute.1).abs() < 1e-12);
    }

    #[test]
    fn surface_rejects_1d_actions() {
        let agent = small_agent(EnvName::PendulumSwingup, 0.99);
        let ens = Ensemble::new(3, 1, &[8], 3, 1e-3, 0).unwrap();
        assert!(matches!(
            surface_dump(&agent, &ens, &[1.0, 0.0, 0.0], 5),
            Err(Error::Unsupported(_))
        ));
    }
}
