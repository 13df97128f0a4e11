//! Hand-computable reference values checked against the implementation.
//! Backs the `test-oracles` subcommand.

use ndarray::{array, Array2};
use rand::Rng as _;

use crate::agent::OUState;
use crate::controller::{epsilon_init, population_variance, Ensemble, ScalingState};
use crate::envs::{EnvSpec, Environment, PendulumSwingup};
use crate::error::Result;
use crate::numcore::{AdamState, Dense, MlpParams, OutputHead};
use crate::replay::{compute_returns, RingBuffer};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub computed: Vec<f64>,
    pub expected: Vec<f64>,
    pub tolerance: f64,
}

impl OracleCheck {
    fn new(name: &'static str, computed: Vec<f64>, expected: Vec<f64>, tolerance: f64) -> Self {
        Self {
            name,
            computed,
            expected,
            tolerance,
        }
    }

    pub fn max_error(&self) -> f64 {
        if self.computed.len() != self.expected.len() {
            return f64::INFINITY;
        }
        self.computed
            .iter()
            .zip(&self.expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }
}

#[allow(clippy::needless_range_loop)]
fn naive_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = p.layers().len();
    for (li, l) in p.layers().iter().enumerate() {
        let (fan_in, fan_out) = l.weight.dim();
        let mut out = vec![0.0; fan_out];
        for j in 0..fan_out {
            let mut acc = l.bias[j];
            for i in 0..fan_in {
                acc += h[i] * l.weight[[i, j]];
            }
            out[j] = if li + 1 < n { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    h
}

fn forward_vs_naive() -> Result<OracleCheck> {
    let p = MlpParams::init(&[5, 7, 6, 3], 17)?;
    let mut rng = stream(17, Stream::Diagnostics);
    let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Ok(OracleCheck::new(
        "mlp forward vs triple loop",
        p.forward(&x, &OutputHead::Identity)?,
        naive_forward(&p, &x),
        1e-10,
    ))
}

fn input_grad_vs_fd() -> Result<OracleCheck> {
    let p = MlpParams::init(&[4, 16, 16, 1], 5)?;
    let x = [0.3, -0.7, 0.2, 0.9];
    let g = p.grad_input(&x, &OutputHead::Identity)?;
    let h = 1e-5;
    let fd = (0..4)
        .map(|i| {
            let mut up = x;
            let mut dn = x;
            up[i] += h;
            dn[i] -= h;
            let f = |v: &[f64]| p.forward(v, &OutputHead::Identity).map(|o| o[0]);
            Ok((f(&up)? - f(&dn)?) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(OracleCheck::new(
        "mlp input gradient vs central differences",
        g,
        fd,
        1e-6,
    ))
}

fn adam_first_step() -> Result<OracleCheck> {
    let mut p = MlpParams::from_layers(vec![Dense {
        weight: Array2::zeros((1, 1)),
        bias: array![0.0],
    }])?;
    let mut g = p.zero_grads();
    g.layers[0].bias[0] = 1.0;
    let mut opt = AdamState::new(&p, 3e-4);
    opt.step(&mut p, &g)?;
    // m̂ = 1, v̂ = 1
    Ok(OracleCheck::new(
        "adam first step with g=1",
        vec![p.layers()[0].bias[0]],
        vec![-3e-4 / (1.0 + 1e-8)],
        1e-15,
    ))
}

fn pendulum_euler_step() -> Result<OracleCheck> {
    let mut env = PendulumSwingup::new();
    env.reset(0);
    env.set_state_from_observation(&[-1.0, 0.0, 0.0])?;
    env.step(&[1.0])?;
    Ok(OracleCheck::new(
        "pendulum Euler step from the bottom, a=1",
        vec![env.angular_velocity(), env.angle()],
        vec![0.3, std::f64::consts::PI + 0.015],
        1e-12,
    ))
}

fn returns_examples() -> OracleCheck {
    let mut computed = compute_returns(&[1.0, 1.0, 1.0], 0.5);
    computed.extend(compute_returns(&[0.0, 0.0, 0.0, 1.0], 0.9));
    OracleCheck::new(
        "discounted returns",
        computed,
        vec![1.75, 1.5, 1.0, 0.729, 0.81, 0.9, 1.0],
        1e-12,
    )
}

fn uniform_sampling() -> OracleCheck {
    let mut buf = RingBuffer::new(10);
    for i in 0..10usize {
        buf.push(i);
    }
    let mut rng = stream(3, Stream::Sampling);
    let mut counts = [0.0; 10];
    let draws = 100_000;
    for _ in 0..draws / 10 {
        for &i in buf.sample_uniform(10, &mut rng).expect("full buffer") {
            counts[i] += 1.0;
        }
    }
    // z-scores against Binomial(draws, 1/10)
    let sd = (draws as f64 * 0.1 * 0.9).sqrt();
    let z: Vec<f64> = counts.iter().map(|c| (c - draws as f64 * 0.1) / sd).collect();
    OracleCheck::new("replay sampling z-scores", z, vec![0.0; 10], 5.0)
}

fn variance_example() -> OracleCheck {
    OracleCheck::new(
        "population variance of {1,2,3}",
        vec![population_variance(&[1.0, 2.0, 3.0])],
        vec![2.0 / 3.0],
        1e-15,
    )
}

fn linear(w: &[f64]) -> Result<MlpParams> {
    MlpParams::from_layers(vec![Dense {
        weight: Array2::from_shape_vec((w.len(), 1), w.to_vec()).expect("column"),
        bias: array![0.0],
    }])
}

fn two_linear_members() -> Result<OracleCheck> {
    // zero-dimensional state so the input is the action itself
    let w1 = [1.0, -2.0];
    let w2 = [0.5, 1.0];
    let ens = Ensemble::from_members(vec![linear(&w1)?, linear(&w2)?], 0, 1e-3)?;
    let a = [0.4, -0.3];
    let d = [w1[0] - w2[0], w1[1] - w2[1]];
    let proj = d[0] * a[0] + d[1] * a[1];
    Ok(OracleCheck::new(
        "variance gradient of two linear members",
        ens.uncertainty_grad(&[], &a)?,
        vec![proj * d[0] / 2.0, proj * d[1] / 2.0],
        1e-14,
    ))
}

fn epsilon_examples() -> OracleCheck {
    let one = EnvSpec {
        obs_dim: 1,
        action_dim: 1,
        action_low: vec![-1.0],
        action_high: vec![1.0],
        max_episode_steps: 1,
    };
    let two = EnvSpec {
        action_dim: 2,
        action_low: vec![-1.0, -1.0],
        action_high: vec![1.0, 1.0],
        ..one.clone()
    };
    // E‖a‖ on [−1,1]² = (√2 + asinh 1)/3
    let exact2 = (2f64.sqrt() + 1f64.asinh()) / 3.0;
    OracleCheck::new(
        "mean action norm over the box (1-D, 2-D)",
        vec![epsilon_init(&one, 0, 0), epsilon_init(&two, 1_000_000, 7)],
        vec![0.5, exact2],
        1e-2,
    )
}

fn correction_with_unit_zeta() -> Result<OracleCheck> {
    let ens = Ensemble::from_members(vec![linear(&[1.0])?, linear(&[-1.0])?], 0, 1e-3)?;
    let mut scaling = ScalingState::new(1, 10, 0.5)?;
    // the first call is in warm-up, so ζ = 1
    let c = crate::controller::exploratory_correction(&ens, &mut scaling, &[], &[0.3])?;
    Ok(OracleCheck::new(
        "|a_e| with ζ=1 on [−1,1]",
        vec![c.norm()],
        vec![0.5],
        1e-12,
    ))
}

fn ou_recurrence() -> OracleCheck {
    let mut ou = OUState::new(1, 0.15, 0.0);
    ou.x[0] = 1.0;
    let mut rng = stream(0, Stream::Exploration);
    let x1 = ou.step(&mut rng)[0];
    OracleCheck::new("OU step with σ=0 from x=1", vec![x1], vec![0.85], 1e-15)
}

/// Every oracle in a fixed order.
pub fn run_all() -> Result<Vec<OracleCheck>> {
    Ok(vec![
        forward_vs_naive()?,
        input_grad_vs_fd()?,
        adam_first_step()?,
        pendulum_euler_step()?,
        returns_examples(),
        uniform_sampling(),
        variance_example(),
        two_linear_members()?,
        epsilon_examples(),
        correction_with_unit_zeta()?,
        ou_recurrence(),
    ])
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_oracles_pass() {
        for c in super::run_all().unwrap() {
            assert!(c.passed(), "{}: {:?} vs {:?}", c.name, c.computed, c.expected);
        }
    }
}
