//! Deterministic continuous-control environments.
//!
//! Environments are immutable: `step` is a pure function of the state and
//! action, and `reset` is a pure function of the seed. Dimensions, bounds and
//! physical constants come from `registry/envs.toml`, compiled into the crate.
//!
//! Episode horizons (`max_steps`) are enforced by the rollout loop; the
//! `terminal` flag of a [`Transition`] reports failure conditions only.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng;

const REGISTRY: &str = include_str!("../registry/envs.toml");

pub const ENV_NAMES: [&str; 3] = ["point_mass_1d", "cartpole", "pendulum"];

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_steps: usize,
    pub state_low: Vec<f64>,
    pub state_high: Vec<f64>,
}

impl EnvSpec {
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    pub fn action_range(&self) -> Vec<f64> {
        self.action_high
            .iter()
            .zip(&self.action_low)
            .map(|(h, l)| h - l)
            .collect()
    }

    pub fn contains_state(&self, state: &[f64]) -> bool {
        state.len() == self.state_dim
            && state
                .iter()
                .zip(self.state_low.iter().zip(&self.state_high))
                .all(|(s, (lo, hi))| *lo <= *s && *s <= *hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Failure condition reached.
    pub terminal: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    fn reset(&self, seed: u64) -> Vec<f64>;

    /// Advances one step. The action is clipped to the action box first.
    fn step(&self, state: &[f64], action: &[f64]) -> Result<Transition>;
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryEntry {
    state_dim: usize,
    action_dim: usize,
    max_steps: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    state_low: Vec<f64>,
    state_high: Vec<f64>,
    #[serde(default)]
    reset_low: Option<Vec<f64>>,
    #[serde(default)]
    reset_high: Option<Vec<f64>>,
    constants: BTreeMap<String, f64>,
}

impl RegistryEntry {
    fn constant(&self, name: &str, key: &str) -> Result<f64> {
        self.constants
            .get(key)
            .copied()
            .ok_or_else(|| Error::Config(format!("registry entry `{name}` lacks constant `{key}`")))
    }

    fn spec(&self, name: &str) -> Result<EnvSpec> {
        let bad = |what: &str| Error::Config(format!("registry entry `{name}`: {what}"));
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(bad("action bounds do not match action_dim"));
        }
        if self.state_low.len() != self.state_dim || self.state_high.len() != self.state_dim {
            return Err(bad("state bounds do not match state_dim"));
        }
        if self.max_steps == 0 {
            return Err(bad("max_steps must be at least 1"));
        }
        let ordered = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).all(|(l, h)| l < h);
        if !ordered(&self.action_low, &self.action_high)
            || !ordered(&self.state_low, &self.state_high)
        {
            return Err(bad("lower bounds must be strictly below upper bounds"));
        }
        Ok(EnvSpec {
            name: name.to_string(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
            max_steps: self.max_steps,
            state_low: self.state_low.clone(),
            state_high: self.state_high.clone(),
        })
    }

    fn reset_box(&self, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        match (&self.reset_low, &self.reset_high) {
            (Some(lo), Some(hi)) if lo.len() == self.state_dim && hi.len() == self.state_dim => {
                Ok((lo.clone(), hi.clone()))
            }
            _ => Err(Error::Config(format!(
                "registry entry `{name}` lacks a reset box"
            ))),
        }
    }
}

fn load_registry() -> Result<BTreeMap<String, RegistryEntry>> {
    toml::from_str(REGISTRY).map_err(|e| Error::Config(format!("environment registry: {e}")))
}

/// Builds a registered environment by name.
pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    let registry = load_registry()?;
    let entry = registry
        .get(name)
        .ok_or_else(|| Error::UnknownEnv(name.to_string()))?;
    let spec = entry.spec(name)?;
    match name {
        "point_mass_1d" => {
            let (reset_low, reset_high) = entry.reset_box(name)?;
            Ok(Box::new(PointMass1d {
                spec,
                reset_low,
                reset_high,
                dt: entry.constant(name, "dt")?,
                action_cost: entry.constant(name, "action_cost")?,
                divergence_bound: entry.constant(name, "divergence_bound")?,
            }))
        }
        "cartpole" => {
            let (reset_low, reset_high) = entry.reset_box(name)?;
            Ok(Box::new(CartPole {
                spec,
                reset_low,
                reset_high,
                dt: entry.constant(name, "dt")?,
                gravity: entry.constant(name, "gravity")?,
                cart_mass: entry.constant(name, "cart_mass")?,
                pole_mass: entry.constant(name, "pole_mass")?,
                pole_half_length: entry.constant(name, "pole_half_length")?,
                force_scale: entry.constant(name, "force_scale")?,
                x_limit: entry.constant(name, "x_limit")?,
                theta_limit: entry.constant(name, "theta_limit")?,
                divergence_bound: entry.constant(name, "divergence_bound")?,
            }))
        }
        "pendulum" => Ok(Box::new(Pendulum {
            spec,
            dt: entry.constant(name, "dt")?,
            gravity: entry.constant(name, "gravity")?,
            mass: entry.constant(name, "mass")?,
            length: entry.constant(name, "length")?,
            max_speed: entry.constant(name, "max_speed")?,
            velocity_cost: entry.constant(name, "velocity_cost")?,
            torque_cost: entry.constant(name, "torque_cost")?,
            init_angle: entry.constant(name, "init_angle")?,
            init_speed: entry.constant(name, "init_speed")?,
        })),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

fn uniform_in_box(seed: u64, low: &[f64], high: &[f64]) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    low.iter()
        .zip(high)
        .map(|(l, h)| l + (h - l) * rng.random::<f64>())
        .collect()
}

fn check_state(spec: &EnvSpec, state: &[f64]) -> Result<()> {
    crate::error::check_len("environment state", spec.state_dim, state.len())?;
    if state.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{}: non-finite state", spec.name)))
    }
}

fn check_action(spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>> {
    crate::error::check_len("environment action", spec.action_dim, action.len())?;
    if !action.iter().all(|a| a.is_finite()) {
        return Err(Error::NonFinite("environment action"));
    }
    Ok(spec.clip_action(action))
}

fn finish(
    spec: &EnvSpec,
    next_state: Vec<f64>,
    reward: f64,
    terminal: bool,
    bound: f64,
) -> Result<Transition> {
    if !reward.is_finite() || next_state.iter().any(|s| !s.is_finite() || s.abs() > bound) {
        return Err(Error::Diverged(format!(
            "{}: state left the finite range",
            spec.name
        )));
    }
    Ok(Transition {
        next_state,
        reward,
        terminal,
    })
}

/// Double integrator `x'' = a` with cost `x^2 + c a^2`.
#[derive(Clone, Debug)]
pub struct PointMass1d {
    spec: EnvSpec,
    reset_low: Vec<f64>,
    reset_high: Vec<f64>,
    dt: f64,
    action_cost: f64,
    divergence_bound: f64,
}

impl Environment for PointMass1d {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        uniform_in_box(seed, &self.reset_low, &self.reset_high)
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Result<Transition> {
        check_state(&self.spec, state)?;
        let a = check_action(&self.spec, action)?[0];
        let (x, v) = (state[0], state[1]);
        let reward = -x * x - self.action_cost * a * a;
        let next = vec![x + self.dt * v, v + self.dt * a];
        finish(&self.spec, next, reward, false, self.divergence_bound)
    }
}

/// Cart-pole with a continuous force `action * force_scale`, reward 1 per
/// surviving step.
#[derive(Clone, Debug)]
pub struct CartPole {
    spec: EnvSpec,
    reset_low: Vec<f64>,
    reset_high: Vec<f64>,
    dt: f64,
    gravity: f64,
    cart_mass: f64,
    pole_mass: f64,
    pole_half_length: f64,
    force_scale: f64,
    x_limit: f64,
    theta_limit: f64,
    divergence_bound: f64,
}

impl CartPole {
    pub fn is_failure(&self, state: &[f64]) -> bool {
        state[0].abs() > self.x_limit || state[2].abs() > self.theta_limit
    }
}

impl Environment for CartPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        uniform_in_box(seed, &self.reset_low, &self.reset_high)
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Result<Transition> {
        check_state(&self.spec, state)?;
        let force = check_action(&self.spec, action)?[0] * self.force_scale;
        let (x, x_dot, theta, theta_dot) = (state[0], state[1], state[2], state[3]);
        let total_mass = self.cart_mass + self.pole_mass;
        let pole_moment = self.pole_mass * self.pole_half_length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_moment * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (self.gravity * sin - cos * temp)
            / (self.pole_half_length * (4.0 / 3.0 - self.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pole_moment * theta_acc * cos / total_mass;
        let next = vec![
            x + self.dt * x_dot,
            x_dot + self.dt * x_acc,
            theta + self.dt * theta_dot,
            theta_dot + self.dt * theta_acc,
        ];
        let terminal = self.is_failure(&next);
        finish(&self.spec, next, 1.0, terminal, self.divergence_bound)
    }
}

/// Torque-limited pendulum swing-up observed as `(cos, sin, angular velocity)`.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    dt: f64,
    gravity: f64,
    mass: f64,
    length: f64,
    max_speed: f64,
    velocity_cost: f64,
    torque_cost: f64,
    init_angle: f64,
    init_speed: f64,
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        let theta = self.init_angle * (2.0 * rng.random::<f64>() - 1.0);
        let speed = self.init_speed * (2.0 * rng.random::<f64>() - 1.0);
        vec![theta.cos(), theta.sin(), speed]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Result<Transition> {
        check_state(&self.spec, state)?;
        let u = check_action(&self.spec, action)?[0];
        let theta = state[1].atan2(state[0]);
        let speed = state[2];
        let angle = wrap_angle(theta);
        let reward =
            -(angle * angle + self.velocity_cost * speed * speed + self.torque_cost * u * u);
        let acc = 3.0 * self.gravity / (2.0 * self.length) * theta.sin()
            + 3.0 / (self.mass * self.length * self.length) * u;
        let next_theta = theta + self.dt * speed;
        let next_speed = (speed + self.dt * acc).clamp(-self.max_speed, self.max_speed);
        let next = vec![next_theta.cos(), next_theta.sin(), next_speed];
        finish(&self.spec, next, reward, false, f64::MAX)
    }
}
