//! 2-D point-mass velocity-tracking task: the smallest environment that
//! exercises the full PPO path (Gaussian head, GAE, clipped update).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Mlp, ParameterStore, Tape, Var};
use crate::tensor::Tensor;

pub const TOY_OBS_DIM: usize = 4;
pub const TOY_ACTION_DIM: usize = 2;
const TOY_DT: f64 = 0.05;
const TOY_EPISODE_STEPS: usize = 100;

/// Mean/value networks over [velocity (2), command (2)].
pub struct ToyPolicy {
    mean: Mlp,
    value: Mlp,
}

impl Default for ToyPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyPolicy {
    pub fn new() -> Self {
        ToyPolicy {
            mean: Mlp::new("toy.mean", &[TOY_OBS_DIM, 64, 64, TOY_ACTION_DIM]).with_out_gain(0.01),
            value: Mlp::new("toy.value", &[TOY_OBS_DIM, 64, 64, 1]),
        }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.mean.register(store, rng)?;
        store.add("toy.log_std", Tensor::new(vec![1, TOY_ACTION_DIM], vec![0.0; 2])?)?;
        self.value.register(store, rng)
    }

    pub fn action_dist(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        obs: Var,
    ) -> Result<(Var, Var)> {
        let mean = self.mean.forward(tape, store, obs)?;
        let raw = tape.param(store, "toy.log_std");
        let log_std = tape.clamp(raw, -4.0, 1.0);
        Ok((mean, log_std))
    }

    pub fn value(&self, tape: &mut Tape, store: &ParameterStore, obs: Var) -> Result<Var> {
        self.value.forward(tape, store, obs)
    }
}

struct ToyEnv {
    vel: [f64; 2],
    cmd: [f64; 2],
    steps: usize,
    rng: ChaCha8Rng,
}

impl ToyEnv {
    fn new(seed: u64) -> Self {
        let mut env = ToyEnv {
            vel: [0.0; 2],
            cmd: [0.0; 2],
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset();
        env
    }

    fn reset(&mut self) {
        self.vel = [0.0; 2];
        self.cmd = [
            self.rng.gen_range(-1.0..=1.0),
            self.rng.gen_range(-1.0..=1.0),
        ];
        self.steps = 0;
    }

    fn obs(&self) -> [f32; TOY_OBS_DIM] {
        [
            self.vel[0] as f32,
            self.vel[1] as f32,
            self.cmd[0] as f32,
            self.cmd[1] as f32,
        ]
    }

    /// Accelerate under drag; reward is the tracking kernel exp(-4 e^2).
    fn step(&mut self, action: &[f32]) -> (f64, bool) {
        for j in 0..2 {
            let a = (action[j] as f64).clamp(-4.0, 4.0);
            self.vel[j] += (2.0 * a - 0.8 * self.vel[j]) * TOY_DT;
        }
        let e2 = (self.vel[0] - self.cmd[0]).powi(2) + (self.vel[1] - self.cmd[1]).powi(2);
        let reward = (-4.0 * e2).exp();
        self.steps += 1;
        let done = self.steps >= TOY_EPISODE_STEPS;
        if done {
            self.reset();
        }
        (reward, done)
    }
}

pub struct ToyRunStats {
    pub mean_reward_per_iter: Vec<f64>,
}

/// Train the toy task; returns per-iteration mean step reward (max 1.0).
pub fn train_toy(seed: u64, num_envs: usize, iterations: usize) -> Result<ToyRunStats> {
    use crate::ppo::{
        gaussian_log_prob, gaussian_sample, ppo_update, ActorCritic, PpoConfig, RolloutBuffer,
    };

    let cfg = PpoConfig {
        horizon: 24,
        ..Default::default()
    };
    let policy = ToyPolicy::new();
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    policy.register(&mut store, &mut rng)?;
    let mut envs: Vec<ToyEnv> = (0..num_envs)
        .map(|i| ToyEnv::new(seed.wrapping_mul(977).wrapping_add(i as u64)))
        .collect();
    let mut lr = cfg.lr_init;
    let mut stats = ToyRunStats {
        mean_reward_per_iter: Vec::with_capacity(iterations),
    };

    for _iter in 0..iterations {
        let mut buffer = RolloutBuffer::new(cfg.horizon, num_envs, TOY_OBS_DIM, 0, TOY_ACTION_DIM);
        let mut reward_acc = 0.0;
        for step in 0..cfg.horizon {
            let mut obs = vec![0.0f32; num_envs * TOY_OBS_DIM];
            for (i, env) in envs.iter().enumerate() {
                obs[i * TOY_OBS_DIM..(i + 1) * TOY_OBS_DIM].copy_from_slice(&env.obs());
            }
            let obs_t = Tensor::new(vec![num_envs, TOY_OBS_DIM], obs.clone())?;
            let mut tape = Tape::new();
            let actor = ActorCritic::Toy(&policy);
            let (mean, log_std, value) = actor.forward(&mut tape, &store, &obs_t, None)?;
            let mean_v = tape.value(mean).data().to_vec();
            let ls_v = tape.value(log_std).data().to_vec();
            let val_v = tape.value(value).data().to_vec();

            let mut actions = vec![0.0f32; num_envs * TOY_ACTION_DIM];
            let mut logps = vec![0.0f64; num_envs];
            let mut rewards = vec![0.0f64; num_envs];
            let mut dones = vec![false; num_envs];
            for i in 0..num_envs {
                let m = &mean_v[i * TOY_ACTION_DIM..(i + 1) * TOY_ACTION_DIM];
                let a = gaussian_sample(m, &ls_v, &mut rng);
                logps[i] = gaussian_log_prob(m, &ls_v, &a);
                let (r, d) = envs[i].step(&a);
                rewards[i] = r;
                dones[i] = d;
                reward_acc += r;
                actions[i * TOY_ACTION_DIM..(i + 1) * TOY_ACTION_DIM].copy_from_slice(&a);
            }
            let values: Vec<f64> = val_v.iter().map(|v| *v as f64).collect();
            buffer.log_std = ls_v.clone();
            buffer.push_step(
                step, &obs, &[], &actions, &mean_v, &logps, &values, &rewards, &dones,
            );
        }
        // bootstrap values for the step after the horizon
        let mut obs = vec![0.0f32; num_envs * TOY_OBS_DIM];
        for (i, env) in envs.iter().enumerate() {
            obs[i * TOY_OBS_DIM..(i + 1) * TOY_OBS_DIM].copy_from_slice(&env.obs());
        }
        let obs_t = Tensor::new(vec![num_envs, TOY_OBS_DIM], obs)?;
        let mut tape = Tape::new();
        let actor = ActorCritic::Toy(&policy);
        let (_, _, value) = actor.forward(&mut tape, &store, &obs_t, None)?;
        for (i, v) in tape.value(value).data().iter().enumerate() {
            buffer.bootstrap[i] = *v as f64;
        }
        buffer.finalize(cfg.gamma, cfg.lam)?;
        let actor = ActorCritic::Toy(&policy);
        ppo_update(&buffer, &actor, &mut store, &cfg, &mut lr, &mut rng)?;
        stats
            .mean_reward_per_iter
            .push(reward_acc / (num_envs * cfg.horizon) as f64);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_task_learns_velocity_tracking_quickly() {
        let stats = train_toy(1, 16, 60).unwrap();
        let early: f64 = stats.mean_reward_per_iter[..5].iter().sum::<f64>() / 5.0;
        let late: f64 = stats.mean_reward_per_iter[55..].iter().sum::<f64>() / 5.0;
        assert!(
            late > early + 0.1,
            "no learning: early {early:.3} late {late:.3}"
        );
    }
}
