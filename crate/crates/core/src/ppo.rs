//! Proximal Policy Optimization with generalized advantage estimation over
//! parallel-environment rollouts, for the teacher phase (and the Blind
//! baseline, and a small toy task that exercises the same action-head
//! machinery end to end).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ParameterStore, Tape, Var};
use crate::policy::{BlindPolicy, TeacherPolicy};
use crate::tensor::Tensor;

pub mod toy;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f32,
    pub gamma: f64,
    pub lam: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f32,
    pub value_coef: f32,
    pub lr_init: f32,
    pub lr_min: f32,
    pub lr_max: f32,
    pub kl_target: f64,
    pub grad_clip: f64,
    pub horizon: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 0.99,
            lam: 0.95,
            epochs: 5,
            minibatches: 4,
            entropy_coef: 0.005,
            value_coef: 1.0,
            lr_init: 1e-3,
            lr_min: 1e-6,
            lr_max: 5e-3,
            kl_target: 0.01,
            grad_clip: 1.0,
            horizon: 24,
        }
    }
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian helpers (plain-array side, used at rollout time)
// ---------------------------------------------------------------------------

pub fn gaussian_sample(mean: &[f32], log_std: &[f32], rng: &mut impl Rng) -> Vec<f32> {
    mean.iter()
        .enumerate()
        .map(|(j, m)| {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            m + (log_std[j % log_std.len()].exp() as f64 * eps) as f32
        })
        .collect()
}

/// Log density of a diagonal Gaussian at `action`.
pub fn gaussian_log_prob(mean: &[f32], log_std: &[f32], action: &[f32]) -> f64 {
    let d = mean.len();
    let mut acc = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    for j in 0..d {
        let ls = log_std[j % log_std.len()] as f64;
        let sigma = ls.exp();
        let z = (action[j] as f64 - mean[j] as f64) / sigma;
        acc -= 0.5 * z * z + ls;
    }
    acc
}

/// KL(old || new) for diagonal Gaussians.
pub fn gaussian_kl(
    mean_old: &[f32],
    log_std_old: &[f32],
    mean_new: &[f32],
    log_std_new: &[f32],
) -> f64 {
    let d = mean_old.len();
    let mut acc = 0.0;
    for j in 0..d {
        let ls1 = log_std_old[j % log_std_old.len()] as f64;
        let ls2 = log_std_new[j % log_std_new.len()] as f64;
        let s1 = ls1.exp();
        let s2 = ls2.exp();
        let dm = mean_old[j] as f64 - mean_new[j] as f64;
        acc += ls2 - ls1 + (s1 * s1 + dm * dm) / (2.0 * s2 * s2) - 0.5;
    }
    acc
}

// ---------------------------------------------------------------------------
// Tape composites
// ---------------------------------------------------------------------------

/// (B x 1) log probability of constant `actions` under the tracked mean and
/// (1 x D) log_std.
pub fn log_prob_var(
    tape: &mut Tape,
    mean: Var,
    log_std: Var,
    actions: &Tensor,
) -> Result<Var> {
    let d = actions.cols();
    let a = tape.input(actions.clone());
    let diff = tape.sub(a, mean)?;
    let sigma = tape.exp(log_std);
    let z = tape.div_row(diff, sigma)?;
    let sq = tape.square(z);
    let rowsum = tape.sum_cols(sq);
    let half = tape.scale(rowsum, -0.5);
    let logdet = tape.sum(log_std);
    let neg_logdet = tape.neg(logdet);
    let shifted = tape.add(half, neg_logdet)?;
    Ok(tape.add_scalar(
        shifted,
        (-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()) as f32,
    ))
}

/// Entropy of the diagonal Gaussian (scalar; identical across the batch).
pub fn entropy_var(tape: &mut Tape, log_std: Var) -> Var {
    let d = tape.value(log_std).len();
    let s = tape.sum(log_std);
    tape.add_scalar(
        s,
        (0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln())) as f32,
    )
}

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

/// Single-environment GAE over aligned arrays with a bootstrap value for the
/// step after the last.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::ShapeMismatch(format!(
            "gae arrays: rewards {}, values {}, dones {}",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let t = rewards.len();
    let mut advantages = vec![0.0; t];
    let mut next_adv = 0.0;
    for i in (0..t).rev() {
        let not_done = if dones[i] { 0.0 } else { 1.0 };
        let next_value = if i + 1 < t { values[i + 1] } else { bootstrap };
        let delta = rewards[i] + gamma * next_value * not_done - values[i];
        next_adv = delta + gamma * lam * not_done * next_adv;
        advantages[i] = next_adv;
    }
    let returns: Vec<f64> = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

// ---------------------------------------------------------------------------
// Rollout storage
// ---------------------------------------------------------------------------

/// Fixed-horizon, per-environment trajectories for one PPO update.
/// Policy-state rows (`states`) hold the full network input; `terrain` is
/// the one-hot used by the teacher's gate/value (empty otherwise).
pub struct RolloutBuffer {
    pub horizon: usize,
    pub num_envs: usize,
    pub state_dim: usize,
    pub terrain_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub terrain: Vec<f32>,
    pub actions: Vec<f32>,
    pub means: Vec<f32>,
    pub log_std: Vec<f32>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    filled: usize,
}

impl RolloutBuffer {
    pub fn new(
        horizon: usize,
        num_envs: usize,
        state_dim: usize,
        terrain_dim: usize,
        action_dim: usize,
    ) -> Self {
        let n = horizon * num_envs;
        RolloutBuffer {
            horizon,
            num_envs,
            state_dim,
            terrain_dim,
            action_dim,
            states: vec![0.0; n * state_dim],
            terrain: vec![0.0; n * terrain_dim],
            actions: vec![0.0; n * action_dim],
            means: vec![0.0; n * action_dim],
            log_std: vec![0.0; action_dim],
            log_probs: vec![0.0; n],
            values: vec![0.0; n],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            bootstrap: vec![0.0; num_envs],
            advantages: vec![0.0; n],
            returns: vec![0.0; n],
            filled: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.horizon * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.horizon
    }

    fn row(&self, step: usize, env: usize) -> usize {
        step * self.num_envs + env
    }

    /// Store one synchronized step for all environments.
    #[allow(clippy::too_many_arguments)]
    pub fn push_step(
        &mut self,
        step: usize,
        states: &[f32],
        terrain: &[f32],
        actions: &[f32],
        means: &[f32],
        log_probs: &[f64],
        values: &[f64],
        rewards: &[f64],
        dones: &[bool],
    ) {
        debug_assert_eq!(states.len(), self.num_envs * self.state_dim);
        debug_assert_eq!(actions.len(), self.num_envs * self.action_dim);
        let r0 = self.row(step, 0);
        self.states[r0 * self.state_dim..(r0 + self.num_envs) * self.state_dim]
            .copy_from_slice(states);
        if self.terrain_dim > 0 {
            self.terrain[r0 * self.terrain_dim..(r0 + self.num_envs) * self.terrain_dim]
                .copy_from_slice(terrain);
        }
        self.actions[r0 * self.action_dim..(r0 + self.num_envs) * self.action_dim]
            .copy_from_slice(actions);
        self.means[r0 * self.action_dim..(r0 + self.num_envs) * self.action_dim]
            .copy_from_slice(means);
        self.log_probs[r0..r0 + self.num_envs].copy_from_slice(log_probs);
        self.values[r0..r0 + self.num_envs].copy_from_slice(values);
        self.rewards[r0..r0 + self.num_envs].copy_from_slice(rewards);
        self.dones[r0..r0 + self.num_envs].copy_from_slice(dones);
        self.filled = self.filled.max(step + 1);
    }

    /// GAE over every environment column plus batch advantage normalization.
    pub fn finalize(&mut self, gamma: f64, lam: f64) -> Result<()> {
        for env in 0..self.num_envs {
            let rewards: Vec<f64> = (0..self.horizon)
                .map(|t| self.rewards[self.row(t, env)])
                .collect();
            let values: Vec<f64> = (0..self.horizon)
                .map(|t| self.values[self.row(t, env)])
                .collect();
            let dones: Vec<bool> = (0..self.horizon)
                .map(|t| self.dones[self.row(t, env)])
                .collect();
            let (adv, ret) =
                compute_gae(&rewards, &values, &dones, self.bootstrap[env], gamma, lam)?;
            for t in 0..self.horizon {
                let r = self.row(t, env);
                self.advantages[r] = adv[t];
                self.returns[r] = ret[t];
            }
        }
        // normalize advantages over the whole batch
        let n = self.len() as f64;
        let mean: f64 = self.advantages.iter().sum::<f64>() / n;
        let var: f64 = self
            .advantages
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std > 1e-8 {
            for a in self.advantages.iter_mut() {
                *a = (*a - mean) / std;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Actor-critic dispatch
// ---------------------------------------------------------------------------

/// The policies PPO can train; they differ only in how the network input is
/// wired to the shared Gaussian head.
pub enum ActorCritic<'a> {
    Teacher(&'a TeacherPolicy),
    Blind(&'a BlindPolicy),
    Toy(&'a toy::ToyPolicy),
}

impl ActorCritic<'_> {
    /// Forward a batch: returns (mean, log_std, value).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        states: &Tensor,
        terrain: Option<&Tensor>,
    ) -> Result<(Var, Var, Var)> {
        match self {
            ActorCritic::Teacher(policy) => {
                let s = tape.input(states.clone());
                let tp = tape.input(
                    terrain
                        .ok_or_else(|| Error::Usage("teacher forward needs terrain".into()))?
                        .clone(),
                );
                let (z, _) = policy.encode(tape, store, s, tp)?;
                let obs = tape.slice_cols(s, 0, crate::sim::observe::OBS_DIM)?;
                let dist = policy.action_dist(tape, store, z, obs)?;
                let v = policy.value(tape, store, s, tp)?;
                Ok((dist.mean, dist.log_std, v))
            }
            ActorCritic::Blind(policy) => {
                let obs = tape.input(states.clone());
                let z = policy.encode(tape, store, obs)?;
                let dist = policy.action_dist(tape, store, z, obs)?;
                let v = policy.value(tape, store, obs)?;
                Ok((dist.mean, dist.log_std, v))
            }
            ActorCritic::Toy(policy) => {
                let obs = tape.input(states.clone());
                let (mean, log_std) = policy.action_dist(tape, store, obs)?;
                let v = policy.value(tape, store, obs)?;
                Ok((mean, log_std, v))
            }
        }
    }

    /// Parameter-name prefixes whose gradients feed the action mean (used by
    /// tests asserting zero-advantage behavior).
    pub fn mean_path_prefixes(&self) -> Vec<&'static str> {
        match self {
            ActorCritic::Teacher(_) => vec!["teacher.expert", "teacher.gate", "teacher.head"],
            ActorCritic::Blind(_) => vec!["blind.encoder", "blind.head"],
            ActorCritic::Toy(_) => vec!["toy.mean"],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f32,
}

fn gather_rows(src: &[f32], dim: usize, idx: &[usize]) -> Tensor {
    let mut out = vec![0.0f32; idx.len() * dim];
    for (r, i) in idx.iter().enumerate() {
        out[r * dim..(r + 1) * dim].copy_from_slice(&src[i * dim..(i + 1) * dim]);
    }
    Tensor::new(vec![idx.len(), dim], out).expect("gather")
}

/// One PPO update: epochs x minibatch sweeps of the clipped surrogate plus
/// value MSE and entropy bonus, with the KL-adaptive learning rate. The
/// learning rate persists across updates via `lr`.
pub fn ppo_update(
    buffer: &RolloutBuffer,
    actor: &ActorCritic,
    store: &mut ParameterStore,
    cfg: &PpoConfig,
    lr: &mut f32,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    if !buffer.is_full() {
        return Err(Error::Usage("ppo_update on a partially filled buffer".into()));
    }
    let n = buffer.len();
    let mb_size = (n / cfg.minibatches).max(1);
    let mut indices: Vec<usize> = (0..n).collect();

    // old-policy snapshot for the final safety KL, and a parameter snapshot
    // for the rollback guarantee
    let old_means = buffer.means.clone();
    let old_log_std = buffer.log_std.clone();
    let pre_update_store = store.clone();

    let mut stats = PpoStats {
        lr: *lr,
        ..Default::default()
    };
    let mut stat_count = 0.0;
    let mut early_stop = false;

    for _epoch in 0..cfg.epochs {
        if early_stop {
            break;
        }
        indices.shuffle(rng);
        for mb in 0..cfg.minibatches {
            let mb_idx = &indices[mb * mb_size..((mb + 1) * mb_size).min(n)];
            if mb_idx.is_empty() {
                continue;
            }
            let states = gather_rows(&buffer.states, buffer.state_dim, mb_idx);
            let terrain = if buffer.terrain_dim > 0 {
                Some(gather_rows(&buffer.terrain, buffer.terrain_dim, mb_idx))
            } else {
                None
            };
            let actions = gather_rows(&buffer.actions, buffer.action_dim, mb_idx);
            let adv: Vec<f32> = mb_idx.iter().map(|i| buffer.advantages[*i] as f32).collect();
            let old_logp: Vec<f32> = mb_idx.iter().map(|i| buffer.log_probs[*i] as f32).collect();
            let rets: Vec<f32> = mb_idx.iter().map(|i| buffer.returns[*i] as f32).collect();

            let mut tape = Tape::new();
            let (mean, log_std, value) =
                actor.forward(&mut tape, store, &states, terrain.as_ref())?;

            // measured KL against the rollout policy drives the lr schedule
            let mean_v = tape.value(mean).data();
            let log_std_v = tape.value(log_std).data().to_vec();
            let mut kl_acc = 0.0;
            for (r, i) in mb_idx.iter().enumerate() {
                let d = buffer.action_dim;
                kl_acc += gaussian_kl(
                    &old_means[i * d..(i + 1) * d],
                    &old_log_std,
                    &mean_v[r * d..(r + 1) * d],
                    &log_std_v,
                );
            }
            let kl = kl_acc / mb_idx.len() as f64;
            if kl > 2.0 * cfg.kl_target {
                *lr = (*lr / 2.0).max(cfg.lr_min);
            } else if kl < 0.5 * cfg.kl_target && kl >= 0.0 {
                *lr = (*lr * 2.0).min(cfg.lr_max);
            }
            if kl > 3.0 * cfg.kl_target {
                // stop sweeping before the policy walks away; this minibatch
                // is not applied
                early_stop = true;
                break;
            }

            let logp_new = log_prob_var(&mut tape, mean, log_std, &actions)?;
            let old_logp_t = tape.input(Tensor::matrix(mb_idx.len(), 1, old_logp.clone())?);
            let diff = tape.sub(logp_new, old_logp_t)?;
            let ratio = tape.exp(diff);
            let adv_t = tape.input(Tensor::matrix(mb_idx.len(), 1, adv.clone())?);
            let surr1 = tape.mul(ratio, adv_t)?;
            let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let surr2 = tape.mul(clipped, adv_t)?;
            let obj = tape.min(surr1, surr2)?;
            let mean_obj = tape.mean(obj);
            let policy_loss = tape.neg(mean_obj);

            let ret_t = tape.input(Tensor::matrix(mb_idx.len(), 1, rets)?);
            let vdiff = tape.sub(value, ret_t)?;
            let vsq = tape.square(vdiff);
            let value_loss = tape.mean(vsq);

            let entropy = entropy_var(&mut tape, log_std);

            let v_scaled = tape.scale(value_loss, cfg.value_coef);
            let partial = tape.add(policy_loss, v_scaled)?;
            let ent_scaled = tape.scale(entropy, -cfg.entropy_coef);
            let total = tape.add(partial, ent_scaled)?;

            let total_v = tape.value(total).scalar_value() as f64;
            if !total_v.is_finite() {
                return Err(Error::Numerical(format!(
                    "ppo loss is not finite in minibatch {mb} (policy {}, value {})",
                    tape.value(policy_loss).scalar_value(),
                    tape.value(value_loss).scalar_value()
                )));
            }

            // clip fraction for diagnostics
            let ratio_v = tape.value(ratio).data();
            let clip_frac = ratio_v
                .iter()
                .filter(|r| (**r - 1.0).abs() > cfg.clip)
                .count() as f64
                / ratio_v.len() as f64;

            store.zero_grad();
            tape.backward(total, store)?;
            store.clip_grad_norm(cfg.grad_clip);
            store.adam_step(&AdamConfig {
                lr: *lr,
                ..Default::default()
            });

            stats.policy_loss += tape.value(policy_loss).scalar_value() as f64;
            stats.value_loss += tape.value(value_loss).scalar_value() as f64;
            stats.entropy += tape.value(entropy).scalar_value() as f64;
            stats.kl += kl;
            stats.clip_fraction += clip_frac;
            stat_count += 1.0;

            if early_stop {
                break;
            }
        }
    }
    if stat_count > 0.0 {
        stats.policy_loss /= stat_count;
        stats.value_loss /= stat_count;
        stats.entropy /= stat_count;
        stats.kl /= stat_count;
        stats.clip_fraction /= stat_count;
    }
    stats.lr = *lr;

    // hard safety: the full update must never move measured KL above 0.1.
    // With a small clamped sigma a single Adam step can jump further than
    // any pre-step check predicts, so breach means revert (the adapted,
    // reduced lr persists and shrinks subsequent steps).
    let final_kl = measure_kl(buffer, actor, store, &old_means, &old_log_std)?;
    if final_kl > 0.09 {
        *store = pre_update_store;
        *lr = (*lr / 2.0).max(cfg.lr_min);
        stats.kl = final_kl;
    }
    let checked_kl = measure_kl(buffer, actor, store, &old_means, &old_log_std)?;
    assert!(
        checked_kl <= 0.1,
        "post-update KL {checked_kl} exceeded the 0.1 safety bound"
    );
    Ok(stats)
}

/// Mean KL of the current policy against stored rollout distributions,
/// evaluated over the whole buffer.
pub fn measure_kl(
    buffer: &RolloutBuffer,
    actor: &ActorCritic,
    store: &ParameterStore,
    old_means: &[f32],
    old_log_std: &[f32],
) -> Result<f64> {
    let n = buffer.len();
    let idx: Vec<usize> = (0..n).collect();
    let states = gather_rows(&buffer.states, buffer.state_dim, &idx);
    let terrain = if buffer.terrain_dim > 0 {
        Some(gather_rows(&buffer.terrain, buffer.terrain_dim, &idx))
    } else {
        None
    };
    let mut tape = Tape::new();
    let (mean, log_std, _) = actor.forward(&mut tape, store, &states, terrain.as_ref())?;
    let mean_v = tape.value(mean).data();
    let ls_v = tape.value(log_std).data().to_vec();
    let d = buffer.action_dim;
    let mut acc = 0.0;
    for i in 0..n {
        acc += gaussian_kl(
            &old_means[i * d..(i + 1) * d],
            old_log_std,
            &mean_v[i * d..(i + 1) * d],
            &ls_v,
        );
    }
    Ok(acc / n as f64)
}
