//! Student training: action imitation plus Barlow Twins alignment between
//! the student and teacher latents, over student-driven rollouts with the
//! frozen teacher as oracle.
//!
//! The printed off-diagonal objective (1 - C_ij)^2 would reward redundancy
//! (an all-ones correlation matrix); the default follows the redundancy-
//! reduction form that drives off-diagonals to zero, with the literal form
//! kept behind `BarlowMode::Literal`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ParameterStore, Tape};
use crate::policy::{
    StudentPolicy, TeacherPolicy, ACTION_DIM, LATENT_DIM, STUDENT_HIDDEN_DIM, STUDENT_HISTORY_DIM,
};
use crate::ppo::gaussian_sample;
use crate::rewards::TERM_COUNT;
use crate::sim::observe::OBS_DIM;
use crate::sim::state::JOINT_COUNT;
use crate::sim::{EnvPool, DEPTH_DIM, DEPTH_OUT_H, DEPTH_OUT_W};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarlowMode {
    Standard,
    Literal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    pub mode: BarlowMode,
    pub use_barlow: bool,
    pub lr: f32,
    pub grad_clip: f64,
    /// Student rollout horizon per update.
    pub horizon: usize,
    /// Exploration noise applied to student actions during collection.
    pub action_noise: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.005,
            mode: BarlowMode::Standard,
            use_barlow: true,
            lr: 1e-3,
            grad_clip: 1.0,
            horizon: 16,
            action_noise: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-correlation (plain path)
// ---------------------------------------------------------------------------

pub struct CrossCorrelation {
    /// dim x dim, row i = student coordinate, column j = teacher coordinate.
    pub c: Vec<f64>,
    pub dim: usize,
    pub valid_a: Vec<bool>,
    pub valid_b: Vec<bool>,
    pub degenerate_columns: usize,
}

fn column_stats(z: &[f32], batch: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; dim];
    for b in 0..batch {
        for d in 0..dim {
            mean[d] += z[b * dim + d] as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= batch as f64;
    }
    let mut std = vec![0.0f64; dim];
    for b in 0..batch {
        for d in 0..dim {
            let c = z[b * dim + d] as f64 - mean[d];
            std[d] += c * c;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / batch as f64).sqrt();
    }
    (mean, std)
}

/// Batch-standardized cross-correlation matrix between two (B x D) latent
/// batches. Columns with near-zero variance are flagged degenerate and
/// excluded from the matrix (their rows/columns are zeroed).
pub fn cross_correlation(za: &[f32], zb: &[f32], batch: usize, dim: usize) -> Result<CrossCorrelation> {
    if batch < 2 {
        return Err(Error::InvalidParameter(format!(
            "cross-correlation needs batch >= 2, got {batch}"
        )));
    }
    if za.len() != batch * dim || zb.len() != batch * dim {
        return Err(Error::ShapeMismatch(format!(
            "latents {} / {} vs batch {batch} x dim {dim}",
            za.len(),
            zb.len()
        )));
    }
    let (mean_a, std_a) = column_stats(za, batch, dim);
    let (mean_b, std_b) = column_stats(zb, batch, dim);
    let valid_a: Vec<bool> = std_a.iter().map(|s| *s > 1e-8).collect();
    let valid_b: Vec<bool> = std_b.iter().map(|s| *s > 1e-8).collect();
    let degenerate =
        valid_a.iter().filter(|v| !**v).count() + valid_b.iter().filter(|v| !**v).count();

    let mut c = vec![0.0f64; dim * dim];
    for b in 0..batch {
        for i in 0..dim {
            if !valid_a[i] {
                continue;
            }
            let ai = (za[b * dim + i] as f64 - mean_a[i]) / std_a[i];
            for j in 0..dim {
                if !valid_b[j] {
                    continue;
                }
                let bj = (zb[b * dim + j] as f64 - mean_b[j]) / std_b[j];
                c[i * dim + j] += ai * bj;
            }
        }
    }
    for v in c.iter_mut() {
        *v /= batch as f64;
    }
    Ok(CrossCorrelation {
        c,
        dim,
        valid_a,
        valid_b,
        degenerate_columns: degenerate,
    })
}

/// Alignment objective on a cross-correlation matrix. Returns
/// (total, diagonal term, off-diagonal term before lambda).
pub fn barlow_loss(cc: &CrossCorrelation, lambda: f64, mode: BarlowMode) -> (f64, f64, f64) {
    let d = cc.dim;
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            if !cc.valid_a[i] || !cc.valid_b[j] {
                continue;
            }
            let v = cc.c[i * d + j];
            if i == j {
                diag += (1.0 - v) * (1.0 - v);
            } else {
                off += match mode {
                    BarlowMode::Standard => v * v,
                    BarlowMode::Literal => (1.0 - v) * (1.0 - v),
                };
            }
        }
    }
    (diag + lambda * off, diag, off)
}

// ---------------------------------------------------------------------------
// Alignment batch + training step
// ---------------------------------------------------------------------------

/// Inputs and targets for one distillation update. B >= 64 so the batch
/// statistics in the cross-correlation are meaningful.
pub struct AlignmentBatch {
    pub batch: usize,
    pub history: Tensor,
    pub depth: Tensor,
    pub hidden: Tensor,
    pub obs: Tensor,
    pub teacher_latent: Tensor,
    pub teacher_mean: Tensor,
    /// Student action means at collection time (provenance check).
    pub student_mean: Tensor,
    /// Actions actually applied to the simulator.
    pub applied_actions: Tensor,
}

impl AlignmentBatch {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 64 {
            return Err(Error::InvalidParameter(format!(
                "alignment batch {} < 64",
                self.batch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DistillStats {
    pub mse: f64,
    pub bt_diag: f64,
    pub bt_offdiag: f64,
    pub total: f64,
    pub degenerate_columns: usize,
}

/// One distillation update: imitation MSE plus the Barlow alignment loss,
/// one Adam step on the student parameters only (the teacher never appears
/// on the tape).
pub fn distill_step(
    batch: &AlignmentBatch,
    student: &StudentPolicy,
    store: &mut ParameterStore,
    cfg: &DistillConfig,
) -> Result<DistillStats> {
    batch.validate()?;
    let b = batch.batch;
    let mut tape = Tape::new();
    let hist = tape.input(batch.history.clone());
    let depth = tape.input(batch.depth.clone());
    let hidden = tape.input(batch.hidden.clone());
    let obs = tape.input(batch.obs.clone());
    let (z_s, _) = student.encode(&mut tape, store, hist, depth, hidden)?;
    let dist = student.action_dist(&mut tape, store, z_s, obs)?;

    // imitation term
    let target = tape.input(batch.teacher_mean.clone());
    let adiff = tape.sub(dist.mean, target)?;
    let asq = tape.square(adiff);
    let mse = tape.mean(asq);

    let mut stats = DistillStats::default();

    let total = if cfg.use_barlow {
        // plain-path CC for masks and reporting
        let z_s_vals = tape.value(z_s).data().to_vec();
        let cc = cross_correlation(
            &z_s_vals,
            batch.teacher_latent.data(),
            b,
            LATENT_DIM,
        )?;
        stats.degenerate_columns = cc.degenerate_columns;
        if cc.valid_a.iter().all(|v| !v) || cc.valid_b.iter().all(|v| !v) {
            // all columns degenerate: alignment is meaningless, apply the
            // imitation term only
            mse
        } else {
            // standardized teacher latents as a constant
            let (mean_b_, std_b_) = column_stats(batch.teacher_latent.data(), b, LATENT_DIM);
            let mut zb_h = vec![0.0f32; b * LATENT_DIM];
            for r in 0..b {
                for dcol in 0..LATENT_DIM {
                    if cc.valid_b[dcol] {
                        zb_h[r * LATENT_DIM + dcol] = ((batch.teacher_latent.data()
                            [r * LATENT_DIM + dcol]
                            as f64
                            - mean_b_[dcol])
                            / std_b_[dcol]) as f32;
                    }
                }
            }
            let zb_const = tape.input(Tensor::new(vec![b, LATENT_DIM], zb_h)?);

            // standardize the student latents on-tape (gradient flows
            // through the batch statistics)
            let mu = tape.mean_rows(z_s);
            let centered = tape.sub_row(z_s, mu)?;
            let sq = tape.square(centered);
            let var = tape.mean_rows(sq);
            let var_eps = tape.add_scalar(var, 1e-12);
            let std = tape.sqrt(var_eps);
            let zh = tape.div_row(centered, std)?;
            let mask_a: Vec<f32> = (0..b * LATENT_DIM)
                .map(|k| if cc.valid_a[k % LATENT_DIM] { 1.0 } else { 0.0 })
                .collect();
            let mask_a = tape.input(Tensor::new(vec![b, LATENT_DIM], mask_a)?);
            let zh_masked = tape.mul(zh, mask_a)?;

            let zht = tape.transpose(zh_masked);
            let c_raw = tape.matmul(zht, zb_const)?;
            let c = tape.scale(c_raw, 1.0 / b as f32);

            let mut diag_mask = vec![0.0f32; LATENT_DIM * LATENT_DIM];
            let mut off_mask = vec![0.0f32; LATENT_DIM * LATENT_DIM];
            for i in 0..LATENT_DIM {
                for j in 0..LATENT_DIM {
                    if cc.valid_a[i] && cc.valid_b[j] {
                        if i == j {
                            diag_mask[i * LATENT_DIM + j] = 1.0;
                        } else {
                            off_mask[i * LATENT_DIM + j] = 1.0;
                        }
                    }
                }
            }
            let dmask = tape.input(Tensor::new(vec![LATENT_DIM, LATENT_DIM], diag_mask)?);
            let omask = tape.input(Tensor::new(vec![LATENT_DIM, LATENT_DIM], off_mask)?);
            let ones = tape.input(Tensor::filled(&[LATENT_DIM, LATENT_DIM], 1.0));

            let one_minus_c = tape.sub(ones, c)?;
            let diag_terms = tape.mul(one_minus_c, dmask)?;
            let diag_sq = tape.square(diag_terms);
            let diag_loss = tape.sum(diag_sq);

            let off_core = match cfg.mode {
                BarlowMode::Standard => tape.mul(c, omask)?,
                BarlowMode::Literal => tape.mul(one_minus_c, omask)?,
            };
            let off_sq = tape.square(off_core);
            let off_loss = tape.sum(off_sq);

            stats.bt_diag = tape.value(diag_loss).scalar_value() as f64;
            stats.bt_offdiag = tape.value(off_loss).scalar_value() as f64;

            let off_scaled = tape.scale(off_loss, cfg.lambda as f32);
            let alignment = tape.add(diag_loss, off_scaled)?;
            tape.add(mse, alignment)?
        }
    } else {
        mse
    };

    stats.mse = tape.value(mse).scalar_value() as f64;
    stats.total = tape.value(total).scalar_value() as f64;
    if !stats.total.is_finite() {
        return Err(Error::Numerical("distillation loss is not finite".into()));
    }

    store.zero_grad();
    tape.backward(total, store)?;
    store.clip_grad_norm(cfg.grad_clip);
    store.adam_step(&AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Student-driven rollout collection
// ---------------------------------------------------------------------------

/// Recurrent/history carry for each environment between collection calls.
pub struct StudentCarry {
    pub hidden: Vec<f32>,
    pub history: Vec<f32>,
    initialized: Vec<bool>,
}

impl StudentCarry {
    pub fn new(num_envs: usize) -> Self {
        StudentCarry {
            hidden: vec![0.0; num_envs * STUDENT_HIDDEN_DIM],
            history: vec![0.0; num_envs * STUDENT_HISTORY_DIM],
            initialized: vec![false; num_envs],
        }
    }

    pub fn reset_env(&mut self, env: usize) {
        self.hidden[env * STUDENT_HIDDEN_DIM..(env + 1) * STUDENT_HIDDEN_DIM].fill(0.0);
        self.history[env * STUDENT_HISTORY_DIM..(env + 1) * STUDENT_HISTORY_DIM].fill(0.0);
        self.initialized[env] = false;
    }

    /// Shift the history window and append the newest observation; a fresh
    /// episode fills the whole window with its first observation.
    pub fn push_obs(&mut self, env: usize, obs: &[f32]) {
        let h = &mut self.history[env * STUDENT_HISTORY_DIM..(env + 1) * STUDENT_HISTORY_DIM];
        if !self.initialized[env] {
            for k in 0..crate::policy::HISTORY_LEN {
                h[k * OBS_DIM..(k + 1) * OBS_DIM].copy_from_slice(obs);
            }
            self.initialized[env] = true;
        } else {
            h.copy_within(OBS_DIM.., 0);
            let start = STUDENT_HISTORY_DIM - OBS_DIM;
            h[start..].copy_from_slice(obs);
        }
    }
}

/// Per-rollout aggregates for the metrics stream.
#[derive(Debug, Clone, Default)]
pub struct RolloutMetrics {
    pub mean_reward: f64,
    pub mean_terrain_level: f64,
    pub episodes_finished: usize,
    pub mean_episode_length: f64,
    pub term_means: [f64; TERM_COUNT],
}

/// Roll the student policy in the environments for `horizon` steps; the
/// teacher (frozen) is evaluated on the same privileged state as the target.
/// Actions applied to the simulator come from the student.
#[allow(clippy::too_many_arguments)]
pub fn collect_student_rollouts(
    pool: &mut EnvPool,
    student: &StudentPolicy,
    student_store: &ParameterStore,
    teacher: &TeacherPolicy,
    teacher_store: &ParameterStore,
    carry: &mut StudentCarry,
    dcfg: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<(AlignmentBatch, RolloutMetrics)> {
    let horizon = dcfg.horizon;
    let n = pool.len();
    let b = horizon * n;
    let mut history = vec![0.0f32; b * STUDENT_HISTORY_DIM];
    let mut depth = vec![0.0f32; b * DEPTH_DIM];
    let mut hidden = vec![0.0f32; b * STUDENT_HIDDEN_DIM];
    let mut obs_all = vec![0.0f32; b * OBS_DIM];
    let mut t_latent = vec![0.0f32; b * LATENT_DIM];
    let mut t_mean = vec![0.0f32; b * ACTION_DIM];
    let mut s_mean = vec![0.0f32; b * ACTION_DIM];
    let mut applied = vec![0.0f32; b * ACTION_DIM];

    let mut metrics = RolloutMetrics::default();
    let mut ep_len_acc = 0.0;

    let cfg = pool.cfg.clone();
    for step in 0..horizon {
        // observations + depth for every env (rendering in parallel)
        use rayon::prelude::*;
        let per_env: Vec<crate::error::Result<[f32; OBS_DIM]>> = pool
            .envs
            .par_iter_mut()
            .map(|env| {
                let o = env.observe(&cfg);
                env.update_depth(&cfg)?;
                Ok(o)
            })
            .collect();
        let mut obs_step = vec![0.0f32; n * OBS_DIM];
        for (i, r) in per_env.into_iter().enumerate() {
            let o = r?;
            obs_step[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&o);
            carry.push_obs(i, &o);
        }
        let row0 = step * n;
        obs_all[row0 * OBS_DIM..(row0 + n) * OBS_DIM].copy_from_slice(&obs_step);
        history[row0 * STUDENT_HISTORY_DIM..(row0 + n) * STUDENT_HISTORY_DIM]
            .copy_from_slice(&carry.history);
        hidden[row0 * STUDENT_HIDDEN_DIM..(row0 + n) * STUDENT_HIDDEN_DIM]
            .copy_from_slice(&carry.hidden);
        for (i, env) in pool.envs.iter().enumerate() {
            depth[(row0 + i) * DEPTH_DIM..(row0 + i + 1) * DEPTH_DIM].copy_from_slice(&env.depth);
        }

        // student forward
        let mut tape = Tape::new();
        let h_in = tape.input(Tensor::new(vec![n, STUDENT_HISTORY_DIM], carry.history.clone())?);
        let d_in = tape.input(Tensor::new(
            vec![n, DEPTH_OUT_H, DEPTH_OUT_W, 1],
            depth[row0 * DEPTH_DIM..(row0 + n) * DEPTH_DIM].to_vec(),
        )?);
        let hid_in = tape.input(Tensor::new(vec![n, STUDENT_HIDDEN_DIM], carry.hidden.clone())?);
        let obs_in = tape.input(Tensor::new(vec![n, OBS_DIM], obs_step.clone())?);
        let (z_s, hidden_next) = student.encode(&mut tape, student_store, h_in, d_in, hid_in)?;
        let sdist = student.action_dist(&mut tape, student_store, z_s, obs_in)?;
        let s_mean_v = tape.value(sdist.mean).data().to_vec();
        let s_ls_v = tape.value(sdist.log_std).data().to_vec();
        carry.hidden.copy_from_slice(tape.value(hidden_next).data());

        // teacher forward on the privileged view of the same step
        let mut state_vec = vec![0.0f32; n * crate::policy::TEACHER_STATE_DIM];
        let mut tp_vec = vec![0.0f32; n * 4];
        for (i, env) in pool.envs.iter_mut().enumerate() {
            let op = env.privileged(&cfg);
            let scan = env.scan();
            let base = i * crate::policy::TEACHER_STATE_DIM;
            state_vec[base..base + OBS_DIM].copy_from_slice(&obs_step[i * OBS_DIM..(i + 1) * OBS_DIM]);
            state_vec[base + OBS_DIM..base + OBS_DIM + op.len()].copy_from_slice(&op);
            state_vec[base + OBS_DIM + op.len()..base + crate::policy::TEACHER_STATE_DIM]
                .copy_from_slice(&scan);
            let one_hot = env.terrain_one_hot();
            tp_vec[i * 4..(i + 1) * 4].copy_from_slice(&one_hot);
        }
        let mut t_tape = Tape::new();
        let s_in = t_tape.input(Tensor::new(
            vec![n, crate::policy::TEACHER_STATE_DIM],
            state_vec,
        )?);
        let tp_in = t_tape.input(Tensor::new(vec![n, 4], tp_vec)?);
        let (z_t, _) = teacher.encode(&mut t_tape, teacher_store, s_in, tp_in)?;
        let t_obs = t_tape.slice_cols(s_in, 0, OBS_DIM)?;
        let tdist = teacher.action_dist(&mut t_tape, teacher_store, z_t, t_obs)?;
        t_latent[row0 * LATENT_DIM..(row0 + n) * LATENT_DIM]
            .copy_from_slice(t_tape.value(z_t).data());
        t_mean[row0 * ACTION_DIM..(row0 + n) * ACTION_DIM]
            .copy_from_slice(t_tape.value(tdist.mean).data());
        s_mean[row0 * ACTION_DIM..(row0 + n) * ACTION_DIM].copy_from_slice(&s_mean_v);

        // the simulator steps on STUDENT actions
        let mut actions = vec![[0.0f64; JOINT_COUNT]; n];
        for i in 0..n {
            let m = &s_mean_v[i * ACTION_DIM..(i + 1) * ACTION_DIM];
            let a: Vec<f32> = if dcfg.action_noise {
                gaussian_sample(m, &s_ls_v, rng)
            } else {
                m.to_vec()
            };
            for j in 0..JOINT_COUNT {
                actions[i][j] = a[j] as f64;
            }
            applied[(row0 + i) * ACTION_DIM..(row0 + i + 1) * ACTION_DIM].copy_from_slice(&a);
        }
        let outcomes = pool.step(&actions)?;
        for (i, o) in outcomes.iter().enumerate() {
            metrics.mean_reward += o.reward;
            for (k, t) in o.breakdown.weighted.iter().enumerate() {
                metrics.term_means[k] += t;
            }
            if o.done {
                metrics.episodes_finished += 1;
                ep_len_acc += o.episode_length.unwrap_or(0.0);
                carry.reset_env(i);
            }
        }
    }

    let total_steps = (horizon * n) as f64;
    metrics.mean_reward /= total_steps;
    for t in metrics.term_means.iter_mut() {
        *t /= total_steps;
    }
    metrics.mean_terrain_level = pool.mean_terrain_level();
    metrics.mean_episode_length = if metrics.episodes_finished > 0 {
        ep_len_acc / metrics.episodes_finished as f64
    } else {
        0.0
    };

    let batch = AlignmentBatch {
        batch: b,
        history: Tensor::new(vec![b, STUDENT_HISTORY_DIM], history)?,
        depth: Tensor::new(vec![b, DEPTH_OUT_H, DEPTH_OUT_W, 1], depth)?,
        hidden: Tensor::new(vec![b, STUDENT_HIDDEN_DIM], hidden)?,
        obs: Tensor::new(vec![b, OBS_DIM], obs_all)?,
        teacher_latent: Tensor::new(vec![b, LATENT_DIM], t_latent)?,
        teacher_mean: Tensor::new(vec![b, ACTION_DIM], t_mean)?,
        student_mean: Tensor::new(vec![b, ACTION_DIM], s_mean)?,
        applied_actions: Tensor::new(vec![b, ACTION_DIM], applied)?,
    };
    Ok((batch, metrics))
}
