//! Run orchestration: configuration snapshots, the two training phases,
//! ablation wiring, evaluation, and run-directory layout.
//!
//! Every run directory holds `config.json` (the fully resolved snapshot),
//! `manifest.json` (seed + code version), `metrics.csv`, and checkpoints;
//! re-running from the snapshot reproduces the CSV bit-exactly.

pub mod plot;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{collect_student_rollouts, distill_step, DistillConfig, StudentCarry};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::nn::{load_store, save_store, ParameterStore, Tape};
use crate::policy::{
    checkpoint_kind, BlindPolicy, StudentPolicy, TeacherPolicy, ACTION_DIM, STUDENT_HIDDEN_DIM,
    STUDENT_HISTORY_DIM, TEACHER_STATE_DIM,
};
use crate::ppo::{
    gaussian_log_prob, gaussian_sample, ppo_update, ActorCritic, PpoConfig, RolloutBuffer,
};
use crate::rewards::{TERM_COUNT, TERM_NAMES};
use crate::sim::observe::OBS_DIM;
use crate::sim::state::{Termination, JOINT_COUNT};
use crate::sim::{EnvConfig, EnvPool, DEPTH_OUT_H, DEPTH_OUT_W};
use crate::tensor::Tensor;
use crate::terrain::TerrainKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_depth: bool,
    pub use_moe: bool,
    pub use_barlow: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_depth: true,
            use_moe: true,
            use_barlow: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub env_count: usize,
    pub episode_cap_s: f64,
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            env_count: 128,
            episode_cap_s: 100.0,
            difficulty: 0.5,
            seed: 9000,
        }
    }
}

/// Complete run configuration; the JSON schema rejects unknown keys at every
/// level so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env_count: usize,
    pub teacher_iterations: usize,
    pub student_iterations: usize,
    pub checkpoint_every: usize,
    pub ablation: AblationFlags,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            seed: 0,
            env_count: 64,
            teacher_iterations: 1000,
            student_iterations: 1000,
            checkpoint_every: 100,
            ablation: AblationFlags::default(),
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: format!("{}", path.display()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.env_count == 0 {
            return Err(Error::config("env_count", "must be positive"));
        }
        self.env.validate()?;
        if self.ppo.horizon == 0 {
            return Err(Error::config("ppo.horizon", "must be positive"));
        }
        if self.distill.horizon == 0 {
            return Err(Error::config("distill.horizon", "must be positive"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    seed: u64,
    env_count: usize,
    iterations: usize,
    code_version: String,
}

fn write_run_preamble(
    out_dir: &Path,
    cfg: &RunConfig,
    kind: &str,
    iterations: usize,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("config.json"))?;
    let manifest = Manifest {
        kind: kind.to_string(),
        seed: cfg.seed,
        env_count: cfg.env_count,
        iterations,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Master RNG for a phase; separated from env RNG streams.
fn phase_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(tag))
}

// ---------------------------------------------------------------------------
// teacher phase (also the Blind baseline when ablation.use_depth is off)
// ---------------------------------------------------------------------------

struct EpisodeTracker {
    len_acc: f64,
    count: usize,
}

/// Per-iteration aggregated metrics from a PPO rollout.
struct RolloutAggregates {
    reward_mean: f64,
    term_means: [f64; TERM_COUNT],
    tracker: EpisodeTracker,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

/// Optional per-step trace of environment 0 (CLI `--trace`).
struct TraceWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl TraceWriter {
    fn create(path: &Path) -> Result<Self> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut cols = vec![
            "time".to_string(),
            "px".into(),
            "py".into(),
            "pz".into(),
            "qw".into(),
            "qx".into(),
            "qy".into(),
            "qz".into(),
            "vx".into(),
            "vy".into(),
            "vz".into(),
            "wx".into(),
            "wy".into(),
            "wz".into(),
        ];
        for j in 0..JOINT_COUNT {
            cols.push(format!("q{j}"));
        }
        for j in 0..JOINT_COUNT {
            cols.push(format!("qd{j}"));
        }
        for t in TERM_NAMES {
            cols.push(format!("r_{t}"));
        }
        writeln!(out, "{}", cols.join(","))?;
        Ok(TraceWriter { out })
    }

    fn write(
        &mut self,
        env: &crate::sim::Environment,
        breakdown: &crate::rewards::RewardBreakdown,
    ) -> Result<()> {
        use std::io::Write;
        let s = &env.state;
        let q = s.base_quat.as_ref();
        let mut fields = vec![
            s.episode_time.to_string(),
            s.base_pos.x.to_string(),
            s.base_pos.y.to_string(),
            s.base_pos.z.to_string(),
            q.w.to_string(),
            q.i.to_string(),
            q.j.to_string(),
            q.k.to_string(),
            s.base_lin_vel.x.to_string(),
            s.base_lin_vel.y.to_string(),
            s.base_lin_vel.z.to_string(),
            s.base_ang_vel.x.to_string(),
            s.base_ang_vel.y.to_string(),
            s.base_ang_vel.z.to_string(),
        ];
        for j in 0..JOINT_COUNT {
            fields.push(s.joint_pos[j].to_string());
        }
        for j in 0..JOINT_COUNT {
            fields.push(s.joint_vel[j].to_string());
        }
        for t in breakdown.weighted {
            fields.push(t.to_string());
        }
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }
}

/// Batched teacher-phase inputs for one control step.
fn gather_states(
    pool: &mut EnvPool,
    blind: bool,
) -> (Vec<f32>, Vec<f32>) {
    let n = pool.len();
    let cfg = pool.cfg.clone();
    if blind {
        let mut states = vec![0.0f32; n * OBS_DIM];
        for (i, env) in pool.envs.iter_mut().enumerate() {
            let o = env.observe(&cfg);
            states[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&o);
        }
        (states, Vec::new())
    } else {
        use rayon::prelude::*;
        let rows: Vec<(Vec<f32>, [f32; 4])> = pool
            .envs
            .par_iter_mut()
            .map(|env| {
                let o = env.observe(&cfg);
                let op = env.privileged(&cfg);
                let scan = env.scan();
                let mut row = Vec::with_capacity(TEACHER_STATE_DIM);
                row.extend_from_slice(&o);
                row.extend_from_slice(&op);
                row.extend_from_slice(&scan);
                (row, env.terrain_one_hot())
            })
            .collect();
        let mut states = vec![0.0f32; n * TEACHER_STATE_DIM];
        let mut tp = vec![0.0f32; n * 4];
        for (i, (row, one_hot)) in rows.into_iter().enumerate() {
            states[i * TEACHER_STATE_DIM..(i + 1) * TEACHER_STATE_DIM].copy_from_slice(&row);
            tp[i * 4..(i + 1) * 4].copy_from_slice(&one_hot);
        }
        (states, tp)
    }
}

#[allow(clippy::too_many_arguments)]
fn collect_ppo_rollout(
    pool: &mut EnvPool,
    actor: &ActorCritic,
    store: &ParameterStore,
    buffer: &mut RolloutBuffer,
    rng: &mut impl Rng,
    blind: bool,
    trace: Option<&mut TraceWriter>,
) -> Result<RolloutAggregates> {
    let n = pool.len();
    let mut agg = RolloutAggregates {
        reward_mean: 0.0,
        term_means: [0.0; TERM_COUNT],
        tracker: EpisodeTracker {
            len_acc: 0.0,
            count: 0,
        },
    };
    let mut trace = trace;
    for step in 0..buffer.horizon {
        let (states, tp) = gather_states(pool, blind);
        let states_t = Tensor::new(vec![n, buffer.state_dim], states.clone())?;
        let tp_t = if blind {
            None
        } else {
            Some(Tensor::new(vec![n, 4], tp.clone())?)
        };
        let mut tape = Tape::new();
        let (mean, log_std, value) = actor.forward(&mut tape, store, &states_t, tp_t.as_ref())?;
        let mean_v = tape.value(mean).data().to_vec();
        let ls_v = tape.value(log_std).data().to_vec();
        let val_v: Vec<f64> = tape.value(value).data().iter().map(|v| *v as f64).collect();

        let mut actions_flat = vec![0.0f32; n * ACTION_DIM];
        let mut actions = vec![[0.0f64; JOINT_COUNT]; n];
        let mut logps = vec![0.0f64; n];
        for i in 0..n {
            let m = &mean_v[i * ACTION_DIM..(i + 1) * ACTION_DIM];
            let a = gaussian_sample(m, &ls_v, rng);
            logps[i] = gaussian_log_prob(m, &ls_v, &a);
            for j in 0..JOINT_COUNT {
                actions[i][j] = a[j] as f64;
            }
            actions_flat[i * ACTION_DIM..(i + 1) * ACTION_DIM].copy_from_slice(&a);
        }

        let outcomes = pool.step(&actions)?;
        let mut rewards = vec![0.0f64; n];
        let mut dones = vec![false; n];
        for (i, o) in outcomes.iter().enumerate() {
            rewards[i] = o.reward;
            dones[i] = o.done;
            agg.reward_mean += o.reward;
            for (k, t) in o.breakdown.weighted.iter().enumerate() {
                agg.term_means[k] += t;
            }
            if o.done {
                agg.tracker.count += 1;
                agg.tracker.len_acc += o.episode_length.unwrap_or(0.0);
            }
        }
        if let Some(tw) = trace.as_deref_mut() {
            tw.write(&pool.envs[0], &outcomes[0].breakdown)?;
        }
        buffer.log_std = ls_v;
        buffer.push_step(
            step,
            &states,
            &tp,
            &actions_flat,
            &mean_v,
            &logps,
            &val_v,
            &rewards,
            &dones,
        );
    }
    // bootstrap values
    let (states, tp) = gather_states(pool, blind);
    let states_t = Tensor::new(vec![n, buffer.state_dim], states)?;
    let tp_t = if blind {
        None
    } else {
        Some(Tensor::new(vec![n, 4], tp)?)
    };
    let mut tape = Tape::new();
    let (_, _, value) = actor.forward(&mut tape, store, &states_t, tp_t.as_ref())?;
    for (i, v) in tape.value(value).data().iter().enumerate() {
        buffer.bootstrap[i] = *v as f64;
    }
    let total = (buffer.horizon * n) as f64;
    agg.reward_mean /= total;
    for t in agg.term_means.iter_mut() {
        *t /= total;
    }
    Ok(agg)
}

/// Train the teacher (or the Blind baseline) with PPO over the curriculum.
pub fn train_teacher(cfg: &RunConfig, out_dir: &Path, trace: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let blind = !cfg.ablation.use_depth;
    let kind = if blind { "blind" } else { "teacher" };
    write_run_preamble(out_dir, cfg, kind, cfg.teacher_iterations)?;

    let mut pool = EnvPool::new(cfg.env_count, cfg.seed, cfg.env.clone())?;
    let mut rng = phase_rng(cfg.seed, 1);

    let teacher = TeacherPolicy::new(cfg.ablation.use_moe);
    let blind_policy = BlindPolicy::new();
    let mut store = ParameterStore::new();
    if blind {
        blind_policy.register(&mut store, &mut rng)?;
    } else {
        teacher.register(&mut store, &mut rng)?;
    }

    let state_dim = if blind { OBS_DIM } else { TEACHER_STATE_DIM };
    let terrain_dim = if blind { 0 } else { 4 };
    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let mut tracer = if trace {
        Some(TraceWriter::create(&out_dir.join("trace.csv"))?)
    } else {
        None
    };
    let ckpt_path = out_dir.join("teacher.ckpt");
    let mut lr = cfg.ppo.lr_init;
    let mut last_ep_len = 0.0;

    for iter in 0..cfg.teacher_iterations {
        let mut buffer = RolloutBuffer::new(cfg.ppo.horizon, cfg.env_count, state_dim, terrain_dim, ACTION_DIM);
        let actor = if blind {
            ActorCritic::Blind(&blind_policy)
        } else {
            ActorCritic::Teacher(&teacher)
        };
        let agg = collect_ppo_rollout(
            &mut pool,
            &actor,
            &store,
            &mut buffer,
            &mut rng,
            blind,
            tracer.as_mut(),
        )?;
        buffer.finalize(cfg.ppo.gamma, cfg.ppo.lam)?;
        let stats = match ppo_update(&buffer, &actor, &mut store, &cfg.ppo, &mut lr, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                // halt on numerical faults; the last checkpoint stays on disk
                return Err(e);
            }
        };

        if agg.tracker.count > 0 {
            last_ep_len = agg.tracker.len_acc / agg.tracker.count as f64;
        }
        let mut row = MetricsRow::zero(iter as u64);
        row.reward_mean = agg.reward_mean;
        row.ep_len_mean = last_ep_len;
        row.terrain_level = pool.mean_terrain_level();
        row.kl = stats.kl;
        row.loss_policy = stats.policy_loss;
        row.loss_value = stats.value_loss;
        row.terms = agg.term_means;
        metrics.write_row(&row)?;

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            save_store(&store, &out_dir.join(format!("{kind}_{:06}.ckpt", iter + 1)))?;
            save_store(&store, &ckpt_path)?;
        }
    }
    save_store(&store, &ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics_csv: out_dir.join("metrics.csv"),
    })
}

// ---------------------------------------------------------------------------
// student phase
// ---------------------------------------------------------------------------

/// Distill the student from a trained teacher checkpoint.
pub fn train_student(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    out_dir: &Path,
    trace: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.ablation.use_depth {
        return Err(Error::config(
            "ablation.use_depth",
            "the blind baseline is single-phase; it has no student",
        ));
    }
    let teacher_store = load_store(teacher_ckpt)?;
    match checkpoint_kind(&teacher_store) {
        Some("teacher") => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "expected a teacher checkpoint, found {:?} in {}",
                other,
                teacher_ckpt.display()
            )))
        }
    }
    let use_moe = teacher_store.contains("teacher.gate.w0");
    let teacher = TeacherPolicy::new(use_moe);

    write_run_preamble(out_dir, cfg, "student", cfg.student_iterations)?;
    let mut pool = EnvPool::new(cfg.env_count, cfg.seed, cfg.env.clone())?;
    let mut rng = phase_rng(cfg.seed, 2);

    let student = StudentPolicy::new(true);
    let mut store = ParameterStore::new();
    student.register(&mut store, &mut rng)?;
    student
        .init_head_from_teacher(&mut store, &teacher_store)
        .map_err(|e| Error::Checkpoint(format!("incompatible teacher checkpoint: {e}")))?;

    let mut dcfg = cfg.distill.clone();
    dcfg.use_barlow = cfg.ablation.use_barlow && cfg.distill.use_barlow;

    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let mut tracer = if trace {
        Some(TraceWriter::create(&out_dir.join("trace.csv"))?)
    } else {
        None
    };
    let mut carry = StudentCarry::new(cfg.env_count);
    let ckpt_path = out_dir.join("student.ckpt");
    let mut last_ep_len = 0.0;

    for iter in 0..cfg.student_iterations {
        let t0 = std::time::Instant::now();
        let (batch, roll) = collect_student_rollouts(
            &mut pool,
            &student,
            &store,
            &teacher,
            &teacher_store,
            &mut carry,
            &dcfg,
            &mut rng,
        )?;
        let t_collect = t0.elapsed();
        let t1 = std::time::Instant::now();
        let stats = distill_step(&batch, &student, &mut store, &dcfg)?;
        if std::env::var("PFLAB_TIMING").is_ok() {
            eprintln!("iter {iter}: collect {:.2}s distill {:.2}s", t_collect.as_secs_f64(), t1.elapsed().as_secs_f64());
        }
        if let Some(tw) = tracer.as_mut() {
            // trace rides on rewards computed inside the rollout; log the
            // current state with the most recent breakdown unavailable here,
            // so reuse a zero breakdown for structure
            let zero = crate::rewards::RewardBreakdown {
                unweighted: [0.0; TERM_COUNT],
                weighted: [0.0; TERM_COUNT],
                total: 0.0,
            };
            tw.write(&pool.envs[0], &zero)?;
        }

        if roll.episodes_finished > 0 {
            last_ep_len = roll.mean_episode_length;
        }
        let mut row = MetricsRow::zero(iter as u64);
        row.reward_mean = roll.mean_reward;
        row.ep_len_mean = last_ep_len;
        row.terrain_level = roll.mean_terrain_level;
        row.loss_mse = stats.mse;
        row.loss_bt_diag = stats.bt_diag;
        row.loss_bt_offdiag = stats.bt_offdiag;
        row.terms = roll.term_means;
        metrics.write_row(&row)?;

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            save_store(&store, &out_dir.join(format!("student_{:06}.ckpt", iter + 1)))?;
            save_store(&store, &ckpt_path)?;
        }
    }
    save_store(&store, &ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics_csv: out_dir.join("metrics.csv"),
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TerrainEvalStats {
    pub episodes: usize,
    pub velocity_error: f64,
    pub height_error: f64,
    pub survival_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub velocity_error: f64,
    pub height_error: f64,
    pub survival_s: f64,
    pub episodes: usize,
    pub per_terrain: std::collections::BTreeMap<String, TerrainEvalStats>,
}

/// What drives the robots during evaluation.
pub enum EvalActor<'a> {
    Teacher(&'a TeacherPolicy, &'a ParameterStore),
    Blind(&'a BlindPolicy, &'a ParameterStore),
    Student(&'a StudentPolicy, &'a ParameterStore, &'a TeacherPolicy),
    /// Scripted baseline: zero actions (holds the default pose).
    ZeroAction,
    /// Upper-bound harness check: base velocity is written to the command
    /// directly, bypassing the controller.
    VelocityOracle,
}

/// Run one evaluation episode per environment (first episode only counts),
/// 1/4 of the fleet per terrain type, under the evaluation cap.
pub fn evaluate(cfg: &RunConfig, actor: &EvalActor) -> Result<EvalReport> {
    let mut env_cfg = cfg.env.clone();
    env_cfg.fixed_difficulty = Some(cfg.eval.difficulty);
    env_cfg.curriculum_enabled = false;
    env_cfg.episode_length_s = cfg.eval.episode_cap_s;
    env_cfg.terrain_mix = [0.25, 0.25, 0.25, 0.25];
    let n = cfg.eval.env_count;
    let mut pool = EnvPool::new(n, cfg.eval.seed, env_cfg)?;
    let mut carry = StudentCarry::new(n);

    let mut finished = vec![false; n];
    let mut vel_err = vec![0.0f64; n];
    let mut height_err = vec![0.0f64; n];
    let mut steps = vec![0usize; n];
    let mut survival = vec![0.0f64; n];
    let kinds: Vec<TerrainKind> = pool.envs.iter().map(|e| e.curriculum.kind).collect();

    let max_steps =
        (cfg.eval.episode_cap_s / crate::sim::state::CONTROL_DT).ceil() as usize + 2;
    let cfg_env = pool.cfg.clone();

    for _step in 0..max_steps {
        if finished.iter().all(|f| *f) {
            break;
        }
        // the oracle pins the base velocity to the command (sim shortcut),
        // before statistics are recorded
        if matches!(actor, EvalActor::VelocityOracle) {
            for env in pool.envs.iter_mut() {
                // pin through the full rotation: tracking is measured in the
                // body frame
                let v = nalgebra::Vector3::new(env.cmd.vx, env.cmd.vy, 0.0);
                env.state.base_lin_vel = env.state.base_quat * v;
                env.state.base_ang_vel.z = env.cmd.wz;
            }
        }
        // per-step tracking statistics for unfinished envs
        for (i, env) in pool.envs.iter().enumerate() {
            if finished[i] {
                continue;
            }
            let v_body = env.state.lin_vel_body();
            let ex = env.cmd.vx - v_body.x;
            let ey = env.cmd.vy - v_body.y;
            vel_err[i] += (ex * ex + ey * ey).sqrt();
            height_err[i] += (0.66 - env.state.base_clearance).abs();
            steps[i] += 1;
        }

        let actions = eval_actions(&mut pool, actor, &mut carry, &cfg_env)?;
        let outcomes = pool.step(&actions)?;
        for (i, o) in outcomes.iter().enumerate() {
            if finished[i] {
                continue;
            }
            if o.done {
                finished[i] = true;
                survival[i] = o
                    .episode_length
                    .unwrap_or(0.0)
                    .min(cfg.eval.episode_cap_s);
                if o.termination == Some(Termination::TimeOut) {
                    survival[i] = cfg.eval.episode_cap_s;
                }
                carry.reset_env(i);
            }
        }
    }
    // anything still running at the cap counts as full survival
    for i in 0..n {
        if !finished[i] {
            survival[i] = cfg.eval.episode_cap_s;
        }
    }

    let mut report = EvalReport {
        episodes: n,
        ..Default::default()
    };
    let mut per: std::collections::BTreeMap<String, (usize, f64, f64, f64)> = Default::default();
    for i in 0..n {
        let ve = vel_err[i] / steps[i].max(1) as f64;
        let he = height_err[i] / steps[i].max(1) as f64;
        report.velocity_error += ve;
        report.height_error += he;
        report.survival_s += survival[i];
        let e = per.entry(kinds[i].name().to_string()).or_default();
        e.0 += 1;
        e.1 += ve;
        e.2 += he;
        e.3 += survival[i];
    }
    report.velocity_error /= n as f64;
    report.height_error /= n as f64;
    report.survival_s /= n as f64;
    for (k, (count, ve, he, sv)) in per {
        report.per_terrain.insert(
            k,
            TerrainEvalStats {
                episodes: count,
                velocity_error: ve / count as f64,
                height_error: he / count as f64,
                survival_s: sv / count as f64,
            },
        );
    }
    Ok(report)
}

/// Deterministic (mean) actions for the evaluation fleet.
fn eval_actions(
    pool: &mut EnvPool,
    actor: &EvalActor,
    carry: &mut StudentCarry,
    cfg_env: &EnvConfig,
) -> Result<Vec<[f64; JOINT_COUNT]>> {
    let n = pool.len();
    let zeros = vec![[0.0f64; JOINT_COUNT]; n];
    match actor {
        EvalActor::ZeroAction | EvalActor::VelocityOracle => Ok(zeros),
        EvalActor::Blind(policy, store) => {
            let (states, _) = gather_states(pool, true);
            let states_t = Tensor::new(vec![n, OBS_DIM], states)?;
            let mut tape = Tape::new();
            let ac = ActorCritic::Blind(policy);
            let (mean, _, _) = ac.forward(&mut tape, store, &states_t, None)?;
            Ok(mean_to_actions(tape.value(mean).data(), n))
        }
        EvalActor::Teacher(policy, store) => {
            let (states, tp) = gather_states(pool, false);
            let states_t = Tensor::new(vec![n, TEACHER_STATE_DIM], states)?;
            let tp_t = Tensor::new(vec![n, 4], tp)?;
            let mut tape = Tape::new();
            let ac = ActorCritic::Teacher(policy);
            let (mean, _, _) = ac.forward(&mut tape, store, &states_t, Some(&tp_t))?;
            Ok(mean_to_actions(tape.value(mean).data(), n))
        }
        EvalActor::Student(policy, store, _teacher) => {
            use rayon::prelude::*;
            let per_env: Vec<Result<[f32; OBS_DIM]>> = pool
                .envs
                .par_iter_mut()
                .map(|env| {
                    let o = env.observe(cfg_env);
                    env.update_depth(cfg_env)?;
                    Ok(o)
                })
                .collect();
            let mut obs_step = vec![0.0f32; n * OBS_DIM];
            for (i, r) in per_env.into_iter().enumerate() {
                let o = r?;
                obs_step[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&o);
                carry.push_obs(i, &o);
            }
            let mut depth = vec![0.0f32; n * DEPTH_OUT_H * DEPTH_OUT_W];
            for (i, env) in pool.envs.iter().enumerate() {
                depth[i * DEPTH_OUT_H * DEPTH_OUT_W..(i + 1) * DEPTH_OUT_H * DEPTH_OUT_W]
                    .copy_from_slice(&env.depth);
            }
            let mut tape = Tape::new();
            let h = tape.input(Tensor::new(
                vec![n, STUDENT_HISTORY_DIM],
                carry.history.clone(),
            )?);
            let d = tape.input(Tensor::new(vec![n, DEPTH_OUT_H, DEPTH_OUT_W, 1], depth)?);
            let hid = tape.input(Tensor::new(
                vec![n, STUDENT_HIDDEN_DIM],
                carry.hidden.clone(),
            )?);
            let o = tape.input(Tensor::new(vec![n, OBS_DIM], obs_step)?);
            let (z, hidden_next) = policy.encode(&mut tape, store, h, d, hid)?;
            let dist = policy.action_dist(&mut tape, store, z, o)?;
            carry.hidden.copy_from_slice(tape.value(hidden_next).data());
            Ok(mean_to_actions(tape.value(dist.mean).data(), n))
        }
    }
}

fn mean_to_actions(mean: &[f32], n: usize) -> Vec<[f64; JOINT_COUNT]> {
    let mut out = vec![[0.0f64; JOINT_COUNT]; n];
    for i in 0..n {
        for j in 0..JOINT_COUNT {
            out[i][j] = mean[i * ACTION_DIM + j] as f64;
        }
    }
    out
}

/// Evaluate a checkpoint file, detecting the policy family from its
/// parameter names.
pub fn evaluate_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<EvalReport> {
    let store = load_store(ckpt)?;
    match checkpoint_kind(&store) {
        Some("teacher") => {
            let teacher = TeacherPolicy::new(store.contains("teacher.gate.w0"));
            evaluate(cfg, &EvalActor::Teacher(&teacher, &store))
        }
        Some("blind") => {
            let blind = BlindPolicy::new();
            evaluate(cfg, &EvalActor::Blind(&blind, &store))
        }
        Some("student") => {
            let student = StudentPolicy::new(true);
            let teacher = TeacherPolicy::new(true);
            evaluate(cfg, &EvalActor::Student(&student, &store, &teacher))
        }
        other => Err(Error::Checkpoint(format!(
            "cannot evaluate checkpoint of kind {other:?}"
        ))),
    }
}
