//! Environment orchestration: one robot per terrain tile stepped at the
//! control rate (4 physics substeps per policy query), with curriculum,
//! command/domain resampling, pushes, termination, and auto-reset.
//!
//! Environments are data-parallel: each owns its state, terrain tile, and
//! RNG; batched stepping uses rayon with no shared mutable state.

pub mod dynamics;
pub mod gait;
pub mod observe;
pub mod state;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depthcam::{
    preprocess_depth, randomize_camera, render_depth, CameraModel, CameraRandomization,
};
use crate::error::Result;
use crate::rewards::{compute_rewards, RewardBreakdown, RewardConfig};
use crate::terrain::{
    curriculum_update, generate_terrain, height_scan, CurriculumState, HeightField, TerrainKind,
    DEFAULT_MAX_LEVEL,
};
use dynamics::{check_termination, spawn_state, substep, StepParams};
use observe::{
    apply_push, assemble_observation, assemble_privileged, DelayBuffer, ObservationNoise,
    SensorSnapshot, OBS_DIM, PRIVILEGED_DIM,
};
use state::{
    pd_torque, sample_command, sample_domain, Command, CommandRanges, DomainParams,
    DomainRandomization, PDController, RobotState, Termination, CONTROL_DT, DECIMATION,
    JOINT_COUNT, SIM_DT,
};

/// Policy-input depth resolution.
pub const DEPTH_OUT_H: usize = 48;
pub const DEPTH_OUT_W: usize = 64;
pub const DEPTH_DIM: usize = DEPTH_OUT_H * DEPTH_OUT_W;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub terrain_extent: f64,
    pub terrain_cell: f64,
    pub max_level: u32,
    /// Terrain mix proportions [plane, rough, slope, stair]; normalized.
    pub terrain_mix: [f64; 4],
    pub commands: CommandRanges,
    pub domain: DomainRandomization,
    pub noise: ObservationNoise,
    pub pd: PDController,
    pub rewards: RewardConfig,
    pub camera: CameraModel,
    pub camera_rand: CameraRandomization,
    /// Seconds between command resamples.
    pub command_resample_s: f64,
    /// Render cadence in control steps (hold-last between renders).
    pub depth_every_ctrl_steps: usize,
    /// Fixed difficulty override (evaluation); disables the curriculum.
    pub fixed_difficulty: Option<f64>,
    pub curriculum_enabled: bool,
    /// Episode cap, seconds (training 20; evaluation uses 100).
    pub episode_length_s: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            terrain_extent: 8.0,
            terrain_cell: 0.05,
            max_level: DEFAULT_MAX_LEVEL,
            terrain_mix: [0.25, 0.25, 0.25, 0.25],
            commands: CommandRanges::default(),
            domain: DomainRandomization::default(),
            noise: ObservationNoise::default(),
            pd: PDController::default(),
            rewards: RewardConfig::default(),
            camera: CameraModel::default(),
            camera_rand: CameraRandomization::default(),
            command_resample_s: 5.0,
            depth_every_ctrl_steps: 5,
            fixed_difficulty: None,
            curriculum_enabled: true,
            episode_length_s: dynamics::EPISODE_LENGTH_S,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.rewards.validate()?;
        self.camera.validate()?;
        if self.terrain_extent <= 0.0 || self.terrain_cell <= 0.0 {
            return Err(crate::error::Error::config(
                "env.terrain_extent",
                "must be positive",
            ));
        }
        if self.terrain_mix.iter().any(|p| *p < 0.0) || self.terrain_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(crate::error::Error::config(
                "env.terrain_mix",
                "proportions must be nonnegative and sum > 0",
            ));
        }
        Ok(())
    }
}

/// Outcome of one control step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub breakdown: RewardBreakdown,
    pub reward: f64,
    pub done: bool,
    pub termination: Option<Termination>,
    /// Episode return of the episode that just ended (if done).
    pub episode_return: Option<f64>,
    pub episode_length: Option<f64>,
}

/// One robot + tile + curriculum slot.
pub struct Environment {
    pub id: usize,
    rng: ChaCha8Rng,
    pub hf: HeightField,
    pub curriculum: CurriculumState,
    /// Metric flag: an env that has graduated past the top level keeps
    /// counting as max level even after resampling a lower tile.
    pub graduated: bool,
    pub state: RobotState,
    pub params: DomainParams,
    pub cmd: Command,
    pub camera: CameraModel,
    /// Hold-last processed depth (48 x 64 in [-0.5, 0.5]).
    pub depth: Vec<f32>,
    delay: DelayBuffer,
    spawn_xy: [f64; 2],
    ctrl_steps: usize,
    next_push_at: f64,
    next_cmd_at: f64,
    cmd_speed_integral: f64,
    episode_return: f64,
    /// Terrain tile seed base.
    tile_seed: u64,
}

fn env_rng(master_seed: u64, id: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        master_seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(id as u64)
            .wrapping_add(stream << 48),
    )
}

impl Environment {
    pub fn new(id: usize, kind: TerrainKind, master_seed: u64, cfg: &EnvConfig) -> Result<Self> {
        let mut rng = env_rng(master_seed, id, 1);
        let level = 0;
        let curriculum = CurriculumState::new(kind, level, cfg.max_level);
        let difficulty = cfg.fixed_difficulty.unwrap_or(curriculum.difficulty());
        let tile_seed = master_seed.wrapping_add((id as u64) << 20);
        let hf = generate_terrain(
            kind,
            difficulty,
            cfg.terrain_extent,
            cfg.terrain_cell,
            tile_seed,
        )?;
        let params = sample_domain(&cfg.domain, &mut rng);
        let cmd = sample_command(&cfg.commands, &mut rng);
        let camera = randomize_camera(&cfg.camera, &cfg.camera_rand, &mut rng);
        let x = rng.gen_range(-0.3..0.3);
        let y = rng.gen_range(-0.3..0.3);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let state = spawn_state(&hf, x, y, yaw, &cfg.pd.default_pos, params.payload_mass);
        let mut env = Environment {
            id,
            rng,
            hf,
            curriculum,
            graduated: false,
            state,
            params,
            cmd,
            camera,
            depth: vec![0.0; DEPTH_DIM],
            delay: DelayBuffer::default(),
            spawn_xy: [x, y],
            ctrl_steps: 0,
            next_push_at: cfg.domain.push_interval_s,
            next_cmd_at: cfg.command_resample_s,
            cmd_speed_integral: 0.0,
            episode_return: 0.0,
            tile_seed,
        };
        env.delay.push(SensorSnapshot::capture(&env.state));
        Ok(env)
    }

    /// Metric level: graduation pins the reported level at the top.
    pub fn metric_level(&self) -> f64 {
        if self.graduated {
            self.curriculum.max_level as f64
        } else {
            self.curriculum.level as f64
        }
    }

    /// Normalized traversal outcome for the curriculum: distance walked over
    /// the commanded-distance reference (clamped to the half-tile).
    fn episode_outcome(&self, cfg: &EnvConfig) -> f64 {
        let dx = self.state.base_pos.x - self.spawn_xy[0];
        let dy = self.state.base_pos.y - self.spawn_xy[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let mean_speed = if self.state.episode_time > 1e-9 {
            self.cmd_speed_integral / self.state.episode_time
        } else {
            0.0
        };
        let half_extent = (self.hf.nodes().0 - 1) as f64 * self.hf.cell_size / 2.0;
        let reference = (mean_speed * cfg.episode_length_s).clamp(0.5, half_extent);
        (dist / reference).clamp(0.0, 1.0)
    }

    /// Advance one control step under `action`; auto-resets on termination.
    pub fn control_step(&mut self, action: &[f64; JOINT_COUNT], cfg: &EnvConfig) -> Result<StepOutcome> {
        self.state.touchdowns.clear();
        self.state.collision_points = 0;

        let mut fault = None;
        for _ in 0..DECIMATION {
            let tau = pd_torque(
                action,
                &self.state.joint_pos,
                &self.state.joint_vel,
                &cfg.pd,
                self.params.kp_factor,
                self.params.kd_factor,
            );
            let step_params = StepParams {
                friction: self.params.friction,
                restitution: self.params.restitution,
                payload_mass: self.params.payload_mass,
                com_shift: Vector3::from(self.params.com_shift),
            };
            if let Some(t) = substep(&mut self.state, &tau, &self.hf, &step_params, SIM_DT) {
                fault = Some(t);
                break;
            }
            self.delay.push(SensorSnapshot::capture(&self.state));
        }

        let breakdown = if fault.is_none() {
            compute_rewards(&self.state, action, &self.cmd, &cfg.rewards)?
        } else {
            RewardBreakdown {
                unweighted: [0.0; crate::rewards::TERM_COUNT],
                weighted: [0.0; crate::rewards::TERM_COUNT],
                total: 0.0,
            }
        };
        self.episode_return += breakdown.total;

        // history fields for the finite-difference terms
        let v_body = self.state.lin_vel_body();
        let ax = (v_body.x - self.state.prev_lin_vel_body_xy[0]) / CONTROL_DT;
        let ay = (v_body.y - self.state.prev_lin_vel_body_xy[1]) / CONTROL_DT;
        self.state.prev_lin_accel_xy = [ax, ay];
        self.state.prev_lin_vel_body_xy = [v_body.x, v_body.y];
        self.state.prev_joint_vel = self.state.joint_vel;
        self.state.prev_action = *action;

        self.cmd_speed_integral +=
            (self.cmd.vx * self.cmd.vx + self.cmd.vy * self.cmd.vy).sqrt() * CONTROL_DT;
        self.ctrl_steps += 1;

        if self.state.episode_time >= self.next_push_at {
            apply_push(&mut self.state, self.params.push_vel, &mut self.rng);
            self.next_push_at += cfg.domain.push_interval_s;
        }
        if self.state.episode_time >= self.next_cmd_at {
            self.cmd = sample_command(&cfg.commands, &mut self.rng);
            self.next_cmd_at += cfg.command_resample_s;
        }

        let termination = fault.or_else(|| check_termination(&self.state, cfg.episode_length_s));
        if let Some(term) = termination {
            let ep_return = self.episode_return;
            let ep_len = self.state.episode_time;
            self.finish_episode(term, cfg)?;
            return Ok(StepOutcome {
                reward: breakdown.total,
                breakdown,
                done: true,
                termination: Some(term),
                episode_return: Some(ep_return),
                episode_length: Some(ep_len),
            });
        }

        Ok(StepOutcome {
            reward: breakdown.total,
            breakdown,
            done: false,
            termination: None,
            episode_return: None,
            episode_length: None,
        })
    }

    fn finish_episode(&mut self, _term: Termination, cfg: &EnvConfig) -> Result<()> {
        if cfg.curriculum_enabled && cfg.fixed_difficulty.is_none() {
            let outcome = self.episode_outcome(cfg);
            let at_top = self.curriculum.level >= self.curriculum.max_level;
            let before = self.curriculum.level;
            curriculum_update(&mut self.curriculum, outcome, &mut self.rng);
            if at_top && outcome > crate::terrain::PROMOTE_THRESHOLD {
                self.graduated = true;
            }
            if self.curriculum.level < before && !at_top {
                // a real demotion clears the graduation metric pin
                self.graduated = false;
            }
        }
        self.reset(cfg)
    }

    /// Fresh episode: regenerate the tile at the current level, resample
    /// domain params, command, and camera, respawn on the platform.
    pub fn reset(&mut self, cfg: &EnvConfig) -> Result<()> {
        let difficulty = cfg
            .fixed_difficulty
            .unwrap_or(self.curriculum.difficulty());
        if (difficulty - self.hf.difficulty).abs() > 1e-12 {
            self.hf = generate_terrain(
                self.curriculum.kind,
                difficulty,
                cfg.terrain_extent,
                cfg.terrain_cell,
                self.tile_seed.wrapping_add(self.curriculum.level as u64),
            )?;
        }
        self.params = sample_domain(&cfg.domain, &mut self.rng);
        self.cmd = sample_command(&cfg.commands, &mut self.rng);
        self.camera = randomize_camera(&cfg.camera, &cfg.camera_rand, &mut self.rng);
        let x = self.rng.gen_range(-0.3..0.3);
        let y = self.rng.gen_range(-0.3..0.3);
        let yaw = self
            .rng
            .gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        self.state = spawn_state(&self.hf, x, y, yaw, &cfg.pd.default_pos, self.params.payload_mass);
        self.spawn_xy = [x, y];
        self.delay.clear();
        self.delay.push(SensorSnapshot::capture(&self.state));
        self.depth.iter_mut().for_each(|v| *v = 0.0);
        self.ctrl_steps = 0;
        self.next_push_at = cfg.domain.push_interval_s;
        self.next_cmd_at = cfg.command_resample_s;
        self.cmd_speed_integral = 0.0;
        self.episode_return = 0.0;
        Ok(())
    }

    /// Proprioceptive observation with noise and the randomized step delay.
    pub fn observe(&mut self, cfg: &EnvConfig) -> [f32; OBS_DIM] {
        let snap = *self
            .delay
            .delayed(self.params.step_delay_ms)
            .expect("delay buffer never empty");
        assemble_observation(&self.state, &snap, &self.cmd, &cfg.noise, &mut self.rng)
    }

    pub fn privileged(&self, cfg: &EnvConfig) -> [f32; PRIVILEGED_DIM] {
        assemble_privileged(&self.state, &self.params, &cfg.domain)
    }

    /// Teacher height scan around the base.
    pub fn scan(&self) -> Vec<f32> {
        let (roll, pitch, yaw) = self.state.base_quat.euler_angles();
        let _ = (roll, pitch);
        height_scan(
            &self.hf,
            [self.state.base_pos.x, self.state.base_pos.y],
            self.state.base_pos.z,
            yaw,
        )
    }

    /// Terrain one-hot.
    pub fn terrain_one_hot(&self) -> [f32; 4] {
        let mut t = [0.0; 4];
        t[self.curriculum.kind.index()] = 1.0;
        t
    }

    /// Re-render held-last depth if due at this control step.
    pub fn update_depth(&mut self, cfg: &EnvConfig) -> Result<bool> {
        let due = self.ctrl_steps % cfg.depth_every_ctrl_steps == 0;
        if due {
            let img = render_depth(
                &self.hf,
                self.state.base_pos,
                &self.state.base_quat,
                &self.camera,
                self.state.episode_time,
            );
            self.depth = preprocess_depth(
                &img,
                self.camera.near,
                self.camera.far,
                DEPTH_OUT_H,
                DEPTH_OUT_W,
            )?;
        }
        Ok(due)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Vector of environments with deterministic parallel stepping.
pub struct EnvPool {
    pub envs: Vec<Environment>,
    pub cfg: EnvConfig,
}

impl EnvPool {
    /// Terrain kinds assigned by the mix proportions, round-robin.
    pub fn new(count: usize, master_seed: u64, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let total: f64 = cfg.terrain_mix.iter().sum();
        let mut envs = Vec::with_capacity(count);
        let mut acc = [0.0f64; 4];
        let mut cum = 0.0;
        for (i, p) in cfg.terrain_mix.iter().enumerate() {
            cum += p / total;
            acc[i] = cum;
        }
        for id in 0..count {
            let u = (id as f64 + 0.5) / count as f64;
            let kind_idx = acc.iter().position(|c| u <= *c + 1e-12).unwrap_or(3);
            let kind = TerrainKind::ALL[kind_idx];
            envs.push(Environment::new(id, kind, master_seed, &cfg)?);
        }
        Ok(EnvPool { envs, cfg })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    /// Step every environment in parallel; slot i gets action i.
    pub fn step(&mut self, actions: &[[f64; JOINT_COUNT]]) -> Result<Vec<StepOutcome>> {
        assert_eq!(actions.len(), self.envs.len());
        let cfg = &self.cfg;
        self.envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(env, action)| env.control_step(action, cfg))
            .collect()
    }

    /// Mean metric terrain level over environments.
    pub fn mean_terrain_level(&self) -> f64 {
        if self.envs.is_empty() {
            return 0.0;
        }
        self.envs.iter().map(|e| e.metric_level()).sum::<f64>() / self.envs.len() as f64
    }
}
