//! Observation assembly: proprioception (29-d), privileged vector (11-d),
//! sensor noise, and step-delay handling.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::gait::{gait_phase, Foot};
use crate::sim::state::{Command, DomainParams, DomainRandomization, RobotState, JOINT_COUNT, SIM_DT};

pub const OBS_DIM: usize = 29;
pub const PRIVILEGED_DIM: usize = 11;

/// Additive uniform observation noise amplitudes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationNoise {
    pub ang_vel: f64,
    pub gravity: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
}

impl Default for ObservationNoise {
    fn default() -> Self {
        ObservationNoise {
            ang_vel: 0.2,
            gravity: 0.05,
            joint_pos: 0.01,
            joint_vel: 0.1,
        }
    }
}

impl ObservationNoise {
    pub const NONE: ObservationNoise = ObservationNoise {
        ang_vel: 0.0,
        gravity: 0.0,
        joint_pos: 0.0,
        joint_vel: 0.0,
    };
}

/// Sensor snapshot taken at a substep boundary; the delay buffer serves
/// these back after the randomized step delay.
#[derive(Debug, Clone, Copy)]
pub struct SensorSnapshot {
    pub ang_vel: [f64; 3],
    pub gravity: [f64; 3],
    pub joint_pos: [f64; JOINT_COUNT],
    pub joint_vel: [f64; JOINT_COUNT],
}

impl SensorSnapshot {
    pub fn capture(state: &RobotState) -> Self {
        let g = state.gravity_body();
        SensorSnapshot {
            ang_vel: state.base_ang_vel.into(),
            gravity: g.into(),
            joint_pos: state.joint_pos,
            joint_vel: state.joint_vel,
        }
    }
}

/// Ring of recent snapshots; index 0 is the newest.
#[derive(Debug, Clone, Default)]
pub struct DelayBuffer {
    snaps: Vec<SensorSnapshot>,
}

impl DelayBuffer {
    pub fn push(&mut self, snap: SensorSnapshot) {
        self.snaps.insert(0, snap);
        self.snaps.truncate(8);
    }

    /// Snapshot delayed by `delay_ms`, quantized to substeps.
    pub fn delayed(&self, delay_ms: f64) -> Option<&SensorSnapshot> {
        if self.snaps.is_empty() {
            return None;
        }
        let steps = (delay_ms * 1e-3 / SIM_DT).round() as usize;
        let idx = steps.min(self.snaps.len() - 1);
        self.snaps.get(idx)
    }

    pub fn clear(&mut self) {
        self.snaps.clear();
    }
}

/// The 29-d proprioceptive observation:
/// [w (3), g (3), q (6), qd (6), prev action (6), command (3), phase (2)].
pub fn assemble_observation(
    state: &RobotState,
    snapshot: &SensorSnapshot,
    cmd: &Command,
    noise: &ObservationNoise,
    rng: &mut impl Rng,
) -> [f32; OBS_DIM] {
    let mut out = [0.0f32; OBS_DIM];
    let jitter = |amp: f64, rng: &mut dyn rand::RngCore| -> f64 {
        if amp == 0.0 {
            0.0
        } else {
            rng.gen_range(-amp..=amp)
        }
    };
    let mut k = 0;
    for i in 0..3 {
        out[k] = (snapshot.ang_vel[i] + jitter(noise.ang_vel, rng)) as f32;
        k += 1;
    }
    for i in 0..3 {
        out[k] = (snapshot.gravity[i] + jitter(noise.gravity, rng)) as f32;
        k += 1;
    }
    for i in 0..JOINT_COUNT {
        out[k] = (snapshot.joint_pos[i] + jitter(noise.joint_pos, rng)) as f32;
        k += 1;
    }
    for i in 0..JOINT_COUNT {
        out[k] = (snapshot.joint_vel[i] + jitter(noise.joint_vel, rng)) as f32;
        k += 1;
    }
    for i in 0..JOINT_COUNT {
        out[k] = state.prev_action[i] as f32;
        k += 1;
    }
    out[k] = cmd.vx as f32;
    out[k + 1] = cmd.vy as f32;
    out[k + 2] = cmd.wz as f32;
    k += 3;
    out[k] = gait_phase(state.gait_time, Foot::Left) as f32;
    out[k + 1] = gait_phase(state.gait_time, Foot::Right) as f32;
    debug_assert_eq!(k + 2, OBS_DIM);
    out
}

fn normalize(v: f64, range: [f64; 2]) -> f32 {
    let mid = 0.5 * (range[0] + range[1]);
    let half = 0.5 * (range[1] - range[0]);
    if half == 0.0 {
        0.0
    } else {
        ((v - mid) / half) as f32
    }
}

/// The 11-d privileged vector, each entry mapped to [-1, 1] over its
/// randomization range; base velocity is scaled by a 1 m/s half-range.
pub fn assemble_privileged(
    state: &RobotState,
    params: &DomainParams,
    ranges: &DomainRandomization,
) -> [f32; PRIVILEGED_DIM] {
    let mut out = [0.0f32; PRIVILEGED_DIM];
    out[0] = normalize(params.payload_mass, ranges.payload_mass_kg);
    out[1] = normalize(params.com_shift[0] * 1e2, ranges.com_shift_x_cm);
    out[2] = normalize(params.com_shift[1] * 1e2, ranges.com_shift_y_cm);
    out[3] = normalize(params.com_shift[2] * 1e2, ranges.com_shift_z_cm);
    out[4] = normalize(params.kp_factor, ranges.kp_factor);
    out[5] = normalize(params.kd_factor, ranges.kd_factor);
    out[6] = normalize(params.friction, ranges.friction);
    out[7] = normalize(params.restitution, ranges.restitution);
    let v_body: Vector3<f64> = state.lin_vel_body();
    out[8] = v_body.x as f32;
    out[9] = v_body.y as f32;
    out[10] = v_body.z as f32;
    out
}

/// Horizontal push: velocity impulse up to `max_speed` in a random direction.
pub fn apply_push(state: &mut RobotState, max_speed: f64, rng: &mut impl Rng) {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.0..=max_speed);
    state.base_lin_vel.x += speed * angle.cos();
    state.base_lin_vel.y += speed * angle.sin();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::dynamics::spawn_state;
    use crate::sim::state::PDController;
    use crate::terrain::{generate_terrain, TerrainKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standing_state() -> RobotState {
        let hf = generate_terrain(TerrainKind::Plane, 0.0, 8.0, 0.05, 0).unwrap();
        let pd = PDController::default();
        spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0)
    }

    #[test]
    fn observation_has_29_dims_and_identity_gravity() {
        let state = standing_state();
        let snap = SensorSnapshot::capture(&state);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = assemble_observation(
            &state,
            &snap,
            &Command::ZERO,
            &ObservationNoise::NONE,
            &mut rng,
        );
        assert_eq!(obs.len(), OBS_DIM);
        // upright at rest: gravity in base frame is (0, 0, -1)
        assert!((obs[3]).abs() < 1e-6);
        assert!((obs[4]).abs() < 1e-6);
        assert!((obs[5] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn phase_entries_at_quarter_period() {
        let mut state = standing_state();
        state.gait_time = 0.125;
        let snap = SensorSnapshot::capture(&state);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = assemble_observation(
            &state,
            &snap,
            &Command::ZERO,
            &ObservationNoise::NONE,
            &mut rng,
        );
        assert_eq!(obs[27], 0.0, "left foot commanded swing");
        assert_eq!(obs[28], 1.0, "right foot commanded stance");
    }

    #[test]
    fn observation_is_deterministic_for_fixed_seed() {
        let state = standing_state();
        let snap = SensorSnapshot::capture(&state);
        let noise = ObservationNoise::default();
        let a = assemble_observation(
            &state,
            &snap,
            &Command::ZERO,
            &noise,
            &mut ChaCha8Rng::seed_from_u64(11),
        );
        let b = assemble_observation(
            &state,
            &snap,
            &Command::ZERO,
            &noise,
            &mut ChaCha8Rng::seed_from_u64(11),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn privileged_vector_is_zero_at_nominal_midpoint() {
        let state = standing_state();
        let ranges = DomainRandomization::default();
        let params = DomainParams::nominal(&ranges);
        let op = assemble_privileged(&state, &params, &ranges);
        assert_eq!(op.len(), PRIVILEGED_DIM);
        for (i, v) in op.iter().enumerate() {
            assert!(v.abs() < 1e-6, "entry {i} = {v}");
        }
    }

    #[test]
    fn privileged_friction_at_range_max_is_plus_one() {
        let state = standing_state();
        let ranges = DomainRandomization::default();
        let mut params = DomainParams::nominal(&ranges);
        params.friction = 1.6;
        let op = assemble_privileged(&state, &params, &ranges);
        assert!((op[6] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn push_changes_horizontal_speed_at_most_by_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let mut state = standing_state();
            let before = state.base_lin_vel;
            apply_push(&mut state, 0.5, &mut rng);
            let delta = (state.base_lin_vel - before).norm();
            assert!(delta <= 0.5 + 1e-12);
            assert_eq!(state.base_lin_vel.z, before.z);
        }
    }

    #[test]
    fn delay_buffer_serves_older_snapshots() {
        let mut state = standing_state();
        let mut buf = DelayBuffer::default();
        for k in 0..4 {
            state.joint_pos[0] = k as f64;
            buf.push(SensorSnapshot::capture(&state));
        }
        assert_eq!(buf.delayed(0.0).unwrap().joint_pos[0], 3.0);
        assert_eq!(buf.delayed(5.0).unwrap().joint_pos[0], 2.0);
        assert_eq!(buf.delayed(15.0).unwrap().joint_pos[0], 0.0);
        // quantization rounds to the nearest substep
        assert_eq!(buf.delayed(7.4).unwrap().joint_pos[0], 2.0);
        assert_eq!(buf.delayed(7.6).unwrap().joint_pos[0], 1.0);
    }
}
