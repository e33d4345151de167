//! Robot state, commands, domain randomization draws, and the PD controller.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Joint order: [L hip roll, L hip pitch, L knee, R hip roll, R hip pitch,
/// R knee].
pub const JOINT_COUNT: usize = 6;

/// Physics substep, seconds.
pub const SIM_DT: f64 = 0.005;
/// Physics substeps per control step.
pub const DECIMATION: usize = 4;
/// Control step, seconds.
pub const CONTROL_DT: f64 = SIM_DT * DECIMATION as f64;

/// Contact flag threshold, newtons.
pub const CONTACT_FORCE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

impl Command {
    pub const ZERO: Command = Command {
        vx: 0.0,
        vy: 0.0,
        wz: 0.0,
    };
}

/// Sampling ranges for commands (Table-style [lo, hi] pairs).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRanges {
    pub vx: [f64; 2],
    pub vy: [f64; 2],
    pub wz: [f64; 2],
}

impl Default for CommandRanges {
    fn default() -> Self {
        CommandRanges {
            vx: [-0.5, 0.5],
            vy: [-0.2, 0.2],
            wz: [-0.5, 0.5],
        }
    }
}

pub fn sample_command(ranges: &CommandRanges, rng: &mut impl Rng) -> Command {
    let draw = |r: [f64; 2], rng: &mut dyn rand::RngCore| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..=r[1])
        }
    };
    Command {
        vx: draw(ranges.vx, rng),
        vy: draw(ranges.vy, rng),
        wz: draw(ranges.wz, rng),
    }
}

/// Per-episode physical randomization draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainParams {
    pub payload_mass: f64,
    /// Meters, base frame.
    pub com_shift: [f64; 3],
    pub kp_factor: f64,
    pub kd_factor: f64,
    pub friction: f64,
    pub restitution: f64,
    /// Milliseconds.
    pub step_delay_ms: f64,
    /// Max push speed applied every push interval, m/s.
    pub push_vel: f64,
}

impl DomainParams {
    /// Midpoint of every randomization range.
    pub fn nominal(ranges: &DomainRandomization) -> Self {
        let mid = |r: [f64; 2]| 0.5 * (r[0] + r[1]);
        DomainParams {
            payload_mass: mid(ranges.payload_mass_kg),
            com_shift: [
                mid(ranges.com_shift_x_cm) * 1e-2,
                mid(ranges.com_shift_y_cm) * 1e-2,
                mid(ranges.com_shift_z_cm) * 1e-2,
            ],
            kp_factor: mid(ranges.kp_factor),
            kd_factor: mid(ranges.kd_factor),
            friction: mid(ranges.friction),
            restitution: mid(ranges.restitution),
            step_delay_ms: mid(ranges.step_delay_ms),
            push_vel: ranges.push_vel_xy,
        }
    }
}

/// Randomization ranges, all [lo, hi].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRandomization {
    pub payload_mass_kg: [f64; 2],
    pub com_shift_x_cm: [f64; 2],
    pub com_shift_y_cm: [f64; 2],
    pub com_shift_z_cm: [f64; 2],
    pub kp_factor: [f64; 2],
    pub kd_factor: [f64; 2],
    pub friction: [f64; 2],
    pub restitution: [f64; 2],
    pub step_delay_ms: [f64; 2],
    pub push_vel_xy: f64,
    /// Seconds between pushes.
    pub push_interval_s: f64,
}

impl Default for DomainRandomization {
    fn default() -> Self {
        DomainRandomization {
            payload_mass_kg: [-1.0, 2.0],
            com_shift_x_cm: [-3.0, 3.0],
            com_shift_y_cm: [-2.0, 2.0],
            com_shift_z_cm: [-3.0, 3.0],
            kp_factor: [0.8, 1.2],
            kd_factor: [0.8, 1.2],
            friction: [0.2, 1.6],
            restitution: [0.0, 1.0],
            step_delay_ms: [0.0, 15.0],
            push_vel_xy: 0.5,
            push_interval_s: 10.0,
        }
    }
}

/// Uniform draw within every range.
pub fn sample_domain(ranges: &DomainRandomization, rng: &mut impl Rng) -> DomainParams {
    let draw = |r: [f64; 2], rng: &mut dyn rand::RngCore| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..=r[1])
        }
    };
    DomainParams {
        payload_mass: draw(ranges.payload_mass_kg, rng),
        com_shift: [
            draw(ranges.com_shift_x_cm, rng) * 1e-2,
            draw(ranges.com_shift_y_cm, rng) * 1e-2,
            draw(ranges.com_shift_z_cm, rng) * 1e-2,
        ],
        kp_factor: draw(ranges.kp_factor, rng),
        kd_factor: draw(ranges.kd_factor, rng),
        friction: draw(ranges.friction, rng),
        restitution: draw(ranges.restitution, rng),
        step_delay_ms: draw(ranges.step_delay_ms, rng),
        push_vel: ranges.push_vel_xy,
    }
}

/// PD position controller around the default pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PDController {
    pub kp: f64,
    pub kd: f64,
    pub default_pos: [f64; JOINT_COUNT],
    pub action_scale: f64,
    pub torque_limit: f64,
}

impl Default for PDController {
    fn default() -> Self {
        PDController {
            kp: 40.0,
            kd: 2.0,
            // slight symmetric crouch; feet directly under the hips
            default_pos: [0.0, 0.4, -0.8, 0.0, 0.4, -0.8],
            action_scale: 0.25,
            torque_limit: 30.0,
        }
    }
}

/// Joint torques: PD toward default + scaled action, clamped to the limit.
pub fn pd_torque(
    action: &[f64; JOINT_COUNT],
    joint_pos: &[f64; JOINT_COUNT],
    joint_vel: &[f64; JOINT_COUNT],
    pd: &PDController,
    kp_factor: f64,
    kd_factor: f64,
) -> [f64; JOINT_COUNT] {
    let mut tau = [0.0; JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        let target = pd.default_pos[j] + pd.action_scale * action[j];
        let raw = pd.kp * kp_factor * (target - joint_pos[j]) - pd.kd * kd_factor * joint_vel[j];
        tau[j] = raw.clamp(-pd.torque_limit, pd.torque_limit);
    }
    tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    LowClearance,
    Tilt,
    BaseContact,
    TimeOut,
    Fault,
}

impl Termination {
    /// Timeouts end the episode without counting as failures.
    pub fn is_failure(&self) -> bool {
        !matches!(self, Termination::TimeOut)
    }
}

/// Touchdown event recorded during a control step.
#[derive(Debug, Clone, Copy)]
pub struct Touchdown {
    pub foot: usize,
    pub air_time: f64,
}

/// Full simulation state of one robot. World frame: x/y horizontal, z up.
/// Base frame: x forward, y left, z up.
#[derive(Debug, Clone)]
pub struct RobotState {
    pub base_pos: Vector3<f64>,
    pub base_quat: UnitQuaternion<f64>,
    /// World frame.
    pub base_lin_vel: Vector3<f64>,
    /// Body frame (IMU convention).
    pub base_ang_vel: Vector3<f64>,
    pub joint_pos: [f64; JOINT_COUNT],
    pub joint_vel: [f64; JOINT_COUNT],
    /// Base-frame foot positions, [left, right].
    pub foot_pos_base: [Vector3<f64>; 2],
    /// World-frame foot positions.
    pub foot_pos_world: [Vector3<f64>; 2],
    /// World-frame foot velocities (finite difference).
    pub foot_vel_world: [Vector3<f64>; 2],
    /// Foot height above the terrain directly below, meters.
    pub foot_height_rel: [f64; 2],
    pub foot_contact: [bool; 2],
    /// Normal contact force magnitude per foot, N.
    pub foot_force: [f64; 2],
    pub foot_air_time: [f64; 2],
    /// Air time of the last completed swing per foot.
    pub last_air_time: [f64; 2],
    /// Peak terrain-relative height of the last completed swing per foot.
    pub last_swing_peak: [f64; 2],
    /// Running peak of the current swing.
    pub swing_peak: [f64; 2],
    /// Gait clock, seconds.
    pub gait_time: f64,
    pub prev_action: [f64; JOINT_COUNT],
    /// Torques applied at the last substep.
    pub applied_torque: [f64; JOINT_COUNT],
    /// Base height above terrain under the base.
    pub base_clearance: f64,
    /// Previous control-step values for finite-difference rewards.
    pub prev_joint_vel: [f64; JOINT_COUNT],
    pub prev_lin_vel_body_xy: [f64; 2],
    pub prev_lin_accel_xy: [f64; 2],
    /// Friction anchor per foot (world xy), while sticking.
    pub contact_anchor: [Option<[f64; 2]>; 2],
    /// Non-foot contact points this control step (base, knees).
    pub collision_points: usize,
    pub episode_time: f64,
    /// Touchdowns recorded during the current control step.
    pub touchdowns: Vec<Touchdown>,
    pub faulted: bool,
}

impl RobotState {
    pub fn quaternion_ok(&self) -> bool {
        (self.base_quat.norm() - 1.0).abs() < 1e-6
    }

    /// Gravity direction in the base frame (unit).
    pub fn gravity_body(&self) -> Vector3<f64> {
        self.base_quat.inverse() * Vector3::new(0.0, 0.0, -1.0)
    }

    /// Base-frame linear velocity.
    pub fn lin_vel_body(&self) -> Vector3<f64> {
        self.base_quat.inverse() * self.base_lin_vel
    }

    /// Tilt angle from vertical, radians.
    pub fn tilt(&self) -> f64 {
        let up = self.base_quat * Vector3::new(0.0, 0.0, 1.0);
        up.z.clamp(-1.0, 1.0).acos()
    }
}
