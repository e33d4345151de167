//! Reduced-order point-foot biped dynamics.
//!
//! Rigid floating base (box inertia); legs are massless 3-joint kinematic
//! chains whose joints integrate second-order dynamics under PD torque with
//! a fixed reflected inertia. Ground reaction is a spring-damper penalty at
//! the foot points with an anchored Coulomb friction cap; reactions apply to
//! the base. Non-foot contact (base, knees) is counted, not resolved.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::sim::state::{RobotState, Termination, Touchdown, CONTACT_FORCE_THRESHOLD, JOINT_COUNT};
use crate::terrain::HeightField;

pub const BASE_MASS: f64 = 12.0;
/// Box 0.3 x 0.2 x 0.15 m.
pub const BASE_INERTIA: [f64; 3] = [0.0625, 0.1125, 0.13];
pub const GRAVITY: f64 = 9.81;

pub const THIGH_LEN: f64 = 0.25;
pub const SHANK_LEN: f64 = 0.25;
/// Hip mount points in the base frame, [left, right].
pub const HIP_OFFSET: [[f64; 3]; 2] = [[0.0, 0.10, -0.20], [0.0, -0.10, -0.20]];
/// Reflected inertia per joint, kg m^2.
pub const JOINT_INERTIA: f64 = 0.05;

/// Normal contact spring / damper.
pub const CONTACT_KN: f64 = 4000.0;
pub const CONTACT_CN: f64 = 100.0;
/// Tangential anchor spring / damper.
pub const CONTACT_KT: f64 = 4000.0;
pub const CONTACT_CT: f64 = 100.0;

/// Joint limits [lo, hi] per joint type (roll, pitch, knee).
const JOINT_LIMITS: [[f64; 2]; 3] = [[-0.6, 0.6], [-1.6, 1.6], [-2.5, -0.05]];

pub const BASE_COLLISION_RADIUS: f64 = 0.10;
pub const KNEE_COLLISION_RADIUS: f64 = 0.04;

/// Default training episode length, seconds.
pub const EPISODE_LENGTH_S: f64 = 20.0;
/// Base clearance below which the episode terminates.
pub const MIN_BASE_CLEARANCE: f64 = 0.30;
/// Tilt termination threshold.
pub const MAX_TILT_RAD: f64 = std::f64::consts::FRAC_PI_3;

/// Foot position in the base frame for one leg's joint triple.
pub fn foot_position_base(joints: &[f64; 3], side: usize) -> Vector3<f64> {
    let hip = Vector3::from(HIP_OFFSET[side]);
    let roll = Rotation3::from_axis_angle(&Vector3::x_axis(), joints[0]);
    let thigh = Rotation3::from_axis_angle(&Vector3::y_axis(), joints[1])
        * Vector3::new(0.0, 0.0, -THIGH_LEN);
    let shank = Rotation3::from_axis_angle(&Vector3::y_axis(), joints[1] + joints[2])
        * Vector3::new(0.0, 0.0, -SHANK_LEN);
    hip + roll * (thigh + shank)
}

/// Knee position in the base frame.
pub fn knee_position_base(joints: &[f64; 3], side: usize) -> Vector3<f64> {
    let hip = Vector3::from(HIP_OFFSET[side]);
    let roll = Rotation3::from_axis_angle(&Vector3::x_axis(), joints[0]);
    let thigh = Rotation3::from_axis_angle(&Vector3::y_axis(), joints[1])
        * Vector3::new(0.0, 0.0, -THIGH_LEN);
    hip + roll * thigh
}

/// Base height above the feet at the default pose (hip drop included).
pub fn standing_height(default_pos: &[f64; JOINT_COUNT]) -> f64 {
    let left: [f64; 3] = [default_pos[0], default_pos[1], default_pos[2]];
    -foot_position_base(&left, 0).z
}

fn leg_joints(joint_pos: &[f64; JOINT_COUNT], side: usize) -> [f64; 3] {
    let o = side * 3;
    [joint_pos[o], joint_pos[o + 1], joint_pos[o + 2]]
}

pub struct StepParams {
    pub friction: f64,
    pub restitution: f64,
    pub payload_mass: f64,
    pub com_shift: Vector3<f64>,
}

/// Advance one physics substep. Returns a termination only for numerical
/// faults; regular termination checks run at the control rate.
pub fn substep(
    state: &mut RobotState,
    torque: &[f64; JOINT_COUNT],
    hf: &HeightField,
    params: &StepParams,
    dt: f64,
) -> Option<Termination> {
    // joint dynamics: reflected inertia driven by PD torque only
    for j in 0..JOINT_COUNT {
        let acc = torque[j] / JOINT_INERTIA;
        state.joint_vel[j] += acc * dt;
        state.joint_pos[j] += state.joint_vel[j] * dt;
        let limits = JOINT_LIMITS[j % 3];
        if state.joint_pos[j] < limits[0] {
            state.joint_pos[j] = limits[0];
            state.joint_vel[j] = state.joint_vel[j].max(0.0);
        } else if state.joint_pos[j] > limits[1] {
            state.joint_pos[j] = limits[1];
            state.joint_vel[j] = state.joint_vel[j].min(0.0);
        }
    }
    state.applied_torque = *torque;

    // kinematics
    let rot = state.base_quat.to_rotation_matrix();
    let mut force = Vector3::new(0.0, 0.0, -(BASE_MASS + params.payload_mass.max(-BASE_MASS * 0.5)) * GRAVITY);
    let mut torque_w = (rot * params.com_shift).cross(&force);

    for side in 0..2 {
        let joints = leg_joints(&state.joint_pos, side);
        let foot_b = foot_position_base(&joints, side);
        let foot_w = state.base_pos + rot * foot_b;
        let prev_w = state.foot_pos_world[side];
        let vel_w = (foot_w - prev_w) / dt;
        state.foot_pos_base[side] = foot_b;
        state.foot_pos_world[side] = foot_w;
        state.foot_vel_world[side] = vel_w;

        let ground = hf.sample(foot_w.x, foot_w.y);
        state.foot_height_rel[side] = foot_w.z - ground;
        let pen = ground - foot_w.z;
        let mut fn_mag = 0.0;
        if pen > 0.0 {
            let damping = if vel_w.z < 0.0 {
                -CONTACT_CN * vel_w.z
            } else {
                // separation damping scaled down by restitution
                -CONTACT_CN * (1.0 - params.restitution) * vel_w.z
            };
            fn_mag = (CONTACT_KN * pen + damping).max(0.0);
        }

        let was_contact = state.foot_contact[side];
        let in_contact = fn_mag > CONTACT_FORCE_THRESHOLD;
        if in_contact {
            if !was_contact {
                // touchdown: close out the swing
                state.touchdowns.push(Touchdown {
                    foot: side,
                    air_time: state.foot_air_time[side],
                });
                state.last_air_time[side] = state.foot_air_time[side];
                state.last_swing_peak[side] = state.swing_peak[side];
                state.swing_peak[side] = 0.0;
                state.foot_air_time[side] = 0.0;
                state.contact_anchor[side] = Some([foot_w.x, foot_w.y]);
            }
        } else {
            if was_contact {
                state.contact_anchor[side] = None;
            }
            state.foot_air_time[side] += dt;
            state.swing_peak[side] = state.swing_peak[side].max(state.foot_height_rel[side]);
        }
        state.foot_contact[side] = in_contact;
        state.foot_force[side] = fn_mag;

        if fn_mag > 0.0 {
            // anchored tangential spring with Coulomb cap
            let anchor = state.contact_anchor[side].unwrap_or([foot_w.x, foot_w.y]);
            let dx = foot_w.x - anchor[0];
            let dy = foot_w.y - anchor[1];
            let mut ftx = -CONTACT_KT * dx - CONTACT_CT * vel_w.x;
            let mut fty = -CONTACT_KT * dy - CONTACT_CT * vel_w.y;
            let cap = params.friction * fn_mag;
            let mag = (ftx * ftx + fty * fty).sqrt();
            if mag > cap && mag > 1e-12 {
                let scale = cap / mag;
                ftx *= scale;
                fty *= scale;
                // slide the anchor so the spring matches the capped force
                state.contact_anchor[side] = Some([
                    foot_w.x + (ftx + CONTACT_CT * vel_w.x) / CONTACT_KT,
                    foot_w.y + (fty + CONTACT_CT * vel_w.y) / CONTACT_KT,
                ]);
            }
            let f = Vector3::new(ftx, fty, fn_mag);
            force += f;
            torque_w += (foot_w - state.base_pos).cross(&f);
        }
    }

    // collision points: base center and knees against the terrain
    let base_ground = hf.sample(state.base_pos.x, state.base_pos.y);
    state.base_clearance = state.base_pos.z - base_ground;
    if state.base_clearance < BASE_COLLISION_RADIUS {
        state.collision_points += 1;
    }
    for side in 0..2 {
        let knee_w = state.base_pos + rot * knee_position_base(&leg_joints(&state.joint_pos, side), side);
        if knee_w.z - hf.sample(knee_w.x, knee_w.y) < KNEE_COLLISION_RADIUS {
            state.collision_points += 1;
        }
    }

    // base integration, semi-implicit
    let mass = BASE_MASS + params.payload_mass.max(-BASE_MASS * 0.5);
    state.base_lin_vel += force / mass * dt;
    state.base_pos += state.base_lin_vel * dt;

    let inertia = Matrix3::from_diagonal(&Vector3::from(BASE_INERTIA));
    let inv_inertia = Matrix3::from_diagonal(&Vector3::new(
        1.0 / BASE_INERTIA[0],
        1.0 / BASE_INERTIA[1],
        1.0 / BASE_INERTIA[2],
    ));
    let torque_b = rot.inverse() * torque_w;
    let w = state.base_ang_vel;
    let dw = inv_inertia * (torque_b - w.cross(&(inertia * w)));
    state.base_ang_vel += dw * dt;
    let dq = UnitQuaternion::from_scaled_axis(state.base_ang_vel * dt);
    state.base_quat = UnitQuaternion::from_quaternion((state.base_quat * dq).into_inner());

    state.gait_time += dt;
    state.episode_time += dt;

    // numerical fault checks
    let pos_ok = state.base_pos.iter().all(|v| v.is_finite()) && state.base_pos.norm() < 100.0;
    let vel_ok = state.base_lin_vel.iter().all(|v| v.is_finite()) && state.base_lin_vel.norm() < 20.0;
    let joints_ok = state.joint_pos.iter().chain(state.joint_vel.iter()).all(|v| v.is_finite());
    if !(pos_ok && vel_ok && joints_ok) {
        state.faulted = true;
        return Some(Termination::Fault);
    }
    None
}

/// Control-rate termination conditions.
pub fn check_termination(state: &RobotState, max_episode_s: f64) -> Option<Termination> {
    if state.faulted {
        return Some(Termination::Fault);
    }
    if state.base_clearance < BASE_COLLISION_RADIUS {
        return Some(Termination::BaseContact);
    }
    if state.base_clearance < MIN_BASE_CLEARANCE {
        return Some(Termination::LowClearance);
    }
    if state.tilt() > MAX_TILT_RAD {
        return Some(Termination::Tilt);
    }
    if state.episode_time > max_episode_s {
        return Some(Termination::TimeOut);
    }
    None
}

/// Fresh state standing at (x, y) with the given yaw, feet settled so the
/// contact springs carry the weight.
pub fn spawn_state(
    hf: &HeightField,
    x: f64,
    y: f64,
    yaw: f64,
    default_pos: &[f64; JOINT_COUNT],
    payload_mass: f64,
) -> RobotState {
    let drop = standing_height(default_pos);
    let ground = hf.sample(x, y);
    let mass = BASE_MASS + payload_mass.max(-BASE_MASS * 0.5);
    // settle to spring equilibrium so zero-torque standing is static
    let settle = mass * GRAVITY / (2.0 * CONTACT_KN);
    let base_z = ground + drop - settle;
    let quat = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    let rot = quat.to_rotation_matrix();

    let mut state = RobotState {
        base_pos: Vector3::new(x, y, base_z),
        base_quat: quat,
        base_lin_vel: Vector3::zeros(),
        base_ang_vel: Vector3::zeros(),
        joint_pos: *default_pos,
        joint_vel: [0.0; JOINT_COUNT],
        foot_pos_base: [Vector3::zeros(); 2],
        foot_pos_world: [Vector3::zeros(); 2],
        foot_vel_world: [Vector3::zeros(); 2],
        foot_height_rel: [0.0; 2],
        foot_contact: [true; 2],
        foot_force: [mass * GRAVITY / 2.0; 2],
        foot_air_time: [0.0; 2],
        last_air_time: [0.0; 2],
        last_swing_peak: [0.0; 2],
        swing_peak: [0.0; 2],
        gait_time: 0.0,
        prev_action: [0.0; JOINT_COUNT],
        applied_torque: [0.0; JOINT_COUNT],
        base_clearance: base_z - ground,
        prev_joint_vel: [0.0; JOINT_COUNT],
        prev_lin_vel_body_xy: [0.0; 2],
        prev_lin_accel_xy: [0.0; 2],
        contact_anchor: [None; 2],
        collision_points: 0,
        episode_time: 0.0,
        touchdowns: Vec::new(),
        faulted: false,
    };
    for side in 0..2 {
        let joints = leg_joints(&state.joint_pos, side);
        let foot_b = foot_position_base(&joints, side);
        let foot_w = state.base_pos + rot * foot_b;
        state.foot_pos_base[side] = foot_b;
        state.foot_pos_world[side] = foot_w;
        state.foot_height_rel[side] = foot_w.z - hf.sample(foot_w.x, foot_w.y);
        state.contact_anchor[side] = Some([foot_w.x, foot_w.y]);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::state::{PDController, SIM_DT};
    use crate::terrain::{generate_terrain, TerrainKind};

    fn flat() -> HeightField {
        generate_terrain(TerrainKind::Plane, 0.0, 8.0, 0.05, 0).unwrap()
    }

    fn nominal_params() -> StepParams {
        StepParams {
            friction: 1.0,
            restitution: 0.0,
            payload_mass: 0.0,
            com_shift: Vector3::zeros(),
        }
    }

    #[test]
    fn default_pose_reaches_the_table_base_height() {
        let pd = PDController::default();
        // 0.25 (cos 0.4 + cos 0.4) + 0.20 = 0.6605
        let height = standing_height(&pd.default_pos);
        assert!(
            (height - 0.66).abs() < 0.005,
            "standing height {height} should be near 0.66"
        );
    }

    #[test]
    fn zero_torque_rest_is_static_for_one_second() {
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        let z0 = state.base_pos.z;
        let params = nominal_params();
        for _ in 0..200 {
            let t = substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
            assert!(t.is_none());
        }
        assert!(
            (state.base_pos.z - z0).abs() < 2e-3,
            "base height drifted {} m",
            (state.base_pos.z - z0).abs()
        );
        assert!(state.base_lin_vel.norm() < 0.05);
    }

    #[test]
    fn free_fall_acceleration_is_exact() {
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        state.base_pos.z = 5.0; // no contact
        let params = nominal_params();
        let v0 = state.base_lin_vel.z;
        substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
        let accel = (state.base_lin_vel.z - v0) / SIM_DT;
        assert!((accel + GRAVITY).abs() < 1e-9, "accel {accel}");
    }

    #[test]
    fn frictionless_contact_gives_no_horizontal_reaction() {
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        state.base_lin_vel.x = 0.5;
        let params = StepParams {
            friction: 0.0,
            ..nominal_params()
        };
        let vx0 = state.base_lin_vel.x;
        for _ in 0..100 {
            substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
        }
        assert!(
            (state.base_lin_vel.x - vx0).abs() < 1e-9,
            "horizontal velocity changed: {} -> {}",
            vx0,
            state.base_lin_vel.x
        );
    }

    #[test]
    fn friction_anchor_stops_sliding() {
        // hold orientation: a sliding point-foot biped tips over (no support
        // polygon in x), which is termination territory, not friction's job
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        state.base_lin_vel.x = 0.3;
        let upright = state.base_quat;
        let params = nominal_params();
        for _ in 0..400 {
            substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
            state.base_ang_vel = Vector3::zeros();
            state.base_quat = upright;
        }
        assert!(
            state.base_lin_vel.x.abs() < 0.02,
            "friction failed to arrest sliding: vx = {}",
            state.base_lin_vel.x
        );
        // the anchors hold position, not just damp it
        assert!(state.base_pos.x.abs() < 0.1, "slid {} m", state.base_pos.x);
    }

    #[test]
    fn ballistic_energy_conserved_within_one_percent() {
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        state.base_pos.z = 50.0;
        state.base_lin_vel = Vector3::new(1.0, 0.5, 2.0);
        state.base_ang_vel = Vector3::new(0.8, -0.6, 0.4);
        let params = nominal_params();
        let energy = |s: &RobotState| {
            let inertia = Matrix3::from_diagonal(&Vector3::from(BASE_INERTIA));
            0.5 * BASE_MASS * s.base_lin_vel.norm_squared()
                + BASE_MASS * GRAVITY * s.base_pos.z
                + 0.5 * s.base_ang_vel.dot(&(inertia * s.base_ang_vel))
        };
        let e0 = energy(&state);
        for _ in 0..200 {
            substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
        }
        let e1 = energy(&state);
        assert!(
            ((e1 - e0) / e0).abs() < 0.01,
            "energy drift {} ({e0} -> {e1})",
            ((e1 - e0) / e0).abs()
        );
    }

    #[test]
    fn contact_flag_iff_force_above_threshold() {
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        let params = nominal_params();
        for _ in 0..50 {
            substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
            for side in 0..2 {
                assert_eq!(
                    state.foot_contact[side],
                    state.foot_force[side] > CONTACT_FORCE_THRESHOLD
                );
            }
        }
    }

    #[test]
    fn air_timer_resets_on_touchdown() {
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        // hoist the robot so both feet leave the ground, then drop it
        state.base_pos.z += 0.2;
        state.foot_contact = [false; 2];
        state.foot_force = [0.0; 2];
        let params = nominal_params();
        let mut saw_air = false;
        let mut saw_touchdown = false;
        for _ in 0..400 {
            substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
            if !state.foot_contact[0] && state.foot_air_time[0] > 0.0 {
                saw_air = true;
            }
            if !state.touchdowns.is_empty() {
                saw_touchdown = true;
                assert_eq!(state.foot_air_time[state.touchdowns[0].foot], 0.0);
                assert!(state.touchdowns[0].air_time > 0.0);
                break;
            }
        }
        assert!(saw_air && saw_touchdown);
    }

    #[test]
    fn fault_on_divergence() {
        let hf = flat();
        let pd = PDController::default();
        let mut state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        state.base_lin_vel.x = 1e6;
        let params = nominal_params();
        let t = substep(&mut state, &[0.0; 6], &hf, &params, SIM_DT);
        assert_eq!(t, Some(Termination::Fault));
        assert!(check_termination(&state, EPISODE_LENGTH_S).unwrap().is_failure());
    }

    #[test]
    fn termination_reasons() {
        let hf = flat();
        let pd = PDController::default();
        let state = spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0);
        assert!(
            check_termination(&state, EPISODE_LENGTH_S).is_none(),
            "nominal stand is alive"
        );

        let mut tilted = state.clone();
        tilted.base_quat = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 1.57);
        assert_eq!(check_termination(&tilted, EPISODE_LENGTH_S), Some(Termination::Tilt));

        let mut low = state.clone();
        low.base_clearance = 0.2;
        assert_eq!(
            check_termination(&low, EPISODE_LENGTH_S),
            Some(Termination::LowClearance)
        );

        let mut timed = state.clone();
        timed.episode_time = 20.004;
        let term = check_termination(&timed, EPISODE_LENGTH_S).unwrap();
        assert_eq!(term, Termination::TimeOut);
        assert!(!term.is_failure(), "timeout is not a failure");
    }
}
