//! The locomotion reward suite: 23 weighted terms evaluated per control
//! step as pure functions of the robot state, the action pair, and the
//! command. The step total is the weighted sum scaled by the control dt.
//!
//! Two of the printed formulas reward degenerate behavior when taken
//! literally (per-step air-time magnitude, contact force pulled toward the
//! cap); the defaults use the standard touchdown-event and clipped-excess
//! forms, with the literal forms behind config flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::gait::{gait_phase, reference_foot_height, Foot};
use crate::sim::state::{Command, RobotState, CONTROL_DT, JOINT_COUNT};

pub const TERM_COUNT: usize = 23;

/// Term order is fixed; metrics CSV columns and the breakdown arrays use it.
pub const TERM_NAMES: [&str; TERM_COUNT] = [
    "lin_vel_tracking",
    "ang_vel_tracking",
    "lin_vel_z",
    "ang_vel_xy",
    "orientation",
    "base_height",
    "joint_acc",
    "action_rate",
    "feet_air_time",
    "joint_torque",
    "feet_contact_force",
    "feet_distance",
    "unbalance_feet_height",
    "unbalance_feet_air_time",
    "collision",
    "torque_limit",
    "target_feet_height",
    "feet_position_x",
    "hip_position",
    "feet_contact_number",
    "lin_vel_smooth",
    "survival",
    "feet_velocity",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// One weight per term, in `TERM_NAMES` order.
    pub weights: Vec<f64>,
    pub base_height_target: f64,
    /// Contact force cap, N.
    pub f_max: f64,
    /// Minimum rewarded air time, s.
    pub t_min: f64,
    /// Air time credited at most this much, s.
    pub air_time_cap: f64,
    /// Nominal foot separation, m.
    pub feet_distance_nominal: f64,
    /// Torque beyond this magnitude is penalized, N m.
    pub torque_limit: f64,
    /// Default hip roll positions.
    pub hip_default: [f64; 2],
    /// Literal per-step `max(t_air, t_min)` instead of touchdown events.
    pub literal_feet_air_time: bool,
    /// Literal squared separation instead of deviation from nominal.
    pub literal_feet_distance: bool,
    /// Literal `(f - f_max)^2` instead of clipped excess.
    pub literal_contact_force: bool,
    /// Signed vertical foot velocity instead of magnitude.
    pub signed_feet_velocity: bool,
    /// Multiply the weighted total by the control dt.
    pub dt_scale: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            weights: vec![
                7.5, 4.0, -0.5, -0.06, -6.0, -10.0, -2.5e-7, -0.01, 60.0, -2.5e-5, -0.01,
                -100.0, -60.0, -300.0, -30.0, -0.1, -6.0, -3.0, -1.5, 2.5, -0.05, -0.05, -0.5,
            ],
            base_height_target: 0.66,
            f_max: 120.0,
            t_min: 0.1,
            air_time_cap: 0.5,
            feet_distance_nominal: 0.2,
            torque_limit: 30.0,
            hip_default: [0.0, 0.0],
            literal_feet_air_time: false,
            literal_feet_distance: false,
            literal_contact_force: false,
            signed_feet_velocity: false,
            dt_scale: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != TERM_COUNT {
            return Err(Error::config(
                "rewards.weights",
                format!("expected {TERM_COUNT} weights, got {}", self.weights.len()),
            ));
        }
        if !self.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::config("rewards.weights", "non-finite weight"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub unweighted: [f64; TERM_COUNT],
    pub weighted: [f64; TERM_COUNT],
    pub total: f64,
}

impl RewardBreakdown {
    pub fn term(&self, name: &str) -> f64 {
        let idx = TERM_NAMES.iter().position(|n| *n == name).expect("term name");
        self.unweighted[idx]
    }

    pub fn weighted_term(&self, name: &str) -> f64 {
        let idx = TERM_NAMES.iter().position(|n| *n == name).expect("term name");
        self.weighted[idx]
    }
}

/// Vertical foot-velocity penalty while the foot is near the ground.
pub fn r_feet_velocity(state: &RobotState, signed: bool) -> f64 {
    let mut acc = 0.0;
    for side in 0..2 {
        if state.foot_height_rel[side] < 0.05 {
            let vz = state.foot_vel_world[side].z;
            acc += if signed { vz } else { vz.abs() };
        }
    }
    acc
}

/// Contact-schedule match: +1 per foot agreeing with the commanded phase,
/// -1 per mismatch; values in {-2, 0, 2}.
pub fn r_feet_contact_number(state: &RobotState) -> f64 {
    let mut acc = 0.0;
    for foot in Foot::BOTH {
        let commanded_stance = gait_phase(state.gait_time, foot) == 1;
        let matches = state.foot_contact[foot.index()] == commanded_stance;
        acc += if matches { 1.0 } else { -1.0 };
    }
    acc
}

/// Absolute tracking error against the reference swing trajectory.
pub fn r_target_feet_height(state: &RobotState) -> f64 {
    let mut acc = 0.0;
    for foot in Foot::BOTH {
        let target = reference_foot_height(state.gait_time, foot);
        acc += (target - state.foot_height_rel[foot.index()]).abs();
    }
    acc
}

/// Touchdown-event air-time reward (default mode).
pub fn r_feet_air_time(state: &RobotState, cfg: &RewardConfig) -> f64 {
    if cfg.literal_feet_air_time {
        // as printed: per-step magnitude of max(t_air, t_min)
        let mut acc = 0.0;
        for side in 0..2 {
            acc += state.foot_air_time[side].max(cfg.t_min);
        }
        return acc;
    }
    state
        .touchdowns
        .iter()
        .map(|td| td.air_time.min(cfg.air_time_cap) - cfg.t_min)
        .sum()
}

/// All 23 terms. History-dependent inputs (previous joint velocities, body
/// velocity, acceleration) ride on the state's `prev_*` fields, maintained
/// at control-step boundaries.
pub fn compute_rewards(
    state: &RobotState,
    action: &[f64; JOINT_COUNT],
    cmd: &Command,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let mut u = [0.0f64; TERM_COUNT];

    let v_body = state.lin_vel_body();
    let w = state.base_ang_vel;
    let g = state.gravity_body();
    let dt = CONTROL_DT;

    // 0: lin velocity tracking  exp(-4 ||v_cmd - v_xy||^2)
    let ex = cmd.vx - v_body.x;
    let ey = cmd.vy - v_body.y;
    u[0] = (-4.0 * (ex * ex + ey * ey)).exp();
    // 1: ang velocity tracking  exp(-4 (w_cmd - w_z)^2)
    let ew = cmd.wz - w.z;
    u[1] = (-4.0 * ew * ew).exp();
    // 2: vertical velocity
    u[2] = v_body.z * v_body.z;
    // 3: roll/pitch rates
    u[3] = w.x * w.x + w.y * w.y;
    // 4: orientation, squared horizontal gravity components
    u[4] = g.x * g.x + g.y * g.y;
    // 5: base height
    u[5] = (cfg.base_height_target - state.base_clearance).abs();
    // 6: joint acceleration
    let mut acc2 = 0.0;
    for j in 0..JOINT_COUNT {
        let a = (state.joint_vel[j] - state.prev_joint_vel[j]) / dt;
        acc2 += a * a;
    }
    u[6] = acc2;
    // 7: action rate
    let mut ar = 0.0;
    for j in 0..JOINT_COUNT {
        let d = action[j] - state.prev_action[j];
        ar += d * d;
    }
    u[7] = ar;
    // 8: feet air time
    u[8] = r_feet_air_time(state, cfg);
    // 9: joint torque
    u[9] = state.applied_torque.iter().map(|t| t * t).sum();
    // 10: feet contact force
    let mut fc = 0.0;
    for side in 0..2 {
        let f = state.foot_force[side];
        if cfg.literal_contact_force {
            fc += (f - cfg.f_max) * (f - cfg.f_max);
        } else {
            let excess = (f - cfg.f_max).max(0.0);
            fc += excess * excess;
        }
    }
    u[10] = fc;
    // 11: feet distance
    let sep = (state.foot_pos_base[0] - state.foot_pos_base[1]).norm();
    u[11] = if cfg.literal_feet_distance {
        sep * sep
    } else {
        (sep - cfg.feet_distance_nominal).abs()
    };
    // 12: unbalance feet height (last completed swing peaks)
    u[12] = (state.last_swing_peak[0] - state.last_swing_peak[1]).abs();
    // 13: unbalance feet air time (last completed swings)
    u[13] = (state.last_air_time[0] - state.last_air_time[1]).abs();
    // 14: collisions
    u[14] = state.collision_points as f64;
    // 15: torque limit excess
    u[15] = state
        .applied_torque
        .iter()
        .map(|t| (t.abs() - cfg.torque_limit).max(0.0))
        .sum();
    // 16: target feet height
    u[16] = r_target_feet_height(state);
    // 17: fore-aft foot split
    u[17] = (state.foot_pos_base[0].x - state.foot_pos_base[1].x).abs();
    // 18: hip roll deviation
    let h0 = state.joint_pos[0] - cfg.hip_default[0];
    let h1 = state.joint_pos[3] - cfg.hip_default[1];
    u[18] = (h0 * h0 + h1 * h1).sqrt();
    // 19: contact schedule match
    u[19] = r_feet_contact_number(state);
    // 20: linear velocity smoothness
    let ax = (v_body.x - state.prev_lin_vel_body_xy[0]) / dt;
    let ay = (v_body.y - state.prev_lin_vel_body_xy[1]) / dt;
    let dax = ax - state.prev_lin_accel_xy[0];
    let day = ay - state.prev_lin_accel_xy[1];
    u[20] = (dax * dax + day * day).sqrt();
    // 21: survival (constant per step alive; the weight makes it a penalty)
    u[21] = 1.0;
    // 22: near-ground vertical foot speed
    u[22] = r_feet_velocity(state, cfg.signed_feet_velocity);

    let mut weighted = [0.0f64; TERM_COUNT];
    let scale = if cfg.dt_scale { CONTROL_DT } else { 1.0 };
    let mut total = 0.0;
    for i in 0..TERM_COUNT {
        if !u[i].is_finite() {
            return Err(Error::Numerical(format!(
                "reward term `{}` is not finite",
                TERM_NAMES[i]
            )));
        }
        weighted[i] = cfg.weights[i] * u[i] * scale;
        total += weighted[i];
    }
    Ok(RewardBreakdown {
        unweighted: u,
        weighted,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::dynamics::spawn_state;
    use crate::sim::state::{PDController, Touchdown};
    use crate::terrain::{generate_terrain, TerrainKind};

    fn standing_state() -> RobotState {
        let hf = generate_terrain(TerrainKind::Plane, 0.0, 8.0, 0.05, 0).unwrap();
        let pd = PDController::default();
        spawn_state(&hf, 0.0, 0.0, 0.0, &pd.default_pos, 0.0)
    }

    #[test]
    fn exact_velocity_tracking_scores_one() {
        let state = standing_state();
        let cfg = RewardConfig::default();
        let br = compute_rewards(&state, &[0.0; 6], &Command::ZERO, &cfg).unwrap();
        assert!((br.term("lin_vel_tracking") - 1.0).abs() < 1e-12);
        assert!((br.term("ang_vel_tracking") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_meter_error_gives_exp_minus_one() {
        let mut state = standing_state();
        state.base_lin_vel.x = 0.5; // yaw 0: body x = world x
        let cfg = RewardConfig::default();
        let br = compute_rewards(&state, &[0.0; 6], &Command::ZERO, &cfg).unwrap();
        assert!(
            (br.term("lin_vel_tracking") - (-1.0f64).exp()).abs() < 1e-12,
            "{}",
            br.term("lin_vel_tracking")
        );
    }

    #[test]
    fn exact_base_height_zeroes_the_term() {
        let mut state = standing_state();
        state.base_clearance = 0.66;
        let cfg = RewardConfig::default();
        let br = compute_rewards(&state, &[0.0; 6], &Command::ZERO, &cfg).unwrap();
        assert_eq!(br.term("base_height"), 0.0);
    }

    #[test]
    fn contact_number_hits_all_three_values() {
        let mut state = standing_state();
        // t = 0.125: left commanded swing, right commanded stance
        state.gait_time = 0.125;
        state.foot_contact = [false, true];
        let cfg = RewardConfig::default();
        assert_eq!(
            compute_rewards(&state, &[0.0; 6], &Command::ZERO, &cfg)
                .unwrap()
                .term("feet_contact_number"),
            2.0
        );
        state.foot_contact = [true, false];
        assert_eq!(r_feet_contact_number(&state), -2.0);
        state.foot_contact = [true, true];
        assert_eq!(r_feet_contact_number(&state), 0.0);
    }

    #[test]
    fn feet_velocity_indicator_behavior() {
        let mut state = standing_state();
        state.foot_height_rel = [0.06, 0.2];
        state.foot_vel_world[0].z = 5.0;
        assert_eq!(r_feet_velocity(&state, false), 0.0, "indicator off");
        state.foot_height_rel[0] = 0.04;
        state.foot_vel_world[0].z = 0.2;
        assert!((r_feet_velocity(&state, false) - 0.2).abs() < 1e-12);
        state.foot_height_rel = [0.02, 0.02];
        state.foot_vel_world[0].z = 0.1;
        state.foot_vel_world[1].z = -0.1;
        assert!((r_feet_velocity(&state, false) - 0.2).abs() < 1e-12, "sum of magnitudes");
        assert!(r_feet_velocity(&state, true).abs() < 1e-12, "signed mode cancels");
    }

    #[test]
    fn air_time_touchdown_events() {
        let mut state = standing_state();
        let cfg = RewardConfig::default();
        assert_eq!(r_feet_air_time(&state, &cfg), 0.0, "no touchdown");
        state.touchdowns.push(Touchdown { foot: 0, air_time: 0.25 });
        assert!((r_feet_air_time(&state, &cfg) - 0.15).abs() < 1e-12);
        state.touchdowns.clear();
        state.touchdowns.push(Touchdown { foot: 1, air_time: 0.05 });
        assert!((r_feet_air_time(&state, &cfg) + 0.05).abs() < 1e-12, "below-minimum penalty");
        // cap long swings
        state.touchdowns.clear();
        state.touchdowns.push(Touchdown { foot: 0, air_time: 2.0 });
        assert!((r_feet_air_time(&state, &cfg) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn target_feet_height_examples() {
        let mut state = standing_state();
        state.gait_time = 0.125;
        // left target 0.03, right 0 (stance)
        state.foot_height_rel = [0.01, 0.0];
        assert!((r_target_feet_height(&state) - 0.02).abs() < 1e-12);
        state.foot_height_rel = [0.03, 0.005];
        assert!((r_target_feet_height(&state) - 0.005).abs() < 1e-12);
        state.foot_height_rel = [0.03, 0.0];
        assert_eq!(r_target_feet_height(&state), 0.0, "on-trajectory");
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let mut state = standing_state();
        state.gait_time = 0.33;
        state.base_lin_vel.x = 0.2;
        state.collision_points = 1;
        let cfg = RewardConfig::default();
        let br = compute_rewards(&state, &[0.1; 6], &Command { vx: 0.3, vy: 0.0, wz: 0.1 }, &cfg)
            .unwrap();
        let sum: f64 = br.weighted.iter().sum();
        assert!((br.total - sum).abs() < 1e-9);
    }

    #[test]
    fn purity_bit_identical() {
        let mut state = standing_state();
        state.base_lin_vel.x = 0.123;
        state.gait_time = 0.41;
        let cfg = RewardConfig::default();
        let cmd = Command { vx: 0.2, vy: -0.1, wz: 0.3 };
        let a = compute_rewards(&state, &[0.2; 6], &cmd, &cfg).unwrap();
        let b = compute_rewards(&state, &[0.2; 6], &cmd, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonfinite_input_names_the_term() {
        let mut state = standing_state();
        state.base_lin_vel.x = f64::NAN;
        let cfg = RewardConfig::default();
        let err = compute_rewards(&state, &[0.0; 6], &Command::ZERO, &cfg).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("lin_vel_tracking"), "{msg}");
    }

    #[test]
    fn every_term_has_exactly_one_weight_and_name() {
        let cfg = RewardConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TERM_NAMES.len(), TERM_COUNT);
        assert_eq!(cfg.weights.len(), TERM_COUNT);
        let mut names: Vec<&str> = TERM_NAMES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), TERM_COUNT, "duplicate term names");
    }
}
