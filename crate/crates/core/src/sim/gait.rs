//! Gait clock: square-wave swing/stance schedule and the reference foot
//! trajectory.

/// Gait period, seconds.
pub const GAIT_PERIOD: f64 = 0.5;
/// Swing apex of the reference foot trajectory, meters.
pub const FEET_HEIGHT_MAX: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Foot {
    Left,
    Right,
}

impl Foot {
    pub const BOTH: [Foot; 2] = [Foot::Left, Foot::Right];

    pub fn index(&self) -> usize {
        match self {
            Foot::Left => 0,
            Foot::Right => 1,
        }
    }

    /// Phase offset: left 0, right pi (antiphase).
    fn phase_offset(&self) -> f64 {
        match self {
            Foot::Left => 0.0,
            Foot::Right => std::f64::consts::PI,
        }
    }
}

/// Commanded phase: 0 = swing, 1 = stance.
///
/// Equivalent to the sign of sin(2 pi t / T + offset) but evaluated on the
/// wrapped cycle fraction, so the schedule is exactly periodic on a sampled
/// grid (fp sine flips sign at multiples of the period).
pub fn gait_phase(t: f64, foot: Foot) -> u8 {
    let cycle = (t / GAIT_PERIOD + foot.phase_offset() / std::f64::consts::TAU).fract();
    let cycle = if cycle < 0.0 { cycle + 1.0 } else { cycle };
    // sin(2 pi x) >= 0 on x in [0, 0.5]
    if cycle <= 0.5 {
        0
    } else {
        1
    }
}

/// Reference swing height: half-cosine bump during the swing phase, zero in
/// stance.
pub fn reference_foot_height(t: f64, foot: Foot) -> f64 {
    if gait_phase(t, foot) == 1 {
        return 0.0;
    }
    let bump = FEET_HEIGHT_MAX * (1.0 - (4.0 * std::f64::consts::PI * t / GAIT_PERIOD).cos());
    0.5 * bump.max(0.0)
}
