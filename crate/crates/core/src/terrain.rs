//! Procedural terrain: the four track types with a difficulty curriculum,
//! bilinear height queries, and the teacher's body-centered height scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum stair rise at difficulty 1.
pub const MAX_STEP_HEIGHT: f64 = 0.15;
/// Maximum slope inclination at difficulty 1, degrees.
pub const MAX_SLOPE_DEG: f64 = 30.0;
/// Rough-terrain noise amplitude at difficulty 1.
pub const MAX_ROUGH_AMPLITUDE: f64 = 0.05;
/// Stair tread depth (run), meters.
pub const STAIR_RUN: f64 = 0.30;
/// Flat spawn platform half-width at the tile center, meters.
pub const PLATFORM_HALF: f64 = 0.5;

/// Height scan layout: 11 x 11 nodes at 0.1 m spacing, yaw-aligned with the
/// base, covering a one-meter square around it.
pub const SCAN_DIM: usize = 11;
pub const SCAN_SPACING: f64 = 0.1;
pub const SCAN_LEN: usize = SCAN_DIM * SCAN_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerrainKind {
    Plane,
    Rough,
    Slope,
    Stair,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 4] = [
        TerrainKind::Plane,
        TerrainKind::Rough,
        TerrainKind::Slope,
        TerrainKind::Stair,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TerrainKind::Plane => "plane",
            TerrainKind::Rough => "rough",
            TerrainKind::Slope => "slope",
            TerrainKind::Stair => "stair",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            TerrainKind::Plane => 0,
            TerrainKind::Rough => 1,
            TerrainKind::Slope => 2,
            TerrainKind::Stair => 3,
        }
    }
}

/// Gridded terrain elevation. Heights live on nodes; cell (i, j) spans
/// nodes (i..i+1, j..j+1) and is interpolated bilinearly.
#[derive(Debug, Clone)]
pub struct HeightField {
    /// World position of node (0, 0).
    pub origin: [f64; 2],
    /// Meters per grid cell.
    pub cell_size: f64,
    /// Node heights, row-major: index = ix * ny + iy.
    heights: Vec<f64>,
    /// Per-cell max of the four corner nodes, for raycast early-out.
    cell_max: Vec<f64>,
    max_h: f64,
    min_h: f64,
    nx: usize,
    ny: usize,
    pub kind: TerrainKind,
    pub difficulty: f64,
    pub seed: u64,
}

fn build_cell_max(heights: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let mut cell_max = vec![f64::MIN; (nx - 1) * (ny - 1)];
    for ix in 0..nx - 1 {
        for iy in 0..ny - 1 {
            let m = heights[ix * ny + iy]
                .max(heights[(ix + 1) * ny + iy])
                .max(heights[ix * ny + iy + 1])
                .max(heights[(ix + 1) * ny + iy + 1]);
            cell_max[ix * (ny - 1) + iy] = m;
        }
    }
    cell_max
}

impl HeightField {
    pub fn nodes(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn node_height(&self, ix: usize, iy: usize) -> f64 {
        self.heights[ix * self.ny + iy]
    }

    /// Max corner height of cell (ix, iy); cells index 0..n-1 per axis.
    pub fn cell_max_height(&self, ix: usize, iy: usize) -> f64 {
        self.cell_max[ix * (self.ny - 1) + iy]
    }

    /// Greatest node height over the whole field (cached).
    pub fn max_height(&self) -> f64 {
        self.max_h
    }

    pub fn min_height(&self) -> f64 {
        self.min_h
    }

    /// Bilinear interpolation; out-of-bounds queries clamp to the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - self.origin[0]) / self.cell_size;
        let fy = (y - self.origin[1]) / self.cell_size;
        let fx = fx.clamp(0.0, (self.nx - 1) as f64);
        let fy = fy.clamp(0.0, (self.ny - 1) as f64);
        let ix = (fx.floor() as usize).min(self.nx - 2);
        let iy = (fy.floor() as usize).min(self.ny - 2);
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let h00 = self.node_height(ix, iy);
        let h10 = self.node_height(ix + 1, iy);
        let h01 = self.node_height(ix, iy + 1);
        let h11 = self.node_height(ix + 1, iy + 1);
        h00 * (1.0 - tx) * (1.0 - ty)
            + h10 * tx * (1.0 - ty)
            + h01 * (1.0 - tx) * ty
            + h11 * tx * ty
    }

    /// CSV dump, one grid row per line (row-major).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for ix in 0..self.nx {
            let row: Vec<String> = (0..self.ny)
                .map(|iy| format!("{}", self.heights[ix * self.ny + iy]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Procedurally generate one terrain tile centered on the world origin.
pub fn generate_terrain(
    kind: TerrainKind,
    difficulty: f64,
    extent: f64,
    cell_size: f64,
    seed: u64,
) -> Result<HeightField> {
    if !extent.is_finite() || extent <= 0.0 {
        return Err(Error::InvalidParameter(format!("extent {extent}")));
    }
    if !cell_size.is_finite() || cell_size <= 0.0 || cell_size > extent {
        return Err(Error::InvalidParameter(format!("cell_size {cell_size}")));
    }
    if !difficulty.is_finite() || !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::InvalidParameter(format!("difficulty {difficulty}")));
    }
    let cells = (extent / cell_size).round() as usize;
    let n = cells + 1;
    let origin = [-extent / 2.0, -extent / 2.0];
    let mut heights = vec![0.0f64; n * n];

    let node_pos = |i: usize| -> f64 { origin[0] + i as f64 * cell_size };

    match kind {
        TerrainKind::Plane => {}
        TerrainKind::Slope => {
            // Square pyramid rising from a flat center platform; the face
            // gradient is exactly tan(difficulty * 30 deg).
            let grad = (difficulty * MAX_SLOPE_DEG).to_radians().tan();
            for ix in 0..n {
                for iy in 0..n {
                    let r = node_pos(ix).abs().max(node_pos(iy).abs());
                    let h = grad * (r - PLATFORM_HALF).max(0.0);
                    heights[ix * n + iy] = h;
                }
            }
        }
        TerrainKind::Stair => {
            // Concentric square steps outward from the center platform.
            let rise = difficulty * MAX_STEP_HEIGHT;
            for ix in 0..n {
                for iy in 0..n {
                    let r = node_pos(ix).abs().max(node_pos(iy).abs());
                    let steps = ((r - PLATFORM_HALF).max(0.0) / STAIR_RUN).floor();
                    heights[ix * n + iy] = steps * rise;
                }
            }
        }
        TerrainKind::Rough => {
            // Uniform noise on a 2-cell lattice, bilinearly upsampled so the
            // surface stays traversable at fine cell sizes; node amplitudes
            // never exceed difficulty * MAX_ROUGH_AMPLITUDE.
            let amp = difficulty * MAX_ROUGH_AMPLITUDE;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lattice_step = 2usize;
            let ln = cells / lattice_step + 2;
            let mut lattice = vec![0.0f64; ln * ln];
            for v in lattice.iter_mut() {
                *v = rng.gen_range(-1.0..=1.0) * amp;
            }
            for ix in 0..n {
                for iy in 0..n {
                    let lx = ix as f64 / lattice_step as f64;
                    let ly = iy as f64 / lattice_step as f64;
                    let (i0, j0) = (lx.floor() as usize, ly.floor() as usize);
                    let (tx, ty) = (lx - i0 as f64, ly - j0 as f64);
                    let h = lattice[i0 * ln + j0] * (1.0 - tx) * (1.0 - ty)
                        + lattice[(i0 + 1) * ln + j0] * tx * (1.0 - ty)
                        + lattice[i0 * ln + j0 + 1] * (1.0 - tx) * ty
                        + lattice[(i0 + 1) * ln + j0 + 1] * tx * ty;
                    heights[ix * n + iy] = h;
                }
            }
            // keep the spawn platform flat
            for ix in 0..n {
                for iy in 0..n {
                    let r = node_pos(ix).abs().max(node_pos(iy).abs());
                    if r <= PLATFORM_HALF {
                        heights[ix * n + iy] = 0.0;
                    }
                }
            }
        }
    }

    let cell_max = build_cell_max(&heights, n, n);
    let max_h = heights.iter().fold(f64::MIN, |m, h| m.max(*h));
    let min_h = heights.iter().fold(f64::MAX, |m, h| m.min(*h));
    Ok(HeightField {
        origin,
        cell_size,
        heights,
        cell_max,
        max_h,
        min_h,
        nx: n,
        ny: n,
        kind,
        difficulty,
        seed,
    })
}

/// Build a heightfield directly from node data (tests, custom scenes).
pub fn heightfield_from_nodes(
    origin: [f64; 2],
    cell_size: f64,
    nx: usize,
    ny: usize,
    heights: Vec<f64>,
) -> Result<HeightField> {
    if nx < 2 || ny < 2 || heights.len() != nx * ny {
        return Err(Error::InvalidParameter(format!(
            "node grid {nx}x{ny} with {} heights",
            heights.len()
        )));
    }
    if heights.iter().any(|h| !h.is_finite()) {
        return Err(Error::InvalidParameter("non-finite node height".into()));
    }
    let cell_max = build_cell_max(&heights, nx, ny);
    let max_h = heights.iter().fold(f64::MIN, |m, h| m.max(*h));
    let min_h = heights.iter().fold(f64::MAX, |m, h| m.min(*h));
    Ok(HeightField {
        origin,
        cell_size,
        heights,
        cell_max,
        max_h,
        min_h,
        nx,
        ny,
        kind: TerrainKind::Plane,
        difficulty: 0.0,
        seed: 0,
    })
}

/// Teacher height scan: relative heights base_z - terrain(point), clipped to
/// [-1, 1], over the yaw-aligned scan grid. Row-major over (forward, left).
pub fn height_scan(hf: &HeightField, base_xy: [f64; 2], base_z: f64, yaw: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(SCAN_LEN);
    let (c, s) = (yaw.cos(), yaw.sin());
    let half = (SCAN_DIM - 1) as f64 / 2.0;
    for i in 0..SCAN_DIM {
        let dx = (i as f64 - half) * SCAN_SPACING;
        for j in 0..SCAN_DIM {
            let dy = (j as f64 - half) * SCAN_SPACING;
            let wx = base_xy[0] + c * dx - s * dy;
            let wy = base_xy[1] + s * dx + c * dy;
            let rel = (base_z - hf.sample(wx, wy)).clamp(-1.0, 1.0);
            out.push(rel as f32);
        }
    }
    out
}

/// Per-environment curriculum state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumState {
    pub level: u32,
    pub max_level: u32,
    pub kind: TerrainKind,
    pub promotions: u64,
    pub demotions: u64,
}

pub const DEFAULT_MAX_LEVEL: u32 = 9;
pub const PROMOTE_THRESHOLD: f64 = 0.8;
pub const DEMOTE_THRESHOLD: f64 = 0.4;

impl CurriculumState {
    pub fn new(kind: TerrainKind, level: u32, max_level: u32) -> Self {
        CurriculumState {
            level: level.min(max_level),
            max_level,
            kind,
            promotions: 0,
            demotions: 0,
        }
    }

    pub fn difficulty(&self) -> f64 {
        self.level as f64 / self.max_level as f64
    }
}

/// Promote/demote on normalized traversal outcome in [0, 1]. Promotion past
/// the top level re-samples a uniform random level (graduation).
pub fn curriculum_update(state: &mut CurriculumState, outcome: f64, rng: &mut impl Rng) {
    let outcome = outcome.clamp(0.0, 1.0);
    if outcome > PROMOTE_THRESHOLD {
        state.promotions += 1;
        if state.level >= state.max_level {
            state.level = rng.gen_range(0..=state.max_level);
        } else {
            state.level += 1;
        }
    } else if outcome < DEMOTE_THRESHOLD {
        state.demotions += 1;
        state.level = state.level.saturating_sub(1);
    }
}
