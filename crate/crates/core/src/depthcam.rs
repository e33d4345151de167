//! Ray-cast depth rendering against the heightfield from the robot-mounted
//! camera, replacing a GPU render pipeline with 2-D DDA traversal over
//! heightfield columns plus an exact ray/bilinear-patch solve per cell.
//!
//! Geometry exists only within the grid extent: rays that leave the tile or
//! never intersect report the far value.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terrain::HeightField;

/// What a pixel measures: distance along the optic axis (depth-camera
/// convention) or the Euclidean ray length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    ZDepth,
    Euclidean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub horizontal_fov_deg: f64,
    /// Position relative to the base frame (x forward, y left, z up).
    pub mount_offset: [f64; 3],
    /// Negative pitch looks down; -90 is straight down.
    pub mount_pitch_deg: f64,
    pub near: f64,
    pub far: f64,
    pub mode: DepthMode,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            width: 128,
            height: 96,
            horizontal_fov_deg: 87.0,
            mount_offset: [0.15, 0.0, 0.0],
            mount_pitch_deg: -45.0,
            near: 0.05,
            far: 2.0,
            mode: DepthMode::ZDepth,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0) {
            return Err(Error::InvalidParameter(format!(
                "horizontal fov {}",
                self.horizontal_fov_deg
            )));
        }
        if self.near <= 0.0 || self.near >= self.far {
            return Err(Error::InvalidParameter(format!(
                "near/far {}/{}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("zero image dimension".into()));
        }
        Ok(())
    }

    /// Focal length in pixels (square pixels, so fy = fx).
    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.horizontal_fov_deg.to_radians() / 2.0).tan()
    }

    /// Camera-to-base rotation. Optical axes: x right, y down, z forward.
    /// At pitch 0 the optic axis is base +x; pitch rotates it about base y,
    /// negative down.
    pub fn mount_rotation(&self) -> Matrix3<f64> {
        let p = self.mount_pitch_deg.to_radians();
        // columns: images of camera x, y, z in the base frame
        let r0 = Matrix3::from_columns(&[
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        let ry = Matrix3::new(
            (-p).cos(),
            0.0,
            (-p).sin(),
            0.0,
            1.0,
            0.0,
            -(-p).sin(),
            0.0,
            (-p).cos(),
        );
        ry * r0
    }
}

#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, index v * width + u, meters.
    pub pixels: Vec<f32>,
    pub timestamp: f64,
}

impl DepthImage {
    /// ASCII PGM (P2), 16-bit, depth in millimeters.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n65535\n", self.width, self.height);
        for v in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|u| {
                    let mm = (self.pixels[v * self.width + u] as f64 * 1000.0).round();
                    format!("{}", (mm.max(0.0) as u64).min(65535))
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Uniform jitter ranges applied per episode. Position and pitch perturb the
/// base model; the fov jitter is centered on the model fov (base 87 with
/// [-1, 1] jitter spans the D435i's [86, 88] spread).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRandomization {
    /// Millimeters, applied to mount x (forward).
    pub pos_x_mm: [f64; 2],
    /// Millimeters, applied to mount z (up).
    pub pos_z_mm: [f64; 2],
    pub pitch_jitter_deg: [f64; 2],
    pub fov_jitter_deg: [f64; 2],
}

impl Default for CameraRandomization {
    fn default() -> Self {
        CameraRandomization {
            pos_x_mm: [-5.0, 5.0],
            pos_z_mm: [-10.0, 10.0],
            pitch_jitter_deg: [-1.0, 1.0],
            fov_jitter_deg: [-1.0, 1.0],
        }
    }
}

fn draw(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Perturbed copy of `model`; the input is left untouched.
pub fn randomize_camera(
    model: &CameraModel,
    ranges: &CameraRandomization,
    rng: &mut impl Rng,
) -> CameraModel {
    let mut out = model.clone();
    out.mount_offset[0] += draw(rng, ranges.pos_x_mm) * 1e-3;
    out.mount_offset[2] += draw(rng, ranges.pos_z_mm) * 1e-3;
    out.mount_pitch_deg += draw(rng, ranges.pitch_jitter_deg);
    out.horizontal_fov_deg += draw(rng, ranges.fov_jitter_deg);
    out
}

/// First intersection of the ray `origin + t * dir` with the bilinear
/// surface, searched over t in [t_lo, t_hi]. `dir` need not be unit length;
/// t is reported in its parameterization.
pub fn raycast_heightfield(
    hf: &HeightField,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    t_lo: f64,
    t_hi: f64,
) -> Option<f64> {
    let (nx, ny) = hf.nodes();
    let cell = hf.cell_size;
    let x0 = hf.origin[0];
    let y0 = hf.origin[1];
    let x1 = x0 + (nx - 1) as f64 * cell;
    let y1 = y0 + (ny - 1) as f64 * cell;

    // clip the parameter interval to the tile's xy bounding box
    let (mut t_enter, mut t_exit) = (t_lo, t_hi);
    for (o, d, lo, hi) in [
        (origin.x, dir.x, x0, x1),
        (origin.y, dir.y, y0, y1),
    ] {
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let ta = (lo - o) / d;
            let tb = (hi - o) / d;
            let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t_enter = t_enter.max(ta);
            t_exit = t_exit.min(tb);
        }
    }
    if t_enter > t_exit {
        return None;
    }

    // rays that never descend to the field's top cannot hit; descending rays
    // skip straight to where they reach the top of the terrain
    let zmax = hf.max_height();
    if dir.z >= 0.0 {
        if origin.z + t_enter * dir.z > zmax {
            return None;
        }
        // ascending: nothing to hit after the ray climbs past the top
        let t_above = (zmax - origin.z) / dir.z.max(1e-15);
        t_exit = t_exit.min(t_above);
    } else if origin.z + t_enter * dir.z > zmax {
        let t_drop = (zmax - origin.z) / dir.z;
        t_enter = t_enter.max(t_drop);
    }
    if t_enter > t_exit {
        return None;
    }

    let eps = 1e-12;
    let mut t = t_enter;
    let grid_x = |t: f64| (origin.x + t * dir.x - x0) / cell;
    let grid_y = |t: f64| (origin.y + t * dir.y - y0) / cell;

    // current cell
    let clamp_cell = |v: f64, n: usize| -> isize {
        (v.floor() as isize).clamp(0, n as isize - 2)
    };
    let mut ix = clamp_cell(grid_x(t + eps), nx);
    let mut iy = clamp_cell(grid_y(t + eps), ny);

    let step_x: isize = if dir.x > 0.0 { 1 } else { -1 };
    let step_y: isize = if dir.y > 0.0 { 1 } else { -1 };
    let t_delta_x = if dir.x.abs() < 1e-15 {
        f64::INFINITY
    } else {
        cell / dir.x.abs()
    };
    let t_delta_y = if dir.y.abs() < 1e-15 {
        f64::INFINITY
    } else {
        cell / dir.y.abs()
    };
    let mut t_max_x = if dir.x.abs() < 1e-15 {
        f64::INFINITY
    } else {
        let next = if dir.x > 0.0 {
            x0 + (ix + 1) as f64 * cell
        } else {
            x0 + ix as f64 * cell
        };
        (next - origin.x) / dir.x
    };
    let mut t_max_y = if dir.y.abs() < 1e-15 {
        f64::INFINITY
    } else {
        let next = if dir.y > 0.0 {
            y0 + (iy + 1) as f64 * cell
        } else {
            y0 + iy as f64 * cell
        };
        (next - origin.y) / dir.y
    };

    loop {
        let t_cell_end = t_max_x.min(t_max_y).min(t_exit);
        // early-out on the column max before the exact patch solve
        let z_a = origin.z + t * dir.z;
        let z_b = origin.z + t_cell_end * dir.z;
        let col_max = hf.cell_max_height(ix as usize, iy as usize);
        if z_a.min(z_b) <= col_max {
            if let Some(hit) =
                intersect_bilinear_cell(hf, origin, dir, ix as usize, iy as usize, t, t_cell_end)
            {
                return Some(hit);
            }
        }
        if t_cell_end >= t_exit {
            return None;
        }
        if t_max_x < t_max_y {
            t = t_max_x;
            t_max_x += t_delta_x;
            ix += step_x;
            if ix < 0 || ix > nx as isize - 2 {
                return None;
            }
        } else {
            t = t_max_y;
            t_max_y += t_delta_y;
            iy += step_y;
            if iy < 0 || iy > ny as isize - 2 {
                return None;
            }
        }
    }
}

/// Exact ray/bilinear-patch intersection within one cell over [t0, t1].
fn intersect_bilinear_cell(
    hf: &HeightField,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    ix: usize,
    iy: usize,
    t0: f64,
    t1: f64,
) -> Option<f64> {
    let cell = hf.cell_size;
    let cx = hf.origin[0] + ix as f64 * cell;
    let cy = hf.origin[1] + iy as f64 * cell;
    let h00 = hf.node_height(ix, iy);
    let h10 = hf.node_height(ix + 1, iy);
    let h01 = hf.node_height(ix, iy + 1);
    let h11 = hf.node_height(ix + 1, iy + 1);
    let a_c = h10 - h00;
    let b_c = h01 - h00;
    let c_c = h11 - h10 - h01 + h00;

    // cell-local coordinates u, v in [0, 1]; both are linear in t
    let u0 = (origin.x + t0 * dir.x - cx) / cell;
    let v0 = (origin.y + t0 * dir.y - cy) / cell;
    let du = dir.x / cell;
    let dv = dir.y / cell;
    // f(s) = z(t0+s) - h(u(t0+s), v(t0+s)) = qa s^2 + qb s + qc
    let qa = -c_c * du * dv;
    let qb = dir.z - a_c * du - b_c * dv - c_c * (u0 * dv + v0 * du);
    let qc = origin.z + t0 * dir.z - (h00 + a_c * u0 + b_c * v0 + c_c * u0 * v0);

    let span = t1 - t0;
    if span <= 0.0 {
        return None;
    }
    if qc <= 0.0 {
        // started at or below the surface
        return Some(t0);
    }
    // Stable root finding: the curvature term qa vanishes on planar patches
    // up to rounding noise, where the textbook quadratic formula cancels
    // catastrophically. Use q = -(qb + sign(qb) sqrt(disc))/2 and the
    // qc/q form for the root that stays finite as qa -> 0.
    let mut best: Option<f64> = None;
    let consider = |s: f64, best: &mut Option<f64>| {
        if s.is_finite() && s >= 0.0 && s <= span && best.map(|b| s < b).unwrap_or(true) {
            *best = Some(s);
        }
    };
    if qa == 0.0 {
        if qb != 0.0 {
            consider(-qc / qb, &mut best);
        }
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let q = -0.5 * (qb + qb.signum() * sq);
            consider(q / qa, &mut best);
            if q != 0.0 {
                consider(qc / q, &mut best);
            }
        }
    }
    best.map(|s| t0 + s)
}

/// Render a depth image. `base_pos`/`base_rot` give the robot base pose in
/// the world; the camera mount comes from `model`.
pub fn render_depth(
    hf: &HeightField,
    base_pos: Vector3<f64>,
    base_rot: &UnitQuaternion<f64>,
    model: &CameraModel,
    timestamp: f64,
) -> DepthImage {
    let rot_base = base_rot.to_rotation_matrix();
    let cam_origin = base_pos + rot_base * Vector3::from(model.mount_offset);
    let cam_to_world = rot_base.matrix() * model.mount_rotation();
    let f = model.focal_px();
    let (w, h) = (model.width, model.height);
    let mut pixels = vec![0.0f32; w * h];
    for v in 0..h {
        for u in 0..w {
            // pinhole ray through the pixel center; traced with a unit
            // direction so the walk length stays bounded, then converted
            // back to the requested depth convention
            let dc = Vector3::new(
                (u as f64 + 0.5 - w as f64 / 2.0) / f,
                (v as f64 + 0.5 - h as f64 / 2.0) / f,
                1.0,
            );
            let norm = dc.norm();
            let dir = (cam_to_world * dc) / norm;
            // per-mode parameter range: z-depth in [near, far] corresponds
            // to euclidean length in [near*norm, far*norm]
            let scale = match model.mode {
                DepthMode::ZDepth => norm,
                DepthMode::Euclidean => 1.0,
            };
            let hit = raycast_heightfield(
                hf,
                cam_origin,
                dir,
                model.near * scale,
                model.far * scale,
            );
            let d = hit.map(|t| t / scale).unwrap_or(model.far);
            pixels[v * w + u] = d.clamp(model.near, model.far) as f32;
        }
    }
    DepthImage {
        width: w,
        height: h,
        pixels,
        timestamp,
    }
}

/// Normalized policy input: clip to [near, far], map linearly to
/// [-0.5, 0.5], then area-average downsample to (out_h, out_w).
pub fn preprocess_depth(
    img: &DepthImage,
    near: f64,
    far: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>> {
    if img.height % out_h != 0 || img.width % out_w != 0 {
        return Err(Error::ShapeMismatch(format!(
            "downsample {}x{} -> {}x{} is not an integer factor",
            img.height, img.width, out_h, out_w
        )));
    }
    let fy = img.height / out_h;
    let fx = img.width / out_w;
    let range = far - near;
    let mut out = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut acc = 0.0f64;
            for sy in 0..fy {
                for sx in 0..fx {
                    let d = img.pixels[(oy * fy + sy) * img.width + (ox * fx + sx)] as f64;
                    let clipped = d.clamp(near, far);
                    acc += (clipped - near) / range - 0.5;
                }
            }
            out[oy * out_w + ox] = (acc / (fy * fx) as f64) as f32;
        }
    }
    Ok(out)
}
