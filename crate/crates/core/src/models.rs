//! Builtin velocity models and acquisition layouts for synthetic studies.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mesh::{velocity_to_slowness_squared, AcquisitionGeometry, RegularGrid};

/// Velocity model generators. Depth is the last axis, increasing downward
/// from the free surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Constant { velocity: f64 },
    /// Velocity linear in depth from `top` to `bottom`.
    LinearGradient { top: f64, bottom: f64 },
    /// Constant background with an elliptic fast lens and a slower zone
    /// beneath it. Centers and radii are fractions of the domain extent.
    Lens {
        background: f64,
        lens_contrast: f64,
        sub_lens_contrast: f64,
        #[serde(default = "lens_center")]
        lens_center: Vec<f64>,
        #[serde(default = "lens_radius")]
        lens_radius: Vec<f64>,
        #[serde(default = "sub_center")]
        sub_lens_center: Vec<f64>,
        #[serde(default = "sub_radius")]
        sub_lens_radius: Vec<f64>,
    },
    /// Horizontal layers: `velocities[i]` down to depth fraction `interfaces[i]`.
    Layered { velocities: Vec<f64>, interfaces: Vec<f64> },
}

fn lens_center() -> Vec<f64> {
    vec![0.5, 0.5, 0.42]
}

fn lens_radius() -> Vec<f64> {
    vec![0.24, 0.24, 0.18]
}

fn sub_center() -> Vec<f64> {
    vec![0.5, 0.5, 0.75]
}

fn sub_radius() -> Vec<f64> {
    vec![0.18, 0.18, 0.12]
}

fn fractions(grid: &RegularGrid, idx: usize) -> [f64; 3] {
    let c = grid.coords(idx);
    let n = grid.dims3();
    let mut f = [0.0; 3];
    for k in 0..grid.ndim() {
        f[k] = c[k] as f64 / (n[k] - 1) as f64;
    }
    f
}

/// Per-axis center/radius for the lateral axes and depth.
fn axis_params(v: &[f64], nd: usize) -> Vec<f64> {
    if nd == 2 {
        vec![v[0], v[v.len() - 1]]
    } else {
        v.to_vec()
    }
}

fn inside(f: &[f64; 3], center: &[f64], radius: &[f64]) -> bool {
    center.iter().zip(radius).enumerate().map(|(k, (c, r))| ((f[k] - c) / r).powi(2)).sum::<f64>() <= 1.0
}

impl ModelSpec {
    pub fn velocity(&self, grid: &RegularGrid) -> Result<Vec<f64>> {
        let nd = grid.ndim();
        let v: Vec<f64> = match self {
            ModelSpec::Constant { velocity } => vec![*velocity; grid.len()],
            ModelSpec::LinearGradient { top, bottom } => {
                (0..grid.len()).map(|i| top + (bottom - top) * fractions(grid, i)[nd - 1]).collect()
            }
            ModelSpec::Lens { background, lens_contrast, sub_lens_contrast, lens_center, lens_radius, sub_lens_center, sub_lens_radius } => {
                for p in [lens_center, lens_radius, sub_lens_center, sub_lens_radius] {
                    if p.len() != 3 || p.iter().any(|x| !x.is_finite()) {
                        return Err(invalid("lens centers and radii need three finite entries"));
                    }
                }
                let (lc, lr) = (axis_params(lens_center, nd), axis_params(lens_radius, nd));
                let (sc, sr) = (axis_params(sub_lens_center, nd), axis_params(sub_lens_radius, nd));
                (0..grid.len())
                    .map(|i| {
                        let f = fractions(grid, i);
                        if inside(&f, &lc, &lr) {
                            background * (1.0 + lens_contrast)
                        } else if inside(&f, &sc, &sr) {
                            background * (1.0 + sub_lens_contrast)
                        } else {
                            *background
                        }
                    })
                    .collect()
            }
            ModelSpec::Layered { velocities, interfaces } => {
                if velocities.is_empty() || interfaces.len() + 1 != velocities.len() {
                    return Err(invalid("layered model needs one more velocity than interfaces"));
                }
                (0..grid.len())
                    .map(|i| {
                        let z = fractions(grid, i)[nd - 1];
                        velocities[interfaces.iter().take_while(|&&d| z >= d).count()]
                    })
                    .collect()
            }
        };
        if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(invalid("model velocities must be positive"));
        }
        Ok(v)
    }

    pub fn slowness_squared(&self, grid: &RegularGrid) -> Result<Vec<f64>> {
        velocity_to_slowness_squared(&self.velocity(grid)?)
    }
}

/// Sources and receivers on a line (2D) or plane (3D) at a fixed depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceAcquisition {
    pub num_sources: usize,
    /// Receiver every this many nodes along each lateral axis.
    pub receiver_stride: usize,
    /// Depth of sources and receivers in nodes below the surface.
    pub depth_nodes: usize,
    pub offset_min: f64,
    pub offset_max: f64,
}

impl SurfaceAcquisition {
    pub fn build(&self, grid: &RegularGrid) -> Result<AcquisitionGeometry> {
        let nd = grid.ndim();
        let n = grid.dims3();
        if self.num_sources == 0 || self.receiver_stride == 0 {
            return Err(invalid("need at least one source and a positive receiver stride"));
        }
        if self.depth_nodes >= n[nd - 1] {
            return Err(invalid("acquisition depth lies below the grid"));
        }
        let depth = grid.position(grid.index(0, 0, 0))[nd - 1] + self.depth_nodes as f64 * grid.spacing()[nd - 1];
        let lateral: Vec<usize> = (0..nd - 1).collect();
        let at = |frac: &[f64]| {
            let mut p = [0.0; 3];
            for &k in &lateral {
                p[k] = grid.origin()[k] + frac[k] * (n[k] - 1) as f64 * grid.spacing()[k];
            }
            p[nd - 1] = depth;
            p
        };
        let per_axis = if nd == 2 { self.num_sources } else { (self.num_sources as f64).sqrt().round().max(1.0) as usize };
        let node_frac = |i: usize, cnt: usize, nk: usize| {
            let margin = 0.05;
            let t = if cnt == 1 { 0.5 } else { margin + (1.0 - 2.0 * margin) * i as f64 / (cnt - 1) as f64 };
            (t * (nk - 1) as f64).round() / (nk - 1) as f64
        };
        let mut sources = Vec::new();
        if nd == 2 {
            for i in 0..per_axis {
                sources.push(at(&[node_frac(i, per_axis, n[0])]));
            }
        } else {
            for j in 0..per_axis {
                for i in 0..per_axis {
                    sources.push(at(&[node_frac(i, per_axis, n[0]), node_frac(j, per_axis, n[1])]));
                }
            }
        }
        let mut receivers = Vec::new();
        let ny = if nd == 2 { 1 } else { n[1] };
        for j in (0..ny).step_by(self.receiver_stride) {
            for i in (0..n[0]).step_by(self.receiver_stride) {
                let fy = if nd == 2 { 0.0 } else { j as f64 / (n[1] - 1) as f64 };
                receivers.push(at(&[i as f64 / (n[0] - 1) as f64, fy]));
            }
        }
        AcquisitionGeometry::new(grid, sources, receivers, self.offset_min, self.offset_max)
    }
}
