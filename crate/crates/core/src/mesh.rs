//! Regular node-centred grids, squared-slowness models, boundary padding and
//! the source/receiver sampling operators shared by both physics.
//!
//! Grids are stored first axis fastest. In 2D the third axis has a single
//! node and unit spacing so that every kernel can loop over three axes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularGrid {
    ndim: usize,
    n: [usize; 3],
    h: [f64; 3],
    origin: [f64; 3],
}

impl RegularGrid {
    pub fn new(n: &[usize], h: &[f64], origin: &[f64]) -> Result<Self> {
        let ndim = n.len();
        if !(2..=3).contains(&ndim) {
            return Err(invalid(format!("grid must be 2D or 3D, got {ndim} axes")));
        }
        if h.len() != ndim || origin.len() != ndim {
            return Err(invalid("spacing and origin must have one entry per axis"));
        }
        let mut g = RegularGrid { ndim, n: [1; 3], h: [1.0; 3], origin: [0.0; 3] };
        for k in 0..ndim {
            if n[k] < 3 {
                return Err(invalid(format!("axis {k} has {} nodes, need at least 3", n[k])));
            }
            if !(h[k] > 0.0 && h[k].is_finite()) {
                return Err(invalid(format!("axis {k} spacing must be positive, got {}", h[k])));
            }
            g.n[k] = n[k];
            g.h[k] = h[k];
            g.origin[k] = origin[k];
        }
        let total = n.iter().try_fold(1usize, |acc, &v| acc.checked_mul(v));
        match total {
            Some(t) if t < u32::MAX as usize => Ok(g),
            _ => Err(invalid("grid has too many nodes for 32-bit indexing")),
        }
    }

    pub fn with_spacing(n: &[usize], h: &[f64]) -> Result<Self> {
        Self::new(n, h, &vec![0.0; n.len()])
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.ndim
    }

    /// Nodes per axis (only the first `ndim` entries).
    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.n[..self.ndim]
    }

    #[inline]
    pub fn dims3(&self) -> [usize; 3] {
        self.n
    }

    #[inline]
    pub fn spacing(&self) -> &[f64] {
        &self.h[..self.ndim]
    }

    #[inline]
    pub fn spacing3(&self) -> [f64; 3] {
        self.h
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.ndim]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [1, self.n[0], self.n[0] * self.n[1]]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n[0] * (j + self.n[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.n[0];
        let r = idx / self.n[0];
        [i, r % self.n[1], r / self.n[1]]
    }

    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        let mut p = [0.0; 3];
        for k in 0..self.ndim {
            p[k] = self.origin[k] + c[k] as f64 * self.h[k];
        }
        p
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Upper corner of the domain.
    pub fn extent(&self) -> [f64; 3] {
        let mut e = [0.0; 3];
        for k in 0..self.ndim {
            e[k] = self.origin[k] + (self.n[k] - 1) as f64 * self.h[k];
        }
        e
    }

    pub fn contains(&self, pos: &[f64]) -> bool {
        let e = self.extent();
        let tol = 1e-9;
        (0..self.ndim).all(|k| {
            let t = tol * self.h[k];
            pos[k] >= self.origin[k] - t && pos[k] <= e[k] + t
        })
    }

    /// Nearest node to `pos`; exact midpoints go to the lower index.
    pub fn nearest_node(&self, pos: &[f64]) -> Result<usize> {
        if pos.len() < self.ndim || !self.contains(pos) {
            return Err(invalid(format!("position {:?} lies outside the grid", pos)));
        }
        let mut c = [0usize; 3];
        for k in 0..self.ndim {
            let t = (pos[k] - self.origin[k]) / self.h[k];
            let i = (t - 0.5).ceil().max(0.0) as usize;
            c[k] = i.min(self.n[k] - 1);
        }
        Ok(self.index(c[0], c[1], c[2]))
    }

    /// Same shape with a different origin.
    pub fn with_origin(&self, origin: &[f64]) -> RegularGrid {
        let mut g = self.clone();
        for k in 0..self.ndim {
            g.origin[k] = origin[k];
        }
        g
    }
}

/// Squared slowness `m = 1/c^2` sampled at the grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SlownessSquaredModel {
    grid: RegularGrid,
    values: Vec<f64>,
}

impl SlownessSquaredModel {
    pub fn new(grid: RegularGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!("model has {} values for {} nodes", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("squared slowness must be positive, node {i} has {}", values[i])));
        }
        Ok(SlownessSquaredModel { grid, values })
    }

    pub fn constant(grid: RegularGrid, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn from_velocity(grid: RegularGrid, velocity: &[f64]) -> Result<Self> {
        Self::new(grid, velocity_to_slowness_squared(velocity)?)
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn to_velocity(&self) -> Vec<f64> {
        slowness_squared_to_velocity(&self.values)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn velocity_to_slowness_squared(c: &[f64]) -> Result<Vec<f64>> {
    c.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > 0.0 && v.is_finite() {
                Ok(1.0 / (v * v))
            } else {
                Err(invalid(format!("velocity must be positive, node {i} has {v}")))
            }
        })
        .collect()
}

pub fn slowness_squared_to_velocity(m: &[f64]) -> Vec<f64> {
    m.iter().map(|&v| 1.0 / v.sqrt()).collect()
}

/// Box constraints on the squared slowness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    pub lower: f64,
    pub upper: f64,
}

impl ModelBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower < upper) {
            return Err(invalid(format!("need 0 < lower < upper, got [{lower}, {upper}]")));
        }
        Ok(ModelBounds { lower, upper })
    }

    /// Bounds from a velocity range (slow velocity gives the upper bound).
    pub fn from_velocity(v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min > 0.0 && v_min < v_max) {
            return Err(invalid(format!("need 0 < v_min < v_max, got [{v_min}, {v_max}]")));
        }
        Self::new(1.0 / (v_max * v_max), 1.0 / (v_min * v_min))
    }

    pub fn project(&self, m: &mut [f64]) {
        m.iter_mut().for_each(|v| *v = v.clamp(self.lower, self.upper));
    }

    pub fn contains(&self, m: &[f64]) -> bool {
        m.iter().all(|&v| v >= self.lower && v <= self.upper)
    }
}

/// Per-side padding widths in nodes: `lo[k]` before and `hi[k]` after axis k.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Padding {
    /// Widths given as `(lo, hi)` pairs per axis; negative values are rejected.
    pub fn from_signed(widths: &[(i64, i64)]) -> Result<Self> {
        if widths.len() > 3 {
            return Err(invalid("at most three axes of padding"));
        }
        let mut p = Padding::default();
        for (k, &(lo, hi)) in widths.iter().enumerate() {
            if lo < 0 || hi < 0 {
                return Err(invalid(format!("negative padding width on axis {k}")));
            }
            p.lo[k] = lo as usize;
            p.hi[k] = hi as usize;
        }
        Ok(p)
    }

    /// Same width on every side of every axis except the low side of the last
    /// axis (the free surface at the top of the model).
    pub fn surface(ndim: usize, width: usize) -> Self {
        let mut p = Padding::default();
        for k in 0..ndim {
            p.lo[k] = width;
            p.hi[k] = width;
        }
        p.lo[ndim - 1] = 0;
        p
    }

    pub fn is_zero(&self) -> bool {
        self.lo.iter().chain(self.hi.iter()).all(|&w| w == 0)
    }

    pub fn padded_grid(&self, core: &RegularGrid) -> Result<RegularGrid> {
        let nd = core.ndim();
        let n: Vec<usize> = (0..nd).map(|k| core.dims()[k] + self.lo[k] + self.hi[k]).collect();
        let origin: Vec<f64> = (0..nd).map(|k| core.origin()[k] - self.lo[k] as f64 * core.spacing()[k]).collect();
        RegularGrid::new(&n, core.spacing(), &origin)
    }
}

/// A model extended by edge replication into the absorbing-layer padding.
#[derive(Clone, Debug)]
pub struct PaddedModel {
    core: SlownessSquaredModel,
    pad: Padding,
    padded: SlownessSquaredModel,
}

impl PaddedModel {
    pub fn core(&self) -> &SlownessSquaredModel {
        &self.core
    }

    pub fn padding(&self) -> Padding {
        self.pad
    }

    pub fn padded(&self) -> &SlownessSquaredModel {
        &self.padded
    }

    pub fn into_padded(self) -> SlownessSquaredModel {
        self.padded
    }
}

pub fn pad_model(core: &SlownessSquaredModel, pad: Padding) -> Result<PaddedModel> {
    let pgrid = pad.padded_grid(core.grid())?;
    let values = extend_field(core.grid(), &pgrid, &pad, core.values());
    Ok(PaddedModel {
        core: core.clone(),
        pad,
        padded: SlownessSquaredModel { grid: pgrid, values },
    })
}

/// Index of the core node whose value a padded node replicates.
#[inline]
fn source_index(core: &RegularGrid, pad: &Padding, c: [usize; 3]) -> usize {
    let n = core.dims3();
    let mut s = [0usize; 3];
    for k in 0..3 {
        let v = c[k] as isize - pad.lo[k] as isize;
        s[k] = v.clamp(0, n[k] as isize - 1) as usize;
    }
    core.index(s[0], s[1], s[2])
}

/// Replication extension `E` from the core grid to the padded grid.
pub fn extend_field<T: Scalar>(core: &RegularGrid, padded: &RegularGrid, pad: &Padding, values: &[T]) -> Vec<T> {
    (0..padded.len()).map(|idx| values[source_index(core, pad, padded.coords(idx))]).collect()
}

/// Adjoint `E^T` of the replication extension: every padded node adds its
/// value to the core node it replicates.
pub fn extend_adjoint(core: &RegularGrid, padded: &RegularGrid, pad: &Padding, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; core.len()];
    for (idx, v) in values.iter().enumerate() {
        out[source_index(core, pad, padded.coords(idx))] += v;
    }
    out
}

/// Restrict a padded field to the core window.
pub fn restrict_field<T: Scalar>(core: &RegularGrid, pad: &Padding, padded: &RegularGrid, values: &[T]) -> Vec<T> {
    let n = core.dims3();
    let mut out = Vec::with_capacity(core.len());
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                out.push(values[padded.index(i + pad.lo[0], j + pad.lo[1], k + pad.lo[2])]);
            }
        }
    }
    out
}

/// Sources, receivers and which receivers record each source.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionGeometry {
    sources: Vec<[f64; 3]>,
    receivers: Vec<[f64; 3]>,
    offset_min: f64,
    offset_max: f64,
    mask: Vec<Vec<bool>>,
}

impl AcquisitionGeometry {
    pub fn new(
        grid: &RegularGrid,
        sources: Vec<[f64; 3]>,
        receivers: Vec<[f64; 3]>,
        offset_min: f64,
        offset_max: f64,
    ) -> Result<Self> {
        if sources.is_empty() || receivers.is_empty() {
            return Err(invalid("need at least one source and one receiver"));
        }
        if !(offset_min >= 0.0 && offset_min <= offset_max) {
            return Err(invalid(format!("bad offset range [{offset_min}, {offset_max}]")));
        }
        for (what, list) in [("source", &sources), ("receiver", &receivers)] {
            if let Some((i, p)) = list.iter().enumerate().find(|(_, p)| !grid.contains(&p[..])) {
                return Err(invalid(format!("{what} {i} at {:?} lies outside the grid", p)));
            }
        }
        let nd = grid.ndim();
        let mask = sources
            .iter()
            .map(|s| {
                receivers
                    .iter()
                    .map(|r| {
                        let d = (0..nd).map(|k| (s[k] - r[k]).powi(2)).sum::<f64>().sqrt();
                        d >= offset_min && d <= offset_max
                    })
                    .collect()
            })
            .collect();
        Ok(AcquisitionGeometry { sources, receivers, offset_min, offset_max, mask })
    }

    pub fn sources(&self) -> &[[f64; 3]] {
        &self.sources
    }

    pub fn receivers(&self) -> &[[f64; 3]] {
        &self.receivers
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn num_receivers(&self) -> usize {
        self.receivers.len()
    }

    pub fn offsets(&self) -> (f64, f64) {
        (self.offset_min, self.offset_max)
    }

    /// Active-receiver mask for source `s`.
    pub fn mask(&self, s: usize) -> &[bool] {
        &self.mask[s]
    }
}

/// Multilinear interpolation of grid fields at receiver positions (the
/// matrix `P` with `sample = P^T u`).
#[derive(Clone, Debug)]
pub struct SamplingOperator {
    nnodes: usize,
    weights: Vec<Vec<(u32, f64)>>,
}

impl SamplingOperator {
    pub fn new(grid: &RegularGrid, positions: &[[f64; 3]]) -> Result<Self> {
        let nd = grid.ndim();
        let dims = grid.dims3();
        let mut weights = Vec::with_capacity(positions.len());
        for (r, pos) in positions.iter().enumerate() {
            if !grid.contains(&pos[..]) {
                return Err(invalid(format!("receiver {r} at {:?} lies outside the grid", pos)));
            }
            let mut base = [0usize; 3];
            let mut frac = [0.0f64; 3];
            for k in 0..nd {
                let t = ((pos[k] - grid.origin()[k]) / grid.spacing()[k]).clamp(0.0, (dims[k] - 1) as f64);
                let i0 = (t.floor() as usize).min(dims[k] - 2);
                base[k] = i0;
                frac[k] = (t - i0 as f64).clamp(0.0, 1.0);
            }
            let mut w = Vec::with_capacity(1 << nd);
            for corner in 0..(1usize << nd) {
                let mut wt = 1.0;
                let mut c = base;
                for k in 0..nd {
                    if corner >> k & 1 == 1 {
                        wt *= frac[k];
                        c[k] += 1;
                    } else {
                        wt *= 1.0 - frac[k];
                    }
                }
                if wt > 0.0 {
                    w.push((grid.index(c[0], c[1], c[2]) as u32, wt));
                }
            }
            weights.push(w);
        }
        Ok(SamplingOperator { nnodes: grid.len(), weights })
    }

    pub fn num_receivers(&self) -> usize {
        self.weights.len()
    }

    pub fn nnodes(&self) -> usize {
        self.nnodes
    }

    pub fn weights(&self, r: usize) -> &[(u32, f64)] {
        &self.weights[r]
    }

    /// `P^T u`; inactive receivers (mask false) read zero.
    pub fn sample<T: Scalar>(&self, u: &[T], mask: Option<&[bool]>) -> Vec<T> {
        assert_eq!(u.len(), self.nnodes, "field length differs from grid size");
        self.weights
            .iter()
            .enumerate()
            .map(|(r, w)| {
                if mask.is_some_and(|m| !m[r]) {
                    return T::zero();
                }
                w.iter().map(|&(i, wt)| u[i as usize].scale(wt)).sum()
            })
            .collect()
    }

    /// `P d`; inactive receivers contribute nothing.
    pub fn sample_adjoint<T: Scalar>(&self, d: &[T], mask: Option<&[bool]>) -> Vec<T> {
        assert_eq!(d.len(), self.weights.len());
        let mut out = vec![T::zero(); self.nnodes];
        for (r, w) in self.weights.iter().enumerate() {
            if mask.is_some_and(|m| !m[r]) {
                continue;
            }
            for &(i, wt) in w {
                out[i as usize] += d[r].scale(wt);
            }
        }
        out
    }
}

/// Discrete point source: `1/prod(h)` at the nearest node.
pub fn point_source(grid: &RegularGrid, pos: &[f64]) -> Result<(usize, f64)> {
    Ok((grid.nearest_node(pos)?, 1.0 / grid.cell_volume()))
}
