//! Factored eikonal equation `|∇(τ₀τ₁)|² = m` solved by fast marching with a
//! first-order Godunov upwind scheme, and travel-time sensitivities applied
//! by triangular solves in fast-marching order.
//!
//! `τ₀` is the distance to the source node, so `τ₁ ≡ √m` for constant media.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{invalid, Result};
use crate::mesh::{RegularGrid, SlownessSquaredModel};

/// Per-axis upwind choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upwind {
    None = 0,
    Backward = 1,
    Forward = 2,
}

pub fn encode_directions(dirs: &[Upwind; 3]) -> u8 {
    dirs[0] as u8 + 5 * dirs[1] as u8 + 25 * dirs[2] as u8
}

pub fn decode_directions(code: u8) -> [Upwind; 3] {
    let d = |c: u8| match c % 5 {
        1 => Upwind::Backward,
        2 => Upwind::Forward,
        _ => Upwind::None,
    };
    [d(code), d(code / 5), d(code / 25)]
}

#[derive(Clone, Debug)]
pub struct FactoredEikonalSolution {
    grid: RegularGrid,
    source: [f64; 3],
    source_node: usize,
    tau0: Vec<f64>,
    tau1: Vec<f64>,
    order: Vec<u32>,
}

impl FactoredEikonalSolution {
    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    /// Source position after snapping to its node.
    pub fn source(&self) -> [f64; 3] {
        self.source
    }

    pub fn source_node(&self) -> usize {
        self.source_node
    }

    pub fn tau0(&self) -> &[f64] {
        &self.tau0
    }

    pub fn tau1(&self) -> &[f64] {
        &self.tau1
    }

    /// Nodes in the order they were accepted.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    /// `τ = τ₀ τ₁`.
    pub fn travel_time(&self) -> Vec<f64> {
        self.tau0.iter().zip(&self.tau1).map(|(a, b)| a * b).collect()
    }

    pub fn p0(&self, idx: usize) -> [f64; 3] {
        p0_at(&self.grid, &self.source, idx, self.tau0[idx])
    }
}

pub fn travel_time(sol: &FactoredEikonalSolution) -> Vec<f64> {
    sol.travel_time()
}

/// Data needed to apply the sensitivity: 32-bit acceptance order, 8-bit
/// upwind code and 32-bit `τ₁` per node.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRecord {
    grid: RegularGrid,
    source_node: usize,
    fm_order: Vec<u32>,
    codes: Vec<u8>,
    tau1: Vec<f32>,
}

impl SensitivityRecord {
    pub fn new(grid: RegularGrid, source_node: usize, fm_order: Vec<u32>, codes: Vec<u8>, tau1: Vec<f32>) -> Result<Self> {
        let n = grid.len();
        if fm_order.len() != n || codes.len() != n || tau1.len() != n {
            return Err(invalid("sensitivity record arrays must have one entry per node"));
        }
        if source_node >= n {
            return Err(invalid("source node outside the grid"));
        }
        let mut seen = vec![false; n];
        for &i in &fm_order {
            let i = i as usize;
            if i >= n || seen[i] {
                return Err(invalid("fast-marching order is not a permutation"));
            }
            seen[i] = true;
        }
        if fm_order[0] as usize != source_node {
            return Err(invalid("fast-marching order must start at the source node"));
        }
        if codes.iter().any(|&c| c >= 125) {
            return Err(invalid("invalid upwind code"));
        }
        Ok(SensitivityRecord { grid, source_node, fm_order, codes, tau1 })
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn source_node(&self) -> usize {
        self.source_node
    }

    pub fn fm_order(&self) -> &[u32] {
        &self.fm_order
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn tau1(&self) -> &[f32] {
        &self.tau1
    }

    pub fn bits_per_node(&self) -> usize {
        8 * (std::mem::size_of::<u32>() + std::mem::size_of::<u8>() + std::mem::size_of::<f32>())
    }

    pub fn storage_bytes(&self) -> usize {
        self.fm_order.len() * 4 + self.codes.len() + self.tau1.len() * 4
    }

    /// Row of the linearized scheme at `idx`: diagonal and (neighbor, value)
    /// off-diagonals, built from the stored choices.
    pub fn row(&self, idx: usize) -> (f64, Vec<(usize, f64)>) {
        let t1 = self.tau1[idx] as f64;
        if idx == self.source_node {
            return (2.0 * t1, Vec::new());
        }
        let source = self.grid.position(self.source_node);
        let tau0 = distance(&self.grid, &source, idx);
        let p0 = p0_at(&self.grid, &source, idx, tau0);
        let dirs = decode_directions(self.codes[idx]);
        let strides = self.grid.strides();
        let mut diag = 0.0;
        let mut off = Vec::with_capacity(3);
        for k in 0..self.grid.ndim() {
            let h = self.grid.spacing()[k];
            let (nbr, a) = match dirs[k] {
                Upwind::None => continue,
                Upwind::Backward => (idx - strides[k], tau0 / h + p0[k]),
                Upwind::Forward => (idx + strides[k], tau0 / h - p0[k]),
            };
            let g = a * t1 - tau0 / h * self.tau1[nbr] as f64;
            diag += 2.0 * g * a;
            off.push((nbr, -2.0 * g * tau0 / h));
        }
        (diag, off)
    }
}

fn distance(grid: &RegularGrid, source: &[f64; 3], idx: usize) -> f64 {
    let p = grid.position(idx);
    (0..grid.ndim()).map(|k| (p[k] - source[k]).powi(2)).sum::<f64>().sqrt()
}

fn p0_at(grid: &RegularGrid, source: &[f64; 3], idx: usize, tau0: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    if tau0 > 0.0 {
        let p = grid.position(idx);
        for k in 0..grid.ndim() {
            g[k] = (p[k] - source[k]) / tau0;
        }
    }
    g
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    tau: f64,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (tau, idx)
        other.tau.total_cmp(&self.tau).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Candidate upwind line `a τ₁ - b` on axis `axis`.
#[derive(Clone, Copy, Debug)]
struct Line {
    axis: usize,
    dir: Upwind,
    a: f64,
    b: f64,
    /// Travel time of the neighbor the line uses.
    tau_nbr: f64,
}

/// Largest root of `Σ_axes max(lines, 0)² = m`, and the active
/// direction per axis.
fn solve_local(lines: &[Line], m: f64) -> Option<(f64, [Upwind; 3])> {
    if lines.is_empty() {
        return None;
    }
    let value = |t: f64| -> (f64, [Option<Line>; 3]) {
        let mut best: [Option<Line>; 3] = [None; 3];
        for l in lines {
            let v = l.a * t - l.b;
            if v > 0.0 && best[l.axis].is_none_or(|c| v > c.a * t - c.b) {
                best[l.axis] = Some(*l);
            }
        }
        let f = best.iter().flatten().map(|l| (l.a * t - l.b).powi(2)).sum();
        (f, best)
    };
    let mut bps: Vec<f64> = lines.iter().map(|l| l.b / l.a).collect();
    for (i, l1) in lines.iter().enumerate() {
        for l2 in &lines[i + 1..] {
            if l1.axis == l2.axis && l1.a != l2.a {
                bps.push((l1.b - l2.b) / (l1.a - l2.a));
            }
        }
    }
    bps.retain(|t| t.is_finite());
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    // first breakpoint where F exceeds m bounds the bracketing interval
    let mut lo = bps[0];
    let mut hi = f64::INFINITY;
    for &t in &bps {
        if value(t).0 >= m {
            hi = t;
            break;
        }
        lo = t;
    }
    let probe = if hi.is_finite() { 0.5 * (lo + hi) } else { lo + 1.0 + lo.abs() };
    let (_, active) = value(probe);
    let (mut qa, mut qb, mut qc) = (0.0, 0.0, 0.0);
    let mut dirs = [Upwind::None; 3];
    for l in active.iter().flatten() {
        qa += l.a * l.a;
        qb += l.a * l.b;
        qc += l.b * l.b;
        dirs[l.axis] = l.dir;
    }
    if qa == 0.0 {
        return None;
    }
    let disc = (qb * qb - qa * (qc - m)).max(0.0);
    let mut t = (qb + disc.sqrt()) / qa;
    if t < lo {
        t = lo;
    }
    if t > hi {
        t = hi;
    }
    Some((t, dirs))
}

/// Local solve that only keeps neighbors arriving no later than the result,
/// dropping the latest offending neighbor and re-solving as needed.
fn causal_update(mut lines: Vec<Line>, tau0: f64, m: f64) -> Option<(f64, [Upwind; 3])> {
    let first = solve_local(&lines, m)?;
    let mut cur = first;
    loop {
        let (t, dirs) = cur;
        let late = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| dirs[l.axis] == l.dir && l.tau_nbr > tau0 * t)
            .max_by(|a, b| a.1.tau_nbr.total_cmp(&b.1.tau_nbr))
            .map(|(i, _)| i);
        let Some(i) = late else { return Some(cur) };
        lines.remove(i);
        match solve_local(&lines, m) {
            Some(next) => cur = next,
            None => return Some(first),
        }
    }
}

fn node_lines(grid: &RegularGrid, source: &[f64; 3], idx: usize, tau0: &[f64], tau1: &[f64], known: &[bool]) -> Vec<Line> {
    let tau_of = |j: usize| tau0[j] * tau1[j];
    let t0 = tau0[idx];
    let p0 = p0_at(grid, source, idx, t0);
    let c = grid.coords(idx);
    let dims = grid.dims3();
    let strides = grid.strides();
    let mut lines = Vec::with_capacity(6);
    for k in 0..grid.ndim() {
        let h = grid.spacing()[k];
        let s = t0 / h;
        if c[k] > 0 && known[idx - strides[k]] {
            let j = idx - strides[k];
            let a = s + p0[k];
            if a > 0.0 {
                lines.push(Line { axis: k, dir: Upwind::Backward, a, b: s * tau1[j], tau_nbr: tau_of(j) });
            }
        }
        if c[k] + 1 < dims[k] && known[idx + strides[k]] {
            let j = idx + strides[k];
            let a = s - p0[k];
            if a > 0.0 {
                lines.push(Line { axis: k, dir: Upwind::Forward, a, b: s * tau1[j], tau_nbr: tau_of(j) });
            }
        }
    }
    lines
}

/// Fast marching from the node nearest `x_s`.
pub fn fm_solve(model: &SlownessSquaredModel, x_s: &[f64]) -> Result<(FactoredEikonalSolution, SensitivityRecord)> {
    let grid = model.grid().clone();
    let m = model.values();
    let n = grid.len();
    let source_node = grid.nearest_node(x_s)?;
    let source = grid.position(source_node);
    let tau0: Vec<f64> = (0..n).map(|i| distance(&grid, &source, i)).collect();
    let mut tau1 = vec![f64::INFINITY; n];
    let mut codes = vec![0u8; n];
    let mut known = vec![false; n];
    let mut order: Vec<u32> = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    tau1[source_node] = m[source_node].sqrt();
    heap.push(Entry { tau: 0.0, idx: source_node });
    let strides = grid.strides();
    let dims = grid.dims3();
    while let Some(Entry { tau, idx }) = heap.pop() {
        if known[idx] || tau != tau0[idx] * tau1[idx] {
            continue;
        }
        known[idx] = true;
        order.push(idx as u32);
        let c = grid.coords(idx);
        for k in 0..grid.ndim() {
            for (ok, nb) in [(c[k] > 0, idx.wrapping_sub(strides[k])), (c[k] + 1 < dims[k], idx + strides[k])] {
                if !ok || known[nb] {
                    continue;
                }
                let lines = node_lines(&grid, &source, nb, &tau0, &tau1, &known);
                if let Some((t, dirs)) = causal_update(lines, tau0[nb], m[nb]) {
                    if t < tau1[nb] {
                        tau1[nb] = t;
                        codes[nb] = encode_directions(&dirs);
                        heap.push(Entry { tau: tau0[nb] * t, idx: nb });
                    }
                }
            }
        }
    }
    assert_eq!(order.len(), n, "fast marching did not reach every node");
    let t32: Vec<f32> = tau1.iter().map(|&v| v as f32).collect();
    let record = SensitivityRecord { grid: grid.clone(), source_node, fm_order: order.clone(), codes, tau1: t32 };
    Ok((FactoredEikonalSolution { grid, source, source_node, tau0, tau1, order }, record))
}

/// Left-hand side of the discrete scheme at `idx` evaluated with the recorded
/// upwind choices.
pub fn scheme_residual(sol: &FactoredEikonalSolution, record: &SensitivityRecord, idx: usize) -> f64 {
    let g = sol.grid();
    let dirs = decode_directions(record.codes()[idx]);
    let tau0 = sol.tau0()[idx];
    let p0 = sol.p0(idx);
    let t = sol.tau1();
    let strides = g.strides();
    let mut f = 0.0;
    for k in 0..g.ndim() {
        let h = g.spacing()[k];
        let d = match dirs[k] {
            Upwind::None => 0.0,
            Upwind::Backward => tau0 * (t[idx] - t[idx - strides[k]]) / h + p0[k] * t[idx],
            Upwind::Forward => -(tau0 * (t[idx + strides[k]] - t[idx]) / h + p0[k] * t[idx]),
        };
        f += d * d;
    }
    f
}

fn check_len(record: &SensitivityRecord, v: &[f64]) -> Result<()> {
    if v.len() != record.grid().len() {
        return Err(invalid(format!("vector has {} entries for a grid of {} nodes", v.len(), record.grid().len())));
    }
    Ok(())
}

/// Travel-time perturbation `τ₀ ⊙ L⁻¹ v` on every node.
pub fn eik_jacobian_vec(record: &SensitivityRecord, v: &[f64]) -> Result<Vec<f64>> {
    check_len(record, v)?;
    let n = v.len();
    let mut z = vec![0.0; n];
    for &i in record.fm_order() {
        let i = i as usize;
        let (d, off) = record.row(i);
        if d == 0.0 {
            continue;
        }
        let s: f64 = off.iter().map(|&(j, a)| a * z[j]).sum();
        z[i] = (v[i] - s) / d;
    }
    let source = record.grid().position(record.source_node());
    Ok((0..n).map(|i| distance(record.grid(), &source, i) * z[i]).collect())
}

/// Adjoint `L⁻ᵀ (τ₀ ⊙ w)` by substitution in reverse acceptance order.
pub fn eik_jacobian_transpose_vec(record: &SensitivityRecord, w: &[f64]) -> Result<Vec<f64>> {
    check_len(record, w)?;
    let n = w.len();
    let source = record.grid().position(record.source_node());
    let mut y: Vec<f64> = (0..n).map(|i| distance(record.grid(), &source, i) * w[i]).collect();
    let mut x = vec![0.0; n];
    for &i in record.fm_order().iter().rev() {
        let i = i as usize;
        let (d, off) = record.row(i);
        if d == 0.0 {
            continue;
        }
        x[i] = y[i] / d;
        for (j, a) in off {
            y[j] -= a * x[i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_model(dims: &[usize], h: f64, v: f64) -> SlownessSquaredModel {
        let g = RegularGrid::with_spacing(dims, &vec![h; dims.len()]).unwrap();
        SlownessSquaredModel::constant(g, v).unwrap()
    }

    #[test]
    fn codes_roundtrip() {
        for c in 0..27u8 {
            let d = [c % 3, c / 3 % 3, c / 9];
            let dirs = d.map(|x| match x {
                0 => Upwind::None,
                1 => Upwind::Backward,
                _ => Upwind::Forward,
            });
            assert_eq!(decode_directions(encode_directions(&dirs)), dirs);
        }
    }

    #[test]
    fn constant_media_are_exact() {
        for (v, want) in [(1.0, 1.0), (4.0, 2.0)] {
            let m = const_model(&[21, 17], 0.5, v);
            let (sol, _) = fm_solve(&m, &[3.2, 4.1]).unwrap();
            let err = sol.tau1().iter().map(|t| (t - want).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "err {err}");
        }
        let m = const_model(&[9, 8, 7], 1.0, 1.0);
        let (sol, _) = fm_solve(&m, &[2.0, 3.0, 1.0]).unwrap();
        let tt = sol.travel_time();
        let g = m.grid();
        let src = sol.source();
        for i in 0..g.len() {
            let p = g.position(i);
            let d = ((p[0] - src[0]).powi(2) + (p[1] - src[1]).powi(2) + (p[2] - src[2]).powi(2)).sqrt();
            assert!((tt[i] - d).abs() < 1e-8);
        }
        assert_eq!(tt[sol.source_node()], 0.0);
    }

    #[test]
    fn record_is_72_bits_per_node() {
        let m = const_model(&[5, 5], 1.0, 1.0);
        let (_, r) = fm_solve(&m, &[2.0, 2.0]).unwrap();
        assert_eq!(r.bits_per_node(), 72);
        assert_eq!(r.storage_bytes() * 8, 72 * 25);
    }

    #[test]
    fn zero_perturbation() {
        let m = const_model(&[7, 7], 1.0, 2.0);
        let (_, r) = fm_solve(&m, &[1.0, 1.0]).unwrap();
        assert!(eik_jacobian_vec(&r, &[0.0; 49]).unwrap().iter().all(|&v| v == 0.0));
        assert!(eik_jacobian_vec(&r, &[0.0; 48]).is_err());
    }

    #[test]
    fn local_solver_single_line() {
        // (2t - 1)^2 = 9 -> t = 2
        let l = [Line { axis: 0, dir: Upwind::Backward, a: 2.0, b: 1.0, tau_nbr: 0.0 }];
        let (t, d) = solve_local(&l, 9.0).unwrap();
        assert!((t - 2.0).abs() < 1e-15);
        assert_eq!(d[0], Upwind::Backward);
        assert!(solve_local(&[], 1.0).is_none());
    }

    #[test]
    fn local_solver_drops_inactive_axis() {
        // axis 1 line only becomes positive at t = 10, beyond the root
        let l = [
            Line { axis: 0, dir: Upwind::Backward, a: 1.0, b: 0.0, tau_nbr: 0.0 },
            Line { axis: 1, dir: Upwind::Forward, a: 1.0, b: 10.0, tau_nbr: 0.0 },
        ];
        let (t, d) = solve_local(&l, 4.0).unwrap();
        assert!((t - 2.0).abs() < 1e-15);
        assert_eq!(d[1], Upwind::None);
    }
}
