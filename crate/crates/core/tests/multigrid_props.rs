use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seistomo_core::block::Block;
use seistomo_core::helmholtz::{assemble_attenuation, HelmholtzProblem};
use seistomo_core::krylov::block_bicgstab;
use seistomo_core::mesh::{RegularGrid, SlownessSquaredModel};
use seistomo_core::multigrid::{
    build_hierarchy, level_dims, prolongation, CycleKind, CycleSpec, MgHierarchy, MgPreconditioner,
};
use seistomo_core::scalar::Complex64;
use seistomo_core::sparse::{Csr, CsrBuilder};

fn poisson(dims: &[usize]) -> Csr<f64> {
    let n: usize = dims.iter().product();
    let mut b = CsrBuilder::new(n, 7 * n);
    let strides: Vec<usize> = (0..dims.len()).map(|a| dims[..a].iter().product()).collect();
    for i in 0..n {
        let mut row = vec![(i, -2.0 * dims.len() as f64)];
        for a in 0..dims.len() {
            let c = i / strides[a] % dims[a];
            if c > 0 {
                row.push((i - strides[a], 1.0));
            }
            if c + 1 < dims[a] {
                row.push((i + strides[a], 1.0));
            }
        }
        row.sort_by_key(|e| e.0);
        for (j, v) in row {
            b.push(j, v);
        }
        b.finish_row();
    }
    b.build()
}

fn helmholtz(dims: &[usize], omega: f64, seed: u64) -> HelmholtzProblem {
    let h = vec![1.0 / (dims[0] - 1) as f64; dims.len()];
    let g = RegularGrid::with_spacing(dims, &h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = (0..g.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let model = SlownessSquaredModel::new(g.clone(), m).unwrap();
    let width = dims.iter().min().unwrap() / 4;
    let att = assemble_attenuation(&g, 0.05, width).unwrap();
    HelmholtzProblem::with_gamma(&model, omega, att.gamma(omega), false).unwrap()
}

fn rand_block(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Block<Complex64> {
    let data = (0..n * k).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    Block::from_vec(n, k, data)
}

fn max_abs(a: &Csr<Complex64>) -> f64 {
    (0..a.nrows()).flat_map(|i| a.row(i).1.iter().map(|v| v.norm()).collect::<Vec<_>>()).fold(0.0, f64::max)
}

/// Largest entrywise difference over the union of both sparsity patterns.
fn csr_diff(a: &Csr<Complex64>, b: &Csr<Complex64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for &j in a.row(i).0.iter().chain(b.row(i).0) {
            worst = worst.max((a.get(i, j as usize) - b.get(i, j as usize)).norm());
        }
    }
    worst
}

fn rel_diff(a: &Block<Complex64>, b: &Block<Complex64>) -> f64 {
    let d: f64 = a.sub(b).col_norms().iter().map(|x| x * x).sum::<f64>().sqrt();
    let n: f64 = b.col_norms().iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n
}

#[test]
fn level_grids_halve() {
    let d = level_dims(&[129, 65], 3).unwrap();
    assert_eq!(d, vec![vec![129, 65], vec![65, 33], vec![33, 17]]);
    let err = level_dims(&[33, 16], 2).unwrap_err().to_string();
    assert!(err.contains("axis 1"), "{err}");
}

#[test]
fn galerkin_matches_explicit_triple_product() {
    for dims in [vec![9, 9], vec![17, 33], vec![33, 17, 9], vec![33, 33, 33]] {
        let nlevels = if dims.iter().all(|&n| n >= 17) { 3 } else { 2 };
        let p = helmholtz(&dims, 3.0, 1);
        let h = build_hierarchy(&p, nlevels, 0.2).unwrap();
        for l in 0..nlevels - 1 {
            let lev = h.level(l);
            let pr = prolongation(&lev.dims).unwrap();
            let pc = pr.map(|v| Complex64::new(v, 0.0));
            let want = pc.transpose().matmul(&lev.a).matmul(&pc);
            let got = &h.level(l + 1).a;
            let scale = max_abs(&want);
            assert!(csr_diff(got, &want) <= 1e-13 * scale, "{dims:?} level {l}");
            let pt = lev.pt.as_ref().unwrap();
            let tt = lev.p.as_ref().unwrap().transpose();
            for i in 0..pt.nrows() {
                assert_eq!(pt.row(i), tt.row(i));
            }
        }
    }
}

#[test]
fn zero_shift_keeps_the_unshifted_operator() {
    let p = helmholtz(&[17, 17], 4.0, 2);
    let h = build_hierarchy(&p, 2, 0.0).unwrap();
    assert_eq!(csr_diff(&h.level(0).a, p.matrix()), 0.0);
    let shifted = build_hierarchy(&p, 2, 0.2).unwrap();
    assert!(csr_diff(&shifted.level(0).a, p.matrix()) > 0.0);
}

#[test]
fn poisson_v_cycle_reduces_error() {
    let dims = [65, 65];
    let a = poisson(&dims);
    let h = MgHierarchy::from_operator(a, &dims, 3).unwrap();
    let n = 65 * 65;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = Block::from_vec(n, 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let b = Block::zeros(n, 1);
    let e0 = x.col_norms()[0];
    let spec = CycleSpec::new(CycleKind::V);
    for _ in 0..10 {
        h.cycle(&spec, &b, &mut x).unwrap();
    }
    let factor = (x.col_norms()[0] / e0).powf(0.1);
    assert!(factor < 0.2, "reduction factor {factor}");
}

#[test]
fn coarse_solve_residual_on_random_block() {
    let p = helmholtz(&[33, 33], 5.0, 4);
    let h = build_hierarchy(&p, 3, 0.2).unwrap();
    let ac = &h.level(2).a;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = rand_block(&mut rng, ac.nrows(), 8);
    let x = h.coarse_solve(&b);
    let r = ac.residual(&b, &x).col_norms();
    let bn = b.col_norms();
    for j in 0..8 {
        assert!(r[j] / bn[j] < 1e-12);
        let single = h.coarse_solve(&Block::from_column(&b.column(j)));
        assert_eq!(single.as_slice(), &x.column(j)[..]);
    }
}

#[test]
fn w_cycle_bicgstab_improves_with_block_size() {
    let dims = [65, 65];
    let g = RegularGrid::with_spacing(&dims, &[1.0 / 64.0; 2]).unwrap();
    let model = SlownessSquaredModel::constant(g.clone(), 1.0).unwrap();
    let omega = 2.0 * PI * 64.0 / 10.0;
    let att = assemble_attenuation(&g, 0.02 * PI, 8).unwrap();
    let p = HelmholtzProblem::with_gamma(&model, omega, att.gamma(omega), false).unwrap();
    let h = build_hierarchy(&p, 3, 0.2).unwrap();
    let prec = MgPreconditioner { hierarchy: &h, spec: CycleSpec::new(CycleKind::W) };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = rand_block(&mut rng, g.len(), 16);
    let mut counts = vec![];
    for k in [1, 2, 4, 8, 16] {
        let mut total = 0;
        for c in 0..16 / k {
            let idx: Vec<usize> = (c * k..(c + 1) * k).collect();
            let (_, rep) = block_bicgstab(p.matrix(), &prec, &q.select_columns(&idx), 1e-6, 200).unwrap();
            assert!(rep.all_converged(), "block {k} chunk {c}");
            total += rep.iterations;
        }
        counts.push(total as f64 / (16 / k) as f64);
    }
    for w in counts.windows(2) {
        assert!(w[1] <= w[0] + 2.0, "cycle counts {counts:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn transfers_are_dual(dims in prop_oneof![Just(vec![9, 17]), Just(vec![17, 9, 5]), Just(vec![33])], seed in any::<u64>()) {
        let p = prolongation(&dims).unwrap();
        let pt = p.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xc: Vec<f64> = (0..p.ncols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..p.nrows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = p.mul_vec(&xc).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = xc.iter().zip(pt.mul_vec(&y)).map(|(a, b)| a * b).sum();
        let scale = p.mul_vec(&xc).iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
    }

    #[test]
    fn cycles_are_linear_and_columnwise(kind in prop_oneof![Just(CycleKind::V), Just(CycleKind::W), Just(CycleKind::K)],
                                        seed in any::<u64>(), re in -3.0f64..3.0, im in -3.0f64..3.0) {
        let p = helmholtz(&[33, 17], 6.0, seed);
        let h = build_hierarchy(&p, 3, 0.2).unwrap();
        let spec = CycleSpec::new(kind);
        let n = p.grid().len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let b = rand_block(&mut rng, n, 4);
        let x0 = rand_block(&mut rng, n, 4);

        let mut x = x0.clone();
        h.cycle(&spec, &b, &mut x).unwrap();

        let alpha = Complex64::new(re, im);
        prop_assume!(alpha.norm() > 1e-3);
        let mut ab = b.clone();
        ab.scale_by(alpha);
        let mut ax = x0.clone();
        ax.scale_by(alpha);
        h.cycle(&spec, &ab, &mut ax).unwrap();
        let mut want = x.clone();
        want.scale_by(alpha);
        prop_assert!(rel_diff(&ax, &want) <= 1e-12, "linearity {}", rel_diff(&ax, &want));

        // the K-cycle's inner block FGMRES builds one Krylov space from all columns
        for j in 0..4 {
            if kind == CycleKind::K {
                break;
            }
            let mut xs = Block::from_column(&x0.column(j));
            h.cycle(&spec, &Block::from_column(&b.column(j)), &mut xs).unwrap();
            let col = Block::from_column(&x.column(j));
            prop_assert!(rel_diff(&xs, &col) <= 1e-12, "column {j}: {}", rel_diff(&xs, &col));
        }
    }
}
