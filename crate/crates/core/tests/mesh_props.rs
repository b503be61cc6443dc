use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seistomo_core::mesh::{
    pad_model, restrict_field, slowness_squared_to_velocity, velocity_to_slowness_squared, Padding, RegularGrid,
    SamplingOperator, SlownessSquaredModel,
};

fn random_model(grid: &RegularGrid, seed: u64) -> SlownessSquaredModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..grid.len()).map(|_| rng.random_range(0.1..1.0)).collect();
    SlownessSquaredModel::new(grid.clone(), v).unwrap()
}

/// Loop-based replication: clamp every padded coordinate into the core.
fn replicate_oracle(core: &RegularGrid, pad: &Padding, values: &[f64]) -> Vec<f64> {
    let n = core.dims3();
    let nd = core.ndim();
    let m: Vec<usize> = (0..3).map(|k| if k < nd { n[k] + pad.lo[k] + pad.hi[k] } else { 1 }).collect();
    let mut out = Vec::new();
    for k in 0..m[2] {
        for j in 0..m[1] {
            for i in 0..m[0] {
                let c = [i, j, k];
                let mut s = [0usize; 3];
                for a in 0..3 {
                    let mut x = c[a] as i64 - pad.lo[a] as i64;
                    if x < 0 {
                        x = 0;
                    }
                    if x > n[a] as i64 - 1 {
                        x = n[a] as i64 - 1;
                    }
                    s[a] = x as usize;
                }
                out.push(values[s[0] + n[0] * (s[1] + n[1] * s[2])]);
            }
        }
    }
    out
}

#[test]
fn corner_padding_replicates_nearest_core_corner() {
    let g = RegularGrid::with_spacing(&[4, 3], &[1.0, 1.0]).unwrap();
    let core = random_model(&g, 7);
    let pad = Padding::from_signed(&[(1, 1), (1, 0)]).unwrap();
    let p = pad_model(&core, pad).unwrap();
    assert_eq!(p.padded().grid().dims(), &[6, 4]);
    assert_eq!(p.padded().values(), replicate_oracle(&g, &pad, core.values()).as_slice());
    let pg = p.padded().grid();
    assert_eq!(p.padded().values()[pg.index(0, 0, 0)], core.values()[g.index(0, 0, 0)]);
    assert_eq!(p.padded().values()[pg.index(5, 3, 0)], core.values()[g.index(3, 2, 0)]);
}

#[test]
fn velocity_examples() {
    assert_eq!(velocity_to_slowness_squared(&[1.0]).unwrap(), vec![1.0]);
    assert!((velocity_to_slowness_squared(&[2000.0]).unwrap()[0] - 2.5e-7).abs() < 1e-22);
    assert!(velocity_to_slowness_squared(&[0.0]).is_err());
    assert!(velocity_to_slowness_squared(&[-1.0]).is_err());
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![prop::collection::vec(3usize..7, 2), prop::collection::vec(3usize..5, 3)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_replicates_and_restricts(dims in dims_strategy(), widths in prop::collection::vec((0i64..4, 0i64..4), 3), seed in any::<u64>()) {
        let g = RegularGrid::with_spacing(&dims, &vec![0.5; dims.len()]).unwrap();
        let core = random_model(&g, seed);
        let pad = Padding::from_signed(&widths[..dims.len()]).unwrap();
        let p = pad_model(&core, pad).unwrap();
        let want = replicate_oracle(&g, &pad, core.values());
        prop_assert_eq!(p.padded().values(), want.as_slice());
        let back = restrict_field(&g, &pad, p.padded().grid(), p.padded().values());
        prop_assert_eq!(back.as_slice(), core.values());
    }

    #[test]
    fn velocity_roundtrip(v in prop::collection::vec(0.01f64..1e4, 1..50)) {
        let m = velocity_to_slowness_squared(&v).unwrap();
        let back = slowness_squared_to_velocity(&m);
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-14 * a);
        }
    }

    #[test]
    fn sampling_is_partition_of_unity_and_adjoint(dims in dims_strategy(), seed in any::<u64>()) {
        let g = RegularGrid::with_spacing(&dims, &vec![0.3; dims.len()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = g.extent();
        let rec: Vec<[f64; 3]> = (0..6)
            .map(|_| {
                let mut p = [0.0; 3];
                for k in 0..dims.len() {
                    p[k] = rng.random_range(0.0..=ext[k]);
                }
                p
            })
            .collect();
        let op = SamplingOperator::new(&g, &rec).unwrap();
        for r in 0..rec.len() {
            let w = op.weights(r);
            prop_assert!(w.len() <= 1 << dims.len());
            prop_assert!(w.iter().all(|&(_, x)| x >= 0.0));
            prop_assert!((w.iter().map(|&(_, x)| x).sum::<f64>() - 1.0).abs() < 1e-14);
        }
        let ones = op.sample(&vec![1.0; g.len()], None);
        prop_assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let u: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..rec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = op.sample(&u, None).iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(op.sample_adjoint(&d, None)).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1e-300));
    }
}

#[test]
fn sampling_adjoint_matches_dense_matrix() {
    let g = RegularGrid::with_spacing(&[5, 5], &[1.0, 1.0]).unwrap();
    let rec = vec![[0.3, 2.7, 0.0], [4.0, 4.0, 0.0], [1.5, 0.5, 0.0]];
    let op = SamplingOperator::new(&g, &rec).unwrap();
    let mut dense = vec![vec![0.0; rec.len()]; g.len()];
    for i in 0..g.len() {
        let mut e = vec![0.0; g.len()];
        e[i] = 1.0;
        for (r, v) in op.sample(&e, None).into_iter().enumerate() {
            dense[i][r] = v;
        }
    }
    let d = [0.7, -1.3, 2.1];
    let pd = op.sample_adjoint(&d, None);
    for i in 0..g.len() {
        let want: f64 = (0..3).map(|r| dense[i][r] * d[r]).sum();
        assert!((pd[i] - want).abs() < 1e-14);
    }
    let on_node = op.sample(&{
        let mut e = vec![0.0; g.len()];
        e[g.index(4, 4, 0)] = 1.0;
        e
    }, None);
    assert_eq!(on_node[1], 1.0);
}
