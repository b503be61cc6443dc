use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seistomo_core::cli::RunConfig;
use seistomo_core::helmholtz::{SolverMethod, SolverOptions};
use seistomo_core::inversion::gauss_newton::DiagonalQuadratic;
use seistomo_core::inversion::regularizer::mirrored_laplacian;
use seistomo_core::inversion::schedule::{frequency_continuation, run_solve, SolveSpec};
use seistomo_core::inversion::{
    eik_misfit_and_gradient, fwi_misfit_and_gradient, joint_objective, projected_gauss_newton, synthesize, ContinuationSchedule,
    GnOptions, InversionState, JointObjective, JointTerms, Objective, ObservedData, Regularizer, RegularizerConfig,
    RegularizerKind, Survey, SurveySpec,
};
use seistomo_core::krylov::projected_pcg;
use seistomo_core::mesh::{AcquisitionGeometry, ModelBounds, RegularGrid};
use seistomo_core::scalar::dot;

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn grid17() -> RegularGrid {
    RegularGrid::with_spacing(&[17, 17], &[0.05, 0.05]).unwrap()
}

fn survey_with(sources: Vec<[f64; 3]>, frequencies: Vec<f64>) -> Survey {
    let g = grid17();
    let receivers = (0..17).map(|i| [i as f64 * 0.05, 0.05, 0.0]).collect();
    let geo = AcquisitionGeometry::new(&g, sources, receivers, 0.0, 10.0).unwrap();
    let spec = SurveySpec {
        frequencies,
        peak_frequency: 2.5,
        base_gamma: 0.01 * 4.0 * std::f64::consts::PI,
        layer_width: 4,
        solver: SolverOptions::with_method(SolverMethod::DenseLuSmall),
    };
    Survey::new(g, geo, spec).unwrap()
}

fn survey() -> Survey {
    survey_with(vec![[0.2, 0.05, 0.0], [0.6, 0.05, 0.0]], vec![2.0])
}

/// Slowness squared of a velocity with a smooth bump.
fn model(g: &RegularGrid, bump: f64) -> Vec<f64> {
    (0..g.len())
        .map(|i| {
            let p = g.position(i);
            let v = 2.0 + 0.4 * p[1] + bump * (-((p[0] - 0.4).powi(2) + (p[1] - 0.45).powi(2)) / 0.02).exp();
            1.0 / (v * v)
        })
        .collect()
}

fn observed(s: &Survey) -> ObservedData {
    let clean = synthesize(s, &model(s.core(), 0.4), 0.0, 0, true).unwrap();
    ObservedData::new(clean.fwi, clean.travel_times, 0.01)
}

fn directions(n: usize, m: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..n).map(|i| 0.05 * m[i] * rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Largest relative gap between the central difference of `f` and `g·v`.
fn fd_gap(f: &mut dyn FnMut(&[f64]) -> f64, m: &[f64], g: &[f64], dirs: &[Vec<f64>], eps: f64) -> f64 {
    dirs.iter()
        .map(|v| {
            let mp: Vec<f64> = m.iter().zip(v).map(|(a, b)| a + eps * b).collect();
            let mm: Vec<f64> = m.iter().zip(v).map(|(a, b)| a - eps * b).collect();
            let fd = (f(&mp) - f(&mm)) / (2.0 * eps);
            let gv = dot(g, v);
            (fd - gv).abs() / gv.abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn waveform_gradient_matches_central_differences() {
    let s = survey();
    let d = observed(&s);
    let m = model(s.core(), 0.0);
    let (_, g, _) = fwi_misfit_and_gradient(&s, &d, &m, &[0]).unwrap();
    let dirs = directions(m.len(), &m, 5, 1);
    let gap = fd_gap(&mut |x| fwi_misfit_and_gradient(&s, &d, x, &[0]).unwrap().0, &m, &g, &dirs, 1e-3);
    assert!(gap < 1e-3, "{gap}");
}

#[test]
fn travel_time_gradient_matches_central_differences() {
    let s = survey();
    let d = observed(&s);
    let m = model(s.core(), 0.0);
    let (_, g, _) = eik_misfit_and_gradient(&s, &d, &m).unwrap();
    let dirs = directions(m.len(), &m, 5, 2);
    let gap = fd_gap(&mut |x| eik_misfit_and_gradient(&s, &d, x).unwrap().0, &m, &g, &dirs, 1e-4);
    assert!(gap < 1e-3, "{gap}");
}

#[test]
fn joint_gradient_matches_central_differences() {
    let s = survey();
    let d = observed(&s);
    let m = model(s.core(), 0.0);
    let m_ref = model(s.core(), 0.1);
    for kind in [RegularizerKind::R1Biharmonic, RegularizerKind::R2Gradient] {
        let terms = || JointTerms {
            freqs: vec![0],
            beta: Some(50.0),
            regularizer: Some(Regularizer::new(s.core(), RegularizerConfig { kind, alpha: 1e-2, m_ref: m_ref.clone() }).unwrap()),
        };
        let (_, _, g) = joint_objective(&s, &d, &m, terms()).unwrap();
        let dirs = directions(m.len(), &m, 5, 3);
        let gap = fd_gap(&mut |x| joint_objective(&s, &d, x, terms()).unwrap().0, &m, &g, &dirs, 1e-4);
        assert!(gap < 1e-3, "{kind:?}: {gap}");
    }
}

#[test]
fn regularizer_gradients_match_central_differences() {
    let grids = [grid17(), RegularGrid::with_spacing(&[7, 6, 5], &[0.1, 0.2, 0.1]).unwrap()];
    for g in grids {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.1..0.4)).collect();
        let m_ref: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.1..0.4)).collect();
        for kind in [RegularizerKind::R1Biharmonic, RegularizerKind::R2Gradient] {
            let r = Regularizer::new(&g, RegularizerConfig { kind, alpha: 1.0, m_ref: m_ref.clone() }).unwrap();
            let dirs = directions(g.len(), &m, 5, 5);
            let gap = fd_gap(&mut |x| r.value(x), &m, &r.gradient(&m), &dirs, 1e-3);
            assert!(gap < 1e-3, "{kind:?} on {:?}: {gap}", g.dims());
            let v = &dirs[0];
            let w = &dirs[1];
            let (hv, hw) = (r.hessian_vec(v), r.hessian_vec(w));
            assert!((dot(&hv, w) - dot(v, &hw)).abs() <= 1e-12 * norm(&hv) * norm(w));
            assert!(dot(&hv, v) >= 0.0);
        }
    }
}

#[test]
fn doubling_the_weights_doubles_misfits_exactly() {
    let s = survey();
    let d = observed(&s);
    let mut d2 = d.clone();
    d2.scale_weights(2.0);
    let m = model(s.core(), 0.0);
    let (f1, g1, _) = fwi_misfit_and_gradient(&s, &d, &m, &[0]).unwrap();
    let (f2, g2, _) = fwi_misfit_and_gradient(&s, &d2, &m, &[0]).unwrap();
    assert_eq!(f2, 2.0 * f1);
    assert!(g1.iter().zip(&g2).all(|(a, b)| *b == 2.0 * a));
    let (e1, h1, _) = eik_misfit_and_gradient(&s, &d, &m).unwrap();
    let (e2, h2, _) = eik_misfit_and_gradient(&s, &d2, &m).unwrap();
    assert_eq!(e2, 2.0 * e1);
    assert!(h1.iter().zip(&h2).all(|(a, b)| *b == 2.0 * a));
}

#[test]
fn source_order_does_not_change_travel_time_misfit() {
    let src = vec![[0.2, 0.05, 0.0], [0.6, 0.05, 0.0], [0.75, 0.1, 0.0]];
    let s = survey_with(src.clone(), vec![2.0]);
    let d = observed(&s);
    let order = [2, 0, 1];
    let sp = survey_with(order.iter().map(|&i| src[i]).collect(), vec![2.0]);
    let tt = d.travel_times.as_ref().unwrap();
    let dp = ObservedData::new(
        d.fwi.iter().map(|per| order.iter().map(|&i| per[i].clone()).collect()).collect(),
        Some(order.iter().map(|&i| tt[i].clone()).collect()),
        0.01,
    );
    let m = model(s.core(), 0.0);
    let (e, g, _) = eik_misfit_and_gradient(&s, &d, &m).unwrap();
    let (ep, gp, _) = eik_misfit_and_gradient(&sp, &dp, &m).unwrap();
    assert!((e - ep).abs() <= 1e-12 * e);
    let diff: Vec<f64> = g.iter().zip(&gp).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) <= 1e-12 * norm(&g));
}

#[test]
fn true_model_fits_noiseless_data() {
    let s = survey();
    let d = observed(&s);
    let m_true = model(s.core(), 0.4);
    let weighted: f64 = d.fwi[0]
        .iter()
        .zip(&d.fwi_weights[0])
        .map(|(tr, w)| w * tr.iter().filter(|v| !v.re.is_nan()).map(|v| v.norm_sqr()).sum::<f64>())
        .sum();
    let (f, _, _) = fwi_misfit_and_gradient(&s, &d, &m_true, &[0]).unwrap();
    assert!(f < 1e-8 * weighted, "{f} vs {weighted}");
    let tt_weighted: f64 = d
        .travel_times
        .as_ref()
        .unwrap()
        .iter()
        .zip(&d.eik_weights)
        .map(|(tr, w)| w * tr.iter().filter(|v| !v.is_nan()).map(|v| v * v).sum::<f64>())
        .sum();
    let (e, _, _) = eik_misfit_and_gradient(&s, &d, &m_true).unwrap();
    assert!(e < 1e-10 * tt_weighted, "{e}");
}

#[test]
fn joint_objective_is_affine_in_beta() {
    let s = survey();
    let d = observed(&s);
    let m = model(s.core(), 0.1);
    let m_ref = model(s.core(), 0.0);
    let reg = |alpha| Regularizer::new(s.core(), RegularizerConfig { kind: RegularizerKind::R2Gradient, alpha, m_ref: m_ref.clone() }).unwrap();
    let (fwi, _, _) = fwi_misfit_and_gradient(&s, &d, &m, &[0]).unwrap();
    let (eik, _, _) = eik_misfit_and_gradient(&s, &d, &m).unwrap();
    let r = reg(3.0);
    let (j0, _, _) = joint_objective(&s, &d, &m, JointTerms { freqs: vec![0], beta: Some(0.0), regularizer: Some(r.clone()) }).unwrap();
    assert!((j0 - (fwi + 3.0 * r.value(&m))).abs() <= 1e-12 * j0);
    for beta in [0.5, 50.0, 2500.0] {
        let (j, parts, _) = joint_objective(&s, &d, &m, JointTerms { freqs: vec![0], beta: Some(beta), regularizer: Some(reg(0.0)) }).unwrap();
        assert!(((j - fwi) - beta * eik).abs() <= 1e-12 * j, "beta {beta}");
        assert_eq!(parts.eik, eik);
        let (jr, _, _) = joint_objective(&s, &d, &m, JointTerms { freqs: vec![0], beta: Some(beta), regularizer: Some(r.clone()) }).unwrap();
        assert!(((jr - j0) - beta * eik).abs() <= 1e-12 * jr);
    }
}

#[test]
fn gauss_newton_hessian_is_symmetric_and_semidefinite() {
    let s = survey();
    let d = observed(&s);
    let m = model(s.core(), 0.1);
    let n = m.len();
    let reg = |alpha| {
        Regularizer::new(s.core(), RegularizerConfig { kind: RegularizerKind::R1Biharmonic, alpha, m_ref: model(s.core(), 0.0) })
            .unwrap()
    };
    let mut obj = JointObjective::new(&s, &d, JointTerms { freqs: vec![0], beta: Some(50.0), regularizer: Some(reg(1e-3)) }).unwrap();
    obj.evaluate(&m).unwrap();
    assert!(obj.hessian_vec(&vec![0.0; n]).unwrap().iter().all(|&x| x == 0.0));
    let dirs = directions(n, &m, 6, 6);
    for p in dirs.chunks(2) {
        let (v, w) = (&p[0], &p[1]);
        let (hv, hw) = (obj.hessian_vec(v).unwrap(), obj.hessian_vec(w).unwrap());
        let gap = (dot(&hv, w) - dot(v, &hw)).abs() / (norm(&hv) * norm(w));
        assert!(gap < 1e-6, "{gap}");
        assert!(dot(&hv, v) >= 0.0);
    }

    let alpha = 1e12;
    let big = reg(alpha);
    let mut obj = JointObjective::new(&s, &d, JointTerms { freqs: vec![0], beta: Some(50.0), regularizer: Some(big.clone()) }).unwrap();
    obj.evaluate(&m).unwrap();
    let v = &dirs[0];
    let hv: Vec<f64> = obj.hessian_vec(v).unwrap().iter().map(|x| x / alpha).collect();
    let rv = big.hessian_vec(v);
    let diff: Vec<f64> = hv.iter().zip(&rv).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) < 1e-3 * norm(&rv));
}

#[test]
fn single_window_continuation_is_one_solve() {
    let s = survey();
    let d = observed(&s);
    let m0 = model(s.core(), 0.0);
    let bounds = ModelBounds::from_velocity(1.5, 4.5).unwrap();
    let schedule = ContinuationSchedule { batch_size: 1, gn_per_batch: 3, ..Default::default() };
    let mut a = InversionState::new(m0.clone(), bounds).unwrap();
    frequency_continuation(&mut a, &s, &d, &m0, &schedule, 2, 1, RegularizerKind::R2Gradient, 10.0, None, &mut |_, _| Ok(()))
        .unwrap();
    let mut b = InversionState::new(m0.clone(), bounds).unwrap();
    let spec = SolveSpec {
        stage: 2,
        sweep: 1,
        freqs: vec![0],
        beta: None,
        reg: RegularizerKind::R2Gradient,
        alpha: 10.0,
        gn: GnOptions { max_iter: 3, pcg_iters: 5, ..Default::default() },
    };
    run_solve(&mut b, &s, &d, &m0, &spec, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a.m, b.m);
    assert_eq!(a.history, b.history);
}

#[test]
fn windows_warm_start_from_the_previous_result() {
    let s = survey_with(vec![[0.2, 0.05, 0.0], [0.6, 0.05, 0.0]], vec![1.5, 2.0]);
    let d = observed(&s);
    let m0 = model(s.core(), 0.0);
    let bounds = ModelBounds::from_velocity(1.5, 4.5).unwrap();
    let schedule = ContinuationSchedule { batch_size: 1, gn_per_batch: 2, ..Default::default() };
    let mut seen: Vec<Vec<f64>> = vec![];
    let mut a = InversionState::new(m0.clone(), bounds).unwrap();
    frequency_continuation(&mut a, &s, &d, &m0, &schedule, 2, 1, RegularizerKind::R2Gradient, 10.0, None, &mut |_, m| {
        seen.push(m.to_vec());
        Ok(())
    })
    .unwrap();

    let mut b = InversionState::new(m0.clone(), bounds).unwrap();
    let mut ends = vec![];
    for j in 0..2 {
        let spec = SolveSpec {
            stage: 2,
            sweep: 1,
            freqs: vec![j],
            beta: None,
            reg: RegularizerKind::R2Gradient,
            alpha: 10.0,
            gn: GnOptions { max_iter: 2, pcg_iters: 5, ..Default::default() },
        };
        let start = b.m.clone();
        run_solve(&mut b, &s, &d, &m0, &spec, &mut |_, _| Ok(())).unwrap();
        if j == 1 {
            assert_eq!(start, ends[0]);
        }
        ends.push(b.m.clone());
    }
    assert_eq!(a.m, b.m);
    assert_eq!(seen.last().unwrap(), &a.m);
    assert_eq!(a.stage_misfits.len(), 2);
    let (first, last) = (&a.stage_misfits[0], &a.stage_misfits[1]);
    assert!(last.phi_fwi <= first.phi_fwi * 10.0);
}

#[test]
fn regularizer_preconditioning_gives_smoother_steps() {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy2d.json")).unwrap();
    let s = cfg.validate().unwrap();
    let d = synthesize(&s, &cfg.truth_model().unwrap(), cfg.noise, cfg.seed, true).unwrap();
    let m0 = cfg.start_model().unwrap();
    let sched = &cfg.schedule;
    let reg = Regularizer::new(
        s.core(),
        RegularizerConfig { kind: RegularizerKind::R1Biharmonic, alpha: sched.alpha0, m_ref: m0.clone() },
    )
    .unwrap();
    let mut obj = JointObjective::new(&s, &d, JointTerms { freqs: vec![0], beta: Some(sched.beta_stage1), regularizer: Some(reg) }).unwrap();
    let ev = obj.evaluate(&m0).unwrap();
    let rhs: Vec<f64> = ev.gradient.iter().map(|g| -g).collect();
    let inactive = vec![true; rhs.len()];
    let op = |v: &[f64]| obj.hessian_vec(v).unwrap();
    let lap = mirrored_laplacian(s.core());
    let roughness = |x: &[f64]| norm(&lap.mul_vec(x)) / norm(x);
    for iters in [sched.pcg_iters, 10] {
        let (smooth, _) = projected_pcg(&op, &rhs, &|r: &[f64]| obj.precondition(r), &inactive, 1e-12, iters);
        let (plain, _) = projected_pcg(&op, &rhs, &|r: &[f64]| r.to_vec(), &inactive, 1e-12, iters);
        assert!(roughness(&smooth) <= roughness(&plain), "{iters} iterations: {} vs {}", roughness(&smooth), roughness(&plain));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn projected_gauss_newton_on_box_quadratics(n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = ModelBounds::new(1.0, 3.0).unwrap();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..5.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let mut m: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..3.0)).collect();
        let mut obj = DiagonalQuadratic { target: target.clone(), weights };
        let mut prev = obj.evaluate(&m).unwrap().value;
        let opts = GnOptions { max_iter: 30, pcg_iters: n, ..Default::default() };
        let mut ok = true;
        projected_gauss_newton(&mut obj, &mut m, &bounds, &opts, &mut |it, x| {
            ok &= x.iter().all(|v| (1.0..=3.0).contains(v));
            ok &= it.value <= prev;
            prev = it.value;
            Ok(())
        }).unwrap();
        prop_assert!(ok);
        for (x, t) in m.iter().zip(&target) {
            prop_assert!((x - t.clamp(1.0, 3.0)).abs() < 1e-8, "{} vs {}", x, t);
        }
    }
}
