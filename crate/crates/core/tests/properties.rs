use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treevb::inference::{
    closed_form_scale, minimize, student_tau_newton, PlsObjective, WeightedPenalty,
};
use treevb::linear::{pcg_solve, ObservationOp, PrecisionOp};
use treevb::oracle;
use treevb::potentials::{convexified_neg2_log, refit_tangent, Penalty, Potential};
use treevb::tree::{bp_infer, consistency_error, kl_divergence, kl_to_prior};
use treevb::wavelet::{Image, WaveletLayout};

fn layout_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=3, 1usize..=3).prop_map(|(l, a, b)| (a << l, b << l, l))
}

fn potential_strategy() -> impl Strategy<Value = Potential> {
    prop_oneof![
        (0.05f64..20.0).prop_map(|t| Potential::laplace(t).unwrap()),
        (0.05f64..20.0).prop_map(|t| Potential::student_t(t, 2.1).unwrap()),
        (0.05f64..20.0).prop_map(|t| Potential::gaussian(t).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wavelet_is_orthonormal((h, w, l) in layout_strategy(), seed in any::<u64>()) {
        let layout = WaveletLayout::new(h, w, l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = layout.forward(&Image::new(h, w, px.clone()).unwrap()).unwrap();
        let back = layout.inverse(&s).unwrap();
        let n0: f64 = px.iter().map(|v| v * v).sum();
        let n1: f64 = s.iter().map(|v| v * v).sum();
        prop_assert!((n0 - n1).abs() <= 1e-10 * n0.max(1.0));
        for (a, b) in back.pixels.iter().zip(&px) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn weighted_diagonal_matches_columns((h, w, l) in layout_strategy(), seed in any::<u64>()) {
        prop_assume!(h * w <= 256);
        let layout = WaveletLayout::new(h, w, l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wts: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..5.0)).collect();
        let diag = layout.weighted_diagonal(&wts);
        let b = oracle::dense_transform(&layout);
        for i in 0..h * w {
            let d: f64 = (0..h * w).map(|j| wts[j] * b[(j, i)] * b[(j, i)]).sum();
            prop_assert!((d - diag[i]).abs() <= 1e-10 * d.max(1.0));
        }
    }

    #[test]
    fn penalties_are_even_and_dual_tight(pot in potential_strategy(), s in -10.0f64..10.0) {
        prop_assert_eq!(pot.neg2_log(s), pot.neg2_log(-s));
        let g = pot.gamma_min(s);
        if let Ok(h) = pot.h_dual(g) {
            let via_dual = s * s / g + h;
            prop_assert!((via_dual - pot.neg2_log(s)).abs() <= 1e-8 * via_dual.abs().max(1.0));
        }
    }

    #[test]
    fn convexified_student_majorizes(tau in 0.05f64..20.0, p in 0.0f64..5.0, s in -10.0f64..10.0) {
        let pot = Potential::student_t(tau, 2.1).unwrap();
        let e = refit_tangent(&pot, p).unwrap().e;
        let upper = convexified_neg2_log(&pot, e, s).unwrap();
        prop_assert!(upper >= pot.neg2_log(s) - 1e-9 * upper.abs().max(1.0));
        let touch = convexified_neg2_log(&pot, e, p).unwrap();
        prop_assert!((touch - pot.neg2_log(p)).abs() <= 1e-8 * touch.abs().max(1.0));
    }

    #[test]
    fn tree_marginals_are_consistent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = oracle::random_forest(&mut rng, 30, 5);
        let params = oracle::random_tree_params(&mut rng, topo.levels());
        let ev: Vec<[f64; 2]> = (0..topo.len())
            .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
            .collect();
        let m = bp_infer(&topo, &params, &ev).unwrap();
        prop_assert!(m.q1.iter().all(|q| (0.0..=1.0).contains(q)));
        prop_assert!(consistency_error(&topo, &m) <= 1e-10);
        let kl = kl_to_prior(&m, &ev);
        prop_assert!(kl >= -1e-10);
        prop_assert!((kl - kl_divergence(&topo, &m, &params)).abs() <= 1e-9);
    }

    #[test]
    fn closed_form_scales_minimize(seed in any::<u64>(), gaussian in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..3.0)).collect();
        let base = if gaussian { Potential::gaussian(1.0).unwrap() } else { Potential::laplace(1.0).unwrap() };
        let frag = |t: f64| -> f64 {
            let pot = base.with_scale(t);
            w.iter().zip(&p).map(|(w, p)| w * pot.neg2_log(*p)).sum()
        };
        let closed = closed_form_scale(&base, &w, &p).unwrap();
        let numeric = oracle::argmin_positive(frag, -12.0, 12.0);
        prop_assert!((closed - numeric).abs() <= 1e-6 * closed.max(1.0));
    }

    #[test]
    fn student_newton_is_stationary(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..60);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..4.0)).collect();
        let fit = student_tau_newton(&w, &p, 2.1, rng.random_range(0.1..50.0));
        prop_assert!(fit.residual.abs() <= 1e-10, "residual {}", fit.residual);
    }

    #[test]
    fn pls_never_increases((h, w, l) in layout_strategy(), seed in any::<u64>()) {
        let layout = WaveletLayout::new(h, w, l).unwrap();
        let n = layout.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let observed: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let y: Vec<f64> = observed.iter().map(|&o| if o { rng.random() } else { 0.0 }).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..0.1)).collect();
        let field: Vec<WeightedPenalty> = (0..n)
            .map(|_| WeightedPenalty::new(
                rng.random(),
                Penalty::Plain(Potential::laplace(rng.random_range(0.5..5.0)).unwrap()),
                Penalty::Convexified { tau: rng.random_range(0.5..5.0), nu: 2.1, e: rng.random_range(0.5..5.0) },
            ))
            .collect();
        let obj = PlsObjective { layout: &layout, observed: &observed, inv_sigma2: 10.0, y_full: &y, z: &z, field: &field };
        let mut u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let before = obj.value(&u);
        let rep = minimize(&obj, &mut u, 50).unwrap();
        prop_assert!(rep.value <= before + 1e-12 * before.abs());
        prop_assert!((rep.value - obj.value(&u)).abs() <= 1e-9 * rep.value.abs().max(1.0));
    }

    #[test]
    fn pcg_solves_precision_systems((h, w, l) in layout_strategy(), seed in any::<u64>()) {
        let layout = WaveletLayout::new(h, w, l).unwrap();
        let n = layout.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let observed: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        let obs = ObservationOp::mask(n, observed, 0.1).unwrap();
        let op = PrecisionOp::new(&obs, &layout, &pi).unwrap();
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = pcg_solve(&op, &rhs, 1e-12, 1000).unwrap().x;
        let ax = op.apply(&x).unwrap();
        let err: f64 = ax.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-9 * norm.max(1e-300));
    }
}
