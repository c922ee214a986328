//! Property tests over randomized models and inputs.

use flowgeo_core::flow::FlowModel;
use flowgeo_core::geometry::PullbackGeometry;
use flowgeo_core::metrics;
use flowgeo_core::rae;
use flowgeo_core::tensor::Tensor;
use proptest::prelude::*;

fn flow_from_params(
    dim: usize,
    layers: usize,
    alphas: &[f64],
    logmags: &[f64],
) -> FlowModel {
    let mut m = FlowModel::identity(dim, layers, 2);
    let d2 = dim / 2;
    let mut ai = 0;
    let mut li = 0;
    for layer in m.layers_mut() {
        for a in layer.coupling.alpha.data_mut() {
            *a = alphas[ai % alphas.len()];
            ai += 1;
        }
        for lm in layer.linear.diag_logmag.data_mut() {
            *lm = logmags[li % logmags.len()];
            li += 1;
        }
    }
    let _ = d2;
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_inverse_round_trip(
        alphas in prop::collection::vec(-0.8f64..0.8, 4),
        logmags in prop::collection::vec(-0.5f64..0.5, 4),
        x in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let m = flow_from_params(4, 2, &alphas, &logmags);
        let y = m.forward_point(&x).unwrap();
        let back = m.inverse_point(&y).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn log_density_shift_by_logdet(
        logmags in prop::collection::vec(-0.5f64..0.5, 4),
        x in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        // Pure linear flows: density at phi^{-1}(0) is the normal peak times
        // the determinant factor.
        let m = flow_from_params(4, 2, &[0.0], &logmags);
        let x0 = m.inverse_point(&[0.0; 4]).unwrap();
        let peak = m.log_density(&x0).unwrap();
        let expect = -0.5 * 4.0 * (2.0 * std::f64::consts::PI).ln() + m.log_abs_det();
        prop_assert!((peak - expect).abs() < 1e-10);
        // And density elsewhere never exceeds the peak.
        prop_assert!(m.log_density(&x).unwrap() <= peak + 1e-12);
    }

    #[test]
    fn pullback_distance_is_a_metric(
        alphas in prop::collection::vec(-0.6f64..0.6, 4),
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 4),
        c in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let g = PullbackGeometry::new(flow_from_params(4, 2, &alphas, &[0.1, -0.2]));
        let dab = g.distance(&a, &b).unwrap();
        let dba = g.distance(&b, &a).unwrap();
        let dac = g.distance(&a, &c).unwrap();
        let dcb = g.distance(&c, &b).unwrap();
        prop_assert!((dab - dba).abs() <= 1e-9);
        prop_assert!(dab <= dac + dcb + 1e-9);
        prop_assert!(g.distance(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn select_dim_monotone(
        mut spectrum in prop::collection::vec(0.01f64..5.0, 3..10),
        eps_lo in 0.0f64..1.0,
        eps_hi in 0.0f64..1.0,
    ) {
        spectrum.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let trace: f64 = spectrum.iter().sum();
        let eps0 = spectrum[spectrum.len() - 1] / trace;
        let lo = eps0 + (1.0 - eps0) * eps_lo.min(eps_hi).max(1e-9);
        let hi = eps0 + (1.0 - eps0) * eps_lo.max(eps_hi).max(1e-9);
        let d_lo = rae::select_dim(&spectrum, lo).unwrap();
        let d_hi = rae::select_dim(&spectrum, hi).unwrap();
        prop_assert!(d_lo >= d_hi, "smaller eps must keep at least as many dims");
    }

    #[test]
    fn w1_translation_equivariance_1d(
        samples in prop::collection::vec(-5.0f64..5.0, 2..40),
        shift in -3.0f64..3.0,
    ) {
        let shifted: Vec<f64> = samples.iter().map(|v| v + shift).collect();
        let w = metrics::w1_exact_1d(&samples, &shifted);
        prop_assert!((w - shift.abs()) <= 1e-9, "w1 {} vs |shift| {}", w, shift.abs());
    }

    #[test]
    fn sliced_w1_never_exceeds_assignment(
        n in 4usize..24,
        seed in 0u64..500,
    ) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::from_shape(n, 2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let q = Tensor::from_shape(n, 2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.5)).collect()).unwrap();
        let s = metrics::w1_sliced(&p, &q, 32, seed).unwrap();
        let e = metrics::w1_assignment(&p, &q).unwrap();
        prop_assert!(s.value <= e.value + 1e-10);
    }
}
