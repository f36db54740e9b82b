use heatbem::kernels::{temporal_weight, KernelParams, TemporalWeightKind};
use heatbem::oracle::{oracle_temporal_weight, OracleConfig};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = TemporalWeightKind> {
    prop_oneof![
        Just(TemporalWeightKind::SingleLayer),
        Just(TemporalWeightKind::DoubleLayer),
        Just(TemporalWeightKind::HypersingularD2),
    ]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn direction() -> impl Strategy<Value = [f64; 3]> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
        .prop_filter("non-degenerate", |v| v.iter().map(|c| c * c).sum::<f64>() > 1e-2)
        .prop_map(unit)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn closed_form_weights_match_quadrature(
        kind in kind(),
        rho in 0.02..3.0f64,
        alpha in 0.1..2.0f64,
        h_t in 0.01..0.5f64,
        d in 0usize..12,
        dir in direction(),
        n_y in direction(),
    ) {
        let params = KernelParams::new(alpha, h_t).unwrap();
        let r = [rho * dir[0], rho * dir[1], rho * dir[2]];
        let closed = temporal_weight(kind, &r, &n_y, d, &params).unwrap();
        let reference = oracle_temporal_weight(kind, &r, &n_y, d, &params, &OracleConfig::default()).unwrap();
        let allowed = 1e-9 + 1e-8 * reference.value.abs();
        prop_assert!((closed - reference.value).abs() <= allowed,
            "{kind:?} rho={rho} alpha={alpha} h={h_t} d={d}: {closed} vs {}", reference.value);
    }

    #[test]
    fn single_layer_weights_are_positive(
        rho in 0.02..3.0f64,
        alpha in 0.1..2.0f64,
        h_t in 0.01..0.5f64,
        d in 0usize..12,
    ) {
        let params = KernelParams::new(alpha, h_t).unwrap();
        let w = temporal_weight(TemporalWeightKind::SingleLayer, &[rho, 0.0, 0.0], &[0.0, 0.0, 1.0], d, &params).unwrap();
        prop_assert!(w >= 0.0);
    }

    #[test]
    fn double_layer_vanishes_for_tangential_offsets(
        rho in 0.02..3.0f64,
        h_t in 0.01..0.5f64,
        d in 0usize..12,
    ) {
        let params = KernelParams::new(0.5, h_t).unwrap();
        let w = temporal_weight(TemporalWeightKind::DoubleLayer, &[rho, 0.0, 0.0], &[0.0, 0.0, 1.0], d, &params).unwrap();
        prop_assert_eq!(w, 0.0);
    }

    #[test]
    fn double_layer_is_odd_in_the_normal(
        rho in 0.02..3.0f64,
        h_t in 0.01..0.5f64,
        d in 0usize..12,
        dir in direction(),
    ) {
        let params = KernelParams::new(0.5, h_t).unwrap();
        let r = [rho * dir[0], rho * dir[1], rho * dir[2]];
        let up = temporal_weight(TemporalWeightKind::DoubleLayer, &r, &[0.0, 0.0, 1.0], d, &params).unwrap();
        let down = temporal_weight(TemporalWeightKind::DoubleLayer, &r, &[0.0, 0.0, -1.0], d, &params).unwrap();
        prop_assert!((up + down).abs() <= 1e-14 * up.abs().max(1e-300));
    }
}

#[test]
fn weights_decay_with_distance() {
    let params = KernelParams::new(0.5, 0.125).unwrap();
    let w = |rho: f64| temporal_weight(TemporalWeightKind::SingleLayer, &[rho, 0.0, 0.0], &[0.0, 0.0, 1.0], 2, &params).unwrap();
    assert!(w(0.5) > w(1.0));
    assert!(w(1.0) > w(2.0));
}
