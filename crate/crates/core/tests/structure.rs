mod common;

use common::structural_metrics;

#[test]
fn operators_have_the_expected_structure() {
    let m = structural_metrics();
    assert_eq!(m.causality_leak, 0.0, "{m:?}");
    assert!(m.toeplitz_bit_identical, "{m:?}");
    assert!(m.v_symmetry <= 1e-12, "{m:?}");
    assert!(m.d_symmetry <= 1e-12, "{m:?}");
    assert!(m.k_transpose_two_path <= 1e-9, "{m:?}");
    assert!(m.d1_sparse_vs_direct <= 1e-12, "{m:?}");
    assert!(m.mass_row_sum <= 1e-13, "{m:?}");
}
