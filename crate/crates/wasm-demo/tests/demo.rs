use bgmd_wasm_demo::{attacked_run, median_vs_mean, residual_by_k};

#[test]
fn outlier_moves_the_mean_but_not_the_median() {
    let mut xy = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5];
    let before = median_vs_mean(&xy).unwrap();
    xy.extend([1000.0, 1000.0]);
    let after = median_vs_mean(&xy).unwrap();
    assert!((after[2] - before[2]).abs() > 100.0);
    assert!((after[0] - before[0]).abs() < 0.2 && (after[1] - before[1]).abs() < 0.2);
    assert!(median_vs_mean(&[1.0]).is_err());
    assert!(median_vs_mean(&[]).is_err());
}

#[test]
fn residual_curve_sits_under_the_uniform_bound() {
    let curve = residual_by_k(6, 40, 1.0, 200, 1).unwrap();
    assert_eq!(curve.len(), 120);
    for t in curve.chunks(3) {
        assert!(t[1] <= t[2] + 0.02, "k={} measured {} bound {}", t[0], t[1], t[2]);
    }
    let last = &curve[117..];
    assert_eq!((last[0], last[1], last[2]), (40.0, 0.0, 0.0));
    assert!(residual_by_k(1, 1000, 1.0, 1, 0).is_err());
}

#[test]
fn training_curves_show_the_expected_split() {
    let gm = attacked_run("gm", "bit_flip", 0.4, 0.1, 200, 0).unwrap();
    let mean = attacked_run("mean", "bit_flip", 0.4, 0.1, 200, 0).unwrap();
    assert_eq!(gm.len(), 201);
    assert!(gm[200] < 0.01 * gm[0]);
    assert!(mean.len() < 201 || mean.last().unwrap() > &mean[0]);
    let clean = attacked_run("bgmd", "none", 0.0, 0.5, 200, 0).unwrap();
    assert!(clean[200] < 0.01 * clean[0]);
    assert!(attacked_run("krum", "none", 0.0, 0.1, 10, 0).is_err());
    assert!(attacked_run("gm", "none", 0.0, 0.1, 0, 0).is_err());
}
