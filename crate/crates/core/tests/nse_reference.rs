use cpflow_core::nse2d::{biot_savart, spectral_reference, taylor_green, taylor_green_exact, VorticityField};

#[test]
fn spectral_reference_reproduces_taylor_green_decay() {
    let g = 32;
    let got = spectral_reference(&taylor_green, 0.1, 0.5, &[0.0, 0.25], g, 1e-2).unwrap();
    for (k, &s) in [0.0, 0.25].iter().enumerate() {
        let exact = taylor_green_exact(0.1, 0.5, s, g).unwrap();
        let gap = got[k]
            .values()
            .iter()
            .zip(exact.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-8, "s = {s}: {gap}");
    }
}

#[test]
fn taylor_green_velocity_is_divergence_free_with_curl_w() {
    let g = 32;
    let w = VorticityField::from_fn(g, taylor_green).unwrap();
    let u = biot_savart(&w);
    assert!(u.divergence_residual() < 1e-10);
    // u = (cos x1 sin x2, −sin x1 cos x2).
    let [a, b] = u.spectral(0.3, 1.1);
    assert!((a - 0.3f64.cos() * 1.1f64.sin()).abs() < 1e-12);
    assert!((b + 0.3f64.sin() * 1.1f64.cos()).abs() < 1e-12);
}
