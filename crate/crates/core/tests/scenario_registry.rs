use cpflow_core::scenarios::{get_scenario, registered_names, Model, RESIDUAL_TOLERANCE};

#[test]
fn registry_resolves_every_name_and_rejects_others() {
    assert!(registered_names().len() >= 11);
    for name in registered_names() {
        assert_eq!(get_scenario(name).unwrap().name, *name);
    }
    let msg = get_scenario("does_not_exist").unwrap_err().to_string();
    assert!(msg.contains("oscillatory") && msg.contains("taylor_green"));
}

#[test]
fn closed_forms_satisfy_their_odes() {
    let mut checked = 0;
    for name in registered_names() {
        let s = get_scenario(name).unwrap();
        if let Some(r) = s.exact_residual(100, 11) {
            assert!(r < RESIDUAL_TOLERANCE, "{name}: residual {r}");
            checked += 1;
        }
    }
    assert!(checked >= 6);
}

#[test]
fn acceptance_constants_are_declared() {
    let osc = get_scenario("oscillatory").unwrap();
    assert_eq!(osc.constant("f_sq_integral"), Some(1e4));
    assert_eq!(get_scenario("double_well").unwrap().constant("m"), Some(3.0));
    assert_eq!(get_scenario("stable_drift").unwrap().constant("alpha"), Some(1.5));
    let tg = get_scenario("taylor_green").unwrap();
    match tg.model {
        Model::Nse(n) => {
            assert_eq!(n.nu, 0.1);
            assert_eq!(n.grid, 32);
        }
        _ => panic!("taylor_green is a vorticity scenario"),
    }
}

#[test]
fn vortex_flow_preserves_radius() {
    let s = get_scenario("vortex_sobolev").unwrap();
    let exact = s.exact.unwrap();
    let mut out = [0.0; 2];
    for &t in &[0.1, 0.5, 1.0] {
        exact(t, &[0.6, -0.8], &mut out);
        assert!((out[0].hypot(out[1]) - 1.0).abs() < 1e-14);
    }
}
