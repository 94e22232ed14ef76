use serde_json::Value;
use vvsl_web::{counting_json, dimensions_json, gasket_json};

#[test]
fn sg2_gasket_has_expected_size() {
    let v: Value = serde_json::from_str(&gasket_json(1.0, 1, 3, 0).unwrap()).unwrap();
    // (3^{n+1} + 3)/2 vertices and 3^{n+1} edges
    assert_eq!(v["vertices"].as_array().unwrap().len(), 42);
    assert_eq!(v["edges"].as_array().unwrap().len(), 81);
    assert_eq!(v["necks"].as_array().unwrap().len(), 3);
}

#[test]
fn gasket_is_deterministic_and_seed_dependent() {
    let a = gasket_json(0.5, 2, 4, 3).unwrap();
    assert_eq!(a, gasket_json(0.5, 2, 4, 3).unwrap());
    assert_ne!(a, gasket_json(0.5, 2, 4, 4).unwrap());
}

#[test]
fn bad_inputs_are_errors() {
    assert!(gasket_json(1.5, 1, 2, 0).is_err());
    assert!(gasket_json(0.5, 0, 2, 0).is_err());
    assert!(gasket_json(0.0, 1, 9, 0).is_err());
    assert!(counting_json(1.0, 1, 3, 0, "robin", "unit").is_err());
    assert!(counting_json(1.0, 1, 3, 0, "neumann", "heavy").is_err());
}

#[test]
fn single_member_dimensions_are_exact() {
    let v: Value = serde_json::from_str(&dimensions_json(1.0, 1, 0).unwrap()).unwrap();
    let h = v["hausdorff"]["value"].as_f64().unwrap();
    assert!((h - 3f64.ln() / 2f64.ln()).abs() < 1e-9);
    let s = v["spectral_unit"]["value"].as_f64().unwrap();
    assert!((s - 2.0 * 3f64.ln() / 5f64.ln()).abs() < 1e-9);
    let flat = v["spectral_flat"]["value"].as_f64().unwrap();
    assert!((flat - v["flat_prediction"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn counting_curve_is_monotone_with_sensible_slope() {
    let v: Value = serde_json::from_str(&counting_json(1.0, 1, 6, 0, "dirichlet", "unit").unwrap()).unwrap();
    let pts = v["points"].as_array().unwrap();
    let counts: Vec<u64> = pts.iter().map(|p| p[1].as_u64().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]));
    let slope = v["slope"].as_f64().unwrap();
    assert!((slope - 3f64.ln() / 5f64.ln()).abs() < 0.05, "{slope}");
}
