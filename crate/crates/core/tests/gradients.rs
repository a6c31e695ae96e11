use querymix::gradcheck::{
    check_op, registry, reports_json, run_checks, GradCase, GradReport, DEFAULT_ABS_FLOOR, DEFAULT_TOL_REL,
};
use querymix::tensor::RngState;

fn run_group(prefixes: &[&str]) -> Vec<GradReport> {
    let cases: Vec<GradCase> = registry(5)
        .unwrap()
        .into_iter()
        .filter(|c| {
            prefixes
                .iter()
                .any(|p| c.name == *p || c.name.starts_with(&format!("{p}:")))
        })
        .collect();
    assert!(!cases.is_empty(), "no cases for {prefixes:?}");
    let reports = run_checks(&cases, 5, false).unwrap();
    for r in &reports {
        assert!(r.pass, "{}", r.line());
    }
    reports
}

#[test]
fn tensor_ops() {
    let r = run_group(&["linear", "layernorm", "relu", "softmax_rows", "sinusoidal_embed"]);
    assert_eq!(r.len(), 5);
}

#[test]
fn geometry_ops() {
    let r = run_group(&["decode_box", "update_pos", "iof_bias", "giou"]);
    assert_eq!(r.len(), 5);
}

#[test]
fn feature_space_ops() {
    run_group(&["bilinear_sample", "gauss_z_weights", "sample_point_3d"]);
}

#[test]
fn sampler_ops() {
    run_group(&["gen_offsets", "offsets_to_locations", "sample_features"]);
}

#[test]
fn mixer_all_orders_and_frozen() {
    let r = run_group(&["adaptive_mixing"]);
    assert!(r.iter().any(|x| x.name.ends_with(":frozen")));
    assert!(r.len() >= 5);
}

#[test]
fn attention_ops() {
    run_group(&["pos_embed", "attention"]);
}

#[test]
fn loss_ops() {
    run_group(&["focal_loss", "stage_loss"]);
}

#[test]
fn decoder_end_to_end() {
    let r = run_group(&["decoder_end_to_end"]);
    assert!(r[0].coords > 1000);
}

#[test]
fn registry_names_unique_and_reported_once() {
    let reports = run_checks(&registry(1).unwrap(), 1, true).unwrap();
    let json: serde_json::Value = serde_json::from_str(&reports_json(&reports).unwrap()).unwrap();
    let names: Vec<&str> = json
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert_eq!(names.len(), registry(1).unwrap().len());
}

#[test]
fn parallel_and_serial_agree() {
    let a = run_checks(&registry(2).unwrap(), 2, false).unwrap();
    let b = run_checks(&registry(2).unwrap(), 2, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sign_flipped_backward_is_caught() {
    let case = GradCase::new(
        "cube",
        None,
        vec![0.4, -0.9, 1.3],
        |x| Ok(x.iter().map(|v| v * v * v).collect()),
        |x, g| Ok(x.iter().zip(g).map(|(v, gi)| -3.0 * v * v * gi).collect()),
    );
    let r = check_op(&case, &mut RngState::new(0), DEFAULT_TOL_REL, DEFAULT_ABS_FLOOR).unwrap();
    assert!(!r.pass);
}
