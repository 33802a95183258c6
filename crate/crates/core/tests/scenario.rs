//! Config parsing, validation and scenario assembly.

use pdgp::scenario::*;
use pdgp::solver::Interval;

fn config_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn default_scenario_shape() {
    let s = build_scenario(&ScenarioConfig::default()).unwrap();
    assert_eq!(s.topology.n_devices(), 3);
    assert_eq!(s.topology.n_users(), 6);
    assert_eq!(s.topology.device_users(), &[2, 3, 1]);
    assert_eq!(s.n_steps, 8640);
    assert_eq!(
        s.intervals(),
        vec![Interval::new(-8.0, 8.0).unwrap(), Interval::new(0.0, 10.0).unwrap(), Interval::new(2.0, 30.0).unwrap()]
    );
    assert_eq!(s.plant.horizon(), 8640);
    assert_eq!(s.constraint.horizon(), 8640);
    assert!(s.gp_models.iter().flatten().all(|m| m.data.len() == s.config.gp.prior_points));
    assert!(s.sets.lambda_radius > 0.0 && s.sets.nu_cap == 100.0);
}

#[test]
fn minimal_single_device_config() {
    let text = r#"
        seed = 3
        horizon_s = 60.0
        step_s = 5.0
        alpha = 0.1

        [[devices]]
        name = "heater"
        lo = 0.0
        hi = 4.0

        [[users]]
        device = 0
        quad_a = 1.0
        preferred = 2.0
        feedback_period_s = 30.0

        [load.synthetic]
        base_kw = 5.0
        harmonics = []
        noise_std_kw = 0.0

        [reference.piecewise]
        levels_kw = [7.0]
    "#;
    let cfg = ScenarioConfig::from_toml_str(text).unwrap();
    let s = build_scenario(&cfg).unwrap();
    assert_eq!(s.topology.device_users(), &[1]);
    assert_eq!(s.n_steps, 12);
    assert_eq!(s.constraint.y_ref(11).unwrap(), 7.0);
    assert_eq!(s.plant.model_output(0, &[1.0]).unwrap()[0], 6.0);
    // Defaults fill the omitted sections.
    assert_eq!(cfg.gp, ScenarioConfig::default().gp);
    assert_eq!(cfg.users[0].feedback_noise_std, 1.5);
}

#[test]
fn shipped_config_equals_builtin_default() {
    let cfg = ScenarioConfig::from_path(&config_dir().join("default.toml")).unwrap();
    let mut d = ScenarioConfig::default();
    d.base_dir = cfg.base_dir.clone();
    assert_eq!(cfg, d);
}

#[test]
fn toml_roundtrip() {
    let d = ScenarioConfig::default();
    assert_eq!(ScenarioConfig::from_toml_str(&d.to_toml_string()).unwrap(), d);
}

#[test]
fn building_twice_gives_the_same_scenario() {
    let cfg = ScenarioConfig::default();
    assert_eq!(build_scenario(&cfg).unwrap(), build_scenario(&cfg).unwrap());
    let mut other = cfg.clone();
    other.seed = 2;
    assert_ne!(build_scenario(&cfg).unwrap().gp_models, build_scenario(&other).unwrap().gp_models);
}

fn with_users(edit: impl FnOnce(&mut ScenarioConfig)) -> ConfigError {
    let mut cfg = ScenarioConfig::default();
    edit(&mut cfg);
    cfg.validate().unwrap_err()
}

#[test]
fn validation_names_the_offending_field() {
    assert_eq!(with_users(|c| c.users[3].quad_a = -1.0).path, "users[3].quad_a");
    assert_eq!(with_users(|c| c.users[0].device = 7).path, "users[0].device");
    assert_eq!(with_users(|c| c.users[2].quad_b = Some(1.0)).path, "users[2].quad_b");
    assert_eq!(with_users(|c| c.users[5].preferred = Some(40.0)).path, "users[5].preferred");
    assert_eq!(with_users(|c| c.devices[1].update_every = 0).path, "devices[1].update_every");
    assert_eq!(with_users(|c| c.devices[0].lo = 9.0).path, "devices[0].lo");
    assert_eq!(with_users(|c| c.gp.l_u = 0.1).path, "gp.l_u");
    assert_eq!(with_users(|c| c.constraint.zeta_fraction = 0.0).path, "constraint.zeta_fraction");
    assert_eq!(with_users(|c| c.oracle.cadence = 0).path, "oracle.cadence");
    assert_eq!(with_users(|c| c.users.retain(|u| u.device != 2)).path, "devices[2]");
    assert!(build_scenario(&{
        let mut c = ScenarioConfig::default();
        c.alpha = 0.0;
        c
    })
    .is_err());
}

#[test]
fn parse_errors_carry_a_location() {
    let e = ScenarioConfig::from_toml_str("seed = 1\nalpha = \"fast\"\n").unwrap_err();
    assert_eq!(e.path, "line 2");
    let e = ScenarioConfig::from_path(std::path::Path::new("/nonexistent/cfg.toml")).unwrap_err();
    assert!(e.path.contains("cfg.toml"));
}

#[test]
fn csv_traces_resolve_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("load.csv"), "timestamp_s,load_kw\n0,40\n30,41\n").unwrap();
    std::fs::write(dir.path().join("ref.csv"), "timestamp_s,y_ref_kw\n0,50\n").unwrap();
    let mut cfg = ScenarioConfig::default();
    cfg.horizon_s = 60.0;
    cfg.load = LoadConfig::Csv { path: "load.csv".into() };
    cfg.reference = ReferenceConfig::Csv { path: "ref.csv".into() };
    let path = dir.path().join("s.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    let s = build_scenario(&ScenarioConfig::from_path(&path).unwrap()).unwrap();
    assert_eq!(s.plant.model_output(5, &[0.0; 3]).unwrap()[0], 40.0);
    assert_eq!(s.plant.model_output(6, &[0.0; 3]).unwrap()[0], 41.0);
    assert_eq!(s.constraint.y_ref(11).unwrap(), 50.0);
}

#[test]
fn feedback_follows_each_user_phase() {
    let cfg = ScenarioConfig::default();
    let due: Vec<Vec<usize>> = cfg
        .users
        .iter()
        .enumerate()
        .map(|(k, u)| (0..cfg.n_steps()).filter(|&t| feedback_due(u, k, t as f64 * cfg.step_s, cfg.step_s)).collect())
        .collect();
    for (k, steps) in due.iter().enumerate() {
        assert_eq!(steps.len(), 24, "user {k}");
        assert_eq!(steps[0], 60 * k);
        assert!(steps.windows(2).all(|w| w[1] - w[0] == 360));
    }
    assert_ne!(due[0], due[1]);
}

#[test]
fn feedback_noise_is_a_pure_function_of_seed_user_and_step() {
    let cfg = ScenarioConfig::default();
    let u = &cfg.users[1];
    let at = |seed, t| feedback_event(u, 1, t, 5.0, 3.0, seed);
    assert_eq!(at(1, 60), at(1, 60));
    assert_ne!(at(1, 60), at(2, 60));
    assert_ne!(at(1, 60), at(1, 420));
    assert_eq!(at(1, 61), None);
    let (x, z) = at(1, 60).unwrap();
    assert_eq!(x, 3.0);
    assert!((z - true_cost(u, 3.0)).abs() < 10.0);
}

#[test]
fn linear_coefficient_and_vertex_forms_agree() {
    // 0.5 (x − 4)² + 1 = 0.5 x² − 4 x + 9.
    let vertex = UserSpec {
        device: 0,
        quad_a: 0.5,
        quad_b: None,
        quad_c: 1.0,
        preferred: Some(4.0),
        feedback_period_s: 60.0,
        feedback_phase_s: None,
        feedback_noise_std: 0.0,
    };
    let expanded = UserSpec { quad_b: Some(-4.0), quad_c: 9.0, preferred: None, ..vertex.clone() };
    for x in [-3.0, 0.0, 2.5, 7.0] {
        assert!((true_cost(&vertex, x) - true_cost(&expanded, x)).abs() < 1e-12);
        assert!((true_gradient(&vertex, x) - true_gradient(&expanded, x)).abs() < 1e-12);
    }
}
