use std::fs;

use proptest::prelude::*;
use tiergate::config::{ConfigError, ScenarioConfig, BUILTIN_SCENARIOS};

fn table3() -> ScenarioConfig {
    ScenarioConfig::builtin("table3").unwrap()
}

fn issues_of(text: &str) -> Vec<String> {
    match ScenarioConfig::from_toml_str(text) {
        Err(ConfigError::Invalid(issues)) => issues.into_iter().map(|i| i.path).collect(),
        other => panic!("expected validation failure, got {other:?}"),
    }
}

#[test]
fn builtins_round_trip_through_text() {
    for name in BUILTIN_SCENARIOS {
        let cfg = ScenarioConfig::builtin(name).unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg, "{name}");
    }
}

#[test]
fn round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    fs::write(&path, table3().to_toml_string()).unwrap();
    assert_eq!(ScenarioConfig::load_and_validate(&path).unwrap(), table3());
}

#[test]
fn missing_file_is_an_io_error_with_path() {
    let err = ScenarioConfig::load_and_validate("/nonexistent/scenario.toml").unwrap_err();
    assert!(matches!(err, ConfigError::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/scenario.toml"));
}

#[test]
fn syntax_errors_are_parse_errors() {
    let err = ScenarioConfig::from_toml_str("name = [").unwrap_err();
    assert!(matches!(err, ConfigError::Parse(_)), "{err:?}");
}

#[test]
fn unknown_fields_are_rejected() {
    let text = format!("bogus = 1\n{}", table3().to_toml_string());
    assert!(matches!(
        ScenarioConfig::from_toml_str(&text),
        Err(ConfigError::Parse(_))
    ));
}

#[test]
fn negative_length_scale_names_the_field() {
    let mut cfg = table3();
    cfg.gate.kernel.accuracy.context_length_scale[2] = -0.5;
    let paths = issues_of(&cfg.to_toml_string());
    assert!(
        paths
            .iter()
            .any(|p| p.contains("kernel.accuracy") && p.contains("length_scale")),
        "{paths:?}"
    );
}

#[test]
fn unknown_safe_seed_names_the_field() {
    let mut cfg = table3();
    cfg.gate.safe_seed = vec!["no-such-arm".into()];
    let paths = issues_of(&cfg.to_toml_string());
    assert!(
        paths.iter().any(|p| p.starts_with("gate.safe_seed")),
        "{paths:?}"
    );
}

#[test]
fn every_problem_is_reported_at_once() {
    let mut cfg = table3();
    cfg.gate.safe_seed.clear();
    cfg.qos.min_accuracy = 1.5;
    cfg.steps = 0;
    cfg.arms[1].cost.model_params = -1.0;
    let paths = issues_of(&cfg.to_toml_string());
    assert!(paths.len() >= 4, "{paths:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edited_configs_round_trip(
        warmup in 1u64..1000,
        beta in 0.1f64..5.0,
        min_acc in 0.0f64..1.0,
        max_delay in 0.01f64..30.0,
        capacity in 1usize..5000,
        steps in 1u64..10_000,
    ) {
        let mut cfg = table3();
        cfg.gate.warmup_steps = warmup;
        cfg.gate.beta_safe = beta;
        cfg.qos.min_accuracy = min_acc;
        cfg.qos.max_delay_s = max_delay;
        cfg.knowledge.capacity = capacity;
        cfg.steps = steps;
        let text = cfg.to_toml_string();
        prop_assert_eq!(ScenarioConfig::parse(&text).unwrap(), cfg);
    }
}
