use fedsel::config::{ConfigError, ExperimentConfig, MethodName};
use fedsel_core::federation::Method;
use proptest::prelude::*;

const SWEEPABLE: [(&str, f64); 5] = [
    ("selection.bias_scale", 1.5),
    ("training.local_step_size", 0.05),
    ("training.local_steps", 3.0),
    ("calibration.moment_noise_sigma", 0.2),
    ("propensity.clip_floor", 0.02),
];

fn valid_config() -> impl Strategy<Value = ExperimentConfig> {
    (1usize..=3, 1usize..=6, 1usize..=3).prop_flat_map(|(dz, m, dx)| {
        (
            (0u64..1 << 40, 1usize..=20, "[a-z]{1,8}", proptest::sample::subsequence(Method::ALL.to_vec(), 1..=5)),
            (
                2usize..=500,
                1usize..=300,
                prop::collection::vec(-2.0f64..2.0, m),
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dz), m),
                1e-4f64..1.0,
            ),
            (
                -2.0f64..2.0,
                prop::collection::vec(-2.0f64..2.0, dz),
                0.0f64..3.0,
                prop::collection::vec(-2.0f64..2.0, dz),
                prop::collection::vec(-2.0f64..2.0, dx),
                0.0f64..1.0,
            ),
            (1usize..=10, 1e-3f64..0.5, 1.0f64..2.0, 1usize..=400),
            (1e-8f64..1e-2, 0.001f64..0.49, 1usize..=100, any::<bool>(), prop::option::of(10.0f64..1e4)),
            (0.0f64..2.0, any::<bool>(), prop::collection::vec(0.0f64..3.0, 1..=4), proptest::sample::select(SWEEPABLE.to_vec())),
        )
            .prop_map(move |(top, pop, sel, train, prop_, rest)| {
                let mut c = ExperimentConfig {
                    seed: top.0,
                    replications: top.1,
                    output_dir: top.2,
                    methods: top.3.into_iter().map(MethodName).collect(),
                    ..ExperimentConfig::default()
                };
                c.population.covariate_dim = dz;
                c.population.feature_dim = m;
                c.population.num_clients = pop.0;
                c.population.samples_per_client = pop.1;
                c.population.base_param = pop.2;
                c.population.heterogeneity = pop.3;
                c.population.ridge = pop.4;
                c.selection.enroll_intercept = sel.0;
                c.selection.enroll_coef = sel.1;
                c.selection.bias_scale = sel.2;
                c.selection.part_coef_z = sel.3;
                c.selection.preround_dim = dx;
                c.selection.part_coef_x = sel.4;
                c.selection.preround_mix = sel.5;
                c.training.local_steps = train.0;
                c.training.local_step_size = train.1;
                c.training.server_step_size = train.2;
                c.training.rounds = train.3;
                c.training.batch_size = c.population.samples_per_client.min(16);
                c.propensity.ridge = prop_.0;
                c.propensity.clip_floor = prop_.1;
                c.propensity.window = prop_.2;
                c.propensity.participation_source = if prop_.3 {
                    fedsel::config::SourceName::True
                } else {
                    fedsel::config::SourceName::Estimated
                };
                c.propensity.population_size = prop_.4;
                c.calibration.moment_noise_sigma = rest.0;
                c.calibration.self_normalize = rest.1;
                if rest.1 {
                    c.calibration.bin_coordinate = Some(dz - 1);
                    c.calibration.bin_edges = vec![-0.5, 0.5];
                }
                c.panels.bias_scales = rest.2.clone();
                c.panels.bias_panel_part_coef_z = vec![0.0; dz];
                c.panels.noise_sigmas = rest.2;
                c.sweep.param = rest.3 .0.to_owned();
                c.sweep.values = vec![rest.3 .1];
                c
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn serialize_then_load_is_identity(config in valid_config()) {
        config.validate().unwrap();
        let text = config.to_toml_string();
        let loaded = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&loaded, &config);
        prop_assert_eq!(loaded.to_toml_string(), text);
    }
}

#[test]
fn partial_file_normalizes_to_full_defaults() {
    let text = "seed = 3\n\n[training]\nrounds = 12\n";
    let loaded = ExperimentConfig::from_toml_str(text).unwrap();
    let mut expected = ExperimentConfig {
        seed: 3,
        ..ExperimentConfig::default()
    };
    expected.training.rounds = 12;
    assert_eq!(loaded, expected);
    let normalized = loaded.to_toml_string();
    assert_eq!(ExperimentConfig::from_toml_str(&normalized).unwrap(), expected);
}

#[test]
fn unknown_top_level_key_is_rejected_by_name() {
    let err = ExperimentConfig::from_toml_str("seed = 1\nfoo = 2\n").unwrap_err();
    assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err:?}");
    assert!(err.to_string().contains("foo"));
}

#[test]
fn unknown_section_is_rejected() {
    let err = ExperimentConfig::from_toml_str("[bogus]\nx = 1\n").unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
}

#[test]
fn shipped_default_config_matches_defaults() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let shipped = ExperimentConfig::load(&path).unwrap();
    assert_eq!(shipped, ExperimentConfig::default());
    assert_eq!(std::fs::read_to_string(path).unwrap(), shipped.to_toml_string());
}
