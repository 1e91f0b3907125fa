use barfiq::config::ExperimentConfig;
use barfiq::dataio::{generate_stream, GeneratorConfig};
use barfiq::fringe::{read_phases, read_shots, reconstruct_stream, write_phases, write_shots, FringeConfig};
use barfiq::network::Network;
use barfiq::params::ParamStore;

#[test]
fn shots_and_phases_round_trip_through_csv() {
    let cfg = GeneratorConfig { n_shots: 60, ..GeneratorConfig::default() };
    let (shots, _) = generate_stream::<f64>(&cfg).unwrap();
    let mut buf = Vec::new();
    write_shots(&mut buf, &shots).unwrap();
    let back = read_shots::<f64, _>(buf.as_slice()).unwrap();
    assert_eq!(back, shots);

    let phases = reconstruct_stream(&shots, &FringeConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_phases(&mut buf, &phases).unwrap();
    let again = read_phases::<f64, _>(buf.as_slice()).unwrap();
    assert_eq!(again, phases);
}

#[test]
fn checkpoints_restore_every_parameter() {
    let cfg = ExperimentConfig::default();
    let (_, ps) = Network::new::<f64>(&cfg.network(), 8, 3).unwrap();
    let bytes = ps.checkpoint_bytes();
    let (_, mut other) = Network::new::<f64>(&cfg.network(), 8, 4).unwrap();
    assert_ne!(other.checkpoint_bytes(), bytes);
    other.load_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(other.checkpoint_bytes(), bytes);
    assert_eq!(other.flatten(), ps.flatten());

    let mut empty = ParamStore::<f64>::new();
    empty.add("x", barfiq::numcore::Tensor::zeros(&[1, 2]));
    assert!(empty.load_checkpoint(bytes.as_slice()).is_err());
}

#[test]
fn config_survives_serialization_with_overrides() {
    let sets = vec!["train.window_len=16".to_string(), "fusion.variant=\"sa\"".to_string()];
    let cfg = ExperimentConfig::from_toml_str("[train]\nlr = 0.002\n", &sets).unwrap();
    assert_eq!(cfg.train.window_len, 16);
    assert_eq!(cfg.train.lr, 0.002);
    let text = cfg.to_toml_string();
    assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml_str("[train]\nbogus = 1\n", &[]).is_err());
    assert!(ExperimentConfig::from_toml_str("", &["nope.key=1".to_string()]).is_err());
}
