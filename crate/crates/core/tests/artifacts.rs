use elsm::encoder::EncoderConfig;
use elsm::io::{self, EmbeddingsFile, TrajectoryFile};
use elsm::objective::Variant;
use elsm::trainer::{train, Checkpoint, TrainConfig, Trainer};
use elsm::{generate_network, DynamicNetwork, HyperParams};

fn small_hp() -> HyperParams {
    HyperParams {
        n: 12,
        t: 4,
        k: 2,
        pi: vec![0.5, 0.5],
        ..HyperParams::synthetic_benchmark()
    }
}

fn small_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        epochs: 6,
        learning_rate: 0.01,
        seed: 3,
        encoder: EncoderConfig { hidden: 4, head_hidden: 4, reducer_dim: 2 },
        ..TrainConfig::default()
    };
    cfg.priors.k = 2;
    cfg
}

#[test]
fn generated_network_survives_the_text_format() {
    let out = generate_network(&small_hp(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.txt");
    io::save_network(&path, &out.network).unwrap();
    let back: DynamicNetwork = io::load_network(&path).unwrap();
    assert_eq!(back, out.network);
    assert_eq!(io::format_network(&back), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn ground_truth_latents_round_trip_through_json() {
    let out = generate_network(&small_hp(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("latents.json");
    io::write_json(&path, &TrajectoryFile::from(&out.trajectory)).unwrap();
    let file: TrajectoryFile = io::read_json(&path).unwrap();
    assert_eq!(file.to_trajectory().unwrap(), out.trajectory);
}

#[test]
fn full_model_embeddings_round_trip_through_json() {
    let net = generate_network(&small_hp(), 2).unwrap().network;
    let model = train(&net, &small_config(Variant::Elsm)).unwrap();
    let file = EmbeddingsFile::new(&model.state, &model.decoder, &model.priors);
    assert!(file.elsm.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("embeddings.json");
    io::write_json(&path, &file).unwrap();
    let back: EmbeddingsFile = io::read_json(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.state().unwrap(), model.state);
}

#[test]
fn checkpoint_bytes_round_trip_and_resume_matches() {
    let net = generate_network(&small_hp(), 4).unwrap().network;
    let cfg = small_config(Variant::Ielsm);

    let straight = train(&net, &cfg).unwrap();

    let mut first = Trainer::new(&net, TrainConfig { epochs: 3, ..cfg.clone() }).unwrap();
    first.run().unwrap();
    let ck = first.checkpoint();
    let bytes = io::encode_checkpoint(&ck).unwrap();
    let decoded: Checkpoint = io::decode_checkpoint(&bytes).unwrap();
    assert_eq!(decoded, ck);

    let mut resumed = Trainer::resume(&net, None, decoded, Some(cfg)).unwrap();
    assert_eq!(resumed.epoch(), 3);
    resumed.run().unwrap();
    let model = resumed.finish().unwrap();
    assert_eq!(model.log, straight.log);
    assert_eq!(model.state, straight.state);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let net = generate_network(&small_hp(), 4).unwrap().network;
    let mut t = Trainer::new(&net, TrainConfig { epochs: 1, ..small_config(Variant::Ielsm) }).unwrap();
    t.run().unwrap();
    let bytes = io::encode_checkpoint(&t.checkpoint()).unwrap();
    assert!(io::decode_checkpoint(&bytes[..bytes.len() / 2]).is_err());
}
