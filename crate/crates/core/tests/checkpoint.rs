use eaglenet::checkpoint::Checkpoint;
use eaglenet::config::RunConfig;
use eaglenet::dataset::{synth_generate, EmbeddingDataset, Split, SynthSpec};
use eaglenet::error::Error;
use eaglenet::train::{evaluate, evaluate_model, train};

fn data(n: usize, d: usize, seed: u64, split: Split) -> EmbeddingDataset {
    let spec = SynthSpec { n_pairs: n, dim: d, frames: 3, noise: 0.8, drift: 0.5, seed };
    synth_generate(&spec, split).unwrap()
}

fn short_run() -> (RunConfig, eaglenet::train::TrainOutcome) {
    let mut cfg = RunConfig::default();
    cfg.frl.num_candidates = 2;
    cfg.frl.heads = 2;
    cfg.eam.k = 2;
    cfg.train.batch_size = 4;
    cfg.train.max_steps = 3;
    cfg.train.lr = 1e-3;
    let out = train(&cfg, &data(8, 6, 1, Split::Train), None, None).unwrap();
    (cfg, out)
}

#[test]
fn bytes_survive_a_round_trip() {
    let (_, out) = short_run();
    let ck = out.last_checkpoint();
    assert!(ck.adam.is_some() && ck.buffer.as_ref().is_some_and(|b| !b.is_empty()));
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.store.hash(), out.model.store.hash());
    assert_eq!(back.step, 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn reloaded_model_scores_identically() {
    let (_, out) = short_run();
    let ck = Checkpoint::from_bytes(&out.last_checkpoint().to_bytes().unwrap()).unwrap();
    let test = data(6, 6, 2, Split::Test);
    assert_eq!(evaluate(&ck, &test, 5).unwrap(), evaluate_model(&out.model, &test, 5).unwrap());
}

#[test]
fn mismatched_datasets_and_damaged_bytes_are_rejected() {
    let (_, out) = short_run();
    let ck = out.last_checkpoint();
    assert!(matches!(evaluate(&ck, &data(4, 5, 2, Split::Test), 0), Err(Error::InvalidDataset(_))));
    let bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(b"junk").is_err());
}
