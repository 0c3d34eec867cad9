use eaglenet::config::RunConfig;
use eaglenet::dataset::{synth_generate, EmbeddingDataset, Split, SynthSpec};
use eaglenet::error::Error;
use eaglenet::train::{ablate, train, EpochLog, Variant, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT};

fn data(n: usize, seed: u64, split: Split) -> EmbeddingDataset {
    let spec = SynthSpec { n_pairs: n, dim: 6, frames: 3, noise: 0.8, drift: 0.5, seed };
    synth_generate(&spec, split).unwrap()
}

fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.frl.num_candidates = 2;
    cfg.frl.heads = 2;
    cfg.eam.k = 2;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 2;
    cfg.train.lr = 1e-3;
    cfg
}

#[test]
fn a_run_writes_checkpoints_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&config(), &data(10, 1, Split::Train), Some(&data(5, 2, Split::Val)), Some(dir.path())).unwrap();
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, HISTORY_FILE] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let history: Vec<EpochLog> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(history.len(), 2);
    assert!(history.iter().all(|h| h.val.is_some() && h.loss.total.is_finite()));
    // Three batches per epoch of ten pairs.
    assert_eq!(out.steps, 6);
    assert!(out.best_rsum.is_some());
}

#[test]
fn max_steps_overrides_epochs() {
    let mut cfg = config();
    cfg.train.max_steps = 5;
    let out = train(&cfg, &data(10, 1, Split::Train), None, None).unwrap();
    assert_eq!(out.steps, 5);
    assert_eq!(out.sampler_calls, 5);
}

#[test]
fn runs_are_reproducible() {
    let mut cfg = config();
    cfg.train.max_steps = 4;
    let ds = data(10, 1, Split::Train);
    let a = train(&cfg, &ds, None, None).unwrap();
    let b = train(&cfg, &ds, None, None).unwrap();
    assert_eq!(a.model.store.hash(), b.model.store.hash());
    assert_eq!(a.last_checkpoint().to_bytes().unwrap(), b.last_checkpoint().to_bytes().unwrap());
}

#[test]
fn sampler_is_skipped_without_eam() {
    let mut cfg = config();
    cfg.train.max_steps = 3;
    cfg.eam.enabled = false;
    let out = train(&cfg, &data(10, 1, Split::Train), None, None).unwrap();
    assert_eq!(out.sampler_calls, 0);
    assert!(out.buffer.is_none());
}

#[test]
fn ablation_trains_every_variant_for_every_seed() {
    let mut cfg = config();
    cfg.train.max_steps = 2;
    let variants = vec!["no-frl".to_string(), "no-eam".to_string()];
    let rows = ablate(&cfg, &variants, &[0, 1], &data(8, 1, Split::Train), &data(4, 2, Split::Test)).unwrap();
    assert_eq!(rows.len(), 6);
    let calls = |v: &str| rows.iter().filter(|r| r.variant == v).map(|r| r.sampler_calls).collect::<Vec<_>>();
    assert_eq!(calls("full"), vec![2, 2]);
    assert_eq!(calls("no-eam"), vec![0, 0]);
}

#[test]
fn unknown_variants_are_rejected() {
    assert!(matches!(Variant::parse("no-such-thing"), Err(Error::UnknownVariant(_))));
    assert!(matches!(Variant::parse("energy=quadratic"), Err(Error::UnknownVariant(_))));
    assert!(Variant::parse("pooling=max").is_ok());
}

#[test]
fn shape_mismatch_between_splits_is_rejected() {
    let spec = SynthSpec { n_pairs: 3, dim: 5, frames: 3, noise: 0.1, drift: 0.1, seed: 3 };
    let val = synth_generate(&spec, Split::Val).unwrap();
    let err = train(&config(), &data(6, 1, Split::Train), Some(&val), None).err().unwrap();
    assert!(err.is_data_error());
}
