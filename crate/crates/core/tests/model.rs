use eaglenet::params::Ctx;
use eaglenet::config::RunConfig;
use eaglenet::dataset::{synth_generate, PairBatch, Split, SynthSpec};
use eaglenet::model::Model;
use eaglenet::Rng;
use proptest::prelude::*;

fn batch(n: usize, d: usize, m: usize, seed: u64) -> PairBatch {
    let spec = SynthSpec { n_pairs: n, dim: d, frames: m, noise: 0.8, drift: 0.5, seed };
    synth_generate(&spec, Split::Train).unwrap().all()
}

fn config(s: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.frl.num_candidates = s;
    cfg.frl.heads = 2;
    cfg.model.init_seed = seed;
    cfg
}

/// `t_gen` rows for every (i, i) pair.
fn t_gen(model: &Model, b: &PairBatch, seed: u64) -> Vec<f64> {
    let mut ctx = Ctx::new(&model.store);
    let noise = model.draw_noise(&mut Rng::new(seed), b.len());
    let pairs: Vec<_> = (0..b.len()).map(|i| (i, i)).collect();
    let out = model.pair_forward(&mut ctx, &b.texts, &b.frames, &noise, &pairs, None, false).unwrap();
    ctx.value(out.t_gen).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn no_candidates_means_generated_text_is_the_text(seed in any::<u64>(), f2f in any::<bool>()) {
        let b = batch(3, 6, 3, seed);
        let mut cfg = config(0, seed);
        cfg.frl.drop_f2f = f2f;
        let model = Model::new(&cfg, 6, 3).unwrap();
        let (t, _) = model.adapters.apply(&model.store, &b.texts, &b.frames).unwrap();
        prop_assert_eq!(t_gen(&model, &b, seed), t.data().to_vec());
    }

    #[test]
    fn similarities_are_cosines(seed in any::<u64>(), s in 0usize..4) {
        let b = batch(4, 6, 2, seed);
        let model = Model::new(&config(s, seed), 6, 2).unwrap();
        let noise = model.draw_noise(&mut Rng::new(seed), b.len());
        let (main, sup) = model.similarity_matrix(&b, &noise, Some(&mut Rng::new(1)), 5).unwrap();
        prop_assert!(main.data().iter().all(|x| x.abs() <= 1.0 + 1e-12));
        prop_assert!(sup.unwrap().data().iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }
}

#[test]
fn without_frl_generated_text_is_the_text() {
    let b = batch(3, 6, 3, 2);
    let mut cfg = config(4, 2);
    cfg.frl.enabled = false;
    let model = Model::new(&cfg, 6, 3).unwrap();
    assert!(model.graph.is_none() && model.radius.is_none());
    let (t, _) = model.adapters.apply(&model.store, &b.texts, &b.frames).unwrap();
    assert_eq!(t_gen(&model, &b, 2), t.data().to_vec());
    let noise = model.draw_noise(&mut Rng::new(0), 3);
    let (_, sup) = model.similarity_matrix(&b, &noise, None, 4).unwrap();
    assert!(sup.is_none());
}

#[test]
fn candidates_change_the_generated_text() {
    let b = batch(3, 6, 3, 2);
    let model = Model::new(&config(4, 2), 6, 3).unwrap();
    let (t, _) = model.adapters.apply(&model.store, &b.texts, &b.frames).unwrap();
    assert_ne!(t_gen(&model, &b, 2), t.data().to_vec());
}

#[test]
fn energies_exist_only_with_eam() {
    let b = batch(3, 6, 2, 4);
    let model = Model::new(&config(2, 4), 6, 2).unwrap();
    let e = model.energy_matrix(&b.texts, &b.frames).unwrap().unwrap();
    assert_eq!(e.shape(), &[3, 3]);
    let mut cfg = config(2, 4);
    cfg.eam.enabled = false;
    let model = Model::new(&cfg, 6, 2).unwrap();
    assert!(model.energy_matrix(&b.texts, &b.frames).unwrap().is_none());
}

#[test]
fn initialization_is_seeded() {
    let a = Model::new(&config(3, 9), 6, 2).unwrap();
    let b = Model::new(&config(3, 9), 6, 2).unwrap();
    let c = Model::new(&config(3, 10), 6, 2).unwrap();
    assert_eq!(a.store.hash(), b.store.hash());
    assert_ne!(a.store.hash(), c.store.hash());
}

#[test]
fn wrong_widths_are_rejected() {
    let b = batch(2, 5, 2, 1);
    let model = Model::new(&config(1, 1), 6, 2).unwrap();
    assert!(model.energy_matrix(&b.texts, &b.frames).is_err());
    let noise = model.draw_noise(&mut Rng::new(0), 2);
    assert!(model.similarity_matrix(&b, &noise, None, 4).is_err());
}
