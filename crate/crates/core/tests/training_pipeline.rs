use std::collections::BTreeMap;

use audiocap::corpus::{all_references, make_toy_dataset, normalize_and_tokenize, AudioClip, Caption, Vocabulary};
use audiocap::discriminators::{
    naturalness_loss, threshold_accuracy, DiscriminatorConfig, NaturalnessDiscriminator, SemanticDiscriminator,
};
use audiocap::features::FeatureMatrix;
use audiocap::generator::{Generator, GeneratorConfig, NoiseMode};
use audiocap::nn::ParamStore;
use audiocap::training::{
    phase_rng, pretrain_discriminators, pretrain_generator, train_adversarial, ComponentMask, Phase, TrainConfig,
};
use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use proptest::prelude::*;
use rand::Rng;

struct Setup {
    clips: Vec<AudioClip>,
    vocab: Vocabulary,
    cfg: TrainConfig,
}

fn setup(n: usize) -> Setup {
    let clips = make_toy_dataset(7, n).unwrap();
    let vocab = Vocabulary::build(&all_references(&clips)).unwrap();
    let cfg = TrainConfig {
        mle_epochs: 2,
        disc_pretrain_epochs: 1,
        adv_epochs: 1,
        seed: 3,
        ..TrainConfig::toy()
    };
    Setup { clips, vocab, cfg }
}

fn networks(s: &Setup) -> (Generator, NaturalnessDiscriminator, SemanticDiscriminator) {
    let g = Generator::new(GeneratorConfig::toy(), s.vocab.len(), 1).unwrap();
    let dn = NaturalnessDiscriminator::new(DiscriminatorConfig::toy(), s.vocab.len(), 2).unwrap();
    let gc = g.config();
    let ds = SemanticDiscriminator::new(DiscriminatorConfig::toy(), &gc.channels, gc.d_model, s.vocab.len(), 3).unwrap();
    (g, dn, ds)
}

fn params(store: &ParamStore) -> BTreeMap<String, Vec<f32>> {
    store
        .snapshot()
        .unwrap()
        .into_iter()
        .map(|(k, t)| (k, t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()))
        .collect()
}

#[test]
fn zero_epochs_leave_every_network_untouched() {
    let s = setup(4);
    let cfg = TrainConfig {
        mle_epochs: 0,
        disc_pretrain_epochs: 0,
        adv_epochs: 0,
        ..s.cfg.clone()
    };
    let (g, dn, ds) = networks(&s);
    let (g0, n0) = (params(g.store()), params(dn.store()));
    assert!(pretrain_generator(&g, &s.clips, &s.vocab, &cfg, |_| Ok(())).unwrap().is_empty());
    assert!(pretrain_discriminators(&g, &dn, &ds, &s.clips, &s.vocab, &cfg, |_| Ok(())).unwrap().is_empty());
    let out = train_adversarial(&g, &dn, &ds, &s.clips, &[], &s.vocab, &cfg, |_| Ok(())).unwrap();
    assert!(out.logs.is_empty() && out.best_epoch.is_none());
    assert_eq!(params(g.store()), g0);
    assert_eq!(params(dn.store()), n0);
}

#[test]
fn mle_is_reproducible_for_a_seed() {
    let s = setup(6);
    let run = || {
        let (g, _, _) = networks(&s);
        let logs = pretrain_generator(&g, &s.clips, &s.vocab, &s.cfg, |_| Ok(())).unwrap();
        (logs, params(g.store()))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a[1].losses["ce"] < a[0].losses["ce"]);
}

#[test]
fn discriminator_pretraining_leaves_generator_and_frozen_branch_alone() {
    let s = setup(6);
    let (g, dn, ds) = networks(&s);
    let before = params(g.store());
    let n_before = params(dn.store());
    ds.load_audio_encoder(g.store()).unwrap();
    let frozen = ds.audio_checksum().unwrap();
    let logs = pretrain_discriminators(&g, &dn, &ds, &s.clips, &s.vocab, &s.cfg, |_| Ok(())).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(params(g.store()), before);
    assert_ne!(params(dn.store()), n_before);
    assert_eq!(ds.audio_checksum().unwrap(), frozen);
}

#[test]
fn adversarial_loop_alternates_one_to_one() {
    let s = setup(6);
    let (g, dn, ds) = networks(&s);
    ds.load_audio_encoder(g.store()).unwrap();
    let out = train_adversarial(&g, &dn, &ds, &s.clips, &s.clips[..2], &s.vocab, &s.cfg, |_| Ok(())).unwrap();
    let c = out.counters;
    assert!(c.iterations > 0);
    assert_eq!(c.generator_steps, c.iterations);
    assert_eq!(c.naturalness_steps, c.iterations);
    assert_eq!(c.semantic_steps, c.iterations);
    assert_eq!(out.best_epoch, Some(1));
    assert!(out.logs[0].val.contains_key("cider"));

    let nd = TrainConfig {
        components: ComponentMask::ND_ONLY,
        ..s.cfg.clone()
    };
    let out = train_adversarial(&g, &dn, &ds, &s.clips, &[], &s.vocab, &nd, |_| Ok(())).unwrap();
    assert_eq!(out.counters.semantic_steps, 0);
    assert_eq!(out.counters.naturalness_steps, out.counters.iterations);
}

#[test]
fn reward_components_respect_the_mask() {
    let s = setup(6);
    let (g, dn, ds) = networks(&s);
    ds.load_audio_encoder(g.store()).unwrap();
    for (mask, lambda) in [(ComponentMask::LE_ONLY, 0.3), (ComponentMask::SD_ONLY, 0.3), (ComponentMask::ALL, 0.5)] {
        let cfg = TrainConfig {
            components: mask,
            lambda,
            ..s.cfg.clone()
        };
        let out = train_adversarial(&g, &dn, &ds, &s.clips, &[], &s.vocab, &cfg, |_| Ok(())).unwrap();
        let r = out.logs[0].mean_reward.unwrap();
        let lam = audiocap::training::effective_lambda(lambda, mask);
        assert!((r.combined - (lam * (r.d_n + r.d_s) + (1.0 - lam) * r.l_e)).abs() < 1e-9);
        assert_eq!(r.d_n == 0.0, !mask.naturalness);
        assert_eq!(r.d_s == 0.0, !mask.semantic);
    }
}

#[test]
fn single_clip_is_memorized() {
    let mut clip = make_toy_dataset(11, 2).unwrap().remove(0);
    let target = clip.references[0].clone();
    clip.references = vec![target.clone(); 5];
    let vocab = Vocabulary::build(&clip.references).unwrap();
    let cfg = TrainConfig {
        mle_epochs: 60,
        sigma: 0.0,
        seed: 5,
        ..TrainConfig::toy()
    };
    let g = Generator::new(GeneratorConfig::toy(), vocab.len(), 9).unwrap();
    let clips = vec![clip];
    pretrain_generator(&g, &clips, &vocab, &cfg, |_| Ok(())).unwrap();
    let memory = g.encode(&[&clips[0].features], false).unwrap();
    let z = g.zero_noise();
    let out = g.greedy(&memory, &[&z], &vocab).unwrap();
    assert_eq!(out[0].text(), target);
}

#[test]
fn naturalness_separates_two_template_families_quickly() {
    // real: "<noun> is heard <place>", fake: "<place> <place> <noun> <noun>"
    let nouns = ["dog", "bird", "car", "bell", "engine", "rain", "wind", "door"];
    let places = ["nearby", "outside", "far", "indoors"];
    let mut rng = phase_rng(1, Phase::Init);
    let mut make = |real: bool| -> String {
        let n = nouns[rng.random_range(0..nouns.len())];
        let p = places[rng.random_range(0..places.len())];
        if real {
            format!("a {n} is heard {p}")
        } else {
            format!("{p} {p} {n} {n} a")
        }
    };
    let real: Vec<String> = (0..64).map(|_| make(true)).collect();
    let fake: Vec<String> = (0..64).map(|_| make(false)).collect();
    let vocab = Vocabulary::build(&[real.clone(), fake.clone()].concat()).unwrap();
    let tok = |v: &[String]| -> Vec<Caption> { v.iter().map(|s| normalize_and_tokenize(s, &vocab).unwrap()).collect() };
    let (rt, ft) = (tok(&real), tok(&fake));
    let dn = NaturalnessDiscriminator::new(DiscriminatorConfig::toy(), vocab.len(), 4).unwrap();
    let mut opt = AdamW::new(dn.trainable(), ParamsAdamW { lr: 3e-3, weight_decay: 0.0, ..Default::default() }).unwrap();
    for _epoch in 0..3 {
        for (r, f) in rt.chunks(8).zip(ft.chunks(8)) {
            let r: Vec<&Caption> = r.iter().collect();
            let f: Vec<&Caption> = f.iter().collect();
            let loss = naturalness_loss(&dn.forward(&r).unwrap(), &dn.forward(&f).unwrap()).unwrap();
            opt.backward_step(&loss).unwrap();
        }
    }
    let held_r: Vec<String> = (0..32).map(|_| make(true)).collect();
    let held_f: Vec<String> = (0..32).map(|_| make(false)).collect();
    let (hr, hf) = (tok(&held_r), tok(&held_f));
    let rs = dn.scores(&hr.iter().collect::<Vec<_>>()).unwrap();
    let fs = dn.scores(&hf.iter().collect::<Vec<_>>()).unwrap();
    assert!(threshold_accuracy(&rs, &fs) >= 0.9);
}

#[test]
fn noise_traces_are_seed_deterministic_in_both_modes() {
    let s = setup(4);
    let (g, _, _) = networks(&s);
    let memory = g.encode(&[&s.clips[0].features], false).unwrap();
    for mode in [NoiseMode::PerStep, NoiseMode::Fixed] {
        let mut r1 = phase_rng(1, Phase::Generate);
        let mut r2 = phase_rng(1, Phase::Generate);
        let a = g.noise_trace(1.0, mode, &mut r1);
        let b = g.noise_trace(1.0, mode, &mut r2);
        assert_eq!(a, b);
        let ca = g.greedy(&memory, &[&a], &s.vocab).unwrap();
        let cb = g.greedy(&memory, &[&b], &s.vocab).unwrap();
        assert_eq!(ca, cb);
    }
}

fn random_caption(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = phase_rng(seed, Phase::Init);
    (0..len).map(|_| rng.random_range(4..vocab_size as u32)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn discriminator_scores_stay_in_unit_interval(len in 1usize..14, seed in 0u64..1000, clip in 0usize..4) {
        let s = setup(4);
        let (g, dn, ds) = networks(&s);
        ds.load_audio_encoder(g.store()).unwrap();
        let c = Caption::from_generated(&random_caption(len, s.vocab.len(), seed), &s.vocab);
        let n = dn.scores(&[&c]).unwrap()[0];
        let f: Vec<&FeatureMatrix> = vec![&s.clips[clip].features];
        let a = ds.encode_audio(&f).unwrap();
        let sc = ds.scores(&a, &[&c]).unwrap()[0];
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert!((0.0..=1.0).contains(&sc));
    }
}
