use domsim_core::encoders::{DomainEmbedding, EmbeddingKind};
use domsim_core::generator::{film_apply, FilmParams, FusionStrategy, Generator, GeneratorConfig};
use domsim_core::spectral::{SpectroPatch, FREQ_BINS, PATCH_FRAMES};
use domsim_core::synth;
use domsim_nn::Tensor;
use proptest::prelude::*;

fn cfg(fusion: FusionStrategy) -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        n_resblocks: 1,
        dropout_rate: 0.0,
        fusion_strategy: fusion,
        embedding_dim: 6,
        global_skip: false,
    }
}

fn patch(seed: u64) -> SpectroPatch {
    let v = synth::noise(synth::NoiseClass::Pink, FREQ_BINS * PATCH_FRAMES, seed);
    SpectroPatch::new(v, "p").unwrap()
}

fn emb(v: f64, kind: EmbeddingKind) -> DomainEmbedding {
    DomainEmbedding::new((0..6).map(|i| v * (i as f64 - 2.5)).collect(), kind, "e")
}

/// Moves every FiLM parameter off its identity start.
fn jolt(g: &mut Generator) {
    let ids: Vec<_> = g.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if g.store.name(id).starts_with("film") {
            let t = g.store.get_mut(id);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * (((i * 31 + k * 7) % 13) as f64 - 6.0) / 6.0;
            }
        }
    }
}

fn tensor_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..4, 1usize..5).prop_flat_map(|(c, hw)| {
        let n = c * hw * hw;
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-2.0f64..2.0, c),
            prop::collection::vec(-2.0f64..2.0, c),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn film_is_affine_in_the_features((f1, f2, w, b) in tensor_strategy(), a in -2.0f64..2.0) {
        let c = w.len();
        let hw = ((f1.len() / c) as f64).sqrt() as usize;
        let shape = [c, hw, hw];
        let t1 = Tensor::new(&shape, f1);
        let t2 = Tensor::new(&shape, f2);
        let lin = FilmParams { weight: w.clone(), bias: vec![0.0; c] };
        let full = FilmParams { weight: w, bias: b.clone() };
        let mix = t1.zip_map(&t2, |x, y| a * x + y);
        let lhs = film_apply(&mix, &lin).unwrap();
        let r1 = film_apply(&t1, &lin).unwrap();
        let r2 = film_apply(&t2, &lin).unwrap();
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * r1.data()[i] + r2.data()[i])).abs() < 1e-9);
        }
        // the bias adds a per-channel constant
        let with_bias = film_apply(&t1, &full).unwrap();
        let per = t1.numel() / c;
        for i in 0..t1.numel() {
            prop_assert!((with_bias.data()[i] - r1.data()[i] - b[i / per]).abs() < 1e-12);
        }
        prop_assert!(film_apply(&t1, &FilmParams::identity(c)).unwrap() == t1);
    }
}

#[test]
fn every_fusion_is_shape_preserving_and_uses_the_embeddings() {
    for fusion in FusionStrategy::ALL {
        let mut g = Generator::new(cfg(fusion), 2).unwrap();
        jolt(&mut g);
        let p = patch(1);
        let a = g.generate(&p, &emb(1.0, EmbeddingKind::Noise), &emb(0.5, EmbeddingKind::Channel), None).unwrap();
        let b = g.generate(&p, &emb(-1.0, EmbeddingKind::Noise), &emb(2.0, EmbeddingKind::Channel), None).unwrap();
        assert_eq!(a.values.len(), FREQ_BINS * PATCH_FRAMES, "{}", fusion.name());
        assert!(a.values.iter().all(|v| v.is_finite()));
        assert_ne!(a.values, b.values, "{} ignores its conditioning", fusion.name());
    }
}

#[test]
fn global_skip_adds_the_input() {
    let mut with = cfg(FusionStrategy::FilmAllIndependent);
    with.global_skip = true;
    let mut a = Generator::new(cfg(FusionStrategy::FilmAllIndependent), 4).unwrap();
    let b = Generator::new(with, 4).unwrap();
    // same weights, skip toggled
    let ids: Vec<_> = b.store.ids().collect();
    for id in ids {
        a.store.set(id, b.store.get(id).clone());
    }
    let p = patch(3);
    let ya = a.generate_unconditioned(&p).unwrap();
    let yb = b.generate_unconditioned(&p).unwrap();
    for ((x, y0), y1) in p.values.iter().zip(&ya.values).zip(&yb.values) {
        assert!((y1 - (y0 + x)).abs() < 1e-9);
    }
}

#[test]
fn save_load_preserves_outputs() {
    let mut g = Generator::new(cfg(FusionStrategy::Concat), 8).unwrap();
    jolt(&mut g);
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let h = Generator::load(dir.path()).unwrap();
    let p = patch(5);
    let n = emb(0.3, EmbeddingKind::Noise);
    let c = emb(-0.7, EmbeddingKind::Channel);
    assert_eq!(g.generate(&p, &n, &c, None).unwrap(), h.generate(&p, &n, &c, None).unwrap());
}
