use domsim_core::discriminator::{score_map_shapes, Discriminator, DiscriminatorConfig};
use domsim_core::spectral::{SpectroPatch, FREQ_BINS, PATCH_FRAMES};
use domsim_core::synth;
use domsim_nn::{Graph, Tensor};
use nalgebra::DMatrix;

fn small() -> Discriminator {
    Discriminator::new(
        DiscriminatorConfig {
            base_channels: 4,
            ..DiscriminatorConfig::default()
        },
        3,
    )
    .unwrap()
}

fn patch(seed: u64) -> Tensor {
    let v = synth::noise(synth::NoiseClass::White, FREQ_BINS * PATCH_FRAMES, seed);
    Tensor::new(&[1, 1, FREQ_BINS, PATCH_FRAMES], v)
}

fn top_singular_value(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let m = DMatrix::from_row_slice(rows, cols, w.data());
    m.singular_values().max()
}

#[test]
fn power_iteration_matches_svd() {
    let mut d = small();
    for _ in 0..3000 {
        d.power_step();
    }
    let sigmas = d.sigma_estimates();
    for (conv, s) in d.convs().iter().zip(&sigmas) {
        let exact = top_singular_value(d.store.get(conv.weight));
        assert!((s - exact).abs() <= 1e-6 * exact, "{s} vs {exact}");
    }
    for w in d.effective_weights() {
        let top = top_singular_value(&w);
        assert!((top - 1.0).abs() < 1e-6, "normalised top singular value {top}");
    }
}

#[test]
fn score_map_shape_chain() {
    assert_eq!(
        score_map_shapes(FREQ_BINS, PATCH_FRAMES),
        vec![(64, 64), (32, 32), (16, 16), (15, 15), (14, 14)]
    );
    let d = small();
    let mut g = Graph::new();
    let x = g.constant(patch(1));
    let s = d.score_map(&mut g, x);
    assert_eq!(g.shape(s), &[1, 1, 14, 14]);
}

#[test]
fn input_gradient_matches_directional_difference() {
    let d = small();
    let x = patch(5);
    let gx = d.input_gradients(&x).unwrap().remove(0);
    let logit = |t: &Tensor| {
        let mut g = Graph::new();
        let n = g.constant(t.clone());
        let l = d.logits(&mut g, n).unwrap();
        g.value(l).item()
    };
    let v = Tensor::new(x.shape(), synth::noise(synth::NoiseClass::White, x.numel(), 9));
    let h = 1e-7;
    let num = (logit(&x.zip_map(&v, |a, b| a + h * b)) - logit(&x.zip_map(&v, |a, b| a - h * b))) / (2.0 * h);
    let exact: f64 = gx.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    assert!((num - exact).abs() <= 1e-5 * exact.abs().max(1e-8), "{num} vs {exact}");
    let p = SpectroPatch::new(x.data().to_vec(), "x").unwrap();
    let gp = d.gradient_penalty(&[p]).unwrap();
    assert!((gp - gx.sq_norm()).abs() < 1e-12 * gp.max(1.0));
}

#[test]
fn masks_take_unit_or_leak_slopes() {
    let d = small();
    let x = patch(7);
    let masks = d.activation_masks(&x).unwrap();
    assert_eq!(masks.len(), 4);
    for m in &masks {
        assert!(m.data().iter().all(|&v| v == 1.0 || v == 0.2));
    }
    assert_eq!(d.input_gradients(&x).unwrap(), d.input_gradients_masked(&x, &masks).unwrap());
}

#[test]
fn penalty_gradient_scales_with_gamma() {
    let d = small();
    let p = vec![SpectroPatch::new(patch(2).into_data(), "p").unwrap()];
    let (v1, g1) = d.gradient_penalty_with_grad(&p, 1.0).unwrap();
    let (v2, g2) = d.gradient_penalty_with_grad(&p, 4.0).unwrap();
    assert_eq!(v1, v2);
    for (a, b) in g1.iter().zip(&g2) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((4.0 * x - y).abs() <= 1e-9 * y.abs().max(1e-12));
        }
    }
    // the last bias shifts the logit but not its input gradient
    let last = d.convs().last().unwrap().bias.unwrap();
    assert!(g1[last.index()].as_ref().unwrap().max_abs() < 1e-9);
}
