use std::collections::BTreeMap;

use domsim_core::encoders::{embedding_divergence, perturb_embedding, DomainEmbedding, EmbeddingKind};
use proptest::prelude::*;

type Table = BTreeMap<String, BTreeMap<String, DomainEmbedding>>;

fn build(vectors: &[Vec<Vec<f64>>], names: &[String]) -> Table {
    vectors
        .iter()
        .enumerate()
        .map(|(u, chans)| {
            let inner = chans
                .iter()
                .zip(names)
                .map(|(v, n)| (n.clone(), DomainEmbedding::new(v.clone(), EmbeddingKind::Channel, "")))
                .collect();
            (format!("u{u}"), inner)
        })
        .collect()
}

fn vectors() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    (1usize..4, 2usize..5, 1usize..6).prop_flat_map(|(u, k, d)| {
        prop::collection::vec(prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), k), u)
    })
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("ch{j}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn divergence_is_a_mean_of_distances(v in vectors(), shift in -3.0f64..3.0) {
        let k = v[0].len();
        let d = embedding_divergence(&build(&v, &names(k))).unwrap();
        prop_assert!(d >= 0.0);
        // relabelling channels leaves it unchanged
        let mut rev = names(k);
        rev.reverse();
        let relabelled = embedding_divergence(&build(&v, &rev)).unwrap();
        prop_assert!((d - relabelled).abs() < 1e-9);
        // a common offset does not move it
        let moved: Vec<Vec<Vec<f64>>> = v
            .iter()
            .map(|chans| chans.iter().map(|e| e.iter().map(|x| x + shift).collect()).collect())
            .collect();
        let m = embedding_divergence(&build(&moved, &names(k))).unwrap();
        prop_assert!((d - m).abs() < 1e-9);
        // bounded by the largest pairwise distance
        let mut max: f64 = 0.0;
        for chans in &v {
            for a in chans {
                for b in chans {
                    let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    max = max.max(dist);
                }
            }
        }
        prop_assert!(d <= max + 1e-12);
    }

    #[test]
    fn perturbation_is_seeded(dim in 1usize..32, sigma in 0.0f64..2.0, seed in any::<u64>()) {
        let e = DomainEmbedding::new(vec![0.5; dim], EmbeddingKind::Noise, "u");
        let a = perturb_embedding(&e, sigma, seed).unwrap();
        let b = perturb_embedding(&e, sigma, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.dim(), dim);
        prop_assert_eq!(a.kind, e.kind);
    }
}

#[test]
fn ragged_channel_sets_rejected() {
    let v = vec![vec![vec![0.0], vec![1.0]], vec![vec![0.0], vec![1.0]]];
    let mut t = build(&v, &names(2));
    t.get_mut("u1").unwrap().remove("ch1");
    assert!(embedding_divergence(&t).is_err());
    let single = build(&[vec![vec![1.0]]], &names(1));
    assert!(embedding_divergence(&single).is_err());
    assert!(embedding_divergence(&Table::new()).is_err());
}

#[test]
fn perturbation_has_requested_moments() {
    let dim = 40_000;
    let sigma = 0.3;
    let e = DomainEmbedding::new(vec![1.0; dim], EmbeddingKind::Channel, "u");
    let p = perturb_embedding(&e, sigma, 17).unwrap();
    let eps: Vec<f64> = p.vector.iter().map(|v| v - 1.0).collect();
    let mean = eps.iter().sum::<f64>() / dim as f64;
    let var = eps.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (dim - 1) as f64;
    // 5 standard errors
    assert!(mean.abs() < 5.0 * sigma / (dim as f64).sqrt(), "mean {mean}");
    let se_var = sigma * sigma * (2.0 / (dim - 1) as f64).sqrt();
    assert!((var - sigma * sigma).abs() < 5.0 * se_var, "var {var}");
    // independent draws per seed
    let q = perturb_embedding(&e, sigma, 18).unwrap();
    assert_ne!(p, q);
    assert!(perturb_embedding(&e, -0.1, 1).is_err());
    assert_eq!(perturb_embedding(&e, 0.0, 1).unwrap(), e);
}
