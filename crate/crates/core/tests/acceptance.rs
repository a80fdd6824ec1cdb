//! Acceptance suite. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line whether or not it succeeds.
//!
//! `cargo test -p domsim-core --test acceptance` runs criteria 1-9;
//! add `-- --ignored` to include the ablation batch job (criterion 10).
//! Positional arguments filter criteria by name substring.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use domsim_core::analysis::{self, Alpha, ScoreTable, Variant};
use domsim_core::config::Config;
use domsim_core::discriminator::{Discriminator, DiscriminatorConfig};
use domsim_core::encoders::{
    embedding_divergence, pretrain_channel_encoder, ChannelTrainConfig, DomainEmbedding, DomainEncoder,
    EmbeddingKind, FinetuneConfig,
};
use domsim_core::generator::{film_apply, Conditioning, FilmParams, FusionStrategy, Generator, GeneratorConfig};
use domsim_core::layers::{self, derive_seed};
use domsim_core::objectives::{
    adv_d_from_logits, adv_g_from_logits, adversarial_loss, channel_consistency_loss, embedding_l1_graph,
    noise_reconstruction_loss, pcl_loss, pcl_loss_graph, sample_patch_pairs, total_generator_loss, L1Reduction,
    LossParts, LossWeights, PatchSample, ProjectionHeads,
};
use domsim_core::pipeline::{self, simulate_dataset, target_items, Gan, GanTrainer, TrainOutputs};
use domsim_core::scenario::{self, SyntheticTask, TaskSpec};
use domsim_core::spectral::{reassemble, segment_patches, SpectroPatch, Stft, FREQ_BINS, PATCH_FRAMES};
use domsim_core::synth;
use domsim_nn::gradcheck::{numeric_gradient, relative_error};
use domsim_nn::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const LOSS_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
const SNR_MIN_DB: f64 = 30.0;
const DIVERGENCE_TOL: f64 = 1e-9;
const E2E_MIN_GAIN: f64 = 0.05;
const E2E_BUDGET: Duration = Duration::from_secs(60 * 60);

struct Check {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn that(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

type Criterion = (usize, &'static str, bool, fn(&mut Check));

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let criteria: [Criterion; 10] = [
        (1, "loss_oracles", false, loss_oracles),
        (2, "gradients", false, gradients),
        (3, "shapes_and_identities", false, shapes_and_identities),
        (4, "divergence_oracle", false, divergence_oracle),
        (5, "channel_encoder_trend", false, channel_encoder_trend),
        (6, "overfit_one_pair", false, overfit_one_pair),
        (7, "end_to_end_adaptation", false, end_to_end_adaptation),
        (8, "rank_statistics", false, rank_statistics),
        (9, "determinism", false, determinism),
        (10, "ablation_harness", true, ablation_harness),
    ];
    if args.iter().any(|a| a == "--list") {
        for (_, name, _, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let include_ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only_ignored = args.iter().any(|a| a == "--ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, batch, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        if (batch && !include_ignored) || (!batch && only_ignored) {
            println!("criterion {n:>2} {name:<24} SKIP (batch job; pass --ignored to run)");
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let mut check = Check::new();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| f(&mut check)));
        if let Err(e) = outcome {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            check.failures.push(format!("panicked: {msg}"));
        }
        let secs = start.elapsed().as_secs_f64();
        let status = if check.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut detail = check.notes.join("; ");
        if !check.failures.is_empty() {
            detail = format!("{} | failed: {}", detail, check.failures.join("; "));
        }
        println!("criterion {n:>2} {name:<24} {status} ({secs:.1}s) {detail}");
        if !check.failures.is_empty() {
            failed += 1;
        }
    }
    println!("acceptance: {} run, {} passed, {} failed", ran, ran - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn normal_vec(rng: &mut layers::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// 1. loss oracles

fn loss_oracles(c: &mut Check) {
    let mut rng = layers::rng(101);
    let instances = 120;
    let mut worst = BTreeMap::<&str, f64>::new();
    let mut bump = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..instances {
        // adversarial, from probabilities and from logits
        let n = rng.random_range(1..9);
        let m = rng.random_range(1..9);
        let lr = normal_vec(&mut rng, n, 2.0);
        let lf = normal_vec(&mut rng, m, 2.0);
        let pr: Vec<f64> = lr.iter().map(|&l| sigmoid(l)).collect();
        let pf: Vec<f64> = lf.iter().map(|&l| sigmoid(l)).collect();
        let mut sr = 0.0;
        for p in &pr {
            sr += p.ln();
        }
        let mut sf = 0.0;
        let mut sfn = 0.0;
        for p in &pf {
            sf += (1.0 - p).ln();
            sfn += p.ln();
        }
        let vd = -(sr / n as f64 + sf / m as f64);
        let vg_sat = sf / m as f64;
        let vg_ns = -sfn / m as f64;
        let (d, gs) = adversarial_loss(&pr, &pf, false).unwrap();
        let (_, gn) = adversarial_loss(&pr, &pf, true).unwrap();
        bump("adversarial", (d - vd).abs().max((gs - vg_sat).abs()).max((gn - vg_ns).abs()));
        let mut g = Graph::new();
        let r = g.constant(Tensor::new(&[n], lr.clone()));
        let f = g.constant(Tensor::new(&[m], lf.clone()));
        let dl = adv_d_from_logits(&mut g, r, f);
        let gl = adv_g_from_logits(&mut g, f, false);
        let gln = adv_g_from_logits(&mut g, f, true);
        bump(
            "adversarial_logits",
            (g.value(dl).item() - vd)
                .abs()
                .max((g.value(gl).item() - vg_sat).abs())
                .max((g.value(gln).item() - vg_ns).abs()),
        );

        // embedding L1, both reductions, scalar and batched graph
        let dim = rng.random_range(1..40);
        let a = normal_vec(&mut rng, dim, 1.0);
        let b = normal_vec(&mut rng, dim, 1.0);
        let mut s = 0.0;
        for i in 0..dim {
            s += (a[i] - b[i]).abs();
        }
        let nr = noise_reconstruction_loss(&a, &b, L1Reduction::Mean).unwrap();
        let cc = channel_consistency_loss(&a, &b, L1Reduction::Sum).unwrap();
        bump("noise_reconstruction", (nr - s / dim as f64).abs());
        bump("channel_consistency", (cc - s).abs());
        let mut g = Graph::new();
        let ta = g.constant(Tensor::new(&[1, dim], a.clone()));
        let tb = g.constant(Tensor::new(&[1, dim], b.clone()));
        let lm = embedding_l1_graph(&mut g, ta, tb, L1Reduction::Mean).unwrap();
        let ls = embedding_l1_graph(&mut g, ta, tb, L1Reduction::Sum).unwrap();
        bump(
            "embedding_l1_graph",
            (g.value(lm).item() - s / dim as f64).abs().max((g.value(ls).item() - s).abs()),
        );

        // contrastive, scalar form on unit vectors
        let nq = rng.random_range(1..6);
        let width = rng.random_range(2..10);
        let unit = |rng: &mut layers::Rng| {
            let v = normal_vec(rng, width, 1.0);
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / nrm).collect::<Vec<f64>>()
        };
        let qs: Vec<Vec<f64>> = (0..nq).map(|_| unit(&mut rng)).collect();
        let ps: Vec<Vec<f64>> = (0..nq).map(|_| unit(&mut rng)).collect();
        let ns: Vec<Vec<Vec<f64>>> = (0..nq)
            .map(|_| (0..rng.random_range(0..5)).map(|_| unit(&mut rng)).collect())
            .collect();
        let tau = 0.07;
        let mut acc = 0.0;
        for i in 0..nq {
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            let pos = (dot(&qs[i], &ps[i]) / tau).exp();
            let mut denom = pos;
            for neg in &ns[i] {
                denom += (dot(&qs[i], neg) / tau).exp();
            }
            acc += -(pos / denom).ln();
        }
        bump("pcl_scalar", (pcl_loss(&qs, &ps, &ns, tau).unwrap() - acc / nq as f64).abs());

        // total
        let parts = LossParts {
            adv_d: rng.random(),
            adv_g: rng.random(),
            pcl_src: rng.random(),
            pcl_tgt: rng.random(),
            nr: rng.random(),
            cc: rng.random(),
            gp: rng.random(),
        };
        let w = LossWeights {
            lambda_nr: rng.random(),
            lambda_cc: rng.random(),
            ..LossWeights::default()
        };
        let rep = total_generator_loss(1, parts, &w);
        let expect = parts.adv_g + parts.pcl_src + parts.pcl_tgt + w.lambda_nr * parts.nr + w.lambda_cc * parts.cc;
        bump("total_generator", (rep.total_g - expect).abs());
    }

    // graph contrastive loss against a loop implementation of heads,
    // normalisation and cross-entropy
    for inst in 0..instances {
        let layer_c = [3usize, 5];
        let heads = ProjectionHeads::with_width(&layer_c, 6, inst as u64);
        let mut g = Graph::new();
        let (h, w) = (4usize, 5usize);
        let feats: Vec<(Tensor, Tensor)> = layer_c
            .iter()
            .map(|&ch| {
                (
                    Tensor::new(&[1, ch, h, w], normal_vec(&mut rng, ch * h * w, 1.0)),
                    Tensor::new(&[1, ch, h, w], normal_vec(&mut rng, ch * h * w, 1.0)),
                )
            })
            .collect();
        let gen: Vec<NodeId> = feats.iter().map(|(a, _)| g.constant(a.clone())).collect();
        let src: Vec<NodeId> = feats.iter().map(|(_, b)| g.constant(b.clone())).collect();
        let shapes: Vec<Vec<usize>> = layer_c.iter().map(|&ch| vec![ch, h, w]).collect();
        let samples = sample_patch_pairs(&shapes, &shapes, 2, 7, inst as u64).unwrap();
        let tau = 0.07;
        let loss = pcl_loss_graph(&mut g, &heads, &gen, &src, &samples, tau).unwrap();
        let oracle = pcl_oracle(&heads, &feats, &samples, tau);
        bump("pcl_graph", (g.value(loss).item() - oracle).abs());
    }

    for (k, v) in &worst {
        c.that(*v <= LOSS_TOL, format!("{k} error {v:.2e}"));
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    c.note(format!(
        "{} losses x {instances} instances, max abs error {max:.1e} (tol {LOSS_TOL:.0e})",
        worst.len()
    ));
}

fn pcl_oracle(heads: &ProjectionHeads, feats: &[(Tensor, Tensor)], samples: &[PatchSample], tau: f64) -> f64 {
    let st = &heads.store;
    let param = |name: String| st.get(st.find(&name).expect("head param")).clone();
    let mlp = |l: usize, x: &[f64]| -> Vec<f64> {
        let w1 = param(format!("head{l}.fc1.weight"));
        let b1 = param(format!("head{l}.fc1.bias"));
        let w2 = param(format!("head{l}.fc2.weight"));
        let b2 = param(format!("head{l}.fc2.bias"));
        let (o1, i1) = (w1.shape()[0], w1.shape()[1]);
        let mut hdn = vec![0.0; o1];
        for o in 0..o1 {
            let mut s = b1.data()[o];
            for i in 0..i1 {
                s += w1.data()[o * i1 + i] * x[i];
            }
            hdn[o] = s.max(0.0);
        }
        let (o2, i2) = (w2.shape()[0], w2.shape()[1]);
        let mut out = vec![0.0; o2];
        for o in 0..o2 {
            let mut s = b2.data()[o];
            for i in 0..i2 {
                s += w2.data()[o * i2 + i] * hdn[i];
            }
            out[o] = s;
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter().map(|v| v / n).collect()
    };
    let at = |t: &Tensor, loc: usize| -> Vec<f64> {
        let (_, ch, h, w) = t.dims4();
        (0..ch).map(|c| t.data()[c * h * w + loc]).collect()
    };
    let mut total = 0.0;
    for (l, s) in samples.iter().enumerate() {
        let q: Vec<Vec<f64>> = s.locations.iter().map(|&p| mlp(l, &at(&feats[l].0, p))).collect();
        let k: Vec<Vec<f64>> = s.locations.iter().map(|&p| mlp(l, &at(&feats[l].1, p))).collect();
        let mut layer = 0.0;
        for i in 0..q.len() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            layer += -(logits[i].exp() / z).ln();
        }
        total += layer / q.len() as f64;
    }
    total / samples.len() as f64
}

// ---------------------------------------------------------------------------
// 2. gradients

fn miniature_generator(fusion: FusionStrategy, seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        base_channels: 4,
        n_resblocks: 2,
        dropout_rate: 0.0,
        fusion_strategy: fusion,
        embedding_dim: 8,
        global_skip: false,
    };
    let mut g = Generator::new(cfg, seed).unwrap();
    // move FiLM off its identity initialisation so embedding gradients are non-trivial
    let mut rng = layers::rng(seed ^ 0xF11);
    let ids: Vec<_> = g.store.ids().collect();
    for id in ids {
        if g.store.name(id).starts_with("film") {
            let t = g.store.get(id);
            let noise = Tensor::new(t.shape(), normal_vec(&mut rng, t.numel(), 0.1));
            g.store.get_mut(id).add_assign(&noise);
        }
    }
    g
}

fn random_patch(seed: u64) -> Tensor {
    let mut rng = layers::rng(seed);
    Tensor::new(&[1, 1, FREQ_BINS, PATCH_FRAMES], normal_vec(&mut rng, FREQ_BINS * PATCH_FRAMES, 1.0))
}

/// Relative error of the analytic gradient restricted to `coords`, and of
/// directional derivatives along a few random directions. `floor` bounds
/// the denominator so parameters with an exactly zero gradient compare on
/// absolute error.
fn sampled_check(
    analytic: &Tensor,
    x: &Tensor,
    coords: &[usize],
    directions: usize,
    h: f64,
    seed: u64,
    floor: f64,
    f: &dyn Fn(&Tensor) -> f64,
) -> f64 {
    let mut probe = x.clone();
    let mut num = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        num.push((fp - fm) / (2.0 * h));
    }
    let ana: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
    let mut worst = relative_error(&ana, &num, floor);
    let mut rng = layers::rng(seed);
    for _ in 0..directions {
        let v = Tensor::new(x.shape(), normal_vec(&mut rng, x.numel(), 1.0));
        let fp = f(&x.zip_map(&v, |a, b| a + h * b));
        let fm = f(&x.zip_map(&v, |a, b| a - h * b));
        let numeric = (fp - fm) / (2.0 * h);
        let exact: f64 = analytic.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        worst = worst.max(relative_error(&[exact], &[numeric], floor));
    }
    worst
}

fn gradients(c: &mut Check) {
    let mut worst = BTreeMap::<String, f64>::new();
    let mut rec = |k: &str, e: f64| {
        let w = worst.entry(k.to_string()).or_insert(0.0);
        *w = w.max(e);
    };
    let mut rng = layers::rng(202);
    let h = 1e-6;

    // adversarial losses w.r.t. logits
    for ns in [false, true] {
        let r = Tensor::new(&[5], normal_vec(&mut rng, 5, 1.5));
        let f = Tensor::new(&[4], normal_vec(&mut rng, 4, 1.5));
        let loss = |g: &mut Graph, ids: &[NodeId]| {
            let d = adv_d_from_logits(g, ids[0], ids[1]);
            let gg = adv_g_from_logits(g, ids[1], ns);
            let gg = g.scale(gg, 0.7);
            g.add(d, gg)
        };
        for e in domsim_nn::gradcheck::check_inputs(&[r, f], h, loss) {
            rec("adversarial", e);
        }
    }

    // embedding L1 away from its kinks
    for red in [L1Reduction::Mean, L1Reduction::Sum] {
        let a = Tensor::new(&[3, 8], normal_vec(&mut rng, 24, 1.0));
        let b = a.map(|v| v + if v > 0.0 { 0.3 } else { -0.4 });
        let errs = domsim_nn::gradcheck::check_inputs(&[a, b], h, |g, ids| {
            embedding_l1_graph(g, ids[0], ids[1], red).unwrap()
        });
        for e in errs {
            rec("embedding_l1", e);
        }
    }

    // contrastive: w.r.t. both feature maps and the head parameters
    {
        let layer_c = [3usize, 4];
        let heads = ProjectionHeads::with_width(&layer_c, 8, 7);
        let shapes: Vec<Vec<usize>> = layer_c.iter().map(|&ch| vec![ch, 3, 4]).collect();
        let samples = sample_patch_pairs(&shapes, &shapes, 2, 5, 3).unwrap();
        let inputs: Vec<Tensor> = layer_c
            .iter()
            .flat_map(|&ch| {
                let a = Tensor::new(&[1, ch, 3, 4], normal_vec(&mut rng, ch * 12, 1.0));
                let b = Tensor::new(&[1, ch, 3, 4], normal_vec(&mut rng, ch * 12, 1.0));
                [a, b]
            })
            .collect();
        let errs = domsim_nn::gradcheck::check_inputs(&inputs, h, |g, ids| {
            pcl_loss_graph(g, &heads, &[ids[0], ids[2]], &[ids[1], ids[3]], &samples, 0.07).unwrap()
        });
        for e in errs {
            rec("pcl_features", e);
        }
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = pcl_loss_graph(&mut g, &heads, &[ids[0], ids[2]], &[ids[1], ids[3]], &samples, 0.07).unwrap();
        let pg = g.backward(loss).for_store(&heads.store);
        for id in heads.store.ids() {
            let base = heads.store.get(id).clone();
            let num = numeric_gradient(&base, h, |t| {
                let mut hs = heads.clone();
                hs.store.set(id, t.clone());
                let mut g = Graph::new();
                let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let l = pcl_loss_graph(&mut g, &hs, &[ids[0], ids[2]], &[ids[1], ids[3]], &samples, 0.07).unwrap();
                g.value(l).item()
            });
            let ana = pg[id.index()].clone().unwrap_or_else(|| Tensor::zeros(base.shape()));
            rec("pcl_heads", relative_error(ana.data(), num.data(), 1e-10));
        }
    }

    // gradient penalty w.r.t. discriminator parameters (sampled coordinates)
    {
        let disc = Discriminator::new(
            DiscriminatorConfig {
                base_channels: 4,
                ..DiscriminatorConfig::default()
            },
            5,
        )
        .unwrap();
        let real = vec![SpectroPatch::new(random_patch(8).into_data(), "r").unwrap()];
        let x = random_patch(8);
        let gamma = 10.0;
        let (_, grads) = disc.gradient_penalty_with_grad(&real, gamma).unwrap();
        // the penalty is piecewise smooth in the parameters; differentiate
        // the piece containing the current point
        let masks = disc.activation_masks(&x).unwrap();
        let free = disc.input_gradients(&x).unwrap();
        let held = disc.input_gradients_masked(&x, &masks).unwrap();
        c.that(free == held, "masked input gradient differs at the mask point");
        let ids: Vec<_> = disc.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let base = disc.store.get(id).clone();
            let analytic = grads[id.index()].clone().unwrap();
            let n = base.numel();
            let coords: Vec<usize> = (0..n.min(12)).map(|j| (j * 7919 + k) % n).collect();
            let f = |t: &Tensor| {
                let mut d = disc.clone();
                d.store.set(id, t.clone());
                let gx = d.input_gradients_masked(&x, &masks).unwrap();
                0.5 * gamma * gx[0].sq_norm()
            };
            rec("gradient_penalty", sampled_check(&analytic, &base, &coords, 1, 1e-5, k as u64, 1e-6, &f));
        }
    }

    // film_apply: graph channel-affine gradient vs differences of the tensor function
    {
        let (ch, hh, ww) = (3usize, 4usize, 5usize);
        let feat = Tensor::new(&[ch, hh, ww], normal_vec(&mut rng, ch * hh * ww, 1.0));
        let wv = Tensor::new(&[ch], normal_vec(&mut rng, ch, 1.0));
        let bv = Tensor::new(&[ch], normal_vec(&mut rng, ch, 1.0));
        let r = Tensor::new(&[ch, hh, ww], normal_vec(&mut rng, ch * hh * ww, 1.0));
        let scalar = |f: &Tensor, w: &Tensor, b: &Tensor| {
            let p = FilmParams {
                weight: w.data().to_vec(),
                bias: b.data().to_vec(),
            };
            film_apply(f, &p).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let fx = g.input(feat.clone().reshape(&[1, ch, hh, ww]));
        let wx = g.input(wv.clone().reshape(&[1, ch]));
        let bx = g.input(bv.clone().reshape(&[1, ch]));
        let y = g.channel_affine(fx, wx, bx);
        let y = g.mul_const(y, r.clone().reshape(&[1, ch, hh, ww]));
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let nf = numeric_gradient(&feat, h, |t| scalar(t, &wv, &bv));
        let nw = numeric_gradient(&wv, h, |t| scalar(&feat, t, &bv));
        let nb = numeric_gradient(&bv, h, |t| scalar(&feat, &wv, t));
        rec("film_apply", relative_error(grads.get(fx).unwrap().data(), nf.data(), 1e-10));
        rec("film_apply", relative_error(grads.get(wx).unwrap().data(), nw.data(), 1e-10));
        rec("film_apply", relative_error(grads.get(bx).unwrap().data(), nb.data(), 1e-10));
    }

    // film_compute: embedding and parameter gradients of the FiLM heads
    {
        let gen = miniature_generator(FusionStrategy::FilmAllIndependent, 9);
        let d = gen.embedding_dim();
        let n = DomainEmbedding::new(normal_vec(&mut rng, d, 1.0), EmbeddingKind::Noise, "n");
        let ce = DomainEmbedding::new(normal_vec(&mut rng, d, 1.0), EmbeddingKind::Channel, "c");
        let site = 1;
        let layer = gen.film_layers()[site];
        let cch = gen.encoder_output_channels();
        let rw = normal_vec(&mut rng, cch, 1.0);
        let rb = normal_vec(&mut rng, cch, 1.0);
        let scalar = |p: &FilmParams| {
            p.weight.iter().zip(&rw).map(|(a, b)| a * b).sum::<f64>()
                + p.bias.iter().zip(&rb).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let nx = g.input(Tensor::new(&[1, d], n.vector.clone()));
        let cx = g.input(Tensor::new(&[1, d], ce.vector.clone()));
        let sx = g.add(nx, cx);
        let (w, b) = layer.forward(&mut g, &gen.store, sx);
        let w = g.mul_const(w, Tensor::new(&[1, cch], rw.clone()));
        let b = g.mul_const(b, Tensor::new(&[1, cch], rb.clone()));
        let t = g.add(w, b);
        let s = g.sum_all(t);
        let grads = g.backward(s);
        let nt = Tensor::new(&[d], n.vector.clone());
        let num_n = numeric_gradient(&nt, h, |t| {
            let e = DomainEmbedding::new(t.data().to_vec(), EmbeddingKind::Noise, "n");
            scalar(&gen.film_compute(&e, &ce, site).unwrap())
        });
        rec("film_compute", relative_error(grads.get(nx).unwrap().data(), num_n.data(), 1e-10));
        let pg = grads.for_store(&gen.store);
        for id in [layer.to_weight.weight, layer.to_bias.bias] {
            let base = gen.store.get(id).clone();
            let num = numeric_gradient(&base, h, |t| {
                let mut gg = gen.clone();
                gg.store.set(id, t.clone());
                scalar(&gg.film_compute(&n, &ce, site).unwrap())
            });
            rec("film_compute", relative_error(pg[id.index()].as_ref().unwrap().data(), num.data(), 1e-10));
        }
    }

    // generate: input, embeddings and sampled parameters of a miniature generator
    {
        let gen = miniature_generator(FusionStrategy::FilmAllIndependent, 13);
        let d = gen.embedding_dim();
        let x = random_patch(21);
        let ne = Tensor::new(&[1, d], normal_vec(&mut rng, d, 1.0));
        let ce = Tensor::new(&[1, d], normal_vec(&mut rng, d, 1.0));
        let r = Tensor::new(x.shape(), normal_vec(&mut rng, x.numel(), 1.0));
        let scalar = |gen: &Generator, x: &Tensor, ne: &Tensor, ce: &Tensor| {
            let p = SpectroPatch::new(x.data().to_vec(), "x").unwrap();
            let nn = DomainEmbedding::new(ne.data().to_vec(), EmbeddingKind::Noise, "n");
            let cc = DomainEmbedding::new(ce.data().to_vec(), EmbeddingKind::Channel, "c");
            let y = gen.generate(&p, &nn, &cc, None).unwrap();
            y.values.iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let ni = g.input(ne.clone());
        let ci = g.input(ce.clone());
        let out = gen
            .forward(&mut g, xi, Conditioning::Embeddings { noise: ni, channel: ci }, None)
            .unwrap();
        let y = g.mul_const(out.output, r.clone());
        let s = g.sum_all(y);
        let grads = g.backward(s);
        // small steps keep ReLU kinks from being crossed; the scalar is O(1e2-1e3)
        let gh = 1e-7;
        let gfloor = 1.0;
        let coords: Vec<usize> = (0..24).map(|j| (j * 2741 + 17) % x.numel()).collect();
        rec(
            "generate_input",
            sampled_check(grads.get(xi).unwrap(), &x, &coords, 3, gh, 1, gfloor, &|t| scalar(&gen, t, &ne, &ce)),
        );
        let all: Vec<usize> = (0..d).collect();
        rec(
            "generate_embeddings",
            sampled_check(grads.get(ni).unwrap(), &ne, &all, 0, gh, 2, gfloor, &|t| scalar(&gen, &x, t, &ce)),
        );
        rec(
            "generate_embeddings",
            sampled_check(grads.get(ci).unwrap(), &ce, &all, 0, gh, 3, gfloor, &|t| scalar(&gen, &x, &ne, t)),
        );
        let pg = grads.for_store(&gen.store);
        for (k, id) in gen.store.ids().enumerate() {
            let base = gen.store.get(id).clone();
            let Some(analytic) = pg[id.index()].as_ref() else {
                c.that(false, format!("no gradient for {}", gen.store.name(id)));
                continue;
            };
            let n = base.numel();
            let coords: Vec<usize> = (0..n.min(4)).map(|j| (j * 131 + k) % n).collect();
            let e = sampled_check(analytic, &base, &coords, 1, gh, 100 + k as u64, gfloor, &|t| {
                let mut gg = gen.clone();
                gg.store.set(id, t.clone());
                scalar(&gg, &x, &ne, &ce)
            });
            rec("generate_params", e);
        }
    }

    for (k, v) in &worst {
        c.that(*v <= GRAD_TOL, format!("{k} relative error {v:.2e}"));
    }
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    c.note(format!("max relative error per group (tol {GRAD_TOL:.0e}): {}", summary.join(", ")));
}

// ---------------------------------------------------------------------------
// 3. shapes and identities

fn shapes_and_identities(c: &mut Check) {
    let mut rng = layers::rng(303);
    let x = Tensor::stack(&[random_patch(1), random_patch(2)]).reshape(&[2, 1, FREQ_BINS, PATCH_FRAMES]);
    for fusion in FusionStrategy::ALL {
        let gen = miniature_generator(fusion, 4);
        let d = gen.embedding_dim();
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let ni = g.constant(Tensor::new(&[2, d], normal_vec(&mut rng, 2 * d, 1.0)));
        let ci = g.constant(Tensor::new(&[2, d], normal_vec(&mut rng, 2 * d, 1.0)));
        let out = gen
            .forward(&mut g, xi, Conditioning::Embeddings { noise: ni, channel: ci }, None)
            .unwrap();
        c.that(
            g.shape(out.output) == [2, 1, FREQ_BINS, PATCH_FRAMES],
            format!("{} output shape {:?}", fusion.name(), g.shape(out.output)),
        );
    }
    c.note("5 fusion strategies keep 129x128");

    let mut films = 0;
    for fusion in [
        FusionStrategy::FilmEncoderOnly,
        FusionStrategy::FilmAllShared,
        FusionStrategy::FilmAllIndependent,
    ] {
        let mut gen = miniature_generator(fusion, 6);
        gen.set_film_identity();
        let d = gen.embedding_dim();
        let p = SpectroPatch::new(random_patch(3).into_data(), "p").unwrap();
        let n = DomainEmbedding::new(normal_vec(&mut rng, d, 3.0), EmbeddingKind::Noise, "n");
        let ce = DomainEmbedding::new(normal_vec(&mut rng, d, 3.0), EmbeddingKind::Channel, "c");
        let conditioned = gen.generate(&p, &n, &ce, None).unwrap();
        let plain = gen.generate_unconditioned(&p).unwrap();
        c.that(conditioned.values == plain.values, format!("{} FiLM identity not bit-exact", fusion.name()));
        films += 1;
    }
    c.note(format!("FiLM identity bit-exact for {films} strategies"));

    let stft = Stft::default();
    let mut min_snr = f64::INFINITY;
    for seed in 0..4 {
        let clip = synth::speech_like(&format!("u{seed}"), 0.5 + 0.37 * seed as f64, seed);
        let spec = stft.analyze(&clip).unwrap();
        let patches = segment_patches(&spec, stft.floor()).unwrap();
        let back = reassemble(&patches, &spec).unwrap();
        c.that(back == spec, format!("patch round trip differs for seed {seed}"));
        let y = stft.synthesize(&spec).unwrap();
        let n = y.samples.len();
        let p: f64 = clip.samples[..n].iter().map(|v| v * v).sum();
        let e: f64 = clip.samples[..n].iter().zip(&y.samples).map(|(a, b)| (a - b) * (a - b)).sum();
        min_snr = min_snr.min(10.0 * (p / e).log10());
    }
    c.that(min_snr > SNR_MIN_DB, format!("STFT round trip SNR {min_snr:.1} dB"));
    c.note(format!("patch round trip bit-exact; STFT/ISTFT SNR min {min_snr:.0} dB (> {SNR_MIN_DB})"));
}

// ---------------------------------------------------------------------------
// 4. divergence oracle

fn divergence_oracle(c: &mut Check) {
    let mut rng = layers::rng(404);
    let mut worst: f64 = 0.0;
    let cases = 200;
    for _ in 0..cases {
        let n_utt = rng.random_range(1..5);
        let k = rng.random_range(2..6);
        let dim = rng.random_range(1..12);
        let raw: Vec<Vec<Vec<f64>>> = (0..n_utt)
            .map(|_| (0..k).map(|_| normal_vec(&mut rng, dim, 2.0)).collect())
            .collect();
        let table = |scale: f64| {
            let mut m = BTreeMap::new();
            for (u, chans) in raw.iter().enumerate() {
                let mut inner = BTreeMap::new();
                for (j, v) in chans.iter().enumerate() {
                    inner.insert(
                        format!("ch{j}"),
                        DomainEmbedding::new(v.iter().map(|x| x * scale).collect(), EmbeddingKind::Channel, ""),
                    );
                }
                m.insert(format!("u{u}"), inner);
            }
            m
        };
        // brute force: every ordered pair, halved
        let mut total = 0.0;
        let mut pairs = 0usize;
        for chans in &raw {
            for i in 0..k {
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let mut s = 0.0;
                    for t in 0..dim {
                        s += (chans[i][t] - chans[j][t]).powi(2);
                    }
                    total += s.sqrt() / 2.0;
                    pairs += 1;
                }
            }
        }
        let oracle = total / (pairs as f64 / 2.0);
        let got = embedding_divergence(&table(1.0)).unwrap();
        worst = worst.max((got - oracle).abs());
        let alpha = rng.random_range(-3.0..3.0);
        let scaled = embedding_divergence(&table(alpha)).unwrap();
        c.that(
            (scaled - alpha.abs() * got).abs() <= DIVERGENCE_TOL * (1.0 + got.abs()),
            format!("scaling by {alpha} gives {scaled} vs {}", alpha.abs() * got),
        );
    }
    c.that(worst <= DIVERGENCE_TOL, format!("max oracle error {worst:.2e}"));
    let same: BTreeMap<String, BTreeMap<String, DomainEmbedding>> = (0..3)
        .map(|u| {
            let v = normal_vec(&mut rng, 6, 1.0);
            let inner = (0..4)
                .map(|j| (format!("ch{j}"), DomainEmbedding::new(v.clone(), EmbeddingKind::Channel, "")))
                .collect();
            (format!("u{u}"), inner)
        })
        .collect();
    let d0 = embedding_divergence(&same).unwrap();
    c.that(d0 == 0.0, format!("identical embeddings give {d0}"));
    c.note(format!(
        "{cases} random cases, max error {worst:.1e} (tol {DIVERGENCE_TOL:.0e}); identical -> 0; |alpha| scaling holds"
    ));
}

// ---------------------------------------------------------------------------
// 5. channel-encoder trend

fn channel_encoder_trend(c: &mut Check) {
    let cfg = Config::desk();
    let parallel = synth::parallel_corpus(20, 4, 1.0, 505);
    let mut enc = DomainEncoder::standin(
        EmbeddingKind::Channel,
        cfg.encoder.standin.clone(),
        &mut layers::rng(derive_seed(505, "init")),
    );
    let tmp = tempfile::tempdir().unwrap();
    let report = pretrain_channel_encoder(
        &mut enc,
        &parallel,
        &Default::default(),
        &ChannelTrainConfig {
            finetune: FinetuneConfig {
                epochs: 30,
                encoder_lr: cfg.encoder.lr,
                head_lr_ratio: cfg.encoder.head_lr_ratio,
                batch_size: cfg.encoder.batch_size,
                seed: 505,
            },
            val_fraction: 0.25,
            checkpoint_dir: Some(tmp.path().to_path_buf()),
        },
    )
    .unwrap();
    // replay the saved checkpoints through the analysis path
    let dirs = analysis::list_checkpoints(tmp.path()).unwrap();
    let val: Vec<_> = parallel
        .iter()
        .filter(|clip| report.val_utterances.contains(&clip.utterance_id))
        .cloned()
        .collect();
    let curve = analysis::divergence_curve(&dirs, &val).unwrap();
    c.that(curve.len() == 30, format!("{} curve points", curve.len()));
    for (p, e) in curve.iter().zip(&report.epochs) {
        let same = (p.divergence - e.divergence).abs() < 1e-9 && (p.val_loss - e.val_loss).abs() < 1e-9;
        c.that(same, format!("epoch {} replay differs from training log", p.epoch));
    }
    let epochs: Vec<f64> = curve.iter().map(|p| p.epoch as f64).collect();
    let d: Vec<f64> = curve.iter().map(|p| p.divergence).collect();
    let loss: Vec<f64> = curve.iter().map(|p| p.val_loss).collect();
    let r = analysis::pearson(&epochs, &d);
    let smooth = analysis::moving_average(&loss, 5);
    let rises: Vec<usize> = (1..smooth.len()).filter(|&i| smooth[i] > smooth[i - 1]).collect();
    c.that(r > 0.0, format!("epoch/divergence correlation {r:.3}"));
    c.that(rises.is_empty(), format!("smoothed validation loss rises at epochs {rises:?}"));
    c.note(format!(
        "corr(epoch, d) = {r:.3}; d {:.3} -> {:.3}; smoothed val loss {:.3} -> {:.3}",
        d[0],
        d[d.len() - 1],
        smooth[0],
        smooth[smooth.len() - 1]
    ));
}

// ---------------------------------------------------------------------------
// 6. overfit one pair

fn overfit_one_pair(c: &mut Check) {
    let cfg = Config::desk();
    let mut rng = layers::rng(606);
    let noise = DomainEncoder::standin(EmbeddingKind::Noise, cfg.encoder.standin.clone(), &mut rng);
    let channel = DomainEncoder::standin(EmbeddingKind::Channel, cfg.encoder.standin.clone(), &mut rng);
    let stft = Stft::default();
    let src_clip = synth::speech_like("s", 1.0, 1);
    let cond = synth::Condition {
        channel_id: "t".into(),
        coloration: synth::Coloration::random(2, 16),
        noise_class: synth::NoiseClass::Pink,
        snr_db: 5.0,
    };
    let tgt_clip = cond.render(&synth::speech_like("t", 1.0, 2), 3);
    let src = segment_patches(&stft.analyze(&src_clip).unwrap(), stft.floor()).unwrap().remove(0);
    let tgt = target_items(&[tgt_clip], &noise, &channel, &stft).unwrap().remove(0);
    let gan = Gan::new(&cfg, 606).unwrap();
    let mut trainer = GanTrainer::new(gan, &cfg, &noise, &channel, 606).unwrap();
    let mut totals = Vec::with_capacity(200);
    let mut finite = true;
    for _ in 0..200 {
        let (rep, _) = trainer.step(&[&src], &[&tgt]).unwrap();
        finite &= rep.all_finite();
        totals.push(rep.total_g);
    }
    c.that(finite, "non-finite value in a loss report");
    c.that(totals[199] < totals[0], format!("total_g {:.4} -> {:.4}", totals[0], totals[199]));
    c.note(format!("total_g step 1 {:.4} -> step 200 {:.4}; all reports finite", totals[0], totals[199]));
}

// ---------------------------------------------------------------------------
// 7. end-to-end adaptation

fn e2e_config() -> Config {
    let mut cfg = Config::desk();
    cfg.train.epochs = 40;
    cfg.train.checkpoint_every = 40;
    cfg
}

fn end_to_end_adaptation(c: &mut Check) {
    let start = Instant::now();
    let cfg = e2e_config();
    let seed = 7;
    let task = SyntheticTask::build(TaskSpec::default(), seed);
    let encoders = scenario::pretrain_encoders(&task, &cfg, seed).unwrap();
    let naive = scenario::naive_adapt(&task, &cfg, seed).unwrap();
    let run = scenario::run(&task, &encoders, &cfg, seed, None).unwrap();
    let pre = run.adapt.pre.lsd;
    let post = run.adapt.post.lsd;
    let naive_post = naive.post.lsd;
    let gain = (pre - post) / pre;
    let elapsed = start.elapsed();
    c.that(gain >= E2E_MIN_GAIN, format!("relative LSD reduction {:.2}%", 100.0 * gain));
    c.that(post < naive_post, format!("adapted {post:.4} vs naive {naive_post:.4}"));
    c.that(elapsed < E2E_BUDGET, format!("took {:.0}s", elapsed.as_secs_f64()));
    c.note(format!(
        "{}+{} utterances, {} GAN epochs; held-out LSD unadapted {pre:.4}, naive pairs {naive_post:.4}, simulated pairs {post:.4} ({:.1}% lower, need >= {:.0}%)",
        task.spec.n_source,
        task.spec.n_target,
        cfg.train.epochs,
        100.0 * gain,
        100.0 * E2E_MIN_GAIN
    ));
}

// ---------------------------------------------------------------------------
// 8. rank statistics

fn rank_statistics(c: &mut Check) {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    // rows are items, columns systems A, B, C
    let scores = vec![
        vec![9.0, 7.0, 5.0],
        vec![8.0, 9.0, 6.0],
        vec![7.0, 5.0, 6.0],
        vec![9.0, 6.0, 4.0],
    ];
    // ranks by hand: (1,2,3) (2,1,3) (1,3,2) (1,2,3) -> sums 5, 8, 11
    let hand_means = [5.0 / 4.0, 8.0 / 4.0, 11.0 / 4.0];
    let (n, k) = (4.0, 3.0);
    let hand_chi2 = 12.0 / (n * k * (k + 1.0)) * (25.0 + 64.0 + 121.0) - 3.0 * n * (k + 1.0);
    let table = ScoreTable::new(names(&["A", "B", "C"]), names(&["i1", "i2", "i3", "i4"]), scores).unwrap();
    let fr = analysis::friedman_test(&table).unwrap();
    c.that((fr.chi2 - hand_chi2).abs() < 1e-12, format!("chi2 {} vs {hand_chi2}", fr.chi2));
    c.that(fr.ranks == hand_means, format!("ranks {:?}", fr.ranks));
    c.that(fr.df == 2, format!("df {}", fr.df));

    let tied = ScoreTable::new(
        names(&["a", "b", "c", "d", "e", "f"]),
        (0..10).map(|i| format!("u{i}")).collect(),
        (0..10).map(|i| vec![i as f64; 6]).collect(),
    )
    .unwrap();
    let ft = analysis::friedman_test(&tied).unwrap();
    c.that(ft.chi2 == 0.0, format!("all-tied chi2 {}", ft.chi2));
    c.that(ft.ranks.iter().all(|&r| r == 3.5), "all-tied ranks");
    c.that(ft.df == 5, format!("k = 6 gives df {}", ft.df));

    let cd = analysis::nemenyi_cd(6, 784, Alpha::P05).unwrap();
    let direct = 2.850 * (6.0f64 * 7.0 / (6.0 * 784.0)).sqrt();
    c.that((cd - direct).abs() < 1e-12, format!("CD {cd} vs {direct}"));
    let cd2 = analysis::nemenyi_cd(2, 50, Alpha::P05).unwrap();
    c.that((cd2 - 1.960 / 50f64.sqrt()).abs() < 1e-12, "k = 2 closed form");
    c.that(
        analysis::nemenyi_cd(4, 10_000, Alpha::P05).unwrap() < analysis::nemenyi_cd(4, 100, Alpha::P05).unwrap(),
        "CD decreasing in N",
    );
    c.note(format!(
        "3x4 example chi2 = {:.3} (hand {hand_chi2:.3}); all-tied chi2 = 0; df = {} for k = 6; CD(k=6, N=784, 0.05) = {cd:.4}",
        fr.chi2, ft.df
    ));
}

// ---------------------------------------------------------------------------
// 9. determinism

fn files_equal(a: &Path, b: &Path) -> Result<usize, String> {
    let mut count = 0;
    for entry in walk(a) {
        let rel = entry.strip_prefix(a).unwrap();
        let other = b.join(rel);
        let x = std::fs::read(&entry).map_err(|e| e.to_string())?;
        let y = std::fs::read(&other).map_err(|e| format!("{}: {e}", other.display()))?;
        if x != y {
            return Err(format!("{} differs", rel.display()));
        }
        count += 1;
    }
    Ok(count)
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(c: &mut Check) {
    let mut cfg = Config::desk();
    cfg.train.epochs = 2;
    cfg.train.checkpoint_every = 1;
    cfg.train.n_source = 3;
    cfg.train.n_target = 3;
    cfg.encoder.epochs = 2;
    let spec = TaskSpec {
        n_source: 3,
        n_target: 3,
        n_eval: 2,
        seconds: 1.0,
        noise_clips_per_class: 2,
        parallel_utterances: 4,
        ..TaskSpec::default()
    };
    let once = |dir: &Path| {
        let task = SyntheticTask::build(spec.clone(), 909);
        let enc = scenario::pretrain_encoders(&task, &cfg, 909).unwrap();
        let outcome = pipeline::train_gan(
            &task.source,
            &task.target,
            &enc.noise,
            &enc.channel,
            &cfg,
            909,
            &TrainOutputs {
                checkpoint_dir: Some(dir.join("ckpt")),
                log_path: Some(dir.join("losses.jsonl")),
            },
        )
        .unwrap();
        let pairs = simulate_dataset(
            &outcome.gan.generator,
            &enc.noise,
            &enc.channel,
            &task.source,
            &task.target,
            &cfg.sim,
            scenario::embedding_use(&cfg),
            cfg.log_floor,
            909,
        )
        .unwrap();
        pipeline::write_simulated(&dir.join("sim"), &pairs, cfg.log_floor).unwrap();
        pairs
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = once(a.path());
    let pb = once(b.path());
    c.that(pa == pb, "simulated spectrograms differ");
    match files_equal(a.path(), b.path()) {
        Ok(n) => c.note(format!(
            "{n} files (loss log, checkpoints, simulated WAVs and manifest) byte-identical; {} simulated spectrograms equal",
            pa.len()
        )),
        Err(e) => c.that(false, e),
    }
}

// ---------------------------------------------------------------------------
// 10. ablation harness

fn ablation_harness(c: &mut Check) {
    let cfg = e2e_config();
    let seed = 7;
    let task = SyntheticTask::build(TaskSpec::default(), seed);
    let encoders = scenario::pretrain_encoders(&task, &cfg, seed).unwrap();
    let variants = Variant::parse_list(&Variant::STANDARD, cfg.generator.fusion_strategy).unwrap();
    let rows = analysis::ablation_driver(&variants, &task, &encoders, &cfg, seed).unwrap();
    c.that(rows.len() == variants.len() + 1, format!("{} rows", rows.len()));
    for r in &rows {
        c.that(
            r.lsd.is_finite() && r.final_total_g.is_finite(),
            format!("{} produced non-finite metrics", r.variant),
        );
    }
    if let Some(r) = rows.iter().find(|r| r.variant == "lambda_cc=0") {
        c.that(r.max_cc_contribution == 0.0, "cc contributes under lambda_cc=0");
    }
    let table = analysis::ablation_table(&rows);
    println!("{table}");
    c.note(format!("{} variants plus reference completed", variants.len()));
}
