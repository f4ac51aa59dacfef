use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmil::autodiff::{grad_check, Graph};
use ssmil::config::{Aggregator, ModelConfig};
use ssmil::model::{anchor_attention, decode_checkpoint, encode_checkpoint, train, BagView, ModelParams};
use ssmil::scanning::GridIndex;
use ssmil::synth::Bag;
use ssmil::tensor::Tensor;

/// Bag on a `h × w` grid whose valid cells are given; features ~ U(-1, 1).
fn bag(seed: u64, h: usize, w: usize, valid: Vec<bool>, dim: usize, label: usize) -> Bag {
    let index = GridIndex::new(h, w, valid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = index.len();
    let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Bag {
        id: format!("b{seed}"),
        label,
        features: Tensor::new(vec![n, dim], data).unwrap(),
        instance_labels: vec![label as u8; n],
        index,
    }
}

fn full_bag(seed: u64, h: usize, w: usize, dim: usize, label: usize) -> Bag {
    bag(seed, h, w, vec![true; h * w], dim, label)
}

fn small(cfg: ModelConfig) -> ModelConfig {
    ModelConfig { d_model: 8, state_dim: 4, n_blocks: 2, attn_dim: 4, ..cfg }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn forward_is_deterministic() {
    let cfg = small(ModelConfig { seed: 4, ..ModelConfig::default() });
    let b = full_bag(1, 5, 5, 6, 1);
    let p1 = ModelParams::<f64>::init(&cfg, 6, 2).unwrap();
    let p2 = ModelParams::<f64>::init(&cfg, 6, 2).unwrap();
    assert_eq!(bits(&p1.predict(&b).unwrap().logits), bits(&p2.predict(&b).unwrap().logits));
}

#[test]
fn disabled_additions_match_plain_model() {
    let b = full_bag(2, 7, 7, 5, 0);
    let plain = ModelParams::<f64>::init(&small(ModelConfig { seed: 9, ..ModelConfig::plain() }), 5, 2).unwrap();
    let want = plain.predict(&b).unwrap();
    // Token selection at r = 0 and a zero stripe kernel with residual add nothing.
    let idle = small(ModelConfig { seed: 9, overlap: false, cts_ratio: 0.0, ..ModelConfig::default() });
    let idle = ModelParams::<f64>::init(&idle, 5, 2).unwrap();
    assert!(idle.learner.is_some() && idle.stripe.is_some());
    let got = idle.predict(&b).unwrap();
    assert_eq!(bits(&got.logits), bits(&want.logits));
    assert_eq!(bits(&got.attention), bits(&want.attention));
}

#[test]
fn attention_sums_to_one_over_kept_tokens() {
    let cfg = small(ModelConfig { seed: 1, cts_ratio: 0.3, ..ModelConfig::default() });
    let b = full_bag(3, 5, 5, 4, 1);
    let p = ModelParams::<f64>::init(&cfg, 4, 2).unwrap();
    let pred = p.predict(&b).unwrap();
    assert_eq!(pred.mask.masked(), 8);
    let total: f64 = pred.attention.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    for (w, &k) in pred.attention.iter().zip(&pred.mask.keep) {
        assert!(*w >= 0.0);
        if !k {
            assert_eq!(*w, 0.0);
        }
    }
}

#[test]
fn single_token_gets_all_attention() {
    let cfg = small(ModelConfig { seed: 1, cts: false, ..ModelConfig::default() });
    let b = full_bag(4, 1, 1, 3, 0);
    let p = ModelParams::<f64>::init(&cfg, 3, 2).unwrap();
    assert_eq!(p.predict(&b).unwrap().attention, vec![1.0]);
    // With selection on, a one-token bag would lose its only token.
    let p = ModelParams::<f64>::init(&small(ModelConfig::default()), 3, 2).unwrap();
    assert!(p.predict(&b).is_err());
}

#[test]
fn loss_terms() {
    let cfg = small(ModelConfig { seed: 2, aux_weight: 0.0, ..ModelConfig::default() });
    let mut p = ModelParams::<f64>::init(&cfg, 4, 2).unwrap();
    p.head_w = Tensor::zeros(vec![8, 2]);
    let view = BagView::new(&full_bag(5, 5, 5, 4, 1), true).unwrap();
    let mut g = Graph::new();
    let vars = p.register(&mut g, false);
    let fwd = p.forward(&mut g, &vars, &view).unwrap();
    let loss = p.loss(&mut g, &fwd, 1).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), std::f64::consts::LN_2);
    assert!(p.loss(&mut g, &fwd, 2).is_err());

    p.config.aux_weight = 1.0;
    let mut g = Graph::new();
    let vars = p.register(&mut g, false);
    let fwd = p.forward(&mut g, &vars, &view).unwrap();
    let loss = p.loss(&mut g, &fwd, 1).unwrap();
    let aux = g.cross_entropy(fwd.aux_logits.unwrap(), 1).unwrap();
    let want = std::f64::consts::LN_2 + g.value(aux).item().unwrap();
    assert_eq!(g.value(loss).item().unwrap(), want);
}

#[test]
fn full_model_gradients() {
    // 6 tokens on a 3×3 grid, one block, selection and stripe encoder on.
    for mode in ["scalar", "diag"] {
        let mut cfg = ModelConfig { d_model: 8, state_dim: 4, n_blocks: 1, attn_dim: 4, seed: 3, cts_ratio: 0.3, ..ModelConfig::default() };
        cfg.set("ssm_mode", mode).unwrap();
        let mut valid = vec![true; 9];
        valid[2] = false;
        valid[4] = false;
        valid[6] = false;
        let b = bag(6, 3, 3, valid, 5, 1);
        let view = BagView::new(&b, true).unwrap();
        assert_eq!(view.len(), 6);
        let mut p = ModelParams::<f64>::init(&cfg, 5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        p.stripe.as_mut().unwrap().kernel = Tensor::randn(&mut rng, vec![8, 3], 0.3);
        let tensors: Vec<Tensor<f64>> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            |g, vars| {
                let fwd = p.forward(g, vars, &view)?;
                assert_eq!(fwd.mask.masked(), 2);
                p.loss(g, &fwd, 1)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{mode}: {report:?}");
    }
}

#[test]
fn one_epoch_one_bag_is_one_step() {
    let b = full_bag(7, 3, 3, 4, 1);
    let cfg = small(ModelConfig { epochs: 1, ..ModelConfig::default() });
    let out = train::<f64>(&[&b], &cfg, 2).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.history[0].steps, 1);
    let init = ModelParams::<f64>::init(&cfg, 4, 2).unwrap();
    assert_ne!(init, out.params);
}

#[test]
fn separable_toy_loss_decreases() {
    // Label 1 bags have a shifted first feature on every token.
    let bags: Vec<Bag> = (0..10)
        .map(|i| {
            let mut b = full_bag(100 + i, 3, 3, 4, (i % 2) as usize);
            if b.label == 1 {
                for t in 0..b.len() {
                    b.features.data_mut()[t * 4] += 2.0;
                }
            }
            b
        })
        .collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    for seed in 0..3 {
        let cfg = small(ModelConfig { epochs: 30, seed, ..ModelConfig::default() });
        let out = train::<f64>(&refs, &cfg, 2).unwrap();
        let (first, last) = (out.history[0].mean_loss, out.history[29].mean_loss);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn weight_decay_changes_result() {
    let b = full_bag(8, 3, 3, 4, 0);
    let a = train::<f64>(&[&b], &small(ModelConfig { epochs: 2, weight_decay: 0.0, ..ModelConfig::default() }), 2).unwrap();
    let c = train::<f64>(&[&b], &small(ModelConfig { epochs: 2, weight_decay: 1e-5, ..ModelConfig::default() }), 2).unwrap();
    assert_ne!(a.params.embed_w, c.params.embed_w);
}

fn baseline(kind: Aggregator) -> ModelParams<f64> {
    ModelParams::init(&small(ModelConfig { aggregator: kind, seed: 5, overlap: true, ..ModelConfig::plain() }), 4, 3).unwrap()
}

#[test]
fn baselines_on_degenerate_bags() {
    let mut same = full_bag(9, 3, 3, 4, 0);
    let row: Vec<f64> = same.features.row(0).to_vec();
    for t in 0..same.len() {
        same.features.data_mut()[t * 4..(t + 1) * 4].copy_from_slice(&row);
    }
    let mean = baseline(Aggregator::Mean).predict(&same).unwrap().logits;
    let max = baseline(Aggregator::Max).predict(&same).unwrap().logits;
    for (a, b) in mean.iter().zip(&max) {
        assert!((a - b).abs() < 1e-12);
    }
    let single = full_bag(10, 1, 1, 4, 0);
    let outs: Vec<Vec<f64>> = [Aggregator::Mean, Aggregator::Max, Aggregator::Attention]
        .iter()
        .map(|&k| baseline(k).predict(&single).unwrap().logits)
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn mean_pooling_matches_direct_average() {
    let b = full_bag(11, 4, 5, 4, 2);
    let p = baseline(Aggregator::Mean);
    let got = p.predict(&b).unwrap().logits;
    let h = b.features.matmul(&p.embed_w).unwrap().add_row(&p.embed_b).unwrap();
    let (n, d) = h.dims2().unwrap();
    let avg: Vec<f64> = (0..d).map(|j| (0..n).map(|i| h.row(i)[j]).sum::<f64>() / n as f64).collect();
    for c in 0..3 {
        let want = (0..d).map(|j| avg[j] * p.head_w.row(j)[c]).sum::<f64>() + p.head_b.data()[c];
        assert!((got[c] - want).abs() < 1e-12);
    }
}

#[test]
fn overlap_off_reads_coarse_tokens() {
    let b = full_bag(12, 5, 7, 3, 0);
    let view = BagView::<f64>::new(&b, false).unwrap();
    assert_eq!((view.height, view.width, view.len()), (3, 4, 12));
    assert_eq!(view.features.row(1), b.features.row(2));
}

#[test]
fn exempting_every_channel() {
    let cfg = small(ModelConfig { local_channels: 8, ..ModelConfig::default() });
    let p = ModelParams::<f64>::init(&cfg, 4, 2).unwrap();
    let pred = p.predict(&full_bag(13, 5, 5, 4, 1)).unwrap();
    assert_eq!(pred.mask.channel_exempt, vec![true; 8]);
    let none = ModelParams::<f64>::init(&small(ModelConfig::default()), 4, 2).unwrap();
    assert_eq!(none.predict(&full_bag(13, 5, 5, 4, 1)).unwrap().mask.channel_exempt, vec![false; 8]);
}

#[test]
fn checkpoint_preserves_predictions() {
    let b = full_bag(14, 5, 5, 4, 1);
    let out = train::<f64>(&[&b], &small(ModelConfig { epochs: 2, ..ModelConfig::default() }), 2).unwrap();
    let back = decode_checkpoint::<f64>(&encode_checkpoint(&out.params).unwrap()).unwrap();
    assert_eq!(bits(&back.predict(&b).unwrap().logits), bits(&out.params.predict(&b).unwrap().logits));
}

#[test]
fn anchor_attention_matches_direct_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let f = Tensor::<f64>::randn(&mut rng, vec![10, 6], 1.0);
    let s = anchor_attention(&f, 3).unwrap();
    for i in 0..10 {
        let (a, b) = (f.row(3), f.row(i));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((s[i] - dot / (na * nb)).abs() < 1e-12);
    }
    assert!(anchor_attention(&f, 10).is_err());
}
