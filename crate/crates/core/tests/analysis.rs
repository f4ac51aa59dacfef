use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmil::analysis::{
    analyze_anchor, analyze_locality, anchor_contrast, decay_curve, locality_csv, model_decay, positive_anchor, DecayInputs,
};
use ssmil::config::ModelConfig;
use ssmil::model::ModelParams;
use ssmil::ssm::{ScanDims, SsmMode};
use ssmil::synth::{generate_dataset, BagSpec};

fn dims(len: usize, channels: usize, state_dim: usize, mode: SsmMode) -> ScanDims {
    ScanDims { len, channels, state_dim, mode }
}

#[test]
fn constant_timescale_closed_form() {
    let (a, delta) = (-0.7, 0.013);
    let d = dims(513, 2, 3, SsmMode::Scalar { heads: 1 });
    let deltas = vec![delta; 513];
    let rows = decay_curve(&DecayInputs { dims: d, delta: &deltas, a: &[a], keep: None, exempt: None }).unwrap();
    assert_eq!(rows[0].min, 1.0);
    for r in &rows {
        let want = (a * r.distance as f64 * delta).exp();
        assert!((r.mean - want).abs() < 1e-9 && (r.min - want).abs() < 1e-9 && (r.max - want).abs() < 1e-9);
    }
    assert!(rows.windows(2).all(|w| w[1].mean < w[0].mean));
}

#[test]
fn diagonal_mode_spans_all_rates() {
    let d = dims(10, 1, 2, SsmMode::Diag);
    let deltas = vec![0.1; 10];
    let rows = decay_curve(&DecayInputs { dims: d, delta: &deltas, a: &[-1.0, -2.0], keep: None, exempt: None }).unwrap();
    assert!((rows[4].max - (-0.4f64).exp()).abs() < 1e-12);
    assert!((rows[4].min - (-0.8f64).exp()).abs() < 1e-12);
}

#[test]
fn everything_after_first_masked_keeps_factor_one() {
    let d = dims(20, 3, 2, SsmMode::Scalar { heads: 1 });
    let deltas = vec![0.2; 20];
    let mut keep = vec![false; 20];
    keep[0] = true;
    let rows = decay_curve(&DecayInputs { dims: d, delta: &deltas, a: &[-1.5], keep: Some(&keep), exempt: None }).unwrap();
    assert!(rows.iter().all(|r| r.min == 1.0 && r.max == 1.0));
    // An exempt channel keeps decaying.
    let exempt = [true, false, false];
    let rows = decay_curve(&DecayInputs { dims: d, delta: &deltas, a: &[-1.5], keep: Some(&keep), exempt: Some(&exempt) }).unwrap();
    assert!(rows[19].min < 1e-2 && rows[19].max == 1.0);
}

#[test]
fn masking_extends_memory_by_skipped_timescales() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100;
    let a = -0.9;
    let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.1)).collect();
    let keep: Vec<bool> = (0..n).map(|t| t == 0 || rng.random_bool(0.7)).collect();
    let d = dims(n, 1, 1, SsmMode::Scalar { heads: 1 });
    let off = decay_curve(&DecayInputs { dims: d, delta: &deltas, a: &[a], keep: None, exempt: None }).unwrap();
    let on = decay_curve(&DecayInputs { dims: d, delta: &deltas, a: &[a], keep: Some(&keep), exempt: None }).unwrap();
    let skipped: f64 = (1..n).filter(|&t| !keep[t]).map(|t| deltas[t]).sum();
    let ratio = on[n - 1].mean / off[n - 1].mean;
    assert!((ratio - (a.abs() * skipped).exp()).abs() < 1e-9);
}

#[test]
fn model_curves_do_not_increase_without_masking() {
    let spec = BagSpec { height: 5, width: 5, dim: 6, ..BagSpec::default() };
    let ds = generate_dataset(&spec, 1, 3, 0.0).unwrap();
    let cfg = ModelConfig { d_model: 8, state_dim: 4, attn_dim: 4, ..ModelConfig::default() };
    let p = ModelParams::<f64>::init(&cfg, 6, 2).unwrap();
    let rows = model_decay(&p, &ds.bags[1], false).unwrap();
    assert_eq!(rows[0].mean, 1.0);
    assert!(rows.windows(2).all(|w| w[1].max <= w[0].max && w[1].min <= w[0].min));
    let masked = model_decay(&p, &ds.bags[1], true).unwrap();
    let last = rows.len() - 1;
    assert!(masked[last].mean > rows[last].mean);
}

#[test]
fn locality_rankings() {
    let spec = BagSpec { height: 4, width: 4, dim: 5, ..BagSpec::default() };
    let ds = generate_dataset(&spec, 2, 1, 0.0).unwrap();
    let bags: Vec<_> = ds.bags.iter().collect();
    let cfg = ModelConfig { d_model: 6, state_dim: 3, attn_dim: 4, ssm_mode: SsmMode::Diag, ..ModelConfig::default() };
    let p = ModelParams::<f64>::init(&cfg, 5, 2).unwrap();
    let ks = [0, 2, 6];
    let rows = analyze_locality(&p, &bags, &ks).unwrap();
    assert_eq!(rows.len(), 12);
    for block in 0..2 {
        let rs: Vec<_> = rows.iter().filter(|r| r.block == block).collect();
        assert!(rs.iter().all(|r| !r.top_k[0] && r.top_k[2]));
        assert_eq!(rs.iter().filter(|r| r.top_k[1]).count(), 2);
        // Independent re-sort of the alpha column.
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&i, &j| rs[j].alpha.partial_cmp(&rs[i].alpha).unwrap().then(i.cmp(&j)));
        for (pos, &c) in order.iter().enumerate() {
            assert_eq!(rs[c].rank, pos + 1);
        }
    }
    let csv = locality_csv(&rows, &ks);
    assert!(csv.starts_with("block,channel,alpha,rank,top_0,top_2,top_6\n"));
    assert_eq!(csv, locality_csv(&analyze_locality(&p, &bags, &ks).unwrap(), &ks));
}

#[test]
fn anchor_map_is_local_on_positive_bag() {
    let ds = generate_dataset(&BagSpec::default(), 1, 5, 0.0).unwrap();
    let pos = &ds.bags[1];
    let anchor = positive_anchor(pos).unwrap();
    assert_ne!(pos.instance_labels[anchor], 0);
    let rows = analyze_anchor(pos, anchor).unwrap();
    assert_eq!(rows[anchor].score, 1.0);
    assert_eq!(rows[anchor].distance, 0.0);
    let (near, far) = anchor_contrast(&rows, 2.0, 6.0);
    assert!(near.unwrap() > far.unwrap());
    assert!(positive_anchor(&ds.bags[0]).is_none());
}
