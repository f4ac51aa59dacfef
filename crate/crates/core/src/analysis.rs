//! Diagnostics written as CSV: memory-decay curves, per-channel locality
//! rankings and anchor-similarity maps.

use crate::cts::top_k_channels;
use crate::error::{ensure, Result};
use crate::model::{anchor_attention, BagView, ModelParams};
use crate::scalar::Scalar;
use crate::ssm::{locality_scores, selective_scan, Discretization, Projections, ScanDims, ScanInputs, SsmMode};
use crate::synth::Bag;

/// Decay-factor summary at one token distance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayRow {
    pub distance: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Timescales and rates of one layer over one sequence.
#[derive(Clone, Debug)]
pub struct DecayInputs<'a, T> {
    pub dims: ScanDims,
    /// `[len × groups]`
    pub delta: &'a [T],
    pub a: &'a [T],
    pub keep: Option<&'a [bool]>,
    pub exempt: Option<&'a [bool]>,
}

/// How much of token 0's state survives at every later token.
///
/// Measured by driving the scan with a unit impulse at token 0 and dividing
/// each later state by the state right after the impulse. Token 0 always
/// enters the state; dropped later tokens follow the usual passthrough rule.
/// Scalar mode reports one factor per channel, diagonal mode one per
/// (channel, state) pair.
pub fn decay_curve<T: Scalar>(inp: &DecayInputs<'_, T>) -> Result<Vec<DecayRow>> {
    let d = inp.dims;
    ensure!(d.len >= 1, "decay analysis over an empty sequence");
    let mut u = vec![T::zero(); d.len * d.channels];
    u[..d.channels].fill(T::one());
    let ones = vec![T::one(); d.len * d.state_dim];
    let keep = inp.keep.map(|k| {
        let mut k = k.to_vec();
        if let Some(first) = k.first_mut() {
            *first = true;
        }
        k
    });
    let trace = selective_scan(&ScanInputs {
        dims: d,
        method: Discretization::Euler,
        u: &u,
        delta: inp.delta,
        a: inp.a,
        b: &ones,
        c: &ones,
        keep: keep.as_deref(),
        exempt: inp.exempt,
    })?;
    let per_channel = matches!(d.mode, SsmMode::Scalar { .. });
    let width = if per_channel { 1 } else { d.state_dim };
    let mut rows = Vec::with_capacity(d.len);
    for m in 0..d.len {
        let mut factors = Vec::with_capacity(d.channels * width);
        for c in 0..d.channels {
            let (h0, hm) = (trace.state(1, c), trace.state(m + 1, c));
            for n in 0..width {
                factors.push((hm[n] / h0[n]).as_f64());
            }
        }
        let min = factors.iter().copied().fold(f64::INFINITY, f64::min);
        let max = factors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = factors.iter().sum::<f64>() / factors.len() as f64;
        rows.push(DecayRow { distance: m, min, mean, max });
    }
    Ok(rows)
}

pub fn decay_csv(rows: &[DecayRow]) -> String {
    let mut s = String::from("distance,min,mean,max\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.distance, r.min, r.mean, r.max));
    }
    s
}

/// Scan coefficients of every block, unmasked, plus the model's token mask.
fn block_projections<T: Scalar>(params: &ModelParams<T>, bag: &Bag) -> Result<(Vec<Projections<T>>, Vec<bool>)> {
    ensure!(!params.blocks.is_empty(), "model has no selective-scan block");
    let view = BagView::new(bag, params.config.overlap)?;
    let (g, fwd) = params.inspect(&view)?;
    let proj = params
        .blocks
        .iter()
        .zip(&fwd.block_inputs)
        .map(|(b, &z)| b.ssm.project(g.value(z)))
        .collect::<Result<Vec<_>>>()?;
    Ok((proj, fwd.mask.keep))
}

/// Decay curve of the first block of a trained model on one bag, with the
/// model's own token mask when `cts` is set.
pub fn model_decay<T: Scalar>(params: &ModelParams<T>, bag: &Bag, cts: bool) -> Result<Vec<DecayRow>> {
    let (mut blocks, keep) = block_projections(params, bag)?;
    let proj = blocks.swap_remove(0);
    let masking = cts && params.learner.is_some();
    let exempt = if masking && params.config.local_channels > 0 {
        let scores = locality_scores(&proj.inputs(params.blocks[0].ssm.method, None, None))?;
        let mut ex = vec![false; proj.dims.channels];
        for c in top_k_channels(&scores, params.config.local_channels)? {
            ex[c] = true;
        }
        Some(ex)
    } else {
        None
    };
    decay_curve(&DecayInputs {
        dims: proj.dims,
        delta: &proj.delta,
        a: &proj.a,
        keep: masking.then_some(keep.as_slice()),
        exempt: exempt.as_deref(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalityRow {
    pub block: usize,
    pub channel: usize,
    pub alpha: f64,
    /// 1-based; ties go to the lower channel index.
    pub rank: usize,
    /// Membership in the top-K set for each requested K.
    pub top_k: Vec<bool>,
}

/// Per-channel locality averaged over `bags`, for every block.
pub fn analyze_locality<T: Scalar>(params: &ModelParams<T>, bags: &[&Bag], ks: &[usize]) -> Result<Vec<LocalityRow>> {
    ensure!(!bags.is_empty(), "locality analysis needs at least one bag");
    let d = params.config.d_model;
    ensure!(ks.iter().all(|&k| k <= d), "K values must not exceed {d} channels");
    let mut rows = Vec::new();
    let mut sums = vec![vec![0.0; d]; params.blocks.len()];
    for bag in bags {
        let (blocks, _) = block_projections(params, bag)?;
        for ((sum, proj), block) in sums.iter_mut().zip(&blocks).zip(&params.blocks) {
            let scores = locality_scores(&proj.inputs(block.ssm.method, None, None))?;
            for (s, v) in sum.iter_mut().zip(&scores) {
                *s += v.as_f64();
            }
        }
    }
    for (bi, sum) in sums.iter().enumerate() {
        let alpha: Vec<f64> = sum.iter().map(|s| s / bags.len() as f64).collect();
        let order = top_k_channels(&alpha, d)?;
        let mut rank = vec![0; d];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r + 1;
        }
        for c in 0..d {
            rows.push(LocalityRow {
                block: bi,
                channel: c,
                alpha: alpha[c],
                rank: rank[c],
                top_k: ks.iter().map(|&k| rank[c] <= k).collect(),
            });
        }
    }
    Ok(rows)
}

pub fn locality_csv(rows: &[LocalityRow], ks: &[usize]) -> String {
    let mut s = String::from("block,channel,alpha,rank");
    for k in ks {
        s.push_str(&format!(",top_{k}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}", r.block, r.channel, r.alpha, r.rank));
        for &m in &r.top_k {
            s.push_str(if m { ",1" } else { ",0" });
        }
        s.push('\n');
    }
    s
}

/// Positive token nearest the centroid of all positive tokens.
pub fn positive_anchor(bag: &Bag) -> Option<usize> {
    let pos: Vec<usize> = (0..bag.len()).filter(|&t| bag.instance_labels[t] != 0).collect();
    if pos.is_empty() {
        return None;
    }
    let coords = bag.index.coords();
    let n = pos.len() as f64;
    let cr = pos.iter().map(|&t| coords[t].0 as f64).sum::<f64>() / n;
    let cc = pos.iter().map(|&t| coords[t].1 as f64).sum::<f64>() / n;
    let dist = |t: usize| (coords[t].0 as f64 - cr).powi(2) + (coords[t].1 as f64 - cc).powi(2);
    pos.into_iter().min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorRow {
    pub token: usize,
    pub row: usize,
    pub col: usize,
    /// Euclidean distance to the anchor in coarse-cell units (half the
    /// fine-grid offset).
    pub distance: f64,
    pub score: f64,
}

/// Cosine similarity of every token's raw features to the anchor token.
pub fn analyze_anchor(bag: &Bag, anchor: usize) -> Result<Vec<AnchorRow>> {
    let scores = anchor_attention(&bag.features, anchor)?;
    let coords = bag.index.coords();
    let (ar, ac) = coords[anchor];
    Ok(coords
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(token, (&(row, col), score))| {
            let dr = (row as f64 - ar as f64) / 2.0;
            let dc = (col as f64 - ac as f64) / 2.0;
            AnchorRow { token, row, col, distance: (dr * dr + dc * dc).sqrt(), score }
        })
        .collect())
}

pub fn anchor_csv(rows: &[AnchorRow]) -> String {
    let mut s = String::from("token,row,col,distance,score\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.token, r.row, r.col, r.distance, r.score));
    }
    s
}

/// Mean score within `near` and beyond `far` of the anchor.
pub fn anchor_contrast(rows: &[AnchorRow], near: f64, far: f64) -> (Option<f64>, Option<f64>) {
    let mean = |pick: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = rows.iter().filter(|r| pick(r.distance)).map(|r| r.score).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(&|d| d <= near), mean(&|d| d > far))
}
