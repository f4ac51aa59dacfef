//! Entropy-ranked token selection.
//!
//! A per-token linear classifier (the instance learner) scores every token;
//! the tokens whose class distribution is most uncertain are dropped from the
//! state update of the scan.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bag-level pooling of the learner's token logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(crate::Error::Config(format!("unknown pooling `{other}` (expected mean or max)"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLearner<T> {
    /// `[d_in × k]`
    pub weight: Tensor<T>,
    /// `[k]`
    pub bias: Tensor<T>,
    pub pooling: Pooling,
}

impl<T: Scalar> InstanceLearner<T> {
    pub fn init<R: Rng>(d_in: usize, classes: usize, pooling: Pooling, rng: &mut R) -> Self {
        InstanceLearner {
            weight: Tensor::randn(rng, vec![d_in, classes], (1.0 / d_in as f64).sqrt()),
            bias: Tensor::zeros(vec![classes]),
            pooling,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }
}

/// Per-token logits `x W + b`.
pub fn instance_logits<T: Scalar>(features: &Tensor<T>, learner: &InstanceLearner<T>) -> Result<Tensor<T>> {
    let (_, d) = features.dims2()?;
    let (wd, k) = learner.weight.dims2()?;
    ensure!(d == wd, "instance learner expects {wd} features, got {d}");
    ensure!(learner.bias.shape() == [k], "instance learner bias {:?} for {k} classes", learner.bias.shape());
    features.matmul(&learner.weight)?.add_row(&learner.bias)
}

/// Softmax entropy of each logit row, in nats.
pub fn token_entropy<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<T>> {
    let (n, k) = logits.dims2()?;
    ensure!(k >= 2, "entropy needs at least two classes, got {k}");
    Ok((0..n)
        .map(|i| {
            let row = logits.row(i);
            let arg = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            let top = row[arg];
            let rest: T = (0..k).filter(|&c| c != arg).map(|c| (row[c] - top).exp()).sum();
            let log_z = rest.ln_1p();
            let h = row
                .iter()
                .map(|&v| {
                    let log_p = v - top - log_z;
                    -log_p.exp() * log_p
                })
                .sum::<T>();
            h.max(T::zero())
        })
        .collect())
}

/// `⌈r·N⌉`, reading `r·N` within a few ulps of an integer as that integer so
/// decimal ratios such as `0.3·10` count exactly.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Entropy threshold and the selected (to be masked) token indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection<T> {
    /// Smallest selected entropy; `+∞` when nothing is selected.
    pub alpha: T,
    /// Selected indices in selection order (highest entropy first).
    pub selected: Vec<usize>,
}

/// Selects exactly `⌈r·N⌉` tokens of highest entropy, ties going to the
/// higher index.
pub fn percentile_threshold<T: Scalar>(entropies: &[T], ratio: f64) -> Result<Selection<T>> {
    ensure!((0.0..1.0).contains(&ratio), "mask ratio must lie in [0, 1), got {ratio}");
    ensure!(!entropies.is_empty(), "entropy threshold over an empty sequence");
    ensure!(entropies.iter().all(|e| !e.is_nan()), "entropy vector contains NaN");
    let m = masked_count(ratio, entropies.len());
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&i, &j| entropies[j].partial_cmp(&entropies[i]).unwrap_or(Ordering::Equal).then(j.cmp(&i)));
    order.truncate(m);
    let alpha = order.last().map_or(T::infinity(), |&i| entropies[i]);
    Ok(Selection { alpha, selected: order })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask<T> {
    /// `false` marks a dropped token.
    pub keep: Vec<bool>,
    pub threshold: T,
    pub ratio: f64,
    /// Channels whose state keeps updating on dropped tokens.
    pub channel_exempt: Vec<bool>,
}

impl<T: Scalar> TokenMask<T> {
    /// Nothing masked, nothing exempt.
    pub fn none(n: usize, channels: usize) -> Self {
        TokenMask { keep: vec![true; n], threshold: T::infinity(), ratio: 0.0, channel_exempt: vec![false; channels] }
    }

    pub fn masked(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn top_k_channels<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    ensure!(k <= scores.len(), "cannot exempt {k} of {} channels", scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    order.truncate(k);
    Ok(order)
}

/// Mask from a selection; `locality` (one score per channel) picks the `k`
/// exempt channels.
pub fn build_mask<T: Scalar>(n: usize, selection: &Selection<T>, ratio: f64, locality: &[T], k: usize) -> Result<TokenMask<T>> {
    let mut keep = vec![true; n];
    for &i in &selection.selected {
        ensure!(i < n, "selected token {i} outside 0..{n}");
        keep[i] = false;
    }
    let mut channel_exempt = vec![false; locality.len()];
    for c in top_k_channels(locality, k)? {
        channel_exempt[c] = true;
    }
    Ok(TokenMask { keep, threshold: selection.alpha, ratio, channel_exempt })
}
