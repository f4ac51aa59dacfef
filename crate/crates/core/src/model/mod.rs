//! Bag classifier: embedding, token selection, stripe encoding, selective
//! scan blocks, attention pooling and the bag head.

mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use train::{evaluate, predict_all, train, EpochRecord, TrainOutcome};

use crate::autodiff::{Graph, Var};
use crate::config::{Aggregator, ModelConfig};
use crate::cts::{build_mask, percentile_threshold, token_entropy, top_k_channels, InstanceLearner, Pooling, TokenMask};
use crate::error::{contract, ensure, Result};
use crate::s2pe::{s2pe_graph, StripeEncoderParams};
use crate::scalar::Scalar;
use crate::scanning::coarse_subset;
use crate::ssm::{locality_scores, ScanDims, ScanInputs, SsmParams};
use crate::synth::Bag;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    /// Pre-scan RMS gain, `[d_model]`.
    pub norm: Tensor<T>,
    pub ssm: SsmParams<T>,
}

/// Gated attention pooling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub v: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub u: Tensor<T>,
    pub u_bias: Tensor<T>,
    /// `[attn_dim × 1]`
    pub w: Tensor<T>,
}

/// Every trainable tensor of one model, plus the configuration it was
/// built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub d_in: usize,
    pub classes: usize,
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub learner: Option<InstanceLearner<T>>,
    pub stripe: Option<StripeEncoderParams<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Option<Tensor<T>>,
    pub attention: Option<AttentionParams<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

// Each component draws from its own ChaCha stream so that enabling or
// disabling one part never shifts the initial values of another.
const STREAM_EMBED: u64 = 1;
const STREAM_BLOCKS: u64 = 2;
const STREAM_ATTENTION: u64 = 3;
const STREAM_HEAD: u64 = 4;
const STREAM_LEARNER: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, d_in: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        ensure!(d_in >= 1, "input feature dim must be positive");
        ensure!(classes >= 2, "need at least two classes, got {classes}");
        let d = config.d_model;
        let seed = config.seed;
        let mut rng = stream(seed, STREAM_EMBED);
        let embed_w = Tensor::randn(&mut rng, vec![d_in, d], (1.0 / d_in as f64).sqrt());
        let ssm_agg = config.aggregator == Aggregator::Ssm;
        let mut rng = stream(seed, STREAM_BLOCKS);
        let mut blocks = Vec::new();
        if ssm_agg {
            for _ in 0..config.n_blocks {
                blocks.push(BlockParams {
                    norm: Tensor::full(vec![d], T::one()),
                    ssm: SsmParams::init(config.ssm_mode, config.discretization, d, config.state_dim, &mut rng)?,
                });
            }
        }
        let attention = matches!(config.aggregator, Aggregator::Ssm | Aggregator::Attention).then(|| {
            let mut rng = stream(seed, STREAM_ATTENTION);
            let a = config.attn_dim;
            let s = (1.0 / d as f64).sqrt();
            AttentionParams {
                v: Tensor::randn(&mut rng, vec![d, a], s),
                v_bias: Tensor::zeros(vec![a]),
                u: Tensor::randn(&mut rng, vec![d, a], s),
                u_bias: Tensor::zeros(vec![a]),
                w: Tensor::randn(&mut rng, vec![a, 1], (1.0 / a as f64).sqrt()),
            }
        });
        let mut rng = stream(seed, STREAM_HEAD);
        let head_w = Tensor::randn(&mut rng, vec![d, classes], (1.0 / d as f64).sqrt());
        let learner = (ssm_agg && config.cts).then(|| {
            let mut rng = stream(seed, STREAM_LEARNER);
            InstanceLearner::init(d_in, classes, config.aux_pooling, &mut rng)
        });
        let stripe = if ssm_agg && config.s2pe {
            Some(StripeEncoderParams::zeros(d, config.s2pe_kernel, config.s2pe_dilation, config.s2pe_residual)?)
        } else {
            None
        };
        Ok(ModelParams {
            config: config.clone(),
            d_in,
            classes,
            embed_w,
            embed_b: Tensor::zeros(vec![d]),
            learner,
            stripe,
            blocks,
            final_norm: ssm_agg.then(|| Tensor::full(vec![d], T::one())),
            attention,
            head_w,
            head_b: Tensor::zeros(vec![classes]),
        })
    }

    /// Named tensors in a fixed order; the checkpoint and the optimizer both
    /// walk this list.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("embed.weight".into(), &self.embed_w), ("embed.bias".into(), &self.embed_b)];
        if let Some(l) = &self.learner {
            out.push(("learner.weight".into(), &l.weight));
            out.push(("learner.bias".into(), &l.bias));
        }
        if let Some(s) = &self.stripe {
            out.push(("stripe.kernel".into(), &s.kernel));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let s = &b.ssm;
            for (name, t) in [
                ("norm", &b.norm),
                ("a_log", &s.a_log),
                ("in_proj", &s.in_proj),
                ("delta_proj", &s.delta_proj),
                ("delta_bias", &s.delta_bias),
                ("b_proj", &s.b_proj),
                ("c_proj", &s.c_proj),
                ("out_proj", &s.out_proj),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        if let Some(n) = &self.final_norm {
            out.push(("final_norm".into(), n));
        }
        if let Some(a) = &self.attention {
            for (name, t) in [("v", &a.v), ("v_bias", &a.v_bias), ("u", &a.u), ("u_bias", &a.u_bias), ("w", &a.w)] {
                out.push((format!("attention.{name}"), t));
            }
        }
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    /// Mutable tensors in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.embed_w, &mut self.embed_b];
        if let Some(l) = &mut self.learner {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(s) = &mut self.stripe {
            out.push(&mut s.kernel);
        }
        for b in &mut self.blocks {
            let s = &mut b.ssm;
            out.extend([
                &mut b.norm,
                &mut s.a_log,
                &mut s.in_proj,
                &mut s.delta_proj,
                &mut s.delta_bias,
                &mut s.b_proj,
                &mut s.c_proj,
                &mut s.out_proj,
            ]);
        }
        if let Some(n) = &mut self.final_norm {
            out.push(n);
        }
        if let Some(a) = &mut self.attention {
            out.extend([&mut a.v, &mut a.v_bias, &mut a.u, &mut a.u_bias, &mut a.w]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every tensor on `g`, tracked when `track` is set.
    pub fn register(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.named()
            .into_iter()
            .map(|(_, t)| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Tokens the model actually reads from a bag, on the grid they occupy.
#[derive(Clone, Debug)]
pub struct BagView<T> {
    /// `[N × d_in]`
    pub features: Tensor<T>,
    pub coords: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> BagView<T> {
    /// Overlapping tokens as stored, or only those centred on a coarse cell.
    pub fn new(bag: &Bag, overlap: bool) -> Result<Self> {
        ensure!(!bag.is_empty(), "bag {} is empty", bag.id);
        if overlap {
            return Ok(BagView {
                features: bag.features.cast(),
                coords: bag.index.coords().to_vec(),
                height: bag.index.height(),
                width: bag.index.width(),
            });
        }
        let (picks, coarse) = coarse_subset(&bag.index)?;
        ensure!(!picks.is_empty(), "bag {} has no coarse-aligned token", bag.id);
        let d = bag.dim();
        let mut data = Vec::with_capacity(picks.len() * d);
        for &t in &picks {
            data.extend(bag.features.row(t).iter().map(|&v| T::lit(v)));
        }
        Ok(BagView {
            features: Tensor::new(vec![picks.len(), d], data)?,
            coords: coarse.coords().to_vec(),
            height: coarse.height(),
            width: coarse.width(),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Graph handles and values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// `[classes]`
    pub logits: Var,
    /// Instance-learner bag logits, when token selection is active.
    pub aux_logits: Option<Var>,
    /// One weight per token; masked tokens get 0. Empty for mean/max pooling.
    pub attention: Vec<T>,
    pub mask: TokenMask<T>,
    /// Normalized input of each selective-scan block, `[N × d_model]`.
    pub block_inputs: Vec<Var>,
}

/// Plain-value outcome of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction<T> {
    pub logits: Vec<T>,
    pub aux_logits: Option<Vec<T>>,
    pub attention: Vec<T>,
    pub mask: TokenMask<T>,
}

impl<T: Scalar> BagPrediction<T> {
    pub fn probabilities(&self) -> Vec<f64> {
        let z: Vec<f64> = self.logits.iter().map(|v| v.as_f64()).collect();
        let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = e.iter().sum();
        e.iter().map(|v| v / total).collect()
    }

    /// Argmax class, lowest index on ties.
    pub fn class(&self) -> usize {
        (0..self.logits.len()).fold(0, |b, c| if self.logits[c] > self.logits[b] { c } else { b })
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

fn gated_attention<T: Scalar>(g: &mut Graph<T>, h: Var, vars: [Var; 5]) -> Result<(Var, Vec<T>)> {
    let [v, vb, u, ub, w] = vars;
    let n = g.shape(h)[0];
    let tv = g.matmul(h, v)?;
    let tv = g.add_row(tv, vb)?;
    let tv = g.tanh(tv);
    let su = g.matmul(h, u)?;
    let su = g.add_row(su, ub)?;
    let su = g.sigmoid(su);
    let gate = g.mul(tv, su)?;
    let score = g.matmul(gate, w)?;
    let score = g.reshape(score, vec![n])?;
    let alpha = g.softmax(score, 0)?;
    let weights = g.value(alpha).data().to_vec();
    let alpha = g.reshape(alpha, vec![1, n])?;
    Ok((g.matmul(alpha, h)?, weights))
}

impl<T: Scalar> ModelParams<T> {
    /// Token mask from the instance learner's entropies (all-keep when
    /// selection is off). Returns the mask and the learner's logits.
    fn select_tokens(&self, g: &mut Graph<T>, x: Var, learner: Option<(Var, Var)>, n: usize) -> Result<(TokenMask<T>, Option<Var>)> {
        let d = self.config.d_model;
        let Some((lw, lb)) = learner else {
            return Ok((TokenMask::none(n, d), None));
        };
        let logits = g.matmul(x, lw)?;
        let logits = g.add_row(logits, lb)?;
        let entropies = token_entropy(g.value(logits))?;
        let ratio = self.config.cts_ratio;
        let selection = percentile_threshold(&entropies, ratio)?;
        ensure!(selection.selected.len() < n, "token selection would mask all {n} tokens");
        let mask = build_mask(n, &selection, ratio, &vec![T::zero(); d], 0)?;
        Ok((mask, Some(logits)))
    }

    /// Runs the model on `view`; `vars` comes from [`ModelParams::register`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], view: &BagView<T>) -> Result<Forward<T>> {
        let cfg = &self.config;
        let (n, d_in) = view.features.dims2()?;
        ensure!(n >= 1, "forward on an empty bag");
        ensure!(d_in == self.d_in, "bag has {d_in} features, model expects {}", self.d_in);
        ensure!(vars.len() == self.named().len(), "expected {} parameter handles, got {}", self.named().len(), vars.len());
        let mut cur = Cursor { vars, next: 0 };
        let (ew, eb) = (cur.take(), cur.take());
        let learner_vars = self.learner.as_ref().map(|_| (cur.take(), cur.take()));
        let stripe_var = self.stripe.as_ref().map(|_| cur.take());

        let x = g.constant(view.features.clone());
        let (mut mask, learner_logits) = self.select_tokens(g, x, learner_vars, n)?;
        let aux_logits = match (learner_logits, self.learner.as_ref().map(|l| l.pooling)) {
            (Some(l), Some(Pooling::Mean)) => Some(g.mean(l, 0)?),
            (Some(l), Some(Pooling::Max)) => Some(g.max(l, 0)?),
            _ => None,
        };

        let h = g.matmul(x, ew)?;
        let mut h = g.add_row(h, eb)?;
        if let (Some(kernel), Some(stripe)) = (stripe_var, &self.stripe) {
            h = s2pe_graph(g, h, kernel, &view.coords, view.height, view.width, &mask.keep, stripe.dilation, stripe.residual)?;
        }

        let masking = self.learner.is_some();
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let [norm, a_log, in_proj, delta_proj, delta_bias, b_proj, c_proj, out_proj] = std::array::from_fn(|_| cur.take());
            let z = g.rms_norm(h, norm)?;
            block_inputs.push(z);
            let u = g.matmul(z, in_proj)?;
            let dl = g.matmul(z, delta_proj)?;
            let dl = g.add_row(dl, delta_bias)?;
            let delta = g.softplus(dl);
            let a = g.exp(a_log);
            let a = g.neg(a);
            let a_len = g.value(a).numel();
            let a = g.reshape(a, vec![a_len])?;
            let b = g.matmul(z, b_proj)?;
            let c = g.matmul(z, c_proj)?;
            let exempt = if masking && cfg.local_channels > 0 {
                let inputs = ScanInputs {
                    dims: ScanDims { len: n, channels: cfg.d_model, state_dim: cfg.state_dim, mode: block.ssm.mode },
                    method: block.ssm.method,
                    u: g.value(u).data(),
                    delta: g.value(delta).data(),
                    a: g.value(a).data(),
                    b: g.value(b).data(),
                    c: g.value(c).data(),
                    keep: None,
                    exempt: None,
                };
                let scores = locality_scores(&inputs)?;
                let mut ex = vec![false; cfg.d_model];
                for ch in top_k_channels(&scores, cfg.local_channels)? {
                    ex[ch] = true;
                }
                if bi == 0 {
                    mask.channel_exempt = ex.clone();
                }
                Some(ex)
            } else {
                None
            };
            let keep = masking.then_some(mask.keep.as_slice());
            let y = g.selective_scan(u, delta, a, b, c, block.ssm.mode, block.ssm.method, keep, exempt.as_deref())?;
            let y = g.matmul(y, out_proj)?;
            h = g.add(h, y)?;
        }
        if self.final_norm.is_some() {
            let gain = cur.take();
            h = g.rms_norm(h, gain)?;
        }

        let (pooled, attention) = match cfg.aggregator {
            Aggregator::Mean => {
                let m = g.mean(h, 0)?;
                (g.reshape(m, vec![1, cfg.d_model])?, Vec::new())
            }
            Aggregator::Max => {
                let m = g.max(h, 0)?;
                (g.reshape(m, vec![1, cfg.d_model])?, Vec::new())
            }
            Aggregator::Ssm | Aggregator::Attention => {
                let kept: Vec<usize> = (0..n).filter(|&t| mask.keep[t]).collect();
                let rows = if kept.len() == n { h } else { g.gather_rows(h, &kept)? };
                let attn_vars = std::array::from_fn(|_| cur.take());
                let (pooled, w) = gated_attention(g, rows, attn_vars)?;
                let mut full = vec![T::zero(); n];
                for (&t, &a) in kept.iter().zip(&w) {
                    full[t] = a;
                }
                (pooled, full)
            }
        };
        let (hw, hb) = (cur.take(), cur.take());
        let logits = g.matmul(pooled, hw)?;
        let logits = g.add_row(logits, hb)?;
        let logits = g.reshape(logits, vec![self.classes])?;
        debug_assert_eq!(cur.next, vars.len());
        Ok(Forward { logits, aux_logits, attention, mask, block_inputs })
    }

    /// `CE(logits, label) + λ·CE(aux, label)`; the second term only when
    /// token selection is active.
    pub fn loss(&self, g: &mut Graph<T>, fwd: &Forward<T>, label: usize) -> Result<Var> {
        ensure!(label < self.classes, "label {label} outside 0..{}", self.classes);
        let main = g.cross_entropy(fwd.logits, label)?;
        match fwd.aux_logits {
            Some(aux) if self.config.aux_weight > 0.0 => {
                let ce = g.cross_entropy(aux, label)?;
                let weighted = g.scale(ce, T::lit(self.config.aux_weight));
                g.add(main, weighted)
            }
            _ => Ok(main),
        }
    }

    /// Inference on one bag.
    pub fn predict(&self, bag: &Bag) -> Result<BagPrediction<T>> {
        self.predict_view(&BagView::new(bag, self.config.overlap)?)
    }

    /// Untracked forward pass, keeping the graph for inspection.
    pub fn inspect(&self, view: &BagView<T>) -> Result<(Graph<T>, Forward<T>)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let fwd = self.forward(&mut g, &vars, view)?;
        Ok((g, fwd))
    }

    pub fn predict_view(&self, view: &BagView<T>) -> Result<BagPrediction<T>> {
        let (g, fwd) = self.inspect(view)?;
        Ok(BagPrediction {
            logits: g.value(fwd.logits).data().to_vec(),
            aux_logits: fwd.aux_logits.map(|a| g.value(a).data().to_vec()),
            attention: fwd.attention,
            mask: fwd.mask,
        })
    }
}

/// Cosine similarity of every token to the anchor token.
pub fn anchor_attention<T: Scalar>(features: &Tensor<T>, anchor: usize) -> Result<Vec<T>> {
    let (n, _) = features.dims2()?;
    ensure!(anchor < n, "anchor {anchor} outside 0..{n}");
    let norm = |i: usize| features.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
    let norms: Vec<T> = (0..n).map(norm).collect();
    if let Some(i) = norms.iter().position(|&v| v == T::zero()) {
        return Err(contract!("token {i} has a zero-norm feature vector"));
    }
    let p = features.row(anchor);
    Ok((0..n)
        .map(|i| {
            let dot: T = p.iter().zip(features.row(i)).map(|(&a, &b)| a * b).sum();
            dot / (norms[anchor] * norms[i])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_and_mutable_lists_agree() {
        for cfg in [ModelConfig { local_channels: 2, ..ModelConfig::default() }, ModelConfig::plain()] {
            let mut p = ModelParams::<f64>::init(&cfg, 5, 3).unwrap();
            let shapes: Vec<Vec<usize>> = p.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
            let mut_shapes: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
            assert_eq!(shapes, mut_shapes);
        }
    }

    #[test]
    fn anchor_examples() {
        let f = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 0.0, 0.0, 2.0, 3.0, 3.0]).unwrap();
        let s = anchor_attention(&f, 0).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 0.5f64.sqrt()).abs() < 1e-15);
        let z = Tensor::<f64>::from_f64(vec![2, 1], &[1.0, 0.0]).unwrap();
        assert!(anchor_attention(&z, 0).unwrap_err().to_string().contains("token 1"));
    }
}
