use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BagPrediction, BagView, ModelParams};
use crate::autodiff::Graph;
use crate::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::metrics::{auc_macro_ovr, metric_acc_f1, MetricReport};
use crate::scalar::Scalar;
use crate::synth::Bag;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay.
struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
}

impl<T: Scalar> AdamW<T> {
    fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamW { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>], lr: f64, wd: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, wd, eps) = (T::lit(lr), T::lit(wd), T::lit(ADAM_EPS));
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
}

impl<T> TrainOutcome<T> {
    /// `epoch,mean_loss,train_acc` CSV.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,train_acc\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, r.train_acc));
        }
        s
    }
}

/// One optimizer step per bag, bags reshuffled every epoch from `config.seed`.
pub fn train<T: Scalar>(bags: &[&Bag], config: &ModelConfig, classes: usize) -> Result<TrainOutcome<T>> {
    ensure!(!bags.is_empty(), "training set is empty");
    let d_in = bags[0].dim();
    ensure!(bags.iter().all(|b| b.dim() == d_in), "bags differ in feature dim");
    let mut params = ModelParams::<T>::init(config, d_in, classes)?;
    let views = bags.iter().map(|b| BagView::new(b, config.overlap)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x5405);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for &i in &order {
            let mut g = Graph::new();
            let vars = params.register(&mut g, true);
            let fwd = params.forward(&mut g, &vars, &views[i])?;
            let loss = params.loss(&mut g, &fwd, bags[i].label)?;
            let value = g.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss {value} at epoch {epoch}, bag {}", bags[i].id)));
            }
            let logits = g.value(fwd.logits).data();
            let pred = (0..logits.len()).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
            correct += usize::from(pred == bags[i].label);
            total += value;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars.iter().map(|&v| grads.take(v).expect("tracked leaf")).collect();
            opt.update(&mut params, &grads, config.learning_rate, config.weight_decay);
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: total / bags.len() as f64,
            train_acc: correct as f64 / bags.len() as f64,
            steps: bags.len(),
        });
    }
    Ok(TrainOutcome { params, history })
}

pub fn predict_all<T: Scalar>(params: &ModelParams<T>, bags: &[&Bag]) -> Result<Vec<BagPrediction<T>>> {
    bags.iter().map(|b| params.predict(b)).collect()
}

/// AUC (macro one-vs-rest beyond two classes), accuracy and macro F1.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, bags: &[&Bag]) -> Result<MetricReport> {
    let preds = predict_all(params, bags)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let probs: Vec<Vec<f64>> = preds.iter().map(BagPrediction::probabilities).collect();
    let classes: Vec<usize> = preds.iter().map(BagPrediction::class).collect();
    let auc = auc_macro_ovr(&probs, &labels, params.classes)?;
    let (acc, macro_f1) = metric_acc_f1(&classes, &labels, params.classes)?;
    let mut class_counts = vec![0; params.classes];
    for &y in &labels {
        class_counts[y] += 1;
    }
    Ok(MetricReport { auc, acc, macro_f1, class_counts, seed: params.config.seed, fingerprint: params.config.fingerprint() })
}
