use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_activation_grad, pairwise_softmax, ClassWeights};
use super::mlp::{Gradient, HeadParameters, Layer};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub hidden_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 250,
            early_stop_patience: 5,
            batch_size: 64,
            validation_fraction: 0.1,
            hidden_sizes: vec![256],
            dropout_rate: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 || self.batch_size == 0 {
            return bad("max_epochs, early_stop_patience and batch_size must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,validation_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.validation_loss));
        }
        s
    }
}

/// Leaf id per label.
pub fn leaf_targets<T: Scalar>(h: &Hierarchy<T>, labels: &[String]) -> Result<Vec<NodeId>> {
    labels
        .iter()
        .map(|l| {
            h.leaf_of(l)
                .ok_or_else(|| Error::arg(format!("label `{l}` is not a leaf of the hierarchy")))
        })
        .collect()
}

fn accumulate<T: Scalar>(
    params: &HeadParameters<T>,
    x: &[T],
    y: NodeId,
    weight: T,
    h: &Hierarchy<T>,
    mask: Option<&[T]>,
    grad: &mut Gradient<T>,
) -> T {
    let cache = params.forward_cached(x, mask);
    let p = pairwise_softmax(&cache.output, h).expect("output width checked");
    let (loss, delta) = loss_and_activation_grad(&p, h, y, weight);
    params.backward(&cache, delta, mask, grad);
    loss
}

fn check_batch<T: Scalar>(
    params: &HeadParameters<T>,
    h: &Hierarchy<T>,
    batch: &[(&[T], NodeId)],
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if params.output_dim() != h.len() {
        return Err(Error::arg(format!(
            "head emits {} activations for a hierarchy of {} nodes",
            params.output_dim(),
            h.len()
        )));
    }
    for &(x, y) in batch {
        if x.len() != params.input_dim() {
            return Err(Error::arg("feature width does not match the head"));
        }
        if y >= h.len() || !h.is_leaf(y) {
            return Err(Error::arg(format!("target {y} is not a leaf")));
        }
    }
    Ok(())
}

/// Analytic gradient of the mean total loss over `batch`, dropout off.
/// Returns the gradient and the mean loss.
pub fn gradient<T: Scalar>(
    params: &HeadParameters<T>,
    batch: &[(&[T], NodeId)],
    weights: &ClassWeights<T>,
    h: &Hierarchy<T>,
) -> Result<(Gradient<T>, T)> {
    check_batch(params, h, batch)?;
    let w = weights.per_node(h);
    let mut grad = Gradient::zeros_like(params);
    let mut loss = T::zero();
    for &(x, y) in batch {
        loss += accumulate(params, x, y, w[y], h, None, &mut grad);
    }
    let inv = T::one() / T::from_usize_lossy(batch.len());
    grad.scale(inv);
    Ok((grad, loss * inv))
}

/// Mean total loss, dropout off.
pub fn mean_loss<T: Scalar>(
    params: &HeadParameters<T>,
    batch: &[(&[T], NodeId)],
    weights: &ClassWeights<T>,
    h: &Hierarchy<T>,
) -> Result<T> {
    check_batch(params, h, batch)?;
    let w = weights.per_node(h);
    let mut total = T::zero();
    for &(x, y) in batch {
        let a = params.forward_cached(x, None).output;
        let p = pairwise_softmax(&a, h)?;
        total += loss_and_activation_grad(&p, h, y, w[y]).0;
    }
    Ok(total / T::from_usize_lossy(batch.len()))
}

struct Adam<T> {
    m: Vec<Layer<T>>,
    v: Vec<Layer<T>>,
    t: i32,
    lr: T,
    b1: T,
    b2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    fn new(params: &HeadParameters<T>, cfg: &TrainConfig) -> Self {
        let zeros = Gradient::zeros_like(params).layers;
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: T::lit(cfg.learning_rate),
            b1: T::lit(cfg.adam_beta1),
            b2: T::lit(cfg.adam_beta2),
            eps: T::lit(cfg.adam_epsilon),
        }
    }

    fn step(&mut self, params: &mut HeadParameters<T>, grad: &Gradient<T>) {
        self.t += 1;
        let c1 = T::one() - self.b1.powi(self.t);
        let c2 = T::one() - self.b2.powi(self.t);
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .params_mut()
                .zip(g.params())
                .zip(m.params_mut())
                .zip(v.params_mut())
            {
                *m = self.b1 * *m + (T::one() - self.b1) * g;
                *v = self.b2 * *v + (T::one() - self.b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Mini-batch Adam with early stopping on a validation split carved from
/// the given windows. Returns the parameters of the best validation epoch.
pub fn train<T: Scalar>(
    features: &[Vec<T>],
    labels: &[String],
    h: &Hierarchy<T>,
    config: &TrainConfig,
) -> Result<(HeadParameters<T>, TrainLog)> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::arg("features and labels differ in length"));
    }
    if h.class_count() < 2 {
        return Err(Error::arg("training needs at least two classes"));
    }
    if features.len() < 2 {
        return Err(Error::arg("training needs at least two windows"));
    }
    let width = features[0].len();
    if width == 0 || features.iter().any(|f| f.len() != width) {
        return Err(Error::arg("feature vectors must share a positive width"));
    }
    let targets = leaf_targets(h, labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = HeadParameters::random(
        width,
        &config.hidden_sizes,
        h.len(),
        T::lit(config.dropout_rate),
        &mut rng,
    )?;

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((features.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, features.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let train_labels: Vec<String> = train_idx.iter().map(|&i| labels[i].clone()).collect();
    let weights = ClassWeights::from_labels(&train_labels)?;
    let node_w = weights.per_node(h);
    let as_batch = |idx: &[usize]| -> Vec<(&[T], NodeId)> {
        idx.iter().map(|&i| (features[i].as_slice(), targets[i])).collect()
    };
    let val_batch = as_batch(val_idx);

    let mut adam = Adam::new(&params, config);
    let dropout = config.dropout_rate;
    let keep_scale = T::lit(1.0 / (1.0 - dropout));
    let mut mask = vec![T::one(); config.hidden_sizes.last().copied().unwrap_or(0)];
    let use_mask = dropout > 0.0 && !config.hidden_sizes.is_empty();

    let mut best: Option<(f64, HeadParameters<T>, usize)> = None;
    let mut since_best = 0;
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };

    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(config.batch_size) {
            let mut grad = Gradient::zeros_like(&params);
            for &i in chunk {
                if use_mask {
                    for m in mask.iter_mut() {
                        *m = if rng.random::<f64>() < dropout {
                            T::zero()
                        } else {
                            keep_scale
                        };
                    }
                }
                let m = use_mask.then_some(mask.as_slice());
                accumulate(&params, &features[i], targets[i], node_w[targets[i]], h, m, &mut grad);
            }
            grad.scale(T::one() / T::from_usize_lossy(chunk.len()));
            adam.step(&mut params, &grad);
        }

        let train_loss = mean_loss(&params, &as_batch(&train_idx), &weights, h)?.as_f64();
        let validation_loss = mean_loss(&params, &val_batch, &weights, h)?.as_f64();
        if !train_loss.is_finite() || !validation_loss.is_finite() || !params.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: format!(
                    "train loss {train_loss}, validation loss {validation_loss}; \
                     try a smaller learning rate or check feature scaling"
                ),
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            validation_loss,
        });
        match &best {
            Some((b, _, _)) if validation_loss >= *b => {
                since_best += 1;
                if since_best >= config.early_stop_patience {
                    log.stopped_early = true;
                    break;
                }
            }
            _ => {
                best = Some((validation_loss, params.clone(), epoch));
                since_best = 0;
            }
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch");
    log.best_epoch = best_epoch;
    Ok((params, log))
}
