//! Adam and the mini-batched training loop. Training is a pure function of
//! (dataset, config, initial parameters): shuffling and negative sampling
//! draw from named sub-streams of the run seed, and batches are reduced in
//! a fixed order.

use rand::seq::SliceRandom;

use crate::loss::{loss_backward, LossConfig, LossContext, NegativeSet, TrainSet};
use crate::model::{GradBuffer, ModelParams};
use crate::rng::substream;
use crate::{Error, Result};

/// First/second-moment accumulators mirroring the parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: GradBuffer,
    v: GradBuffer,
    step_count: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            m: GradBuffer::zeros_like(params),
            v: GradBuffer::zeros_like(params),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update_block(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One bias-corrected Adam step over all parameter blocks.
pub fn adam_step(params: &mut ModelParams, grads: &GradBuffer, state: &mut AdamState) -> Result<()> {
    if grads.num_params() != params.num_params() {
        return Err(Error::DimensionMismatch {
            expected: params.num_params(),
            got: grads.num_params(),
        });
    }
    state.step_count += 1;
    let t = state.step_count;
    adam_update_block(
        params.f.data_mut(),
        grads.f.data(),
        state.m.f.data_mut(),
        state.v.f.data_mut(),
        state.lr,
        state.beta1,
        state.beta2,
        state.eps,
        t,
    );
    adam_update_block(
        params.g.data_mut(),
        grads.g.data(),
        state.m.g.data_mut(),
        state.v.g.data_mut(),
        state.lr,
        state.beta1,
        state.beta2,
        state.eps,
        t,
    );
    Ok(())
}

/// Training hyperparameters. The loss variant, tradeoff, similarity, and
/// weighting mode ride along in `loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Sampled negatives per step when the pool exceeds the full-vocab limit.
    pub negatives: usize,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(lr: f64, seed: u64, loss: LossConfig) -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr,
            seed,
            negatives: 100,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        self.loss.validate()
    }
}

/// Per-epoch bookkeeping: mean training loss and an optional validation
/// metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub metric: Option<f64>,
}

/// Shuffle, accumulate mean batch gradients, step Adam, record the epoch
/// loss, and optionally score `metric_fn` on the updated parameters after
/// each epoch.
pub fn train(
    data: &TrainSet,
    cfg: &TrainConfig,
    params: ModelParams,
    mut metric_fn: Option<&mut dyn FnMut(&ModelParams) -> f64>,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    cfg.validate()?;
    data.validate()?;
    let n = data.samples.len();
    let mut params = params;
    let mut state = AdamState::new(&params, cfg.lr);
    let mut buffer = GradBuffer::zeros_like(&params);
    let mut shuffle_rng = substream(cfg.seed, "shuffle");
    let mut negs_rng = substream(cfg.seed, "negatives");
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            let ctx = LossContext::new(&params, &data.pool)?;
            buffer.zero();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let negs = NegativeSet::auto(
                    data.pool.len(),
                    data.target_indices[idx],
                    cfg.negatives,
                    &mut negs_rng,
                )?;
                batch_loss +=
                    loss_backward(&params, &data.samples[idx], &negs, &ctx, &cfg.loss, &mut buffer)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            // Mean gradient keeps the learning-rate grid comparable across
            // batch sizes.
            buffer.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &buffer, &mut state)?;
            epoch_loss += batch_loss;
        }
        let metric = metric_fn.as_mut().map(|f| f(&params));
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / n as f64,
            metric,
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{GroupSample, LossVariant, Similarity, TargetPool};
    use crate::model::{init_params, MappingSpec, ObjectRef, WeightFeatures};

    fn tiny_params() -> ModelParams {
        init_params(
            MappingSpec::embedding(4, 3),
            MappingSpec::embedding(2, 3),
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = tiny_params();
        let before = p.clone();
        let g = GradBuffer::zeros_like(&p);
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step from zeroed moments, the update for gradient g is
        // -lr * g / (|g| + eps), independent of |g| up to the eps term.
        let mut p = tiny_params();
        let before = p.clone();
        let mut g = GradBuffer::zeros_like(&p);
        g.f.add_row(0, &[2.0, -4.0, 1e-3], 1.0).unwrap();
        let lr = 0.05;
        let mut s = AdamState::new(&p, lr);
        adam_step(&mut p, &g, &mut s).unwrap();
        for (i, &grad) in [2.0, -4.0, 1e-3].iter().enumerate() {
            let update = p.f.row(0)[i] - before.f.row(0)[i];
            let expected = -lr * grad / (grad.abs() + 1e-8);
            assert!((update - expected).abs() < 1e-12, "{update} vs {expected}");
        }
        // Rows with zero gradient stay put.
        assert_eq!(p.f.row(1), before.f.row(1));
        // Near-equal magnitudes for gradients g and 2g at step one.
        let u0 = (p.f.row(0)[0] - before.f.row(0)[0]).abs();
        let u1 = (p.f.row(0)[1] - before.f.row(0)[1]).abs();
        assert!((u0 - u1).abs() < 1e-8);
    }

    #[test]
    fn adam_is_finite_for_huge_gradients() {
        let mut p = tiny_params();
        let mut g = GradBuffer::zeros_like(&p);
        g.f.add_row(0, &[1e6, -1e6, 1e6], 1.0).unwrap();
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &g, &mut s).unwrap();
        assert!(p.all_finite());
    }

    /// Two well-separated classes; each sample is a clean singleton group.
    fn separable_set() -> (TrainSet, ModelParams) {
        let mut samples = Vec::new();
        let mut target_indices = Vec::new();
        for i in 0..20 {
            let class = i % 2;
            let jitter = 0.05 * (i as f64 / 20.0);
            let feats = if class == 0 {
                vec![1.0, jitter]
            } else {
                vec![jitter, 1.0]
            };
            samples.push(
                GroupSample::new(vec![ObjectRef::features(feats)], ObjectRef::id(class)).unwrap(),
            );
            target_indices.push(class);
        }
        let pool = TargetPool::from_vocab(2).unwrap();
        let set = TrainSet::new(samples, pool, target_indices).unwrap();
        let params = init_params(MappingSpec::identity(2), MappingSpec::embedding(2, 2), 3).unwrap();
        (set, params)
    }

    fn train_cfg(lr: f64, epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(
            lr,
            11,
            LossConfig::new(LossVariant::MaxMatching, Similarity::Dot, WeightFeatures::Embed),
        );
        cfg.epochs = epochs;
        cfg.batch_size = 8;
        cfg
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (set, params) = separable_set();
        let before = params.clone();
        let (after, history) = train(&set, &train_cfg(0.0, 3), params, None).unwrap();
        assert_eq!(after, before);
        assert_eq!(history.len(), 3);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (set, params) = separable_set();
        let (p1, h1) = train(&set, &train_cfg(0.05, 4), params.clone(), None).unwrap();
        let (p2, h2) = train(&set, &train_cfg(0.05, 4), params, None).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let (set, params) = separable_set();
        let (_, history) = train(&set, &train_cfg(0.05, 10), params, None).unwrap();
        for w in history.windows(2).take(5) {
            assert!(
                w[1].loss < w[0].loss,
                "epoch {} loss {} did not improve on {}",
                w[1].epoch,
                w[1].loss,
                w[0].loss
            );
        }
    }

    #[test]
    fn poisoned_params_are_reported_as_non_finite() {
        let (set, mut params) = separable_set();
        params.g.data_mut()[0] = f64::INFINITY;
        let err = train(&set, &train_cfg(0.05, 1), params, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let pool = TargetPool::from_vocab(2).unwrap();
        assert!(TrainSet::new(vec![], pool, vec![]).is_err());
    }
}
