use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::OrientedBox;
use crate::params::{ModelParams, ParamVars};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::toolkit::SceneSample;

use super::augment::augment_sample;
use super::config::OptimizerConfig;
use super::loss::{batch_targets, total_loss, LossComponents};
use super::model::Detector;

/// Loss and gradients of a batch. Gradients are keyed by parameter name and
/// only present for trainable tensors.
#[derive(Debug, Clone)]
pub struct LossAndGrads<T: Scalar> {
    pub loss: LossComponents,
    pub grads: BTreeMap<String, Vec<T>>,
}

/// Forward pass, target construction (matching plus hard negative mining on
/// the current scores), loss and backward pass.
pub fn loss_and_grads<T: Scalar>(
    det: &Detector,
    params: &ModelParams<T>,
    images: &[&Tensor<T>],
    gts: &[Vec<OrientedBox>],
    masks: &[&Tensor<T>],
) -> Result<LossAndGrads<T>> {
    if images.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    if gts.len() != images.len() || masks.len() != images.len() {
        return Err(Error::invalid("train_step", "images, boxes and masks differ in count"));
    }
    params.check(&det.param_specs())?;
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, |n| det.is_trainable(n));
    let input = det.preprocess(images)?;
    let x = g.leaf(input, false);
    let fv = det.forward_graph(&mut g, x, &pv)?;
    let cls: Vec<&Tensor<T>> = fv.cls.iter().map(|&v| g.value(v)).collect();
    let targets = batch_targets(det.anchors(), &cls, gts, &det.config().matching)?;
    let mask_data: Vec<T> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    let masks = det.has_attention().then_some(mask_data.as_slice());
    let (lv, loss) = total_loss(&mut g, det.anchors(), &fv, &targets, masks, &det.config().loss)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (cls {}, loc {}, attention {}, {} positives, {} negatives)",
            loss.cls, loss.loc, loss.attention, loss.positives, loss.negatives
        )));
    }
    g.backward(lv.total)?;
    let mut grads = BTreeMap::new();
    for (name, &v) in pv.iter() {
        if g.requires_grad(v) {
            let grad = g
                .take_grad(v)
                .unwrap_or_else(|| vec![T::zero(); g.value(v).data().len()]);
            grads.insert(name.clone(), grad);
        }
    }
    Ok(LossAndGrads { loss, grads })
}

/// SGD with momentum: `v <- mu * v - lr * (g + wd * p)`, `p <- p + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub step: usize,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new()
    }
}

impl SgdState {
    pub fn new() -> Self {
        SgdState {
            step: 0,
            velocity: BTreeMap::new(),
        }
    }

    /// Learning rate in effect at `step` (a single decay at `decay_step`).
    pub fn learning_rate(cfg: &OptimizerConfig, step: usize) -> f64 {
        if step >= cfg.decay_step {
            cfg.lr * cfg.decay_factor
        } else {
            cfg.lr
        }
    }

    pub fn apply(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut ModelParams<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<f64> {
        let lr = Self::learning_rate(cfg, self.step) as f32;
        let mu = cfg.momentum as f32;
        let wd = cfg.weight_decay as f32;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if g.len() != p.data().len() {
                return Err(Error::shape("sgd", name.clone(), p.data().len(), g.len()));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi - lr * (gi + wd * *pi);
                *pi += *vi;
            }
        }
        self.step += 1;
        Ok(lr as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossComponents,
}

/// One update on `batch`. Augmentation, when enabled in the config, is drawn from `rng`.
pub fn train_step(
    det: &Detector,
    batch: &[SceneSample],
    params: &mut ModelParams<f32>,
    state: &mut SgdState,
    rng: &mut ChaCha8Rng,
) -> Result<LossRecord> {
    let cfg = det.config();
    let owned: Vec<SceneSample>;
    let batch = if cfg.augment.enabled {
        owned = batch
            .iter()
            .map(|s| augment_sample(s, &cfg.augment, cfg.input_size, rng))
            .collect::<Result<_>>()?;
        &owned[..]
    } else {
        batch
    };
    let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.mask).collect();
    let gts: Vec<Vec<OrientedBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
    let lg = loss_and_grads(det, params, &images, &gts, &masks)?;
    let step = state.step;
    let lr = state.apply(&cfg.optimizer, params, &lg.grads)?;
    Ok(LossRecord {
        step,
        lr,
        loss: lg.loss,
    })
}

/// Owns parameters, optimiser state and the random stream of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    detector: Detector,
    params: ModelParams<f32>,
    state: SgdState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `seed`.
    pub fn new(detector: Detector, seed: u64) -> Result<Self> {
        let params = detector.init_params(seed)?;
        Ok(Self::with_params(detector, params, seed))
    }

    pub fn with_params(detector: Detector, params: ModelParams<f32>, seed: u64) -> Self {
        Trainer {
            detector,
            params,
            state: SgdState::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_ba7c),
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn train_batch(&mut self, batch: &[SceneSample]) -> Result<LossRecord> {
        train_step(&self.detector, batch, &mut self.params, &mut self.state, &mut self.rng)
    }

    /// Draws the next batch from `data` by walking shuffled epochs.
    pub fn train_on(&mut self, data: &[SceneSample]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::invalid("train_step", "empty dataset"));
        }
        let bs = self.detector.config().optimizer.batch_size.min(data.len());
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if self.cursor >= self.order.len() || self.order.len() != data.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(data[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        self.train_batch(&batch)
    }
}
