use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{build_graph, ArchConfig, Batch, Builder, ModelConfig, ModelParams};
use super::schedule::{make_schedule, DiffusionSchedule};
use super::tape::{Scalar, Tensor, Var};
use super::DecoderError;
use crate::dataset::LabeledTrial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ddpm: f64,
    pub ae: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ddpm: 1.0, ae: 1.0, cls: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub diffusion_steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub w_ddpm: f64,
    pub w_ae: f64,
    pub w_cls: f64,
    pub seed: u64,
    pub precision: Precision,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub adam_betas: (f64, f64),
    pub clip_norm: f64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            diffusion_steps: 100,
            beta_lo: 1e-4,
            beta_hi: 0.02,
            learning_rate: 1e-2,
            batch_size: 32,
            epochs: 10,
            w_ddpm: 1.0,
            w_ae: 1.0,
            w_cls: 1.0,
            seed: 0,
            precision: Precision::F32,
            optimizer: OptimizerKind::Sgd,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            adam_betas: (0.9, 0.999),
            clip_norm: 1.0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { ddpm: self.w_ddpm, ae: self.w_ae, cls: self.w_cls }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, DecoderError> {
        make_schedule(self.diffusion_steps, self.beta_lo, self.beta_hi)
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: &str| Err(DecoderError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        let w = [self.w_ddpm, self.w_ae, self.w_cls];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.iter().all(|v| *v == 0.0) {
            return bad("loss weights must be non-negative and not all zero");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        self.arch.validate()?;
        self.schedule().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ddpm: f64,
    pub ae: f64,
    pub cls: f64,
}

pub(crate) struct LossGraph<'a, S> {
    pub builder: Builder<'a, S>,
    pub root: Var,
    pub components: LossComponents,
}

pub(crate) fn loss_graph<'a, S: Scalar>(
    tensors: &'a [Tensor<S>],
    cfg: &ModelConfig,
    batch: &Batch,
    sched: &DiffusionSchedule,
    w: LossWeights,
) -> Result<LossGraph<'a, S>, DecoderError> {
    let inputs = batch.inputs::<S>(cfg, sched)?;
    let mut b = Builder::bind(tensors);
    let out = build_graph(&mut b, cfg, inputs, true);
    let tape = &mut b.tape;
    let l_ddpm = tape.mse(out.ddpm_out.expect("full graph"), out.x0);
    let l_ae = tape.mse(out.recon.expect("full graph"), out.x0);
    let l_cls = tape.cross_entropy(out.logits, &batch.labels);
    let a = tape.scale(l_ddpm, w.ddpm);
    let bb = tape.scale(l_ae, w.ae);
    let c = tape.scale(l_cls, w.cls);
    let ab = tape.add(a, bb);
    let root = tape.add(ab, c);
    let get = |v: Var| tape.value(v).data[0].to_f64();
    let (ddpm, ae, cls) = (get(l_ddpm), get(l_ae), get(l_cls));
    let components = LossComponents {
        total: w.ddpm * ddpm + w.ae * ae + w.cls * cls,
        ddpm,
        ae,
        cls,
    };
    Ok(LossGraph { builder: b, root, components })
}

pub fn loss(params: &ModelParams, batch: &Batch, sched: &DiffusionSchedule, w: LossWeights) -> Result<LossComponents, DecoderError> {
    Ok(loss_graph(&params.tensors, &params.config, batch, sched, w)?.components)
}

/// Loss and its gradient for every parameter tensor, in parameter order.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    sched: &DiffusionSchedule,
    w: LossWeights,
) -> Result<(LossComponents, Vec<Vec<f32>>), DecoderError> {
    let g = loss_graph(&params.tensors, &params.config, batch, sched, w)?;
    let grads = g.builder.tape.backward(g.root);
    let out = g
        .builder
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect();
    Ok((g.components, out))
}

/// Stacks trials into a batch, drawing a step and Gaussian noise for each.
pub fn sample_batch(trials: &[&LabeledTrial], steps: usize, rng: &mut impl Rng) -> Result<Batch, DecoderError> {
    let first = trials.first().ok_or(DecoderError::EmptyDataset)?;
    let (c, l) = (first.n_channels, first.len);
    let mut x0 = Vec::with_capacity(trials.len() * c * l);
    let mut t = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for tr in trials {
        if (tr.n_channels, tr.len) != (c, l) {
            return Err(DecoderError::Shape("trials in a batch differ in shape".into()));
        }
        x0.extend_from_slice(&tr.data);
        t.push(rng.random_range(1..=steps));
        labels.push(tr.label().index());
    }
    let eps = (0..x0.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let shape = vec![trials.len(), c, l];
    Ok(Batch {
        x0: Tensor::new(shape.clone(), x0),
        t,
        eps: Tensor::new(shape, eps),
        labels,
    })
}

enum OptState {
    Sgd { velocity: Vec<Vec<f32>> },
    Adam { m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, step: i32 },
}

pub struct Optimizer {
    lr: f64,
    scale: f64,
    momentum: f64,
    betas: (f64, f64),
    clip_norm: f64,
    state: OptState,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &ModelParams) -> Self {
        Self::for_tensors(cfg, &params.tensors)
    }

    /// Optimizer state shaped like `tensors`, using the optimizer settings of `cfg`.
    pub fn for_tensors(cfg: &TrainConfig, tensors: &[Tensor<f32>]) -> Self {
        let zeros = || tensors.iter().map(|t| vec![0.0f32; t.len()]).collect::<Vec<_>>();
        let state = match cfg.optimizer {
            OptimizerKind::Sgd => OptState::Sgd { velocity: zeros() },
            OptimizerKind::Adam => OptState::Adam { m: zeros(), v: zeros(), step: 0 },
        };
        Optimizer {
            lr: cfg.learning_rate,
            scale: 1.0,
            momentum: cfg.momentum,
            betas: cfg.adam_betas,
            clip_norm: cfg.clip_norm,
            state,
        }
    }

    /// Multiplies the base learning rate for subsequent steps.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &mut [Vec<f32>]) -> f64 {
        self.step_tensors(&mut params.tensors, grads)
    }

    /// Clips `grads` to the configured global norm and applies one update.
    /// Returns the norm before clipping.
    pub fn step_tensors(&mut self, tensors: &mut [Tensor<f32>], grads: &mut [Vec<f32>]) -> f64 {
        let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if norm > self.clip_norm {
            let s = (self.clip_norm / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        let lr = (self.lr * self.scale) as f32;
        match &mut self.state {
            OptState::Sgd { velocity } => {
                let mu = self.momentum as f32;
                for ((p, g), v) in tensors.iter_mut().zip(grads.iter()).zip(velocity) {
                    for ((pi, &gi), vi) in p.data.iter_mut().zip(g).zip(v) {
                        *vi = mu * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptState::Adam { m, v, step } => {
                *step += 1;
                let (b1, b2) = self.betas;
                let c1 = (1.0 - b1.powi(*step)) as f32;
                let c2 = (1.0 - b2.powi(*step)) as f32;
                let (b1, b2) = (b1 as f32, b2 as f32);
                for (((p, g), mi), vi) in tensors.iter_mut().zip(grads.iter()).zip(m).zip(v) {
                    for (((pj, &gj), mj), vj) in p.data.iter_mut().zip(g).zip(mi).zip(vi) {
                        *mj = b1 * *mj + (1.0 - b1) * gj;
                        *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                        *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    pub step_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().copied()
    }
}

pub fn train(trials: &[&LabeledTrial], cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory), DecoderError> {
    train_with(trials, cfg, |_, _| {})
}

/// Minibatch training. `on_epoch` sees each epoch's summary and the current parameters.
pub fn train_with(
    trials: &[&LabeledTrial],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss, &ModelParams),
) -> Result<(ModelParams, TrainHistory), DecoderError> {
    cfg.validate()?;
    let first = trials.first().ok_or(DecoderError::EmptyDataset)?;
    let model_cfg = ModelConfig::new(first.n_channels, first.len, cfg.arch.clone())?;
    let sched = cfg.schedule()?;
    let w = cfg.weights();
    let mut params = ModelParams::init(model_cfg, cfg.seed);
    let mut opt = Optimizer::new(cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..trials.len()).collect();
    let mut history = TrainHistory::default();
    let total_steps = cfg.epochs * trials.len().div_ceil(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossComponents { total: 0.0, ddpm: 0.0, ae: 0.0, cls: 0.0 };
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<&LabeledTrial> = idx.iter().map(|&i| trials[i]).collect();
            let batch = sample_batch(&picked, cfg.diffusion_steps, &mut rng)?;
            let (l, mut grads) = loss_and_grad(&params, &batch, &sched, w)?;
            if !l.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(DecoderError::Diverged {
                    epoch,
                    step: step + 1,
                    detail: format!("ddpm={} ae={} cls={}", l.ddpm, l.ae, l.cls),
                });
            }
            opt.set_lr_scale(cfg.lr_schedule.factor(history.step_losses.len(), total_steps));
            opt.step(&mut params, &mut grads);
            history.step_losses.push(l.total);
            sum.total += l.total;
            sum.ddpm += l.ddpm;
            sum.ae += l.ae;
            sum.cls += l.cls;
            steps += 1;
        }
        let n = steps as f64;
        let mean = LossComponents {
            total: sum.total / n,
            ddpm: sum.ddpm / n,
            ae: sum.ae / n,
            cls: sum.cls / n,
        };
        let record = EpochLoss { epoch, steps, mean };
        on_epoch(&record, &params);
        history.epochs.push(record);
    }
    if !params.all_finite() {
        return Err(DecoderError::Diverged {
            epoch: cfg.epochs,
            step: 0,
            detail: "non-finite parameters after training".into(),
        });
    }
    Ok((params, history))
}
