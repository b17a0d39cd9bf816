use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{forward_diffuse, DiffusionSchedule};
use super::tape::{softmax_row, Scalar, SplineGrid, Tape, Tensor, Var};
use super::DecoderError;
use crate::alignment::VisemeClass;

/// Number of stride-2 stages in the encoder; the window length must divide by `2^DEPTH`.
pub const DEPTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub widths: [usize; 3],
    pub kernel: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub latent_dim: usize,
    pub attn_reduction: usize,
    pub kan_grid_points: usize,
    pub kan_range: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: [32, 64, 128],
            kernel: 5,
            groups: 8,
            time_dim: 32,
            latent_dim: 64,
            attn_reduction: 4,
            kan_grid_points: 5,
            kan_range: 2.0,
        }
    }
}

impl ArchConfig {
    pub fn grid(&self) -> SplineGrid {
        SplineGrid {
            lo: -self.kan_range,
            hi: self.kan_range,
            intervals: self.kan_grid_points - 1,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let err = |m: String| Err(DecoderError::Config(m));
        if self.kernel % 2 == 0 {
            return err(format!("kernel {} must be odd", self.kernel));
        }
        for &w in self.widths.iter().chain([&self.latent_dim]) {
            if w == 0 || self.groups == 0 || w % self.groups != 0 {
                return err(format!("width {w} not divisible into {} groups", self.groups));
            }
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return err(format!("time_dim {} must be even and positive", self.time_dim));
        }
        if self.attn_reduction == 0 || self.latent_dim / self.attn_reduction == 0 {
            return err("attention reduction leaves no hidden units".into());
        }
        if self.kan_grid_points < 2 || !(self.kan_range > 0.0) {
            return err("KAN grid needs at least two points and a positive range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub len: usize,
    pub n_classes: usize,
    pub arch: ArchConfig,
}

impl ModelConfig {
    pub fn new(in_channels: usize, len: usize, arch: ArchConfig) -> Result<Self, DecoderError> {
        arch.validate()?;
        if in_channels == 0 {
            return Err(DecoderError::Shape("model needs at least one input channel".into()));
        }
        if len == 0 || len % (1 << DEPTH) != 0 {
            return Err(DecoderError::Shape(format!(
                "window length {len} must be a positive multiple of {}",
                1 << DEPTH
            )));
        }
        Ok(ModelConfig { in_channels, len, n_classes: VisemeClass::COUNT, arch })
    }
}

/// Trained or freshly initialized weights, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut b = Builder::<f32>::init(seed);
        let dummy = Inputs::zeros(&config, 1);
        build_graph(&mut b, &config, dummy, true);
        let (names, tensors) = b.into_created();
        ModelParams { config, names, tensors }
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn cast<S: Scalar>(&self) -> Vec<Tensor<S>> {
        self.tensors.iter().map(Tensor::cast).collect()
    }

    /// Checks names and shapes against the layout implied by the config.
    pub fn check_layout(&self) -> Result<(), DecoderError> {
        let reference = ModelParams::init(self.config.clone(), 0);
        if reference.names != self.names {
            return Err(DecoderError::Shape("parameter names do not match architecture".into()));
        }
        for ((n, a), b) in self.names.iter().zip(&self.tensors).zip(&reference.tensors) {
            if a.shape != b.shape {
                return Err(DecoderError::Shape(format!(
                    "{n}: shape {:?}, expected {:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Fan(usize),
    Uniform(f64),
    Ones,
    Zeros,
}

enum Source<'a, S> {
    Init {
        rng: ChaCha8Rng,
        names: Vec<String>,
        tensors: Vec<Tensor<S>>,
    },
    Bind {
        tensors: &'a [Tensor<S>],
        cursor: usize,
    },
}

/// Records a graph while handing out parameter leaves in a fixed order.
pub(crate) struct Builder<'a, S> {
    pub tape: Tape<S>,
    pub params: Vec<Var>,
    src: Source<'a, S>,
}

impl<'a, S: Scalar> Builder<'a, S> {
    pub fn init(seed: u64) -> Self {
        Builder {
            tape: Tape::new(),
            params: Vec::new(),
            src: Source::Init {
                rng: ChaCha8Rng::seed_from_u64(seed),
                names: Vec::new(),
                tensors: Vec::new(),
            },
        }
    }

    pub fn bind(tensors: &'a [Tensor<S>]) -> Self {
        Builder {
            tape: Tape::new(),
            params: Vec::new(),
            src: Source::Bind { tensors, cursor: 0 },
        }
    }

    pub fn into_created(self) -> (Vec<String>, Vec<Tensor<S>>) {
        match self.src {
            Source::Init { names, tensors, .. } => (names, tensors),
            Source::Bind { .. } => (Vec::new(), Vec::new()),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Var {
        let t = match &mut self.src {
            Source::Init { rng, names, tensors } => {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Ones => vec![S::one(); n],
                    Init::Zeros => vec![S::zero(); n],
                    Init::Fan(fan) => {
                        let bound = 1.0 / (fan as f64).sqrt();
                        (0..n).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect()
                    }
                    Init::Uniform(bound) => {
                        (0..n).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect()
                    }
                };
                let t = Tensor::new(shape.to_vec(), data);
                names.push(name.to_string());
                tensors.push(t.clone());
                t
            }
            Source::Bind { tensors, cursor } => {
                let t = tensors[*cursor].clone();
                assert_eq!(t.shape, shape, "parameter {name} bound out of order");
                *cursor += 1;
                t
            }
        };
        let v = self.tape.leaf(t);
        self.params.push(v);
        v
    }

    pub fn conv(&mut self, x: Var, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Var {
        let w = self.param(&format!("{name}.w"), &[cout, cin, k], Init::Fan(cin * k));
        let b = self.param(&format!("{name}.b"), &[cout], Init::Fan(cin * k));
        self.tape.conv1d(x, w, b, stride, k / 2)
    }

    pub fn linear(&mut self, x: Var, name: &str, inp: usize, out: usize) -> Var {
        let w = self.param(&format!("{name}.w"), &[out, inp], Init::Fan(inp));
        let b = self.param(&format!("{name}.b"), &[out], Init::Fan(inp));
        self.tape.linear(x, w, b)
    }

    pub fn norm(&mut self, x: Var, name: &str, c: usize, groups: usize) -> Var {
        let g = self.param(&format!("{name}.gamma"), &[c], Init::Ones);
        let b = self.param(&format!("{name}.beta"), &[c], Init::Zeros);
        self.tape.group_norm(x, g, b, groups)
    }

    /// conv → GroupNorm → SiLU
    pub fn conv_block(&mut self, x: Var, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Var {
        let h = self.conv(x, &format!("{name}.conv"), cin, cout, k, stride);
        let h = self.norm(h, &format!("{name}.norm"), cout, groups);
        self.tape.silu(h)
    }

    /// Squeeze-excitation over channels with an MLP shared by every channel.
    /// Each channel sees its own pooled statistic and the mean over channels,
    /// so permuting channels permutes the gates.
    pub fn channel_attention(&mut self, x: Var, name: &str, c: usize, reduction: usize) -> (Var, Var) {
        let batch = self.tape.shape(x)[0];
        let hidden = (c / reduction).max(1);
        let s = self.tape.mean_time(x);
        let ctx = self.tape.channel_context(s);
        let h = self.linear(ctx, &format!("{name}.fc1"), 2, hidden);
        let h = self.tape.silu(h);
        let h = self.linear(h, &format!("{name}.fc2"), hidden, 1);
        let gate = self.tape.sigmoid(h);
        let gate = self.tape.reshape(gate, &[batch, c]);
        (self.tape.mul_channel(x, gate), gate)
    }

    pub fn kan(&mut self, x: Var, name: &str, inp: usize, out: usize, grid: SplineGrid) -> Var {
        let nb = grid.n_basis();
        let coef = self.param(&format!("{name}.coef"), &[out, inp, nb], Init::Uniform(0.1));
        let base = self.param(&format!("{name}.base"), &[out, inp], Init::Fan(inp));
        let bias = self.param(&format!("{name}.bias"), &[out], Init::Zeros);
        self.tape.kan(x, coef, base, bias, grid)
    }

    #[allow(clippy::too_many_arguments)]
    fn res_block(&mut self, x: Var, temb: Var, name: &str, cin: usize, cout: usize, arch: &ArchConfig) -> Var {
        let (k, g) = (arch.kernel, arch.groups);
        let h = self.conv_block(x, &format!("{name}.a"), cin, cout, k, 1, g);
        let tp = self.linear(temb, &format!("{name}.t1"), arch.time_dim, cout);
        let tp = self.tape.silu(tp);
        let tp = self.linear(tp, &format!("{name}.t2"), cout, cout);
        let h = self.tape.add_channel_bias(h, tp);
        let h = self.conv_block(h, &format!("{name}.b"), cout, cout, k, 1, g);
        let skip = if cin == cout { x } else { self.conv(x, &format!("{name}.skip"), cin, cout, 1, 1) };
        self.tape.add(h, skip)
    }
}

/// Per-batch model inputs.
pub(crate) struct Inputs<S> {
    pub x0: Tensor<S>,
    pub xt: Tensor<S>,
    pub temb: Tensor<S>,
}

impl<S: Scalar> Inputs<S> {
    fn zeros(cfg: &ModelConfig, batch: usize) -> Self {
        let shape = [batch, cfg.in_channels, cfg.len];
        Inputs {
            x0: Tensor::zeros(&shape),
            xt: Tensor::zeros(&shape),
            temb: Tensor::zeros(&[batch, cfg.arch.time_dim]),
        }
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Outputs {
    pub x0: Var,
    pub ddpm_out: Option<Var>,
    pub recon: Option<Var>,
    pub latent: Var,
    pub logits: Var,
    pub attention: Var,
}

/// Records the model. With `full == false` only the encoder and classifier
/// are built, which is all the logits depend on.
pub(crate) fn build_graph<S: Scalar>(b: &mut Builder<'_, S>, cfg: &ModelConfig, inputs: Inputs<S>, full: bool) -> Outputs {
    let a = &cfg.arch;
    let (c, k, g) = (cfg.in_channels, a.kernel, a.groups);
    let [w1, w2, w3] = a.widths;
    let x0 = b.tape.leaf(inputs.x0);

    // encoder E
    let e = b.conv_block(x0, "enc.1", c, w1, k, 2, g);
    let e = b.conv_block(e, "enc.2", w1, w2, k, 2, g);
    let e = b.conv_block(e, "enc.3", w2, a.latent_dim, k, 2, g);
    let (e, attention) = b.channel_attention(e, "enc.attn", a.latent_dim, a.attn_reduction);
    let latent = b.tape.mean_time(e);

    // classifier C
    let logits = b.kan(latent, "cls.kan", a.latent_dim, cfg.n_classes, a.grid());

    if !full {
        return Outputs { x0, ddpm_out: None, recon: None, latent, logits, attention };
    }

    // decoder D, first three stages (their activations feed the denoiser)
    let up = b.tape.upsample2(e);
    let d3 = b.conv_block(up, "dec.3", a.latent_dim, w3, k, 1, g);
    let up = b.tape.upsample2(d3);
    let d2 = b.conv_block(up, "dec.2", w3, w2, k, 1, g);
    let up = b.tape.upsample2(d2);
    let d1 = b.conv_block(up, "dec.1", w2, w1, k, 1, g);

    // time-conditional U-Net on x_t, predicting x0
    let xt = b.tape.leaf(inputs.xt);
    let temb = b.tape.leaf(inputs.temb);
    let h1 = b.conv(xt, "unet.in", c, w1, k, 1);
    let h1 = b.tape.add(h1, d1);
    let h1 = b.res_block(h1, temb, "unet.down1", w1, w1, a);
    let h2 = b.conv(h1, "unet.pool1", w1, w2, k, 2);
    let h2 = b.tape.add(h2, d2);
    let h2 = b.res_block(h2, temb, "unet.down2", w2, w2, a);
    let h3 = b.conv(h2, "unet.pool2", w2, w3, k, 2);
    let h3 = b.tape.add(h3, d3);
    let h3 = b.res_block(h3, temb, "unet.mid", w3, w3, a);
    let u = b.tape.upsample2(h3);
    let u = b.tape.concat(&[u, h2]);
    let u = b.res_block(u, temb, "unet.up2", w3 + w2, w2, a);
    let u = b.tape.upsample2(u);
    let u = b.tape.concat(&[u, h1]);
    let u = b.res_block(u, temb, "unet.up1", w2 + w1, w1, a);
    let ddpm_out = b.conv(u, "unet.out", w1, c, 1, 1);

    // decoder D, penultimate stage sees x0 and the denoiser output
    let cat = b.tape.concat(&[d1, x0, ddpm_out]);
    let p = b.conv_block(cat, "dec.pen", w1 + 2 * c, w1, k, 1, g);
    let recon = b.conv(p, "dec.out", w1, c, 1, 1);

    Outputs {
        x0,
        ddpm_out: Some(ddpm_out),
        recon: Some(recon),
        latent,
        logits,
        attention,
    }
}

/// A batch of trials in model layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C, L]`
    pub x0: Tensor<f32>,
    /// one step per trial, 1-based
    pub t: Vec<usize>,
    /// same shape as `x0`
    pub eps: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<(), DecoderError> {
        let want = [self.t.len(), cfg.in_channels, cfg.len];
        if self.x0.shape != want || self.eps.shape != want {
            return Err(DecoderError::Shape(format!(
                "batch tensors {:?}/{:?}, model expects {:?}",
                self.x0.shape, self.eps.shape, want
            )));
        }
        if self.labels.len() != self.t.len() || self.labels.iter().any(|&l| l >= cfg.n_classes) {
            return Err(DecoderError::Shape("labels missing or out of range".into()));
        }
        Ok(())
    }

    pub(crate) fn inputs<S: Scalar>(&self, cfg: &ModelConfig, sched: &DiffusionSchedule) -> Result<Inputs<S>, DecoderError> {
        self.check(cfg)?;
        let per = cfg.in_channels * cfg.len;
        let mut xt = Vec::with_capacity(self.x0.len());
        let mut temb = Vec::with_capacity(self.t.len() * cfg.arch.time_dim);
        for (i, &t) in self.t.iter().enumerate() {
            let span = i * per..(i + 1) * per;
            xt.extend(forward_diffuse(&self.x0.data[span.clone()], t, &self.eps.data[span], sched)?);
            temb.extend(time_embedding(t, cfg.arch.time_dim));
        }
        Ok(Inputs {
            x0: self.x0.cast(),
            xt: Tensor::new(self.x0.shape.clone(), xt).cast(),
            temb: Tensor::new(vec![self.t.len(), cfg.arch.time_dim], temb.into_iter().map(S::from_f64).collect()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub ddpm_out: Tensor<f32>,
    pub recon: Tensor<f32>,
    pub latent: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub attention: Tensor<f32>,
}

pub fn apply_model(params: &ModelParams, batch: &Batch, sched: &DiffusionSchedule) -> Result<ModelOutput, DecoderError> {
    let inputs = batch.inputs::<f32>(&params.config, sched)?;
    let mut b = Builder::bind(&params.tensors);
    let out = build_graph(&mut b, &params.config, inputs, true);
    let get = |v: Var| b.tape.value(v).clone();
    Ok(ModelOutput {
        ddpm_out: get(out.ddpm_out.expect("full graph")),
        recon: get(out.recon.expect("full graph")),
        latent: get(out.latent),
        logits: get(out.logits),
        attention: get(out.attention),
    })
}

/// Logits for trials given as `[C*L]` row-major slices. Logits depend only on
/// the clean input, so this equals `apply_model` at `t = 1`, `eps = 0`.
pub fn predict_logits(params: &ModelParams, trials: &[&[f32]]) -> Result<Vec<Vec<f32>>, DecoderError> {
    let cfg = &params.config;
    let per = cfg.in_channels * cfg.len;
    let mut out = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * per);
        for t in chunk {
            if t.len() != per {
                return Err(DecoderError::Shape(format!("trial has {} values, model expects {per}", t.len())));
            }
            data.extend_from_slice(t);
        }
        let mut inputs = Inputs::zeros(cfg, chunk.len());
        inputs.x0 = Tensor::new(vec![chunk.len(), cfg.in_channels, cfg.len], data);
        let mut b = Builder::bind(&params.tensors);
        let o = build_graph(&mut b, cfg, inputs, false);
        out.extend(b.tape.value(o.logits).data.chunks(cfg.n_classes).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let row: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    softmax_row(&row).0.into_iter().map(|p| p as f32).collect()
}

/// The `k` highest-scoring classes, ties going to the lower class id.
pub fn top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::schedule::make_schedule;

    fn tiny() -> ModelConfig {
        let arch = ArchConfig {
            widths: [8, 8, 16],
            groups: 4,
            latent_dim: 8,
            time_dim: 8,
            ..ArchConfig::default()
        };
        ModelConfig::new(3, 16, arch).unwrap()
    }

    fn batch(cfg: &ModelConfig, n: usize, t: usize) -> Batch {
        let len = n * cfg.in_channels * cfg.len;
        let x0: Vec<f32> = (0..len).map(|i| ((i * 7919) % 23) as f32 / 23.0 - 0.5).collect();
        let eps: Vec<f32> = (0..len).map(|i| ((i * 104729) % 17) as f32 / 17.0 - 0.5).collect();
        let shape = vec![n, cfg.in_channels, cfg.len];
        Batch {
            x0: Tensor::new(shape.clone(), x0),
            t: vec![t; n],
            eps: Tensor::new(shape, eps),
            labels: (0..n).map(|i| i % 15).collect(),
        }
    }

    #[test]
    fn output_shapes_and_softmax() {
        let cfg = tiny();
        let p = ModelParams::init(cfg.clone(), 3);
        assert!(p.all_finite());
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let out = apply_model(&p, &batch(&cfg, 2, 10), &s).unwrap();
        assert_eq!(out.ddpm_out.shape, vec![2, 3, 16]);
        assert_eq!(out.recon.shape, vec![2, 3, 16]);
        assert_eq!(out.logits.shape, vec![2, 15]);
        assert_eq!(out.latent.shape, vec![2, 8]);
        for row in out.logits.data.chunks(15) {
            let sum: f32 = softmax(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(out.attention.data.iter().all(|&w| w > 0.0 && w < 1.0));
    }

    #[test]
    fn deterministic_and_predict_matches_full_path() {
        let cfg = tiny();
        let p = ModelParams::init(cfg.clone(), 9);
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut b = batch(&cfg, 3, 1);
        b.eps.data.iter_mut().for_each(|v| *v = 0.0);
        let a1 = apply_model(&p, &b, &s).unwrap();
        let a2 = apply_model(&p, &b, &s).unwrap();
        assert_eq!(a1, a2);
        let trials: Vec<&[f32]> = b.x0.data.chunks(3 * 16).collect();
        let logits = predict_logits(&p, &trials).unwrap();
        for (row, full) in logits.iter().zip(a1.logits.data.chunks(15)) {
            assert_eq!(row.as_slice(), full);
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny();
        assert_eq!(ModelParams::init(cfg.clone(), 1), ModelParams::init(cfg.clone(), 1));
        assert_ne!(ModelParams::init(cfg.clone(), 1), ModelParams::init(cfg, 2));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ModelConfig::new(3, 12, ArchConfig::default()).is_err());
        let cfg = tiny();
        let p = ModelParams::init(cfg.clone(), 0);
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let mut b = batch(&cfg, 2, 1);
        b.labels.pop();
        assert!(apply_model(&p, &b, &s).is_err());
        assert!(predict_logits(&p, &[&[0.0; 5]]).is_err());
    }

    #[test]
    fn top_k_rules() {
        let l = [0.0, 1.0, 3.0, 9.0, 2.0, 9.0, -1.0];
        assert_eq!(top_k(&l, 1), vec![3]);
        assert_eq!(top_k(&l, 3), vec![3, 5, 2]);
        let mut tie = [0.0f32; 15];
        tie[3] = 5.0;
        tie[7] = 5.0;
        assert_eq!(top_k(&tie, 1), vec![3]);
    }

    #[test]
    fn equal_channel_statistics_give_equal_gates() {
        let mut b = Builder::<f64>::init(5);
        let row: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let data: Vec<f64> = (0..6).flat_map(|_| row.clone()).collect();
        let x = b.tape.leaf(Tensor::new(vec![1, 6, 10], data));
        let (_, gate) = b.channel_attention(x, "a", 6, 2);
        let g = &b.tape.value(gate).data;
        assert!(g.iter().all(|&v| (v - g[0]).abs() < 1e-15 && v > 0.0 && v < 1.0));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let data: Vec<f64> = (0..5 * 12).map(|i| ((i * 31) % 13) as f64 / 6.0 - 1.0).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&c| data[c * 12..(c + 1) * 12].to_vec()).collect();
        let gates = |d: Vec<f64>| {
            let mut b = Builder::<f64>::init(11);
            let x = b.tape.leaf(Tensor::new(vec![1, 5, 12], d));
            let (_, gate) = b.channel_attention(x, "a", 5, 2);
            b.tape.value(gate).data.clone()
        };
        let g = gates(data);
        let gp = gates(permuted);
        for (i, &c) in perm.iter().enumerate() {
            assert!((gp[i] - g[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = time_embedding(3, 8);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
    }
}
