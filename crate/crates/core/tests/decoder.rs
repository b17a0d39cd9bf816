use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use viseme_core::alignment::VisemeClass;
use viseme_core::dataset::{LabeledTrial, TrialMeta};
use viseme_core::decoder::tape::Tensor;
use viseme_core::decoder::*;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        widths: [4, 8, 8],
        groups: 2,
        latent_dim: 8,
        time_dim: 8,
        kernel: 3,
        ..ArchConfig::default()
    }
}

fn random_batch(n: usize, c: usize, l: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n * c * l;
    let shape = vec![n, c, l];
    Batch {
        x0: Tensor::new(shape.clone(), (0..total).map(|_| rng.sample(StandardNormal)).collect()),
        t: (0..n).map(|_| rng.random_range(1..=100)).collect(),
        eps: Tensor::new(shape, (0..total).map(|_| rng.sample(StandardNormal)).collect()),
        labels: (0..n).map(|_| rng.random_range(0..15)).collect(),
    }
}

fn trial(data: Vec<f32>, c: usize, l: usize, label: u8) -> LabeledTrial {
    LabeledTrial {
        data,
        n_channels: c,
        len: l,
        window_ms: l as u32,
        meta: TrialMeta {
            label: VisemeClass::new(label).unwrap(),
            sentence_id: 1,
            interval_index: 0,
            source_span: (0.0, 0.1),
        },
    }
}

#[test]
fn full_tiny_model_gradients_match_central_differences() {
    let cfg = ModelConfig::new(2, 16, tiny_arch()).unwrap();
    let params = ModelParams::init(cfg, 21);
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let batch = random_batch(2, 2, 16, 5);
    let report = grad_check(&params, &batch, &sched, LossWeights::default(), 0.05, 3).unwrap();
    assert!(report.checked > 50);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn block_gradients_match_central_differences() {
    for seed in 0..3 {
        let a = grad_check_attention(3, 16, 8, 4, seed);
        assert!(a.max_rel_err < 1e-4, "attention {a:?}");
        let k = grad_check_kan(4, 16, 15, seed);
        assert!(k.max_rel_err < 1e-4, "kan {k:?}");
    }
}

#[test]
fn total_is_weighted_sum_and_terms_are_nonnegative() {
    let cfg = ModelConfig::new(2, 16, tiny_arch()).unwrap();
    let params = ModelParams::init(cfg, 1);
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let w = LossWeights { ddpm: 0.3, ae: 2.0, cls: 0.7 };
    let l = loss(&params, &random_batch(3, 2, 16, 8), &sched, w).unwrap();
    assert!(l.ddpm >= 0.0 && l.ae >= 0.0 && l.cls >= 0.0);
    assert!((l.total - (0.3 * l.ddpm + 2.0 * l.ae + 0.7 * l.cls)).abs() < 1e-12);
}

#[test]
fn uniform_logits_on_zero_input_give_ln15() {
    let cfg = ModelConfig::new(2, 16, tiny_arch()).unwrap();
    let mut params = ModelParams::init(cfg, 1);
    // zero every weight: the denoiser and decoder output zero and the classifier is flat
    for t in &mut params.tensors {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let mut batch = random_batch(4, 2, 16, 2);
    batch.x0.data.iter_mut().for_each(|v| *v = 0.0);
    batch.eps.data.iter_mut().for_each(|v| *v = 0.0);
    let l = loss(&params, &batch, &sched, LossWeights::default()).unwrap();
    assert_eq!(l.ddpm, 0.0);
    assert_eq!(l.ae, 0.0);
    assert!((l.cls - 15f64.ln()).abs() < 1e-6);
}

#[test]
fn tiny_batch_loss_halves_within_200_steps() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        optimizer: OptimizerKind::Sgd,
        arch: ArchConfig { widths: [8, 8, 16], groups: 4, latent_dim: 16, time_dim: 16, ..ArchConfig::default() },
        seed: 7,
        ..TrainConfig::default()
    };
    let model = ModelConfig::new(2, 64, cfg.arch.clone()).unwrap();
    let mut params = ModelParams::init(model, cfg.seed);
    let sched = cfg.schedule().unwrap();
    let batch = random_batch(4, 2, 64, 11);
    let mut opt = train::Optimizer::new(&cfg, &params);
    let initial = loss(&params, &batch, &sched, cfg.weights()).unwrap().total;
    for _ in 0..200 {
        let (_, mut g) = loss_and_grad(&params, &batch, &sched, cfg.weights()).unwrap();
        opt.step(&mut params, &mut g);
    }
    let last = loss(&params, &batch, &sched, cfg.weights()).unwrap().total;
    assert!(last <= 0.5 * initial, "initial {initial}, final {last}");
}

#[test]
fn forward_diffuse_monte_carlo_moments() {
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let t = 50;
    let x0 = [1.5f32, -0.7, 0.0, 3.0];
    let ab = sched.alpha_bar(t);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..n {
        let eps: Vec<f32> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let xt = forward_diffuse(&x0, t, &eps, &sched).unwrap();
        for i in 0..4 {
            sum[i] += xt[i] as f64;
            sq[i] += (xt[i] as f64).powi(2);
        }
    }
    let var_true = 1.0 - ab;
    for i in 0..4 {
        let mean = sum[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        let mean_se = (var_true / n as f64).sqrt();
        let var_se = var_true * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - ab.sqrt() * x0[i] as f64).abs() < 4.0 * mean_se, "mean {i}");
        assert!((var - var_true).abs() < 4.0 * var_se, "variance {i}");
    }
}

fn separable_trials(n: usize, seed: u64) -> Vec<LabeledTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 3) as u8;
            let data = (0..2 * 16)
                .map(|j| {
                    let ch = j / 16;
                    let sign = if (label as usize + ch) % 2 == 0 { 1.0 } else { -1.0 };
                    let base = if label == 0 { 0.0 } else { sign * ((j % 16) as f32 * 0.8).sin() };
                    base + 0.1 * rng.sample::<f32, _>(StandardNormal)
                })
                .collect();
            trial(data, 2, 16, label)
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_reloadable() {
    let trials = separable_trials(24, 3);
    let refs: Vec<&LabeledTrial> = trials.iter().collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        arch: tiny_arch(),
        seed: 5,
        ..TrainConfig::default()
    };
    let (p1, h1) = train(&refs, &cfg).unwrap();
    let (p2, h2) = train(&refs, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let bits: Vec<u64> = h1.step_losses.iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits, h2.step_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    let ck = Checkpoint { params: p1.clone(), train: cfg.clone(), history: h1 };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let data: Vec<&[f32]> = trials.iter().map(|t| t.data.as_slice()).collect();
    assert_eq!(predict_logits(&back.params, &data).unwrap(), predict_logits(&p1, &data).unwrap());
}

#[test]
fn training_rejects_empty_and_reports_divergence() {
    assert!(matches!(train(&[], &TrainConfig::default()), Err(DecoderError::EmptyDataset)));
    let mut trials = separable_trials(4, 1);
    trials[2].data[0] = f32::NAN;
    let refs: Vec<&LabeledTrial> = trials.iter().collect();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, arch: tiny_arch(), ..TrainConfig::default() };
    assert!(matches!(train(&refs, &cfg), Err(DecoderError::Diverged { .. })));
}

#[test]
fn small_separable_set_is_learned() {
    let trials = separable_trials(48, 9);
    let refs: Vec<&LabeledTrial> = trials.iter().collect();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 8,
        learning_rate: 3e-3,
        optimizer: OptimizerKind::Adam,
        arch: tiny_arch(),
        seed: 2,
        ..TrainConfig::default()
    };
    let (p, _) = train(&refs, &cfg).unwrap();
    let data: Vec<&[f32]> = trials.iter().map(|t| t.data.as_slice()).collect();
    let logits = predict_logits(&p, &data).unwrap();
    let correct = logits
        .iter()
        .zip(&trials)
        .filter(|(l, t)| top_k(l, 1)[0] == t.label().index())
        .count();
    assert!(correct as f64 >= 0.9 * trials.len() as f64, "{correct}/{}", trials.len());
}
