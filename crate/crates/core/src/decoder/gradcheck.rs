//! Central-difference checks of the analytic gradients, in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, Batch, Builder, ModelParams};
use super::schedule::DiffusionSchedule;
use super::tape::{Tensor, Var};
use super::train::{loss_graph, LossWeights};
use super::DecoderError;

pub const STEP: f64 = 1e-5;
/// Denominator floor, so gradients that are zero up to rounding do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and numeric derivatives of `f` at the given
/// `(tensor, element)` coordinates.
fn compare(
    tensors: &mut [Tensor<f64>],
    coords: &[(usize, usize)],
    analytic: &[Vec<f64>],
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> GradCheckReport {
    let mut worst: f64 = 0.0;
    for &(ti, ei) in coords {
        let orig = tensors[ti].data[ei];
        tensors[ti].data[ei] = orig + STEP;
        let up = f(tensors);
        tensors[ti].data[ei] = orig - STEP;
        let down = f(tensors);
        tensors[ti].data[ei] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[ti][ei], numeric));
    }
    GradCheckReport { max_rel_err: worst, checked: coords.len() }
}

fn pick(tensors: &[Tensor<f64>], fraction: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let flat: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
        .collect();
    let n = ((flat.len() as f64 * fraction).ceil() as usize).clamp(1, flat.len());
    let mut idx = sample(rng, flat.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| flat[i]).collect()
}

fn collect_grads(b: &Builder<'_, f64>, root: Var, tensors: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let g = b.tape.backward(root);
    b.params
        .iter()
        .zip(tensors)
        .map(|(&v, t)| g.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect()
}

/// Full-model check of the total loss over a random `fraction` of parameters.
pub fn grad_check(
    params: &ModelParams,
    batch: &Batch,
    sched: &DiffusionSchedule,
    w: LossWeights,
    fraction: f64,
    seed: u64,
) -> Result<GradCheckReport, DecoderError> {
    let cfg = &params.config;
    let mut tensors: Vec<Tensor<f64>> = params.cast();
    let analytic = {
        let g = loss_graph(&tensors, cfg, batch, sched, w)?;
        collect_grads(&g.builder, g.root, &tensors)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = pick(&tensors, fraction, &mut rng);
    let f = |ts: &[Tensor<f64>]| {
        loss_graph(ts, cfg, batch, sched, w)
            .map(|g| g.builder.tape.value(g.root).data[0])
            .expect("batch validated above")
    };
    Ok(compare(&mut tensors, &coords, &analytic, f))
}

/// Checks one block in isolation: random input of `in_shape`, the block's
/// output contracted against fixed random weights as the scalar objective.
fn check_block(
    in_shape: &[usize],
    seed: u64,
    block: impl Fn(&mut Builder<'_, f64>, Var) -> Var,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = in_shape.iter().product();
    let input = Tensor::new(in_shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect());

    let mut init = Builder::<f64>::init(seed);
    let x = init.tape.leaf(input.clone());
    let y = block(&mut init, x);
    let out_len = init.tape.value(y).len();
    let probe: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, mut tensors) = init.into_created();

    let objective = |b: &mut Builder<'_, f64>| {
        let x = b.tape.leaf(input.clone());
        let y = block(b, x);
        let shape = b.tape.shape(y).to_vec();
        let target = b.tape.leaf(Tensor::new(shape, probe.clone()));
        b.tape.mse(y, target)
    };
    let analytic = {
        let mut b = Builder::bind(&tensors);
        let root = objective(&mut b);
        collect_grads(&b, root, &tensors)
    };
    let coords = pick(&tensors, 1.0, &mut rng);
    let f = |ts: &[Tensor<f64>]| {
        let mut b = Builder::bind(ts);
        let root = objective(&mut b);
        b.tape.value(root).data[0]
    };
    compare(&mut tensors, &coords, &analytic, f)
}

/// Channel attention on a `[batch, channels, len]` input.
pub fn grad_check_attention(batch: usize, channels: usize, len: usize, reduction: usize, seed: u64) -> GradCheckReport {
    check_block(&[batch, channels, len], seed, |b, x| b.channel_attention(x, "attn", channels, reduction).0)
}

/// The KAN classifier layer with the default grid.
pub fn grad_check_kan(batch: usize, inp: usize, out: usize, seed: u64) -> GradCheckReport {
    let grid = ArchConfig::default().grid();
    check_block(&[batch, inp], seed, |b, x| b.kan(x, "kan", inp, out, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn blocks_pass() {
        assert!(grad_check_attention(2, 8, 6, 4, 1).max_rel_err < 1e-4);
        assert!(grad_check_kan(3, 6, 4, 2).max_rel_err < 1e-4);
    }
}
