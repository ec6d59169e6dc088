#![allow(dead_code)]

pub mod cli;

use layerdistill::transformer::TransformerConfig;
use layerdistill::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rows of `l` flags, each with at least one real position at the front.
pub fn random_pad_mask(rng: &mut ChaCha8Rng, b: usize, l: usize) -> Vec<Vec<bool>> {
    (0..b)
        .map(|_| {
            let real = rng.random_range(1..=l);
            (0..l).map(|i| i < real).collect()
        })
        .collect()
}

/// Compares analytic gradients of `f` against central differences with
/// step `h` at up to `per_input` random coordinates of every input.
/// Returns the worst `|a - n| / max(|a|, |n|)` among coordinates above
/// `atol`, or panics with a description on a mismatch.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor], f: F, rtol: f64, per_input: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-5;
    const ATOL: f64 = 1e-8;
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut pick = rng(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let n = input.numel();
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| pick.random_range(0..n)).collect()
        };
        for i in coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            let diff = (a - numeric).abs();
            if diff <= ATOL {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            worst = worst.max(rel);
            assert!(
                rel <= rtol,
                "{name}: input {k} coord {i}: analytic {a:e} numeric {numeric:e} (rel {rel:e})"
            );
        }
    }
    worst
}

/// The tiny shape used for gradient checks of the whole model.
pub fn tiny_config(layers: usize, hidden: usize, seed: u64) -> TransformerConfig {
    TransformerConfig {
        num_layers: layers,
        hidden,
        ffn: 2 * hidden,
        heads: 2,
        vocab_size: 11,
        max_len: 6,
        num_classes: 3,
        dropout: 0.0,
        mlm_head: false,
        seed,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, mask: &[Vec<bool>], vocab: usize) -> Vec<Vec<u32>> {
    mask.iter()
        .map(|row| {
            row.iter()
                .map(|&real| if real { rng.random_range(4..vocab as u32) } else { 0 })
                .collect()
        })
        .collect()
}
