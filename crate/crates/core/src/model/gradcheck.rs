//! Central finite-difference verification of [`loss_and_grads`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub coordinates: usize,
}

/// Max over sampled coordinates of `|a - n| / (|a| + |n| + 1e-12)`.
///
/// Samples `per_tensor` coordinates from every parameter tensor. The dropout
/// seed is held fixed so every loss evaluation sees the same masks.
pub fn grad_check(
    params: &ModelParams<f64>,
    examples: &[Example<'_>],
    mode: Mode,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    grad_check_with(params, examples, mode, epsilon, per_tensor, seed, |_| {})
}

/// Like [`grad_check`], with a hook that may tamper with the analytic
/// gradient before comparison.
pub fn grad_check_with<F>(
    params: &ModelParams<f64>,
    examples: &[Example<'_>],
    mode: Mode,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
    tamper: F,
) -> Result<GradCheck>
where
    F: Fn(&mut GradientSet<f64>),
{
    let dropout_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let (_, mut analytic) = loss_and_grads(params, examples, mode, dropout_seed)?;
    tamper(&mut analytic);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut coordinates = 0;
    for ti in 0..params.tensors.len() {
        let n = params.tensors[ti].len();
        for _ in 0..per_tensor {
            let ci = rng.random_range(0..n);
            let orig = probe.tensors[ti].data[ci];
            probe.tensors[ti].data[ci] = orig + epsilon;
            let (plus, _) = loss_and_grads(&probe, examples, mode, dropout_seed)?;
            probe.tensors[ti].data[ci] = orig - epsilon;
            let (minus, _) = loss_and_grads(&probe, examples, mode, dropout_seed)?;
            probe.tensors[ti].data[ci] = orig;

            let numeric = (plus.loss - minus.loss) / (2.0 * epsilon);
            let a = analytic.tensors[ti].data[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > worst.0 {
                worst = (rel, params.tensors[ti].name.clone());
            }
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst.0,
        worst_tensor: worst.1,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type Data = Vec<(Vec<u32>, Vec<u32>, Vec<u8>)>;

    fn setup(p: f64) -> (ModelParams<f64>, Data) {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 10,
            vocab_size: 13,
            attn_dropout: p,
        };
        let params = ModelParams::init(&cfg, 21).unwrap();
        let data = vec![
            (vec![1, 5, 6, 7, 8], vec![5, 6, 7, 8, 2], vec![0, 1, 1, 1, 1]),
            (vec![1, 3, 9, 4, 10, 11], vec![3, 9, 4, 10, 11, 2], vec![0, 0, 0, 1, 1, 1]),
        ];
        (params, data)
    }

    fn examples(data: &[(Vec<u32>, Vec<u32>, Vec<u8>)]) -> Vec<Example<'_>> {
        data.iter()
            .map(|(i, l, m)| Example {
                inputs: i,
                labels: l,
                loss_mask: m,
            })
            .collect()
    }

    #[test]
    fn small_model_passes() {
        let (params, data) = setup(0.0);
        let r = grad_check(&params, &examples(&data), Mode::Eval, 1e-5, 6, 3).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn passes_with_dropout_draws_held_fixed() {
        let (params, data) = setup(0.4);
        let r = grad_check(&params, &examples(&data), Mode::Train, 1e-5, 6, 3).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn sign_flip_is_caught() {
        let (params, data) = setup(0.0);
        let r = grad_check_with(&params, &examples(&data), Mode::Eval, 1e-5, 4, 3, |g| {
            for t in &mut g.tensors {
                if t.name.ends_with("mlp.w1") {
                    t.data.iter_mut().for_each(|x| *x = -*x);
                }
            }
        })
        .unwrap();
        assert!(r.max_relative_error > 0.1, "{r:?}");
    }
}
