use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{forward_packed, gelu_grad_from, Cache, LnCache};
use super::linalg::{gemm, lit, matmul_nt, matmul_tn_acc, Layout, Real};
use super::*;
use crate::parallel::{self, Exec};

/// Examples per work unit. Gradients are summed per chunk and then across
/// chunks in order, so results do not depend on the thread count.
pub const CHUNK_SIZE: usize = 8;

/// One supervised sequence: `labels[i]` is the target after `inputs[..=i]`.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub inputs: &'a [u32],
    pub labels: &'a [u32],
    pub loss_mask: &'a [u8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Mean over examples of each example's masked-mean NLL.
    pub loss: f64,
    pub per_example: Vec<f64>,
}

/// Dropout stream for the example at `index` of a batch drawn with `seed`.
pub(crate) fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_example(i: usize, ex: &Example<'_>) -> Result<usize> {
    if ex.inputs.len() != ex.labels.len() || ex.inputs.len() != ex.loss_mask.len() {
        return Err(Error::Argument(format!(
            "example {i}: inputs/labels/mask lengths {}/{}/{} differ",
            ex.inputs.len(),
            ex.labels.len(),
            ex.loss_mask.len()
        )));
    }
    let m = ex.loss_mask.iter().filter(|&&b| b != 0).count();
    if m == 0 {
        return Err(Error::EmptyLossMask(i));
    }
    Ok(m)
}

/// Batch loss and its exact gradient.
///
/// `seed` fixes the attention-dropout draws, so two calls with the same seed
/// differentiate the same function.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    examples: &[Example<'_>],
    mode: Mode,
    seed: u64,
) -> Result<(LossReport, GradientSet<T>)> {
    loss_and_grads_with(Exec::default(), params, examples, mode, seed)
}

pub fn loss_and_grads_with<T: Real>(
    exec: Exec,
    params: &ModelParams<T>,
    examples: &[Example<'_>],
    mode: Mode,
    seed: u64,
) -> Result<(LossReport, GradientSet<T>)> {
    if examples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    for (i, ex) in examples.iter().enumerate() {
        check_example(i, ex)?;
    }
    let batch = examples.len();
    let chunks: Vec<&[Example<'_>]> = examples.chunks(CHUNK_SIZE).collect();
    let results = parallel::map_indexed(exec, &chunks, |ci, chunk| {
        chunk_loss_grads(params, chunk, ci * CHUNK_SIZE, batch, mode, seed)
    });

    let mut grads = GradientSet::zeros_like(params);
    let mut per_example = Vec::with_capacity(batch);
    for r in results {
        let (losses, g) = r?;
        per_example.extend(losses);
        grads.add_assign(&g);
    }
    let loss = per_example.iter().sum::<f64>() / batch as f64;
    Ok((LossReport { loss, per_example }, grads))
}

fn chunk_loss_grads<T: Real>(
    params: &ModelParams<T>,
    chunk: &[Example<'_>],
    first: usize,
    batch: usize,
    mode: Mode,
    seed: u64,
) -> Result<(Vec<f64>, GradientSet<T>)> {
    let vsz = params.config.vocab_size;
    let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.inputs).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len()).map(|i| example_rng(seed, first + i)).collect();
    let cache = forward_packed(params, &seqs, mode, &mut rngs)?;

    let mut dlogits = vec![T::zero(); cache.rows * vsz];
    let mut losses = Vec::with_capacity(chunk.len());
    for (ex, sp) in chunk.iter().zip(&cache.spans) {
        let m = ex.loss_mask.iter().filter(|&&b| b != 0).count();
        let w = lit::<T>(1.0 / (m as f64 * batch as f64));
        let mut nll_sum = 0.0f64;
        for i in 0..sp.len {
            if ex.loss_mask[i] == 0 {
                continue;
            }
            let label = ex.labels[i] as usize;
            if label >= vsz {
                return Err(Error::Argument(format!("label {label} >= vocab size {vsz}")));
            }
            let r = sp.start + i;
            let row = &cache.logits[r * vsz..(r + 1) * vsz];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            nll_sum += (lse - row[label]).to_f64().unwrap();
            let drow = &mut dlogits[r * vsz..(r + 1) * vsz];
            for (dx, &x) in drow.iter_mut().zip(row) {
                *dx = (x - lse).exp() * w;
            }
            drow[label] -= w;
        }
        losses.push(nll_sum / m as f64);
    }

    let mut grads = GradientSet::zeros_like(params);
    backward(params, &cache, &dlogits, &mut grads);
    Ok((losses, grads))
}

#[allow(clippy::too_many_arguments)]
fn ln_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
    rows: usize,
    d: usize,
) {
    let inv_d = lit::<T>(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
}

fn col_sum_acc<T: Real>(m: &[T], out: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c] += m[r * cols + c];
        }
    }
}

/// Two distinct mutable tensors from the gradient list.
fn pair_mut<T>(ts: &mut [Tensor<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = ts.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

fn backward<T: Real>(params: &ModelParams<T>, cache: &Cache<T>, dlogits: &[T], grads: &mut GradientSet<T>) {
    let cfg = &params.config;
    let (d, f, vsz, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let dh = cfg.head_dim();
    let rows = cache.rows;
    let g = &mut grads.tensors;

    let head = final_slot(cfg, HEAD);
    matmul_tn_acc(&cache.lnf.out, dlogits, &mut g[head].data, rows, d, vsz);
    let mut dhf = vec![T::zero(); rows * d];
    matmul_nt(dlogits, params.t(head), &mut dhf, rows, d, vsz, false);

    // Gradient of the loss w.r.t. the residual stream.
    let mut dx = vec![T::zero(); rows * d];
    {
        let (dg, db) = pair_mut(g, final_slot(cfg, LNF_G), final_slot(cfg, LNF_B));
        ln_backward(&dhf, &cache.lnf, params.t(final_slot(cfg, LNF_G)), dg, db, &mut dx, rows, d);
    }

    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];

        // MLP branch.
        matmul_tn_acc(&lc.g, &dx, &mut g[slot(l, W2)].data, rows, f, d);
        col_sum_acc(&dx, &mut g[slot(l, B2)].data, rows, d);
        let mut du = vec![T::zero(); rows * f];
        matmul_nt(&dx, params.t(slot(l, W2)), &mut du, rows, f, d, false);
        for ((x, &u), &t) in du.iter_mut().zip(&lc.u).zip(&lc.th) {
            *x *= gelu_grad_from(u, t);
        }
        matmul_tn_acc(&lc.ln2.out, &du, &mut g[slot(l, W1)].data, rows, d, f);
        col_sum_acc(&du, &mut g[slot(l, B1)].data, rows, f);
        let mut dh2 = vec![T::zero(); rows * d];
        matmul_nt(&du, params.t(slot(l, W1)), &mut dh2, rows, d, f, false);
        {
            let (dg, db) = pair_mut(g, slot(l, LN2_G), slot(l, LN2_B));
            ln_backward(&dh2, &lc.ln2, params.t(slot(l, LN2_G)), dg, db, &mut dx, rows, d);
        }

        // Attention branch.
        matmul_tn_acc(&lc.att, &dx, &mut g[slot(l, WO)].data, rows, d, d);
        let mut datt = vec![T::zero(); rows * d];
        matmul_nt(&dx, params.t(slot(l, WO)), &mut datt, rows, d, d, false);

        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        for (si, sp) in cache.spans.iter().enumerate() {
            let n = sp.len;
            for h in 0..nh {
                let idx = si * nh + h;
                let off = sp.start * d + h * dh;
                let p = &lc.probs[idx];
                let used: Vec<T>;
                let used_ref: &[T] = match &lc.keep {
                    Some(keep) => {
                        used = p.iter().zip(&keep[idx]).map(|(&a, &b)| a * b).collect();
                        &used
                    }
                    None => p,
                };
                let mut dp = vec![T::zero(); n * n];
                gemm(n, dh, n, T::one(), &datt, Layout::strided(off, d), &lc.v, Layout::strided_t(off, d), T::zero(), &mut dp, Layout::rm(0, n));
                gemm(n, n, dh, T::one(), used_ref, Layout::tr(0, n), &datt, Layout::strided(off, d), T::zero(), &mut dv, Layout::strided(off, d));
                if let Some(keep) = &lc.keep {
                    for (x, &k) in dp.iter_mut().zip(&keep[idx]) {
                        *x *= k;
                    }
                }
                // Softmax backward, restricted to the causal triangle.
                let mut ds = vec![T::zero(); n * n];
                for i in 0..n {
                    let pr = &p[i * n..i * n + i + 1];
                    let dpr = &dp[i * n..i * n + i + 1];
                    let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        ds[i * n + j] = pr[j] * (dpr[j] - dot);
                    }
                }
                gemm(n, n, dh, scale, &ds, Layout::rm(0, n), &lc.k, Layout::strided(off, d), T::zero(), &mut dq, Layout::strided(off, d));
                gemm(n, n, dh, scale, &ds, Layout::tr(0, n), &lc.q, Layout::strided(off, d), T::zero(), &mut dk, Layout::strided(off, d));
            }
        }
        matmul_tn_acc(&lc.ln1.out, &dq, &mut g[slot(l, WQ)].data, rows, d, d);
        matmul_tn_acc(&lc.ln1.out, &dk, &mut g[slot(l, WK)].data, rows, d, d);
        matmul_tn_acc(&lc.ln1.out, &dv, &mut g[slot(l, WV)].data, rows, d, d);
        let mut dh1 = vec![T::zero(); rows * d];
        matmul_nt(&dq, params.t(slot(l, WQ)), &mut dh1, rows, d, d, false);
        matmul_nt(&dk, params.t(slot(l, WK)), &mut dh1, rows, d, d, true);
        matmul_nt(&dv, params.t(slot(l, WV)), &mut dh1, rows, d, d, true);
        {
            let (dg, db) = pair_mut(g, slot(l, LN1_G), slot(l, LN1_B));
            ln_backward(&dh1, &lc.ln1, params.t(slot(l, LN1_G)), dg, db, &mut dx, rows, d);
        }
    }

    let (dtok, dpos) = pair_mut(g, TOK_EMB, POS_EMB);
    for sp in &cache.spans {
        for i in 0..sp.len {
            let r = sp.start + i;
            let id = cache.ids[r] as usize;
            for c in 0..d {
                dtok[id * d + c] += dx[r * d + c];
                dpos[i * d + c] += dx[r * d + c];
            }
        }
    }
}
