use rand::Rng;

use super::linalg::{gemm, lit, matmul, Layout, Real};
use super::*;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// A sequence inside a packed batch: rows `start..start + len`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Span {
    pub start: usize,
    pub len: usize,
}

pub(crate) struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    pub out: Vec<T>,
}

pub(crate) struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Softmax probabilities per (sequence, head), `len x len`, pre-dropout.
    pub probs: Vec<Vec<T>>,
    /// Inverted-dropout multipliers matching `probs`, when dropout was drawn.
    pub keep: Option<Vec<Vec<T>>>,
    pub att: Vec<T>,
    pub ln2: LnCache<T>,
    pub u: Vec<T>,
    /// `tanh` of the GELU inner term, reused by the backward pass.
    pub th: Vec<T>,
    pub g: Vec<T>,
}

pub(crate) struct Cache<T> {
    pub rows: usize,
    pub spans: Vec<Span>,
    pub ids: Vec<u32>,
    pub layers: Vec<LayerCache<T>>,
    pub lnf: LnCache<T>,
    pub logits: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], rows: usize, d: usize) -> LnCache<T> {
    let eps = lit::<T>(LN_EPS);
    let inv_d = lit::<T>(1.0 / d as f64);
    let mut xhat = vec![T::zero(); rows * d];
    let mut out = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            out[r * d + c] = xh * gain[c] + bias[c];
        }
    }
    LnCache { xhat, rstd, out }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(x)` through one `exp`; saturates correctly at both ends.
#[inline]
fn tanh_exp<T: Real>(x: T) -> T {
    let two = lit::<T>(2.0);
    T::one() - two / ((two * x).exp() + T::one())
}

/// `tanh(sqrt(2/pi) * (u + 0.044715 u^3))`.
#[inline]
pub(crate) fn gelu_tanh<T: Real>(u: T) -> T {
    tanh_exp(lit::<T>(GELU_C) * (u + lit::<T>(GELU_A) * u * u * u))
}

#[inline]
pub(crate) fn gelu_from<T: Real>(u: T, t: T) -> T {
    lit::<T>(0.5) * u * (T::one() + t)
}

/// Derivative of GELU at `u`, given `t = gelu_tanh(u)`.
#[inline]
pub(crate) fn gelu_grad_from<T: Real>(u: T, t: T) -> T {
    let half = lit::<T>(0.5);
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * u * u)
}

/// Draws an inverted-dropout keep mask for one attention row.
pub fn attention_dropout_row<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() >= p).collect()
}

/// Full forward pass over a packed batch. One rng per sequence is consumed
/// when dropout is active (`Mode::Train` with a positive rate).
pub(crate) fn forward_packed<T: Real, R: Rng>(
    params: &ModelParams<T>,
    seqs: &[&[u32]],
    mode: Mode,
    rngs: &mut [R],
) -> Result<Cache<T>> {
    let cfg = &params.config;
    let (d, f, vsz, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let dh = cfg.head_dim();
    let p_drop = cfg.attn_dropout;
    let dropout = mode == Mode::Train && p_drop > 0.0;
    if dropout {
        assert_eq!(rngs.len(), seqs.len(), "one rng per sequence");
    }

    let mut spans = Vec::with_capacity(seqs.len());
    let mut ids = Vec::new();
    for s in seqs {
        if s.len() > cfg.max_seq_len {
            return Err(Error::TooLong {
                len: s.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = s.iter().find(|&&id| id as usize >= vsz) {
            return Err(Error::Argument(format!("token id {bad} >= vocab size {vsz}")));
        }
        spans.push(Span {
            start: ids.len(),
            len: s.len(),
        });
        ids.extend_from_slice(s);
    }
    let rows = ids.len();

    let tok = params.t(TOK_EMB);
    let pos = params.t(POS_EMB);
    let mut x = vec![T::zero(); rows * d];
    for sp in &spans {
        for i in 0..sp.len {
            let r = sp.start + i;
            let id = ids[r] as usize;
            for c in 0..d {
                x[r * d + c] = tok[id * d + c] + pos[i * d + c];
            }
        }
    }

    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let keep_scale = lit::<T>(1.0 / (1.0 - p_drop));
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let ln1 = layer_norm(&x, params.t(slot(l, LN1_G)), params.t(slot(l, LN1_B)), rows, d);
        let mut q = vec![T::zero(); rows * d];
        let mut k = vec![T::zero(); rows * d];
        let mut v = vec![T::zero(); rows * d];
        matmul(&ln1.out, params.t(slot(l, WQ)), &mut q, rows, d, d, false);
        matmul(&ln1.out, params.t(slot(l, WK)), &mut k, rows, d, d, false);
        matmul(&ln1.out, params.t(slot(l, WV)), &mut v, rows, d, d, false);

        let mut att = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(spans.len() * nh);
        let mut keeps = dropout.then(|| Vec::with_capacity(spans.len() * nh));
        for (si, sp) in spans.iter().enumerate() {
            let n = sp.len;
            for h in 0..nh {
                let off = sp.start * d + h * dh;
                let mut s = vec![T::zero(); n * n];
                gemm(n, dh, n, scale, &q, Layout::strided(off, d), &k, Layout::strided_t(off, d), T::zero(), &mut s, Layout::rm(0, n));
                for i in 0..n {
                    let row = &mut s[i * n..(i + 1) * n];
                    let mx = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for val in row[..=i].iter_mut() {
                        *val = (*val - mx).exp();
                        z += *val;
                    }
                    for val in row[..=i].iter_mut() {
                        *val /= z;
                    }
                    for val in row[i + 1..].iter_mut() {
                        *val = T::zero();
                    }
                }
                let used = if let Some(keeps) = keeps.as_mut() {
                    let rng = &mut rngs[si];
                    let mut keep = vec![T::zero(); n * n];
                    for i in 0..n {
                        for (j, kept) in attention_dropout_row(i + 1, p_drop, rng).into_iter().enumerate() {
                            if kept {
                                keep[i * n + j] = keep_scale;
                            }
                        }
                    }
                    let dropped: Vec<T> = s.iter().zip(&keep).map(|(&a, &b)| a * b).collect();
                    keeps.push(keep);
                    dropped
                } else {
                    s.clone()
                };
                gemm(n, n, dh, T::one(), &used, Layout::rm(0, n), &v, Layout::strided(off, d), T::zero(), &mut att, Layout::strided(off, d));
                probs.push(s);
            }
        }
        matmul(&att, params.t(slot(l, WO)), &mut x, rows, d, d, true);

        let ln2 = layer_norm(&x, params.t(slot(l, LN2_G)), params.t(slot(l, LN2_B)), rows, d);
        let mut u = vec![T::zero(); rows * f];
        matmul(&ln2.out, params.t(slot(l, W1)), &mut u, rows, d, f, false);
        let b1 = params.t(slot(l, B1));
        for r in 0..rows {
            for c in 0..f {
                u[r * f + c] += b1[c];
            }
        }
        let th: Vec<T> = u.iter().map(|&z| gelu_tanh(z)).collect();
        let g: Vec<T> = u.iter().zip(&th).map(|(&z, &t)| gelu_from(z, t)).collect();
        matmul(&g, params.t(slot(l, W2)), &mut x, rows, f, d, true);
        let b2 = params.t(slot(l, B2));
        for r in 0..rows {
            for c in 0..d {
                x[r * d + c] += b2[c];
            }
        }
        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            keep: keeps,
            att,
            ln2,
            u,
            th,
            g,
        });
    }

    let lnf = layer_norm(
        &x,
        params.t(final_slot(cfg, LNF_G)),
        params.t(final_slot(cfg, LNF_B)),
        rows,
        d,
    );
    let mut logits = vec![T::zero(); rows * vsz];
    matmul(&lnf.out, params.t(final_slot(cfg, HEAD)), &mut logits, rows, d, vsz, false);

    Ok(Cache {
        rows,
        spans,
        ids,
        layers,
        lnf,
        logits,
    })
}

/// Next-token logits for one sequence, `len x vocab_size`, row-major.
///
/// Row `k` depends only on `ids[..=k]`. In `Mode::Eval` the result is a pure
/// function of `(params, ids)`; `rng` is only read when training with
/// attention dropout.
pub fn forward<T: Real, R: Rng>(
    params: &ModelParams<T>,
    ids: &[u32],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    let cache = forward_packed(params, &[ids], mode, std::slice::from_mut(rng))?;
    Ok(cache.logits)
}

/// Eval-mode logits for several sequences at once, one flat matrix each.
pub fn forward_batch_logits<T: Real>(params: &ModelParams<T>, seqs: &[&[u32]]) -> Result<Vec<Vec<T>>> {
    let vsz = params.config.vocab_size;
    let cache = forward_packed::<T, rand_chacha::ChaCha8Rng>(params, seqs, Mode::Eval, &mut [])?;
    Ok(cache
        .spans
        .iter()
        .map(|sp| cache.logits[sp.start * vsz..(sp.start + sp.len) * vsz].to_vec())
        .collect())
}
