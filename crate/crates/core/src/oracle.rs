//! Reference computations that share no arithmetic with the model path.
//!
//! Everything here uses plain nested loops in `f64` over the raw parameter
//! arrays, evaluates RoPE angles directly, and computes attention for each
//! query over an explicit list of keys. It is slow on purpose; the verify
//! suite and the tests compare the optimized forward pass against it.

use crate::model::{ModelWeights, Scalar, TokenId};

fn matvec(x: &[f64], w: &[f32], cols: usize) -> Vec<f64> {
    // x (len rows) times w (rows × cols), row-major.
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j] as f64;
        }
    }
    out
}

fn rms(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + crate::model::RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, &g)| v * inv * g as f64).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn rope_in_place(v: &mut [f64], position: usize, theta_base: f64) {
    let d = v.len();
    for p in 0..d / 2 {
        let angle = position as f64 / theta_base.powf(2.0 * p as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        let (x, y) = (v[2 * p], v[2 * p + 1]);
        v[2 * p] = x * c - y * s;
        v[2 * p + 1] = x * s + y * c;
    }
}

/// Logits for every query, where query `q` attends to exactly the entries
/// listed in `keys[q]` at the given coordinates.
pub fn reference_logits(
    weights: &ModelWeights<f32>,
    tokens: &[TokenId],
    coordinates: &[usize],
    keys: &[Vec<usize>],
) -> Vec<Vec<f64>> {
    let c = &weights.config;
    let (n, d, nh, hd) = (tokens.len(), c.d_model, c.num_heads, c.head_dim());
    let emb = weights.embedding.as_slice().unwrap();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            emb[t as usize * d..(t as usize + 1) * d]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();

    for layer in &weights.layers {
        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|row| rms(row, layer.attn_norm.as_slice().unwrap()))
            .collect();
        let proj = |w: &ndarray::Array2<f32>| -> Vec<Vec<f64>> {
            a.iter().map(|row| matvec(row, w.as_slice().unwrap(), d)).collect()
        };
        let mut q = proj(&layer.wq);
        let mut k = proj(&layer.wk);
        let v = proj(&layer.wv);
        for i in 0..n {
            for h in 0..nh {
                rope_in_place(&mut q[i][h * hd..(h + 1) * hd], coordinates[i], c.theta_base);
                rope_in_place(&mut k[i][h * hd..(h + 1) * hd], coordinates[i], c.theta_base);
            }
        }
        let mut attn = vec![vec![0.0; d]; n];
        for i in 0..n {
            for h in 0..nh {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = keys[i]
                    .iter()
                    .map(|&j| {
                        q[i][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (&j, e) in keys[i].iter().zip(&exps) {
                    for t in r.clone() {
                        attn[i][t] += e / z * v[j][t];
                    }
                }
            }
        }
        for i in 0..n {
            let o = matvec(&attn[i], layer.wo.as_slice().unwrap(), d);
            for t in 0..d {
                x[i][t] += o[t];
            }
            let b = rms(&x[i], layer.mlp_norm.as_slice().unwrap());
            let h: Vec<f64> = matvec(&b, layer.w1.as_slice().unwrap(), c.d_ff)
                .into_iter()
                .map(gelu)
                .collect();
            let m = matvec(&h, layer.w2.as_slice().unwrap(), d);
            for t in 0..d {
                x[i][t] += m[t];
            }
        }
    }

    x.iter()
        .map(|row| {
            let y = rms(row, weights.final_norm.as_slice().unwrap());
            (0..c.vocab_size)
                .map(|t| y.iter().zip(&emb[t * d..(t + 1) * d]).map(|(a, &b)| a * b as f64).sum())
                .collect()
        })
        .collect()
}

/// Conventional dense pass: positions `0..n`, every entry sees every entry.
pub fn reference_dense_logits(weights: &ModelWeights<f32>, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let coords: Vec<usize> = (0..n).collect();
    let keys = vec![(0..n).collect::<Vec<_>>(); n];
    reference_logits(weights, tokens, &coords, &keys)
}

/// Largest absolute difference between a model logit matrix and a reference.
pub fn max_abs_diff<F: Scalar>(logits: &ndarray::Array2<F>, reference: &[Vec<f64>], rows: &[usize]) -> f64 {
    rows.iter()
        .flat_map(|&i| {
            logits
                .row(i)
                .iter()
                .zip(&reference[i])
                .map(|(&a, &b)| (a.to_f64().expect("finite float") - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
