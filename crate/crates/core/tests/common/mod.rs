//! Naive f64 reference decoder used as an oracle. Written directly from the
//! block definition with plain loops; shares no code with the engine beyond
//! reading weight tensors.

#![allow(dead_code)]

use sattn_core::attention::LayerRole;
use sattn_core::{ModelConfig, TokenId, Weights};

type Mat = Vec<Vec<f64>>;

fn to_mat(m: &sattn_core::Matrix) -> Mat {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn mul(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| row.iter().enumerate().map(|(k, &v)| v * w[k][j]).sum())
                .collect()
        })
        .collect()
}

fn rms(x: &[f64], g: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let d = (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, &g)| f64::from(g) * v / d).collect()
}

fn rope(v: &mut [f64], pos: usize, theta: f64) {
    let d = v.len();
    for k in 0..d / 2 {
        let ang = pos as f64 * theta.powf(-(2.0 * k as f64) / d as f64);
        let (s, c) = ang.sin_cos();
        let (a, b) = (v[2 * k], v[2 * k + 1]);
        v[2 * k] = a * c - b * s;
        v[2 * k + 1] = a * s + b * c;
    }
}

/// Per-layer, per-head `T×T` attention weights and final logits.
pub struct OracleOutput {
    pub logits: Mat,
    pub attention: Vec<Vec<Mat>>,
}

pub fn oracle_forward(config: &ModelConfig, weights: &Weights, ids: &[TokenId]) -> OracleOutput {
    let c = config;
    let t = ids.len();
    let (h, hk, dh) = (c.n_heads, c.n_kv_heads, c.d_head);
    let group = h / hk;
    let eps = f64::from(c.norm_eps);
    let theta = f64::from(c.rope_theta);
    let roles = c.roles().unwrap();

    let mut x: Mat = ids.iter().map(|&id| to_mat(&weights.embed)[id as usize].clone()).collect();
    let mut kv_of_layer: Vec<Option<(Mat, Mat)>> = vec![None; c.n_layers];
    let mut attention: Vec<Vec<Mat>> = Vec::new();

    for (l, lw) in weights.layers.iter().enumerate() {
        let xn: Mat = x.iter().map(|r| rms(r, &lw.norm1, eps)).collect();
        let v_own = mul(&xn, &to_mat(&lw.wv));
        let a: Vec<Mat> = match roles[l] {
            LayerRole::Member { anchor, .. } => attention[anchor].clone(),
            _ => {
                let mut q = mul(&xn, &to_mat(&lw.wq));
                for (i, row) in q.iter_mut().enumerate() {
                    for head in row.chunks_mut(dh) {
                        rope(head, i, theta);
                    }
                }
                let k = match c.cla_map.parent_of(l) {
                    Some(p) => kv_of_layer[p].clone().unwrap().0,
                    None => {
                        let mut k = mul(&xn, &to_mat(&lw.wk));
                        for (i, row) in k.iter_mut().enumerate() {
                            for head in row.chunks_mut(dh) {
                                rope(head, i, theta);
                            }
                        }
                        k
                    }
                };
                let scale = 1.0 / (dh as f64).sqrt();
                (0..h)
                    .map(|head| {
                        let g = head / group;
                        (0..t)
                            .map(|i| {
                                let s: Vec<f64> = (0..=i)
                                    .map(|j| {
                                        (0..dh)
                                            .map(|d| q[i][head * dh + d] * k[j][g * dh + d])
                                            .sum::<f64>()
                                            * scale
                                    })
                                    .collect();
                                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                                (0..t)
                                    .map(|j| if j <= i { (s[j] - m).exp() / z } else { 0.0 })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        let v = match c.cla_map.parent_of(l) {
            Some(p) => kv_of_layer[p].clone().unwrap().1,
            None => v_own,
        };
        if c.cla_map.parent_of(l).is_none() {
            // keys are only needed by CLA children, recompute them here
            let mut k = mul(&xn, &to_mat(&lw.wk));
            for (i, row) in k.iter_mut().enumerate() {
                for head in row.chunks_mut(dh) {
                    rope(head, i, theta);
                }
            }
            kv_of_layer[l] = Some((k, v.clone()));
        }
        let mut heads_out = vec![vec![0.0; h * dh]; t];
        for head in 0..h {
            let g = head / group;
            for i in 0..t {
                for d in 0..dh {
                    heads_out[i][head * dh + d] = (0..t).map(|j| a[head][i][j] * v[j][g * dh + d]).sum();
                }
            }
        }
        let o = mul(&heads_out, &to_mat(&lw.wo));
        for (xr, or) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(or) {
                *a += b;
            }
        }
        let xn: Mat = x.iter().map(|r| rms(r, &lw.norm2, eps)).collect();
        let g1 = mul(&xn, &to_mat(&lw.w1));
        let g3 = mul(&xn, &to_mat(&lw.w3));
        let hid: Mat = g1
            .iter()
            .zip(&g3)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x / (1.0 + (-x).exp()) * y).collect())
            .collect();
        let down = mul(&hid, &to_mat(&lw.w2));
        for (xr, dr) in x.iter_mut().zip(&down) {
            for (a, b) in xr.iter_mut().zip(dr) {
                *a += b;
            }
        }
        attention.push(a);
    }
    let xn: Mat = x.iter().map(|r| rms(r, &weights.final_norm, eps)).collect();
    OracleOutput {
        logits: mul(&xn, &to_mat(&weights.lm_head)),
        attention,
    }
}

/// Perplexity from logits with an f64 log-softmax.
pub fn oracle_perplexity(logits: &sattn_core::Matrix, ids: &[TokenId]) -> f64 {
    let mut nll = 0.0;
    for (t, &next) in ids[1..].iter().enumerate() {
        let row: Vec<f64> = logits.row(t).iter().map(|&v| f64::from(v)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        nll += lse - row[next as usize];
    }
    (nll / (ids.len() - 1) as f64).exp()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Deterministic pseudo-random token ids.
pub fn token_ids(seed: u64, len: usize, vocab: usize) -> Vec<TokenId> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..vocab as TokenId)).collect()
}
