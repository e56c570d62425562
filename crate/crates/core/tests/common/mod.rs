//! Reference implementations for integration tests. Everything here is
//! written with plain nested loops over `f64` and shares no code with the
//! engine beyond reading tensors out of the parameter store.

#![allow(dead_code)]

use massweights::model::{names, NormKind, Positional, ResidualVariant};
use massweights::{ModelConfig, ParameterStore, Scalar};

pub type Mat = Vec<Vec<f64>>;

pub fn mat<T: Scalar>(params: &ParameterStore<T>, name: &str) -> Mat {
    let t = params.get(name).unwrap_or_else(|e| panic!("{e}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect())
        .collect()
}

pub fn vector<T: Scalar>(params: &ParameterStore<T>, name: &str) -> Vec<f64> {
    params
        .get(name)
        .unwrap_or_else(|e| panic!("{e}"))
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect()
}

/// `x Wᵀ` for `x [T × in]` and `W [out × in]`.
pub fn linear(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .map(|wr| {
                    let mut s = 0.0;
                    for j in 0..row.len() {
                        s += row[j] * wr[j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn norm<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>, x: &Mat, gain: &str, bias: &str) -> Mat {
    let g = vector(params, gain);
    let n = g.len() as f64;
    x.iter()
        .map(|row| match config.norm {
            NormKind::Rmsnorm => {
                let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / n;
                let r = 1.0 / (ms + config.norm_eps).sqrt();
                row.iter().zip(&g).map(|(v, gi)| v * r * gi).collect()
            }
            NormKind::Layernorm => {
                let b = vector(params, bias);
                let mean: f64 = row.iter().sum::<f64>() / n;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let r = 1.0 / (var + config.norm_eps).sqrt();
                (0..row.len()).map(|j| (row[j] - mean) * r * g[j] + b[j]).collect()
            }
        })
        .collect()
}

/// Rotates each head's two halves by position-dependent angles.
fn rope(x: &mut Mat, heads: usize, hd: usize, theta: f64) {
    let half = hd / 2;
    for (pos, row) in x.iter_mut().enumerate() {
        for h in 0..heads {
            for i in 0..half {
                let angle = pos as f64 / theta.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (row[h * hd + i], row[h * hd + i + half]);
                row[h * hd + i] = a * angle.cos() - b * angle.sin();
                row[h * hd + i + half] = a * angle.sin() + b * angle.cos();
            }
        }
    }
}

fn attention<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>, x: &Mat, layer: usize) -> Mat {
    let hd = config.head_dim;
    let mut q = linear(x, &mat(params, &names::attn(layer, "q_proj")));
    let mut k = linear(x, &mat(params, &names::attn(layer, "k_proj")));
    let v = linear(x, &mat(params, &names::attn(layer, "v_proj")));
    let kv_heads = config.num_kv_heads.unwrap_or(config.num_heads);
    if let Positional::Rope { theta } = config.positional {
        rope(&mut q, config.num_heads, hd, theta);
        rope(&mut k, kv_heads, hd, theta);
    }
    let per_group = config.num_heads / kv_heads;
    let t = x.len();
    let mut merged = vec![vec![0.0; config.num_heads * hd]; t];
    for h in 0..config.num_heads {
        let g = h / per_group;
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][g * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in 0..hd {
                merged[i][h * hd + c] = (0..=i).map(|j| p[j] * v[j][g * hd + c]).sum();
            }
        }
    }
    linear(&merged, &mat(params, &names::attn(layer, "o_proj")))
}

/// Gated FFN intermediate state and output for one expert (or the dense FFN).
pub fn gated_ffn<T: Scalar>(params: &ParameterStore<T>, x: &Mat, layer: usize, expert: Option<usize>) -> (Mat, Mat) {
    let g = linear(x, &mat(params, &names::ffn_gate(layer, expert)));
    let u = linear(x, &mat(params, &names::ffn_up(layer, expert)));
    let inter: Mat = g
        .iter()
        .zip(&u)
        .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| silu(*a) * b).collect())
        .collect();
    let out = linear(&inter, &mat(params, &names::ffn_down(layer, expert)));
    (inter, out)
}

/// Two largest entries, lower index on ties.
pub fn top2(p: &[f64]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    (idx[0], idx[1])
}

fn ffn<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>, x: &Mat, layer: usize) -> Mat {
    if !config.is_moe_layer(layer) {
        return gated_ffn(params, x, layer, None).1;
    }
    let logits = linear(x, &mat(params, &names::router(layer)));
    let mut out = vec![vec![0.0; config.hidden_dim]; x.len()];
    for (t, lrow) in logits.iter().enumerate() {
        let p = softmax(lrow);
        let (a, b) = top2(&p);
        for (e, w) in [(a, p[a] / (p[a] + p[b])), (b, p[b] / (p[a] + p[b]))] {
            let (_, y) = gated_ffn(params, &vec![x[t].clone()], layer, Some(e));
            for c in 0..config.hidden_dim {
                out[t][c] += w * y[0][c];
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Inference-mode logits `[T × V]`.
pub fn naive_forward<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>, ids: &[u32]) -> Mat {
    let embed = mat(params, names::EMBED);
    let mut h: Mat = ids.iter().map(|&i| embed[i as usize].clone()).collect();
    let sandwich = matches!(config.residual, ResidualVariant::SandwichLn);
    for layer in 1..=config.num_layers {
        let ln = |x: &Mat, which: &str| {
            norm(
                config,
                params,
                x,
                &names::norm(layer, which),
                &names::norm_bias(layer, which),
            )
        };
        let mut a = attention(config, params, &ln(&h, "attn_norm"), layer);
        if sandwich {
            a = ln(&a, "post_attn_norm");
        }
        let h_hat = add(&h, &a);
        let mut f = ffn(config, params, &ln(&h_hat, "ffn_norm"), layer);
        if sandwich {
            f = ln(&f, "post_ffn_norm");
        }
        h = add(&h_hat, &f);
    }
    let fin = norm(config, params, &h, names::FINAL_NORM, names::FINAL_NORM_BIAS);
    linear(&fin, &mat(params, names::LM_HEAD))
}

/// Bos intermediate state of every layer; MoE layers use the expert with
/// the largest router probability.
pub fn naive_bos_intermediates<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
) -> Vec<(Option<usize>, Vec<f64>)> {
    let mut h: Mat = vec![mat(params, names::EMBED)[config.bos_token_id as usize].clone()];
    let sandwich = matches!(config.residual, ResidualVariant::SandwichLn);
    let mut out = Vec::new();
    for layer in 1..=config.num_layers {
        let ln = |x: &Mat, which: &str| {
            norm(
                config,
                params,
                x,
                &names::norm(layer, which),
                &names::norm_bias(layer, which),
            )
        };
        let mut a = attention(config, params, &ln(&h, "attn_norm"), layer);
        if sandwich {
            a = ln(&a, "post_attn_norm");
        }
        let h_hat = add(&h, &a);
        let x = ln(&h_hat, "ffn_norm");
        let expert = config.is_moe_layer(layer).then(|| {
            let p = softmax(&linear(&x, &mat(params, &names::router(layer)))[0]);
            top2(&p).0
        });
        out.push((expert, gated_ffn(params, &x, layer, expert).0.remove(0)));
        let mut f = ffn(config, params, &x, layer);
        if sandwich {
            f = ln(&f, "post_ffn_norm");
        }
        h = add(&h_hat, &f);
    }
    out
}

/// Mean next-token negative log-likelihood of `ids` in one pass.
pub fn naive_nll<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>, ids: &[u32]) -> f64 {
    let logits = naive_forward(config, params, &ids[..ids.len() - 1]);
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(&ids[1..]) {
        total -= softmax(row)[t as usize].ln();
    }
    total / (ids.len() - 1) as f64
}

pub fn max_abs_diff(a: &Mat, b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative gradient error with a floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}
