//! Position-aware self-attention between queries.
//!
//! Each query's `(x, y, z, r)` is embedded sinusoidally (a quarter of the
//! channels per component) and added to the content before the query and
//! key projections. Each head adds `α_h · B` to its logits, where `B` is the
//! IoF bias between the queries' boxes.

use crate::error::{config_err, shape_err, Result};
use crate::geometry::QueryPos;
use crate::tensor::{
    linear_forward, sinusoidal_embed, sinusoidal_embed_backward, softmax_rows, softmax_rows_backward, LinearParams,
    RngState, Tensor, DEFAULT_TEMPERATURE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub q_proj: LinearParams,
    pub k_proj: LinearParams,
    pub v_proj: LinearParams,
    pub out_proj: LinearParams,
    /// One IoF-bias scale per head.
    pub alpha: Tensor,
}

impl AttentionParams {
    /// Default-initialized projections and `α = 0` for every head.
    pub fn init(d_q: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        if heads == 0 || !d_q.is_multiple_of(heads) {
            return config_err(format!("d_q {d_q} is not divisible by {heads} heads"));
        }
        Ok(Self {
            heads,
            q_proj: LinearParams::init_default(d_q, d_q, rng),
            k_proj: LinearParams::init_default(d_q, d_q, rng),
            v_proj: LinearParams::init_default(d_q, d_q, rng),
            out_proj: LinearParams::init_default(d_q, d_q, rng),
            alpha: Tensor::zeros(&[heads]),
        })
    }

    pub fn d_q(&self) -> usize {
        self.q_proj.in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            q_proj: self.q_proj.zeros_like(),
            k_proj: self.k_proj.zeros_like(),
            v_proj: self.v_proj.zeros_like(),
            out_proj: self.out_proj.zeros_like(),
            alpha: Tensor::zeros(&[self.heads]),
        }
    }
}

/// Sinusoidal embedding of `(x, y, z, r)`, `d_q / 4` channels each.
pub fn pos_embed(pos: QueryPos, d_q: usize) -> Result<Vec<f64>> {
    if !d_q.is_multiple_of(8) {
        return config_err(format!("positional embedding needs d_q divisible by 8, got {d_q}"));
    }
    let mut out = Vec::with_capacity(d_q);
    for v in pos.to_array() {
        out.extend(sinusoidal_embed(v, d_q / 4, DEFAULT_TEMPERATURE)?);
    }
    Ok(out)
}

pub fn pos_embed_backward(pos: QueryPos, d_q: usize, grad: &[f64]) -> [f64; 4] {
    let q = d_q / 4;
    let mut out = [0.0; 4];
    for (k, v) in pos.to_array().into_iter().enumerate() {
        out[k] = sinusoidal_embed_backward(v, q, DEFAULT_TEMPERATURE, &grad[k * q..(k + 1) * q]);
    }
    out
}

/// Forward state of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    qk_in: Tensor,
    content: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head `[N × N]` attention weights.
    pub weights: Vec<Tensor>,
    concat: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub content: Tensor,
    pub embeds: Tensor,
    pub bias: Tensor,
}

/// Per head `Softmax(QKᵀ/√d_q + α_h·B)·V`, heads concatenated and projected.
/// `Q`, `K` see content plus positional embedding; `V` sees content only.
pub fn iof_attention(content: &Tensor, embeds: &Tensor, bias: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    attention_cached(content, embeds, Some(bias), params).map(|r| r.0)
}

/// The same attention without any geometric bias term.
pub fn multi_head_attention(content: &Tensor, embeds: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    attention_cached(content, embeds, None, params).map(|r| r.0)
}

pub fn attention_cached(
    content: &Tensor,
    embeds: &Tensor,
    bias: Option<&Tensor>,
    params: &AttentionParams,
) -> Result<(Tensor, AttentionCache)> {
    let n = content.rows();
    let d = params.d_q();
    if content.cols() != d || embeds.shape() != content.shape() {
        return shape_err(format!(
            "attention: content {:?}, embeds {:?}, d_q {d}",
            content.shape(),
            embeds.shape()
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [n, n] {
            return shape_err(format!("attention bias {:?} for {n} queries", b.shape()));
        }
    }
    if params.alpha.len() != params.heads || !d.is_multiple_of(params.heads) {
        return config_err("attention heads do not divide d_q");
    }
    let mut qk_in = content.clone();
    qk_in.add_assign(embeds)?;
    let q = linear_forward(&qk_in, &params.q_proj)?;
    let k = linear_forward(&qk_in, &params.k_proj)?;
    let v = linear_forward(content, &params.v_proj)?;
    let dh = d / params.heads;
    let scale = (d as f64).sqrt();
    let mut concat = Tensor::zeros(&[n, d]);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut s = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..n {
                let kj = &k.row(j)[cols.clone()];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                s.row_mut(i)[j] = match bias {
                    Some(b) => dot / scale + params.alpha.data()[h] * b.get2(i, j),
                    None => dot / scale,
                };
            }
        }
        let a = softmax_rows(&s);
        for i in 0..n {
            for j in 0..n {
                let w = a.get2(i, j);
                let vj = &v.row(j)[cols.clone()];
                let out = &mut concat.row_mut(i)[cols.clone()];
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        weights.push(a);
    }
    let out = if n == 0 {
        Tensor::zeros(&[0, d])
    } else {
        linear_forward(&concat, &params.out_proj)?
    };
    Ok((
        out,
        AttentionCache {
            qk_in,
            content: content.clone(),
            q,
            k,
            v,
            weights,
            concat,
        },
    ))
}

/// Accumulates parameter gradients (including `α`) into `grads`.
pub fn attention_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    bias: Option<&Tensor>,
    grad_out: &Tensor,
    grads: &mut AttentionParams,
) -> Result<AttentionGrads> {
    let n = cache.content.rows();
    let d = params.d_q();
    let dh = d / params.heads;
    let scale = (d as f64).sqrt();
    let mut g_concat = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let g = params
            .out_proj
            .apply_backward(cache.concat.row(i), grad_out.row(i), &mut grads.out_proj);
        g_concat.row_mut(i).copy_from_slice(&g);
    }
    let mut gq = Tensor::zeros(&[n, d]);
    let mut gk = Tensor::zeros(&[n, d]);
    let mut gv = Tensor::zeros(&[n, d]);
    let mut gb = Tensor::zeros(&[n, n]);
    for h in 0..params.heads {
        let cols = h * dh..(h + 1) * dh;
        let a = &cache.weights[h];
        let mut ga = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let go = &g_concat.row(i)[cols.clone()];
            for j in 0..n {
                let vj = &cache.v.row(j)[cols.clone()];
                ga.row_mut(i)[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                let w = a.get2(i, j);
                for (t, g) in gv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                    *t += w * g;
                }
            }
        }
        let gs = softmax_rows_backward(a, &ga);
        if let Some(b) = bias {
            grads.alpha.data_mut()[h] += gs.dot(b);
            let alpha = params.alpha.data()[h];
            for (t, s) in gb.data_mut().iter_mut().zip(gs.data()) {
                *t += alpha * s;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let g = gs.get2(i, j) / scale;
                if g == 0.0 {
                    continue;
                }
                for c in cols.clone() {
                    gq.row_mut(i)[c] += g * cache.k.row(j)[c];
                    gk.row_mut(j)[c] += g * cache.q.row(i)[c];
                }
            }
        }
    }
    let mut g_content = Tensor::zeros(&[n, d]);
    let mut g_embeds = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let a = params
            .q_proj
            .apply_backward(cache.qk_in.row(i), gq.row(i), &mut grads.q_proj);
        let b = params
            .k_proj
            .apply_backward(cache.qk_in.row(i), gk.row(i), &mut grads.k_proj);
        let c = params
            .v_proj
            .apply_backward(cache.content.row(i), gv.row(i), &mut grads.v_proj);
        for t in 0..d {
            let s = a[t] + b[t];
            g_embeds.row_mut(i)[t] = s;
            g_content.row_mut(i)[t] = s + c[t];
        }
    }
    Ok(AttentionGrads {
        content: g_content,
        embeds: g_embeds,
        bias: gb,
    })
}
