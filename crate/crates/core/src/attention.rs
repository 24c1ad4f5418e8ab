//! Scaled dot-product attention, multi-head attention and the position-wise
//! feed-forward block.

use rand::Rng;

use crate::error::{CatError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Projection matrices of one multi-head attention block.
///
/// The per-head matrices `W_i^Q, W_i^K, W_i^V` (each `d_model × head_dim`) are
/// stored side by side as one `d_model × d_model` tensor per role; head `i`
/// owns columns `i·head_dim .. (i+1)·head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub heads: usize,
    pub d_model: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub bias: Option<ProjectionBias>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBias {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

impl MultiHeadParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(CatError::config("head count must be at least 1"));
        }
        if d_model == 0 || d_model % heads != 0 {
            return Err(CatError::config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let shape = [d_model, d_model];
        let mut mat = |name: &str, rng: &mut R| {
            store.register(format!("{prefix}.{name}"), Tensor::uniform_fan_in(&shape, d_model, rng))
        };
        let w_q = mat("w_q", rng)?;
        let w_k = mat("w_k", rng)?;
        let w_v = mat("w_v", rng)?;
        let w_o = mat("w_o", rng)?;
        let bias = if with_bias {
            let mut vec = |name: &str, rng: &mut R| {
                store.register(
                    format!("{prefix}.{name}"),
                    Tensor::uniform_fan_in(&[d_model], d_model, rng),
                )
            };
            Some(ProjectionBias {
                q: vec("b_q", rng)?,
                k: vec("b_k", rng)?,
                v: vec("b_v", rng)?,
                o: vec("b_o", rng)?,
            })
        } else {
            None
        };
        Ok(MultiHeadParams {
            heads,
            d_model,
            w_q,
            w_k,
            w_v,
            w_o,
            bias,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `W_1: d_model×d_ff, b_1, W_2: d_ff×d_model, b_2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub d_model: usize,
    pub d_ff: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_model == 0 || d_ff == 0 {
            return Err(CatError::config("ffn widths must be positive"));
        }
        let w1 = store.register(
            format!("{prefix}.w1"),
            Tensor::uniform_fan_in(&[d_model, d_ff], d_model, rng),
        )?;
        let b1 = store.register(format!("{prefix}.b1"), Tensor::uniform_fan_in(&[d_ff], d_model, rng))?;
        let w2 = store.register(
            format!("{prefix}.w2"),
            Tensor::uniform_fan_in(&[d_ff, d_model], d_ff, rng),
        )?;
        let b2 = store.register(format!("{prefix}.b2"), Tensor::uniform_fan_in(&[d_model], d_ff, rng))?;
        Ok(FfnParams {
            d_model,
            d_ff,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// `softmax(Q·Kᵀ/√d_k)·V`. Returns `(output, weights)`.
pub fn scaled_dot_product_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(CatError::contract("attention operands must be matrices"));
    }
    if qs[1] != ks[1] {
        return Err(CatError::dim("attention q/k", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(CatError::dim("attention k/v", &ks, &vs));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = g.softmax(scaled, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

fn project(g: &mut Graph, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
    let w = g.param(w);
    let b = b.map(|b| g.param(b));
    g.linear(x, w, b)
}

/// `Concat(head_1..head_M)·W^O` with `head_i = Attention(Q·W_i^Q, K·W_i^K, V·W_i^V)`.
pub fn multi_head_attention(g: &mut Graph, q_in: Var, k_in: Var, v_in: Var, params: &MultiHeadParams) -> Result<Var> {
    Ok(multi_head_attention_with_weights(g, q_in, k_in, v_in, params)?.0)
}

/// As [`multi_head_attention`], also returning each head's attention weights.
pub fn multi_head_attention_with_weights(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    params: &MultiHeadParams,
) -> Result<(Var, Vec<Var>)> {
    let d = params.d_model;
    for x in [q_in, k_in, v_in] {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != d {
            return Err(CatError::dim("multi_head_attention", s, &[d]));
        }
    }
    if g.shape(k_in)[0] == 0 {
        return Err(CatError::contract("empty key set"));
    }
    let bias = params.bias.as_ref();
    let q = project(g, q_in, params.w_q, bias.map(|b| b.q))?;
    let k = project(g, k_in, params.w_k, bias.map(|b| b.k))?;
    let v = project(g, v_in, params.w_v, bias.map(|b| b.v))?;
    let hd = params.head_dim();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi)?,
                g.slice_cols(k, lo, hi)?,
                g.slice_cols(v, lo, hi)?,
            )
        };
        let (out, w) = scaled_dot_product_attention(g, qh, kh, vh)?;
        heads.push(out);
        weights.push(w);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = project(g, cat, params.w_o, bias.map(|b| b.o))?;
    Ok((out, weights))
}

/// `max(0, x·W_1 + b_1)·W_2 + b_2`.
pub fn ffn(g: &mut Graph, x: Var, params: &FfnParams) -> Result<Var> {
    let s = g.shape(x);
    if *s.last().unwrap() != params.d_model {
        return Err(CatError::dim("ffn", s, &[params.d_model]));
    }
    let (w1, b1, w2, b2) = (
        g.param(params.w1),
        g.param(params.b1),
        g.param(params.w2),
        g.param(params.b2),
    );
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h);
    g.linear(h, w2, Some(b2))
}
