//! Single-head scaled dot-product attention and the self/cross-attention
//! blocks built on it.
//!
//! A block is `layer_norm(attention(Q·W_q, K·W_k, V·W_v) + Q)`: post-norm,
//! residual on the query source, bias-free projections, no feed-forward
//! sublayer.

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Projection and normalization weights of one attention block.
///
/// `w_q`, `w_k`: `C×d_k`; `w_v`: `C×C` so the residual add is well formed.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub channels: usize,
    pub key_dim: usize,
    pub ln_eps: f64,
}

impl AttentionParams {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        key_dim: usize,
        ln_eps: f64,
    ) -> Self {
        let w_q = store.register(
            format!("{name}.w_q"),
            init.xavier(&[channels, key_dim], channels, key_dim),
        );
        let w_k = store.register(
            format!("{name}.w_k"),
            init.xavier(&[channels, key_dim], channels, key_dim),
        );
        let w_v = store.register(
            format!("{name}.w_v"),
            init.xavier(&[channels, channels], channels, channels),
        );
        let ln_gamma = store.register(format!("{name}.ln_gamma"), Tensor::ones([channels]));
        let ln_beta = store.register(format!("{name}.ln_beta"), Tensor::zeros([channels]));
        Self {
            w_q,
            w_k,
            w_v,
            ln_gamma,
            ln_beta,
            channels,
            key_dim,
            ln_eps,
        }
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.w_q, self.w_k, self.w_v, self.ln_gamma, self.ln_beta]
    }
}

/// Output of an attention block together with its attention map
/// (`n_q × n_k`, rows summing to one).
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput<'t, T: Element> {
    pub output: Var<'t, T>,
    pub weights: Var<'t, T>,
}

/// `softmax(q·kᵀ / √d_k) · v`, returning the output and the weight matrix.
pub fn scaled_dot_attention<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
) -> Result<BlockOutput<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        ));
    }
    let scale = T::from_f64(1.0 / (qs[1] as f64).sqrt());
    let weights = q.matmul(k.t()?)?.scale(scale)?.softmax_rows()?;
    Ok(BlockOutput {
        output: weights.matmul(v)?,
        weights,
    })
}

fn check_channels<T: Element>(op: &'static str, x: Var<'_, T>, c: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != c {
        return Err(Error::dim(op, format!("input {s:?} does not have {c} columns")));
    }
    Ok(())
}

/// Cross-attention block. `key_src` and `value_src` may differ but must
/// share a row count; the residual is added to `query_src`.
pub fn ca_block<'t, T: Element>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    query_src: Var<'t, T>,
    key_src: Var<'t, T>,
    value_src: Var<'t, T>,
    params: &AttentionParams,
) -> Result<BlockOutput<'t, T>> {
    for x in [query_src, key_src, value_src] {
        check_channels("ca_block", x, params.channels)?;
    }
    let w_q = tape.param(store, params.w_q)?;
    let w_k = tape.param(store, params.w_k)?;
    let w_v = tape.param(store, params.w_v)?;
    let att = scaled_dot_attention(
        query_src.matmul(w_q)?,
        key_src.matmul(w_k)?,
        value_src.matmul(w_v)?,
    )?;
    let gamma = tape.param(store, params.ln_gamma)?;
    let beta = tape.param(store, params.ln_beta)?;
    let output = att
        .output
        .add(query_src)?
        .layer_norm(gamma, beta, T::from_f64(params.ln_eps))?;
    Ok(BlockOutput {
        output,
        weights: att.weights,
    })
}

/// Self-attention block: query, key and value all come from `x`.
pub fn sa_block<'t, T: Element>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    x: Var<'t, T>,
    params: &AttentionParams,
) -> Result<BlockOutput<'t, T>> {
    ca_block(tape, store, x, x, x, params)
}
