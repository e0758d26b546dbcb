//! Graph-level building blocks shared by both compressors.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Scaled dot-product attention, heads split along the channel axis.
/// Returns the concatenated head outputs and each head's weight matrix.
pub(crate) fn attend<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q).rows_cols().1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide d = {d}")));
    }
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    if heads == 1 {
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, scale)?;
        let w = g.softmax_rows(logits)?;
        let out = g.matmul(w, v)?;
        return Ok((out, vec![w]));
    }
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let w = g.softmax_rows(logits)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    Ok((g.concat_cols(&outs)?, weights))
}

/// Two-layer perceptron with a GELU in between.
pub(crate) fn mlp<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_bias(y, b2)
}
