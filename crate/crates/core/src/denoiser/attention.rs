use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, Tensor, Var};

/// Factorized attention: `softmax_row(Q) · (softmax_col(K)ᵀ · V)`.
///
/// The feature-axis softmax over Q and the position-axis softmax over K
/// replace the usual query-key similarity; no n×m matrix is ever formed and
/// the cost is O((n+m)·d_k·d_v). The position-axis reductions (the column
/// softmax denominators and the Kᵀ·V contraction) run in canonical value
/// order, so jointly permuting the key/value rows leaves the output
/// bit-identical.
pub fn efficient_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (_, dk_q) = g.value(q).dims2()?;
    let (mk, dk) = g.value(k).dims2()?;
    let (mv, _) = g.value(v).dims2()?;
    if dk_q != dk {
        return Err(Error::dimension("attention key width", dk_q, dk));
    }
    if mk != mv {
        return Err(Error::dimension("attention value rows", mk, mv));
    }
    let sq = g.softmax(q, Axis::Row)?;
    let sk = g.softmax(k, Axis::Col)?;
    let skt = g.transpose(sk)?;
    let ctx = g.matmul_ordered(skt, v)?;
    g.matmul(sq, ctx)
}

/// [`efficient_attention`] on plain tensors, without gradient tracking.
pub fn efficient_attention_values(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = efficient_attention(&mut g, q, k, v)?;
    Ok(g.value(out).clone())
}
