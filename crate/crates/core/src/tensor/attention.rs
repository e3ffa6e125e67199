use super::{Graph, Result, Tensor, TensorError, Var};

/// Output of [`multi_head_attention`].
pub struct Attention {
    /// `[L_q, d]` attended values.
    pub output: Var,
    /// `[L_q, L_k]` attention weights averaged over heads; each row sums to 1.
    pub weights: Tensor,
}

/// Scaled dot-product attention split across `heads`.
///
/// Inputs are already projected: `query [L_q, d]`, `key [L_k, d]`,
/// `value [L_k, d]`. Each head works on a contiguous `d / heads` slice of the
/// channels and scores are scaled by `1 / sqrt(d / heads)`.
pub fn multi_head_attention(
    g: &mut Graph,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<Attention> {
    let (lq, d) = g.value(query).dims2()?;
    let (lk, dk) = g.value(key).dims2()?;
    if dk != d || g.shape(value) != [lk, d] {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: vec![lq, d],
            rhs: g.shape(value).to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "model width {d} is not divisible by {heads} attention heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut mean_weights = vec![0.0; lq * lk];
    for h in 0..heads {
        let (q, k, v) = if heads == 1 {
            (query, key, value)
        } else {
            (
                g.slice(query, 1, h * dh, dh)?,
                g.slice(key, 1, h * dh, dh)?,
                g.slice(value, 1, h * dh, dh)?,
            )
        };
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1)?;
        for (m, w) in mean_weights.iter_mut().zip(g.value(attn).data()) {
            *m += w / heads as f64;
        }
        outputs.push(g.matmul(attn, v)?);
    }
    let output = if heads == 1 {
        outputs[0]
    } else {
        g.concat(&outputs, 1)?
    };
    Ok(Attention {
        output,
        weights: Tensor::new(vec![lq, lk], mean_weights)?,
    })
}
