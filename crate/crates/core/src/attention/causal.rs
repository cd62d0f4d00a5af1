use super::{dot, AssociativeMemory, KernelFeatureMap, KernelKind};
use crate::numerics::Tensor;
use crate::{Error, Result};

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let (lq, dq) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    let (lv, d) = v.dims2()?;
    if lq != lk || lk != lv {
        return Err(Error::shape(
            op,
            format!("row counts differ: q {lq}, k {lk}, v {lv}"),
        ));
    }
    if dq != dk {
        return Err(Error::shape(op, format!("query width {dq} != key width {dk}")));
    }
    if lq == 0 {
        return Err(Error::EmptySequence);
    }
    Ok((lq, dq, d))
}

/// Causal linear attention: row `i` is the memory read after absorbing
/// rows `0..=i`, computed in one pass with `O(m d)` state.
pub fn causal_linear_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    map: &KernelFeatureMap,
) -> Result<Tensor> {
    let (_, dqk, _) = check_qkv(q, k, v, "causal_linear_attention")?;
    if dqk != map.qk_dim() {
        return Err(Error::shape(
            "causal_linear_attention",
            format!("map expects d_qk={}, inputs have {dqk}", map.qk_dim()),
        ));
    }
    causal_linear_attention_features(&map.apply_rows(q)?, &map.apply_rows(k)?, v)
}

/// [`causal_linear_attention`] on precomputed features `phi(Q)`, `phi(K)`.
pub fn causal_linear_attention_features(phi_q: &Tensor, phi_k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (l, m, d) = check_qkv(phi_q, phi_k, v, "causal_linear_attention")?;
    let mut memory = AssociativeMemory::new(m, d);
    let mut out = Vec::with_capacity(l * d);
    for i in 0..l {
        memory.update_features(phi_k.row(i), v.row(i))?;
        out.extend(memory.read_or(phi_q.row(i), v.row(i)));
    }
    Tensor::new(vec![l, d], out)
}

/// Normalized kernel average of `values` (rows of width `d`) weighted by
/// `K(q, key_j)`. A relu row whose weights are all zero returns the last
/// value row.
pub fn exact_attention_row(q: &[f64], keys: &[f64], values: &[f64], kernel: KernelKind) -> Vec<f64> {
    let dqk = q.len();
    let n = keys.len() / dqk;
    let d = values.len() / n;
    let weights: Vec<f64> = match kernel {
        KernelKind::Softmax => {
            let scores: Vec<f64> = keys.chunks(dqk).map(|k| dot(q, k)).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scores.into_iter().map(|s| (s - max).exp()).collect()
        }
        KernelKind::Relu => keys.chunks(dqk).map(|k| kernel.eval(q, k)).collect(),
    };
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return values[(n - 1) * d..].to_vec();
    }
    let mut out = vec![0.0; d];
    for (w, vrow) in weights.iter().zip(values.chunks(d)) {
        for (o, x) in out.iter_mut().zip(vrow) {
            *o += w * x;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Quadratic causal attention:
/// `row i = sum_{j<=i} K(q_i,k_j) v_j / sum_{l<=i} K(q_i,k_l)`.
pub fn exact_causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, kernel: KernelKind) -> Result<Tensor> {
    let (l, dqk, d) = check_qkv(q, k, v, "exact_causal_attention")?;
    let mut out = Vec::with_capacity(l * d);
    for i in 0..l {
        out.extend(exact_attention_row(
            q.row(i),
            &k.data()[..(i + 1) * dqk],
            &v.data()[..(i + 1) * d],
            kernel,
        ));
    }
    Tensor::new(vec![l, d], out)
}
