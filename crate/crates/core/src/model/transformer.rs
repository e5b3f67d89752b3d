//! Single transformer block over a user's interaction sequence:
//! multi-head self-attention with residual, ReLU feed-forward with
//! residual, then mean pooling over real (non-padding) positions.
//!
//! Padding rows are dropped before attention. This is exactly equivalent to
//! masking padded keys to −∞ and discarding padded query rows, and it makes
//! appended padding provably inert.

use super::params::{ClientModelParams, TransformerParams};
use super::ModelShape;
use crate::error::{Error, Result};
use crate::linalg::{
    linear_backward, linear_forward, matmul, matmul_at, matmul_bt, relu_backward, relu_forward, softmax_rows,
    softmax_rows_backward, Matrix,
};

pub(crate) struct TransformerCache {
    items: Vec<u32>,
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    z: Matrix,
    h1: Matrix,
    pre1: Matrix,
    act1: Matrix,
}

fn head_slice(m: &Matrix, head: usize, dh: usize) -> Matrix {
    Matrix::from_fn(m.rows(), dh, |r, c| m.get(r, head * dh + c))
}

fn write_head(dst: &mut Matrix, src: &Matrix, head: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(src.row(r));
    }
}

pub(crate) fn check_sequence(shape: &ModelShape, seq: &[u32]) -> Result<()> {
    if seq.len() > shape.max_seq_len {
        return Err(Error::Parameter(format!(
            "sequence length {} exceeds cap {}",
            seq.len(),
            shape.max_seq_len
        )));
    }
    if let Some(&bad) = seq.iter().find(|&&i| i as usize > shape.num_items) {
        return Err(Error::ItemId {
            item: bad,
            num_items: shape.num_items,
        });
    }
    Ok(())
}

/// Returns the pooled representation and, for non-empty input, the
/// activations needed by [`backward`].
pub(crate) fn forward_cached(
    t: &TransformerParams,
    table: &Matrix,
    heads: usize,
    seq: &[u32],
) -> Result<(Vec<f64>, Option<TransformerCache>)> {
    let d = table.cols();
    let items: Vec<u32> = seq.iter().copied().filter(|&i| i != 0).collect();
    let n = items.len();
    if n == 0 {
        return Ok((vec![0.0; d], None));
    }
    let mut x = Matrix::zeros(n, d);
    for (r, &item) in items.iter().enumerate() {
        x.row_mut(r).copy_from_slice(table.row(item as usize));
        if let Some(pos) = &t.positional {
            for (xv, pv) in x.row_mut(r).iter_mut().zip(pos.row(r)) {
                *xv += pv;
            }
        }
    }

    let q = matmul(&x, &t.wq)?;
    let k = matmul(&x, &t.wk)?;
    let v = matmul(&x, &t.wv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut z = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (head_slice(&q, h, dh), head_slice(&k, h, dh), head_slice(&v, h, dh));
        let p = softmax_rows(&matmul_bt(&qh, &kh)?.scaled(scale));
        write_head(&mut z, &matmul(&p, &vh)?, h, dh);
        probs.push(p);
    }
    let mut h1 = matmul(&z, &t.wo)?;
    h1.add_assign(&x)?;

    let pre1 = linear_forward(&h1, &t.ffn1.w, t.ffn1.b.as_slice())?;
    let act1 = relu_forward(&pre1);
    let mut h2 = linear_forward(&act1, &t.ffn2.w, t.ffn2.b.as_slice())?;
    h2.add_assign(&h1)?;

    let mut pooled = h2.column_sums();
    pooled.iter_mut().for_each(|v| *v /= n as f64);
    let cache = TransformerCache {
        items,
        x,
        q,
        k,
        v,
        probs,
        z,
        h1,
        pre1,
        act1,
    };
    Ok((pooled, Some(cache)))
}

/// Accumulates parameter gradients into `grad` and item-row gradients into
/// `grad_table`, given the gradient of the pooled output.
pub(crate) fn backward(
    t: &TransformerParams,
    cache: &TransformerCache,
    heads: usize,
    g_out: &[f64],
    grad: &mut TransformerParams,
    grad_table: &mut Matrix,
) -> Result<()> {
    let n = cache.items.len();
    let d = g_out.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Mean pooling spreads the gradient evenly over positions.
    let row: Vec<f64> = g_out.iter().map(|g| g / n as f64).collect();
    let g_h2 = Matrix::from_fn(n, d, |_, c| row[c]);

    // h2 = h1 + ffn2(relu(ffn1(h1)))
    let ffn2 = linear_backward(&cache.act1, &t.ffn2.w, &g_h2)?;
    grad.ffn2.w.add_assign(&ffn2.weight)?;
    grad.ffn2.b.add_assign(&Matrix::row_vector(&ffn2.bias))?;
    let g_pre1 = relu_backward(&cache.pre1, &ffn2.input)?;
    let ffn1 = linear_backward(&cache.h1, &t.ffn1.w, &g_pre1)?;
    grad.ffn1.w.add_assign(&ffn1.weight)?;
    grad.ffn1.b.add_assign(&Matrix::row_vector(&ffn1.bias))?;
    let mut g_h1 = g_h2;
    g_h1.add_assign(&ffn1.input)?;

    // h1 = x + z · wo
    grad.wo.add_assign(&matmul_at(&cache.z, &g_h1)?)?;
    let g_z = matmul_bt(&g_h1, &t.wo)?;
    let mut g_q = Matrix::zeros(n, d);
    let mut g_k = Matrix::zeros(n, d);
    let mut g_v = Matrix::zeros(n, d);
    for h in 0..heads {
        let p = &cache.probs[h];
        let (qh, kh, vh) = (
            head_slice(&cache.q, h, dh),
            head_slice(&cache.k, h, dh),
            head_slice(&cache.v, h, dh),
        );
        let g_zh = head_slice(&g_z, h, dh);
        let g_p = matmul_bt(&g_zh, &vh)?;
        write_head(&mut g_v, &matmul_at(p, &g_zh)?, h, dh);
        let g_s = softmax_rows_backward(p, &g_p)?.scaled(scale);
        write_head(&mut g_q, &matmul(&g_s, &kh)?, h, dh);
        write_head(&mut g_k, &matmul_at(&g_s, &qh)?, h, dh);
    }
    grad.wq.add_assign(&matmul_at(&cache.x, &g_q)?)?;
    grad.wk.add_assign(&matmul_at(&cache.x, &g_k)?)?;
    grad.wv.add_assign(&matmul_at(&cache.x, &g_v)?)?;

    let mut g_x = g_h1;
    g_x.add_assign(&matmul_bt(&g_q, &t.wq)?)?;
    g_x.add_assign(&matmul_bt(&g_k, &t.wk)?)?;
    g_x.add_assign(&matmul_bt(&g_v, &t.wv)?)?;

    for (r, &item) in cache.items.iter().enumerate() {
        for (dst, src) in grad_table.row_mut(item as usize).iter_mut().zip(g_x.row(r)) {
            *dst += src;
        }
        if let Some(pos) = &mut grad.positional {
            for (dst, src) in pos.row_mut(r).iter_mut().zip(g_x.row(r)) {
                *dst += src;
            }
        }
    }
    Ok(())
}

/// Pooled sequence representation (`d` values). All-padding input and a
/// disabled transformer both yield the zero vector.
pub fn transformer_forward(params: &ClientModelParams, shape: &ModelShape, seq: &[u32]) -> Result<Vec<f64>> {
    check_sequence(shape, seq)?;
    match &params.transformer {
        Some(t) => Ok(forward_cached(t, &params.item_table, shape.heads, seq)?.0),
        None => Ok(vec![0.0; shape.embed_dim]),
    }
}
