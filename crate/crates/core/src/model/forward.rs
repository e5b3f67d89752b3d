use super::params::{ClientModelParams, Dense};
use super::transformer::{self, check_sequence, TransformerCache};
use super::ModelShape;
use crate::error::{Error, Result};
use crate::linalg::{linear_backward, linear_forward, relu_backward, relu_forward, sigmoid, Matrix};

/// One mini-batch for a single client: the user's (padded) history plus
/// candidate items with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub sequence: Vec<u32>,
    pub candidates: Vec<u32>,
    pub labels: Vec<f64>,
}

impl TrainingBatch {
    /// Candidates labelled 0.
    pub fn negatives(&self) -> Vec<u32> {
        self.candidates
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == 0.0)
            .map(|(&c, _)| c)
            .collect()
    }
}

/// Activations of the user side of the network.
struct UserPass {
    input: Matrix,
    seq: Option<TransformerCache>,
    hidden_in: Matrix,
    umlp_pre: Matrix,
    umlp_act: Matrix,
    u_rep: Matrix,
}

/// Activations of the scoring MLP for a set of candidates.
struct ScorePass {
    items: Matrix,
    z: Matrix,
    pre: [Matrix; 2],
    act: [Matrix; 2],
    logits: Vec<f64>,
}

fn user_input(params: &ClientModelParams, shape: &ModelShape, text: &[f64]) -> Result<Matrix> {
    if shape.use_joint_embedding {
        if text.len() != params.user_weight.rows() {
            return Err(Error::dim(
                "joint_embed",
                format!("text vector of {}", text.len()),
                params.user_weight.shape_str(),
            ));
        }
        Ok(Matrix::row_vector(text))
    } else {
        Ok(Matrix::row_vector(&[1.0]))
    }
}

/// The user vector `e_u = v_u · W + b` (or the free user vector when the
/// joint embedding is disabled).
pub fn joint_embed(params: &ClientModelParams, shape: &ModelShape, text: &[f64]) -> Result<Vec<f64>> {
    let input = user_input(params, shape, text)?;
    Ok(match &params.user_bias {
        Some(b) => linear_forward(&input, &params.user_weight, b.as_slice())?.into_vec(),
        None => params.user_weight.as_slice().to_vec(),
    })
}

fn user_pass(params: &ClientModelParams, shape: &ModelShape, text: &[f64], seq: &[u32]) -> Result<UserPass> {
    check_sequence(shape, seq)?;
    let input = user_input(params, shape, text)?;
    let mut hidden_in = match &params.user_bias {
        Some(b) => linear_forward(&input, &params.user_weight, b.as_slice())?,
        None => params.user_weight.clone(),
    };
    let seq_cache = match &params.transformer {
        Some(t) => {
            let (pooled, cache) = transformer::forward_cached(t, &params.item_table, shape.heads, seq)?;
            hidden_in.add_assign(&Matrix::row_vector(&pooled))?;
            cache
        }
        None => None,
    };
    let [l1, l2] = &params.umlp;
    let umlp_pre = linear_forward(&hidden_in, &l1.w, l1.b.as_slice())?;
    let umlp_act = relu_forward(&umlp_pre);
    let u_rep = linear_forward(&umlp_act, &l2.w, l2.b.as_slice())?;
    Ok(UserPass {
        input,
        seq: seq_cache,
        hidden_in,
        umlp_pre,
        umlp_act,
        u_rep,
    })
}

fn check_candidates(shape: &ModelShape, candidates: &[u32]) -> Result<()> {
    match candidates.iter().find(|&&c| c == 0 || c as usize > shape.num_items) {
        Some(&item) => Err(Error::ItemId {
            item,
            num_items: shape.num_items,
        }),
        None => Ok(()),
    }
}

fn score_pass(params: &ClientModelParams, u_rep: &[f64], candidates: &[u32]) -> Result<ScorePass> {
    let d = u_rep.len();
    let mut items = Matrix::zeros(candidates.len(), d);
    let mut z = Matrix::zeros(candidates.len(), d);
    for (r, &c) in candidates.iter().enumerate() {
        let e = params.item_table.row(c as usize);
        items.row_mut(r).copy_from_slice(e);
        for ((zv, ev), uv) in z.row_mut(r).iter_mut().zip(e).zip(u_rep) {
            *zv = ev * uv;
        }
    }
    let [s1, s2, s3]: &[Dense; 3] = &params.score;
    let pre0 = linear_forward(&z, &s1.w, s1.b.as_slice())?;
    let act0 = relu_forward(&pre0);
    let pre1 = linear_forward(&act0, &s2.w, s2.b.as_slice())?;
    let act1 = relu_forward(&pre1);
    let logits = linear_forward(&act1, &s3.w, s3.b.as_slice())?.into_vec();
    Ok(ScorePass {
        items,
        z,
        pre: [pre0, pre1],
        act: [act0, act1],
        logits,
    })
}

/// Predicted interaction probability for every candidate, sharing one
/// user-side pass.
pub fn score_candidates(
    params: &ClientModelParams,
    shape: &ModelShape,
    text: &[f64],
    seq: &[u32],
    candidates: &[u32],
) -> Result<Vec<f64>> {
    check_candidates(shape, candidates)?;
    let user = user_pass(params, shape, text, seq)?;
    let scores = score_pass(params, user.u_rep.as_slice(), candidates)?;
    Ok(scores.logits.into_iter().map(sigmoid).collect())
}

/// `ŷ ∈ (0, 1)` for a single candidate.
pub fn predict(
    params: &ClientModelParams,
    shape: &ModelShape,
    text: &[f64],
    seq: &[u32],
    candidate: u32,
) -> Result<f64> {
    Ok(score_candidates(params, shape, text, seq, &[candidate])?[0])
}

/// Binary cross entropy on a probability.
pub fn bce_loss(y: f64, y_hat: f64) -> f64 {
    -(y * y_hat.ln() + (1.0 - y) * (1.0 - y_hat).ln())
}

/// The same loss on a logit, `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
fn bce_logit(y: f64, logit: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Mean of squared differences between global and local rows.
pub fn reg_term(global_rows: &Matrix, local_rows: &Matrix) -> Result<f64> {
    let diff = global_rows.sub(local_rows)?;
    if diff.is_empty() {
        return Ok(0.0);
    }
    Ok(diff.as_slice().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

fn gather(table: &Matrix, items: &[u32]) -> Matrix {
    let mut out = Matrix::zeros(items.len(), table.cols());
    for (r, &i) in items.iter().enumerate() {
        out.row_mut(r).copy_from_slice(table.row(i as usize));
    }
    out
}

fn check_batch(shape: &ModelShape, batch: &TrainingBatch, global: &Matrix, lambda: f64) -> Result<()> {
    if batch.candidates.len() != batch.labels.len() || batch.candidates.is_empty() {
        return Err(Error::Parameter(format!(
            "batch has {} candidates and {} labels",
            batch.candidates.len(),
            batch.labels.len()
        )));
    }
    if batch.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Parameter("labels must be 0 or 1".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Parameter(format!("regularization weight {lambda} < 0")));
    }
    if global.shape() != (shape.num_items + 1, shape.embed_dim) {
        return Err(Error::dim(
            "global item table",
            global.shape_str(),
            format!("{}x{}", shape.num_items + 1, shape.embed_dim),
        ));
    }
    check_candidates(shape, &batch.candidates)
}

/// Batch-mean BCE plus `λ ·` the regularizer over the batch's negatives.
pub fn total_loss(
    params: &ClientModelParams,
    shape: &ModelShape,
    text: &[f64],
    batch: &TrainingBatch,
    global: &Matrix,
    lambda: f64,
) -> Result<f64> {
    check_batch(shape, batch, global, lambda)?;
    let user = user_pass(params, shape, text, &batch.sequence)?;
    let scores = score_pass(params, user.u_rep.as_slice(), &batch.candidates)?;
    let bce = scores
        .logits
        .iter()
        .zip(&batch.labels)
        .map(|(&x, &y)| bce_logit(y, x))
        .sum::<f64>()
        / batch.labels.len() as f64;
    let negatives = batch.negatives();
    let reg = reg_term(&gather(global, &negatives), &gather(&params.item_table, &negatives))?;
    Ok(bce + lambda * reg)
}

fn add_dense_grad(target: &mut Dense, w: &Matrix, b: &[f64]) -> Result<()> {
    target.w.add_assign(w)?;
    target.b.add_assign(&Matrix::row_vector(b))
}

/// Loss together with its gradient for every parameter.
pub fn loss_and_grad(
    params: &ClientModelParams,
    shape: &ModelShape,
    text: &[f64],
    batch: &TrainingBatch,
    global: &Matrix,
    lambda: f64,
) -> Result<(f64, ClientModelParams)> {
    check_batch(shape, batch, global, lambda)?;
    let mut grad = params.zeros_like();
    let user = user_pass(params, shape, text, &batch.sequence)?;
    let u_rep = user.u_rep.as_slice();
    let scores = score_pass(params, u_rep, &batch.candidates)?;
    let b = batch.labels.len() as f64;

    let mut bce = 0.0;
    let mut g_logits = Matrix::zeros(scores.logits.len(), 1);
    for (r, (&x, &y)) in scores.logits.iter().zip(&batch.labels).enumerate() {
        bce += bce_logit(y, x);
        g_logits.set(r, 0, (sigmoid(x) - y) / b);
    }
    bce /= b;

    // Scoring MLP.
    let [s1, s2, s3] = &params.score;
    let l3 = linear_backward(&scores.act[1], &s3.w, &g_logits)?;
    add_dense_grad(&mut grad.score[2], &l3.weight, &l3.bias)?;
    let g = relu_backward(&scores.pre[1], &l3.input)?;
    let l2 = linear_backward(&scores.act[0], &s2.w, &g)?;
    add_dense_grad(&mut grad.score[1], &l2.weight, &l2.bias)?;
    let g = relu_backward(&scores.pre[0], &l2.input)?;
    let l1 = linear_backward(&scores.z, &s1.w, &g)?;
    add_dense_grad(&mut grad.score[0], &l1.weight, &l1.bias)?;
    let g_z = l1.input;

    // z = u_rep ⊙ E[c]
    let d = u_rep.len();
    let mut g_u = vec![0.0; d];
    for (r, &c) in batch.candidates.iter().enumerate() {
        let gz = g_z.row(r);
        let e = scores.items.row(r);
        for j in 0..d {
            g_u[j] += gz[j] * e[j];
        }
        for (dst, (gzj, uj)) in grad.item_table.row_mut(c as usize).iter_mut().zip(gz.iter().zip(u_rep)) {
            *dst += gzj * uj;
        }
    }

    // Regularizer pulls local negative rows towards the global table.
    let negatives = batch.negatives();
    let local_neg = gather(&params.item_table, &negatives);
    let global_neg = gather(global, &negatives);
    let reg = reg_term(&global_neg, &local_neg)?;
    if !negatives.is_empty() && lambda > 0.0 {
        let coeff = -2.0 * lambda / local_neg.len() as f64;
        for (r, &c) in negatives.iter().enumerate() {
            for ((dst, gv), lv) in grad
                .item_table
                .row_mut(c as usize)
                .iter_mut()
                .zip(global_neg.row(r))
                .zip(local_neg.row(r))
            {
                *dst += coeff * (gv - lv);
            }
        }
    }

    // User MLP.
    let [m1, m2] = &params.umlp;
    let u2 = linear_backward(&user.umlp_act, &m2.w, &Matrix::row_vector(&g_u))?;
    add_dense_grad(&mut grad.umlp[1], &u2.weight, &u2.bias)?;
    let g = relu_backward(&user.umlp_pre, &u2.input)?;
    let u1 = linear_backward(&user.hidden_in, &m1.w, &g)?;
    add_dense_grad(&mut grad.umlp[0], &u1.weight, &u1.bias)?;
    let g_hidden = u1.input;

    // e_u and the sequence representation are summed, so both receive g_hidden.
    match &mut grad.user_bias {
        Some(gb) => {
            let joint = linear_backward(&user.input, &params.user_weight, &g_hidden)?;
            grad.user_weight.add_assign(&joint.weight)?;
            gb.add_assign(&Matrix::row_vector(&joint.bias))?;
        }
        None => grad.user_weight.add_assign(&g_hidden)?,
    }
    if let (Some(t), Some(cache), Some(gt)) = (&params.transformer, &user.seq, &mut grad.transformer) {
        transformer::backward(t, cache, shape.heads, g_hidden.as_slice(), gt, &mut grad.item_table)?;
    }

    grad.item_table.row_mut(0).fill(0.0);
    Ok((bce + lambda * reg, grad))
}
