use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelShape;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Fully connected layer; the bias is stored as a `1 × out` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
}

impl Dense {
    /// He-uniform weights, zero bias.
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Dense {
            w: Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound)),
            b: Matrix::zeros(1, fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: Matrix::zeros(1, self.b.cols()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn1: Dense,
    pub ffn2: Dense,
    /// Learned per-position offsets (`max_seq_len × d`), when enabled.
    pub positional: Option<Matrix>,
}

/// Every trainable tensor of one client.
///
/// The same struct doubles as the gradient container: [`zeros_like`]
/// produces a gradient with identical shapes.
///
/// [`zeros_like`]: ClientModelParams::zeros_like
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModelParams {
    /// Joint-embedding weight `d1 × d`, or the free user vector `1 × d`
    /// when the joint embedding is disabled. This is what gets uploaded for
    /// graph building.
    pub user_weight: Matrix,
    /// Joint-embedding bias (`1 × d`); absent for the free user vector.
    pub user_bias: Option<Matrix>,
    /// `(num_items + 1) × d`, row 0 is padding and stays zero.
    pub item_table: Matrix,
    pub transformer: Option<TransformerParams>,
    pub umlp: [Dense; 2],
    pub score: [Dense; 3],
}

impl ClientModelParams {
    /// Random initialization. `item_std` is the standard deviation of the
    /// normal item-embedding init.
    pub fn init<R: Rng + ?Sized>(shape: &ModelShape, item_std: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let d = shape.embed_dim;
        let (user_weight, user_bias) = if shape.use_joint_embedding {
            let bound = 1.0 / (shape.text_dim as f64).sqrt();
            (
                Matrix::from_fn(shape.text_dim, d, |_, _| rng.gen_range(-bound..bound)),
                Some(Matrix::zeros(1, d)),
            )
        } else {
            (Matrix::from_fn(1, d, |_, _| rng.gen_range(-0.1..0.1)), None)
        };
        let item_table = init_item_table(shape.num_items, d, item_std, rng)?;
        let transformer = if shape.use_transformer {
            let bound = 1.0 / (d as f64).sqrt();
            let mut square = || Matrix::from_fn(d, d, |_, _| rng.gen_range(-bound..bound));
            let (wq, wk, wv, wo) = (square(), square(), square(), square());
            let ffn1 = Dense::init(d, shape.ffn_dim, rng);
            let ffn2 = Dense::init(shape.ffn_dim, d, rng);
            let positional = shape.positional.then(|| {
                Matrix::from_fn(shape.max_seq_len, d, |_, _| rng.gen_range(-0.01..0.01))
            });
            Some(TransformerParams {
                wq,
                wk,
                wv,
                wo,
                ffn1,
                ffn2,
                positional,
            })
        } else {
            None
        };
        let umlp = [Dense::init(d, shape.umlp_hidden, rng), Dense::init(shape.umlp_hidden, d, rng)];
        let [h1, h2] = shape.score_hidden;
        let score = [Dense::init(d, h1, rng), Dense::init(h1, h2, rng), Dense::init(h2, 1, rng)];
        Ok(ClientModelParams {
            user_weight,
            user_bias,
            item_table,
            transformer,
            umlp,
            score,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ClientModelParams {
            user_weight: z(&self.user_weight),
            user_bias: self.user_bias.as_ref().map(z),
            item_table: z(&self.item_table),
            transformer: self.transformer.as_ref().map(|t| TransformerParams {
                wq: z(&t.wq),
                wk: z(&t.wk),
                wv: z(&t.wv),
                wo: z(&t.wo),
                ffn1: t.ffn1.zeros_like(),
                ffn2: t.ffn2.zeros_like(),
                positional: t.positional.as_ref().map(z),
            }),
            umlp: [self.umlp[0].zeros_like(), self.umlp[1].zeros_like()],
            score: [
                self.score[0].zeros_like(),
                self.score[1].zeros_like(),
                self.score[2].zeros_like(),
            ],
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![("user_weight".into(), &self.user_weight)];
        if let Some(b) = &self.user_bias {
            out.push(("user_bias".into(), b));
        }
        out.push(("item_table".into(), &self.item_table));
        if let Some(t) = &self.transformer {
            out.push(("attn.wq".into(), &t.wq));
            out.push(("attn.wk".into(), &t.wk));
            out.push(("attn.wv".into(), &t.wv));
            out.push(("attn.wo".into(), &t.wo));
            out.push(("ffn1.w".into(), &t.ffn1.w));
            out.push(("ffn1.b".into(), &t.ffn1.b));
            out.push(("ffn2.w".into(), &t.ffn2.w));
            out.push(("ffn2.b".into(), &t.ffn2.b));
            if let Some(p) = &t.positional {
                out.push(("positional".into(), p));
            }
        }
        for (i, layer) in self.umlp.iter().enumerate() {
            out.push((format!("umlp{i}.w"), &layer.w));
            out.push((format!("umlp{i}.b"), &layer.b));
        }
        for (i, layer) in self.score.iter().enumerate() {
            out.push((format!("score{i}.w"), &layer.w));
            out.push((format!("score{i}.b"), &layer.b));
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![("user_weight".into(), &mut self.user_weight)];
        if let Some(b) = &mut self.user_bias {
            out.push(("user_bias".into(), b));
        }
        out.push(("item_table".into(), &mut self.item_table));
        if let Some(t) = &mut self.transformer {
            out.push(("attn.wq".into(), &mut t.wq));
            out.push(("attn.wk".into(), &mut t.wk));
            out.push(("attn.wv".into(), &mut t.wv));
            out.push(("attn.wo".into(), &mut t.wo));
            out.push(("ffn1.w".into(), &mut t.ffn1.w));
            out.push(("ffn1.b".into(), &mut t.ffn1.b));
            out.push(("ffn2.w".into(), &mut t.ffn2.w));
            out.push(("ffn2.b".into(), &mut t.ffn2.b));
            if let Some(p) = &mut t.positional {
                out.push(("positional".into(), p));
            }
        }
        for (i, layer) in self.umlp.iter_mut().enumerate() {
            out.push((format!("umlp{i}.w"), &mut layer.w));
            out.push((format!("umlp{i}.b"), &mut layer.b));
        }
        for (i, layer) in self.score.iter_mut().enumerate() {
            out.push((format!("score{i}.w"), &mut layer.w));
            out.push((format!("score{i}.b"), &mut layer.b));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self −= lr · grad`, tensor by tensor.
    pub fn sgd_step(&mut self, grad: &ClientModelParams, lr: f64) -> Result<()> {
        self.sgd_step_split(grad, lr, lr)
    }

    /// Like [`sgd_step`](Self::sgd_step) with a separate rate for the item
    /// table.
    pub fn sgd_step_split(&mut self, grad: &ClientModelParams, lr: f64, item_lr: f64) -> Result<()> {
        let grads = grad.tensors();
        let mut params = self.tensors_mut();
        if grads.len() != params.len() {
            return Err(Error::Parameter("gradient layout differs from parameters".into()));
        }
        for ((name, p), (gname, g)) in params.iter_mut().zip(&grads) {
            debug_assert_eq!(name, gname);
            let rate = if name == "item_table" { item_lr } else { lr };
            p.axpy(-rate, g)?;
        }
        self.item_table.row_mut(0).fill(0.0);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.all_finite())
    }
}

/// Normal(0, std) item table with a zero padding row.
pub fn init_item_table<R: Rng + ?Sized>(num_items: usize, dim: usize, std: f64, rng: &mut R) -> Result<Matrix> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(format!("item init std {std}: {e}")))?;
    Ok(Matrix::from_fn(num_items + 1, dim, |r, _| {
        if r == 0 {
            0.0
        } else {
            normal.sample(rng)
        }
    }))
}
