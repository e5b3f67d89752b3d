//! One client's recommender.
//!
//! ```text
//! e_u      = v_u · W + b                     (joint embedding; free vector when disabled)
//! s        = mean_t TransformerBlock(E[seq])  (zero when the transformer is disabled)
//! u_rep    = UserMLP(e_u + s)                 d → hidden → d
//! ŷ(i)     = σ(ScoreMLP(u_rep ⊙ E[i]))        d → 16 → 8 → 1
//! ```
//!
//! Gradients are written out by hand in the `forward` and `transformer` submodules.

mod forward;
mod params;
mod train;
mod transformer;

pub use forward::{bce_loss, joint_embed, loss_and_grad, predict, reg_term, score_candidates, total_loss, TrainingBatch};
pub use params::{init_item_table, ClientModelParams, Dense, TransformerParams};
pub use train::{
    laplace, local_train, pad_sequence, prepare_upload, TrainConfig, TrainReport, UploadPacket,
};
pub use transformer::transformer_forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer sizes and architecture switches shared by all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_items: usize,
    /// Text embedding dimension (d1).
    pub text_dim: usize,
    /// Item / user embedding dimension (d).
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub umlp_hidden: usize,
    pub score_hidden: [usize; 2],
    pub max_seq_len: usize,
    pub use_transformer: bool,
    pub use_joint_embedding: bool,
    pub positional: bool,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.num_items == 0 {
            return fail("num_items must be positive".into());
        }
        if self.embed_dim == 0 || self.text_dim == 0 {
            return fail("embedding dimensions must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.ffn_dim == 0 || self.umlp_hidden == 0 || self.score_hidden.contains(&0) {
            return fail("hidden layer sizes must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Rows of the uploaded user-weight matrix.
    pub fn user_input_dim(&self) -> usize {
        if self.use_joint_embedding {
            self.text_dim
        } else {
            1
        }
    }
}

#[cfg(test)]
mod tests;
