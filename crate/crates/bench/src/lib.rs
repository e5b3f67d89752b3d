//! Random fixtures for the criterion benchmarks in `benches/`.

use fedgraph_core::model::TrainingBatch;
use fedgraph_core::{ClientModelParams, FederationConfig, Matrix, ModelShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Item table with a zero padding row.
pub fn random_table(items: usize, dim: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(items + 1, dim, |r, _| if r == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) })
}

/// Default-sized model on an ML-100K-sized catalogue.
pub fn default_model(seed: u64) -> (ModelShape, ClientModelParams, Vec<f64>) {
    let shape = FederationConfig::default().shape(1682, 100);
    let mut r = rng(seed);
    let params = ClientModelParams::init(&shape, 0.1, &mut r).expect("valid default shape");
    let text = (0..shape.text_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    (shape, params, text)
}

/// Full-length history with 1 positive and 4 negatives per position,
/// roughly one local mini-batch.
pub fn training_batch(shape: &ModelShape, rng: &mut impl Rng) -> TrainingBatch {
    let item = |r: &mut dyn rand::RngCore| r.gen_range(1..=shape.num_items as u32);
    let sequence = (0..shape.max_seq_len).map(|_| item(rng)).collect();
    let mut candidates = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..shape.max_seq_len {
        for j in 0..5 {
            candidates.push(item(rng));
            labels.push(if j == 0 { 1.0 } else { 0.0 });
        }
    }
    TrainingBatch { sequence, candidates, labels }
}
