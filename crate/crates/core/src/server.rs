//! Server side: user similarity graph from uploaded joint-embedding
//! weights, and graph-convolution aggregation of client item tables.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::UploadPacket;

/// Row-major flattening of the uploaded user weight.
pub fn vectorize_weights(packet: &UploadPacket, expected: (usize, usize)) -> Result<Vec<f64>> {
    if packet.user_weight.shape() != expected {
        return Err(Error::dim(
            "vectorize_weights",
            packet.user_weight.shape_str(),
            format!("{}x{}", expected.0, expected.1),
        ));
    }
    Ok(packet.user_weight.as_slice().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
    /// Users whose vector was all zeros.
    degenerate: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn degenerate(&self) -> &[usize] {
        &self.degenerate
    }

    /// Wraps a precomputed matrix; used for hand-built test inputs.
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::dim("similarity", values.shape_str(), "square"));
        }
        Ok(SimilarityMatrix {
            values,
            degenerate: Vec::new(),
        })
    }
}

/// Pairwise cosine similarities. An all-zero vector is similar to nothing
/// (0) except itself (1) and is reported in [`SimilarityMatrix::degenerate`].
pub fn similarity_matrix(vectors: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let n = vectors.len();
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
            return Err(Error::dim(
                "similarity_matrix",
                format!("vector of {}", first.len()),
                format!("vector of {}", bad.len()),
            ));
        }
    }
    let unit: Vec<Option<Vec<f64>>> = vectors
        .iter()
        .map(|v| {
            let len = norm(v);
            (len > 0.0).then(|| v.iter().map(|x| x / len).collect())
        })
        .collect();
    let degenerate: Vec<usize> = (0..n).filter(|&i| unit[i].is_none()).collect();
    // Each entry is an independent dot product, so parallel rows stay
    // bit-identical to a serial pass.
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| match (&unit[i], &unit[j]) {
                    (Some(a), Some(b)) => dot(a, b).clamp(-1.0, 1.0),
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    let mut values = Matrix::identity(n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &s) in row.iter().enumerate() {
            let j = i + 1 + off;
            values.set(i, j, s);
            values.set(j, i, s);
        }
    }
    Ok(SimilarityMatrix { values, degenerate })
}

/// Directed top-k user graph with self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserGraph {
    k: usize,
    /// Sorted neighbor lists, self included.
    neighbors: Vec<Vec<usize>>,
}

impl UserGraph {
    /// Graph where every node only links to itself.
    pub fn self_loops(n: usize) -> Self {
        UserGraph {
            k: 0,
            neighbors: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn from_neighbors(k: usize, mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, row) in neighbors.iter_mut().enumerate() {
            if row.iter().any(|&j| j >= n) {
                return Err(Error::Parameter(format!("neighbor of {i} out of range")));
            }
            if !row.contains(&i) {
                row.push(i);
            }
            row.sort_unstable();
            row.dedup();
        }
        Ok(UserGraph { k, neighbors })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Row sums of the adjacency (self-loop included).
    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Dense 0/1 adjacency.
    pub fn adjacency(&self) -> Matrix {
        let n = self.n();
        let mut a = Matrix::zeros(n, n);
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                a.set(i, j, 1.0);
            }
        }
        a
    }

    /// Adds `j → i` for every edge `i → j`.
    pub fn symmetrized(&self) -> Self {
        let mut neighbors = self.neighbors.clone();
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                neighbors[j].push(i);
            }
        }
        for row in &mut neighbors {
            row.sort_unstable();
            row.dedup();
        }
        UserGraph { k: self.k, neighbors }
    }

    /// `D^{-1/2} A D^{-1/2}` entry for an existing edge.
    fn weight(&self, degrees: &[usize], i: usize, j: usize) -> f64 {
        1.0 / ((degrees[i] * degrees[j]) as f64).sqrt()
    }
}

/// Links each user to the `k` most similar other users (ties → lower
/// index) plus itself. Rows are chosen independently; the result is not
/// symmetrized.
pub fn build_topk_graph(sim: &SimilarityMatrix, k: usize) -> Result<UserGraph> {
    let n = sim.n();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("top-k {k} outside [1, {}]", n.saturating_sub(1))));
    }
    let neighbors = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| sim.get(i, b).total_cmp(&sim.get(i, a)).then(a.cmp(&b)));
            let mut row: Vec<usize> = others.into_iter().take(k).collect();
            row.push(i);
            row.sort_unstable();
            row
        })
        .collect();
    Ok(UserGraph { k, neighbors })
}

fn check_tables(graph: &UserGraph, tables: &[Matrix]) -> Result<()> {
    if tables.len() != graph.n() {
        return Err(Error::dim(
            "gcn_aggregate",
            format!("{} users in graph", graph.n()),
            format!("{} tables", tables.len()),
        ));
    }
    if let Some(first) = tables.first() {
        if let Some(bad) = tables.iter().find(|t| t.shape() != first.shape()) {
            return Err(Error::dim("gcn_aggregate", first.shape_str(), bad.shape_str()));
        }
    }
    Ok(())
}

/// One propagation step `R = D^{-1/2} A D^{-1/2} · tables`, returning one
/// table per user. Padding rows (row 0) are kept at zero.
pub fn gcn_aggregate(graph: &UserGraph, tables: &[Matrix]) -> Result<Vec<Matrix>> {
    check_tables(graph, tables)?;
    let degrees = graph.degrees();
    (0..graph.n())
        .into_par_iter()
        .map(|i| {
            let (rows, cols) = tables[i].shape();
            let mut out = Matrix::zeros(rows, cols);
            for &j in graph.neighbors(i) {
                out.axpy(graph.weight(&degrees, i, j), &tables[j])?;
            }
            out.row_mut(0).fill(0.0);
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalItemEmbedding {
    pub table: Matrix,
    pub round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMode {
    /// Average the per-user tables into one shared table.
    #[default]
    Mean,
    /// Send each client its own aggregated table.
    Personalized,
}

/// What the server sends out for the next round.
#[derive(Debug, Clone, PartialEq)]
pub enum Broadcast {
    Shared(GlobalItemEmbedding),
    PerClient(Vec<Matrix>),
}

impl Broadcast {
    pub fn table_for(&self, client: usize) -> &Matrix {
        match self {
            Broadcast::Shared(g) => &g.table,
            Broadcast::PerClient(tables) => &tables[client],
        }
    }
}

fn mean_table(tables: &[Matrix]) -> Result<Matrix> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Aggregation("no tables to aggregate".into()))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for t in tables {
        acc.add_assign(t)?;
    }
    acc.scale(1.0 / tables.len() as f64);
    acc.row_mut(0).fill(0.0);
    Ok(acc)
}

pub fn reduce_global(aggregated: Vec<Matrix>, mode: ReduceMode, round: usize) -> Result<Broadcast> {
    if aggregated.is_empty() {
        return Err(Error::Aggregation("no aggregated tables".into()));
    }
    match mode {
        ReduceMode::Mean => Ok(Broadcast::Shared(GlobalItemEmbedding {
            table: mean_table(&aggregated)?,
            round,
        })),
        ReduceMode::Personalized => Ok(Broadcast::PerClient(aggregated)),
    }
}

/// Same value as `reduce_global(gcn_aggregate(..), Mean)` without
/// materializing the per-user tables: each client table j contributes with
/// weight `(1/N) Σ_i N_ij`.
pub fn gcn_mean(graph: &UserGraph, tables: &[Matrix], round: usize) -> Result<GlobalItemEmbedding> {
    check_tables(graph, tables)?;
    let first = tables
        .first()
        .ok_or_else(|| Error::Aggregation("no tables to aggregate".into()))?;
    let degrees = graph.degrees();
    let n = graph.n() as f64;
    let mut column_weight = vec![0.0; graph.n()];
    for i in 0..graph.n() {
        for &j in graph.neighbors(i) {
            column_weight[j] += graph.weight(&degrees, i, j) / n;
        }
    }
    let mut table = Matrix::zeros(first.rows(), first.cols());
    for (t, &w) in tables.iter().zip(&column_weight) {
        if w != 0.0 {
            table.axpy(w, t)?;
        }
    }
    table.row_mut(0).fill(0.0);
    Ok(GlobalItemEmbedding { table, round })
}

/// Unweighted elementwise mean of the client tables.
pub fn fedavg_aggregate(tables: &[Matrix], round: usize) -> Result<GlobalItemEmbedding> {
    Ok(GlobalItemEmbedding {
        table: mean_table(tables)?,
        round,
    })
}

/// Writes one `round \t user_i \t user_j \t similarity` line per
/// non-self edge, using the supplied user ids.
pub fn write_graph_dump<W: Write>(
    out: &mut W,
    round: usize,
    graph: &UserGraph,
    sim: &SimilarityMatrix,
    user_ids: &[u32],
) -> std::io::Result<()> {
    for i in 0..graph.n() {
        for &j in graph.neighbors(i) {
            if i != j {
                writeln!(out, "{round}\t{}\t{}\t{:.9}", user_ids[i], user_ids[j], sim.get(i, j))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn packet(w: Matrix) -> UploadPacket {
        UploadPacket {
            client_id: 0,
            user_weight: w,
            item_table: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn vectorize_row_major() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let v = vectorize_weights(&packet(w.clone()), (2, 2)).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Matrix::from_vec(2, 2, v).unwrap(), w);
        assert_eq!(vectorize_weights(&packet(Matrix::zeros(2, 2)), (2, 2)).unwrap(), vec![0.0; 4]);
        assert!(vectorize_weights(&packet(Matrix::zeros(2, 3)), (2, 2)).is_err());
    }

    #[test]
    fn cosine_examples() {
        let s = similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(s.get(0, 3), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(0, 2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert_eq!(s.get(2, 2), 1.0);
        assert!(s.degenerate().is_empty());
    }

    #[test]
    fn zero_vector_is_flagged() {
        let s = similarity_matrix(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(s.degenerate(), &[0]);
        assert_eq!((s.get(0, 0), s.get(0, 1), s.get(1, 0)), (1.0, 0.0, 0.0));
        assert!(similarity_matrix(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn topk_examples() {
        let s = SimilarityMatrix::from_matrix(Matrix::from_rows(&[
            [1.0, 0.2, 0.9],
            [0.2, 1.0, 0.5],
            [0.9, 0.5, 1.0],
        ]))
        .unwrap();
        let g = build_topk_graph(&s, 1).unwrap();
        assert_eq!(g.neighbors(0), &[0, 2]);
        assert_eq!(g.neighbors(1), &[1, 2]);
        let full = build_topk_graph(&s, 2).unwrap();
        assert!((0..3).all(|i| full.neighbors(i) == [0, 1, 2]));
        assert!(build_topk_graph(&s, 0).is_err());
        assert!(build_topk_graph(&s, 3).is_err());

        let tie = SimilarityMatrix::from_matrix(Matrix::from_rows(&[
            [1.0, 0.4, 0.4],
            [0.4, 1.0, 0.1],
            [0.4, 0.1, 1.0],
        ]))
        .unwrap();
        assert_eq!(build_topk_graph(&tie, 1).unwrap().neighbors(0), &[0, 1]);
    }

    fn random_tables(n: usize, rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Matrix> {
        (0..n)
            .map(|_| Matrix::from_fn(rows, cols, |r, _| if r == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) }))
            .collect()
    }

    /// Dense `D^{-1/2} A D^{-1/2}` applied to the stacked tables.
    fn dense_reference(graph: &UserGraph, tables: &[Matrix]) -> Vec<Matrix> {
        let a = graph.adjacency();
        let n = a.rows();
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
        (0..n)
            .map(|i| {
                let mut out = Matrix::zeros(tables[0].rows(), tables[0].cols());
                for j in 0..n {
                    let w = a.get(i, j) / (deg[i].sqrt() * deg[j].sqrt());
                    for (o, t) in out.as_mut_slice().iter_mut().zip(tables[j].as_slice()) {
                        *o += w * t;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn gcn_identity_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tables = random_tables(3, 4, 2, &mut rng);
        let r = gcn_aggregate(&UserGraph::self_loops(3), &tables).unwrap();
        assert_eq!(r, tables);

        let t = random_tables(1, 4, 2, &mut rng).remove(0);
        let s = SimilarityMatrix::from_matrix(Matrix::from_rows(&[[1.0, 0.3], [0.3, 1.0]])).unwrap();
        let g = build_topk_graph(&s, 1).unwrap();
        let r = gcn_aggregate(&g, &[t.clone(), t.clone()]).unwrap();
        for ri in &r {
            assert!(ri.max_abs_diff(&t).unwrap() < 1e-15);
        }
        assert!(gcn_aggregate(&g, std::slice::from_ref(&t)).is_err());
    }

    #[test]
    fn gcn_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vectors: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let g = build_topk_graph(&similarity_matrix(&vectors).unwrap(), 2).unwrap();
        let tables = random_tables(4, 5, 3, &mut rng);
        let fast = gcn_aggregate(&g, &tables).unwrap();
        for (a, b) in fast.iter().zip(dense_reference(&g, &tables)) {
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn reduce_modes() {
        let one = vec![Matrix::from_rows(&[[0.0], [2.0]])];
        for mode in [ReduceMode::Mean, ReduceMode::Personalized] {
            assert_eq!(reduce_global(one.clone(), mode, 1).unwrap().table_for(0), &one[0]);
        }
        let two = vec![Matrix::from_rows(&[[0.0], [2.0]]), Matrix::from_rows(&[[0.0], [4.0]])];
        let mean = reduce_global(two.clone(), ReduceMode::Mean, 1).unwrap();
        assert_eq!(mean.table_for(1).as_slice(), &[0.0, 3.0]);
        match reduce_global(two.clone(), ReduceMode::Personalized, 1).unwrap() {
            Broadcast::PerClient(t) => assert_eq!(t, two),
            other => panic!("{other:?}"),
        }
        assert!(reduce_global(Vec::new(), ReduceMode::Mean, 1).is_err());
    }

    #[test]
    fn fedavg_examples() {
        let t = Matrix::from_rows(&[[0.0], [5.0]]);
        assert_eq!(fedavg_aggregate(&[t.clone(), t.clone()], 0).unwrap().table, t);
        let avg = fedavg_aggregate(&[Matrix::from_rows(&[[0.0], [0.0]]), Matrix::from_rows(&[[0.0], [2.0]])], 0).unwrap();
        assert_eq!(avg.table.as_slice(), &[0.0, 1.0]);
        assert!(fedavg_aggregate(&[Matrix::zeros(2, 1), Matrix::zeros(3, 1)], 0).is_err());
        assert!(fedavg_aggregate(&[], 0).is_err());
    }

    #[test]
    fn fedavg_equals_gcn_on_complete_graph_with_equal_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tables(1, 6, 3, &mut rng).remove(0);
        let tables = vec![t.clone(); 5];
        let vectors: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let g = build_topk_graph(&similarity_matrix(&vectors).unwrap(), 4).unwrap();
        let gcn = reduce_global(gcn_aggregate(&g, &tables).unwrap(), ReduceMode::Mean, 0).unwrap();
        let avg = fedavg_aggregate(&tables, 0).unwrap();
        assert!(gcn.table_for(0).max_abs_diff(&avg.table).unwrap() < 1e-12);
    }

    #[test]
    fn graph_dump_lines() {
        let s = SimilarityMatrix::from_matrix(Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]])).unwrap();
        let g = build_topk_graph(&s, 1).unwrap();
        let mut buf = Vec::new();
        write_graph_dump(&mut buf, 3, &g, &s, &[10, 20]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3\t10\t20\t0.500000000\n3\t20\t10\t0.500000000\n");
    }

    fn vectors_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..=8, 1usize..6).prop_flat_map(|(n, len)| {
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, len), n)
        })
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_bounded_and_scale_invariant(
            vectors in vectors_strategy(),
            scale in 0.01f64..100.0,
            which in 0usize..8,
        ) {
            prop_assume!(vectors.iter().all(|v| norm(v) > 1e-6));
            let s = similarity_matrix(&vectors).unwrap();
            let n = s.n();
            for i in 0..n {
                prop_assert!((s.get(i, i) - 1.0).abs() <= 1e-12);
                for j in 0..n {
                    prop_assert!((s.get(i, j) - s.get(j, i)).abs() <= 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&s.get(i, j)));
                }
            }
            let mut scaled = vectors.clone();
            let w = which % n;
            scaled[w].iter_mut().for_each(|x| *x *= scale);
            let s2 = similarity_matrix(&scaled).unwrap();
            prop_assert!(s.values().max_abs_diff(s2.values()).unwrap() < 1e-12);
        }

        #[test]
        fn graph_structure_and_oracles(
            vectors in vectors_strategy(),
            k_seed in 0usize..100,
            table_seed in 0u64..1000,
            perm_seed in 0u64..1000,
        ) {
            let n = vectors.len();
            let k = 1 + k_seed % (n - 1);
            let s = similarity_matrix(&vectors).unwrap();
            let g = build_topk_graph(&s, k).unwrap();
            let degrees = g.degrees();
            for i in 0..n {
                prop_assert!(g.has_edge(i, i));
                prop_assert_eq!(degrees[i], k + 1);
                // D^{-1} A is row-stochastic.
                let row_sum: f64 = g.adjacency().row(i).iter().map(|a| a / degrees[i] as f64).sum();
                prop_assert!((row_sum - 1.0).abs() <= 1e-12);
            }

            let mut rng = ChaCha8Rng::seed_from_u64(table_seed);
            let tables = random_tables(n, 4, 3, &mut rng);
            let fast = gcn_aggregate(&g, &tables).unwrap();
            for (a, b) in fast.iter().zip(dense_reference(&g, &tables)) {
                prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
            }
            let mean = reduce_global(fast.clone(), ReduceMode::Mean, 0).unwrap();
            let fused = gcn_mean(&g, &tables, 0).unwrap();
            prop_assert!(mean.table_for(0).max_abs_diff(&fused.table).unwrap() < 1e-12);

            // Relabeling clients permutes R, leaving the mean unchanged.
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted: Vec<Matrix> = perm.iter().map(|&p| fast[p].clone()).collect();
            let mean2 = reduce_global(permuted, ReduceMode::Mean, 0).unwrap();
            prop_assert!(mean.table_for(0).max_abs_diff(mean2.table_for(0)).unwrap() < 1e-12);
        }

        #[test]
        fn topk_invariant_under_positive_rescaling(
            vectors in vectors_strategy(),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(vectors.iter().all(|v| norm(v) > 1e-6));
            let n = vectors.len();
            let k = (n - 1).min(3);
            let g = build_topk_graph(&similarity_matrix(&vectors).unwrap(), k).unwrap();
            let scaled: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let g2 = build_topk_graph(&similarity_matrix(&scaled).unwrap(), k).unwrap();
            prop_assert_eq!(g.adjacency(), g2.adjacency());
        }
    }
}
