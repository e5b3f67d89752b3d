//! Round loop: broadcast, parallel local training, upload, graph
//! (re)build, aggregation, evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_eval_candidates, EvalCandidates, InteractionDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{hit_ratio, ndcg, rank_of};
use crate::model::{
    local_train, pad_sequence, prepare_upload, score_candidates, ClientModelParams, ModelShape,
    TrainConfig, UploadPacket,
};
use crate::rng::{stream_rng, Stream};
use crate::server::{
    build_topk_graph, fedavg_aggregate, gcn_aggregate, gcn_mean, reduce_global, similarity_matrix,
    vectorize_weights, Broadcast, GlobalItemEmbedding, SimilarityMatrix, UserGraph,
};
use crate::text::EmbeddingCache;

pub use crate::server::ReduceMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    /// Graph convolution over the top-k user graph.
    #[default]
    Graph,
    /// Plain average of the uploaded item tables.
    Fedavg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Multiplier on `learning_rate` for the item table only.
    pub item_lr_scale: f64,
    pub reg_lambda: f64,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub umlp_hidden: usize,
    pub max_seq_len: usize,
    pub top_k: usize,
    pub dp_alpha: f64,
    /// Rebuild the user graph every `lite_interval` rounds.
    pub lite_interval: usize,
    pub reduce_mode: ReduceMode,
    pub aggregation: AggregationKind,
    pub disable_transformer: bool,
    pub disable_joint_embedding: bool,
    pub positional: bool,
    pub symmetrize: bool,
    pub batch_size: usize,
    pub train_negatives: usize,
    pub eval_k: usize,
    pub eval_every: usize,
    pub workers: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 100,
            local_epochs: 1,
            learning_rate: 0.01,
            item_lr_scale: 1.0,
            reg_lambda: 0.1,
            embed_dim: 32,
            heads: 2,
            ffn_dim: 64,
            umlp_hidden: 64,
            max_seq_len: 50,
            top_k: 10,
            dp_alpha: 0.0,
            lite_interval: 1,
            reduce_mode: ReduceMode::Mean,
            aggregation: AggregationKind::Graph,
            disable_transformer: false,
            disable_joint_embedding: false,
            positional: false,
            symmetrize: false,
            batch_size: 256,
            train_negatives: 4,
            eval_k: 10,
            eval_every: 1,
            workers: 1,
            seed: 0,
            init_std: 0.01,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 13] = [
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.local_epochs >= 1, "local_epochs must be >= 1"),
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be > 0"),
            (self.item_lr_scale > 0.0 && self.item_lr_scale.is_finite(), "item_lr_scale must be > 0"),
            (self.reg_lambda >= 0.0 && self.reg_lambda.is_finite(), "reg_lambda must be >= 0"),
            (self.dp_alpha >= 0.0 && self.dp_alpha.is_finite(), "dp_alpha must be >= 0"),
            (self.lite_interval >= 1, "lite_interval must be >= 1"),
            (self.top_k >= 1, "top_k must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.eval_k >= 1, "eval_k must be >= 1"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.init_std >= 0.0 && self.init_std.is_finite(), "init_std must be >= 0"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Parameter((*msg).to_string()));
        }
        self.shape(1, 1).validate()
    }

    pub fn shape(&self, num_items: usize, text_dim: usize) -> ModelShape {
        ModelShape {
            num_items,
            text_dim,
            embed_dim: self.embed_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            umlp_hidden: self.umlp_hidden,
            score_hidden: [16, 8],
            max_seq_len: self.max_seq_len,
            use_transformer: !self.disable_transformer,
            use_joint_embedding: !self.disable_joint_embedding,
            positional: self.positional,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            reg_lambda: self.reg_lambda,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            negatives_per_positive: self.train_negatives,
            item_lr_scale: self.item_lr_scale,
        }
    }

    fn is_eval_round(&self, round: usize) -> bool {
        (round - 1) % self.eval_every == 0 || round == self.rounds
    }

    fn rebuilds_graph(&self, round: usize) -> bool {
        (round - 1) % self.lite_interval == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    /// No transformer.
    #[serde(rename = "nt")]
    NoTransformer,
    /// No joint embedding.
    #[serde(rename = "nj")]
    NoJoint,
    /// Neither.
    #[serde(rename = "nb")]
    NoBoth,
    Fedavg,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoTransformer,
        Variant::NoJoint,
        Variant::NoBoth,
        Variant::Fedavg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTransformer => "nT",
            Variant::NoJoint => "nJ",
            Variant::NoBoth => "nB",
            Variant::Fedavg => "fedavg",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    /// `base` with this variant's switches applied; everything else,
    /// including the seed, is kept.
    pub fn apply(self, base: &FederationConfig) -> FederationConfig {
        let mut c = base.clone();
        c.disable_transformer = matches!(self, Variant::NoTransformer | Variant::NoBoth);
        c.disable_joint_embedding = matches!(self, Variant::NoJoint | Variant::NoBoth);
        c.aggregation = if self == Variant::Fedavg {
            AggregationKind::Fedavg
        } else {
            AggregationKind::Graph
        };
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean over clients of the mean mini-batch loss.
    pub loss: f64,
    /// HR@K in percent.
    pub hr: f64,
    /// NDCG@K in percent.
    pub ndcg: f64,
    pub graph_rebuilt: bool,
    pub upload_floats: usize,
}

pub const METRICS_HEADER: &str = "round,loss,hr10,ndcg10,graph_rebuilt,upload_floats";

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.4},{:.4},{},{}",
            r.round, r.loss, r.hr, r.ndcg, r.graph_rebuilt, r.upload_floats
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: Vec<RoundMetrics>,
    /// Final local models, indexed like the dataset users.
    pub clients: Vec<ClientModelParams>,
    /// Last shared table; `None` in personalized mode.
    pub global: Option<GlobalItemEmbedding>,
    pub graph_builds: usize,
    pub shape: ModelShape,
}

impl ExperimentOutcome {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.metrics.last().expect("at least one evaluated round")
    }

    pub fn best_hr(&self) -> f64 {
        self.metrics.iter().map(|m| m.hr).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Observer for each graph the server builds.
pub type GraphObserver<'a> = dyn FnMut(usize, &UserGraph, &SimilarityMatrix) + 'a;

/// Fixed 1 + 99 candidate lists, one per user, drawn once per experiment.
pub fn eval_candidates(dataset: &InteractionDataset, seed: u64) -> Result<Vec<EvalCandidates>> {
    (0..dataset.num_users())
        .map(|u| build_eval_candidates(dataset, u, &mut stream_rng(seed, Stream::Eval, u as u64, 0)))
        .collect()
}

/// Mean HR@K and NDCG@K (percent) with each user's own local model.
pub fn evaluate(
    clients: &[ClientModelParams],
    shape: &ModelShape,
    cache: &EmbeddingCache,
    dataset: &InteractionDataset,
    candidates: &[EvalCandidates],
    k: usize,
) -> Result<(f64, f64)> {
    if clients.len() != dataset.num_users() || candidates.len() != dataset.num_users() {
        return Err(Error::Evaluation(format!(
            "{} clients, {} candidate lists, {} users",
            clients.len(),
            candidates.len(),
            dataset.num_users()
        )));
    }
    if clients.is_empty() {
        return Err(Error::Evaluation("no users to evaluate".into()));
    }
    let per_user: Vec<(f64, f64)> = (0..clients.len())
        .into_par_iter()
        .map(|u| {
            let cand = &candidates[u];
            let split = dataset.user(u);
            if cand.positive != split.test {
                return Err(Error::Evaluation(format!("candidates do not match user {}", split.user_id)));
            }
            let items = cand.items();
            let seq = pad_sequence(&split.train, shape.max_seq_len);
            let text = &cache.table().get(u).vector;
            let scores = score_candidates(&clients[u], shape, text, &seq, &items)?;
            let rank = rank_of(cand.positive, &items, &scores)
                .ok_or_else(|| Error::Evaluation(format!("positive missing for user {}", split.user_id)))?;
            Ok((hit_ratio(rank, k), ndcg(rank, k)))
        })
        .collect::<Result<_>>()?;
    let n = per_user.len() as f64;
    let hr = per_user.iter().map(|p| p.0).sum::<f64>() / n;
    let nd = per_user.iter().map(|p| p.1).sum::<f64>() / n;
    Ok((100.0 * hr, 100.0 * nd))
}

pub fn run_experiment(
    dataset: &InteractionDataset,
    cache: &mut EmbeddingCache,
    config: &FederationConfig,
) -> Result<ExperimentOutcome> {
    run_experiment_observed(dataset, cache, config, &mut |_, _, _| {})
}

/// [`run_experiment`], calling `observer` after every graph build.
pub fn run_experiment_observed(
    dataset: &InteractionDataset,
    cache: &mut EmbeddingCache,
    config: &FederationConfig,
    observer: &mut GraphObserver<'_>,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let n = dataset.num_users();
    if n == 0 {
        return Err(Error::Parameter("dataset has no users".into()));
    }
    if cache.table().len() != n {
        return Err(Error::Parameter(format!(
            "embedding cache covers {} users, dataset has {n}",
            cache.table().len()
        )));
    }
    let shape = config.shape(dataset.num_items(), cache.table().dim());
    shape.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let top_k = config.top_k.min(n.saturating_sub(1));
    if top_k < config.top_k {
        log::warn!("top_k {} reduced to {top_k} for {n} users", config.top_k);
    }
    let train_config = config.train_config();

    let initial = ClientModelParams::init(&shape, config.init_std, &mut stream_rng(config.seed, Stream::Init, 0, 0))?;
    let mut broadcast = Broadcast::Shared(GlobalItemEmbedding {
        table: initial.item_table.clone(),
        round: 0,
    });
    let mut clients = vec![initial; n];
    let candidates = eval_candidates(dataset, config.seed)?;

    let mut graph: Option<UserGraph> = None;
    let mut graph_builds = 0;
    let mut metrics = Vec::new();
    let mut global = None;

    for round in 1..=config.rounds {
        cache.refresh(dataset)?;
        let table = cache.table();
        let results: Vec<(f64, UploadPacket)> = pool.install(|| {
            clients
                .par_iter_mut()
                .enumerate()
                .map(|(u, params)| {
                    let r = round as u64;
                    let mut rng = stream_rng(config.seed, Stream::Train, u as u64, r);
                    let report = local_train(
                        params,
                        &shape,
                        &table.get(u).vector,
                        dataset,
                        u,
                        broadcast.table_for(u),
                        &train_config,
                        round,
                        &mut rng,
                    )?;
                    let mut noise = stream_rng(config.seed, Stream::Noise, u as u64, r);
                    let packet = prepare_upload(params, u, config.dp_alpha, &mut noise)?;
                    Ok((report.mean_loss, packet))
                })
                .collect::<Result<_>>()
        })?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n as f64;
        let upload_floats = results.iter().map(|r| r.1.float_count()).sum();
        let packets: Vec<UploadPacket> = results.into_iter().map(|r| r.1).collect();

        let mut graph_rebuilt = false;
        broadcast = match config.aggregation {
            AggregationKind::Fedavg => {
                let tables: Vec<Matrix> = packets.into_iter().map(|p| p.item_table).collect();
                Broadcast::Shared(fedavg_aggregate(&tables, round)?)
            }
            AggregationKind::Graph => {
                if graph.is_none() || config.rebuilds_graph(round) {
                    let expected = packets[0].user_weight.shape();
                    let vectors: Vec<Vec<f64>> =
                        packets.iter().map(|p| vectorize_weights(p, expected)).collect::<Result<_>>()?;
                    let built = pool.install(|| -> Result<_> {
                        let sim = similarity_matrix(&vectors)?;
                        let g = if top_k == 0 {
                            UserGraph::self_loops(n)
                        } else {
                            build_topk_graph(&sim, top_k)?
                        };
                        let g = if config.symmetrize { g.symmetrized() } else { g };
                        Ok((g, sim))
                    })?;
                    observer(round, &built.0, &built.1);
                    graph = Some(built.0);
                    graph_builds += 1;
                    graph_rebuilt = true;
                }
                let g = graph.as_ref().expect("graph built above");
                let tables: Vec<Matrix> = packets.into_iter().map(|p| p.item_table).collect();
                pool.install(|| match config.reduce_mode {
                    ReduceMode::Mean => gcn_mean(g, &tables, round).map(Broadcast::Shared),
                    ReduceMode::Personalized => reduce_global(gcn_aggregate(g, &tables)?, config.reduce_mode, round),
                })?
            }
        };
        let finite = match &broadcast {
            Broadcast::Shared(g) => g.table.all_finite(),
            Broadcast::PerClient(ts) => ts.iter().all(Matrix::all_finite),
        };
        if !finite {
            return Err(Error::Aggregation(format!("non-finite aggregate in round {round}")));
        }
        global = match &broadcast {
            Broadcast::Shared(g) => Some(g.clone()),
            Broadcast::PerClient(_) => None,
        };

        if config.is_eval_round(round) {
            let (hr, nd) = pool.install(|| evaluate(&clients, &shape, cache, dataset, &candidates, config.eval_k))?;
            log::info!("round {round}: loss {loss:.4} HR {hr:.2} NDCG {nd:.2}");
            metrics.push(RoundMetrics {
                round,
                loss,
                hr,
                ndcg: nd,
                graph_rebuilt,
                upload_floats,
            });
        }
    }
    Ok(ExperimentOutcome {
        metrics,
        clients,
        global,
        graph_builds,
        shape,
    })
}

/// Runs each variant from the same base config, data and seed.
pub fn run_ablation(
    dataset: &InteractionDataset,
    cache: &mut EmbeddingCache,
    base: &FederationConfig,
    variants: &[Variant],
) -> Result<Vec<(Variant, ExperimentOutcome)>> {
    variants
        .iter()
        .map(|&v| {
            log::info!("ablation variant {}", v.name());
            Ok((v, run_experiment(dataset, cache, &v.apply(base))?))
        })
        .collect()
}

/// One line per variant: name, final HR, final NDCG, best HR.
pub fn ablation_table(results: &[(Variant, ExperimentOutcome)]) -> String {
    let mut out = String::from("variant,hr10,ndcg10,best_hr10\n");
    for (v, o) in results {
        let m = o.final_metrics();
        let _ = writeln!(out, "{},{:.4},{:.4},{:.4}", v.name(), m.hr, m.ndcg, o.best_hr());
    }
    out
}
