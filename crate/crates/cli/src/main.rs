mod config;
mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedgraph_core::data::{leave_one_out_split, load_generic_tsv, load_movielens_100k, movielens_paths};
use fedgraph_core::federation::{ablation_table, metrics_csv, run_experiment_observed};
use fedgraph_core::snapshot::write_snapshot;
use fedgraph_core::text::{load_precomputed, EmbeddingCache, PrecomputedEncoder, TextEncoder};
use fedgraph_core::{run_ablation, run_experiment, HashEncoder, InteractionDataset, Variant};

use config::{parse_config, DatasetKind, EncoderKind, ExperimentSpec};
use output::write_atomic;

#[derive(Parser, Debug)]
#[command(name = "fedgraph", version, about = "Graph-guided federated recommendation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one federated experiment and write its per-round metrics.
    Run(Common),
    /// Run several model variants with identical data and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of full,nT,nJ,nB,fedavg.
        #[arg(long, value_delimiter = ',', default_value = "full,nT,nJ,nB,fedavg")]
        variants: Vec<String>,
    },
    /// Repeat the experiment for several noise intensities.
    DpSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.4")]
        alphas: Vec<f64>,
    },
    /// Parse and check a config, then print it with defaults filled in.
    ValidateConfig(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for all output files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    dp_alpha: Option<f64>,
    #[arg(long)]
    lite_interval: Option<usize>,
    #[arg(long)]
    max_users: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = parse_config(&self.config)?;
        let f = &mut spec.federation;
        if let Some(v) = self.seed {
            f.seed = v;
        }
        if let Some(v) = self.workers {
            f.workers = v;
        }
        if let Some(v) = self.rounds {
            f.rounds = v;
        }
        if let Some(v) = self.dp_alpha {
            f.dp_alpha = v;
        }
        if let Some(v) = self.lite_interval {
            f.lite_interval = v;
        }
        if self.max_users.is_some() {
            spec.dataset.max_users = self.max_users;
        }
        if let Some(dir) = &self.out {
            spec.redirect_outputs(dir);
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn load_dataset(spec: &ExperimentSpec) -> Result<InteractionDataset> {
    let path = &spec.dataset.data;
    let mut raw = match spec.dataset.name {
        DatasetKind::Ml100k => {
            let (data, user) = movielens_paths(path);
            load_movielens_100k(&data, &user)
        }
        DatasetKind::Tsv => load_generic_tsv(path),
    }
    .with_context(|| format!("loading dataset {}", path.display()))?;
    if let Some(n) = spec.dataset.max_users {
        raw = raw.take_first_users(n);
    }
    log::info!(
        "dataset: {} users, {} items, {} records, sparsity {:.2}%",
        raw.num_users(),
        raw.num_items(),
        raw.num_records(),
        100.0 * raw.sparsity()
    );
    Ok(leave_one_out_split(&raw, spec.dataset.split)?)
}

fn build_cache(spec: &ExperimentSpec, dataset: &InteractionDataset) -> Result<EmbeddingCache> {
    let enc = &spec.encoder;
    let encoder: Box<dyn TextEncoder> = match enc.kind {
        EncoderKind::Hash => Box::new(HashEncoder::new(enc.d1, enc.seed)?),
        EncoderKind::File => {
            let path = enc.path.as_deref().context("encoder.path missing")?;
            let table = load_precomputed(path).with_context(|| format!("loading {}", path.display()))?;
            Box::new(PrecomputedEncoder::new(table, dataset)?)
        }
    };
    Ok(EmbeddingCache::build(dataset, encoder, enc.template.clone())?)
}

fn user_ids(dataset: &InteractionDataset) -> Vec<u32> {
    dataset.users().iter().map(|u| u.user_id).collect()
}

fn cmd_run(spec: &ExperimentSpec) -> Result<()> {
    let dataset = load_dataset(spec)?;
    let mut cache = build_cache(spec, &dataset)?;
    let ids = user_ids(&dataset);
    let mut dump = String::new();
    let want_dump = spec.output.graph_dump.is_some();
    let outcome = run_experiment_observed(&dataset, &mut cache, &spec.federation, &mut |round, graph, sim| {
        if want_dump {
            let mut buf = Vec::new();
            fedgraph_core::server::write_graph_dump(&mut buf, round, graph, sim, &ids)
                .expect("writing to memory");
            dump.push_str(&String::from_utf8_lossy(&buf));
        }
    })?;
    write_atomic(&spec.output.metrics, metrics_csv(&outcome.metrics).as_bytes())?;
    if let Some(path) = &spec.output.graph_dump {
        write_atomic(path, format!("round\tuser_i\tuser_j\tsimilarity\n{dump}").as_bytes())?;
    }
    if let Some(path) = &spec.output.snapshot {
        let mut buf = Vec::new();
        write_snapshot(&mut buf, spec.federation.rounds, &outcome.clients, &ids)?;
        write_atomic(path, &buf)?;
    }
    let last = outcome.final_metrics();
    log::info!("final HR@10 {:.2} NDCG@10 {:.2}", last.hr, last.ndcg);
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn cmd_ablate(spec: &ExperimentSpec, names: &[String]) -> Result<()> {
    let variants = names
        .iter()
        .map(|n| Variant::parse(n.trim()).with_context(|| format!("unknown variant `{n}`")))
        .collect::<Result<Vec<_>>>()?;
    let dataset = load_dataset(spec)?;
    let mut cache = build_cache(spec, &dataset)?;
    let results = run_ablation(&dataset, &mut cache, &spec.federation, &variants)?;
    for (v, outcome) in &results {
        write_atomic(&sibling(&spec.output.metrics, v.name()), metrics_csv(&outcome.metrics).as_bytes())?;
    }
    write_atomic(&spec.output.metrics, ablation_table(&results).as_bytes())?;
    Ok(())
}

fn cmd_dp_sweep(spec: &ExperimentSpec, alphas: &[f64]) -> Result<()> {
    if let Some(bad) = alphas.iter().find(|a| !(**a >= 0.0)) {
        anyhow::bail!("noise intensity {bad} must be >= 0");
    }
    let dataset = load_dataset(spec)?;
    let mut cache = build_cache(spec, &dataset)?;
    let mut table = String::from("alpha,hr10,ndcg10,best_hr10\n");
    for &alpha in alphas {
        log::info!("dp sweep alpha {alpha}");
        let config = fedgraph_core::FederationConfig {
            dp_alpha: alpha,
            ..spec.federation.clone()
        };
        let outcome = run_experiment(&dataset, &mut cache, &config).with_context(|| format!("alpha {alpha}"))?;
        let m = outcome.final_metrics();
        writeln!(table, "{alpha},{:.4},{:.4},{:.4}", m.hr, m.ndcg, outcome.best_hr())?;
    }
    write_atomic(&spec.output.metrics, table.as_bytes())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UFG_LOG", "info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(common) => cmd_run(&common.load()?),
        Command::Ablate { common, variants } => cmd_ablate(&common.load()?, variants),
        Command::DpSweep { common, alphas } => cmd_dp_sweep(&common.load()?, alphas),
        Command::ValidateConfig(common) => {
            let spec = common.load()?;
            print!("{}", spec.to_toml()?);
            eprintln!("config ok");
            Ok(())
        }
    }
}
