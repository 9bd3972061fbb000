//! Command-line front end: the full pipeline under `run`, a pooled
//! reference under `baseline`, and standalone subcommands for the
//! partition, similarity and clustering stages.
//!
//! Exit codes: 0 on success, 2 for usage or configuration problems, 1 for
//! runtime failures.

use crate::ccgraph::write_cc_graph_csv;
use crate::clustering::{optimal_clustering, write_sweep_csv};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fedtrain::{
    evaluate, fedavg_reference, run, signature_stage, write_client_acc_csv, write_matrix_csv,
    write_metrics_csv, write_weights_csv, RoundMetrics, RunState,
};
use crate::fmt::sig6;
use crate::lifecycle::write_events_csv;
use crate::linalg::Matrix;
use crate::nnmodel::save_checkpoint;
use crate::partitioner::dump_federation;
use crate::similarity::{build_proximity, single_branch};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "feddag", version, about = "Clustered federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full pipeline: build the federation, warm up, cluster, train, report.
    Run(Common),
    /// Pooled single-model reference under the same sampling schedule.
    Baseline(Common),
    /// Materialize the configured federation to disk.
    Partition(Common),
    /// Warm-up and signature stage only; writes the similarity matrices.
    Similarity(Common),
    /// Threshold sweep over an existing proximity matrix CSV.
    Cluster {
        /// Square proximity matrix, bare CSV grid without a header.
        matrix: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a finished run directory.
    Report {
        /// Directory written by `run` or `baseline`.
        dir: PathBuf,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig, fallback: &str) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(format!("{fallback}-{}", cfg.seed)))
    }

    fn init_workers(&self) {
        if let Some(n) = self.workers {
            let built = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            if built.is_err() {
                eprintln!("warning: worker pool already initialized, --workers ignored");
            }
        }
    }
}

/// Parse the process arguments, dispatch, and map errors to exit codes.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Run(c) => cmd_run(c),
        Command::Baseline(c) => cmd_baseline(c),
        Command::Partition(c) => cmd_partition(c),
        Command::Similarity(c) => cmd_similarity(c),
        Command::Cluster { matrix, common } => cmd_cluster(matrix, common),
        Command::Report { dir } => cmd_report(dir),
    }
}

fn cmd_run(common: &Common) -> Result<()> {
    common.init_workers();
    let cfg = common.load()?;
    let dir = common.out_dir(&cfg, "feddag-run");
    let fed = cfg.build_federation()?;
    let (state, metrics) = run(fed, cfg.engine_config())?;
    write_run_dir(&dir, &cfg, &state, &metrics)?;
    print_summary(&state, &metrics);
    Ok(())
}

fn cmd_baseline(common: &Common) -> Result<()> {
    common.init_workers();
    let cfg = common.load()?;
    let dir = common.out_dir(&cfg, "feddag-baseline");
    let fed = cfg.build_federation()?;
    let (state, metrics) = fedavg_reference(fed, cfg.engine_config())?;
    write_run_dir(&dir, &cfg, &state, &metrics)?;
    print_summary(&state, &metrics);
    Ok(())
}

fn cmd_partition(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let dir = common.out_dir(&cfg, "feddag-federation");
    let fed = cfg.build_federation()?;
    let params = serde_json::to_value(&cfg.federation)?;
    dump_federation(&fed, &dir, &params)?;
    println!("wrote {} clients to {}", fed.n_clients(), dir.display());
    Ok(())
}

fn cmd_similarity(common: &Common) -> Result<()> {
    common.init_workers();
    let cfg = common.load()?;
    let dir = common.out_dir(&cfg, "feddag-similarity");
    let fed = cfg.build_federation()?;
    let warm_arch = single_branch(&cfg.arch);
    let (sigs, _) = signature_stage(&fed, &warm_arch, &cfg.similarity, cfg.seed)?;
    let (pm, warnings) = build_proximity(&sigs, fed.classes(), &cfg.similarity)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&dir)?;
    write_matrix_csv(&dir.join("proximity.csv"), &pm.fused)?;
    write_matrix_csv(&dir.join("gradient_sim.csv"), &pm.ghat)?;
    write_matrix_csv(&dir.join("data_sim.csv"), &pm.vhat)?;
    write_weights_csv(&dir.join("weights.csv"), &pm.weights)?;
    println!("wrote similarity matrices for {} clients to {}", fed.n_clients(), dir.display());
    Ok(())
}

fn cmd_cluster(matrix: &Path, common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let a = read_matrix_csv(matrix)?;
    let (best, sweep) = optimal_clustering(&a, &cfg.clustering)?;
    let dir = common.out_dir(&cfg, "feddag-clustering");
    std::fs::create_dir_all(&dir)?;
    write_sweep_csv(&dir.join("sweep.csv"), &sweep)?;
    let mut w = csv::Writer::from_path(dir.join("clustering.csv"))?;
    w.write_record(["client", "cluster"])?;
    for (i, &z) in best.assignment.iter().enumerate() {
        w.write_record([i.to_string(), z.to_string()])?;
    }
    w.flush()?;
    println!("clusters {} at threshold {}; loss {}", best.z, sig6(best.alpha), sig6(best.loss));
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let cfg_path = dir.join("config.json");
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| Error::config(format!("{}: {e}", cfg_path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", cfg_path.display())))?;

    let metrics_path = dir.join("metrics.csv");
    let mut rdr = csv::Reader::from_path(&metrics_path)
        .map_err(|e| Error::config(format!("{}: {e}", metrics_path.display())))?;
    let mut rounds = 0usize;
    let mut final_acc = f64::NAN;
    let (mut up, mut down) = (0u64, 0u64);
    for rec in rdr.records() {
        let rec = rec?;
        rounds += 1;
        if let Some(a) = rec.get(4).and_then(|s| s.parse::<f64>().ok()) {
            if a.is_finite() {
                final_acc = a;
            }
        }
        up += rec.get(5).and_then(|s| s.parse::<u64>().ok()).unwrap_or(0);
        down += rec.get(6).and_then(|s| s.parse::<u64>().ok()).unwrap_or(0);
    }

    let acc_path = dir.join("client_acc.csv");
    let mut per_cluster: Vec<(usize, f64)> = Vec::new();
    if let Ok(mut rdr) = csv::Reader::from_path(&acc_path) {
        for rec in rdr.records() {
            let rec = rec?;
            let z: usize = rec.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            let a: f64 = rec.get(2).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
            if per_cluster.len() <= z {
                per_cluster.resize(z + 1, (0, 0.0));
            }
            if a.is_finite() {
                per_cluster[z].0 += 1;
                per_cluster[z].1 += a;
            }
        }
    }

    println!("seed {}", cfg.seed);
    println!("rounds {rounds}");
    println!("final mean balanced accuracy {}", sig6(final_acc));
    println!("clusters {}", per_cluster.len().max(1));
    println!("bytes up {up}, bytes down {down}");
    for (z, &(n, sum)) in per_cluster.iter().enumerate() {
        let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
        println!("cluster {z}: {n} evaluated clients, mean balanced accuracy {}", sig6(mean));
    }
    Ok(())
}

fn print_summary(state: &RunState, metrics: &[RoundMetrics]) {
    let acc = metrics.last().map_or(f64::NAN, |m| m.mean_balanced_acc);
    let alpha = if state.prox.is_some() {
        sig6(state.alpha_star())
    } else {
        "n/a".to_string()
    };
    println!(
        "final mean balanced accuracy {}; clusters {}; threshold {}",
        sig6(acc),
        state.clustering.z,
        alpha
    );
}

/// Everything a finished run leaves behind: the exact config snapshot,
/// per-round metrics, final per-client accuracy, lifecycle events, the
/// similarity artifacts and one checkpoint per cluster.
fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    state: &RunState,
    metrics: &[RoundMetrics],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut snapshot = cfg.clone();
    snapshot.output_dir = Some(dir.to_path_buf());
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
    write_metrics_csv(&dir.join("metrics.csv"), metrics)?;

    let accs = match metrics.last() {
        Some(m) if m.client_balanced_acc.iter().any(|a| a.is_finite()) => {
            m.client_balanced_acc.clone()
        }
        _ => evaluate(state).0,
    };
    write_client_acc_csv(&dir.join("client_acc.csv"), &accs, &state.clustering.assignment)?;
    write_events_csv(&dir.join("events.csv"), &state.events)?;

    if let Some(pm) = &state.prox {
        write_matrix_csv(&dir.join("proximity.csv"), &pm.fused)?;
        write_matrix_csv(&dir.join("gradient_sim.csv"), &pm.ghat)?;
        write_matrix_csv(&dir.join("data_sim.csv"), &pm.vhat)?;
        write_weights_csv(&dir.join("weights.csv"), &pm.weights)?;
        write_sweep_csv(&dir.join("sweep.csv"), &state.sweep)?;
        write_cc_graph_csv(&dir.join("ccgraph.csv"), &state.graph)?;
    }

    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    for c in &state.clusters {
        let path = ckpt.join(format!("cluster_{:03}.bin", c.cluster_id));
        save_checkpoint(&path, &state.arch, &c.model)?;
    }

    if !state.warnings.is_empty() {
        std::fs::write(dir.join("warnings.txt"), state.warnings.join("\n"))?;
    }
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row: Result<Vec<f64>> = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::config(format!("{}: bad matrix entry {s:?}: {e}", path.display()))
                })
            })
            .collect();
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::config(format!("{}: empty proximity matrix", path.display())));
    }
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(format!(
            "{}: matrix must be square, got {n} rows",
            path.display()
        )));
    }
    Ok(Matrix::new(n, n, rows.into_iter().flatten().collect()))
}
