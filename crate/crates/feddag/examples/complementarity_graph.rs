//! Wires clusters into a class-complementarity graph. Two groups share a
//! pool but with mirrored imbalance: what one group is starving for, the
//! other holds in abundance, so each cluster's top partner is the other.

use feddag::ccgraph::{cc_graph_from_state, demand_supply, rarity_ranks};
use feddag::datamodel::{class_histogram, ClientDataset};
use feddag::fedtrain::signature_stage;
use feddag::linalg::Matrix;
use feddag::nnmodel::{Activation, ArchSpec};
use feddag::partitioner::{synthetic_pool, Federation};
use feddag::similarity::{build_proximity, single_branch, SimilarityParams};

fn imbalanced_federation(seed: u64) -> feddag::Result<Federation> {
    let classes = 4;
    let pool = synthetic_pool(classes, 8, 2400, 4.0, seed)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for r in 0..pool.n_samples() {
        by_class[pool.labels()[r]].push(r);
    }
    let mut cursor = vec![0usize; classes];
    let mut clients = Vec::new();
    let mut truth = Vec::new();
    for cluster in 0..2usize {
        for j in 0..3 {
            let mut rows = Vec::new();
            for c in 0..classes {
                // Cluster 0 is rich in the low classes, cluster 1 in the high.
                let k = if (c < 2) == (cluster == 0) { 40 } else { 5 };
                rows.extend(by_class[c][cursor[c]..cursor[c] + k].iter().copied());
                cursor[c] += k;
            }
            let feats = Matrix::from_fn(rows.len(), pool.n_features(), |i, c| {
                pool.features().get(rows[i], c)
            });
            let labels: Vec<usize> = rows.iter().map(|&r| pool.labels()[r]).collect();
            clients.push(ClientDataset::new(cluster * 3 + j, feats, labels, classes)?);
            truth.push(cluster);
        }
    }
    let n = clients.len();
    Federation::new(clients, vec![None; n], classes, Some(truth))
}

fn main() -> feddag::Result<()> {
    let fed = imbalanced_federation(55)?;
    let arch = ArchSpec {
        input_dim: 8,
        hidden: 32,
        feature_dim: 8,
        classes: 4,
        activation: Activation::Relu,
        dual: true,
    };
    let sim = SimilarityParams { shared_mask: true, ..SimilarityParams::default() };
    let (sigs, _) = signature_stage(&fed, &single_branch(&arch), &sim, 55)?;
    let (prox, _) = build_proximity(&sigs, fed.classes(), &sim)?;

    let histograms: Vec<_> = (0..fed.n_clients()).map(|i| class_histogram(fed.client(i))).collect();
    let clusters: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4, 5]];

    println!("per-client rarity ranks (class -> rank, 0 = rarest):");
    for (i, h) in histograms.iter().enumerate() {
        println!("  client {i}: {:?}", rarity_ranks(h)?);
    }

    let (demand, supply) = demand_supply(&clusters, &histograms)?;
    println!("\ncluster demand rows (normalized inverse-rarity):");
    for p in 0..2 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.2}", demand.get(p, c))).collect();
        println!("  cluster {p}: [{}]", row.join(", "));
    }
    println!("cluster supply rows (share of the federation's samples per class):");
    for p in 0..2 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.2}", supply.get(p, c))).collect();
        println!("  cluster {p}: [{}]", row.join(", "));
    }

    let (graph, warnings) = cc_graph_from_state(&clusters, &histograms, &prox.angles, 1)?;
    for w in warnings {
        println!("warning: {w}");
    }
    println!();
    for p in 0..graph.z {
        println!(
            "cluster {p} receives from {:?} (score {:.3}); teaches {:?}",
            graph.edges[p],
            graph.edges[p].iter().map(|&q| graph.scores.get(p, q)).fold(0.0, f64::max),
            graph.learners_of(p)
        );
    }
    Ok(())
}
