//! Signature payload size against recovery quality across sparsity levels.
//! The gradient view survives aggressive sparsification because pairwise
//! angles between the surviving coordinates still separate the clusters.

use feddag::clustering::{adjusted_rand_index, optimal_clustering, ClusterParams};
use feddag::fedtrain::signature_stage;
use feddag::nnmodel::{Activation, ArchSpec};
use feddag::partitioner::{synthetic_federation, SynthOptions};
use feddag::similarity::{build_proximity, single_branch, SimilarityMode, SimilarityParams};

fn main() -> feddag::Result<()> {
    let fed = synthetic_federation(&SynthOptions {
        clusters: 4,
        clients_per_cluster: 5,
        classes: 8,
        feature_dim: 16,
        n_per_client: 64,
        test_per_client: 0,
        separation: 6.0,
        noise: 1.0,
        classes_per_cluster: 2,
        concepts: None,
        seed: 61,
    })?;
    let arch = ArchSpec {
        input_dim: 16,
        hidden: 64,
        feature_dim: 16,
        classes: 8,
        activation: Activation::Relu,
        dual: true,
    };
    let truth = fed.ground_truth().unwrap().to_vec();

    println!("sparsity   kept coords   payload bytes   z   ARI vs truth");
    for sparsity in [1.0, 0.2, 0.05, 0.01, 0.001] {
        let sim = SimilarityParams {
            sparsity,
            shared_mask: true,
            mode: SimilarityMode::GradientOnly,
            ..SimilarityParams::default()
        };
        let (sigs, _) = signature_stage(&fed, &single_branch(&arch), &sim, 61)?;
        let (prox, _) = build_proximity(&sigs, fed.classes(), &sim)?;
        let (best, _) = optimal_clustering(&prox.fused, &ClusterParams::default())?;
        let ari = adjusted_rand_index(&best.assignment, &truth)?;
        println!(
            "{:>8.3}   {:>11}   {:>13}   {:>1}   {:>6.3}",
            sparsity,
            sigs[0].grad.nnz(),
            sigs[0].payload_bytes(),
            best.z,
            ari
        );
    }
    Ok(())
}
