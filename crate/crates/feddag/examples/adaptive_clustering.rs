//! Threshold sweep over agglomerative clusterings of a fused proximity
//! matrix. Prints the sweep table (threshold, cluster count, loss terms)
//! and compares the selected partition against the planted truth.

use feddag::clustering::{adjusted_rand_index, optimal_clustering, ClusterParams};
use feddag::fedtrain::signature_stage;
use feddag::nnmodel::{Activation, ArchSpec};
use feddag::partitioner::{synthetic_federation, SynthOptions};
use feddag::similarity::{build_proximity, single_branch, SimilarityParams};

fn main() -> feddag::Result<()> {
    let fed = synthetic_federation(&SynthOptions {
        clusters: 3,
        clients_per_cluster: 5,
        classes: 6,
        feature_dim: 12,
        n_per_client: 60,
        test_per_client: 0,
        separation: 5.0,
        noise: 1.0,
        classes_per_cluster: 2,
        concepts: None,
        seed: 33,
    })?;
    let arch = ArchSpec {
        input_dim: 12,
        hidden: 48,
        feature_dim: 12,
        classes: 6,
        activation: Activation::Relu,
        dual: true,
    };
    let sim = SimilarityParams { shared_mask: true, ..SimilarityParams::default() };
    let (sigs, _) = signature_stage(&fed, &single_branch(&arch), &sim, 33)?;
    let (prox, _) = build_proximity(&sigs, fed.classes(), &sim)?;

    let params = ClusterParams::default();
    let (best, sweep) = optimal_clustering(&prox.fused, &params)?;

    println!("alpha     z   cohesion   size-penalty   loss");
    for e in &sweep {
        let marker = if (e.alpha - best.alpha).abs() < 1e-12 { "  <- selected" } else { "" };
        println!(
            "{:>5.2}  {:>4}   {:>8.4}   {:>12.4}   {:>6.4}{marker}",
            e.alpha, e.z, e.l1, e.l2, e.loss
        );
    }

    println!();
    println!("assignment: {:?}", best.assignment);
    let truth = fed.ground_truth().unwrap();
    println!(
        "{} clusters at alpha {:.2}, adjusted Rand index vs truth: {:.3}",
        best.z,
        best.alpha,
        adjusted_rand_index(&best.assignment, truth)?
    );
    Ok(())
}
