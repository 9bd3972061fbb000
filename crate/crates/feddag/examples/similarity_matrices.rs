//! Builds client signatures on a small planted federation and prints the
//! two dissimilarity views next to their fusion. Within-cluster pairs
//! should sit near zero, cross-cluster pairs near one.

use feddag::fedtrain::signature_stage;
use feddag::linalg::Matrix;
use feddag::nnmodel::{Activation, ArchSpec};
use feddag::partitioner::{synthetic_federation, SynthOptions};
use feddag::similarity::{build_proximity, single_branch, SimilarityParams};

fn print_matrix(name: &str, m: &Matrix) {
    println!("{name}:");
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| format!("{:.2}", m.get(i, j))).collect();
        println!("  {}", row.join("  "));
    }
    println!();
}

fn main() -> feddag::Result<()> {
    let fed = synthetic_federation(&SynthOptions {
        clusters: 2,
        clients_per_cluster: 4,
        classes: 4,
        feature_dim: 8,
        n_per_client: 48,
        test_per_client: 0,
        separation: 5.0,
        noise: 1.0,
        classes_per_cluster: 2,
        concepts: None,
        seed: 19,
    })?;

    let arch = ArchSpec {
        input_dim: 8,
        hidden: 32,
        feature_dim: 8,
        classes: 4,
        activation: Activation::Tanh,
        dual: true,
    };
    let sim = SimilarityParams { shared_mask: true, ..SimilarityParams::default() };

    // Every client warms up the single-branch model from the same seed and
    // uploads a sparsified delta plus per-class principal directions.
    let (sigs, _warm) = signature_stage(&fed, &single_branch(&arch), &sim, 19)?;
    for s in sigs.iter().take(2) {
        println!(
            "client {}: {} of {} delta coords kept, {} class bases, {} payload bytes",
            s.client_id,
            s.grad.nnz(),
            s.grad.dim(),
            s.bases.len(),
            s.payload_bytes()
        );
    }
    println!();

    let (prox, warnings) = build_proximity(&sigs, fed.classes(), &sim)?;
    for w in &warnings {
        println!("warning: {w}");
    }

    print_matrix("gradient view (normalized angles between sparse deltas)", &prox.ghat);
    print_matrix("data view (class-weighted principal angles)", &prox.vhat);
    print_matrix("fused", &prox.fused);

    let w: Vec<String> = prox.weights.iter().map(|x| format!("{x:.3}")).collect();
    println!("per-client fusion weights (1 = all gradient view): [{}]", w.join(", "));
    Ok(())
}
