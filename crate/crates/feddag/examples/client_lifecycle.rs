//! Population changes after training: a newcomer is routed to its cluster
//! and personalized, then an incumbent's data is swapped for a different
//! distribution and the drift gate catches it on the next check.

use feddag::datamodel::ClientDataset;
use feddag::fedtrain::{run, EngineConfig, TrainParams};
use feddag::lifecycle::{integrate_newcomer, personalize_client, replace_client_data, run_shift_checks};
use feddag::linalg::Matrix;
use feddag::nnmodel::{Activation, ArchSpec};
use feddag::partitioner::{synthetic_federation, SynthOptions};
use feddag::similarity::SimilarityParams;

fn reid(id: usize, d: &ClientDataset) -> feddag::Result<ClientDataset> {
    let feats = Matrix::from_fn(d.n_samples(), d.n_features(), |r, c| d.features().get(r, c));
    ClientDataset::new(id, feats, d.labels().to_vec(), d.classes())
}

fn main() -> feddag::Result<()> {
    // Three planted clusters, four clients each; two more clients per
    // cluster generated alongside but held out of the initial federation.
    let opts = SynthOptions {
        clusters: 3,
        clients_per_cluster: 6,
        classes: 6,
        feature_dim: 12,
        n_per_client: 60,
        test_per_client: 18,
        separation: 6.0,
        noise: 1.0,
        classes_per_cluster: 2,
        concepts: None,
        seed: 41,
    };
    let full = synthetic_federation(&opts)?;
    let mut clients = Vec::new();
    let mut tests = Vec::new();
    let mut truth = Vec::new();
    for k in 0..3 {
        for j in 0..4 {
            let src = k * 6 + j;
            clients.push(reid(clients.len(), full.client(src))?);
            tests.push(Some(reid(tests.len(), full.test(src).unwrap())?));
            truth.push(k);
        }
    }
    let fed = feddag::partitioner::Federation::new(clients, tests, 6, Some(truth))?;

    let cfg = EngineConfig {
        arch: ArchSpec {
            input_dim: 12,
            hidden: 48,
            feature_dim: 12,
            classes: 6,
            activation: Activation::Relu,
            dual: true,
        },
        sim: SimilarityParams { shared_mask: true, ..SimilarityParams::default() },
        clust: Default::default(),
        train: TrainParams {
            rounds: 8,
            sample_rate: 0.5,
            local_steps: 10,
            lr: 0.05,
            eval_every: 8,
            ..TrainParams::default()
        },
        lifecycle: Default::default(),
        seed: 41,
        force_single_cluster: false,
    };
    let (mut state, _) = run(fed, cfg)?;
    println!(
        "after training: {} clusters, assignment {:?}",
        state.clustering.z, state.clustering.assignment
    );

    // A newcomer drawn from cluster 1's distribution (a held-out client).
    let nc = integrate_newcomer(&mut state, reid(12, full.client(1 * 6 + 4))?, Some(reid(12, full.test(1 * 6 + 4).unwrap())?))?;
    let home = state.clustering.assignment[nc];
    println!("\nnewcomer {nc} joined cluster {home} (truth peers sit in the same cluster)");

    let (_personal, final_loss) = personalize_client(&state, nc, 20)?;
    println!("personalized for 20 local steps from the cluster model, final loss {final_loss:.4}");

    // Swap client 0's data for a copy of client 4's (a different planted
    // cluster) and run the drift checks.
    let donor = reid(0, full.client(1 * 6 + 5))?;
    let donor_test = reid(0, full.test(1 * 6 + 5).unwrap())?;
    replace_client_data(&mut state, 0, donor, Some(donor_test))?;
    let flagged = run_shift_checks(&mut state)?;
    println!("\ndrift check flagged clients {flagged:?}");
    println!("assignment now {:?}", state.clustering.assignment);

    println!("\nevent log:");
    for e in &state.events {
        println!(
            "  round {:>2}  {:<14}  client {:<4} cluster {:<4} {}",
            e.round,
            e.kind.as_str(),
            e.client.map(|c| c.to_string()).unwrap_or_default(),
            e.cluster.map(|c| c.to_string()).unwrap_or_default(),
            e.detail
        );
    }
    Ok(())
}
