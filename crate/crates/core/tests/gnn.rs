use std::sync::Arc;

use meshinvert_core::gnn::{
    evaluate_loss, train, GnnConfig, GnnModel, GraphData, Normalizer, TrainConfig, TrainingTrajectory,
};
use meshinvert_core::mesh::{generate_mesh, Mesh, MeshSpec, NodeType, Obstacle};
use meshinvert_core::tensor::gradcheck::grad_check;
use meshinvert_core::tensor::{Tape, Tensor};
use meshinvert_core::wavesim::{generate_trajectories, DatasetConfig, MeshPair, Split, WaveState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> GnnConfig {
    GnnConfig {
        hidden: 8,
        mp_steps: 2,
        ..GnnConfig::default()
    }
}

fn mesh() -> Mesh {
    generate_mesh(&MeshSpec::new(60, Some(Obstacle::Disk { center: [0.5, 0.5], radius: 0.12 })), 4).unwrap()
}

fn random_state(m: &Mesh, seed: u64) -> (WaveState, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = m.interior_mask();
    let u = mask.iter().map(|k| k * rng.random_range(-1.0..1.0)).collect();
    let up = mask.iter().map(|k| k * rng.random_range(-1.0..1.0)).collect();
    let c = (0..m.node_count()).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.5 }).collect();
    (
        WaveState {
            u,
            u_prime: up,
            t: 0.0,
        },
        c,
    )
}

/// Biases shifted away from zero so the test does not depend on the
/// zero-bias special case.
fn random_model(seed: u64) -> GnnModel {
    let mut m = GnnModel::init(&small_config(), Normalizer::identity(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for t in &mut m.tensors {
        if t.rows() == 1 {
            *t = Tensor::from_fn(1, t.cols(), |_, _| rng.random_range(-0.3..0.3));
        }
    }
    m
}

fn tiny_dataset(samples: usize, seed: u64) -> Vec<TrainingTrajectory> {
    let pair = MeshPair {
        name: "a".into(),
        fine: generate_mesh(&MeshSpec::new(200, None), 1).unwrap(),
        coarse: generate_mesh(&MeshSpec::new(50, None), 2).unwrap(),
        split: Split::Train,
    };
    let mut cfg = DatasetConfig {
        samples_per_mesh: samples,
        steps: 6,
        ..DatasetConfig::default()
    };
    cfg.sample.u_grf.n = 16;
    cfg.sample.c_grf.n = 16;
    let graph = Arc::new(GraphData::from_mesh(&pair.coarse));
    generate_trajectories(&[pair], &cfg, seed)
        .unwrap()
        .into_iter()
        .map(|e| TrainingTrajectory {
            graph: graph.clone(),
            trajectory: e.trajectory,
        })
        .collect()
}

#[test]
fn zero_weights_give_zero_latents_of_width_h() {
    let m = mesh();
    let mut model = random_model(1);
    model.zero_all();
    let graph = model.prepare(&GraphData::from_mesh(&m));
    let (s, c) = random_state(&m, 2);
    let mut tape = Tape::new();
    let w = model.load(&mut tape, false);
    let u = tape.constant(Tensor::vector(s.u));
    let up = tape.constant(Tensor::vector(s.u_prime));
    let cv = tape.constant(Tensor::vector(c));
    let x = model.node_features(&mut tape, &graph, u, up, cv);
    let (v, e) = model.encode(&mut tape, &w, &graph, x);
    assert_eq!(tape.shape(v), (m.node_count(), 8));
    assert_eq!(tape.shape(e), (graph.src.len(), 8));
    assert!(tape.value(v).data().iter().all(|&a| a == 0.0));
    assert!(tape.value(e).data().iter().all(|&a| a == 0.0));
}

#[test]
fn full_step_is_permutation_equivariant() {
    let m = mesh();
    let model = random_model(3);
    let (s, c) = random_state(&m, 4);
    let out = model.step(&model.prepare(&GraphData::from_mesh(&m)), &s, &c).unwrap();

    let mut perm: Vec<usize> = (0..m.node_count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pm = m.permuted(&perm);
    let ps = WaveState {
        u: perm.iter().map(|&o| s.u[o]).collect(),
        u_prime: perm.iter().map(|&o| s.u_prime[o]).collect(),
        t: 0.0,
    };
    let pc: Vec<f64> = perm.iter().map(|&o| c[o]).collect();
    let pout = model.step(&model.prepare(&GraphData::from_mesh(&pm)), &ps, &pc).unwrap();
    let mut worst = 0.0f64;
    for (new, &old) in perm.iter().enumerate() {
        worst = worst.max((pout.u[new] - out.u[old]).abs());
        worst = worst.max((pout.u_prime[new] - out.u_prime[old]).abs());
    }
    assert!(worst <= 1e-9, "equivariance error {worst}");
    assert!(out.u.iter().any(|v| v.abs() > 1e-3), "trivial output");
}

#[test]
fn translating_the_mesh_changes_nothing() {
    let m = mesh();
    let model = random_model(5);
    let (s, c) = random_state(&m, 6);
    let a = model.step(&model.prepare(&GraphData::from_mesh(&m)), &s, &c).unwrap();
    let mut shifted = m.clone();
    for p in &mut shifted.nodes {
        p[0] += 0.25;
        p[1] -= 0.125;
    }
    let b = model.step(&model.prepare(&GraphData::from_mesh(&shifted)), &s, &c).unwrap();
    for i in 0..a.u.len() {
        assert!((a.u[i] - b.u[i]).abs() <= 1e-12);
        assert!((a.u_prime[i] - b.u_prime[i]).abs() <= 1e-12);
    }
}

#[test]
fn zeroed_processor_outputs_make_processing_the_identity() {
    let m = mesh();
    let mut model = random_model(7);
    model.zero_processor_outputs();
    let graph = model.prepare(&GraphData::from_mesh(&m));
    let (s, c) = random_state(&m, 8);
    let mut tape = Tape::new();
    let w = model.load(&mut tape, false);
    let u = tape.constant(Tensor::vector(s.u));
    let up = tape.constant(Tensor::vector(s.u_prime));
    let cv = tape.constant(Tensor::vector(c));
    let x = model.node_features(&mut tape, &graph, u, up, cv);
    let (v0, e0) = model.encode(&mut tape, &w, &graph, x);
    let (v1, e1) = model.process_step(&mut tape, &w, &graph, 0, v0, e0);
    assert_eq!(tape.value(v0), tape.value(v1));
    assert_eq!(tape.value(e0), tape.value(e1));
}

#[test]
fn single_edge_aggregates_only_at_its_destination() {
    let model = random_model(11);
    let g = GraphData {
        n_nodes: 2,
        src: vec![0],
        dst: vec![1],
        edge_features: vec![[0.3, -0.4, 0.5]],
        one_hot: vec![[1.0, 0.0], [1.0, 0.0]],
        interior: vec![true, true],
    };
    let graph = model.prepare(&g);
    let mut tape = Tape::new();
    let w = model.load(&mut tape, false);
    let x = tape.constant(Tensor::new(2, 5, vec![0.1, 0.2, 0.3, 1.0, 0.0, -0.2, 0.4, 0.9, 1.0, 0.0]));
    let (v, e) = model.encode(&mut tape, &w, &graph, x);
    let (v1, e1) = model.process_step(&mut tape, &w, &graph, 0, v, e);

    // Node update recomputed by hand with the aggregate fed explicitly.
    let vt = tape.value(v).clone();
    let e_new = tape.value(e1).clone();
    let zero = Tensor::zeros(1, 8);
    for (node, agg) in [(0usize, zero), (1, e_new.clone())] {
        let mut t2 = Tape::new();
        let vi = t2.constant(Tensor::row(vt.row_slice(node).to_vec()));
        let ai = t2.constant(agg);
        let pre = {
            let a = t2.concat(&[vi, ai]);
            // First-layer blocks [W_v; W_agg] stacked into one matrix.
            let idx = model_node_mlp_first(&model);
            let wv = model.tensors[idx.0].clone();
            let wa = model.tensors[idx.1].clone();
            let mut stacked = wv.data().to_vec();
            stacked.extend_from_slice(wa.data());
            let wcat = t2.constant(Tensor::new(16, 8, stacked));
            t2.matmul(a, wcat)
        };
        let b1 = t2.constant(model.tensors[idx_after(&model, 0)].clone());
        let h = t2.add(pre, b1);
        let h = t2.relu(h);
        let w2m = t2.constant(model.tensors[idx_after(&model, 1)].clone());
        let b2 = t2.constant(model.tensors[idx_after(&model, 2)].clone());
        let h = t2.linear(h, w2m, b2);
        let h = t2.relu(h);
        let w3 = t2.constant(model.tensors[idx_after(&model, 3)].clone());
        let b3 = t2.constant(model.tensors[idx_after(&model, 4)].clone());
        let dv = t2.linear(h, w3, b3);
        let out = t2.add(vi, dv);
        let expect = t2.value(out);
        let got = tape.value(v1).row_slice(node);
        for k in 0..8 {
            assert!((expect.data()[k] - got[k]).abs() < 1e-12, "node {node}");
        }
    }
}

// Tensor layout: node encoder (6), edge encoder (6), then per step an edge
// MLP (3 first-layer blocks + 5) and a node MLP (2 blocks + 5).
fn model_node_mlp_first(_m: &GnnModel) -> (usize, usize) {
    let base = 6 + 6 + 8;
    (base, base + 1)
}

fn idx_after(m: &GnnModel, k: usize) -> usize {
    model_node_mlp_first(m).1 + 1 + k
}

#[test]
fn zero_decoder_leaves_state_unchanged_and_boundary_zero() {
    let m = mesh();
    let mut model = random_model(13);
    model.zero_decoder();
    let (s, c) = random_state(&m, 14);
    let out = model.step(&model.prepare(&GraphData::from_mesh(&m)), &s, &c).unwrap();
    assert_eq!(out.u, s.u);
    assert_eq!(out.u_prime, s.u_prime);

    let model = random_model(15);
    let out = model.step(&model.prepare(&GraphData::from_mesh(&m)), &s, &c).unwrap();
    for i in m.boundary_nodes() {
        assert_eq!(out.u[i], 0.0);
        assert_eq!(out.u_prime[i], 0.0);
    }
}

#[test]
fn rollout_of_zero_steps_is_the_initial_state() {
    let m = mesh();
    let model = random_model(16);
    let (s, c) = random_state(&m, 17);
    let r = model.rollout(&model.prepare(&GraphData::from_mesh(&m)), &s, &c, 0).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0], s);
}

#[test]
fn three_step_rollout_gradient_matches_finite_differences() {
    let m = generate_mesh(&MeshSpec::new(25, None), 3).unwrap();
    let model = random_model(19);
    let graph = model.prepare(&GraphData::from_mesh(&m));
    for seed in 0..4 {
        let (s, c) = random_state(&m, 100 + seed);
        let check = grad_check(
            |tape, u0| {
                let w = model.load(tape, false);
                let mut u = u0;
                let mut up = tape.constant(Tensor::vector(s.u_prime.clone()));
                let cv = tape.constant(Tensor::vector(c.clone()));
                for _ in 0..3 {
                    (u, up) = model.step_on_tape(tape, &w, &graph, u, up, cv);
                }
                let a = tape.square(u);
                let b = tape.sum(a);
                let d = tape.sum(up);
                tape.add(b, d)
            },
            &Tensor::vector(s.u.clone()),
            1e-6,
        );
        // Many relu inputs lie within the conservative kink margin; a
        // crossing inside the difference stencil would show up as a failure.
        assert!(check.max_rel_err < 1e-5, "seed {seed}: {check:?}");
    }
}

#[test]
fn checkpoint_round_trips() {
    let model = random_model(21);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.mgnn");
    model.save(&p, 77).unwrap();
    let (back, seed) = GnnModel::load_file(&p).unwrap();
    assert_eq!(seed, 77);
    assert_eq!(back, model);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] = b'X';
    std::fs::write(&p, &bytes).unwrap();
    assert!(GnnModel::load_file(&p).is_err());
}

#[test]
fn config_validation() {
    assert!(GnnConfig { hidden: 3, ..small_config() }.validate().is_err());
    assert!(GnnConfig { mp_steps: 0, ..small_config() }.validate().is_err());
}

fn train_cfg(seed: u64, shuffle: bool) -> TrainConfig {
    TrainConfig {
        epochs: 25,
        batch_size: 4,
        lr_start: 3e-3,
        lr_end: 3e-4,
        seed,
        shuffle_targets: shuffle,
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = tiny_dataset(3, 5);
    let norm = Normalizer::from_data(&data).unwrap();
    let model = GnnModel::init(&small_config(), norm, 1).unwrap();
    let a = train(model.clone(), &data, &train_cfg(3, false)).unwrap();
    let b = train(model, &data, &train_cfg(3, false)).unwrap();
    assert_eq!(a.model.tensors, b.model.tensors);
    assert!(a.diverged_at.is_none());
    assert!(a.log.final_loss < 0.5 * a.log.initial_loss, "{:?}", a.log);
    assert_eq!(a.log.final_loss, evaluate_loss(&a.model, &data).unwrap());
}

#[test]
fn shuffled_targets_cannot_be_fit() {
    let data = tiny_dataset(3, 5);
    let norm = Normalizer::from_data(&data).unwrap();
    let mut model = GnnModel::init(&small_config(), norm, 1).unwrap();
    // A zero decoder starts at the loss of the best constant guess.
    model.zero_decoder();
    let out = train(model, &data, &train_cfg(3, true)).unwrap();
    assert!(
        out.log.final_loss >= 0.9 * out.log.initial_loss,
        "{} vs {}",
        out.log.final_loss,
        out.log.initial_loss
    );
}

#[test]
fn normalizer_clamps_constant_features() {
    let data = tiny_dataset(1, 6);
    let n = Normalizer::from_data(&data).unwrap();
    assert!(n.node_std.iter().all(|&s| s >= 1e-8));
    assert!(n.edge_std.iter().all(|&s| s >= 1e-8));
    let mut g = (*data[0].graph).clone();
    g.one_hot = vec![NodeType::Interior.one_hot(); g.n_nodes];
    let _ = GraphData::union(&[&g, &g]);
}
