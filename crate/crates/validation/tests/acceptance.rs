//! Acceptance suite. Every criterion prints one PASS or FAIL line with the
//! measured values and its wall time; the process exits with status 1 if
//! any criterion failed.
//!
//! ```text
//! cargo test -p meshinvert-validation --test acceptance           # everything
//! cargo test -p meshinvert-validation --test acceptance -- A2 A9  # a subset
//! ```
//!
//! Criteria that need the output of an earlier stage compute it silently
//! when run on their own.

use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use meshinvert_core::mesh::Mesh;
use meshinvert_core::gnn::{mean_squared_delta, one_step_mse, train, GnnConfig, GnnModel, GraphData, Normalizer, TrainConfig, TrainingTrajectory};
use meshinvert_core::inverse::{
    gradient_at, measure, mse, observation_times, solve, ForwardModel, InverseProblem, ObjectiveKind, ProgressiveSchedule, ReferenceModel,
    SensorSet, Solution, SolveConfig, Unknown,
};
use meshinvert_core::mesh::{generate_mesh, MeshSpec, Obstacle};
use meshinvert_core::prior::{
    latent_regularizer, reconstruction_mse, train_prior, FieldMap, FieldSample, PriorConfig, PriorModel, PriorTrainConfig,
};
use meshinvert_core::seed;
use meshinvert_core::synth::{ParamFields, SampleConfig};
use meshinvert_core::tensor::gradcheck::{grad_check_many, GradCheck};
use meshinvert_core::tensor::{Tape, Tensor, Var};
use meshinvert_core::wavesim::{
    assemble, dataset_dt, generate_trajectories, max_stable_dt, step, DatasetConfig, DatasetEntry, MeshPair, Split, WaveOperator,
    WaveState,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Master seed of every fixture.
const SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
    /// Measured values in a fixed format, compared byte-for-byte on reruns.
    csv: String,
}

fn csv_line(csv: &mut String, key: &str, value: f64) {
    writeln!(csv, "{key},{value:.12e}").unwrap();
}

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------- A1

const A1_TOL: f64 = 1e-5;
const A1_SEEDS: u64 = 10;
const FD_STEP: f64 = 1e-6;

/// Fixed, uneven weights that turn any output into a scalar.
fn project(tape: &mut Tape, v: Var) -> Var {
    let (r, c) = tape.shape(v);
    let w = tape.constant(Tensor::from_fn(r, c, |i, j| 0.3 + ((7 * i + 3 * j) as f64).sin()));
    let p = tape.mul(v, w);
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Name, input shapes with their sampling range, and the op under test.
fn op_cases() -> Vec<(&'static str, Vec<(usize, usize)>, (f64, f64), OpFn)> {
    let gather: Arc<[usize]> = Arc::from(vec![4, 0, 0, 2, 4, 1]);
    let scatter: Arc<[usize]> = Arc::from(vec![1, 1, 0, 3, 1, 0]);
    let noise = Tensor::from_fn(4, 3, |i, j| 0.01 * (i as f64 - j as f64));
    let std = (-1.0, 1.0);
    vec![
        ("add", vec![(4, 3), (4, 3)], std, Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_row", vec![(4, 3), (1, 3)], std, Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_col", vec![(4, 3), (4, 1)], std, Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_scalar", vec![(4, 3), (1, 1)], std, Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![(4, 3), (4, 3)], std, Box::new(|t, v| t.sub(v[0], v[1]))),
        ("sub_row", vec![(4, 3), (1, 3)], std, Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![(4, 3), (4, 3)], std, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_row", vec![(4, 3), (1, 3)], std, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_col", vec![(4, 3), (4, 1)], std, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_scalar", vec![(4, 3), (1, 1)], std, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![(4, 3)], std, Box::new(|t, v| t.scale(v[0], 1.7))),
        ("neg", vec![(4, 3)], std, Box::new(|t, v| t.neg(v[0]))),
        ("matmul", vec![(4, 3), (3, 5)], std, Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("concat", vec![(4, 2), (4, 3), (4, 1)], std, Box::new(|t, v| t.concat(v))),
        ("slice_cols", vec![(4, 5)], std, Box::new(|t, v| t.slice_cols(v[0], 1, 4))),
        ("relu", vec![(4, 3)], std, Box::new(|t, v| t.relu(v[0]))),
        ("sigmoid", vec![(4, 3)], (-3.0, 3.0), Box::new(|t, v| t.sigmoid(v[0]))),
        ("sin", vec![(4, 3)], (-3.0, 3.0), Box::new(|t, v| t.sin(v[0]))),
        ("cos", vec![(4, 3)], (-3.0, 3.0), Box::new(|t, v| t.cos(v[0]))),
        ("sum", vec![(4, 3)], std, Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![(4, 3)], std, Box::new(|t, v| t.mean(v[0]))),
        ("square", vec![(4, 3)], std, Box::new(|t, v| t.square(v[0]))),
        ("sqrt", vec![(4, 3)], (0.5, 2.0), Box::new(|t, v| t.sqrt(v[0]))),
        ("gather_rows", vec![(5, 3)], std, Box::new(move |t, v| t.gather_rows(v[0], &gather))),
        ("scatter_sum", vec![(6, 3)], std, Box::new(move |t, v| t.scatter_sum(v[0], &scatter, 5))),
        ("mse_loss", vec![(4, 3), (4, 3)], std, Box::new(|t, v| t.mse_loss(v[0], v[1]))),
        ("l1_loss", vec![(4, 3), (4, 3)], std, Box::new(|t, v| t.l1_loss(v[0], v[1]))),
        ("squared_l2_norm", vec![(4, 3)], std, Box::new(|t, v| t.squared_l2_norm(v[0]))),
        ("add_noise", vec![(4, 3)], std, Box::new(move |t, v| t.add_noise(v[0], noise.clone()))),
        ("linear", vec![(4, 3), (3, 2), (1, 2)], std, Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
    ]
}

/// Checks the projection of `f` at fresh random points, drawing again while
/// some relu input sits at its kink.
fn check_resampled(f: &dyn Fn(&mut Tape, &[Var]) -> Var, shapes: &[(usize, usize)], range: (f64, f64), tag: &str) -> GradCheck {
    let mut rng = seed::rng(SEED, tag);
    loop {
        let points: Vec<Tensor> = shapes.iter().map(|&(r, c)| rand_tensor(&mut rng, r, c, range.0, range.1)).collect();
        let check = grad_check_many(
            |t, v| {
                let out = f(t, v);
                project(t, out)
            },
            &points,
            FD_STEP,
        );
        if !check.near_kink {
            return check;
        }
    }
}

fn a1() -> Outcome {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut failures = Vec::new();
    let mut record = |name: &str, s: u64, check: GradCheck| {
        if check.max_rel_err > worst.0 {
            worst = (check.max_rel_err, name.to_string());
        }
        if !(check.max_rel_err < A1_TOL) {
            failures.push(format!("{name}/seed {s}: {:.2e}", check.max_rel_err));
        }
    };
    let cases = op_cases();
    for s in 0..A1_SEEDS {
        for (name, shapes, range, f) in &cases {
            record(name, s, check_resampled(f.as_ref(), shapes, *range, &format!("a1/{name}/{s}")));
        }
        let mlp = |t: &mut Tape, v: &[Var]| {
            let h = t.linear(v[0], v[1], v[2]);
            let h = t.relu(h);
            t.linear(h, v[3], v[4])
        };
        let shapes = [(5, 3), (3, 8), (1, 8), (8, 2), (1, 2)];
        record("mlp", s, check_resampled(&mlp, &shapes, (-1.0, 1.0), &format!("a1/mlp/{s}")));
    }

    // Graph fixtures: a small mesh and a network with biases moved off zero.
    let mesh = generate_mesh(&MeshSpec::new(25, None), 3).unwrap();
    let graph_data = GraphData::from_mesh(&mesh);
    let n = mesh.node_count();
    let mask = mesh.interior_mask();
    let mut kinks = 0;
    for s in 0..A1_SEEDS {
        let mut rng = seed::rng(SEED, &format!("a1/gnn/{s}"));
        let mut model = GnnModel::init(&GnnConfig { hidden: 8, mp_steps: 2, ..GnnConfig::default() }, Normalizer::identity(), s).unwrap();
        for t in &mut model.tensors {
            if t.rows() == 1 {
                *t = rand_tensor(&mut rng, 1, t.cols(), -0.3, 0.3);
            }
        }
        let graph = model.prepare(&graph_data);
        let h = model.config.hidden;
        let e_count = graph_data.src.len();
        // Relu inputs inside the conservative kink margin are common here; a
        // crossing inside the difference stencil would show up as an error
        // well above the tolerance, so the check is taken as is.
        let mp = grad_check_many(
            |t, v| {
                let w = model.load(t, false);
                let (v1, e1) = model.process_step(t, &w, &graph, 0, v[0], v[1]);
                let a = project(t, v1);
                let b = project(t, e1);
                t.add(a, b)
            },
            &[rand_tensor(&mut rng, n, h, -1.0, 1.0), rand_tensor(&mut rng, e_count, h, -1.0, 1.0)],
            FD_STEP,
        );
        kinks += mp.near_kink as usize;
        record("message_passing_step", s, mp);

        let c = Tensor::vector((0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.5 }).collect());
        let u0 = Tensor::vector(mask.iter().map(|k| k * rng.random_range(-1.0..1.0)).collect());
        let up0 = Tensor::vector(mask.iter().map(|k| k * rng.random_range(-1.0..1.0)).collect());
        let mut points = vec![u0, up0];
        points.extend(model.tensors.iter().cloned());
        let unrolled = grad_check_many(
            |t, v| {
                let cv = t.constant(c.clone());
                let (mut u, mut up) = (v[0], v[1]);
                for _ in 0..3 {
                    (u, up) = model.step_on_tape(t, &v[2..], &graph, u, up, cv);
                }
                let a = project(t, u);
                let b = project(t, up);
                t.add(a, b)
            },
            &points,
            FD_STEP,
        );
        kinks += unrolled.near_kink as usize;
        record("unrolled_gnn_3_steps", s, unrolled);
    }

    let total = A1_SEEDS as usize * (cases.len() + 3);
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "{total} checks ({} ops + mlp + message passing + 3-step GNN, {A1_SEEDS} seeds); worst rel err {:.2e} ({}), tol {A1_TOL:.0e}; {kinks} graph checks had relu inputs within 1e-4 of the kink{}",
            cases.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
        csv: String::new(),
    }
}

// ---------------------------------------------------------------- A2

const A2_FREQ_TOL: f64 = 0.02;
const A2_ENERGY_TOL: f64 = 0.01;
const A2_STEPS: usize = 500;

/// Angular frequency from linearly interpolated zero crossings.
fn zero_crossing_frequency(series: &[f64], dt: f64) -> f64 {
    let mut crossings = Vec::new();
    for (k, w) in series.windows(2).enumerate() {
        if w[0] != 0.0 && w[0].signum() != w[1].signum() {
            crossings.push((k as f64 + w[0] / (w[0] - w[1])) * dt);
        }
    }
    let half_periods = (crossings.len() - 1) as f64;
    std::f64::consts::PI * half_periods / (crossings[crossings.len() - 1] - crossings[0])
}

/// Energies seen along a run.
struct EnergyRun {
    /// Energy of the time-discrete scheme, one value per state.
    scheme: Vec<f64>,
    /// Semi-discrete energy, one value per state.
    plain: Vec<f64>,
    /// Every boundary entry stayed exactly zero.
    clamped: bool,
}

fn energy_run(op: &WaveOperator, mesh: &Mesh, initial: WaveState, dt: f64, steps: usize, mut probe: impl FnMut(&WaveState)) -> EnergyRun {
    let mut s = initial;
    let mut run = EnergyRun {
        scheme: vec![op.step_energy(&s, dt)],
        plain: vec![op.energy(&s)],
        clamped: true,
    };
    probe(&s);
    for _ in 0..steps {
        s = step(op, &s, dt).unwrap();
        run.clamped &= mesh.boundary_nodes().all(|b| s.u[b] == 0.0 && s.u_prime[b] == 0.0);
        run.scheme.push(op.step_energy(&s, dt));
        run.plain.push(op.energy(&s));
        probe(&s);
    }
    run
}

fn max_relative_deviation(energy: &[f64]) -> f64 {
    energy.iter().map(|e| (e - energy[0]).abs() / energy[0]).fold(0.0, f64::max)
}

/// Relative change of the mean semi-discrete energy between the two halves
/// of a run: the secular part, without the bounded oscillation.
fn mean_drift(energy: &[f64]) -> f64 {
    let half = energy.len() / 2;
    let first = energy[..half].iter().sum::<f64>() / half as f64;
    let second = energy[half..].iter().sum::<f64>() / (energy.len() - half) as f64;
    (second - first).abs() / first
}

fn a2() -> Outcome {
    use std::f64::consts::PI;

    // (1,1) standing mode on the unit square at c = 1.
    let m = Mesh::structured(64);
    let op = assemble(&m, &vec![1.0; m.node_count()]).unwrap();
    let dt = max_stable_dt(&op);
    let mode: Vec<f64> = m.nodes.iter().map(|p| (PI * p[0]).sin() * (PI * p[1]).sin()).collect();
    let mut initial = WaveState::at_rest(mode);
    for b in m.boundary_nodes() {
        initial.u[b] = 0.0;
    }
    let center = (0..m.node_count())
        .min_by(|&a, &b| {
            let d = |i: usize| (m.nodes[i][0] - 0.5).hypot(m.nodes[i][1] - 0.5);
            d(a).total_cmp(&d(b))
        })
        .unwrap();
    let steps = (12.0 * 2f64.sqrt() / dt).ceil() as usize;
    let mut series = Vec::new();
    let mode = energy_run(&op, &m, initial, dt, steps, |s| series.push(s.u[center]));
    let omega = zero_crossing_frequency(&series, dt);
    let exact = PI * 2f64.sqrt();
    let freq_err = (omega - exact).abs() / exact;

    // Irregular mesh with an obstacle, binary velocity and a random initial
    // state, stepped at the same fraction of its own stability limit.
    let im = generate_mesh(&MeshSpec::new(600, Some(Obstacle::Disk { center: [0.6, 0.4], radius: 0.12 })), seed::derive(SEED, "a2-mesh")).unwrap();
    let mut cfg = SampleConfig::default();
    cfg.u_grf.n = 32;
    cfg.c_grf.n = 32;
    let sample = ParamFields::generate(&cfg, seed::derive(SEED, "a2-sample")).unwrap().on_mesh(&im).unwrap();
    let iop = assemble(&im, &sample.c).unwrap();
    let idt = max_stable_dt(&iop);
    let irregular = energy_run(&iop, &im, WaveState::at_rest(sample.u_init), idt, A2_STEPS, |_| {});

    let n = A2_STEPS + 1;
    let scheme_drift = max_relative_deviation(&mode.scheme[..n]).max(max_relative_deviation(&irregular.scheme));
    let secular = mean_drift(&mode.plain[..n]).max(mean_drift(&irregular.plain));
    let oscillation = max_relative_deviation(&mode.plain[..n]).max(max_relative_deviation(&irregular.plain));
    let clamped = mode.clamped && irregular.clamped;
    let pass = freq_err < A2_FREQ_TOL && scheme_drift < A2_ENERGY_TOL && secular < A2_ENERGY_TOL && clamped;
    let mut csv = String::from("metric,value\n");
    csv_line(&mut csv, "omega", omega);
    csv_line(&mut csv, "omega_rel_err", freq_err);
    csv_line(&mut csv, "scheme_energy_drift", scheme_drift);
    csv_line(&mut csv, "mean_energy_drift", secular);
    csv_line(&mut csv, "energy_oscillation", oscillation);
    Outcome {
        pass,
        detail: format!(
            "omega {omega:.5} vs pi*sqrt(2) {exact:.5} (rel err {freq_err:.2e}, tol {A2_FREQ_TOL}); over {A2_STEPS} steps at the stable step (square mode, irregular random state): scheme energy drift {scheme_drift:.1e}, mean energy drift {secular:.1e} (tol {A2_ENERGY_TOL}), bounded oscillation {oscillation:.1e}; boundary exactly zero every step: {clamped}"
        ),
        csv,
    }
}

// ---------------------------------------------------------------- A3

const A3_SAMPLES: usize = 8;
const A3_MSE_TOL: f64 = 1e-3;
const A3_EPOCHS: usize = 2000;
const A3_REG_TOL: f64 = 1e-12;

fn a3_samples(mesh: &Mesh) -> Vec<FieldSample> {
    let mut cfg = SampleConfig::default();
    cfg.u_grf.n = 32;
    (0..A3_SAMPLES)
        .map(|k| {
            let f = ParamFields::generate(&cfg, seed::derive(SEED, &format!("a3-sample-{k}"))).unwrap();
            FieldSample::on_mesh(mesh, f.on_mesh(mesh).unwrap().u_raw)
        })
        .collect()
}

fn a3_config() -> PriorConfig {
    PriorConfig {
        latent_dim: 16,
        width: 64,
        sigma: 0.01,
        ..PriorConfig::default()
    }
}

fn a3_train() -> (PriorModel, Vec<f64>, usize) {
    let mesh = Mesh::structured(32);
    let samples = a3_samples(&mesh);
    let model = PriorModel::init(&a3_config(), seed::derive(SEED, "a3-init")).unwrap();
    let tc = PriorTrainConfig {
        epochs: A3_EPOCHS,
        seed: seed::derive(SEED, "a3-train"),
        ..PriorTrainConfig::default()
    };
    let (model, log) = train_prior(model, &samples, &tc).unwrap();
    let mse = samples.iter().enumerate().map(|(k, s)| reconstruction_mse(&model, &model.latents[k], s)).collect();
    (model, mse, log.epoch_loss.len())
}

fn a3(trained: &(PriorModel, Vec<f64>, usize)) -> Outcome {
    let (_, mse, epochs) = trained;
    let worst = mse.iter().cloned().fold(0.0, f64::max);

    let sigma = a3_config().sigma;
    let mut rng = seed::rng(SEED, "a3-regularizer");
    let z = rand_tensor(&mut rng, 1, 16, -0.03, 0.03);
    let mut tape = Tape::new();
    let zv = tape.param(z.clone());
    let r = latent_regularizer(&mut tape, zv, sigma);
    let expect: f64 = z.data().iter().map(|v| v * v).sum::<f64>() / (sigma * sigma);
    let value_err = (tape.value(r).item() - expect).abs() / expect;
    let g = tape.backward(r).unwrap();
    let grad_err = g
        .get(zv)
        .unwrap()
        .data()
        .iter()
        .zip(z.data())
        .map(|(gi, zi)| (gi - 2.0 * zi / (sigma * sigma)).abs() / (2.0 * zi / (sigma * sigma)).abs())
        .fold(0.0, f64::max);

    let mut csv = String::from("sample,reconstruction_mse\n");
    for (k, v) in mse.iter().enumerate() {
        writeln!(csv, "{k},{v:.12e}").unwrap();
    }
    Outcome {
        pass: worst < A3_MSE_TOL && value_err <= A3_REG_TOL && grad_err <= A3_REG_TOL,
        detail: format!(
            "{A3_SAMPLES} samples on a 32x32 grid mesh, {epochs} epochs: worst reconstruction MSE {worst:.3e} (tol {A3_MSE_TOL:.0e}); regularizer value rel err {value_err:.1e}, gradient rel err {grad_err:.1e} (tol {A3_REG_TOL:.0e})"
        ),
        csv,
    }
}

// ---------------------------------------------------------------- A4

const A4_MESHES: usize = 5;
const A4_SAMPLES_PER_MESH: usize = 5;
const A4_FINE_NODES: usize = 300;
const A4_COARSE_NODES: usize = 150;
const A4_STEPS: usize = 20;
const A4_EPOCHS: usize = 30;
const A4_LOSS_RATIO: f64 = 0.1;
const A4_HELD_OUT_RATIO: f64 = 0.1;
const A4_EQUIVARIANCE_TOL: f64 = 1e-9;
const STRIDE: usize = 5;

/// Desk-scale meshes and trajectories: four training domains and one
/// held-out domain, each with a disk obstacle at a random position.
struct Desk {
    pairs: Vec<MeshPair>,
    graphs: Vec<Arc<GraphData>>,
    entries: Vec<DatasetEntry>,
    config: DatasetConfig,
}

impl Desk {
    fn build(sample: SampleConfig, tag: &str) -> Desk {
        let pairs: Vec<MeshPair> = (0..A4_MESHES)
            .map(|k| {
                let mut rng = seed::rng(SEED, &format!("desk-obstacle-{k}"));
                let obstacle = Some(Obstacle::Disk {
                    center: [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)],
                    radius: 0.1,
                });
                let spec = |n| MeshSpec::new(n, obstacle);
                MeshPair {
                    name: format!("d{k}"),
                    fine: generate_mesh(&spec(A4_FINE_NODES), seed::derive(SEED, &format!("desk-fine-{k}"))).unwrap(),
                    coarse: generate_mesh(&spec(A4_COARSE_NODES), seed::derive(SEED, &format!("desk-coarse-{k}"))).unwrap(),
                    split: if k + 1 < A4_MESHES { Split::Train } else { Split::Test },
                }
            })
            .collect();
        let config = DatasetConfig {
            samples_per_mesh: A4_SAMPLES_PER_MESH,
            steps: A4_STEPS,
            stride: STRIDE,
            sample,
            dt: None,
        };
        let entries = generate_trajectories(&pairs, &config, seed::derive(SEED, tag)).unwrap();
        let graphs = pairs.iter().map(|p| Arc::new(GraphData::from_mesh(&p.coarse))).collect();
        Desk { pairs, graphs, entries, config }
    }

    fn split(&self, split: Split) -> Vec<TrainingTrajectory> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| TrainingTrajectory {
                graph: self.graphs[e.mesh].clone(),
                trajectory: e.trajectory.clone(),
            })
            .collect()
    }

    fn test_mesh(&self) -> &Mesh {
        &self.pairs[A4_MESHES - 1].coarse
    }

    fn dt(&self) -> f64 {
        dataset_dt(&self.pairs, &self.config).unwrap()
    }
}

fn desk_sample_config() -> SampleConfig {
    let mut cfg = SampleConfig::default();
    cfg.u_grf.n = 32;
    cfg.c_grf.n = 32;
    cfg
}

fn train_gnn(data: &[TrainingTrajectory], config: GnnConfig, epochs: usize, tag: &str) -> (GnnModel, meshinvert_core::gnn::TrainLog) {
    let model = GnnModel::init(&config, Normalizer::from_data(data).unwrap(), seed::derive(SEED, &format!("{tag}-init"))).unwrap();
    let tc = TrainConfig {
        epochs,
        batch_size: 2,
        lr_start: 1e-3,
        lr_end: 1e-4,
        seed: seed::derive(SEED, &format!("{tag}-train")),
        shuffle_targets: false,
    };
    let out = train(model, data, &tc).unwrap();
    assert!(out.diverged_at.is_none(), "{tag} training diverged");
    (out.model, out.log)
}

/// Largest difference between a step on a shuffled copy of the mesh and
/// the shuffled step on the original.
fn equivariance_error(model: &GnnModel, mesh: &Mesh, state: &WaveState, c: &[f64], tag: &str) -> f64 {
    let out = model.step(&model.prepare(&GraphData::from_mesh(mesh)), state, c).unwrap();
    let mut perm: Vec<usize> = (0..mesh.node_count()).collect();
    let mut rng = seed::rng(SEED, tag);
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pm = mesh.permuted(&perm);
    let shuffled = WaveState {
        u: perm.iter().map(|&o| state.u[o]).collect(),
        u_prime: perm.iter().map(|&o| state.u_prime[o]).collect(),
        t: state.t,
    };
    let pc: Vec<f64> = perm.iter().map(|&o| c[o]).collect();
    let pout = model.step(&model.prepare(&GraphData::from_mesh(&pm)), &shuffled, &pc).unwrap();
    perm.iter()
        .enumerate()
        .map(|(new, &old)| (pout.u[new] - out.u[old]).abs().max((pout.u_prime[new] - out.u_prime[old]).abs()))
        .fold(0.0, f64::max)
}

fn a4(desk: &Desk) -> Outcome {
    let train_set = desk.split(Split::Train);
    let test_set = desk.split(Split::Test);
    let (model, log) = train_gnn(&train_set, GnnConfig::default(), A4_EPOCHS, "a4");
    let loss_ratio = log.final_loss / log.initial_loss;
    let held_out = one_step_mse(&model, &test_set).unwrap();
    let delta = mean_squared_delta(&test_set);
    let held_ratio = held_out / delta;

    let entry = desk.entries.iter().find(|e| e.split == Split::Test).unwrap();
    let mid = &entry.trajectory.snapshots[A4_STEPS / 2];
    let equivariance = equivariance_error(&model, desk.test_mesh(), mid, &entry.trajectory.c, "a4-perm");

    // Snapshot k sits 5k reference steps after the start.
    let dt = desk.dt();
    let stride_ok = desk.entries.iter().all(|e| {
        e.trajectory.stride == STRIDE
            && e.trajectory.dt == dt
            && e.trajectory.snapshots.iter().enumerate().all(|(k, s)| (s.t - (STRIDE * k) as f64 * dt).abs() <= 1e-9 * dt)
    });

    let mut csv = String::from("metric,value\n");
    csv_line(&mut csv, "initial_loss", log.initial_loss);
    csv_line(&mut csv, "final_loss", log.final_loss);
    csv_line(&mut csv, "held_out_one_step_mse", held_out);
    csv_line(&mut csv, "held_out_mean_squared_delta", delta);
    csv_line(&mut csv, "equivariance_error", equivariance);
    Outcome {
        pass: loss_ratio < A4_LOSS_RATIO && held_ratio < A4_HELD_OUT_RATIO && equivariance <= A4_EQUIVARIANCE_TOL && stride_ok,
        detail: format!(
            "{} training / {} held-out trajectories of {A4_STEPS} steps on {}-node meshes, H=64 S=6, {A4_EPOCHS} epochs: training loss {:.3e} -> {:.3e} (ratio {loss_ratio:.2e}, tol {A4_LOSS_RATIO}); held-out 1-step MSE {held_out:.3e} vs mean squared delta {delta:.3e} (ratio {held_ratio:.3}, tol {A4_HELD_OUT_RATIO}); equivariance error {equivariance:.1e} (tol {A4_EQUIVARIANCE_TOL:.0e}); stride {STRIDE} reference steps per snapshot: {stride_ok}",
            train_set.len(),
            test_set.len(),
            desk.test_mesh().node_count(),
            log.initial_loss,
            log.final_loss,
        ),
        csv,
    }
}

// ---------------------------------------------------------------- A5 and A9

const A5_SENSORS: usize = 20;
const A5_OBJECTIVE_TOL: f64 = 1e-6;
const A5_FIELD_TOL: f64 = 1e-3;
const A5_MAX_ITERS: usize = 2000;
const A5_PERIOD: usize = 100;
const COMPACT_EPOCHS: usize = 10;

fn compact_config() -> GnnConfig {
    GnnConfig {
        hidden: 16,
        mp_steps: 2,
        ..GnnConfig::default()
    }
}

/// Closed loop: the trained compact network produces the observations from
/// a known code drawn from the latent prior N(0, σ²), and then has to
/// explain them.
struct ClosedLoop {
    problem: InverseProblem,
    truth: Vec<f64>,
    z_star: Vec<f64>,
}

fn closed_loop(desk: &Desk, gnn: &GnnModel, prior: &PriorModel) -> ClosedLoop {
    let mesh = desk.test_mesh().clone();
    let entry = desk.entries.iter().find(|e| e.split == Split::Test).unwrap();
    let c = entry.sample.c.clone();
    let map = FieldMap::initial_state(&mesh, desk.config.sample.taper_width).unwrap();
    let mut rng = seed::rng(SEED, "a5-code");
    let z_star: Vec<f64> = (0..prior.config.latent_dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            prior.config.sigma * n
        })
        .collect();
    let truth = prior.decode_field(&z_star, &mesh, &map);
    let sensors = SensorSet::random(&mesh, A5_SENSORS, observation_times(2, 30, 2), seed::derive(SEED, "a5-sensors")).unwrap();
    let forward = ForwardModel::gnn(gnn.clone(), &mesh);
    let states = forward.rollout(&WaveState::at_rest(truth.clone()), &c, 30).unwrap();
    let problem = InverseProblem {
        unknown: Unknown::InitialState,
        objective: ObjectiveKind::Mse,
        forward,
        observations: measure(&states, &sensors).unwrap(),
        sensors,
        known_velocity: Some(c),
        known_initial: None,
        field_map: map,
        c_bounds: (desk.config.sample.c_lo, desk.config.sample.c_hi),
        schedule: ProgressiveSchedule::new(A5_PERIOD, 15),
        mesh,
    };
    ClosedLoop { problem, truth, z_star }
}

fn a5(fixture: &ClosedLoop, prior: &PriorModel) -> Outcome {
    let cfg = SolveConfig {
        max_iters: A5_MAX_ITERS,
        seed: seed::derive(SEED, "a5-solve"),
        ..SolveConfig::default()
    };
    let sol = solve(&fixture.problem, Some(prior), &cfg).unwrap();
    let field_mse = mse(&sol.field, &fixture.truth);
    let z_err = sol.latent.as_deref().unwrap_or_default().iter().zip(&fixture.z_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut csv = String::from("metric,value\n");
    csv_line(&mut csv, "objective", sol.loss);
    csv_line(&mut csv, "field_mse", field_mse);
    csv_line(&mut csv, "iterations", sol.iters as f64);
    Outcome {
        pass: sol.loss < A5_OBJECTIVE_TOL && field_mse < A5_FIELD_TOL && !sol.diverged,
        detail: format!(
            "compact GNN (H=16 S=2) rollout of 30 steps, code drawn from N(0, sigma^2) of the 64-sample prior, {A5_SENSORS} sensors, observations at 2..30 every 2, schedule period {A5_PERIOD}: objective {:.2e} (tol {A5_OBJECTIVE_TOL:.0e}), decoded field MSE {field_mse:.2e} (tol {A5_FIELD_TOL:.0e}) after {} iterations (best at {}, starting objective {:.2e}, diverged: {}); max code error {z_err:.1e}",
            sol.loss,
            sol.iters,
            sol.best_iter,
            sol.loss_trace.first().copied().unwrap_or(f64::NAN),
            sol.diverged
        ),
        csv,
    }
}

fn a9(fixture: &ClosedLoop, prior: &PriorModel) -> Outcome {
    let zeta = fixture.problem.initial_variable(Some(prior), seed::derive(SEED, "a9"));
    let full = gradient_at(&fixture.problem, Some(prior), &zeta, 15, false).unwrap();
    let ck = gradient_at(&fixture.problem, Some(prior), &zeta, 15, true).unwrap();
    let bits = |g: &Option<Tensor>| g.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
    let identical = full.loss.to_bits() == ck.loss.to_bits()
        && full.grads.len() == ck.grads.len()
        && full.grads.iter().zip(&ck.grads).all(|(a, b)| bits(a) == bits(b));
    let (pf, pc) = (full.stats.peak_live_floats, ck.stats.peak_live_floats);
    Outcome {
        pass: identical && pc < pf,
        detail: format!(
            "30 GNN steps, gradient w.r.t. the code: bit-identical with per-step checkpointing: {identical}; peak live floats {pf} -> {pc} ({:.1}x fewer), forward ops {} -> {}",
            pf as f64 / pc as f64,
            full.stats.forward_ops,
            ck.stats.forward_ops
        ),
        csv: String::new(),
    }
}

// ---------------------------------------------------------------- A6

const A6_INSTANCES: usize = 5;
const A6_MESH_NODES: usize = 600;
const A6_PRIOR_SAMPLES: usize = 64;
const A6_MAX_ITERS: usize = 2000;
const A6_SENSORS: usize = 20;

fn a6_prior_config() -> PriorConfig {
    PriorConfig {
        latent_dim: 16,
        hidden_layers: 4,
        width: 48,
        frequencies: 4,
        sigma: 0.01,
        ..PriorConfig::default()
    }
}

/// A prior meant to generalize: many GRF draws of the desk family on a grid
/// mesh.
fn a6_train_prior() -> PriorModel {
    let mesh = Mesh::structured(24);
    let cfg = desk_sample_config();
    let samples: Vec<FieldSample> = (0..A6_PRIOR_SAMPLES)
        .map(|k| {
            let f = ParamFields::generate(&cfg, seed::derive(SEED, &format!("a6-prior-sample-{k}"))).unwrap();
            FieldSample::on_mesh(&mesh, f.on_mesh(&mesh).unwrap().u_raw)
        })
        .collect();
    let model = PriorModel::init(&a6_prior_config(), seed::derive(SEED, "a6-prior-init")).unwrap();
    let tc = PriorTrainConfig {
        epochs: 400,
        points_per_sample: 256,
        lr_start: 2e-3,
        lr_end: 2e-4,
        seed: seed::derive(SEED, "a6-prior-train"),
    };
    let (model, log) = train_prior(model, &samples, &tc).unwrap();
    assert!(log.diverged_at.is_none(), "A6 prior training diverged");
    model
}

/// Initial-state recovery with the reference solver on a mesh that has
/// more unknowns than observations.
fn a6_problem(k: usize) -> (InverseProblem, Vec<f64>) {
    let mut rng = seed::rng(SEED, &format!("a6-instance-{k}"));
    let obstacle = Some(Obstacle::Disk {
        center: [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)],
        radius: 0.1,
    });
    let mesh = generate_mesh(&MeshSpec::new(A6_MESH_NODES, obstacle), rng.random()).unwrap();
    let cfg = desk_sample_config();
    let sample = ParamFields::generate(&cfg, rng.random()).unwrap().on_mesh(&mesh).unwrap();
    let op = assemble(&mesh, &vec![cfg.c_hi; mesh.node_count()]).unwrap();
    let forward = ForwardModel::Reference(ReferenceModel::new(&mesh, max_stable_dt(&op), STRIDE).unwrap());
    let sensors = SensorSet::random(&mesh, A6_SENSORS, observation_times(2, 30, 2), rng.random()).unwrap();
    let states = forward.rollout(&WaveState::at_rest(sample.u_init.clone()), &sample.c, 30).unwrap();
    let problem = InverseProblem {
        unknown: Unknown::InitialState,
        objective: ObjectiveKind::Mse,
        forward,
        observations: measure(&states, &sensors).unwrap(),
        sensors,
        known_velocity: Some(sample.c),
        known_initial: None,
        field_map: FieldMap::initial_state(&mesh, cfg.taper_width).unwrap(),
        c_bounds: (cfg.c_lo, cfg.c_hi),
        schedule: ProgressiveSchedule::all_at_once(15),
        mesh,
    };
    (problem, sample.u_init)
}

fn a6(prior: &PriorModel) -> Outcome {
    let mut with_prior = Vec::new();
    let mut direct = Vec::new();
    let mut csv = String::from("instance,with_prior,field_mse,objective\n");
    for k in 0..A6_INSTANCES {
        let (problem, truth) = a6_problem(k);
        let cfg = SolveConfig {
            max_iters: A6_MAX_ITERS,
            seed: seed::derive(SEED, &format!("a6-solve-{k}")),
            ..SolveConfig::default()
        };
        let p: Solution = solve(&problem, Some(prior), &cfg).unwrap();
        let mut dp = problem.clone();
        dp.field_map = FieldMap::Identity;
        let d = solve(&dp, None, &cfg).unwrap();
        for (flag, sol, out) in [(true, &p, &mut with_prior), (false, &d, &mut direct)] {
            let e = mse(&sol.field, &truth);
            writeln!(csv, "{k},{flag},{e:.12e},{:.12e}", sol.loss).unwrap();
            out.push(e);
        }
    }
    let (mp, md) = (median(&with_prior), median(&direct));
    Outcome {
        pass: mp < md,
        detail: format!(
            "{A6_INSTANCES} instances, reference solver on {A6_MESH_NODES}-node meshes, {A6_SENSORS} sensors at 2..30 every 2: median field MSE with prior {mp:.3e} vs direct {md:.3e} (per instance {} vs {})",
            fmt_list(&with_prior),
            fmt_list(&direct)
        ),
        csv,
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(" "))
}

// ---------------------------------------------------------------- A7

const A7_RUNS: usize = 5;
const A7_REQUIRED_WINS: usize = 3;
const A7_PERIOD: usize = 120;
const A7_MAX_STEPS: usize = 15;
const A7_MESH_NODES: usize = 400;

/// Velocity `c_hi` with two disks of `c_lo`.
fn two_blobs(mesh: &Mesh) -> Vec<f64> {
    let blobs = [([0.32, 0.35], 0.13), ([0.66, 0.62], 0.15)];
    mesh.nodes
        .iter()
        .map(|p| {
            let inside = blobs.iter().any(|(c, r)| (p[0] - c[0]).hypot(p[1] - c[1]) < *r);
            if inside {
                0.5
            } else {
                1.0
            }
        })
        .collect()
}

fn a7() -> Outcome {
    let schedule = ProgressiveSchedule::new(A7_PERIOD, A7_MAX_STEPS);
    let schedule_ok = (0..3000).all(|i| schedule.active_steps(i) == (1 + i / A7_PERIOD).min(A7_MAX_STEPS));

    let mesh = generate_mesh(&MeshSpec::new(A7_MESH_NODES, None), seed::derive(SEED, "a7-mesh")).unwrap();
    let c_true = two_blobs(&mesh);
    let cfg = desk_sample_config();
    let u0 = ParamFields::generate(&cfg, seed::derive(SEED, "a7-source")).unwrap().on_mesh(&mesh).unwrap().u_init;
    let op = assemble(&mesh, &vec![1.0; mesh.node_count()]).unwrap();
    let forward = ForwardModel::Reference(ReferenceModel::new(&mesh, max_stable_dt(&op), STRIDE).unwrap());
    let states = forward.rollout(&WaveState::at_rest(u0.clone()), &c_true, 30).unwrap();

    let mut wins = 0;
    let mut csv = String::from("run,progressive_mse,all_at_once_mse\n");
    let mut rows = Vec::new();
    for run in 0..A7_RUNS {
        let sensors = SensorSet::random(&mesh, 20, observation_times(2, 30, 2), seed::derive(SEED, &format!("a7-sensors-{run}"))).unwrap();
        let base = InverseProblem {
            unknown: Unknown::Velocity,
            objective: ObjectiveKind::Mse,
            forward: forward.clone(),
            mesh: mesh.clone(),
            observations: measure(&states, &sensors).unwrap(),
            sensors,
            known_velocity: None,
            known_initial: Some(u0.clone()),
            field_map: FieldMap::Identity,
            c_bounds: (0.5, 1.0),
            schedule,
        };
        let all = InverseProblem {
            schedule: ProgressiveSchedule::all_at_once(A7_MAX_STEPS),
            ..base.clone()
        };
        let sc = SolveConfig {
            max_iters: 2000,
            seed: seed::derive(SEED, &format!("a7-solve-{run}")),
            ..SolveConfig::default()
        };
        let prog = mse(&solve(&base, None, &sc).unwrap().field, &c_true);
        let once = mse(&solve(&all, None, &sc).unwrap().field, &c_true);
        wins += (prog < once) as usize;
        writeln!(csv, "{run},{prog:.12e},{once:.12e}").unwrap();
        rows.push(format!("{prog:.2e}/{once:.2e}"));
    }
    Outcome {
        pass: schedule_ok && wins >= A7_REQUIRED_WINS,
        detail: format!(
            "schedule 1+floor(iter/{A7_PERIOD}) capped at {A7_MAX_STEPS} for iter < 3000: {schedule_ok}; direct FWI on a {}-node mesh with two slow blobs, velocity MSE progressive/all-at-once per run {}: progressive lower in {wins} of {A7_RUNS} (need {A7_REQUIRED_WINS})",
            mesh.node_count(),
            rows.join(" ")
        ),
        csv,
    }
}

// ---------------------------------------------------------------- A8

const A8_SEEDS: usize = 5;
const A8_REQUIRED_WINS: usize = 4;
const A8_WINDOW: (usize, usize) = (200, 600);
const A8_MAX_ITERS: usize = 700;
const A8_LAST_OBS: usize = 10;

/// The network is trained on weak-contrast velocity maps while the truth
/// comes from the reference solver on the full-contrast family.
fn a8(prior: &PriorModel) -> Outcome {
    let mismatched = SampleConfig {
        c_lo: 0.85,
        c_hi: 1.0,
        ..desk_sample_config()
    };
    let other = Desk::build(mismatched, "a8-data");
    let (gnn, _) = train_gnn(&other.split(Split::Train), compact_config(), COMPACT_EPOCHS, "a8-gnn");

    let truth_desk = Desk {
        entries: generate_trajectories(
            &other.pairs[A4_MESHES - 1..],
            &DatasetConfig {
                samples_per_mesh: A8_SEEDS,
                steps: A8_LAST_OBS,
                sample: desk_sample_config(),
                ..other.config.clone()
            },
            seed::derive(SEED, "a8-truth"),
        )
        .unwrap(),
        ..other
    };
    let mesh = truth_desk.test_mesh().clone();
    let map = FieldMap::initial_state(&mesh, truth_desk.config.sample.taper_width).unwrap();

    let mut wins = 0;
    let mut rows = Vec::new();
    let mut exact = true;
    for (k, entry) in truth_desk.entries.iter().enumerate() {
        let sensors = SensorSet::random(&mesh, 20, observation_times(2, A8_LAST_OBS, 2), seed::derive(SEED, &format!("a8-sensors-{k}"))).unwrap();
        let problem = InverseProblem {
            unknown: Unknown::InitialState,
            objective: ObjectiveKind::Mse,
            forward: ForwardModel::gnn(gnn.clone(), &mesh),
            mesh: mesh.clone(),
            observations: measure(&entry.trajectory.snapshots, &sensors).unwrap(),
            sensors,
            known_velocity: Some(entry.sample.c.clone()),
            known_initial: None,
            field_map: map.clone(),
            c_bounds: (0.5, 1.0),
            schedule: ProgressiveSchedule::all_at_once(A8_LAST_OBS / 2),
        };
        // Both arms run the full budget so that their final objectives are
        // compared after the same number of iterations.
        let frozen_cfg = SolveConfig {
            max_iters: A8_MAX_ITERS,
            plateau_window: 0,
            seed: seed::derive(SEED, &format!("a8-solve-{k}")),
            ..SolveConfig::default()
        };
        let tuned_cfg = SolveConfig {
            fine_tune: Some(A8_WINDOW),
            ..frozen_cfg.clone()
        };
        let frozen = solve(&problem, Some(prior), &frozen_cfg).unwrap();
        let tuned = solve(&problem, Some(prior), &tuned_cfg).unwrap();
        wins += (tuned.loss <= frozen.loss) as usize;
        rows.push(format!("{:.2e}/{:.2e}", tuned.loss, frozen.loss));
        if k == 0 {
            let zero = solve(&problem, Some(prior), &SolveConfig { fine_tune_lr: 0.0, ..tuned_cfg }).unwrap();
            exact = zero.iters == frozen.iters
                && zero.loss_trace == frozen.loss_trace
                && zero.field == frozen.field
                && zero.latent == frozen.latent;
        }
    }
    Outcome {
        pass: wins >= A8_REQUIRED_WINS && exact,
        detail: format!(
            "compact GNN trained on velocity contrast 0.85/1.0, truth from the reference solver at 0.5/1.0; final objective fine-tuned ({}, {})/frozen per seed {}: fine-tuned <= frozen in {wins} of {A8_SEEDS} (need {A8_REQUIRED_WINS}); fine-tune lr 0 reproduces the frozen run bit for bit: {exact}",
            A8_WINDOW.0,
            A8_WINDOW.1,
            rows.join(" ")
        ),
        csv: String::new(),
    }
}

// ---------------------------------------------------------------- A10

/// Shared fixtures, built on first use so that any subset can run alone.
#[derive(Default)]
struct Stages {
    desk: OnceLock<Desk>,
    a3: OnceLock<(PriorModel, Vec<f64>, usize)>,
    compact: OnceLock<GnnModel>,
    a6_prior: OnceLock<PriorModel>,
    closed_loop: OnceLock<ClosedLoop>,
}

impl Stages {
    fn desk(&self) -> &Desk {
        self.desk.get_or_init(|| Desk::build(desk_sample_config(), "desk-data"))
    }

    fn a3(&self) -> &(PriorModel, Vec<f64>, usize) {
        self.a3.get_or_init(a3_train)
    }

    fn compact(&self) -> &GnnModel {
        self.compact
            .get_or_init(|| train_gnn(&self.desk().split(Split::Train), compact_config(), COMPACT_EPOCHS, "compact").0)
    }

    fn a6_prior(&self) -> &PriorModel {
        self.a6_prior.get_or_init(a6_train_prior)
    }

    fn closed_loop(&self) -> &ClosedLoop {
        self.closed_loop.get_or_init(|| closed_loop(self.desk(), self.compact(), self.a6_prior()))
    }

    fn run(&self, id: &str) -> Outcome {
        match id {
            "A2" => a2(),
            "A3" => a3(self.a3()),
            "A4" => a4(self.desk()),
            "A5" => a5(self.closed_loop(), self.a6_prior()),
            "A6" => a6(self.a6_prior()),
            _ => unreachable!("{id} has no reproducible stage"),
        }
    }
}

const A10_STAGES: [&str; 5] = ["A2", "A3", "A4", "A5", "A6"];

/// Runs the data, training and inversion stages a second time from fresh
/// fixtures and compares the recorded values byte for byte.
fn a10(first: &[(String, String)]) -> Outcome {
    let again = Stages::default();
    let mut same = Vec::new();
    let mut differ = Vec::new();
    for id in A10_STAGES {
        let a = first.iter().find(|(k, _)| k == id).map(|(_, c)| c.clone()).unwrap_or_else(|| Stages::default().run(id).csv);
        let b = again.run(id).csv;
        if a == b && !a.is_empty() {
            same.push(id);
        } else {
            differ.push(id);
        }
    }
    Outcome {
        pass: differ.is_empty(),
        detail: format!("same seed, fresh fixtures: identical metrics for {same:?}, differing for {differ:?}"),
        csv: String::new(),
    }
}

// ---------------------------------------------------------------- driver

/// Criteria in run order with their wall-time limits in seconds. Shared
/// fixtures count against whichever criterion builds them first.
const ALL: [(&str, Option<f64>); 10] = [
    ("A1", Some(120.0)),
    ("A2", Some(60.0)),
    ("A3", Some(600.0)),
    ("A4", Some(1800.0)),
    ("A5", Some(600.0)),
    ("A6", Some(1200.0)),
    ("A7", Some(1800.0)),
    ("A8", Some(1200.0)),
    ("A9", Some(300.0)),
    ("A10", None),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, _) in ALL {
            println!("{id}: test");
        }
        return;
    }
    let selected: Vec<String> = args.into_iter().filter(|a| a.starts_with('A')).collect();
    let stages = Stages::default();
    let mut csvs: Vec<(String, String)> = Vec::new();
    let mut failed = 0;
    for (id, limit) in ALL {
        if !selected.is_empty() && !selected.iter().any(|s| s == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = match id {
            "A1" => a1(),
            "A7" => a7(),
            "A8" => a8(stages.a6_prior()),
            "A9" => a9(stages.closed_loop(), stages.a6_prior()),
            "A10" => a10(&csvs),
            _ => stages.run(id),
        };
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs < l);
        let pass = outcome.pass && in_time;
        let status = if pass { "PASS" } else { "FAIL" };
        failed += !pass as usize;
        let budget = match limit {
            Some(l) if !in_time => format!(" over the {l:.0}s limit"),
            Some(l) => format!(" of {l:.0}s"),
            None => String::new(),
        };
        println!("{id} {status} ({secs:.1}s{budget}): {}", outcome.detail);
        csvs.push((id.to_string(), outcome.csv));
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
