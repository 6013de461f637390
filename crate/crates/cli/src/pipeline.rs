//! Task runners. Each task reads what earlier tasks wrote under the output
//! directory, writes its own artifacts atomically and finishes with a run
//! manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use meshinvert_core::gnn::{self, GnnConfig, GnnModel, GraphData, Normalizer, TrainConfig, TrainingTrajectory};
use meshinvert_core::inverse::{
    evaluate, measure, metrics_csv, observation_times, solve, ForwardModel, InverseProblem, MetricsRow,
    ObjectiveKind, ProgressiveSchedule, ReferenceModel, SensorSet, SolutionRecord, SolveConfig, Unknown,
};
use meshinvert_core::io::{self, SampleFile};
use meshinvert_core::mesh::{generate_mesh, Mesh, MeshSpec, Obstacle};
use meshinvert_core::prior::{train_prior, FieldMap, FieldSample, PriorConfig, PriorModel, PriorTrainConfig};
use meshinvert_core::seed;
use meshinvert_core::synth::SampleConfig;
use meshinvert_core::wavesim::{generate_dataset, DatasetConfig, DatasetManifest, MeshPair, Split};
use meshinvert_core::wavesim::{Trajectory, WaveState};
use rand::Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, FieldKind, ForwardKind, Task};
use crate::{report, HarnessError};

type Result<T> = std::result::Result<T, HarnessError>;

/// Files a task produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Runs the configured task and writes `<out>/manifest-<task>.txt`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let start = Instant::now();
    log::info!("task {} with seed {}", cfg.task.as_str(), cfg.seed);
    let artifacts = match cfg.task {
        Task::GenMesh => gen_mesh(cfg)?,
        Task::GenData => gen_data(cfg)?,
        Task::TrainGnn => train_gnn_task(cfg)?,
        Task::TrainPrior => train_prior_task(cfg)?,
        Task::Solve => solve_task(cfg)?,
        Task::Eval => eval_task(cfg)?,
        Task::Report => report::report_task(cfg)?,
    };
    let manifest = cfg.out.join(format!("manifest-{}.txt", cfg.task.as_str()));
    let mut text = String::new();
    writeln!(text, "task = {}", cfg.task.as_str()).unwrap();
    writeln!(text, "config_sha256 = {}", cfg.hash()).unwrap();
    writeln!(text, "seed = {}", cfg.seed).unwrap();
    writeln!(text, "wall_time_s = {:.3}", start.elapsed().as_secs_f64()).unwrap();
    for a in &artifacts {
        writeln!(text, "artifact = {}", a.display()).unwrap();
    }
    text.push_str("\n# effective settings\n");
    text.push_str(&cfg.canonical);
    io::atomic_write(&manifest, text.as_bytes())?;
    log::info!("{} finished in {:.1}s", cfg.task.as_str(), start.elapsed().as_secs_f64());
    Ok(RunSummary { artifacts, manifest })
}

fn require(path: &Path, key: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{key}: {} does not exist", path.display())))
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Runtime(format!("thread pool: {e}")))
}

/// Mesh pairs in a fixed order: training meshes first, then test meshes.
pub fn mesh_pairs(cfg: &ExperimentConfig) -> Result<Vec<MeshPair>> {
    let m = &cfg.mesh;
    (0..m.train + m.test)
        .map(|k| {
            let obstacle = (m.obstacle_radius > 0.0).then(|| {
                let mut rng = seed::rng(cfg.seed, &format!("obstacle-{k}"));
                Obstacle::Disk {
                    center: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
                    radius: m.obstacle_radius,
                }
            });
            let fine = generate_mesh(&MeshSpec::new(m.fine_nodes, obstacle), seed::derive(cfg.seed, &format!("mesh-{k}-fine")))?;
            let coarse = generate_mesh(&MeshSpec::new(m.coarse_nodes, obstacle), seed::derive(cfg.seed, &format!("mesh-{k}-coarse")))?;
            Ok(MeshPair {
                name: format!("m{k:03}"),
                fine,
                coarse,
                split: if k < m.train { Split::Train } else { Split::Test },
            })
        })
        .collect()
}

fn gen_mesh(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for pair in mesh_pairs(cfg)? {
        for (kind, mesh) in [("fine", &pair.fine), ("coarse", &pair.coarse)] {
            let p = cfg.out.join("meshes").join(format!("{}_{kind}.mesh", pair.name));
            io::write_mesh(&p, mesh)?;
            out.push(p);
        }
    }
    Ok(out)
}

pub fn dataset_config(cfg: &ExperimentConfig) -> DatasetConfig {
    let d = &cfg.data;
    let mut sample = SampleConfig::default();
    sample.u_grf.n = d.grid;
    sample.u_grf.length_scale = d.u_length_scale;
    sample.c_grf.n = d.grid;
    sample.c_grf.length_scale = d.c_length_scale;
    sample.quantile = d.quantile;
    sample.c_lo = d.c_lo;
    sample.c_hi = d.c_hi;
    sample.taper_width = d.taper_width;
    DatasetConfig {
        samples_per_mesh: d.samples_per_mesh,
        steps: d.steps,
        stride: d.stride,
        sample,
        dt: None,
    }
}

fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let pairs = mesh_pairs(cfg)?;
    let manifest = generate_dataset(&pairs, &dataset_config(cfg), cfg.seed, &cfg.data.dir)?;
    log::info!("{} trajectories, solver dt {:.3e}", manifest.trajectories.len(), manifest.dt);
    let mut out: Vec<PathBuf> = manifest.meshes.iter().flat_map(|m| [&m.fine, &m.coarse]).map(PathBuf::from).collect();
    for t in &manifest.trajectories {
        out.push(PathBuf::from(&t.file));
        out.push(PathBuf::from(&t.sample_file));
    }
    out.push(PathBuf::from(DatasetManifest::FILE_NAME));
    Ok(out.into_iter().map(|p| cfg.data.dir.join(p)).collect())
}

/// One trajectory of a dataset directory with its coarse mesh and sample.
pub struct Loaded {
    pub id: String,
    pub split: Split,
    pub mesh: Arc<Mesh>,
    pub graph: Arc<GraphData>,
    pub sample: SampleFile,
    pub trajectory: Trajectory,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub entries: Vec<Loaded>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        require(&dir.join(DatasetManifest::FILE_NAME), "data.dir")?;
        let manifest = DatasetManifest::read(dir)?;
        let mut meshes = std::collections::BTreeMap::new();
        for m in &manifest.meshes {
            let mesh = Arc::new(io::read_mesh(&dir.join(&m.coarse))?);
            let graph = Arc::new(GraphData::from_mesh(&mesh));
            meshes.insert(m.name.clone(), (mesh, graph));
        }
        let mut entries = Vec::new();
        for t in &manifest.trajectories {
            let (mesh, graph) = meshes
                .get(&t.mesh)
                .cloned()
                .ok_or_else(|| HarnessError::Runtime(format!("{}: unknown mesh `{}`", dir.display(), t.mesh)))?;
            let (trajectory, _, _) = io::read_trajectory(&dir.join(&t.file))?;
            let sample = io::read_sample(&dir.join(&t.sample_file))?;
            if trajectory.node_count() != mesh.node_count() || sample.c.len() != mesh.node_count() {
                return Err(HarnessError::Runtime(format!("{}: node count differs from its mesh", t.file)));
            }
            let id = Path::new(&t.file).file_stem().and_then(|s| s.to_str()).unwrap_or(&t.file).to_string();
            entries.push(Loaded {
                id,
                split: t.split,
                mesh,
                graph,
                sample,
                trajectory,
            });
        }
        Ok(Self { manifest, entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Loaded> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn training_trajectories(&self, split: Split) -> Vec<TrainingTrajectory> {
        self.split(split)
            .map(|e| TrainingTrajectory {
                graph: e.graph.clone(),
                trajectory: e.trajectory.clone(),
            })
            .collect()
    }
}

fn train_gnn_task(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = Dataset::load(&cfg.data.dir)?;
    let train = data.training_trajectories(Split::Train);
    if train.is_empty() {
        return Err(HarnessError::Config(format!("data.dir: {} has no training trajectories", cfg.data.dir.display())));
    }
    let g = &cfg.gnn;
    let model = GnnModel::init(
        &GnnConfig {
            hidden: g.hidden,
            mp_steps: g.mp_steps,
            noise_std: g.noise_std,
            project_dirichlet: true,
        },
        Normalizer::from_data(&train)?,
        cfg.seed,
    )?;
    let tc = TrainConfig {
        epochs: g.epochs,
        batch_size: g.batch_size,
        lr_start: g.lr_start,
        lr_end: g.lr_end,
        seed: cfg.seed,
        shuffle_targets: false,
    };
    let outcome = gnn::train(model, &train, &tc)?;
    outcome.model.save(&g.checkpoint, cfg.seed)?;
    let test = data.training_trajectories(Split::Test);
    if !test.is_empty() {
        log::info!(
            "held-out one-step MSE {:.3e} (mean squared delta {:.3e})",
            gnn::one_step_mse(&outcome.model, &test)?,
            gnn::mean_squared_delta(&test)
        );
    }
    let log_path = cfg.out.join("gnn_train.csv");
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in outcome.log.epoch_loss.iter().enumerate() {
        writeln!(csv, "{},{:.9e}", e + 1, l).unwrap();
    }
    io::atomic_write(&log_path, csv.as_bytes())?;
    if let Some(step) = outcome.diverged_at {
        return Err(HarnessError::Runtime(format!(
            "GNN training diverged at optimizer step {step}; the last finite weights were saved to {}",
            g.checkpoint.display()
        )));
    }
    Ok(vec![g.checkpoint.clone(), log_path])
}

fn prior_samples(cfg: &ExperimentConfig, data: &Dataset) -> Vec<FieldSample> {
    let map = FieldMap::Velocity {
        c_lo: cfg.data.c_lo,
        c_hi: cfg.data.c_hi,
    };
    data.split(Split::Train)
        .map(|e| {
            let values = match cfg.prior.field {
                FieldKind::InitialState => e.sample.u_raw.clone(),
                FieldKind::Velocity => map.normalize(&e.sample.c),
            };
            FieldSample::on_mesh(&e.mesh, values)
        })
        .collect()
}

fn train_prior_task(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = Dataset::load(&cfg.data.dir)?;
    let samples = prior_samples(cfg, &data);
    if samples.is_empty() {
        return Err(HarnessError::Config(format!("data.dir: {} has no training samples", cfg.data.dir.display())));
    }
    let p = &cfg.prior;
    let model = PriorModel::init(
        &PriorConfig {
            latent_dim: p.latent_dim,
            hidden_layers: p.hidden_layers,
            width: p.width,
            frequencies: p.frequencies,
            sigma: p.sigma,
            ..PriorConfig::default()
        },
        cfg.seed,
    )?;
    let tc = PriorTrainConfig {
        epochs: p.epochs,
        points_per_sample: p.points_per_sample,
        lr_start: p.lr_start,
        lr_end: p.lr_end,
        seed: cfg.seed,
    };
    let (model, log) = train_prior(model, &samples, &tc)?;
    model.save(&p.checkpoint, cfg.seed)?;
    let log_path = cfg.out.join("prior_train.csv");
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in log.epoch_loss.iter().enumerate() {
        writeln!(csv, "{},{:.9e}", e + 1, l).unwrap();
    }
    io::atomic_write(&log_path, csv.as_bytes())?;
    let mean = log.reconstruction_mse.iter().sum::<f64>() / log.reconstruction_mse.len().max(1) as f64;
    log::info!("prior mean reconstruction MSE {mean:.3e}");
    if let Some(e) = log.diverged_at {
        return Err(HarnessError::Runtime(format!("prior training diverged at epoch {e}")));
    }
    Ok(vec![p.checkpoint.clone(), log_path])
}

/// Models and data shared by every solve of a run.
pub struct SolveContext {
    pub data: Dataset,
    pub gnn: Option<GnnModel>,
    pub prior: Option<PriorModel>,
}

impl SolveContext {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let data = Dataset::load(&cfg.data.dir)?;
        let s = &cfg.solve;
        if s.obs_last > data.manifest.steps {
            return Err(HarnessError::Config(format!(
                "solve.obs_last: {} exceeds the {} steps of the dataset",
                s.obs_last, data.manifest.steps
            )));
        }
        let gnn = match s.forward {
            ForwardKind::Gnn => {
                require(&cfg.gnn.checkpoint, "gnn.checkpoint")?;
                Some(GnnModel::load_file(&cfg.gnn.checkpoint)?.0)
            }
            ForwardKind::Reference => None,
        };
        let prior = if s.with_prior {
            require(&cfg.prior.checkpoint, "prior.checkpoint")?;
            Some(PriorModel::load_file(&cfg.prior.checkpoint)?.0)
        } else {
            None
        };
        Ok(Self { data, gnn, prior })
    }

    pub fn test_entries(&self, cfg: &ExperimentConfig) -> Vec<&Loaded> {
        let all: Vec<&Loaded> = self.data.split(Split::Test).collect();
        match cfg.solve.samples {
            0 => all,
            n => all.into_iter().take(n).collect(),
        }
    }
}

fn unknown_of(kind: FieldKind) -> Unknown {
    match kind {
        FieldKind::InitialState => Unknown::InitialState,
        FieldKind::Velocity => Unknown::Velocity,
    }
}

pub fn task_label(cfg: &ExperimentConfig) -> String {
    let forward = match cfg.solve.forward {
        ForwardKind::Gnn => "gnn",
        ForwardKind::Reference => "reference",
    };
    format!("{}:{forward}", unknown_of(cfg.solve.unknown).as_str())
}

/// The inverse problem posed by one test trajectory.
pub fn build_problem(cfg: &ExperimentConfig, ctx: &SolveContext, entry: &Loaded) -> Result<InverseProblem> {
    let s = &cfg.solve;
    let mesh: &Mesh = &entry.mesh;
    let forward = match &ctx.gnn {
        Some(model) => ForwardModel::gnn(model.clone(), mesh),
        None => ForwardModel::Reference(ReferenceModel::new(mesh, ctx.data.manifest.dt, ctx.data.manifest.stride)?),
    };
    let times = observation_times(s.obs_first, s.obs_last, s.obs_every);
    let sensors = SensorSet::random(mesh, s.sensors, times.clone(), seed::derive(cfg.seed, &format!("sensors/{}", entry.id)))?;
    let observations = measure(&entry.trajectory.snapshots, &sensors)?
        .with_noise(s.noise_std, seed::derive(cfg.seed, &format!("noise/{}", entry.id)));
    let unknown = unknown_of(s.unknown);
    let field_map = match (ctx.prior.is_some(), unknown) {
        (false, _) => FieldMap::Identity,
        (true, Unknown::InitialState) => FieldMap::initial_state(mesh, cfg.data.taper_width)?,
        (true, Unknown::Velocity) => FieldMap::Velocity {
            c_lo: cfg.data.c_lo,
            c_hi: cfg.data.c_hi,
        },
    };
    let n_times = times.len();
    Ok(InverseProblem {
        unknown,
        objective: if s.objective_l1 { ObjectiveKind::L1 } else { ObjectiveKind::Mse },
        forward,
        mesh: mesh.clone(),
        sensors,
        observations,
        known_velocity: (unknown == Unknown::InitialState).then(|| entry.sample.c.clone()),
        known_initial: (unknown == Unknown::Velocity).then(|| entry.sample.u_init.clone()),
        field_map,
        c_bounds: (cfg.data.c_lo, cfg.data.c_hi),
        schedule: match s.schedule_period {
            0 => ProgressiveSchedule::all_at_once(n_times),
            p => ProgressiveSchedule::new(p, n_times),
        },
    })
}

pub fn solve_config(cfg: &ExperimentConfig, entry: &Loaded) -> SolveConfig {
    let s = &cfg.solve;
    SolveConfig {
        max_iters: s.max_iters,
        lr: s.lr,
        fine_tune: s.fine_tune,
        fine_tune_lr: s.fine_tune_lr,
        checkpointing: s.checkpointing,
        record_latents: s.with_prior,
        seed: seed::derive(cfg.seed, &format!("solve/{}", entry.id)),
        ..SolveConfig::default()
    }
}

fn record_path(cfg: &ExperimentConfig, id: &str) -> PathBuf {
    cfg.solve.dir.join(format!("{id}.msol"))
}

fn solve_task(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let ctx = SolveContext::load(cfg)?;
    let entries = ctx.test_entries(cfg);
    if entries.is_empty() {
        return Err(HarnessError::Config(format!("data.dir: {} has no test trajectories", cfg.data.dir.display())));
    }
    let pool = thread_pool(cfg.jobs)?;
    let results: Vec<Result<PathBuf>> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let problem = build_problem(cfg, &ctx, entry)?;
                let sc = solve_config(cfg, entry);
                let solution = solve(&problem, ctx.prior.as_ref(), &sc)?;
                log::info!(
                    "{}: loss {:.3e} after {} iterations{}",
                    entry.id,
                    solution.loss,
                    solution.iters,
                    if solution.diverged { " (diverged)" } else { "" }
                );
                let record = SolutionRecord {
                    unknown: problem.unknown,
                    objective: problem.objective,
                    forward: problem.forward.name().into(),
                    with_prior: ctx.prior.is_some(),
                    schedule: problem.schedule,
                    config: sc,
                    solution,
                    metrics: None,
                };
                let path = record_path(cfg, &entry.id);
                record.save(&path, cfg.seed)?;
                Ok(path)
            })
            .collect()
    });
    results.into_iter().collect()
}

fn eval_task(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let ctx = SolveContext::load(cfg)?;
    let entries = ctx.test_entries(cfg);
    let label = task_label(cfg);
    let pool = thread_pool(cfg.jobs)?;
    let evaluated: Vec<Result<(SolutionRecord, String)>> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let path = record_path(cfg, &entry.id);
                require(&path, "solve.dir")?;
                let (mut record, _) = SolutionRecord::load_file(&path)?;
                let problem = build_problem(cfg, &ctx, entry)?;
                let truth = match problem.unknown {
                    Unknown::InitialState => &entry.sample.u_init,
                    Unknown::Velocity => &entry.sample.c,
                };
                let states: &[WaveState] = &entry.trajectory.snapshots[..=cfg.solve.obs_last];
                record.metrics = Some(evaluate(&problem, &record.solution, truth, states)?);
                record.save(&path, cfg.seed)?;
                Ok((record, entry.id.clone()))
            })
            .collect()
    });
    let evaluated = evaluated.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut rel = String::from(report::REL_ERROR_HEADER);
    rel.push('\n');
    let mut obj = String::from(report::OBJECTIVE_HEADER);
    obj.push('\n');
    for (record, id) in &evaluated {
        let m = record.metrics.as_ref().expect("evaluated");
        rows.push(MetricsRow {
            sample_id: id.clone(),
            task: label.clone(),
            with_prior: record.with_prior,
            field_mse: m.field_mse,
            traj_mse: m.traj_mse,
            iters: m.iters,
            seconds_per_iter: if cfg.solve.record_timing { m.seconds_per_iter } else { 0.0 },
        });
        for (t, e) in m.rel_error.iter().enumerate() {
            writeln!(rel, "{id},{label},{},{t},{e:.9e}", record.with_prior).unwrap();
        }
        let s = &record.solution;
        for (k, (l, a)) in s.loss_trace.iter().zip(&s.active_trace).enumerate() {
            writeln!(obj, "{id},{label},{},{k},{a},{l:.9e}", record.with_prior).unwrap();
        }
    }
    let metrics = cfg.out.join("metrics.csv");
    let rel_path = cfg.out.join(report::REL_ERROR_FILE);
    let obj_path = cfg.out.join(report::OBJECTIVE_FILE);
    io::atomic_write(&metrics, metrics_csv(&rows).as_bytes())?;
    io::atomic_write(&rel_path, rel.as_bytes())?;
    io::atomic_write(&obj_path, obj.as_bytes())?;
    let mut out: Vec<PathBuf> = entries.iter().map(|e| record_path(cfg, &e.id)).collect();
    out.extend([metrics, rel_path, obj_path]);
    let mean = rows.iter().map(|r| r.field_mse).sum::<f64>() / rows.len().max(1) as f64;
    log::info!("{} samples, mean field MSE {mean:.3e}", rows.len());
    Ok(out)
}
