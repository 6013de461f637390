//! Inverse problems: recover an initial state or a velocity field from
//! sparse sensor readings by optimizing through an unrolled simulator.
//!
//! With a prior the optimization variable is a latent code that the prior
//! decodes into the unknown field. Without one the field itself is the
//! variable. Either way every iteration rolls the forward model out to the
//! last observed step, compares sensor readings, and takes one Adam step.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use meshinvert_tensor::checkpoint::{
    run_checkpointed, run_full, Param, RecomputePlan, StepOutput, UnrolledGradient, Unrolled,
};
use meshinvert_tensor::optim::Adam;
use meshinvert_tensor::{Tape, Tensor, TensorError, Var};
use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::gnn::{GnnModel, GraphData, PreparedGraph};
use crate::io::{self, BinReader, BinWriter, MAGIC_SOLUTION};
use crate::mesh::Mesh;
use crate::prior::{encode_positions, FieldMap, PriorModel};
use crate::wavesim::{assemble, WaveState};
use crate::{seed, Error, Result};

/// Sensor nodes and the simulator steps at which they are read.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSet {
    nodes: Arc<[usize]>,
    times: Vec<usize>,
}

impl SensorSet {
    pub fn new(mesh: &Mesh, nodes: Vec<usize>, times: Vec<usize>) -> Result<Self> {
        if nodes.is_empty() || times.is_empty() {
            return Err(Error::InvalidInput("sensor set needs at least one node and one time".into()));
        }
        for &i in &nodes {
            if i >= mesh.node_count() || mesh.node_type[i].is_boundary() {
                return Err(Error::InvalidInput(format!("sensor node {i} is not an interior node")));
            }
        }
        if times[0] < 1 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "observation times must be strictly increasing and at least 1, got {times:?}"
            )));
        }
        Ok(Self {
            nodes: nodes.into(),
            times,
        })
    }

    /// `count` distinct interior nodes drawn uniformly.
    pub fn random(mesh: &Mesh, count: usize, times: Vec<usize>, seed: u64) -> Result<Self> {
        let interior: Vec<usize> = mesh.interior_nodes().collect();
        if count > interior.len() {
            return Err(Error::InvalidInput(format!(
                "{count} sensors requested but the mesh has {} interior nodes",
                interior.len()
            )));
        }
        let mut rng = seed::rng(seed, "sensors");
        let mut nodes: Vec<usize> = index::sample(&mut rng, interior.len(), count).iter().map(|k| interior[k]).collect();
        nodes.sort_unstable();
        Self::new(mesh, nodes, times)
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn last_time(&self) -> usize {
        *self.times.last().expect("non-empty times")
    }
}

/// `first, first + every, …` up to and including `last`.
pub fn observation_times(first: usize, last: usize, every: usize) -> Vec<usize> {
    (first..=last).step_by(every.max(1)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub times: Vec<usize>,
    /// One reading per sensor for every time.
    pub values: Vec<Vec<f64>>,
}

/// Sensor readings of `states`, where `states[t]` is the state after `t`
/// simulator steps.
pub fn measure(states: &[WaveState], sensors: &SensorSet) -> Result<Observations> {
    let last = sensors.last_time();
    if last >= states.len() {
        return Err(Error::InvalidInput(format!(
            "observation at step {last} but the trajectory ends at step {}",
            states.len().saturating_sub(1)
        )));
    }
    Ok(Observations {
        times: sensors.times.clone(),
        values: sensors
            .times
            .iter()
            .map(|&t| sensors.nodes.iter().map(|&i| states[t].u[i]).collect())
            .collect(),
    })
}

impl Observations {
    /// Adds independent Gaussian noise of standard deviation `std`.
    pub fn with_noise(mut self, std: f64, seed: u64) -> Self {
        if std > 0.0 {
            let mut rng = seed::rng(seed, "observation-noise");
            let d = Normal::new(0.0, std).expect("finite noise std");
            for row in &mut self.values {
                for v in row {
                    *v += d.sample(&mut rng);
                }
            }
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Mse,
    L1,
}

impl ObjectiveKind {
    fn term(self, tape: &mut Tape, pred: Var, truth: Var) -> Var {
        match self {
            ObjectiveKind::Mse => tape.mse_loss(pred, truth),
            ObjectiveKind::L1 => tape.l1_loss(pred, truth),
        }
    }
}

/// Sum over times of the mean (squared or absolute) sensor mismatch.
pub fn objective(pred: &Observations, truth: &Observations, kind: ObjectiveKind) -> Result<f64> {
    if pred.times != truth.times || pred.values.iter().zip(&truth.values).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::InvalidInput("observation sets differ in shape".into()));
    }
    let mut total = 0.0;
    for (p, t) in pred.values.iter().zip(&truth.values) {
        let n = p.len() as f64;
        total += match kind {
            ObjectiveKind::Mse => p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
            ObjectiveKind::L1 => p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        };
    }
    Ok(total)
}

/// How many of the observation times are used at a given iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProgressiveSchedule {
    pub initial: usize,
    /// Iterations per added observation time.
    pub period: usize,
    pub max_steps: usize,
}

impl ProgressiveSchedule {
    pub fn new(period: usize, max_steps: usize) -> Self {
        Self {
            initial: 1,
            period,
            max_steps,
        }
    }

    /// Every observation time from the first iteration on.
    pub fn all_at_once(max_steps: usize) -> Self {
        Self {
            initial: max_steps,
            period: 1,
            max_steps,
        }
    }

    pub fn active_steps(&self, iteration: usize) -> usize {
        (self.initial + iteration / self.period.max(1)).min(self.max_steps)
    }

    pub fn is_saturated(&self, iteration: usize) -> bool {
        self.active_steps(iteration) == self.max_steps
    }
}

/// The classical solver, expressed with tape ops so it can be unrolled.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    weights: Tensor,
    /// `dt / m_i`.
    dt_over_mass: Tensor,
    mask: Tensor,
    pub dt: f64,
    /// Solver steps per simulator step.
    pub substeps: usize,
}

impl ReferenceModel {
    pub fn new(mesh: &Mesh, dt: f64, substeps: usize) -> Result<Self> {
        if substeps == 0 || !(dt > 0.0) {
            return Err(Error::InvalidInput("reference model needs dt > 0 and at least one substep".into()));
        }
        let op = assemble(mesh, &vec![1.0; mesh.node_count()])?;
        Ok(Self {
            src: op.edge_src.clone().into(),
            dst: op.edge_dst.clone().into(),
            weights: Tensor::vector(op.edge_weight.clone()),
            dt_over_mass: Tensor::vector(op.mass.iter().map(|m| dt / m).collect()),
            mask: Tensor::vector(mesh.interior_mask()),
            dt,
            substeps,
        })
    }

    fn step_on_tape(&self, tape: &mut Tape, u: Var, up: Var, c: Var) -> (Var, Var) {
        let c2 = tape.mul(c, c);
        let dtm = tape.constant(self.dt_over_mass.clone());
        let coef = tape.mul(c2, dtm);
        let w = tape.constant(self.weights.clone());
        let mask = tape.constant(self.mask.clone());
        let (mut u, mut up) = (u, up);
        for _ in 0..self.substeps {
            let us = tape.gather_rows(u, &self.src);
            let ud = tape.gather_rows(u, &self.dst);
            let diff = tape.sub(us, ud);
            let flux = tape.mul(diff, w);
            let ku = tape.scatter_sum(flux, &self.src, self.mask.rows());
            let acc = tape.mul(coef, ku);
            let v = tape.sub(up, acc);
            let du = tape.scale(v, self.dt);
            let un = tape.add(u, du);
            u = tape.mul(un, mask);
            up = tape.mul(v, mask);
        }
        (u, up)
    }
}

/// The simulator the inverse problem is solved through.
#[derive(Clone, Debug)]
pub enum ForwardModel {
    Gnn { model: Box<GnnModel>, graph: PreparedGraph },
    Reference(ReferenceModel),
}

impl ForwardModel {
    pub fn gnn(model: GnnModel, mesh: &Mesh) -> Self {
        let graph = model.prepare(&GraphData::from_mesh(mesh));
        ForwardModel::Gnn {
            model: Box::new(model),
            graph,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ForwardModel::Gnn { .. } => "gnn",
            ForwardModel::Reference(_) => "reference",
        }
    }

    fn weights(&self) -> Vec<Tensor> {
        match self {
            ForwardModel::Gnn { model, .. } => model.tensors.clone(),
            ForwardModel::Reference(_) => Vec::new(),
        }
    }

    fn step_on_tape(&self, tape: &mut Tape, w: &[Var], u: Var, up: Var, c: Var) -> (Var, Var) {
        match self {
            ForwardModel::Gnn { model, graph } => model.step_on_tape(tape, w, graph, u, up, c),
            ForwardModel::Reference(r) => r.step_on_tape(tape, u, up, c),
        }
    }

    /// States after `0..=n_steps` simulator steps.
    pub fn rollout(&self, initial: &WaveState, c: &[f64], n_steps: usize) -> Result<Vec<WaveState>> {
        let weights = self.weights();
        let mut out = vec![initial.clone()];
        for k in 1..=n_steps {
            let prev = out.last().unwrap();
            let mut tape = Tape::new();
            let w: Vec<Var> = weights.iter().map(|t| tape.constant(t.clone())).collect();
            let u = tape.constant(Tensor::vector(prev.u.clone()));
            let up = tape.constant(Tensor::vector(prev.u_prime.clone()));
            let cv = tape.constant(Tensor::vector(c.to_vec()));
            let (un, upn) = self.step_on_tape(&mut tape, &w, u, up, cv);
            tape.check_finite().map_err(|_| Error::Diverged { step: k })?;
            out.push(WaveState {
                u: tape.value(un).data().to_vec(),
                u_prime: tape.value(upn).data().to_vec(),
                t: k as f64,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unknown {
    InitialState,
    Velocity,
}

impl Unknown {
    pub fn as_str(self) -> &'static str {
        match self {
            Unknown::InitialState => "initial_state",
            Unknown::Velocity => "velocity",
        }
    }
}

/// Everything about a problem instance except the optimizer settings.
#[derive(Clone, Debug)]
pub struct InverseProblem {
    pub unknown: Unknown,
    pub objective: ObjectiveKind,
    pub forward: ForwardModel,
    pub mesh: Mesh,
    pub sensors: SensorSet,
    pub observations: Observations,
    /// Velocity when recovering the initial state.
    pub known_velocity: Option<Vec<f64>>,
    /// Initial displacement when recovering the velocity.
    pub known_initial: Option<Vec<f64>>,
    /// Map from prior output to the unknown field.
    pub field_map: FieldMap,
    /// Velocity bounds; direct velocity iterates are clamped to them.
    pub c_bounds: (f64, f64),
    pub schedule: ProgressiveSchedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub max_iters: usize,
    /// Adam step for the latent code (in units of the prior σ) or the field.
    pub lr: f64,
    /// Iterations `[start, end)` during which prior weights are also updated.
    pub fine_tune: Option<(usize, usize)>,
    pub fine_tune_lr: f64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Recompute each simulator step during the reverse sweep instead of
    /// keeping the whole rollout on one tape.
    pub checkpointing: bool,
    pub record_latents: bool,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            lr: 1e-2,
            fine_tune: None,
            fine_tune_lr: 1e-4,
            plateau_window: 50,
            plateau_tol: 1e-9,
            checkpointing: false,
            record_latents: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// Recovered unknown at the best iterate.
    pub field: Vec<f64>,
    /// Best latent code, when a prior was used.
    pub latent: Option<Vec<f64>>,
    pub loss: f64,
    pub best_iter: usize,
    pub iters: usize,
    /// Objective at every iteration (over the steps active at that time).
    pub loss_trace: Vec<f64>,
    pub active_trace: Vec<usize>,
    pub latent_trace: Vec<Vec<f64>>,
    pub diverged: bool,
    /// Prior weights at the best iterate after fine-tuning.
    pub tuned_prior: Option<Vec<Tensor>>,
    pub seconds_per_iter: f64,
}

/// The rollout of one iteration as an unrolled computation. Parameters are
/// the unknown, then the prior weights, then the simulator weights.
struct Rollout<'a> {
    problem: &'a InverseProblem,
    prior: Option<&'a PriorModel>,
    encoded: Option<Tensor>,
    n_prior: usize,
    active: usize,
    truth: Vec<Tensor>,
}

impl Rollout<'_> {
    fn field_on_tape(&self, tape: &mut Tape, params: &[Var]) -> Var {
        match self.prior {
            Some(prior) => {
                let z = prior.code_from_scaled(tape, params[0]);
                let enc = tape.constant(self.encoded.clone().expect("encoded nodes"));
                let g = prior.decode_on_tape(tape, &params[1..1 + self.n_prior], z, enc);
                self.problem.field_map.apply_on_tape(tape, g)
            }
            None => match self.problem.unknown {
                Unknown::InitialState => {
                    let mask = tape.constant(Tensor::vector(self.problem.mesh.interior_mask()));
                    tape.mul(params[0], mask)
                }
                Unknown::Velocity => params[0],
            },
        }
    }
}

impl Unrolled for Rollout<'_> {
    fn n_steps(&self) -> usize {
        self.problem.sensors.times[self.active - 1]
    }

    fn prologue(&self, tape: &mut Tape, params: &[Var]) -> Vec<Var> {
        let field = self.field_on_tape(tape, params);
        let n = self.problem.mesh.node_count();
        let up = tape.constant(Tensor::zeros(n, 1));
        match self.problem.unknown {
            Unknown::InitialState => {
                let c = tape.constant(Tensor::vector(self.problem.known_velocity.clone().expect("known velocity")));
                vec![field, up, c]
            }
            Unknown::Velocity => {
                let u = tape.constant(Tensor::vector(self.problem.known_initial.clone().expect("known initial state")));
                vec![u, up, field]
            }
        }
    }

    fn step(&self, tape: &mut Tape, params: &[Var], state: &[Var], t: usize) -> StepOutput {
        let sim = &params[1 + self.n_prior..];
        let (u, up) = self.problem.forward.step_on_tape(tape, sim, state[0], state[1], state[2]);
        let times = &self.problem.sensors.times[..self.active];
        let loss = times.iter().position(|&s| s == t).map(|k| {
            let pred = tape.gather_rows(u, &self.problem.sensors.nodes);
            let truth = tape.constant(self.truth[k].clone());
            self.problem.objective.term(tape, pred, truth)
        });
        StepOutput {
            state: vec![u, up, state[2]],
            loss,
        }
    }
}

impl InverseProblem {
    fn check(&self, prior: Option<&PriorModel>, cfg: &SolveConfig) -> Result<()> {
        let n = self.mesh.node_count();
        let known = match self.unknown {
            Unknown::InitialState => self.known_velocity.as_ref(),
            Unknown::Velocity => self.known_initial.as_ref(),
        };
        match known {
            Some(v) if v.len() == n => {}
            _ => {
                return Err(Error::InvalidInput(format!(
                    "recovering the {} needs the other field on all {n} nodes",
                    self.unknown.as_str()
                )))
            }
        }
        if self.observations.times != self.sensors.times {
            return Err(Error::InvalidInput("observations do not match the sensor times".into()));
        }
        if self.observations.values.iter().any(|v| v.len() != self.sensors.nodes.len()) {
            return Err(Error::InvalidInput("observation rows do not match the sensor count".into()));
        }
        if self.schedule.max_steps == 0 || self.schedule.max_steps > self.sensors.times.len() || self.schedule.initial == 0 {
            return Err(Error::InvalidInput(format!(
                "schedule of {} steps for {} observation times",
                self.schedule.max_steps,
                self.sensors.times.len()
            )));
        }
        match (self.unknown, &self.field_map, prior.is_some()) {
            (Unknown::Velocity, FieldMap::Velocity { .. }, true) | (Unknown::InitialState, FieldMap::InitialState { .. }, true) => {}
            (_, _, false) => {}
            _ => {
                return Err(Error::InvalidInput(format!(
                    "prior field map does not produce a {}",
                    self.unknown.as_str()
                )))
            }
        }
        if let FieldMap::InitialState { mask } = &self.field_map {
            if mask.len() != n {
                return Err(Error::InvalidInput("taper mask does not match the mesh".into()));
            }
        }
        if cfg.fine_tune.is_some() && prior.is_none() {
            return Err(Error::InvalidInput("fine-tuning requires a prior".into()));
        }
        if let Some((a, b)) = cfg.fine_tune {
            if a > b {
                return Err(Error::InvalidInput(format!("fine-tune window ({a}, {b}) is reversed")));
            }
        }
        Ok(())
    }

    /// Starting value of the optimization variable.
    pub fn initial_variable(&self, prior: Option<&PriorModel>, seed: u64) -> Tensor {
        let n = self.mesh.node_count();
        match prior {
            Some(p) => {
                let mut rng = seed::rng(seed, "solve-latent");
                let d = Normal::new(0.0, 0.01 / p.config.sigma).expect("valid normal");
                Tensor::from_fn(1, p.config.latent_dim, |_, _| d.sample(&mut rng))
            }
            None => match self.unknown {
                Unknown::InitialState => Tensor::zeros(n, 1),
                Unknown::Velocity => Tensor::full(n, 1, 0.5 * (self.c_bounds.0 + self.c_bounds.1)),
            },
        }
    }

    /// Field produced by an optimization variable.
    pub fn field_of(&self, prior: Option<&PriorModel>, prior_weights: Option<&[Tensor]>, variable: &Tensor) -> Vec<f64> {
        match prior {
            Some(p) => {
                let mut p = p.clone();
                if let Some(w) = prior_weights {
                    p.tensors = w.to_vec();
                }
                let z: Vec<f64> = variable.data().iter().map(|v| v * p.config.sigma).collect();
                p.decode_field(&z, &self.mesh, &self.field_map)
            }
            None => match self.unknown {
                Unknown::InitialState => variable.data().iter().zip(self.mesh.interior_mask()).map(|(a, m)| a * m).collect(),
                Unknown::Velocity => variable.data().to_vec(),
            },
        }
    }
}

fn is_numeric_failure(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. } | TensorError::NonFiniteAdjoint { .. })
}

#[allow(clippy::too_many_arguments)]
fn unrolled_gradient(
    problem: &InverseProblem,
    prior: Option<&PriorModel>,
    encoded: Option<&Tensor>,
    truth: &[Tensor],
    variable: &Tensor,
    prior_weights: &[Tensor],
    tuning: bool,
    active: usize,
    checkpointing: bool,
) -> std::result::Result<UnrolledGradient, TensorError> {
    let rollout = Rollout {
        problem,
        prior,
        encoded: encoded.cloned(),
        n_prior: prior_weights.len(),
        active,
        truth: truth.to_vec(),
    };
    let mut params = vec![Param::trainable(variable.clone())];
    params.extend(prior_weights.iter().map(|t| Param {
        value: t.clone(),
        trainable: tuning,
    }));
    params.extend(problem.forward.weights().into_iter().map(Param::frozen));
    if checkpointing {
        run_checkpointed(&rollout, &params, &RecomputePlan::per_step(rollout.n_steps()))
    } else {
        run_full(&rollout, &params)
    }
}

/// Objective over the first `active` observation times and its gradient
/// with respect to the optimization variable (a latent in σ units with a
/// prior, the field itself without). The first entry of `grads` belongs to
/// the variable.
pub fn gradient_at(
    problem: &InverseProblem,
    prior: Option<&PriorModel>,
    variable: &Tensor,
    active: usize,
    checkpointing: bool,
) -> Result<UnrolledGradient> {
    problem.check(prior, &SolveConfig::default())?;
    if active == 0 || active > problem.sensors.times.len() {
        return Err(Error::InvalidInput(format!("{active} active observation times")));
    }
    let truth: Vec<Tensor> = problem.observations.values.iter().map(|v| Tensor::vector(v.clone())).collect();
    let encoded = prior.map(|p| encode_positions(&problem.mesh.nodes, p.config.frequencies));
    let weights = prior.map(|p| p.tensors.clone()).unwrap_or_default();
    Ok(unrolled_gradient(problem, prior, encoded.as_ref(), &truth, variable, &weights, false, active, checkpointing)?)
}

/// Runs the latent (or direct) optimization.
pub fn solve(problem: &InverseProblem, prior: Option<&PriorModel>, cfg: &SolveConfig) -> Result<Solution> {
    problem.check(prior, cfg)?;
    let truth: Vec<Tensor> = problem.observations.values.iter().map(|v| Tensor::vector(v.clone())).collect();
    let encoded = prior.map(|p| encode_positions(&problem.mesh.nodes, p.config.frequencies));
    let mut variable = problem.initial_variable(prior, cfg.seed);
    let mut prior_weights: Vec<Tensor> = prior.map(|p| p.tensors.clone()).unwrap_or_default();
    let mut adam = Adam::new(std::slice::from_ref(&variable));
    let mut prior_adam: Option<Adam> = None;

    let mut sol = Solution {
        field: problem.field_of(prior, None, &variable),
        latent: prior.map(|p| variable.data().iter().map(|v| v * p.config.sigma).collect()),
        loss: f64::INFINITY,
        best_iter: 0,
        iters: 0,
        loss_trace: Vec::new(),
        active_trace: Vec::new(),
        latent_trace: Vec::new(),
        diverged: false,
        tuned_prior: None,
        seconds_per_iter: 0.0,
    };
    // Best iterate of the current schedule stage: loss, iteration, variable,
    // prior weights if they were being tuned.
    let mut best: Option<(f64, usize, Tensor, Option<Vec<Tensor>>)> = None;
    let mut stage_best: Vec<f64> = Vec::new();
    let mut stage = 0usize;
    let start = Instant::now();

    for iter in 0..cfg.max_iters {
        let active = problem.schedule.active_steps(iter);
        if active != stage {
            stage = active;
            best = None;
            stage_best.clear();
        }
        let tuning = cfg.fine_tune.is_some_and(|(a, b)| iter >= a && iter < b);
        let result = unrolled_gradient(problem, prior, encoded.as_ref(), &truth, &variable, &prior_weights, tuning, active, cfg.checkpointing);
        let grad = match result {
            Ok(g) if g.loss.is_finite() => g,
            Ok(_) => {
                sol.diverged = true;
                break;
            }
            Err(e) if is_numeric_failure(&e) => {
                sol.diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        sol.iters = iter + 1;
        sol.loss_trace.push(grad.loss);
        sol.active_trace.push(active);
        if cfg.record_latents {
            if let Some(p) = prior {
                sol.latent_trace.push(variable.data().iter().map(|v| v * p.config.sigma).collect());
            }
        }
        if best.as_ref().is_none_or(|b| grad.loss < b.0) {
            best = Some((grad.loss, iter, variable.clone(), cfg.fine_tune.map(|_| prior_weights.clone())));
        }
        let best_loss = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        stage_best.push(best_loss);

        let mut grads = grad.grads.into_iter();
        let g = grads.next().flatten().expect("gradient of the unknown");
        adam.step(std::slice::from_mut(&mut variable), &[g], cfg.lr);
        if tuning {
            let g: Vec<Tensor> = grads.take(prior_weights.len()).map(|g| g.expect("prior gradient")).collect();
            prior_adam
                .get_or_insert_with(|| Adam::new(&prior_weights))
                .step(&mut prior_weights, &g, cfg.fine_tune_lr);
        }
        if prior.is_none() && problem.unknown == Unknown::Velocity {
            let (lo, hi) = problem.c_bounds;
            variable = variable.map(|v| v.clamp(lo, hi));
        }

        let tuning_done = cfg.fine_tune.is_none_or(|(_, b)| iter + 1 >= b);
        let w = cfg.plateau_window;
        if problem.schedule.is_saturated(iter) && tuning_done && w > 0 && stage_best.len() > w {
            let before = stage_best[stage_best.len() - 1 - w];
            if before - best_loss <= cfg.plateau_tol * before.abs() {
                log::debug!("plateau at iteration {iter}, loss {best_loss:.3e}");
                break;
            }
        }
    }
    sol.seconds_per_iter = if sol.iters > 0 {
        start.elapsed().as_secs_f64() / sol.iters as f64
    } else {
        0.0
    };
    if let Some((loss, iter, var, weights)) = best {
        sol.field = problem.field_of(prior, weights.as_deref(), &var);
        sol.latent = prior.map(|p| var.data().iter().map(|v| v * p.config.sigma).collect());
        sol.loss = loss;
        sol.best_iter = iter;
        sol.tuned_prior = weights;
    }
    Ok(sol)
}

/// Quality of a recovered field against the truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub field_mse: f64,
    /// Mean squared displacement error over steps `1..=T`.
    pub traj_mse: f64,
    /// `‖u_pred − u_true‖ / ‖u_true‖` for steps `0..=T`.
    pub rel_error: Vec<f64>,
    pub iters: usize,
    pub seconds_per_iter: f64,
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse of different lengths");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Compares the solution with the true field and the true trajectory
/// (`true_states[t]` after `t` simulator steps). The predicted trajectory is
/// the problem's forward model run from the recovered field.
pub fn evaluate(problem: &InverseProblem, solution: &Solution, true_field: &[f64], true_states: &[WaveState]) -> Result<Metrics> {
    let n = problem.mesh.node_count();
    if true_field.len() != n || solution.field.len() != n {
        return Err(Error::InvalidInput("fields do not match the mesh".into()));
    }
    let (initial, c) = match problem.unknown {
        Unknown::InitialState => (
            WaveState::at_rest(solution.field.clone()),
            problem.known_velocity.clone().expect("checked"),
        ),
        Unknown::Velocity => (
            WaveState::at_rest(problem.known_initial.clone().expect("checked")),
            solution.field.clone(),
        ),
    };
    let horizon = true_states.len().saturating_sub(1);
    let pred = problem.forward.rollout(&initial, &c, horizon)?;
    let mut rel_error = Vec::with_capacity(horizon + 1);
    let mut traj = 0.0;
    for (t, (p, g)) in pred.iter().zip(true_states).enumerate() {
        let num: f64 = p.u.iter().zip(&g.u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = g.u.iter().map(|a| a * a).sum::<f64>().sqrt();
        rel_error.push(if den > 0.0 { num / den } else { num });
        if t > 0 {
            traj += mse(&p.u, &g.u);
        }
    }
    Ok(Metrics {
        field_mse: mse(&solution.field, true_field),
        traj_mse: if horizon > 0 { traj / horizon as f64 } else { 0.0 },
        rel_error,
        iters: solution.iters,
        seconds_per_iter: solution.seconds_per_iter,
    })
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub sample_id: String,
    pub task: String,
    pub with_prior: bool,
    pub field_mse: f64,
    pub traj_mse: f64,
    pub iters: usize,
    pub seconds_per_iter: f64,
}

pub const METRICS_HEADER: &str = "sample_id,task,with_prior,field_mse,traj_mse,iters,seconds_per_iter";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.9e},{:.9e},{},{:.6e}",
            r.sample_id, r.task, r.with_prior, r.field_mse, r.traj_mse, r.iters, r.seconds_per_iter
        )
        .unwrap();
    }
    s
}

/// Parses a metrics CSV; errors name the offending line.
pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(io::format_err(path, format!("line 1: expected header `{METRICS_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| io::format_err(path, format!("line {}: {what}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(&format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str, name: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("invalid {name} `{s}`")));
        rows.push(MetricsRow {
            sample_id: f[0].into(),
            task: f[1].into(),
            with_prior: f[2].trim().parse().map_err(|_| bad(&format!("invalid with_prior `{}`", f[2])))?,
            field_mse: num(f[3], "field_mse")?,
            traj_mse: num(f[4], "traj_mse")?,
            iters: f[5].trim().parse().map_err(|_| bad(&format!("invalid iters `{}`", f[5])))?,
            seconds_per_iter: num(f[6], "seconds_per_iter")?,
        });
    }
    Ok(rows)
}

/// Persisted solve: settings, outcome and optional metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionRecord {
    pub unknown: Unknown,
    pub objective: ObjectiveKind,
    pub forward: String,
    pub with_prior: bool,
    pub schedule: ProgressiveSchedule,
    pub config: SolveConfig,
    pub solution: Solution,
    pub metrics: Option<Metrics>,
}

impl SolutionRecord {
    pub fn to_bytes(&self, seed: u64) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC_SOLUTION, seed);
        w.u32(match self.unknown {
            Unknown::InitialState => 0,
            Unknown::Velocity => 1,
        });
        w.u32(match self.objective {
            ObjectiveKind::Mse => 0,
            ObjectiveKind::L1 => 1,
        });
        w.str(&self.forward);
        w.bool(self.with_prior);
        w.usize(self.schedule.initial);
        w.usize(self.schedule.period);
        w.usize(self.schedule.max_steps);
        let c = &self.config;
        w.usize(c.max_iters);
        w.f64(c.lr);
        w.bool(c.fine_tune.is_some());
        let (a, b) = c.fine_tune.unwrap_or((0, 0));
        w.usize(a);
        w.usize(b);
        w.f64(c.fine_tune_lr);
        w.usize(c.plateau_window);
        w.f64(c.plateau_tol);
        w.bool(c.checkpointing);
        w.bool(c.record_latents);
        w.u64(c.seed);
        let s = &self.solution;
        w.f64s(&s.field);
        w.bool(s.latent.is_some());
        w.f64s(s.latent.as_deref().unwrap_or(&[]));
        w.f64(s.loss);
        w.usize(s.best_iter);
        w.usize(s.iters);
        w.f64s(&s.loss_trace);
        w.usize(s.active_trace.len());
        for &a in &s.active_trace {
            w.usize(a);
        }
        w.usize(s.latent_trace.len());
        for z in &s.latent_trace {
            w.f64s(z);
        }
        w.bool(s.diverged);
        w.f64(s.seconds_per_iter);
        w.bool(self.metrics.is_some());
        if let Some(m) = &self.metrics {
            w.f64(m.field_mse);
            w.f64(m.traj_mse);
            w.f64s(&m.rel_error);
            w.usize(m.iters);
            w.f64(m.seconds_per_iter);
        }
        w.into_bytes()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<(Self, u64)> {
        let mut r = BinReader::open(data, MAGIC_SOLUTION, path)?;
        let unknown = match r.u32()? {
            0 => Unknown::InitialState,
            1 => Unknown::Velocity,
            k => return Err(r.error(format!("unknown kind {k}"))),
        };
        let objective = match r.u32()? {
            0 => ObjectiveKind::Mse,
            1 => ObjectiveKind::L1,
            k => return Err(r.error(format!("objective kind {k}"))),
        };
        let forward = r.str()?;
        let with_prior = r.bool()?;
        let schedule = ProgressiveSchedule {
            initial: r.usize()?,
            period: r.usize()?,
            max_steps: r.usize()?,
        };
        let max_iters = r.usize()?;
        let lr = r.f64()?;
        let has_ft = r.bool()?;
        let ft = (r.usize()?, r.usize()?);
        let config = SolveConfig {
            max_iters,
            lr,
            fine_tune: has_ft.then_some(ft),
            fine_tune_lr: r.f64()?,
            plateau_window: r.usize()?,
            plateau_tol: r.f64()?,
            checkpointing: r.bool()?,
            record_latents: r.bool()?,
            seed: r.u64()?,
        };
        let field = r.f64s()?;
        let has_latent = r.bool()?;
        let latent = r.f64s()?;
        let loss = r.f64()?;
        let best_iter = r.usize()?;
        let iters = r.usize()?;
        let loss_trace = r.f64s()?;
        let n_active = r.usize()?;
        let active_trace = (0..n_active).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n_lat = r.usize()?;
        let latent_trace = (0..n_lat).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
        let diverged = r.bool()?;
        let seconds_per_iter = r.f64()?;
        let metrics = if r.bool()? {
            Some(Metrics {
                field_mse: r.f64()?,
                traj_mse: r.f64()?,
                rel_error: r.f64s()?,
                iters: r.usize()?,
                seconds_per_iter: r.f64()?,
            })
        } else {
            None
        };
        let seed = r.seed;
        r.finish()?;
        Ok((
            Self {
                unknown,
                objective,
                forward,
                with_prior,
                schedule,
                config,
                solution: Solution {
                    field,
                    latent: has_latent.then_some(latent),
                    loss,
                    best_iter,
                    iters,
                    loss_trace,
                    active_trace,
                    latent_trace,
                    diverged,
                    tuned_prior: None,
                    seconds_per_iter,
                },
                metrics,
            },
            seed,
        ))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        io::atomic_write(path, &self.to_bytes(seed))
    }

    pub fn load_file(path: &Path) -> Result<(Self, u64)> {
        Self::from_bytes(&io::read_file(path)?, path)
    }
}
