//! Reference solver for `u_tt = c² Δu` with homogeneous Dirichlet data.
//!
//! Space is discretized with P1 elements (cotangent stiffness, lumped mass),
//! time with symplectic Euler. The operator keeps the stiffness as weighted
//! directed edges so that the same structure can be replayed on an autodiff
//! tape by the inverse solver.

mod dataset;

pub use dataset::{
    dataset_dt, generate_dataset, generate_trajectories, DatasetConfig, DatasetEntry, DatasetManifest, MeshPair,
    Split,
};

use crate::mesh::{Mesh, MIN_AREA};
use crate::{Error, Result};

/// Assembled spatial operator of the wave equation on one mesh.
#[derive(Clone, Debug)]
pub struct WaveOperator {
    /// Lumped mass: one third of the incident triangle areas.
    pub mass: Vec<f64>,
    /// Squared velocity per node.
    pub c2: Vec<f64>,
    /// Directed edges `(i, j)` carrying the cotangent weight `w_ij = -K_ij`.
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_weight: Vec<f64>,
    pub boundary: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveState {
    pub u: Vec<f64>,
    pub u_prime: Vec<f64>,
    pub t: f64,
}

impl WaveState {
    pub fn at_rest(u: Vec<f64>) -> Self {
        let n = u.len();
        Self {
            u,
            u_prime: vec![0.0; n],
            t: 0.0,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::at_rest(vec![0.0; n])
    }
}

/// A sampled solution: snapshots every `stride` solver steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub c: Vec<f64>,
    pub snapshots: Vec<WaveState>,
    /// Solver time step.
    pub dt: f64,
    /// Solver steps between snapshots.
    pub stride: usize,
}

impl Trajectory {
    pub fn node_count(&self) -> usize {
        self.c.len()
    }
}

/// Assembles the stiffness and lumped mass of `mesh` with velocity `c`.
pub fn assemble(mesh: &Mesh, c: &[f64]) -> Result<WaveOperator> {
    let n = mesh.node_count();
    if c.len() != n {
        return Err(Error::InvalidInput(format!("velocity has {} values for {n} nodes", c.len())));
    }
    if let Some(i) = c.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!("velocity at node {i} is {} (must be positive)", c[i])));
    }
    let mut mass = vec![0.0; n];
    let mut weights = std::collections::BTreeMap::<(usize, usize), f64>::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(t);
        if area.abs() <= MIN_AREA {
            return Err(Error::DegenerateTriangle { triangle: t, area });
        }
        let area = area.abs();
        for &i in tri {
            mass[i] += area / 3.0;
        }
        for k in 0..3 {
            let (i, j, o) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let (pi, pj, po) = (mesh.nodes[i], mesh.nodes[j], mesh.nodes[o]);
            let a = [pi[0] - po[0], pi[1] - po[1]];
            let b = [pj[0] - po[0], pj[1] - po[1]];
            // cot of the angle at `o`, opposite edge (i, j).
            let cot = (a[0] * b[0] + a[1] * b[1]) / (a[0] * b[1] - a[1] * b[0]).abs();
            *weights.entry((i.min(j), i.max(j))).or_insert(0.0) += 0.5 * cot;
        }
    }
    let mut directed: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * weights.len());
    for (&(i, j), &w) in &weights {
        directed.push((i, j, w));
        directed.push((j, i, w));
    }
    directed.sort_by_key(|&(i, j, _)| (i, j));
    Ok(WaveOperator {
        mass,
        c2: c.iter().map(|v| v * v).collect(),
        edge_src: directed.iter().map(|e| e.0).collect(),
        edge_dst: directed.iter().map(|e| e.1).collect(),
        edge_weight: directed.iter().map(|e| e.2).collect(),
        boundary: mesh.node_type.iter().map(|t| t.is_boundary()).collect(),
    })
}

impl WaveOperator {
    pub fn node_count(&self) -> usize {
        self.mass.len()
    }

    /// `K·u` with `(K u)_i = Σ_j w_ij (u_i − u_j)`.
    pub fn apply_stiffness(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for e in 0..self.edge_src.len() {
            let (i, j) = (self.edge_src[e], self.edge_dst[e]);
            out[i] += self.edge_weight[e] * (u[i] - u[j]);
        }
        out
    }

    /// Entry `K_ij` of the assembled stiffness matrix.
    pub fn stiffness_entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return (0..self.edge_src.len())
                .filter(|&e| self.edge_src[e] == i)
                .map(|e| self.edge_weight[e])
                .sum();
        }
        (0..self.edge_src.len())
            .find(|&e| self.edge_src[e] == i && self.edge_dst[e] == j)
            .map_or(0.0, |e| -self.edge_weight[e])
    }

    /// Same operator with a different velocity field.
    pub fn with_velocity(&self, c: &[f64]) -> WaveOperator {
        assert_eq!(c.len(), self.node_count(), "velocity length mismatch");
        WaveOperator {
            c2: c.iter().map(|v| v * v).collect(),
            ..self.clone()
        }
    }

    fn project(&self, state: &mut WaveState) {
        for (i, &b) in self.boundary.iter().enumerate() {
            if b {
                state.u[i] = 0.0;
                state.u_prime[i] = 0.0;
            }
        }
    }

    /// Symmetric form `S K S` with `S = sqrt(c²/m)`, restricted to interior
    /// nodes, applied to `x`.
    fn apply_symmetric(&self, scale: &[f64], x: &[f64]) -> Vec<f64> {
        let sx: Vec<f64> = x.iter().zip(scale).map(|(a, s)| a * s).collect();
        let mut k = self.apply_stiffness(&sx);
        for (i, v) in k.iter_mut().enumerate() {
            *v *= scale[i];
        }
        k
    }

    /// Discrete energy `½ u′ᵀ(M/c²)u′ + ½ uᵀKu`, conserved by the
    /// semi-discrete system for any positive velocity field.
    pub fn energy(&self, state: &WaveState) -> f64 {
        let ku = self.apply_stiffness(&state.u);
        let kinetic: f64 = (0..self.node_count())
            .map(|i| self.mass[i] / self.c2[i] * state.u_prime[i] * state.u_prime[i])
            .sum();
        let potential: f64 = state.u.iter().zip(&ku).map(|(a, b)| a * b).sum();
        0.5 * (kinetic + potential)
    }

    /// Energy of the time-discrete scheme, `energy(state) − (dt/2)·u′ᵀKu`.
    /// [`step`] preserves it exactly up to rounding, while [`Self::energy`]
    /// oscillates by a relative amount of order `dt·ω`.
    pub fn step_energy(&self, state: &WaveState, dt: f64) -> f64 {
        let ku = self.apply_stiffness(&state.u);
        let cross: f64 = state.u_prime.iter().zip(&ku).map(|(a, b)| a * b).sum();
        self.energy(state) - 0.5 * dt * cross
    }
}

/// Largest stable symplectic-Euler step with a 0.9 safety factor.
///
/// The largest eigenvalue of `M⁻¹c²K` on interior nodes comes from 100 power
/// iterations on the symmetric form. If the estimate has not settled to a
/// relative change of 1e-3, the Gershgorin bound is used instead.
pub fn max_stable_dt(op: &WaveOperator) -> f64 {
    let n = op.node_count();
    let scale: Vec<f64> = (0..n)
        .map(|i| if op.boundary[i] { 0.0 } else { (op.c2[i] / op.mass[i]).sqrt() })
        .collect();
    // Deterministic start vector with components along every mode.
    let mut x: Vec<f64> = (0..n)
        .map(|i| if op.boundary[i] { 0.0 } else { 1.0 + ((i as f64 + 1.0) * 12.9898).sin() * 0.5 })
        .collect();
    let mut lambda = 0.0;
    let mut rel_change = f64::INFINITY;
    for _ in 0..100 {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        x.iter_mut().for_each(|v| *v /= norm);
        let y = op.apply_symmetric(&scale, &x);
        let next: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        rel_change = ((next - lambda) / next).abs();
        lambda = next;
        x = y;
    }
    let lambda = if rel_change > 1e-3 || !(lambda > 0.0) {
        log::warn!("power iteration did not settle (relative change {rel_change:.2e}); using Gershgorin bound");
        gershgorin_bound(op, &scale)
    } else {
        lambda
    };
    0.9 * 2.0 / lambda.sqrt()
}

fn gershgorin_bound(op: &WaveOperator, scale: &[f64]) -> f64 {
    let n = op.node_count();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];
    for e in 0..op.edge_src.len() {
        let (i, j, w) = (op.edge_src[e], op.edge_dst[e], op.edge_weight[e]);
        diag[i] += w;
        off[i] += (w * scale[i] * scale[j]).abs();
    }
    (0..n)
        .map(|i| (diag[i] * scale[i] * scale[i]).abs() + off[i])
        .fold(0.0, f64::max)
}

/// One symplectic Euler step followed by Dirichlet projection.
pub fn step(op: &WaveOperator, state: &WaveState, dt: f64) -> Result<WaveState> {
    let ku = op.apply_stiffness(&state.u);
    let mut next = state.clone();
    for i in 0..op.node_count() {
        next.u_prime[i] -= dt * op.c2[i] / op.mass[i] * ku[i];
    }
    for i in 0..op.node_count() {
        next.u[i] += dt * next.u_prime[i];
    }
    op.project(&mut next);
    next.t += dt;
    if !(next.u.iter().chain(&next.u_prime).all(|v| v.is_finite())) {
        return Err(Error::NonFinite(format!("wave step at t = {}", state.t)));
    }
    Ok(next)
}

/// Exact inverse of [`step`] on projected states.
pub fn step_reverse(op: &WaveOperator, state: &WaveState, dt: f64) -> Result<WaveState> {
    let mut prev = state.clone();
    for i in 0..op.node_count() {
        prev.u[i] -= dt * prev.u_prime[i];
    }
    let ku = op.apply_stiffness(&prev.u);
    for i in 0..op.node_count() {
        prev.u_prime[i] += dt * op.c2[i] / op.mass[i] * ku[i];
    }
    op.project(&mut prev);
    prev.t -= dt;
    if !(prev.u.iter().chain(&prev.u_prime).all(|v| v.is_finite())) {
        return Err(Error::NonFinite(format!("reverse wave step at t = {}", state.t)));
    }
    Ok(prev)
}

/// Runs `n_steps` solver steps and keeps every `stride`-th state, starting
/// with the initial one.
pub fn rollout(op: &WaveOperator, initial: &WaveState, n_steps: usize, stride: usize, dt: f64) -> Result<Trajectory> {
    if stride == 0 {
        return Err(Error::InvalidInput("snapshot stride must be at least 1".into()));
    }
    let mut state = initial.clone();
    op.project(&mut state);
    let mut snapshots = vec![state.clone()];
    for k in 1..=n_steps {
        state = step(op, &state, dt)?;
        if k % stride == 0 {
            snapshots.push(state.clone());
        }
    }
    Ok(Trajectory {
        c: op.c2.iter().map(|v| v.sqrt()).collect(),
        snapshots,
        dt,
        stride,
    })
}
