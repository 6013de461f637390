//! Learned one-step simulator on mesh graphs.
//!
//! Encoder, processor and decoder MLPs over node features `[u, u′, c,
//! one-hot node type]` and edge features `[dx, dy, |d|]`. Each processor
//! step updates edges from their endpoints, sums incoming edges at every
//! node, and updates nodes; both updates are residual and every step owns
//! its weights. The decoder predicts `[Δu, Δu′]`, which is added to the
//! state before boundary nodes are reset to zero.
//!
//! The first layer of every MLP that reads a concatenation is stored as one
//! weight block per input part. That is the same map as one wide matrix but
//! lets endpoint terms be computed per node and then gathered per edge.

use std::sync::Arc;

use meshinvert_tensor::optim::{Adam, ExpDecay};
use meshinvert_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::io::{self, BinReader, BinWriter, MAGIC_GNN};
use crate::mesh::{build_edges, Mesh};
use crate::wavesim::{Trajectory, WaveState};
use crate::{seed, Error, Result};

pub const NODE_FEATURES: usize = 5;
pub const EDGE_FEATURES: usize = 3;
pub const OUTPUTS: usize = 2;
const MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GnnConfig {
    /// Latent width and MLP hidden width.
    pub hidden: usize,
    /// Message-passing steps.
    pub mp_steps: usize,
    /// Input noise on `u` and `u′` during training, in normalized units.
    pub noise_std: f64,
    /// Reset boundary nodes to zero after every step.
    pub project_dirichlet: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            mp_steps: 6,
            noise_std: 1e-3,
            project_dirichlet: true,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 4 || self.mp_steps < 1 {
            return Err(Error::InvalidInput(format!(
                "GNN needs hidden >= 4 and at least one message-passing step, got {} and {}",
                self.hidden, self.mp_steps
            )));
        }
        Ok(())
    }
}

/// Per-feature statistics of the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub node_mean: [f64; NODE_FEATURES],
    pub node_std: [f64; NODE_FEATURES],
    pub edge_mean: [f64; EDGE_FEATURES],
    pub edge_std: [f64; EDGE_FEATURES],
    pub out_mean: [f64; OUTPUTS],
    pub out_std: [f64; OUTPUTS],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            node_mean: [0.0; NODE_FEATURES],
            node_std: [1.0; NODE_FEATURES],
            edge_mean: [0.0; EDGE_FEATURES],
            edge_std: [1.0; EDGE_FEATURES],
            out_mean: [0.0; OUTPUTS],
            out_std: [1.0; OUTPUTS],
        }
    }

    /// Mean and clamped standard deviation over all snapshot pairs of the
    /// given trajectories. Output statistics use interior nodes only.
    pub fn from_data(samples: &[TrainingTrajectory]) -> Result<Self> {
        let mut node = Moments::<NODE_FEATURES>::default();
        let mut edge = Moments::<EDGE_FEATURES>::default();
        let mut out = Moments::<OUTPUTS>::default();
        for s in samples {
            for f in &s.graph.edge_features {
                edge.add(*f);
            }
            for pair in s.trajectory.snapshots.windows(2) {
                for i in 0..s.graph.n_nodes {
                    let oh = s.graph.one_hot[i];
                    node.add([pair[0].u[i], pair[0].u_prime[i], s.trajectory.c[i], oh[0], oh[1]]);
                    if s.graph.interior[i] {
                        out.add([pair[1].u[i] - pair[0].u[i], pair[1].u_prime[i] - pair[0].u_prime[i]]);
                    }
                }
            }
        }
        if out.count == 0.0 {
            return Err(Error::InvalidInput("no snapshot pairs to normalize".into()));
        }
        let (node_mean, node_std) = node.finish();
        let (edge_mean, edge_std) = edge.finish();
        let (out_mean, out_std) = out.finish();
        Ok(Self {
            node_mean,
            node_std,
            edge_mean,
            edge_std,
            out_mean,
            out_std,
        })
    }
}

struct Moments<const N: usize> {
    count: f64,
    sum: [f64; N],
    sq: [f64; N],
}

impl<const N: usize> Default for Moments<N> {
    fn default() -> Self {
        Self {
            count: 0.0,
            sum: [0.0; N],
            sq: [0.0; N],
        }
    }
}

impl<const N: usize> Moments<N> {
    fn add(&mut self, v: [f64; N]) {
        self.count += 1.0;
        for k in 0..N {
            self.sum[k] += v[k];
            self.sq[k] += v[k] * v[k];
        }
    }

    fn finish(&self) -> ([f64; N], [f64; N]) {
        let n = self.count.max(1.0);
        let mean = self.sum.map(|s| s / n);
        let mut std = [0.0; N];
        for k in 0..N {
            std[k] = (self.sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt().max(MIN_STD);
        }
        (mean, std)
    }
}

/// Mesh connectivity and geometry in the form the network consumes.
#[derive(Clone, Debug)]
pub struct GraphData {
    pub n_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_features: Vec<[f64; EDGE_FEATURES]>,
    pub one_hot: Vec<[f64; 2]>,
    pub interior: Vec<bool>,
}

impl GraphData {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        let e = build_edges(mesh);
        Self {
            n_nodes: mesh.node_count(),
            src: e.src,
            dst: e.dst,
            edge_features: e.features,
            one_hot: mesh.node_type.iter().map(|t| t.one_hot()).collect(),
            interior: mesh.node_type.iter().map(|t| !t.is_boundary()).collect(),
        }
    }

    /// Disjoint union; node indices of later parts are offset.
    pub fn union(parts: &[&GraphData]) -> GraphData {
        let mut out = GraphData {
            n_nodes: 0,
            src: Vec::new(),
            dst: Vec::new(),
            edge_features: Vec::new(),
            one_hot: Vec::new(),
            interior: Vec::new(),
        };
        for g in parts {
            let off = out.n_nodes;
            out.src.extend(g.src.iter().map(|i| i + off));
            out.dst.extend(g.dst.iter().map(|i| i + off));
            out.edge_features.extend_from_slice(&g.edge_features);
            out.one_hot.extend_from_slice(&g.one_hot);
            out.interior.extend_from_slice(&g.interior);
            out.n_nodes += g.n_nodes;
        }
        out
    }
}

/// Graph constants already normalized, ready to be placed on tapes.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub n_nodes: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub edge_features: Tensor,
    pub one_hot: Tensor,
    /// `N×1`, 1 on interior nodes.
    pub mask: Tensor,
    pub n_interior: usize,
}

impl PreparedGraph {
    pub fn new(g: &GraphData, norm: &Normalizer) -> Self {
        let edge_features = Tensor::from_fn(g.src.len(), EDGE_FEATURES, |r, c| {
            (g.edge_features[r][c] - norm.edge_mean[c]) / norm.edge_std[c]
        });
        let one_hot = Tensor::from_fn(g.n_nodes, 2, |r, c| {
            (g.one_hot[r][c] - norm.node_mean[3 + c]) / norm.node_std[3 + c]
        });
        Self {
            n_nodes: g.n_nodes,
            src: g.src.clone().into(),
            dst: g.dst.clone().into(),
            edge_features,
            one_hot,
            mask: Tensor::vector(g.interior.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
            n_interior: g.interior.iter().filter(|&&b| b).count(),
        }
    }
}

/// Index of one MLP inside the flat parameter list: a first layer with one
/// weight block per input part, then two more layers.
#[derive(Clone, Debug, PartialEq)]
struct MlpLayout {
    first: Vec<usize>,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    node_enc: MlpLayout,
    edge_enc: MlpLayout,
    edge_mlps: Vec<MlpLayout>,
    node_mlps: Vec<MlpLayout>,
    decoder: MlpLayout,
}

/// Shapes of all tensors in declaration order, and where each MLP lives.
fn layout(cfg: &GnnConfig) -> (Layout, Vec<(usize, usize)>) {
    let h = cfg.hidden;
    let mut shapes = Vec::new();
    let mut mlp = |inputs: &[usize], out: usize| {
        let mut first = Vec::new();
        for &w in inputs {
            first.push(shapes.len());
            shapes.push((w, h));
        }
        let mut idx = |s: (usize, usize)| {
            shapes.push(s);
            shapes.len() - 1
        };
        MlpLayout {
            first,
            b1: idx((1, h)),
            w2: idx((h, h)),
            b2: idx((1, h)),
            w3: idx((h, out)),
            b3: idx((1, out)),
        }
    };
    let node_enc = mlp(&[NODE_FEATURES], h);
    let edge_enc = mlp(&[EDGE_FEATURES], h);
    let mut edge_mlps = Vec::new();
    let mut node_mlps = Vec::new();
    for _ in 0..cfg.mp_steps {
        edge_mlps.push(mlp(&[h, h, h], h));
        node_mlps.push(mlp(&[h, h], h));
    }
    let decoder = mlp(&[h], OUTPUTS);
    (
        Layout {
            node_enc,
            edge_enc,
            edge_mlps,
            node_mlps,
            decoder,
        },
        shapes,
    )
}

/// Weights and normalization of a trained (or fresh) simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    pub config: GnnConfig,
    pub normalizer: Normalizer,
    pub tensors: Vec<Tensor>,
    layout: Layout,
}

impl GnnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &GnnConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = layout(config);
        let mut rng = seed::rng(seed, "gnn-init");
        let mut tensors = Vec::with_capacity(shapes.len());
        for &(r, c) in &shapes {
            if r == 1 {
                tensors.push(Tensor::zeros(r, c));
            } else {
                let a = (6.0 / (r + c) as f64).sqrt();
                tensors.push(Tensor::from_fn(r, c, |_, _| rng.random_range(-a..a)));
            }
        }
        Ok(Self {
            config: config.clone(),
            normalizer,
            tensors,
            layout,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zeroes the last layer of every processor MLP, which turns each
    /// message-passing step into the identity.
    pub fn zero_processor_outputs(&mut self) {
        let idx: Vec<usize> = self
            .layout
            .edge_mlps
            .iter()
            .chain(&self.layout.node_mlps)
            .flat_map(|m| [m.w3, m.b3])
            .collect();
        for i in idx {
            let (r, c) = self.tensors[i].shape();
            self.tensors[i] = Tensor::zeros(r, c);
        }
    }

    pub fn zero_decoder(&mut self) {
        for i in [self.layout.decoder.w3, self.layout.decoder.b3] {
            let (r, c) = self.tensors[i].shape();
            self.tensors[i] = Tensor::zeros(r, c);
        }
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    /// Places the weights on `tape`.
    pub fn load(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    pub fn prepare(&self, graph: &GraphData) -> PreparedGraph {
        PreparedGraph::new(graph, &self.normalizer)
    }

    fn mlp(&self, tape: &mut Tape, w: &[Var], m: &MlpLayout, parts: &[Var]) -> Var {
        let mut pre = None;
        for (k, &x) in parts.iter().enumerate() {
            let y = tape.matmul(x, w[m.first[k]]);
            pre = Some(match pre {
                None => y,
                Some(acc) => tape.add(acc, y),
            });
        }
        self.mlp_tail(tape, w, m, pre.expect("MLP without inputs"))
    }

    fn mlp_tail(&self, tape: &mut Tape, w: &[Var], m: &MlpLayout, pre: Var) -> Var {
        let h = tape.add(pre, w[m.b1]);
        let h = tape.relu(h);
        let h = tape.linear(h, w[m.w2], w[m.b2]);
        let h = tape.relu(h);
        tape.linear(h, w[m.w3], w[m.b3])
    }

    /// Normalized node features `N×5` from raw `u`, `u′`, `c` columns.
    pub fn node_features(&self, tape: &mut Tape, graph: &PreparedGraph, u: Var, up: Var, c: Var) -> Var {
        let n = &self.normalizer;
        let x = tape.concat(&[u, up, c]);
        let mean = tape.constant(Tensor::row(n.node_mean[..3].to_vec()));
        let inv = tape.constant(Tensor::row(n.node_std[..3].iter().map(|s| 1.0 / s).collect()));
        let x = tape.sub(x, mean);
        let x = tape.mul(x, inv);
        let oh = tape.constant(graph.one_hot.clone());
        tape.concat(&[x, oh])
    }

    /// Encoder and processor; returns node latents `N×H`.
    pub fn encode_process(&self, tape: &mut Tape, w: &[Var], graph: &PreparedGraph, features: Var) -> Var {
        let (v, e) = self.encode(tape, w, graph, features);
        let mut v = v;
        let mut e = e;
        for s in 0..self.config.mp_steps {
            (v, e) = self.process_step(tape, w, graph, s, v, e);
        }
        v
    }

    /// Node and edge latents from normalized node features.
    pub fn encode(&self, tape: &mut Tape, w: &[Var], graph: &PreparedGraph, features: Var) -> (Var, Var) {
        let v = self.mlp(tape, w, &self.layout.node_enc, &[features]);
        let ef = tape.constant(graph.edge_features.clone());
        let e = self.mlp(tape, w, &self.layout.edge_enc, &[ef]);
        (v, e)
    }

    /// One residual message-passing step `s`.
    pub fn process_step(&self, tape: &mut Tape, w: &[Var], graph: &PreparedGraph, s: usize, v: Var, e: Var) -> (Var, Var) {
        let me = &self.layout.edge_mlps[s];
        // concat(e, v_src, v_dst)·W = e·W_e + gather(v·W_s, src) + gather(v·W_d, dst)
        let pe = tape.matmul(e, w[me.first[0]]);
        let ps = tape.matmul(v, w[me.first[1]]);
        let ps = tape.gather_rows(ps, &graph.src);
        let pd = tape.matmul(v, w[me.first[2]]);
        let pd = tape.gather_rows(pd, &graph.dst);
        let pre = tape.add(pe, ps);
        let pre = tape.add(pre, pd);
        let de = self.mlp_tail(tape, w, me, pre);
        let e = tape.add(e, de);
        let agg = tape.scatter_sum(e, &graph.dst, graph.n_nodes);
        let dv = self.mlp(tape, w, &self.layout.node_mlps[s], &[v, agg]);
        let v = tape.add(v, dv);
        (v, e)
    }

    /// Normalized `[Δu, Δu′]` prediction `N×2`.
    pub fn predict_normalized(&self, tape: &mut Tape, w: &[Var], graph: &PreparedGraph, features: Var) -> Var {
        let v = self.encode_process(tape, w, graph, features);
        self.mlp(tape, w, &self.layout.decoder, &[v])
    }

    /// One simulator step on a tape. `u`, `up`, `c` are `N×1` columns.
    pub fn step_on_tape(&self, tape: &mut Tape, w: &[Var], graph: &PreparedGraph, u: Var, up: Var, c: Var) -> (Var, Var) {
        let x = self.node_features(tape, graph, u, up, c);
        let p = self.predict_normalized(tape, w, graph, x);
        let n = &self.normalizer;
        let std = tape.constant(Tensor::row(n.out_std.to_vec()));
        let mean = tape.constant(Tensor::row(n.out_mean.to_vec()));
        let p = tape.mul(p, std);
        let p = tape.add(p, mean);
        let du = tape.slice_cols(p, 0, 1);
        let dup = tape.slice_cols(p, 1, 2);
        let mut u_next = tape.add(u, du);
        let mut up_next = tape.add(up, dup);
        if self.config.project_dirichlet {
            let mask = tape.constant(graph.mask.clone());
            u_next = tape.mul(u_next, mask);
            up_next = tape.mul(up_next, mask);
        }
        (u_next, up_next)
    }

    /// One step without gradients.
    pub fn step(&self, graph: &PreparedGraph, state: &WaveState, c: &[f64]) -> Result<WaveState> {
        let mut tape = Tape::new();
        let w = self.load(&mut tape, false);
        let u = tape.constant(Tensor::vector(state.u.clone()));
        let up = tape.constant(Tensor::vector(state.u_prime.clone()));
        let cv = tape.constant(Tensor::vector(c.to_vec()));
        let (un, upn) = self.step_on_tape(&mut tape, &w, graph, u, up, cv);
        tape.check_finite()?;
        Ok(WaveState {
            u: tape.value(un).data().to_vec(),
            u_prime: tape.value(upn).data().to_vec(),
            t: state.t + 1.0,
        })
    }

    /// `n_steps` simulator steps; the result starts with `initial`. Times
    /// count simulator steps.
    pub fn rollout(&self, graph: &PreparedGraph, initial: &WaveState, c: &[f64], n_steps: usize) -> Result<Vec<WaveState>> {
        let mut out = vec![initial.clone()];
        for _ in 0..n_steps {
            let next = self.step(graph, out.last().unwrap(), c)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn to_bytes(&self, seed: u64) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC_GNN, seed);
        w.usize(self.config.hidden);
        w.usize(self.config.mp_steps);
        w.usize(NODE_FEATURES);
        w.usize(EDGE_FEATURES);
        w.usize(OUTPUTS);
        w.f64(self.config.noise_std);
        w.bool(self.config.project_dirichlet);
        let n = &self.normalizer;
        for a in [&n.node_mean[..], &n.node_std, &n.edge_mean, &n.edge_std, &n.out_mean, &n.out_std] {
            w.f64s(a);
        }
        w.usize(self.tensors.len());
        for t in &self.tensors {
            w.usize(t.rows());
            w.usize(t.cols());
            w.f64s(t.data());
        }
        w.into_bytes()
    }

    /// Returns the model and the seed recorded in the file.
    pub fn from_bytes(data: &[u8], path: &std::path::Path) -> Result<(Self, u64)> {
        let mut r = BinReader::open(data, MAGIC_GNN, path)?;
        let config = GnnConfig {
            hidden: r.usize()?,
            mp_steps: r.usize()?,
            noise_std: 0.0,
            project_dirichlet: true,
        };
        let dims = (r.usize()?, r.usize()?, r.usize()?);
        if dims != (NODE_FEATURES, EDGE_FEATURES, OUTPUTS) {
            return Err(r.error(format!("feature dimensions {dims:?} do not match this build")));
        }
        let config = GnnConfig {
            noise_std: r.f64()?,
            project_dirichlet: r.bool()?,
            ..config
        };
        config.validate().map_err(|e| r.error(e.to_string()))?;
        let mut arr = |n: usize, what: &str| -> Result<Vec<f64>> { r.f64s_len(n, what) };
        let node_mean = arr(NODE_FEATURES, "node mean")?;
        let node_std = arr(NODE_FEATURES, "node std")?;
        let edge_mean = arr(EDGE_FEATURES, "edge mean")?;
        let edge_std = arr(EDGE_FEATURES, "edge std")?;
        let out_mean = arr(OUTPUTS, "output mean")?;
        let out_std = arr(OUTPUTS, "output std")?;
        let normalizer = Normalizer {
            node_mean: node_mean.try_into().unwrap(),
            node_std: node_std.try_into().unwrap(),
            edge_mean: edge_mean.try_into().unwrap(),
            edge_std: edge_std.try_into().unwrap(),
            out_mean: out_mean.try_into().unwrap(),
            out_std: out_std.try_into().unwrap(),
        };
        let (layout, shapes) = layout(&config);
        let count = r.usize()?;
        if count != shapes.len() {
            return Err(r.error(format!("{count} weight tensors, expected {}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for &(rows, cols) in &shapes {
            let shape = (r.usize()?, r.usize()?);
            if shape != (rows, cols) {
                return Err(r.error(format!("weight shape {shape:?}, expected {:?}", (rows, cols))));
            }
            tensors.push(Tensor::new(rows, cols, r.f64s_len(rows * cols, "weights")?));
        }
        let seed = r.seed;
        r.finish()?;
        Ok((
            Self {
                config,
                normalizer,
                tensors,
                layout,
            },
            seed,
        ))
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        io::atomic_write(path, &self.to_bytes(seed))
    }

    pub fn load_file(path: &std::path::Path) -> Result<(Self, u64)> {
        Self::from_bytes(&io::read_file(path)?, path)
    }
}

/// One trajectory together with the graph of its mesh.
#[derive(Clone, Debug)]
pub struct TrainingTrajectory {
    pub graph: Arc<GraphData>,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Snapshot pairs per optimizer step, merged into one graph.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Replace targets with targets of randomly drawn other pairs.
    pub shuffle_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr_start: 1e-3,
            lr_end: 1e-5,
            seed: 0,
            shuffle_targets: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Noise-free loss over the whole training set before training, against
    /// the targets used for training.
    pub initial_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Same measure after training.
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GnnModel,
    pub log: TrainLog,
    /// Optimizer step at which the loss became non-finite; the returned
    /// model holds the last finite weights.
    pub diverged_at: Option<usize>,
}

/// (trajectory, snapshot index) of every consecutive snapshot pair.
fn pairs_of(data: &[TrainingTrajectory]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (k, d) in data.iter().enumerate() {
        for t in 0..d.trajectory.snapshots.len().saturating_sub(1) {
            out.push((k, t));
        }
    }
    out
}

struct Batch {
    graph: PreparedGraph,
    u: Tensor,
    up: Tensor,
    c: Tensor,
    target: Tensor,
}

fn build_batch(
    model: &GnnModel,
    data: &[TrainingTrajectory],
    items: &[(usize, usize)],
    target_items: &[(usize, usize)],
    noise: Option<(&mut rand_chacha::ChaCha8Rng, f64)>,
) -> Batch {
    let graphs: Vec<&GraphData> = items.iter().map(|&(k, _)| data[k].graph.as_ref()).collect();
    let merged = GraphData::union(&graphs);
    let mut u = Vec::with_capacity(merged.n_nodes);
    let mut up = Vec::with_capacity(merged.n_nodes);
    let mut c = Vec::with_capacity(merged.n_nodes);
    let mut target = Vec::with_capacity(2 * merged.n_nodes);
    let n = &model.normalizer;
    let mut noise = noise;
    for (&(k, t), &(tk, tt)) in items.iter().zip(target_items) {
        let traj = &data[k].trajectory;
        let (s0, s1) = (&traj.snapshots[t], &traj.snapshots[t + 1]);
        let tgt = &data[tk].trajectory.snapshots;
        for i in 0..s0.u.len() {
            let (mut ui, mut upi) = (s0.u[i], s0.u_prime[i]);
            if let Some((rng, std)) = noise.as_mut() {
                if data[k].graph.interior[i] {
                    let a: f64 = StandardNormal.sample(*rng);
                    let b: f64 = StandardNormal.sample(*rng);
                    ui += a * *std * n.node_std[0];
                    upi += b * *std * n.node_std[1];
                }
            }
            u.push(ui);
            up.push(upi);
            c.push(traj.c[i]);
            // Targets are measured from the (possibly noisy) input, so the
            // model learns to undo input perturbations.
            let (du, dup) = if (tk, tt) == (k, t) {
                (s1.u[i] - ui, s1.u_prime[i] - upi)
            } else {
                let j = i % tgt[tt].u.len();
                (tgt[tt + 1].u[j] - tgt[tt].u[j], tgt[tt + 1].u_prime[j] - tgt[tt].u_prime[j])
            };
            target.push((du - n.out_mean[0]) / n.out_std[0]);
            target.push((dup - n.out_mean[1]) / n.out_std[1]);
        }
    }
    let rows = merged.n_nodes;
    Batch {
        graph: model.prepare(&merged),
        u: Tensor::vector(u),
        up: Tensor::vector(up),
        c: Tensor::vector(c),
        target: Tensor::new(rows, OUTPUTS, target),
    }
}

/// Mean squared normalized error over interior nodes; returns the tape, the
/// loaded weights and the loss node.
fn batch_loss(model: &GnnModel, batch: &Batch, trainable: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let w = model.load(&mut tape, trainable);
    let u = tape.constant(batch.u.clone());
    let up = tape.constant(batch.up.clone());
    let c = tape.constant(batch.c.clone());
    let x = model.node_features(&mut tape, &batch.graph, u, up, c);
    let p = model.predict_normalized(&mut tape, &w, &batch.graph, x);
    let t = tape.constant(batch.target.clone());
    let d = tape.sub(p, t);
    let mask = tape.constant(batch.graph.mask.clone());
    let d = tape.mul(d, mask);
    let sq = tape.squared_l2_norm(d);
    let loss = tape.scale(sq, 1.0 / (OUTPUTS * batch.graph.n_interior.max(1)) as f64);
    (tape, w, loss)
}

/// Noise-free one-step loss averaged over all snapshot pairs.
pub fn evaluate_loss(model: &GnnModel, data: &[TrainingTrajectory]) -> Result<f64> {
    let pairs = pairs_of(data);
    dataset_loss(model, data, &pairs, &pairs)
}

fn dataset_loss(model: &GnnModel, data: &[TrainingTrajectory], pairs: &[(usize, usize)], targets: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no snapshot pairs to evaluate".into()));
    }
    let mut total = 0.0;
    let mut weight = 0.0;
    for (chunk, tchunk) in pairs.chunks(16).zip(targets.chunks(16)) {
        let batch = build_batch(model, data, chunk, tchunk, None);
        let (tape, _, loss) = batch_loss(model, &batch, false);
        let n = batch.graph.n_interior as f64;
        total += tape.value(loss).item() * n;
        weight += n;
    }
    Ok(total / weight)
}

/// Supervised one-step training with Adam and exponential learning-rate
/// decay from `lr_start` to `lr_end`.
pub fn train(model: GnnModel, data: &[TrainingTrajectory], tc: &TrainConfig) -> Result<TrainOutcome> {
    let pairs = pairs_of(data);
    if pairs.is_empty() {
        return Err(Error::InvalidInput("training set has no snapshot pairs".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut model = model;
    let mut rng = seed::rng(tc.seed, "gnn-train");
    let mut target_pairs = pairs.clone();
    if tc.shuffle_targets {
        target_pairs.shuffle(&mut rng);
    }
    let mut log = TrainLog {
        initial_loss: dataset_loss(&model, data, &pairs, &target_pairs)?,
        ..TrainLog::default()
    };
    let mut opt = Adam::new(&model.tensors);
    let steps_per_epoch = pairs.len().div_ceil(tc.batch_size);
    let schedule = ExpDecay {
        initial: tc.lr_start,
        decay: tc.lr_end / tc.lr_start,
        every: (tc.epochs * steps_per_epoch).max(1) as f64,
    };
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let items: Vec<(usize, usize)> = chunk.iter().map(|&i| pairs[i]).collect();
            let targets: Vec<(usize, usize)> = chunk.iter().map(|&i| target_pairs[i]).collect();
            let batch = build_batch(&model, data, &items, &targets, Some((&mut rng, model.config.noise_std)));
            let (tape, w, loss) = batch_loss(&model, &batch, true);
            let value = tape.value(loss).item();
            let grads = match tape.backward(loss) {
                Ok(g) if value.is_finite() => g,
                _ => {
                    log::warn!("GNN training diverged at epoch {epoch}, step {step}");
                    log.final_loss = dataset_loss(&model, data, &pairs, &target_pairs)?;
                    return Ok(TrainOutcome {
                        model,
                        log,
                        diverged_at: Some(step),
                    });
                }
            };
            let grads: Vec<Tensor> = w.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
            let lr = schedule.at(step as u64);
            let backup = model.tensors.clone();
            opt.step(&mut model.tensors, &grads, lr);
            if !model.tensors.iter().all(Tensor::all_finite) {
                model.tensors = backup;
                log.final_loss = dataset_loss(&model, data, &pairs, &target_pairs)?;
                return Ok(TrainOutcome {
                    model,
                    log,
                    diverged_at: Some(step),
                });
            }
            epoch_total += value;
            step += 1;
        }
        let mean = epoch_total / steps_per_epoch as f64;
        log::debug!("gnn epoch {epoch}: loss {mean:.4e}");
        log.epoch_loss.push(mean);
    }
    log.final_loss = dataset_loss(&model, data, &pairs, &target_pairs)?;
    Ok(TrainOutcome {
        model,
        log,
        diverged_at: None,
    })
}

/// Mean over interior nodes and snapshot pairs of the squared one-step
/// change `Δu² + Δu′²`, halved to match the per-output loss normalization.
pub fn mean_squared_delta(data: &[TrainingTrajectory]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0f64;
    for d in data {
        for pair in d.trajectory.snapshots.windows(2) {
            for i in 0..d.graph.n_nodes {
                if d.graph.interior[i] {
                    total += (pair[1].u[i] - pair[0].u[i]).powi(2) + (pair[1].u_prime[i] - pair[0].u_prime[i]).powi(2);
                    count += 2.0;
                }
            }
        }
    }
    total / count.max(1.0)
}

/// Mean squared one-step error in physical units over interior nodes,
/// comparable with [`mean_squared_delta`].
pub fn one_step_mse(model: &GnnModel, data: &[TrainingTrajectory]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0f64;
    for d in data {
        let graph = model.prepare(&d.graph);
        for pair in d.trajectory.snapshots.windows(2) {
            let pred = model.step(&graph, &pair[0], &d.trajectory.c)?;
            for i in 0..d.graph.n_nodes {
                if d.graph.interior[i] {
                    total += (pred.u[i] - pair[1].u[i]).powi(2) + (pred.u_prime[i] - pair[1].u_prime[i]).powi(2);
                    count += 2.0;
                }
            }
        }
    }
    Ok(total / count.max(1.0))
}
