//! Autodecoder coordinate network: a latent code `z` and a point `x` go in,
//! one field value comes out. Every training sample owns a code that is
//! fitted jointly with the shared weights under a Gaussian prior on `z`.

use std::f64::consts::PI;
use std::path::Path;

use meshinvert_tensor::optim::{Adam, ExpDecay};
use meshinvert_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::io::{self, BinReader, BinWriter, MAGIC_PRIOR};
use crate::mesh::{boundary_distance, Mesh};
use crate::synth::taper_mask;
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    Sigmoid,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub latent_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
    /// Positional-encoding frequencies per coordinate.
    pub frequencies: usize,
    pub head: OutputHead,
    /// Hidden layers (0-based, ≥ 1) that receive the latent code again
    /// next to the previous activation.
    pub skips: Vec<usize>,
    /// Standard deviation of the Gaussian prior on latent codes.
    pub sigma: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden_layers: 6,
            width: 64,
            frequencies: 6,
            head: OutputHead::Sigmoid,
            skips: Vec::new(),
            sigma: 0.01,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.hidden_layers < 1 || self.width < 1 {
            return Err(Error::InvalidInput(
                "prior needs latent_dim, hidden_layers and width of at least 1".into(),
            ));
        }
        if let Some(&k) = self.skips.iter().find(|&&k| k == 0 || k >= self.hidden_layers) {
            return Err(Error::InvalidInput(format!(
                "skip layer {k} outside 1..{}",
                self.hidden_layers
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("latent sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        2 + 4 * self.frequencies
    }
}

/// `[x, y, sin(2⁰πx), cos(2⁰πx), sin(2⁰πy), cos(2⁰πy), …]` up to frequency
/// `2^(F−1)`.
pub fn encode_position(p: [f64; 2], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 + 4 * frequencies);
    out.extend_from_slice(&p);
    for k in 0..frequencies {
        let w = (1u64 << k) as f64 * PI;
        for &x in &p {
            out.push((w * x).sin());
            out.push((w * x).cos());
        }
    }
    out
}

/// One encoded position per row.
pub fn encode_positions(points: &[[f64; 2]], frequencies: usize) -> Tensor {
    let d = 2 + 4 * frequencies;
    let mut data = Vec::with_capacity(points.len() * d);
    for &p in points {
        data.extend(encode_position(p, frequencies));
    }
    Tensor::new(points.len(), d, data)
}

/// `‖z‖² / σ²`.
pub fn latent_regularizer(tape: &mut Tape, z: Var, sigma: f64) -> Var {
    let sq = tape.squared_l2_norm(z);
    tape.scale(sq, 1.0 / (sigma * sigma))
}

#[derive(Clone, Debug, PartialEq)]
struct LayerLayout {
    /// Weight for the previous activation (or the position encoding).
    w: usize,
    /// Weight for the latent code, on the first layer and skip layers.
    wz: Option<usize>,
    b: usize,
}

fn layout(cfg: &PriorConfig) -> (Vec<LayerLayout>, [usize; 2], Vec<(usize, usize)>) {
    let mut shapes = Vec::new();
    let mut push = |s: (usize, usize)| {
        shapes.push(s);
        shapes.len() - 1
    };
    let mut layers = Vec::new();
    for l in 0..cfg.hidden_layers {
        let inp = if l == 0 { cfg.encoding_dim() } else { cfg.width };
        let w = push((inp, cfg.width));
        let wz = (l == 0 || cfg.skips.contains(&l)).then(|| push((cfg.latent_dim, cfg.width)));
        let b = push((1, cfg.width));
        layers.push(LayerLayout { w, wz, b });
    }
    let out = [push((cfg.width, 1)), push((1, 1))];
    (layers, out, shapes)
}

/// Shared weights and the latent table of the training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub tensors: Vec<Tensor>,
    /// One code per training sample.
    pub latents: Vec<Vec<f64>>,
    layers: Vec<LayerLayout>,
    output: [usize; 2],
}

impl PriorModel {
    /// Uniform fan-in scaled weights, zero biases, no latent codes.
    pub fn init(config: &PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, output, shapes) = layout(config);
        let mut rng = seed::rng(seed, "prior-init");
        let mut tensors: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        for l in &layers {
            let fan_in = tensors[l.w].rows() + l.wz.map_or(0, |k| tensors[k].rows());
            let a = (6.0 / fan_in as f64).sqrt();
            for k in std::iter::once(l.w).chain(l.wz) {
                let (r, c) = tensors[k].shape();
                tensors[k] = Tensor::from_fn(r, c, |_, _| rng.random_range(-a..a));
            }
        }
        let a = (6.0 / (config.width + 1) as f64).sqrt();
        tensors[output[0]] = Tensor::from_fn(config.width, 1, |_, _| rng.random_range(-a..a));
        Ok(Self {
            config: config.clone(),
            tensors,
            latents: Vec::new(),
            layers,
            output,
        })
    }

    pub fn load(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Optimizers step codes in units of σ so that a learning rate means the
    /// same thing for any prior width. Returns the code `z = σ·ζ`.
    pub fn code_from_scaled(&self, tape: &mut Tape, scaled: Var) -> Var {
        tape.scale(scaled, self.config.sigma)
    }

    /// Network output for every row of `encoded` (`N×(2+4F)`) with code `z`
    /// (`1×L`); returns `N×1`.
    pub fn decode_on_tape(&self, tape: &mut Tape, w: &[Var], z: Var, encoded: Var) -> Var {
        // Codes live on the scale σ; the network sees them whitened.
        let zn = tape.scale(z, 1.0 / self.config.sigma);
        let mut h = encoded;
        for l in &self.layers {
            let mut pre = tape.matmul(h, w[l.w]);
            if let Some(k) = l.wz {
                // The code is shared by every row, so its term is one row.
                let zt = tape.matmul(zn, w[k]);
                pre = tape.add(pre, zt);
            }
            let pre = tape.add(pre, w[l.b]);
            h = tape.relu(pre);
        }
        let out = tape.linear(h, w[self.output[0]], w[self.output[1]]);
        match self.config.head {
            OutputHead::Sigmoid => tape.sigmoid(out),
            OutputHead::Linear => out,
        }
    }

    /// Field values at `points`.
    pub fn decode_points(&self, z: &[f64], points: &[[f64; 2]]) -> Vec<f64> {
        let mut tape = Tape::new();
        let w = self.load(&mut tape, false);
        let zv = tape.constant(Tensor::row(z.to_vec()));
        let enc = tape.constant(encode_positions(points, self.config.frequencies));
        let out = self.decode_on_tape(&mut tape, &w, zv, enc);
        tape.value(out).data().to_vec()
    }

    pub fn decode(&self, z: &[f64], p: [f64; 2]) -> f64 {
        self.decode_points(z, &[p])[0]
    }

    /// Decoded field on every node of `mesh`, mapped by `map`.
    pub fn decode_field(&self, z: &[f64], mesh: &Mesh, map: &FieldMap) -> Vec<f64> {
        map.apply(&self.decode_points(z, &mesh.nodes))
    }

    pub fn to_bytes(&self, seed: u64) -> Vec<u8> {
        let c = &self.config;
        let mut w = BinWriter::new(MAGIC_PRIOR, seed);
        w.usize(c.latent_dim);
        w.usize(c.hidden_layers);
        w.usize(c.width);
        w.usize(c.frequencies);
        w.u32(match c.head {
            OutputHead::Sigmoid => 0,
            OutputHead::Linear => 1,
        });
        w.usize(c.skips.len());
        for &k in &c.skips {
            w.usize(k);
        }
        w.f64(c.sigma);
        w.usize(self.tensors.len());
        for t in &self.tensors {
            w.usize(t.rows());
            w.usize(t.cols());
            w.f64s(t.data());
        }
        w.usize(self.latents.len());
        for z in &self.latents {
            w.f64s(z);
        }
        w.into_bytes()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<(Self, u64)> {
        let mut r = BinReader::open(data, MAGIC_PRIOR, path)?;
        let latent_dim = r.usize()?;
        let hidden_layers = r.usize()?;
        let width = r.usize()?;
        let frequencies = r.usize()?;
        let head = match r.u32()? {
            0 => OutputHead::Sigmoid,
            1 => OutputHead::Linear,
            h => return Err(r.error(format!("unknown output head {h}"))),
        };
        let n_skips = r.usize()?;
        if n_skips > hidden_layers {
            return Err(r.error("more skip layers than hidden layers"));
        }
        let skips = (0..n_skips).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let config = PriorConfig {
            latent_dim,
            hidden_layers,
            width,
            frequencies,
            head,
            skips,
            sigma: r.f64()?,
        };
        config.validate().map_err(|e| r.error(e.to_string()))?;
        let (layers, output, shapes) = layout(&config);
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
        let n_latents = r.usize()?;
        let mut latents = Vec::new();
        for _ in 0..n_latents {
            latents.push(r.f64s_len(latent_dim, "latent code")?);
        }
        let seed = r.seed;
        r.finish()?;
        Ok((
            Self {
                config,
                tensors,
                latents,
                layers,
                output,
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

/// How raw network output becomes a physical field on a mesh.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldMap {
    /// Output used as is.
    Identity,
    /// Output multiplied node-wise by a taper that vanishes on the boundary.
    InitialState { mask: Vec<f64> },
    /// `c_lo + (c_hi − c_lo)·g`.
    Velocity { c_lo: f64, c_hi: f64 },
}

impl FieldMap {
    /// Taper of width `taper_width` from the graph distance to the boundary.
    pub fn initial_state(mesh: &Mesh, taper_width: f64) -> Result<Self> {
        Ok(FieldMap::InitialState {
            mask: taper_mask(&boundary_distance(mesh)?, taper_width),
        })
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        match self {
            FieldMap::Identity => g.to_vec(),
            FieldMap::InitialState { mask } => g.iter().zip(mask).map(|(a, m)| a * m).collect(),
            FieldMap::Velocity { c_lo, c_hi } => g.iter().map(|a| c_lo + (c_hi - c_lo) * a).collect(),
        }
    }

    /// Inverse of [`FieldMap::apply`] for building training targets; the
    /// taper is not inverted.
    pub fn normalize(&self, field: &[f64]) -> Vec<f64> {
        match self {
            FieldMap::Velocity { c_lo, c_hi } => field.iter().map(|v| (v - c_lo) / (c_hi - c_lo)).collect(),
            _ => field.to_vec(),
        }
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, g: Var) -> Var {
        match self {
            FieldMap::Identity => g,
            FieldMap::InitialState { mask } => {
                let m = tape.constant(Tensor::vector(mask.clone()));
                tape.mul(g, m)
            }
            FieldMap::Velocity { c_lo, c_hi } => {
                let s = tape.scale(g, c_hi - c_lo);
                let lo = tape.constant(Tensor::scalar(*c_lo));
                tape.add(s, lo)
            }
        }
    }
}

/// A normalized training field sampled at mesh nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    /// Mean edge length of the source mesh.
    pub spacing: f64,
}

impl FieldSample {
    pub fn on_mesh(mesh: &Mesh, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), mesh.node_count(), "one value per node");
        Self {
            points: mesh.nodes.clone(),
            values,
            spacing: mesh.mean_edge_length(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    /// Coordinates drawn per sample and epoch; capped at the node count.
    pub points_per_sample: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            points_per_sample: 900,
            lr_start: 1e-3,
            lr_end: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorLog {
    /// Total objective per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean squared error at every node of each sample after training.
    pub reconstruction_mse: Vec<f64>,
    pub diverged_at: Option<usize>,
}

fn draw_points(sample: &FieldSample, k: usize, noise: bool, rng: &mut impl Rng) -> (Vec<[f64; 2]>, Vec<f64>) {
    let n = sample.points.len();
    let half = 0.5 * sample.spacing;
    let mut pts = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);
    for idx in rand::seq::index::sample(rng, n, k.min(n)) {
        let mut p = sample.points[idx];
        if noise {
            p[0] += rng.random_range(-half..=half);
            p[1] += rng.random_range(-half..=half);
        }
        pts.push(p);
        vals.push(sample.values[idx]);
    }
    (pts, vals)
}

/// `Σ_j (G(z, x_j) − v_j)² + ‖z‖²/σ²` for one sample.
fn sample_objective(model: &PriorModel, tape: &mut Tape, w: &[Var], z: Var, points: &[[f64; 2]], values: &[f64]) -> Var {
    let enc = tape.constant(encode_positions(points, model.config.frequencies));
    let out = model.decode_on_tape(tape, w, z, enc);
    let target = tape.constant(Tensor::vector(values.to_vec()));
    let d = tape.sub(out, target);
    let fit = tape.squared_l2_norm(d);
    let reg = latent_regularizer(tape, z, model.config.sigma);
    tape.add(fit, reg)
}

pub fn reconstruction_mse(model: &PriorModel, z: &[f64], sample: &FieldSample) -> f64 {
    let out = model.decode_points(z, &sample.points);
    out.iter().zip(&sample.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.len() as f64
}

/// Fits shared weights and one latent code per sample jointly.
pub fn train_prior(model: PriorModel, samples: &[FieldSample], tc: &PriorTrainConfig) -> Result<(PriorModel, PriorLog)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("prior training needs at least one sample".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.points.is_empty() || s.points.len() != s.values.len()) {
        return Err(Error::InvalidInput(format!(
            "sample with {} points and {} values",
            s.points.len(),
            s.values.len()
        )));
    }
    let mut model = model;
    let l = model.config.latent_dim;
    let mut rng = seed::rng(tc.seed, "prior-train");
    let sigma = model.config.sigma;
    let init = Normal::new(0.0, 0.01 / sigma).expect("valid normal");
    let mut latents: Vec<Tensor> = (0..samples.len())
        .map(|_| Tensor::from_fn(1, l, |_, _| init.sample(&mut rng)))
        .collect();
    let n_weights = model.tensors.len();
    let mut all: Vec<Tensor> = model.tensors.iter().cloned().chain(latents.iter().cloned()).collect();
    let mut opt = Adam::new(&all);
    let schedule = ExpDecay {
        initial: tc.lr_start,
        decay: tc.lr_end / tc.lr_start,
        every: tc.epochs.max(1) as f64,
    };
    let mut log = PriorLog::default();
    for epoch in 0..tc.epochs {
        let mut tape = Tape::new();
        let w = model.load(&mut tape, true);
        let zs: Vec<Var> = latents.iter().map(|z| tape.param(z.clone())).collect();
        let mut total = None;
        for (s, &zeta) in samples.iter().zip(&zs) {
            let z = model.code_from_scaled(&mut tape, zeta);
            let (pts, vals) = draw_points(s, tc.points_per_sample, true, &mut rng);
            let term = sample_objective(&model, &mut tape, &w, z, &pts, &vals);
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term),
            });
        }
        let loss = total.expect("non-empty sample list");
        let value = tape.value(loss).item();
        let grads = match tape.backward(loss) {
            Ok(g) if value.is_finite() => g,
            _ => {
                log::warn!("prior training diverged at epoch {epoch}");
                log.diverged_at = Some(epoch);
                break;
            }
        };
        let g: Vec<Tensor> = w.iter().chain(&zs).map(|v| grads.get(*v).unwrap().clone()).collect();
        let backup = all.clone();
        opt.step(&mut all, &g, schedule.at(epoch as u64));
        if !all.iter().all(Tensor::all_finite) {
            all = backup;
            log.diverged_at = Some(epoch);
            break;
        }
        model.tensors = all[..n_weights].to_vec();
        latents = all[n_weights..].to_vec();
        log.epoch_loss.push(value);
        if epoch % 200 == 0 {
            log::debug!("prior epoch {epoch}: objective {value:.4e}");
        }
    }
    model.tensors = all[..n_weights].to_vec();
    model.latents = all[n_weights..].iter().map(|t| t.data().iter().map(|v| v * sigma).collect()).collect();
    log.reconstruction_mse = samples
        .iter()
        .zip(&model.latents)
        .map(|(s, z)| reconstruction_mse(&model, z, s))
        .collect();
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Latent code for a new field with the weights frozen. The objective is
/// the training objective evaluated at every point of the sample, without
/// coordinate noise. Starts from `init`, or from a small random code.
pub fn infer_latent(model: &PriorModel, sample: &FieldSample, cfg: &InferConfig, init: Option<&[f64]>) -> Result<Vec<f64>> {
    let l = model.config.latent_dim;
    let z0 = match init {
        Some(z) if z.len() == l => z.to_vec(),
        Some(z) => {
            return Err(Error::InvalidInput(format!("initial code has {} entries, expected {l}", z.len())));
        }
        None => {
            let mut rng = seed::rng(cfg.seed, "prior-infer");
            let d = Normal::new(0.0, 0.01).expect("valid normal");
            (0..l).map(|_| d.sample(&mut rng)).collect()
        }
    };
    let sigma = model.config.sigma;
    let mut z = vec![Tensor::row(z0.iter().map(|v| v / sigma).collect())];
    let mut opt = Adam::new(&z);
    let mut best = (f64::INFINITY, z[0].clone());
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let w = model.load(&mut tape, false);
        let zv = tape.param(z[0].clone());
        let code = model.code_from_scaled(&mut tape, zv);
        let loss = sample_objective(model, &mut tape, &w, code, &sample.points, &sample.values);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            break;
        }
        if value < best.0 {
            best = (value, z[0].clone());
        }
        let g = tape.backward(loss)?.take(zv).expect("latent gradient");
        opt.step(&mut z, &[g], cfg.lr);
    }
    if cfg.steps == 0 {
        return Ok(z0);
    }
    // The final iterate has not been scored yet.
    let mut tape = Tape::new();
    let w = model.load(&mut tape, false);
    let zv = tape.constant(z[0].clone());
    let code = model.code_from_scaled(&mut tape, zv);
    let loss = sample_objective(model, &mut tape, &w, code, &sample.points, &sample.values);
    if tape.value(loss).item() < best.0 {
        best.1 = z[0].clone();
    }
    Ok(best.1.data().iter().map(|v| v * sigma).collect())
}
