//! Experiment configuration: a text file of `key = value` lines. Keys may be
//! dotted (`solve.lr = 0.01`) or grouped under `[section]` headers, which
//! prefix every following key. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    GenMesh,
    GenData,
    TrainGnn,
    TrainPrior,
    Solve,
    Eval,
    Report,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::GenMesh,
        Task::GenData,
        Task::TrainGnn,
        Task::TrainPrior,
        Task::Solve,
        Task::Eval,
        Task::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::GenMesh => "gen-mesh",
            Task::GenData => "gen-data",
            Task::TrainGnn => "train-gnn",
            Task::TrainPrior => "train-prior",
            Task::Solve => "solve",
            Task::Eval => "eval",
            Task::Report => "report",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected one of gen-mesh, gen-data, train-gnn, train-prior, solve, eval, report)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    InitialState,
    Velocity,
}

impl FromStr for FieldKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "initial_state" => Ok(FieldKind::InitialState),
            "velocity" => Ok(FieldKind::Velocity),
            _ => Err(format!("expected `initial_state` or `velocity`, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardKind {
    Gnn,
    Reference,
}

impl FromStr for ForwardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gnn" => Ok(ForwardKind::Gnn),
            "reference" => Ok(ForwardKind::Reference),
            _ => Err(format!("expected `gnn` or `reference`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshSection {
    pub train: usize,
    pub test: usize,
    pub fine_nodes: usize,
    pub coarse_nodes: usize,
    /// Radius of a disk obstacle placed at a random position; 0 for none.
    pub obstacle_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub dir: PathBuf,
    pub samples_per_mesh: usize,
    pub steps: usize,
    pub stride: usize,
    pub grid: usize,
    pub u_length_scale: f64,
    pub c_length_scale: f64,
    pub quantile: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    pub taper_width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnSection {
    pub checkpoint: PathBuf,
    pub hidden: usize,
    pub mp_steps: usize,
    pub noise_std: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSection {
    pub checkpoint: PathBuf,
    pub field: FieldKind,
    pub latent_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub frequencies: usize,
    pub sigma: f64,
    pub epochs: usize,
    pub points_per_sample: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveSection {
    pub unknown: FieldKind,
    pub forward: ForwardKind,
    pub with_prior: bool,
    pub objective_l1: bool,
    /// Test trajectories to solve for; 0 for all of them.
    pub samples: usize,
    pub sensors: usize,
    pub obs_first: usize,
    pub obs_last: usize,
    pub obs_every: usize,
    pub noise_std: f64,
    pub max_iters: usize,
    pub lr: f64,
    /// Iterations per added observation time; 0 observes all times at once.
    pub schedule_period: usize,
    pub fine_tune: Option<(usize, usize)>,
    pub fine_tune_lr: f64,
    pub checkpointing: bool,
    pub record_timing: bool,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSection {
    pub metrics: Vec<PathBuf>,
    pub dir: PathBuf,
    /// Window shaded on objective plots.
    pub fine_tune: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub mesh: MeshSection,
    pub data: DataSection,
    pub gnn: GnnSection,
    pub prior: PriorSection,
    pub solve: SolveSection,
    pub report: ReportSection,
    /// Every effective setting, one `key = value` per line, sorted.
    pub canonical: String,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Raw `key = value` pairs with the line they came from.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let here = || format!("{}:{}", path.display(), i + 1);
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| HarnessError::Config(format!("{}: unterminated section header", here())))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(HarnessError::Config(format!("{}: invalid section name `{name}`", here())));
                }
                section = format!("{name}.");
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("{}: expected `key = value`", here())))?;
            let key = format!("{section}{}", k.trim());
            if k.trim().is_empty() || key.contains(char::is_whitespace) {
                return Err(HarnessError::Config(format!("{}: invalid key `{}`", here(), k.trim())));
            }
            let value = v.trim().trim_matches('"').to_string();
            if entries.insert(key.clone(), (value, i + 1)).is_some() {
                return Err(HarnessError::Config(format!("{}: `{key}` is set twice", here())));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.entries.insert(key.into(), (value, 0));
    }
}

/// Typed access that remembers which keys were read, so leftovers can be
/// reported as unknown.
struct Reader {
    raw: RawConfig,
    used: BTreeMap<String, String>,
}

impl Reader {
    fn get<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw.entries.get(key) {
            Some((v, line)) => {
                let parsed = v.parse::<T>().map_err(|e| {
                    let at = if *line > 0 { format!(" (line {line})") } else { String::new() };
                    HarnessError::Config(format!("{key}{at}: invalid value `{v}`: {e}"))
                })?;
                self.used.insert(key.into(), v.clone());
                Ok(parsed)
            }
            None => {
                self.used.insert(key.into(), default.to_string());
                Ok(default)
            }
        }
    }

    fn num<T>(&mut self, key: &str, default: T) -> Result<T, HarnessError>
    where
        T: FromStr + ToString,
        T::Err: std::fmt::Display,
    {
        self.get(key, default)
    }

    fn path(&mut self, key: &str, default: PathBuf) -> Result<PathBuf, HarnessError> {
        let p: String = self.get(key, default.to_string_lossy().into_owned())?;
        Ok(PathBuf::from(p))
    }

    fn window(&mut self, key: &str) -> Result<Option<(usize, usize)>, HarnessError> {
        let s: String = self.get(key, "none".to_string())?;
        if s == "none" {
            return Ok(None);
        }
        let parse = || -> Option<(usize, usize)> {
            let (a, b) = s.split_once(',')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        };
        match parse() {
            Some((a, b)) if a < b => Ok(Some((a, b))),
            _ => Err(HarnessError::Config(format!("{key}: expected `start, end` with start < end or `none`, got `{s}`"))),
        }
    }

    fn positive(&mut self, key: &str, default: usize) -> Result<usize, HarnessError> {
        let v = self.num(key, default)?;
        if v == 0 {
            return Err(HarnessError::Config(format!("{key}: must be at least 1")));
        }
        Ok(v)
    }

    fn positive_f64(&mut self, key: &str, default: f64) -> Result<f64, HarnessError> {
        let v = self.num(key, default)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(HarnessError::Config(format!("{key}: must be a positive number, got {v}")));
        }
        Ok(v)
    }

    fn finish(self) -> Result<BTreeMap<String, String>, HarnessError> {
        if let Some((k, (_, line))) = self.raw.entries.iter().find(|(k, _)| !self.used.contains_key(*k)) {
            return Err(HarnessError::Config(format!("{k} (line {line}): unknown setting")));
        }
        Ok(self.used)
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("--config {}: {e}", path.display())))?;
        Self::from_text(&text, path, overrides)
    }

    pub fn from_text(text: &str, path: &Path, overrides: &Overrides) -> Result<Self, HarnessError> {
        let mut raw = RawConfig::parse(text, path)?;
        if let Some(t) = &overrides.task {
            raw.set("task", t.clone());
        }
        if let Some(s) = overrides.seed {
            raw.set("seed", s.to_string());
        }
        if let Some(j) = overrides.jobs {
            raw.set("jobs", j.to_string());
        }
        if let Some(o) = &overrides.out {
            raw.set("out", o.to_string_lossy().into_owned());
        }
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawConfig) -> Result<Self, HarnessError> {
        let mut r = Reader {
            raw,
            used: BTreeMap::new(),
        };
        let task: String = r.get("task", String::new())?;
        if task.is_empty() {
            return Err(HarnessError::Config("task: not set (in the file or as an argument)".into()));
        }
        let task = task.parse::<Task>().map_err(|e| HarnessError::Config(format!("task: {e}")))?;
        let seed = r.num("seed", 0u64)?;
        let jobs = r.positive("jobs", 1)?;
        let out = r.path("out", PathBuf::from("out"))?;

        let mesh = MeshSection {
            train: r.positive("mesh.train", 4)?,
            test: r.positive("mesh.test", 1)?,
            fine_nodes: r.positive("mesh.fine_nodes", 600)?,
            coarse_nodes: r.positive("mesh.coarse_nodes", 150)?,
            obstacle_radius: r.num("mesh.obstacle_radius", 0.1)?,
        };
        if !(0.0..0.3).contains(&mesh.obstacle_radius) {
            return Err(HarnessError::Config(format!(
                "mesh.obstacle_radius: must lie in [0, 0.3), got {}",
                mesh.obstacle_radius
            )));
        }
        let data = DataSection {
            dir: r.path("data.dir", out.join("data"))?,
            samples_per_mesh: r.positive("data.samples_per_mesh", 5)?,
            steps: r.positive("data.steps", 30)?,
            stride: r.positive("data.stride", 5)?,
            grid: r.positive("data.grid", 32)?,
            u_length_scale: r.positive_f64("data.u_length_scale", 0.2)?,
            c_length_scale: r.positive_f64("data.c_length_scale", 0.25)?,
            quantile: r.num("data.quantile", 0.5)?,
            c_lo: r.positive_f64("data.c_lo", 0.5)?,
            c_hi: r.positive_f64("data.c_hi", 1.0)?,
            taper_width: r.positive_f64("data.taper_width", 0.1)?,
        };
        if data.c_lo >= data.c_hi {
            return Err(HarnessError::Config("data.c_lo: must be below data.c_hi".into()));
        }
        if !(0.0..=1.0).contains(&data.quantile) {
            return Err(HarnessError::Config("data.quantile: must lie in [0, 1]".into()));
        }
        if data.grid < 8 || !data.grid.is_power_of_two() {
            return Err(HarnessError::Config(format!("data.grid: must be a power of two >= 8, got {}", data.grid)));
        }
        let gnn = GnnSection {
            checkpoint: r.path("gnn.checkpoint", out.join("gnn.mgnn"))?,
            hidden: r.positive("gnn.hidden", 64)?,
            mp_steps: r.positive("gnn.mp_steps", 6)?,
            noise_std: r.num("gnn.noise_std", 1e-3)?,
            epochs: r.num("gnn.epochs", 40)?,
            batch_size: r.positive("gnn.batch_size", 8)?,
            lr_start: r.positive_f64("gnn.lr_start", 1e-3)?,
            lr_end: r.positive_f64("gnn.lr_end", 1e-5)?,
        };
        let prior_field: String = r.get("prior.field", "initial_state".to_string())?;
        let prior = PriorSection {
            checkpoint: r.path("prior.checkpoint", out.join("prior.mpri"))?,
            field: prior_field.parse().map_err(|e| HarnessError::Config(format!("prior.field: {e}")))?,
            latent_dim: r.positive("prior.latent_dim", 64)?,
            hidden_layers: r.positive("prior.hidden_layers", 6)?,
            width: r.positive("prior.width", 64)?,
            frequencies: r.num("prior.frequencies", 6)?,
            sigma: r.positive_f64("prior.sigma", 0.01)?,
            epochs: r.num("prior.epochs", 2000)?,
            points_per_sample: r.positive("prior.points_per_sample", 900)?,
            lr_start: r.positive_f64("prior.lr_start", 1e-3)?,
            lr_end: r.positive_f64("prior.lr_end", 1e-4)?,
        };
        let unknown: String = r.get("solve.unknown", "initial_state".to_string())?;
        let forward: String = r.get("solve.forward", "gnn".to_string())?;
        let objective: String = r.get("solve.objective", "mse".to_string())?;
        let solve = SolveSection {
            unknown: unknown.parse().map_err(|e| HarnessError::Config(format!("solve.unknown: {e}")))?,
            forward: forward.parse().map_err(|e| HarnessError::Config(format!("solve.forward: {e}")))?,
            with_prior: r.get("solve.with_prior", true)?,
            objective_l1: match objective.as_str() {
                "mse" => false,
                "l1" => true,
                o => return Err(HarnessError::Config(format!("solve.objective: expected `mse` or `l1`, got `{o}`"))),
            },
            samples: r.num("solve.samples", 0)?,
            sensors: r.positive("solve.sensors", 20)?,
            obs_first: r.positive("solve.obs_first", 2)?,
            obs_last: r.positive("solve.obs_last", 30)?,
            obs_every: r.positive("solve.obs_every", 2)?,
            noise_std: r.num("solve.noise_std", 0.0)?,
            max_iters: r.num("solve.max_iters", 2000)?,
            lr: r.positive_f64("solve.lr", 1e-2)?,
            schedule_period: r.num("solve.schedule_period", 0)?,
            fine_tune: r.window("solve.fine_tune")?,
            fine_tune_lr: r.num("solve.fine_tune_lr", 1e-4)?,
            checkpointing: r.get("solve.checkpointing", false)?,
            record_timing: r.get("solve.record_timing", false)?,
            dir: r.path("solve.dir", out.join("solutions"))?,
        };
        if solve.obs_first > solve.obs_last {
            return Err(HarnessError::Config("solve.obs_first: must not exceed solve.obs_last".into()));
        }
        if solve.fine_tune.is_some() && !solve.with_prior {
            return Err(HarnessError::Config("solve.fine_tune: fine-tuning needs solve.with_prior = true".into()));
        }
        if solve.with_prior && solve.unknown != prior.field {
            return Err(HarnessError::Config(format!(
                "prior.field: the prior must produce the solve.unknown field ({unknown})"
            )));
        }
        let metrics: String = r.get("report.metrics", out.join("metrics.csv").to_string_lossy().into_owned())?;
        let report_window = match r.window("report.fine_tune")? {
            Some(w) => Some(w),
            None => solve.fine_tune,
        };
        let report = ReportSection {
            metrics: metrics.split(',').map(|s| PathBuf::from(s.trim())).filter(|p| !p.as_os_str().is_empty()).collect(),
            dir: r.path("report.dir", out.join("report"))?,
            fine_tune: report_window,
        };
        if report.metrics.is_empty() {
            return Err(HarnessError::Config("report.metrics: needs at least one file".into()));
        }
        let used = r.finish()?;
        let canonical = used.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Ok(Self {
            task,
            seed,
            jobs,
            out,
            mesh,
            data,
            gnn,
            prior,
            solve,
            report,
            canonical,
        })
    }

    /// SHA-256 of the canonical settings, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical.as_bytes()))
    }
}
