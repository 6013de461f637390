//! Training and test trajectories: simulate on a fine mesh, keep snapshots
//! interpolated onto an independently generated coarse mesh.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{assemble, max_stable_dt, rollout, Trajectory, WaveState};
use crate::io::{self, format_err};
use crate::mesh::{Interpolant, Mesh};
use crate::synth::{ParamFields, Sample, SampleConfig};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A domain meshed twice: finely for the solver, coarsely for the learned
/// models.
#[derive(Clone, Debug)]
pub struct MeshPair {
    pub name: String,
    pub fine: Mesh,
    pub coarse: Mesh,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub samples_per_mesh: usize,
    /// Snapshot intervals per trajectory.
    pub steps: usize,
    /// Solver steps per snapshot interval.
    pub stride: usize,
    pub sample: SampleConfig,
    /// Solver step; `None` picks the largest step stable on every fine mesh
    /// at the highest velocity.
    pub dt: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            samples_per_mesh: 4,
            steps: 30,
            stride: 5,
            sample: SampleConfig::default(),
            dt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    /// Index into the mesh pairs.
    pub mesh: usize,
    pub split: Split,
    pub seed: u64,
    /// Parameters evaluated directly on the coarse mesh.
    pub sample: Sample,
    /// Coarse-mesh snapshots.
    pub trajectory: Trajectory,
}

/// One solver step that is stable for every fine mesh when the velocity is
/// `c_hi` everywhere, and therefore for every binary velocity map.
pub fn dataset_dt(pairs: &[MeshPair], config: &DatasetConfig) -> Result<f64> {
    if let Some(dt) = config.dt {
        return Ok(dt);
    }
    let mut dt = f64::INFINITY;
    for p in pairs {
        let op = assemble(&p.fine, &vec![config.sample.c_hi; p.fine.node_count()])?;
        dt = dt.min(max_stable_dt(&op));
    }
    if !dt.is_finite() {
        return Err(Error::InvalidInput("dataset needs at least one mesh".into()));
    }
    Ok(dt)
}

/// Interpolation tolerance between a fine and a coarse mesh: rims of the
/// obstacle are polygons whose vertices differ between the two meshes.
fn pair_interpolant(pair: &MeshPair) -> Result<Interpolant> {
    Interpolant::new(&pair.fine, &pair.coarse, pair.fine.mean_edge_length())
}

fn simulate(pair: &MeshPair, interp: &Interpolant, fields: &ParamFields, config: &DatasetConfig, dt: f64) -> Result<(Sample, Trajectory)> {
    let fine = fields.on_mesh(&pair.fine)?;
    let op = assemble(&pair.fine, &fine.c)?;
    let traj = rollout(&op, &WaveState::at_rest(fine.u_init), config.steps * config.stride, config.stride, dt)?;
    let mask = pair.coarse.interior_mask();
    let snapshots = traj
        .snapshots
        .iter()
        .map(|s| WaveState {
            u: interp.apply(&s.u).iter().zip(&mask).map(|(v, m)| v * m).collect(),
            u_prime: interp.apply(&s.u_prime).iter().zip(&mask).map(|(v, m)| v * m).collect(),
            t: s.t,
        })
        .collect();
    let coarse = fields.on_mesh(&pair.coarse)?;
    let trajectory = Trajectory {
        c: coarse.c.clone(),
        snapshots,
        dt,
        stride: config.stride,
    };
    Ok((coarse, trajectory))
}

/// Seed of trajectory number `index` (counted across all meshes).
pub fn trajectory_seed(master: u64, index: usize) -> u64 {
    seed::derive(master, "trajectory").wrapping_add(index as u64)
}

/// Generates every trajectory in memory, in mesh order.
pub fn generate_trajectories(pairs: &[MeshPair], config: &DatasetConfig, seed: u64) -> Result<Vec<DatasetEntry>> {
    let dt = dataset_dt(pairs, config)?;
    let mut out = Vec::with_capacity(pairs.len() * config.samples_per_mesh);
    for (m, pair) in pairs.iter().enumerate() {
        let interp = pair_interpolant(pair)?;
        for k in 0..config.samples_per_mesh {
            let s = trajectory_seed(seed, m * config.samples_per_mesh + k);
            let fields = ParamFields::generate(&config.sample, s)?;
            let (sample, trajectory) = simulate(pair, &interp, &fields, config, dt)?;
            out.push(DatasetEntry {
                mesh: m,
                split: pair.split,
                seed: s,
                sample,
                trajectory,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestMesh {
    pub name: String,
    pub split: Split,
    pub fine: String,
    pub coarse: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestTrajectory {
    pub file: String,
    pub sample_file: String,
    pub mesh: String,
    pub split: Split,
    pub seed: u64,
}

/// Text index of a dataset directory. Paths are relative to the directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub dt: f64,
    pub stride: usize,
    pub steps: usize,
    pub meshes: Vec<ManifestMesh>,
    pub trajectories: Vec<ManifestTrajectory>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.txt";

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "meshinvert-dataset 1").unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "dt {:.16e}", self.dt).unwrap();
        writeln!(s, "stride {}", self.stride).unwrap();
        writeln!(s, "steps {}", self.steps).unwrap();
        for m in &self.meshes {
            writeln!(s, "mesh {} {} {} {}", m.name, m.split.as_str(), m.fine, m.coarse).unwrap();
        }
        for t in &self.trajectories {
            writeln!(s, "trajectory {} {} {} {} {}", t.file, t.sample_file, t.mesh, t.split.as_str(), t.seed).unwrap();
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = DatasetManifest {
            seed: 0,
            dt: 0.0,
            stride: 0,
            steps: 0,
            meshes: Vec::new(),
            trajectories: Vec::new(),
        };
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = || format_err(path, format!("line {}: malformed `{line}`", i + 1));
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
            match (f[0], f.len()) {
                ("meshinvert-dataset", 2) if f[1] == "1" => saw_header = true,
                ("seed", 2) => m.seed = num(f[1])?,
                ("dt", 2) => m.dt = f[1].parse().map_err(|_| bad())?,
                ("stride", 2) => m.stride = num(f[1])? as usize,
                ("steps", 2) => m.steps = num(f[1])? as usize,
                ("mesh", 5) => m.meshes.push(ManifestMesh {
                    name: f[1].into(),
                    split: Split::parse(f[2]).ok_or_else(bad)?,
                    fine: f[3].into(),
                    coarse: f[4].into(),
                }),
                ("trajectory", 6) => m.trajectories.push(ManifestTrajectory {
                    file: f[1].into(),
                    sample_file: f[2].into(),
                    mesh: f[3].into(),
                    split: Split::parse(f[4]).ok_or_else(bad)?,
                    seed: num(f[5])?,
                }),
                _ => return Err(bad()),
            }
        }
        if !saw_header {
            return Err(format_err(path, "missing `meshinvert-dataset 1` header"));
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = String::from_utf8(io::read_file(&path)?).map_err(|_| format_err(&path, "manifest is not UTF-8"))?;
        Self::parse(&text, &path)
    }
}

/// Generates the dataset and writes meshes, samples, trajectories and a
/// manifest under `out_dir`. On failure every file written so far is removed.
pub fn generate_dataset(pairs: &[MeshPair], config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_dataset(pairs, config, seed, out_dir, &mut written);
    if result.is_err() {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn write_dataset(
    pairs: &[MeshPair],
    config: &DatasetConfig,
    seed: u64,
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        seed,
        dt: dataset_dt(pairs, config)?,
        stride: config.stride,
        steps: config.steps,
        meshes: Vec::new(),
        trajectories: Vec::new(),
    };
    for pair in pairs {
        let fine = format!("meshes/{}_fine.mesh", pair.name);
        let coarse = format!("meshes/{}_coarse.mesh", pair.name);
        for (rel, mesh) in [(&fine, &pair.fine), (&coarse, &pair.coarse)] {
            let p = out_dir.join(rel);
            io::write_mesh(&p, mesh)?;
            written.push(p);
        }
        manifest.meshes.push(ManifestMesh {
            name: pair.name.clone(),
            split: pair.split,
            fine,
            coarse,
        });
    }
    let entries = generate_trajectories(pairs, config, seed)?;
    for (k, e) in entries.iter().enumerate() {
        let pair = &pairs[e.mesh];
        let index = k % config.samples_per_mesh.max(1);
        let file = format!("trajectories/{}_{index:03}.mtrj", pair.name);
        let sample_file = format!("samples/{}_{index:03}.minv", pair.name);
        let p = out_dir.join(&file);
        io::write_trajectory(&p, &e.trajectory, &manifest.meshes[e.mesh].coarse, e.seed)?;
        written.push(p);
        let p = out_dir.join(&sample_file);
        io::write_sample(&p, e.seed, &e.sample.u_init, &e.sample.c, &e.sample.u_raw)?;
        written.push(p);
        manifest.trajectories.push(ManifestTrajectory {
            file,
            sample_file,
            mesh: pair.name.clone(),
            split: e.split,
            seed: e.seed,
        });
    }
    let p = out_dir.join(DatasetManifest::FILE_NAME);
    io::atomic_write(&p, manifest.to_text().as_bytes())?;
    written.push(p);
    Ok(manifest)
}
