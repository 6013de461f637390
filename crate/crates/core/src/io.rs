//! On-disk formats and atomic file writes.
//!
//! Binary containers start with a 4-byte magic, a little-endian `u32`
//! version and the `u64` seed that produced the contents. All numbers that
//! follow are little-endian; float arrays are written as a `u64` length and
//! then the values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::mesh::{Mesh, NodeType, Obstacle};
use crate::wavesim::{Trajectory, WaveState};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const MAGIC_SAMPLE: &[u8; 4] = b"MINV";
pub const MAGIC_TRAJECTORY: &[u8; 4] = b"MTRJ";
pub const MAGIC_GNN: &[u8; 4] = b"MGNN";
pub const MAGIC_PRIOR: &[u8; 4] = b"MPRI";
pub const MAGIC_SOLUTION: &[u8; 4] = b"MSOL";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `bytes` to a unique temporary sibling of `path`, then renames it
/// into place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| format_err(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(
        ".{name}.tmp-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path, e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

#[derive(Default)]
pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 4], seed: u64) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w.u64(seed);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(u8::from(v));
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
    pub seed: u64,
}

impl<'a> BinReader<'a> {
    /// Checks magic and version and reads the seed.
    pub fn open(data: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<Self> {
        let mut r = Self {
            data,
            pos: 0,
            path: path.to_path_buf(),
            seed: 0,
        };
        let m = r.take(4)?;
        if m != magic {
            return Err(format_err(
                path,
                format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(m)
                ),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(
                path,
                format!("unsupported version {version} (expected {FORMAT_VERSION})"),
            ));
        }
        r.seed = r.u64()?;
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(format_err(&self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| format_err(&self.path, format!("count {v} too large")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format_err(&self.path, format!("invalid flag byte {b}"))),
        }
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n.saturating_mul(8) > self.data.len() - self.pos {
            return Err(format_err(&self.path, format!("array of {n} floats overruns the file")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    /// Float array that must have exactly `n` entries.
    pub fn f64s_len(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let v = self.f64s()?;
        if v.len() != n {
            return Err(self.error(format!("{what} has {} values, expected {n}", v.len())));
        }
        Ok(v)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format_err(&self.path, "invalid UTF-8 string"))
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        format_err(&self.path, message)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(format_err(
                &self.path,
                format!("{} trailing bytes", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mesh text format

pub fn mesh_to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    writeln!(s, "version 1").unwrap();
    writeln!(s, "seed {}", mesh.seed).unwrap();
    match mesh.obstacle {
        None => writeln!(s, "obstacle none").unwrap(),
        Some(Obstacle::Disk { center, radius }) => {
            writeln!(s, "obstacle disk {:.16e} {:.16e} {:.16e}", center[0], center[1], radius).unwrap()
        }
        Some(Obstacle::Ellipse { center, radii }) => writeln!(
            s,
            "obstacle ellipse {:.16e} {:.16e} {:.16e} {:.16e}",
            center[0], center[1], radii[0], radii[1]
        )
        .unwrap(),
    }
    writeln!(s, "nodes {}", mesh.nodes.len()).unwrap();
    for p in &mesh.nodes {
        writeln!(s, "{:.16e} {:.16e}", p[0], p[1]).unwrap();
    }
    writeln!(s, "triangles {}", mesh.triangles.len()).unwrap();
    for t in &mesh.triangles {
        writeln!(s, "{} {} {}", t[0], t[1], t[2]).unwrap();
    }
    writeln!(s, "node_type").unwrap();
    for t in &mesh.node_type {
        writeln!(s, "{}", u8::from(t.is_boundary())).unwrap();
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_fields(&mut self) -> Result<Vec<&'a str>> {
        loop {
            let Some((i, l)) = self.inner.next() else {
                return Err(format_err(self.path, "unexpected end of file"));
            };
            self.line = i + 1;
            let f: Vec<&str> = l.split_whitespace().collect();
            if !f.is_empty() {
                return Ok(f);
            }
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        format_err(self.path, format!("line {}: {msg}", self.line))
    }

    fn keyword(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let f = self.next_fields()?;
        if f[0] != key {
            return Err(self.err(format!("expected `{key}`, found `{}`", f[0])));
        }
        Ok(f[1..].to_vec())
    }

    /// `key value` line with a single parsed value.
    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let f = self.keyword(key)?;
        match f.as_slice() {
            [v] => self.parse(v),
            _ => Err(self.err(format!("`{key}` takes exactly one value"))),
        }
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse `{s}`")))
    }
}

pub fn mesh_from_str(text: &str, path: &Path) -> Result<Mesh> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        path,
        line: 0,
    };
    let v = lines.keyword("version")?;
    if v.first().copied() != Some("1") {
        return Err(lines.err(format!("unsupported mesh version {v:?}")));
    }
    let seed: u64 = lines.value("seed")?;
    let ob = lines.keyword("obstacle")?;
    let nums = |lines: &Lines, f: &[&str]| -> Result<Vec<f64>> { f.iter().map(|s| lines.parse(s)).collect() };
    let obstacle = match ob.first().copied() {
        Some("none") => None,
        Some("disk") => {
            let v = nums(&lines, &ob[1..])?;
            if v.len() != 3 {
                return Err(lines.err("disk needs center x, center y and radius"));
            }
            Some(Obstacle::Disk {
                center: [v[0], v[1]],
                radius: v[2],
            })
        }
        Some("ellipse") => {
            let v = nums(&lines, &ob[1..])?;
            if v.len() != 4 {
                return Err(lines.err("ellipse needs center x, center y and two radii"));
            }
            Some(Obstacle::Ellipse {
                center: [v[0], v[1]],
                radii: [v[2], v[3]],
            })
        }
        other => return Err(lines.err(format!("unknown obstacle kind {other:?}"))),
    };
    let n: usize = lines.value("nodes")?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let f = lines.next_fields()?;
        if f.len() != 2 {
            return Err(lines.err("node row needs two coordinates"));
        }
        nodes.push([lines.parse(f[0])?, lines.parse(f[1])?]);
    }
    let m: usize = lines.value("triangles")?;
    let mut triangles = Vec::with_capacity(m);
    for _ in 0..m {
        let f = lines.next_fields()?;
        if f.len() != 3 {
            return Err(lines.err("triangle row needs three indices"));
        }
        triangles.push([lines.parse(f[0])?, lines.parse(f[1])?, lines.parse(f[2])?]);
    }
    lines.keyword("node_type")?;
    let mut node_type = Vec::with_capacity(n);
    for _ in 0..n {
        let f = lines.next_fields()?;
        node_type.push(match f[0] {
            "0" => NodeType::Interior,
            "1" => NodeType::Boundary,
            other => return Err(lines.err(format!("node type must be 0 or 1, found `{other}`"))),
        });
    }
    let mesh = Mesh {
        nodes,
        triangles,
        node_type,
        obstacle,
        seed,
    };
    mesh.validate().map_err(|e| format_err(path, e.to_string()))?;
    Ok(mesh)
}

pub fn write_mesh(path: &Path, mesh: &Mesh) -> Result<()> {
    atomic_write(path, mesh_to_string(mesh).as_bytes())
}

pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    mesh_from_str(&text, path)
}

// ---------------------------------------------------------------------------
// Parameter samples

/// Writes a parameter sample. The untapered initial state follows the two
/// primary fields so that priors can be trained from sample files alone.
pub fn write_sample(path: &Path, seed: u64, u_init: &[f64], c: &[f64], u_raw: &[f64]) -> Result<()> {
    assert!(u_init.len() == c.len() && c.len() == u_raw.len(), "sample fields differ in length");
    let mut w = BinWriter::new(MAGIC_SAMPLE, seed);
    w.usize(u_init.len());
    w.f64s(u_init);
    w.f64s(c);
    w.f64s(u_raw);
    atomic_write(path, &w.into_bytes())
}

/// A parameter sample read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFile {
    pub seed: u64,
    pub u_init: Vec<f64>,
    pub c: Vec<f64>,
    pub u_raw: Vec<f64>,
}

pub fn read_sample(path: &Path) -> Result<SampleFile> {
    let data = read_file(path)?;
    let mut r = BinReader::open(&data, MAGIC_SAMPLE, path)?;
    let n = r.usize()?;
    let u_init = r.f64s_len(n, "u_init")?;
    let c = r.f64s_len(n, "c")?;
    let u_raw = r.f64s_len(n, "u_raw")?;
    let seed = r.seed;
    r.finish()?;
    Ok(SampleFile { seed, u_init, c, u_raw })
}

// ---------------------------------------------------------------------------
// Trajectories

pub fn trajectory_bytes(traj: &Trajectory, mesh_ref: &str, seed: u64) -> Vec<u8> {
    let mut w = BinWriter::new(MAGIC_TRAJECTORY, seed);
    w.str(mesh_ref);
    w.usize(traj.node_count());
    w.usize(traj.snapshots.len());
    w.f64(traj.dt);
    w.usize(traj.stride);
    w.f64s(&traj.c);
    for s in &traj.snapshots {
        w.f64(s.t);
        w.f64s(&s.u);
        w.f64s(&s.u_prime);
    }
    w.into_bytes()
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, mesh_ref: &str, seed: u64) -> Result<()> {
    atomic_write(path, &trajectory_bytes(traj, mesh_ref, seed))
}

/// Returns the trajectory, its mesh reference and seed.
pub fn read_trajectory(path: &Path) -> Result<(Trajectory, String, u64)> {
    let data = read_file(path)?;
    let mut r = BinReader::open(&data, MAGIC_TRAJECTORY, path)?;
    let mesh_ref = r.str()?;
    let n = r.usize()?;
    let count = r.usize()?;
    let dt = r.f64()?;
    let stride = r.usize()?;
    let c = r.f64s_len(n, "c")?;
    let mut snapshots = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let t = r.f64()?;
        let u = r.f64s_len(n, "u")?;
        let u_prime = r.f64s_len(n, "u_prime")?;
        snapshots.push(WaveState { u, u_prime, t });
    }
    let seed = r.seed;
    r.finish()?;
    Ok((
        Trajectory {
            c,
            snapshots,
            dt,
            stride,
        },
        mesh_ref,
        seed,
    ))
}
