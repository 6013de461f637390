//! Random parameter fields: spectral Gaussian random fields on a periodic
//! grid, binary velocity maps, and boundary-tapered initial wavefields.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::mesh::{boundary_distance, Mesh};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrfSpec {
    /// Grid points per axis; a power of two, at least 8.
    pub n: usize,
    pub length_scale: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl GrfSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 || !self.n.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "grid size {} must be a power of two >= 8",
                self.n
            )));
        }
        if !(self.length_scale > 0.0 && self.length_scale <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "correlation length {} outside (0, 1]",
                self.length_scale
            )));
        }
        Ok(())
    }
}

/// Scalar field on an `n×n` periodic grid; entry `(i, j)` sits at
/// `(i/n, j/n)` and is stored at `data[j*n + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[(j % self.n) * self.n + (i % self.n)]
    }

    /// Periodic bilinear interpolation.
    pub fn sample(&self, p: [f64; 2]) -> f64 {
        let n = self.n as f64;
        let gx = (p[0] * n).rem_euclid(n);
        let gy = (p[1] * n).rem_euclid(n);
        let (i0, j0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - i0 as f64, gy - j0 as f64);
        let v00 = self.at(i0, j0);
        let v10 = self.at(i0 + 1, j0);
        let v01 = self.at(i0, j0 + 1);
        let v11 = self.at(i0 + 1, j0 + 1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    pub fn on_mesh(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.nodes.iter().map(|&p| self.sample(p)).collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Affine rescale of the grid values onto `[0, 1]`.
    pub fn normalized_unit(&self) -> Grid {
        let (lo, hi) = self.min_max();
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        Grid {
            n: self.n,
            data: self.data.iter().map(|v| (v - lo) / span).collect(),
        }
    }
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Zero-mean Gaussian random field with a squared-exponential spectrum,
/// rescaled to sample standard deviation `amplitude`.
pub fn sample_grf(spec: &GrfSpec) -> Result<Grid> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = seed::rng(spec.seed, "grf");
    let mut coeffs: Vec<Complex<f64>> = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let kx = 2.0 * std::f64::consts::PI * signed_frequency(i, n);
            let ky = 2.0 * std::f64::consts::PI * signed_frequency(j, n);
            let k2 = kx * kx + ky * ky;
            let filter = (-0.5 * k2 * spec.length_scale * spec.length_scale).exp();
            coeffs.push(Complex::new(re * filter, im * filter));
        }
    }
    coeffs[0] = Complex::new(0.0, 0.0);

    let fft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    for row in coeffs.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); n];
    for i in 0..n {
        for j in 0..n {
            column[j] = coeffs[j * n + i];
        }
        fft.process(&mut column);
        for j in 0..n {
            coeffs[j * n + i] = column[j];
        }
    }

    let mut data: Vec<f64> = coeffs.iter().map(|c| c.re).collect();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64;
    let scale = spec.amplitude / var.sqrt().max(f64::MIN_POSITIVE);
    for v in &mut data {
        *v = (*v - mean) * scale;
    }
    Ok(Grid { n, data })
}

/// The value at empirical quantile `q` of `values`: the element of rank
/// `floor(q·len)` in ascending order.
pub fn quantile_level(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty field".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::InvalidInput(
            "constant field has no quantile separating two values".into(),
        ));
    }
    let k = ((q * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    Ok(sorted[k])
}

fn check_contrast(c_lo: f64, c_hi: f64) -> Result<()> {
    if !(c_hi > c_lo && c_lo > 0.0) {
        return Err(Error::InvalidInput(format!(
            "velocity bounds need c_hi > c_lo > 0, got ({c_lo}, {c_hi})"
        )));
    }
    Ok(())
}

/// Maps values at or above `level` to `c_hi` and the rest to `c_lo`.
pub fn binary_at_level(field: &[f64], level: f64, c_lo: f64, c_hi: f64) -> Vec<f64> {
    field
        .iter()
        .map(|&v| if v >= level { c_hi } else { c_lo })
        .collect()
}

/// Thresholds `field` at its own `quantile` into the two values `c_lo`,
/// `c_hi`.
pub fn threshold_binary(field: &[f64], quantile: f64, c_lo: f64, c_hi: f64) -> Result<Vec<f64>> {
    check_contrast(c_lo, c_hi)?;
    let level = quantile_level(field, quantile)?;
    let out = binary_at_level(field, level, c_lo, c_hi);
    if out.iter().all(|&v| v == c_hi) {
        return Err(Error::InvalidInput(format!(
            "quantile {quantile} puts every value above the threshold"
        )));
    }
    Ok(out)
}

/// `3t² − 2t³` on `[0, 1]`.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Multiplicative mask that is 0 on the boundary and 1 beyond distance `d0`.
pub fn taper_mask(distance: &[f64], d0: f64) -> Vec<f64> {
    assert!(d0 > 0.0, "taper width must be positive");
    distance.iter().map(|&d| smoothstep((d / d0).min(1.0))).collect()
}

pub fn taper_initial(field: &[f64], distance: &[f64], d0: f64) -> Vec<f64> {
    assert_eq!(field.len(), distance.len(), "field and distance lengths differ");
    field
        .iter()
        .zip(taper_mask(distance, d0))
        .map(|(f, s)| f * s)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub u_grf: GrfSpec,
    pub c_grf: GrfSpec,
    pub quantile: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    pub taper_width: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            u_grf: GrfSpec {
                n: 64,
                length_scale: 0.2,
                amplitude: 1.0,
                seed: 0,
            },
            c_grf: GrfSpec {
                n: 64,
                length_scale: 0.25,
                amplitude: 1.0,
                seed: 0,
            },
            quantile: 0.5,
            c_lo: 0.5,
            c_hi: 1.0,
            taper_width: 0.1,
        }
    }
}

/// Mesh-independent description of one random sample. Evaluating it on two
/// meshes of the same domain gives consistent fields.
#[derive(Clone, Debug)]
pub struct ParamFields {
    /// Initial-state field scaled to `[0, 1]`, before tapering.
    pub u_grid: Grid,
    pub c_grid: Grid,
    /// Grid quantile that separates `c_lo` from `c_hi`.
    pub c_level: f64,
    pub config: SampleConfig,
}

/// A sample evaluated on a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Tapered initial state; zero on boundary nodes.
    pub u_init: Vec<f64>,
    /// Untapered initial state in `[0, 1]`.
    pub u_raw: Vec<f64>,
    pub c: Vec<f64>,
}

impl ParamFields {
    pub fn generate(config: &SampleConfig, seed: u64) -> Result<Self> {
        check_contrast(config.c_lo, config.c_hi)?;
        let u_spec = GrfSpec {
            seed: seed::derive(seed, "u_init"),
            ..config.u_grf
        };
        let c_spec = GrfSpec {
            seed: seed::derive(seed, "velocity"),
            ..config.c_grf
        };
        let u_grid = sample_grf(&u_spec)?.normalized_unit();
        let c_grid = sample_grf(&c_spec)?;
        let c_level = quantile_level(&c_grid.data, config.quantile)?;
        Ok(Self {
            u_grid,
            c_grid,
            c_level,
            config: *config,
        })
    }

    pub fn velocity_on(&self, mesh: &Mesh) -> Vec<f64> {
        binary_at_level(&self.c_grid.on_mesh(mesh), self.c_level, self.config.c_lo, self.config.c_hi)
    }

    pub fn on_mesh(&self, mesh: &Mesh) -> Result<Sample> {
        let u_raw = self.u_grid.on_mesh(mesh);
        let distance = boundary_distance(mesh)?;
        let u_init = taper_initial(&u_raw, &distance, self.config.taper_width);
        Ok(Sample {
            u_init,
            u_raw,
            c: self.velocity_on(mesh),
        })
    }
}

/// Draws a sample and evaluates it on `mesh`.
pub fn make_sample(mesh: &Mesh, config: &SampleConfig, seed: u64) -> Result<Sample> {
    ParamFields::generate(config, seed)?.on_mesh(mesh)
}
