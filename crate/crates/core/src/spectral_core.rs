//! Periodic pseudo-spectral foundation.
//!
//! A [`Grid`] samples the torus of period `L = 2π·2^{K_L}` at `N` points. A
//! [`Field`] carries its samples together with the spectral coefficients
//! `f̂_j = (1/N) Σ_x f(x) e^{-iξ_j x}`, so that `f(x) = Σ_j f̂_j e^{iξ_j x}` and the
//! coefficient of a product is the plain convolution of coefficients.
//!
//! Littlewood-Paley cutoffs use the C¹ taper `θ(s) = 1` on `[0,1]`,
//! `cos²(π(s-1)/2)` on `[1,2]` and `0` beyond. With `χ_{≤a}(ξ) = θ(|ξ|/2^a)`
//! for real `a`, the dyadic block is `χ_k = χ_{≤k} - χ_{≤k-1}`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("grid size {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("grid size {0} is below the minimum of 8")]
    TooSmall(usize),
    #[error("multiplier is not finite at frequency {0}")]
    NonFiniteMultiplier(f64),
    #[error("frequency block reaching {needed} exceeds the Nyquist frequency {nyquist}")]
    Unresolvable { needed: f64, nyquist: f64 },
    #[error("input has nonzero mean {mean:e} (norm {norm:e})")]
    NonzeroMean { mean: f64, norm: f64 },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Uniform periodic grid with cached FFT plans.
#[derive(Clone)]
pub struct Grid {
    k_l: i32,
    n: usize,
    length: f64,
    dx: f64,
    freqs: Arc<[f64]>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("k_l", &self.k_l)
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.k_l == other.k_l && self.n == other.n
    }
}

/// Build the grid of period `2π·2^{K_L}` with `n` points.
pub fn make_grid(k_l: i32, n: usize) -> Result<Grid> {
    Grid::new(k_l, n)
}

impl Grid {
    pub fn new(k_l: i32, n: usize) -> Result<Self> {
        if n < 8 {
            return Err(SpectralError::TooSmall(n));
        }
        if !n.is_power_of_two() {
            return Err(SpectralError::NotPowerOfTwo(n));
        }
        let length = 2.0 * PI * 2f64.powi(k_l);
        let dk = 2.0 * PI / length;
        let freqs: Arc<[f64]> = (0..n)
            .map(|j| {
                let m = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
                m * dk
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            k_l,
            n,
            length,
            dx: length / n as f64,
            freqs,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn k_l(&self) -> i32 {
        self.k_l
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    /// Frequency spacing `2π/L`.
    pub fn dk(&self) -> f64 {
        2.0 * PI / self.length
    }
    /// Frequencies in FFT order; index `N/2` carries the Nyquist value `-N/2·2π/L`.
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
    pub fn nyquist(&self) -> f64 {
        self.n as f64 / 2.0 * self.dk()
    }
    pub fn nyquist_index(&self) -> usize {
        self.n / 2
    }
    /// Integer wavenumber `m` with `ξ = m·2π/L` for FFT slot `j`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }
    /// FFT slot of integer wavenumber `m`, if it lies in `[-N/2, N/2)`.
    pub fn slot(&self, m: i64) -> Option<usize> {
        let half = (self.n / 2) as i64;
        if m < -half || m >= half {
            None
        } else if m >= 0 {
            Some(m as usize)
        } else {
            Some((m + self.n as i64) as usize)
        }
    }
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }
    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }
    /// Largest `|ξ|` kept by the 2/3 rule.
    pub fn dealias_cutoff(&self) -> f64 {
        2.0 / 3.0 * self.nyquist()
    }

    /// Spectral coefficients of physical samples.
    pub fn forward(&self, values: &[C64]) -> Vec<C64> {
        let mut buf = values.to_vec();
        self.fwd.process(&mut buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= s);
        buf
    }

    /// Physical samples of spectral coefficients.
    pub fn inverse(&self, spectrum: &[C64]) -> Vec<C64> {
        let mut buf = spectrum.to_vec();
        self.inv.process(&mut buf);
        buf
    }

    pub(crate) fn forward_in_place(&self, buf: &mut [C64]) {
        self.fwd.process(buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= s);
    }

    pub(crate) fn inverse_in_place(&self, buf: &mut [C64]) {
        self.inv.process(buf);
    }

    /// Torus distance between two positions.
    pub fn torus_distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(self.length);
        d.min(self.length - d)
    }
}

/// Sampled function on a [`Grid`] with its spectral coefficients.
#[derive(Clone, Debug)]
pub struct Field {
    grid: Grid,
    values: Vec<C64>,
    spectrum: Vec<C64>,
    real: bool,
}

impl Field {
    pub fn from_real(grid: &Grid, samples: &[f64]) -> Result<Self> {
        check_len(grid, samples.len())?;
        let values: Vec<C64> = samples.iter().map(|&v| C64::new(v, 0.0)).collect();
        let spectrum = grid.forward(&values);
        Ok(Self { grid: grid.clone(), values, spectrum, real: true })
    }

    pub fn from_complex(grid: &Grid, samples: Vec<C64>) -> Result<Self> {
        check_len(grid, samples.len())?;
        let spectrum = grid.forward(&samples);
        Ok(Self { grid: grid.clone(), values: samples, spectrum, real: false })
    }

    /// Build from spectral coefficients; `real` requests the real part of the samples.
    pub fn from_spectrum(grid: &Grid, spectrum: Vec<C64>, real: bool) -> Result<Self> {
        check_len(grid, spectrum.len())?;
        let mut values = grid.inverse(&spectrum);
        let spectrum = if real {
            values.iter_mut().for_each(|v| v.im = 0.0);
            grid.forward(&values)
        } else {
            spectrum
        };
        Ok(Self { grid: grid.clone(), values, spectrum, real })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64) -> f64) -> Self {
        let samples: Vec<f64> = grid.points().into_iter().map(f).collect();
        Self::from_real(grid, &samples).expect("length matches grid")
    }

    pub fn from_complex_fn(grid: &Grid, f: impl Fn(f64) -> C64) -> Self {
        let samples: Vec<C64> = grid.points().into_iter().map(f).collect();
        Self::from_complex(grid, samples).expect("length matches grid")
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![C64::new(0.0, 0.0); grid.n()],
            spectrum: vec![C64::new(0.0, 0.0); grid.n()],
            real: true,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn values(&self) -> &[C64] {
        &self.values
    }
    pub fn spectrum(&self) -> &[C64] {
        &self.spectrum
    }
    pub fn is_real(&self) -> bool {
        self.real
    }
    pub fn real_values(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }

    /// `√(Σ|f|² dx)`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.grid.dx()).sqrt()
    }
    /// `√(L Σ|f̂|²)`, equal to [`Field::l2_norm`] by Parseval.
    pub fn l2_norm_spectral(&self) -> f64 {
        (self.spectrum.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.grid.length()).sqrt()
    }
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|c| c.norm()).sum::<f64>() * self.grid.dx()
    }
    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.sup_norm();
        }
        (self.values.iter().map(|c| c.norm().powf(p)).sum::<f64>() * self.grid.dx()).powf(1.0 / p)
    }
    /// Mean value `f̂_0`.
    pub fn mean(&self) -> C64 {
        self.spectrum[0]
    }
    /// `‖f‖_{H^s}` with weight `⟨ξ⟩^s`.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        let sum: f64 = self
            .spectrum
            .iter()
            .zip(self.grid.freqs())
            .map(|(c, &xi)| (1.0 + xi * xi).powf(s) * c.norm_sqr())
            .sum();
        (sum * self.grid.length()).sqrt()
    }
    /// `⟨f, g⟩ = Σ f conj(g) dx`.
    pub fn inner(&self, other: &Field) -> C64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b.conj()).sum::<C64>() * self.grid.dx()
    }

    fn combine(&self, other: &Field, op: impl Fn(C64, C64) -> C64) -> Result<Field> {
        if self.grid != other.grid {
            return Err(SpectralError::GridMismatch);
        }
        let spectrum: Vec<C64> = self.spectrum.iter().zip(&other.spectrum).map(|(&a, &b)| op(a, b)).collect();
        let values: Vec<C64> = self.values.iter().zip(&other.values).map(|(&a, &b)| op(a, b)).collect();
        Ok(Field { grid: self.grid.clone(), values, spectrum, real: self.real && other.real })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.combine(other, |a, b| a + b)
    }
    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.combine(other, |a, b| a - b)
    }
    pub fn scale(&self, s: f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|c| c * s).collect(),
            spectrum: self.spectrum.iter().map(|c| c * s).collect(),
            real: self.real,
        }
    }
    pub fn scale_complex(&self, s: C64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|c| c * s).collect(),
            spectrum: self.spectrum.iter().map(|c| c * s).collect(),
            real: self.real && s.im == 0.0,
        }
    }
    /// Pointwise product in physical space (aliased; see [`dealias`]).
    pub fn mul(&self, other: &Field) -> Result<Field> {
        if self.grid != other.grid {
            return Err(SpectralError::GridMismatch);
        }
        let values: Vec<C64> = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        let real = self.real && other.real;
        let mut f = Field::from_complex(&self.grid, values)?;
        f.real = real;
        Ok(f)
    }
    pub fn conj(&self) -> Field {
        Field::from_complex(&self.grid, self.values.iter().map(|c| c.conj()).collect()).expect("same grid")
    }
    /// Real part as a real field.
    pub fn re(&self) -> Field {
        Field::from_real(&self.grid, &self.real_values()).expect("same grid")
    }
    /// Largest spectral magnitude outside the frequency set where `keep` holds.
    pub fn spectral_tail(&self, keep: impl Fn(f64) -> bool) -> f64 {
        self.spectrum
            .iter()
            .zip(self.grid.freqs())
            .filter(|(_, &xi)| !keep(xi))
            .map(|(c, _)| c.norm())
            .fold(0.0, f64::max)
    }
    /// Maximum pointwise distance to another field on the same grid.
    pub fn max_diff(&self, other: &Field) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

fn check_len(grid: &Grid, len: usize) -> Result<()> {
    if len != grid.n() {
        Err(SpectralError::LengthMismatch { expected: grid.n(), got: len })
    } else {
        Ok(())
    }
}

/// Apply a Fourier multiplier. The Nyquist slot, which stands for both `±ξ_N`,
/// receives the even part `(m(ξ_N) + m(-ξ_N))/2` so that odd symbols annihilate it.
pub fn apply_multiplier(f: &Field, m: impl Fn(f64) -> C64) -> Result<Field> {
    let grid = f.grid();
    let ny = grid.nyquist_index();
    let mut spec = Vec::with_capacity(grid.n());
    for (j, (&c, &xi)) in f.spectrum().iter().zip(grid.freqs()).enumerate() {
        let w = if j == ny { 0.5 * (m(xi) + m(-xi)) } else { m(xi) };
        if !(w.re.is_finite() && w.im.is_finite()) {
            return Err(SpectralError::NonFiniteMultiplier(xi));
        }
        spec.push(c * w);
    }
    let real = f.is_real() && hermitian(grid, &m);
    Field::from_spectrum(grid, spec, real)
}

/// Real-valued multiplier shortcut.
pub fn apply_real_multiplier(f: &Field, m: impl Fn(f64) -> f64) -> Result<Field> {
    apply_multiplier(f, |xi| C64::new(m(xi), 0.0))
}

fn hermitian(grid: &Grid, m: &impl Fn(f64) -> C64) -> bool {
    grid.freqs().iter().take(grid.n() / 2).all(|&xi| {
        let d = m(-xi) - m(xi).conj();
        d.norm() <= 1e-12 * (1.0 + m(xi).norm())
    })
}

/// `|ξ|^α`, zero at the origin for every `α`.
pub fn abs_pow(xi: f64, alpha: f64) -> f64 {
    if xi == 0.0 {
        0.0
    } else {
        xi.abs().powf(alpha)
    }
}

/// `|D|^α ∂_x f`, the multiplier `iξ|ξ|^α`.
pub fn dispersive_multiplier(f: &Field, alpha: f64) -> Result<Field> {
    apply_multiplier(f, |xi| C64::new(0.0, xi * abs_pow(xi, alpha)))
}

/// Spectral derivative `∂_x f`.
pub fn derivative(f: &Field) -> Result<Field> {
    apply_multiplier(f, |xi| C64::new(0.0, xi))
}

/// Taper profile of the dyadic partition.
pub fn taper(s: f64) -> f64 {
    if s <= 1.0 {
        1.0
    } else if s >= 2.0 {
        0.0
    } else {
        let c = (0.5 * PI * (s - 1.0)).cos();
        c * c
    }
}

/// `χ_{≤a}(ξ) = θ(|ξ|/2^a)` for real `a`.
pub fn chi_le(a: f64, xi: f64) -> f64 {
    taper(xi.abs() / 2f64.powf(a))
}

/// Dyadic block `χ_k = χ_{≤k} - χ_{≤k-1}`.
pub fn chi_block(k: i32, xi: f64) -> f64 {
    chi_le(k as f64, xi) - chi_le(k as f64 - 1.0, xi)
}

/// Littlewood-Paley projections used by the laboratory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    /// `P_k`, multiplier `χ_k`.
    Block(i32),
    /// `P_k^+`, multiplier `χ_k·1_{ξ≥0}`.
    BlockPos(i32),
    /// `P_k^-`, multiplier `χ_k·1_{ξ<0}`.
    BlockNeg(i32),
    /// `P_{<k} = χ_{≤k-1}`.
    Below(i32),
    /// `P_{≥k} = 1 - χ_{≤k-1}`.
    AtLeast(i32),
    /// `P_{≤a} = χ_{≤a}` with real `a`.
    AtMost(f64),
    /// `P_{(a,b)} = χ_{≤b-1} - χ_{≤a}`: the band between the real edge `2^a` and `2^b`.
    Band(f64, f64),
}

impl Projection {
    pub fn symbol(&self, xi: f64) -> f64 {
        match *self {
            Projection::Block(k) => chi_block(k, xi),
            Projection::BlockPos(k) => {
                if xi >= 0.0 {
                    chi_block(k, xi)
                } else {
                    0.0
                }
            }
            Projection::BlockNeg(k) => {
                if xi < 0.0 {
                    chi_block(k, xi)
                } else {
                    0.0
                }
            }
            Projection::Below(k) => chi_le(k as f64 - 1.0, xi),
            Projection::AtLeast(k) => 1.0 - chi_le(k as f64 - 1.0, xi),
            Projection::AtMost(a) => chi_le(a, xi),
            Projection::Band(a, b) => (chi_le(b - 1.0, xi) - chi_le(a, xi)).max(0.0),
        }
    }

    /// Largest `|ξ|` where the multiplier differs from its value at infinity.
    fn reach(&self) -> f64 {
        match *self {
            Projection::Block(k) | Projection::BlockPos(k) | Projection::BlockNeg(k) => 2f64.powi(k + 1),
            Projection::Below(k) | Projection::AtLeast(k) => 2f64.powi(k),
            Projection::AtMost(a) => 2f64.powf(a + 1.0),
            Projection::Band(_, b) => 2f64.powf(b),
        }
    }

    pub fn check_resolvable(&self, grid: &Grid) -> Result<()> {
        let needed = self.reach();
        if needed > grid.nyquist() {
            Err(SpectralError::Unresolvable { needed, nyquist: grid.nyquist() })
        } else {
            Ok(())
        }
    }
}

/// Apply a Littlewood-Paley projection.
pub fn lp_project(f: &Field, proj: Projection) -> Result<Field> {
    proj.check_resolvable(f.grid())?;
    apply_real_multiplier(f, |xi| proj.symbol(xi))
}

/// Mean-zero antiderivative: division by `iξ` on every nonzero mode.
pub fn band_antiderivative(f: &Field) -> Result<Field> {
    let mean = f.mean().norm();
    let norm = f.l2_norm() / f.grid().length().sqrt();
    if mean > 1e-10 * norm.max(f64::MIN_POSITIVE) && mean > 0.0 {
        return Err(SpectralError::NonzeroMean { mean, norm });
    }
    apply_multiplier(f, |xi| if xi == 0.0 { C64::new(0.0, 0.0) } else { C64::new(0.0, -1.0 / xi) })
}

/// `(T_y f)(x) = f(x + y)`.
pub fn translate(f: &Field, y: f64) -> Result<Field> {
    apply_multiplier(f, |xi| C64::from_polar(1.0, xi * y))
}

/// Zero every mode with `|ξ|` above two thirds of the Nyquist frequency.
pub fn dealias(f: &Field) -> Field {
    let cut = f.grid().dealias_cutoff();
    let spec: Vec<C64> = f
        .spectrum()
        .iter()
        .zip(f.grid().freqs())
        .map(|(&c, &xi)| if xi.abs() > cut { C64::new(0.0, 0.0) } else { c })
        .collect();
    Field::from_spectrum(f.grid(), spec, f.is_real()).expect("same grid")
}

/// Dealiasing mask applied directly to a coefficient buffer.
pub(crate) fn dealias_in_place(grid: &Grid, spec: &mut [C64]) {
    let cut = grid.dealias_cutoff();
    for (c, &xi) in spec.iter_mut().zip(grid.freqs()) {
        if xi.abs() > cut {
            *c = C64::new(0.0, 0.0);
        }
    }
}
