//! Exponential conjugation `e^{iA}` with band symbol
//! `a(y, ξ) = (1+α)^{-1} Φ_band(y) ξ|ξ|^{-α}`, where `Φ_band` is the mean-zero
//! antiderivative of `P_{(k',k)}φ` and `k' = (1-α)k/2`.
//!
//! The operator is right-quantized: the symbol is evaluated at the input point
//! `y` and at the output frequency `ξ`, which ranges over the grid frequencies in
//! the support of `P_k`.

use rayon::prelude::*;
use thiserror::Error;

use crate::spectral_core::{
    band_antiderivative, chi_block, lp_project, Field, Grid, Projection, SpectralError, C64,
};

#[derive(Debug, Error)]
pub enum GaugeError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("input is not localized to the block: spectral tail {tail:e}")]
    NotBandLimited { tail: f64 },
    #[error("dense kernel requested for N = {0} > 4096")]
    KernelTooLarge(usize),
}

pub type Result<T> = std::result::Result<T, GaugeError>;

/// Largest grid for which [`gauge_kernel`] builds the dense matrix.
pub const MAX_KERNEL_N: usize = 4096;

/// The band-limited right-quantized operator `e^{iA_{(k',k)}}`.
#[derive(Clone, Debug)]
pub struct GaugeOperator {
    pub alpha: f64,
    pub k: i32,
    pub k_prime: f64,
    /// Mean-zero antiderivative of the band `P_{(k',k)}φ`.
    pub phi_band: Field,
    /// FFT slots in the support of `P_k`.
    band: Vec<usize>,
}

/// `ξ|ξ|^{-α}`, set to zero at the origin.
pub fn signed_weight(xi: f64, alpha: f64) -> f64 {
    if xi == 0.0 {
        0.0
    } else {
        xi * xi.abs().powf(-alpha)
    }
}

fn block_slots(grid: &Grid, k: i32) -> Vec<usize> {
    grid.freqs().iter().enumerate().filter(|(_, &xi)| chi_block(k, xi) > 0.0).map(|(j, _)| j).collect()
}

/// Build the gauge from `φ` at block `k`.
pub fn build_gauge(phi: &Field, alpha: f64, k: i32) -> Result<GaugeOperator> {
    let k_prime = 0.5 * (1.0 - alpha) * k as f64;
    let band_proj = Projection::Band(k_prime, k as f64);
    Projection::Block(k).check_resolvable(phi.grid())?;
    let band = lp_project(&phi.re(), band_proj)?;
    let phi_band = band_antiderivative(&band)?;
    Ok(GaugeOperator { alpha, k, k_prime, phi_band, band: block_slots(phi.grid(), k) })
}

impl GaugeOperator {
    /// Operator with a prescribed `Φ` (used for synthetic and diagonal checks).
    pub fn with_potential(phi_band: Field, alpha: f64, k: i32) -> Result<Self> {
        Projection::Block(k).check_resolvable(phi_band.grid())?;
        let band = block_slots(phi_band.grid(), k);
        Ok(Self { alpha, k, k_prime: 0.5 * (1.0 - alpha) * k as f64, phi_band, band })
    }

    pub fn grid(&self) -> &Grid {
        self.phi_band.grid()
    }

    /// Symbol value `a(y_i, ξ)` at grid point `i`.
    pub fn symbol(&self, i: usize, xi: f64) -> f64 {
        self.phi_band.values()[i].re * signed_weight(xi, self.alpha) / (1.0 + self.alpha)
    }

    /// Output frequencies of the operator.
    pub fn band_slots(&self) -> &[usize] {
        &self.band
    }

    /// Row of quadrature weights `(1/N) e^{-iyξ} e^{ia(y,ξ)}` for one output slot.
    fn weights(&self, slot: usize) -> Vec<C64> {
        let grid = self.grid();
        let xi = grid.freqs()[slot];
        let n = grid.n() as f64;
        (0..grid.n())
            .map(|i| {
                let phase = -grid.x(i) * xi + self.symbol(i, xi);
                C64::from_polar(1.0 / n, phase)
            })
            .collect()
    }

    /// Apply without the localization precondition; the output keeps only the
    /// frequencies of `P_k`.
    pub(crate) fn apply_unchecked(&self, f: &Field) -> Field {
        let grid = self.grid();
        let coeffs: Vec<(usize, C64)> = self
            .band
            .par_iter()
            .map(|&slot| {
                let w = self.weights(slot);
                let c: C64 = w.iter().zip(f.values()).map(|(w, v)| w * v).sum();
                (slot, c)
            })
            .collect();
        let mut spec = vec![C64::new(0.0, 0.0); grid.n()];
        for (slot, c) in coeffs {
            spec[slot] = c;
        }
        Field::from_spectrum(grid, spec, false).expect("grid matches")
    }
}

/// `(e^{iA}f)(x) = Σ_{ξ ∈ supp P_k} e^{ixξ} (1/N) Σ_y e^{-iyξ} e^{ia(y,ξ)} f(y)` for `f = P_k f`.
pub fn apply_exp_gauge(g: &GaugeOperator, f: &Field) -> Result<Field> {
    let k = g.k;
    let scale = f.spectrum().iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tail = f.spectral_tail(|xi| chi_block(k, xi) > 0.0) / scale;
    if tail > 1e-8 {
        return Err(GaugeError::NotBandLimited { tail });
    }
    Ok(g.apply_unchecked(f))
}

/// Dense kernel `K(x_i, y_j)` with `e^{iA}f = K·f` (the `dx` weight is folded in).
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub n: usize,
    pub dx: f64,
    pub length: f64,
    /// Row-major `K[i * n + j]`.
    pub data: Vec<C64>,
    pub band_size: usize,
}

impl KernelMatrix {
    pub fn apply(&self, f: &Field) -> Vec<C64> {
        (0..self.n)
            .into_par_iter()
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().zip(f.values()).map(|(k, v)| k * v).sum())
            .collect()
    }

    /// `sup ⟨d(x,y)⟩² |K_c(x,y)| · 2π/|band|` with `K_c = K/dx` the continuum kernel
    /// and `d` the torus distance.
    pub fn decay_statistic(&self) -> f64 {
        let n = self.n;
        let norm = 2.0 * std::f64::consts::PI / self.band_size as f64 / self.dx;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = 0.0f64;
                for j in 0..n {
                    let d = torus_gap(i, j, n) as f64 * self.dx;
                    let w = 1.0 + d * d;
                    best = best.max(w * self.data[i * n + j].norm());
                }
                best
            })
            .reduce(|| 0.0, f64::max)
            * norm
    }

    /// Kernel dump rows `(x, y, Re K, Im K)`.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        (0..self.n * self.n).map(move |idx| {
            let (i, j) = (idx / self.n, idx % self.n);
            let k = self.data[idx];
            (i as f64 * self.dx, j as f64 * self.dx, k.re, k.im)
        })
    }
}

fn torus_gap(i: usize, j: usize, n: usize) -> usize {
    let d = i.abs_diff(j);
    d.min(n - d)
}

/// Dense kernel of the gauge operator, one column per input point.
pub fn gauge_kernel(g: &GaugeOperator) -> Result<KernelMatrix> {
    let grid = g.grid();
    let n = grid.n();
    if n > MAX_KERNEL_N {
        return Err(GaugeError::KernelTooLarge(n));
    }
    let columns: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let y = grid.x(j);
            let mut spec = vec![C64::new(0.0, 0.0); n];
            for &slot in &g.band {
                let xi = grid.freqs()[slot];
                spec[slot] = C64::from_polar(1.0 / n as f64, -y * xi + g.symbol(j, xi));
            }
            grid.inverse(&spec)
        })
        .collect();
    let mut data = vec![C64::new(0.0, 0.0); n * n];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * n + j] = *v;
        }
    }
    Ok(KernelMatrix { n, dx: grid.dx(), length: grid.length(), data, band_size: g.band.len() })
}

/// `P_k^+ e^{iA} (P_k^+ input)` with the gauge built from `background`.
///
/// With `input = background` this is the conjugated variable of the nonlinear
/// flow; with a linearized perturbation it is the conjugated perturbation.
pub fn conjugated_variable(input: &Field, background: &Field, alpha: f64, k: i32) -> Result<Field> {
    let g = build_gauge(background, alpha, k)?;
    conjugate_with(&g, input)
}

/// Conjugated variable for a prebuilt gauge.
pub fn conjugate_with(g: &GaugeOperator, input: &Field) -> Result<Field> {
    let plus = lp_project(input, Projection::BlockPos(g.k))?;
    let out = apply_exp_gauge(g, &plus)?;
    Ok(lp_project(&out, Projection::BlockPos(g.k))?)
}
