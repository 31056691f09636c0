//! Resonance function, the quadratic symbols removed by the normal form, their
//! divided corrections, and the combined renormalized variables.
//!
//! Sign and scaling conventions follow the operators actually applied in this
//! crate (see [`SymbolId`]); every correction enters the renormalization through
//! a unimodular constant [`NF_CONSTANT`] that the residual test recovers from
//! data.

use rayon::prelude::*;
use thiserror::Error;

use crate::evolution::{gbo_solve, linear_propagate, linearized_solve, EvolutionConfig, EvolutionError};
use crate::gauge::{apply_exp_gauge, build_gauge, conjugate_with, signed_weight, GaugeError, GaugeOperator};
use crate::spectral_core::{
    abs_pow, apply_multiplier, derivative, dispersive_multiplier, lp_project, Field, Projection,
    SpectralError, C64,
};

#[derive(Debug, Error)]
pub enum NormalFormError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Gauge(#[from] GaugeError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("sample ({0}, {1}) lies within 1e-3 of a line where the resonance vanishes")]
    OnVanishingLine(f64, f64),
    #[error("{id:?}: numerator {numerator:e} at resonant pair ({xi1}, {xi2})")]
    GuardViolation { id: SymbolId, xi1: f64, xi2: f64, numerator: f64 },
    #[error("non-finite coefficient in bilinear sum")]
    Overflow,
    #[error("input carries energy above the dealiasing cutoff (relative tail {0:e})")]
    NotBandLimited(f64),
    #[error("time step {dt:e} too coarse: max |ω|·dt = {phase:.3} exceeds 0.2")]
    StepTooCoarse { dt: f64, phase: f64 },
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NormalFormError>;

/// Unimodular constant multiplying every correction: with `B̂ = Σ (m/Ω) û v̂`
/// one has `(∂_t - |D|^α∂_x) B = -i Q` on linear flows, so `i B` removes `Q`.
pub const NF_CONSTANT: C64 = C64::new(0.0, 1.0);

/// `|Ω|` below which the quotient is replaced by zero.
pub const OMEGA_GUARD: f64 = 1e-12;
/// Largest numerator tolerated where the quotient is guarded.
pub const NUMERATOR_GUARD: f64 = 1e-10;

/// Dispersion relation `ω(ξ) = -ξ|ξ|^α`.
pub fn omega(xi: f64, alpha: f64) -> f64 {
    -xi * abs_pow(xi, alpha)
}

/// `Ω(ξ1, ξ2) = ω(ξ1) + ω(ξ2) - ω(ξ1 + ξ2)`.
pub fn resonance(xi1: f64, xi2: f64, alpha: f64) -> f64 {
    omega(xi1, alpha) + omega(xi2, alpha) - omega(xi1 + xi2, alpha)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioStats {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// Extremes of `|Ω| / (|ξ_min| |ξ_max|^α)` over the sample.
pub fn resonance_equiv_check(alpha: f64, samples: &[(f64, f64)]) -> Result<RatioStats> {
    let mut stats = RatioStats { min: f64::INFINITY, max: 0.0, count: 0 };
    for &(a, b) in samples {
        let sizes = [a.abs(), b.abs(), (a + b).abs()];
        let lo = sizes.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sizes.iter().cloned().fold(0.0, f64::max);
        if lo < 1e-3 {
            return Err(NormalFormError::OnVanishingLine(a, b));
        }
        let r = resonance(a, b, alpha).abs() / (lo * hi.powf(alpha));
        stats.min = stats.min.min(r);
        stats.max = stats.max.max(r);
        stats.count += 1;
    }
    Ok(stats)
}

/// Pairs `(±2^i, ±2^j)`, `0 ≤ i, j ≤ max_exp`, excluding `ξ1 + ξ2 = 0`.
pub fn dyadic_sweep(max_exp: i32) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 0..=max_exp {
        for j in 0..=max_exp {
            for s1 in [1.0, -1.0] {
                for s2 in [1.0, -1.0] {
                    let (a, b) = (s1 * 2f64.powi(i), s2 * 2f64.powi(j));
                    if a + b != 0.0 {
                        out.push((a, b));
                    }
                }
            }
        }
    }
    out
}

/// Identifier of a quadratic symbol. `Paradifferential` is the commutator
/// `[P_k^+, u_{≤k'}]∂_x P_k^+ v` left over by the squared block projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SymbolId {
    Q2k,
    QexpI,
    QexpII,
    Qexph(f64),
    Qlin,
    Paradifferential,
}

/// Anything that can be summed against `û(ξ1) v̂(ξ2)`.
pub trait PairSymbol: Sync {
    fn eval(&self, xi1: f64, xi2: f64) -> C64;
    /// Closed interval of output frequencies outside which the symbol vanishes.
    fn output_support(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Adapter for closures.
pub struct FnSymbol<F>(pub F);

impl<F: Fn(f64, f64) -> C64 + Sync> PairSymbol for FnSymbol<F> {
    fn eval(&self, xi1: f64, xi2: f64) -> C64 {
        (self.0)(xi1, xi2)
    }
}

/// One of the quadratic symbols at block `k`.
///
/// With `ξ = ξ1 + ξ2`, `p = P̂_k^+`, `c_band = P̂_{(k',k)}`:
/// - `Q2k`: `p(ξ)P_{≥k}(ξ1)iξ2P_{<k}(ξ2) + ½iξ p(ξ)P_{≥k}(ξ1)P_{≥k}(ξ2) + [p(ξ) - p(ξ2)]P_{<k}(ξ1)iξ2`
/// - `QexpI`: `iξ1 c_band(ξ1) p(ξ2)`
/// - `QexpII`: `|ξ1|^α c_band(ξ1) p(ξ2)`
/// - `Qexph(h)`: `-ξ1ξ2 |(1-h)ξ1 + ξ2|^{α-2} c_band(ξ1) p(ξ2)`
/// - `Qlin`: `iξ2 P_{(0,k)}(ξ1) p(ξ2)`
/// - `Paradifferential`: `[p(ξ) - p(ξ2)] P_{≤k'}(ξ1) iξ2 p(ξ2)`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearSymbol {
    pub id: SymbolId,
    pub k: i32,
    pub alpha: f64,
    /// Multiply by `1{p(ξ) > 0}`. Every correction except the paradifferential
    /// one is composed with `P_k^+` on the output, so this changes nothing
    /// downstream while removing the numerator from the line `ξ = 0`.
    pub localized: bool,
}

impl BilinearSymbol {
    pub fn new(id: SymbolId, k: i32, alpha: f64) -> Self {
        Self { id, k, alpha, localized: false }
    }

    pub fn localized(mut self) -> Self {
        self.localized = true;
        self
    }

    pub fn k_prime(&self) -> f64 {
        0.5 * (1.0 - self.alpha) * self.k as f64
    }

    fn plus(&self, xi: f64) -> f64 {
        Projection::BlockPos(self.k).symbol(xi)
    }

    fn band(&self, xi: f64) -> f64 {
        Projection::Band(self.k_prime(), self.k as f64).symbol(xi)
    }

    fn raw(&self, xi1: f64, xi2: f64) -> C64 {
        let k = self.k;
        let xi = xi1 + xi2;
        let i = C64::new(0.0, 1.0);
        let below = |x: f64| Projection::Below(k).symbol(x);
        let above = |x: f64| Projection::AtLeast(k).symbol(x);
        match self.id {
            SymbolId::Q2k => {
                let pxi = self.plus(xi);
                let commutator = if self.localized && pxi == 0.0 { 0.0 } else { pxi - self.plus(xi2) };
                i * (pxi * above(xi1) * xi2 * below(xi2)
                    + 0.5 * xi * pxi * above(xi1) * above(xi2)
                    + commutator * below(xi1) * xi2)
            }
            SymbolId::QexpI => i * xi1 * self.band(xi1) * self.plus(xi2),
            SymbolId::QexpII => C64::from(abs_pow(xi1, self.alpha) * self.band(xi1) * self.plus(xi2)),
            SymbolId::Qexph(h) => {
                let w = self.band(xi1) * self.plus(xi2);
                if w == 0.0 {
                    return C64::new(0.0, 0.0);
                }
                let base = ((1.0 - h) * xi1 + xi2).abs();
                C64::from(-xi1 * xi2 * base.powf(self.alpha - 2.0) * w)
            }
            SymbolId::Qlin => {
                let lin = Projection::Band(0.0, k as f64).symbol(xi1);
                i * xi2 * lin * self.plus(xi2)
            }
            SymbolId::Paradifferential => {
                let low = Projection::AtMost(self.k_prime()).symbol(xi1);
                let p2 = self.plus(xi2);
                i * (self.plus(xi) - p2) * low * xi2 * p2
            }
        }
    }
}

impl PairSymbol for BilinearSymbol {
    fn eval(&self, xi1: f64, xi2: f64) -> C64 {
        let gate = match self.id {
            SymbolId::Q2k | SymbolId::Paradifferential => true,
            _ => !self.localized || self.plus(xi1 + xi2) > 0.0,
        };
        if gate {
            self.raw(xi1, xi2)
        } else {
            C64::new(0.0, 0.0)
        }
    }

    fn output_support(&self) -> Option<(f64, f64)> {
        let lo = 2f64.powi(self.k - 1);
        let hi = 2f64.powi(self.k + 1);
        match self.id {
            SymbolId::Paradifferential => None,
            SymbolId::Q2k if !self.localized => None,
            _ if self.localized || self.id == SymbolId::Q2k => Some((lo, hi)),
            _ => None,
        }
    }
}

/// `m/Ω` with the resonance guard.
#[derive(Clone, Copy, Debug)]
pub struct NormalFormCorrection {
    pub symbol: BilinearSymbol,
}

impl NormalFormCorrection {
    /// Build the correction from the localized numerator and verify the guard over
    /// every pair of grid frequencies.
    pub fn new(id: SymbolId, k: i32, alpha: f64, grid: &crate::Grid) -> Result<Self> {
        let symbol = BilinearSymbol::new(id, k, alpha).localized();
        guard_scan(&symbol, grid)?;
        Ok(Self { symbol })
    }

    /// The numerator symbol `m`.
    pub fn numerator(&self) -> &BilinearSymbol {
        &self.symbol
    }
}

/// Check that `|m| < 1e-10` wherever `|Ω| < 1e-12` on the grid product set.
pub fn guard_scan(symbol: &BilinearSymbol, grid: &crate::Grid) -> Result<()> {
    let freqs = grid.freqs();
    let alpha = symbol.alpha;
    let bad = freqs.par_iter().find_map_first(|&a| {
        freqs.iter().find_map(|&b| {
            if resonance(a, b, alpha).abs() < OMEGA_GUARD {
                let m = symbol.eval(a, b).norm();
                if m >= NUMERATOR_GUARD {
                    return Some((a, b, m));
                }
            }
            None
        })
    });
    match bad {
        Some((xi1, xi2, numerator)) => Err(NormalFormError::GuardViolation { id: symbol.id, xi1, xi2, numerator }),
        None => Ok(()),
    }
}

impl PairSymbol for NormalFormCorrection {
    fn eval(&self, xi1: f64, xi2: f64) -> C64 {
        let om = resonance(xi1, xi2, self.symbol.alpha);
        if om.abs() < OMEGA_GUARD {
            C64::new(0.0, 0.0)
        } else {
            self.symbol.eval(xi1, xi2) / om
        }
    }

    fn output_support(&self) -> Option<(f64, f64)> {
        self.symbol.output_support()
    }
}

/// `(∂_t)` of a correction along linear flows: `(m/Ω)·(-i)(ω(ξ1) + ω(ξ2))`.
struct TimeDerivative<'a>(&'a NormalFormCorrection);

impl PairSymbol for TimeDerivative<'_> {
    fn eval(&self, xi1: f64, xi2: f64) -> C64 {
        let alpha = self.0.symbol.alpha;
        self.0.eval(xi1, xi2) * C64::new(0.0, -(omega(xi1, alpha) + omega(xi2, alpha)))
    }
    fn output_support(&self) -> Option<(f64, f64)> {
        self.0.output_support()
    }
}

/// Direct pseudo-product: output coefficient at `ξ` is
/// `Σ_{ξ1+ξ2=ξ} m(ξ1,ξ2) û(ξ1) v̂(ξ2)` over grid frequencies, keeping only sums
/// that stay inside the dealiasing cutoff (no wrap-around).
pub fn apply_bilinear(m: &dyn PairSymbol, u: &Field, v: &Field) -> Result<Field> {
    let grid = u.grid();
    if grid != v.grid() {
        return Err(SpectralError::GridMismatch.into());
    }
    let n = grid.n();
    let ny = grid.nyquist_index();
    let freqs = grid.freqs();
    let cut = grid.dealias_cutoff();
    let (lo, hi) = match m.output_support() {
        Some((lo, hi)) => (lo.min(cut), hi.min(cut)),
        None => (-cut, cut),
    };
    let dk = grid.dk();
    let out_lo = (lo / dk).ceil() as i64;
    let out_hi = (hi / dk).floor() as i64;
    let u_slots: Vec<usize> = (0..n).filter(|&j| j != ny && u.spectrum()[j] != C64::new(0.0, 0.0)).collect();
    let vs = v.spectrum();
    let us = u.spectrum();
    let entries: Vec<(usize, C64)> = (out_lo..=out_hi)
        .into_par_iter()
        .filter_map(|w| {
            let j = grid.slot(w)?;
            let mut sum = C64::new(0.0, 0.0);
            for &j1 in &u_slots {
                let Some(j2) = grid.slot(w - grid.wavenumber(j1)) else { continue };
                if j2 == ny || vs[j2] == C64::new(0.0, 0.0) {
                    continue;
                }
                sum += m.eval(freqs[j1], freqs[j2]) * us[j1] * vs[j2];
            }
            Some((j, sum))
        })
        .collect();
    let mut spec = vec![C64::new(0.0, 0.0); n];
    for (j, c) in entries {
        spec[j] = c;
    }
    if spec.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(NormalFormError::Overflow);
    }
    Ok(Field::from_spectrum(grid, spec, false)?)
}

fn masked(f: &Field) -> Field {
    crate::spectral_core::dealias(f)
}

/// `Q^2_k(u, v)` assembled from projections, products and derivatives.
pub fn q2k_apply(u: &Field, v: &Field, k: i32) -> Result<Field> {
    let plus = Projection::BlockPos(k);
    let u_hi = lp_project(u, Projection::AtLeast(k))?;
    let u_lo = lp_project(u, Projection::Below(k))?;
    let v_hi = lp_project(v, Projection::AtLeast(k))?;
    let v_lo = lp_project(v, Projection::Below(k))?;
    let first = lp_project(&masked(&u_hi.mul(&derivative(&v_lo)?)?), plus)?;
    let second = derivative(&lp_project(&masked(&u_hi.mul(&v_hi)?), plus)?)?.scale(0.5);
    let dv = derivative(v)?;
    let outer = lp_project(&masked(&u_lo.mul(&dv)?), plus)?;
    let inner = masked(&u_lo.mul(&derivative(&lp_project(v, plus)?)?)?);
    let third = outer.sub(&inner)?;
    Ok(first.add(&second)?.add(&third)?)
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            deriv = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / deriv;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

/// Corrections for one block, with the guard verified once.
#[derive(Clone, Debug)]
pub struct CorrectionSet {
    pub alpha: f64,
    pub k: i32,
    pub b2: NormalFormCorrection,
    pub exp_i: NormalFormCorrection,
    pub exp_ii: NormalFormCorrection,
    /// `(h, weight·(1-h), correction)` for the Gauss-Legendre nodes.
    pub exp_h: Vec<(f64, f64, NormalFormCorrection)>,
    pub lin: NormalFormCorrection,
    pub para: NormalFormCorrection,
}

impl CorrectionSet {
    pub fn new(alpha: f64, k: i32, grid: &crate::Grid) -> Result<Self> {
        Projection::Block(k).check_resolvable(grid)?;
        let mk = |id| NormalFormCorrection::new(id, k, alpha, grid);
        let exp_h = if alpha == 1.0 {
            Vec::new()
        } else {
            gauss_legendre_unit(8)
                .into_iter()
                .map(|(h, w)| Ok((h, w * (1.0 - h), mk(SymbolId::Qexph(h))?)))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            alpha,
            k,
            b2: mk(SymbolId::Q2k)?,
            exp_i: mk(SymbolId::QexpI)?,
            exp_ii: mk(SymbolId::QexpII)?,
            exp_h,
            lin: mk(SymbolId::Qlin)?,
            para: mk(SymbolId::Paradifferential)?,
        })
    }

    /// The gauge-generated part with `φ` in the low slot and `v` in the block slot.
    fn gauge_terms(&self, g: &GaugeOperator, phi: &Field, v: &Field) -> Result<Field> {
        let alpha = self.alpha;
        let c = 1.0 / (1.0 + alpha);
        let first = apply_exp_gauge(g, &apply_bilinear(&self.exp_i, phi, v)?)?.scale(-c);
        let dx_ii = derivative(&apply_bilinear(&self.exp_ii, phi, v)?)?;
        let second = apply_multiplier(&apply_exp_gauge(g, &dx_ii)?, |xi| C64::from(c * abs_pow(xi, -alpha)))?;
        let mut total = first.add(&second)?;
        if !self.exp_h.is_empty() {
            let mut integral = Field::zeros(phi.grid());
            for (_, w, corr) in &self.exp_h {
                integral = integral.add(&apply_bilinear(corr, phi, v)?.scale(*w))?;
            }
            let coef = alpha * (alpha - 1.0) / (1.0 + alpha);
            let conj = apply_exp_gauge(g, &integral)?;
            let third = apply_multiplier(&conj, |xi| C64::new(0.0, -coef * signed_weight(xi, alpha)))?;
            total = total.add(&third)?;
        }
        Ok(total)
    }

    /// Correction without the constant: `B_k(φ, φ) / NF_CONSTANT`.
    pub fn nonlinear_raw(&self, g: &GaugeOperator, phi: &Field) -> Result<Field> {
        let plus = Projection::BlockPos(self.k);
        let b2 = apply_exp_gauge(g, &apply_bilinear(&self.b2, phi, phi)?)?;
        let inner = b2.add(&self.gauge_terms(g, phi, phi)?)?;
        let para = apply_bilinear(&self.para, phi, phi)?;
        Ok(lp_project(&inner, plus)?.add(&para)?)
    }

    /// Linearized correction without the constant: `B_k^{lin}(φ, v) / NF_CONSTANT`.
    pub fn linearized_raw(&self, g: &GaugeOperator, phi: &Field, v: &Field) -> Result<Field> {
        let plus = Projection::BlockPos(self.k);
        let sum = apply_bilinear(&self.b2, phi, v)?
            .add(&apply_bilinear(&self.b2, v, phi)?)?
            .add(&apply_bilinear(&self.lin, v, phi)?)?;
        let inner = apply_exp_gauge(g, &sum)?.add(&self.gauge_terms(g, phi, v)?)?;
        let para = apply_bilinear(&self.para, phi, v)?;
        Ok(lp_project(&inner, plus)?.add(&para)?)
    }
}

/// Conjugated variable, its correction and the renormalized variable.
#[derive(Clone, Debug)]
pub struct Renormalized {
    pub conjugated: Field,
    /// `B_k` including the constant.
    pub correction: Field,
    pub renormalized: Field,
}

/// `ψ̃_k^+ = ψ_k^+ - B_k(φ, φ)` with the default constant.
pub fn renormalize_nonlinear(phi: &Field, alpha: f64, k: i32) -> Result<Renormalized> {
    let set = CorrectionSet::new(alpha, k, phi.grid())?;
    renormalize_nonlinear_with(&set, phi, NF_CONSTANT)
}

pub fn renormalize_nonlinear_with(set: &CorrectionSet, phi: &Field, constant: C64) -> Result<Renormalized> {
    let g = build_gauge(phi, set.alpha, set.k)?;
    let conjugated = conjugate_with(&g, phi)?;
    let correction = set.nonlinear_raw(&g, phi)?.scale_complex(constant);
    let renormalized = conjugated.sub(&correction)?;
    Ok(Renormalized { conjugated, correction, renormalized })
}

/// `w̃_k^+ = w_k^+ - B_k^{lin}(φ, v)` with the default constant.
pub fn renormalize_linearized(v: &Field, phi: &Field, alpha: f64, k: i32) -> Result<Renormalized> {
    let set = CorrectionSet::new(alpha, k, phi.grid())?;
    renormalize_linearized_with(&set, v, phi, NF_CONSTANT)
}

pub fn renormalize_linearized_with(set: &CorrectionSet, v: &Field, phi: &Field, constant: C64) -> Result<Renormalized> {
    let g = build_gauge(phi, set.alpha, set.k)?;
    let conjugated = conjugate_with(&g, v)?;
    let correction = set.linearized_raw(&g, phi, v)?.scale_complex(constant);
    let renormalized = conjugated.sub(&correction)?;
    Ok(Renormalized { conjugated, correction, renormalized })
}

#[derive(Clone, Copy, Debug)]
pub struct CancellationResidual {
    pub sup: f64,
    pub q_sup: f64,
}

impl CancellationResidual {
    pub fn relative(&self) -> f64 {
        if self.q_sup == 0.0 {
            self.sup
        } else {
            self.sup / self.q_sup
        }
    }
}

fn check_band_limited(f: &Field) -> Result<()> {
    let cut = f.grid().dealias_cutoff();
    let scale = f.spectrum().iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(());
    }
    let tail = f.spectral_tail(|xi| xi.abs() <= cut) / scale;
    if tail > 1e-12 {
        return Err(NormalFormError::NotBandLimited(tail));
    }
    Ok(())
}

/// Sup-norm of `(∂_t - |D|^α∂_x) B(u(t), v(t)) + i Q(u(t), v(t))` for `u, v`
/// evolved by the exact linear flow, with `∂_t` taken mode by mode.
pub fn nf_cancellation_check(u0: &Field, v0: &Field, t: f64, corr: &NormalFormCorrection) -> Result<CancellationResidual> {
    check_band_limited(u0)?;
    check_band_limited(v0)?;
    let alpha = corr.symbol.alpha;
    let u = linear_propagate(u0, alpha, t)?;
    let v = linear_propagate(v0, alpha, t)?;
    let b = apply_bilinear(corr, &u, &v)?;
    let db = apply_bilinear(&TimeDerivative(corr), &u, &v)?;
    let q = apply_bilinear(corr.numerator(), &u, &v)?;
    let lhs = db.sub(&dispersive_multiplier(&b, alpha)?)?;
    let res = lhs.add(&q.scale_complex(C64::new(0.0, 1.0)))?;
    Ok(CancellationResidual { sup: res.sup_norm(), q_sup: q.sup_norm() })
}

/// Residual `∂_t X - |D|^α∂_x X - φ_{≤k'}∂_x X` at the middle of five equally
/// spaced samples, with the time derivative taken on the profile `e^{-t|D|^α∂_x}X`
/// by the fourth-order centered stencil.
pub fn transport_residual(samples: &[Field; 5], times: &[f64; 5], phi_mid: &Field, alpha: f64, k: i32) -> Result<Field> {
    let dt = times[1] - times[0];
    let profiles: Vec<Field> =
        samples.iter().zip(times).map(|(s, &t)| linear_propagate(s, alpha, -t)).collect::<std::result::Result<_, _>>()?;
    let d = profiles[0]
        .sub(&profiles[1].scale(8.0))?
        .add(&profiles[3].scale(8.0))?
        .sub(&profiles[4])?
        .scale(1.0 / (12.0 * dt));
    let time_part = linear_propagate(&d, alpha, times[2])?;
    let k_prime = 0.5 * (1.0 - alpha) * k as f64;
    let low = lp_project(phi_mid, Projection::AtMost(k_prime))?;
    let transport = low.mul(&derivative(&samples[2])?)?;
    Ok(time_part.sub(&transport)?)
}

/// The quadratic term left in the linearized residual: `P_k^+ e^{iA}(v_{≤0} ∂_x φ_k^+)`.
pub fn retained_quadratic(v: &Field, phi: &Field, alpha: f64, k: i32) -> Result<Field> {
    let g = build_gauge(phi, alpha, k)?;
    let low = lp_project(v, Projection::AtMost(0.0))?;
    let high = derivative(&lp_project(phi, Projection::BlockPos(k))?)?;
    let conj = g.apply_unchecked(&low.mul(&high)?);
    Ok(lp_project(&conj, Projection::BlockPos(k))?)
}

/// Options of the cubic residual experiment.
#[derive(Clone, Debug)]
pub struct ResidualOptions {
    /// Spacing of the five samples; `None` picks `0.1 / (2^{k+1})^{1+α}`.
    pub spacing: Option<f64>,
    /// Largest phase `|ω|·dt` allowed at the dealiasing cutoff; the integrator
    /// substeps each sample spacing to respect it.
    pub integrator_phase: f64,
    pub constant: C64,
    /// Run the linearized variable with `v0 = ε·perturbation` instead.
    pub perturbation: Option<Field>,
    /// Switch off the nonlinear term and every correction.
    pub linear_only: bool,
    /// For the linearized variable, remove the uncorrected quadratic term
    /// `P_k^+ e^{iA}(v_{≤0} ∂_x φ_k^+)` from the residual.
    pub subtract_retained: bool,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self { spacing: None, integrator_phase: 0.5, constant: NF_CONSTANT, perturbation: None, linear_only: false, subtract_retained: false }
    }
}

#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub alpha: f64,
    pub k: i32,
    pub constant: C64,
    /// `(ε, ‖R‖_{L²})`.
    pub rows: Vec<(f64, f64)>,
    /// `log₂(‖R(ε_i)‖ / ‖R(ε_{i+1})‖)` for consecutive entries.
    pub exponents: Vec<f64>,
}

impl ScalingReport {
    pub fn mean_exponent(&self) -> f64 {
        self.exponents.iter().sum::<f64>() / self.exponents.len().max(1) as f64
    }
}

/// `‖R‖_{L²}` for one amplitude.
pub fn residual_norm(phi0: &Field, alpha: f64, k: i32, eps: f64, set: &CorrectionSet, opts: &ResidualOptions) -> Result<f64> {
    let top = 2f64.powi(k + 1);
    let top_rate = top * abs_pow(top, alpha);
    let dt = opts.spacing.unwrap_or(0.1 / top_rate);
    let phase = top_rate * dt;
    if phase > 0.2 {
        return Err(NormalFormError::StepTooCoarse { dt, phase });
    }
    let cut = phi0.grid().dealias_cutoff();
    let substeps = ((cut * abs_pow(cut, alpha) * dt) / opts.integrator_phase).ceil().max(1.0) as usize;
    let cfg = EvolutionConfig::new(alpha, dt / substeps as f64, 4.0 * dt).with_save_every(substeps);
    let start = phi0.scale(eps);
    let (phi_fields, times, dense) = if opts.linear_only {
        let times: Vec<f64> = (0..5).map(|i| i as f64 * dt).collect();
        let fields = times.iter().map(|&t| linear_propagate(&start, alpha, t)).collect::<std::result::Result<Vec<_>, _>>()?;
        (fields, times, None)
    } else if opts.perturbation.is_some() {
        // The linearized solver interpolates its background, so keep every step.
        let dense = gbo_solve(&start, &cfg.clone().with_save_every(1))?;
        let fields: Vec<Field> = dense.fields.iter().step_by(substeps).cloned().collect();
        let times: Vec<f64> = dense.times.iter().step_by(substeps).cloned().collect();
        (fields, times, Some(dense))
    } else {
        let traj = gbo_solve(&start, &cfg)?;
        (traj.fields, traj.times, None)
    };
    if phi_fields.len() != 5 {
        return Err(NormalFormError::Invalid(format!("expected 5 samples, got {}", phi_fields.len())));
    }
    let times: [f64; 5] = std::array::from_fn(|i| times[i]);
    let mut retained = None;
    let samples: Vec<Field> = match (&opts.perturbation, dense) {
        _ if opts.linear_only => phi_fields
            .iter()
            .map(|f| lp_project(&lp_project(f, Projection::BlockPos(k))?, Projection::BlockPos(k)))
            .collect::<std::result::Result<_, _>>()?,
        (Some(v0), Some(dense)) => {
            let v_traj = linearized_solve(&v0.scale(eps), &dense, &cfg)?;
            if opts.subtract_retained {
                retained = Some(retained_quadratic(&v_traj.fields[2], &phi_fields[2], alpha, k)?);
            }
            phi_fields
                .iter()
                .zip(&v_traj.fields)
                .map(|(f, v)| renormalize_linearized_with(set, v, f, opts.constant).map(|r| r.renormalized))
                .collect::<Result<_>>()?
        }
        _ => phi_fields
            .iter()
            .map(|f| renormalize_nonlinear_with(set, f, opts.constant).map(|r| r.renormalized))
            .collect::<Result<_>>()?,
    };
    let samples: [Field; 5] = samples.try_into().map_err(|_| NormalFormError::Invalid("sample count".into()))?;
    let background = if opts.linear_only { Field::zeros(phi0.grid()) } else { phi_fields[2].clone() };
    let mut r = transport_residual(&samples, &times, &background, alpha, k)?;
    if let Some(q) = retained {
        r = r.sub(&q)?;
    }
    Ok(r.l2_norm())
}

/// Residual norms for each amplitude and the consecutive halving exponents.
pub fn residual_scaling_test(phi0: &Field, alpha: f64, k: i32, eps: &[f64], opts: &ResidualOptions) -> Result<ScalingReport> {
    if eps.iter().any(|&e| !(e > 0.0 && e <= 1e-2)) {
        return Err(NormalFormError::Invalid("amplitudes must lie in (0, 1e-2]".into()));
    }
    let set = CorrectionSet::new(alpha, k, phi0.grid())?;
    let rows: Vec<(f64, f64)> =
        eps.iter().map(|&e| residual_norm(phi0, alpha, k, e, &set, opts).map(|r| (e, r))).collect::<Result<_>>()?;
    let exponents = rows.windows(2).map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln()).collect();
    Ok(ScalingReport { alpha, k, constant: opts.constant, rows, exponents })
}

/// Pick the constant in `{1, -1, i, -i}` giving the smallest residual.
pub fn calibrate_constant(phi0: &Field, alpha: f64, k: i32, eps: f64, opts: &ResidualOptions) -> Result<(C64, Vec<(C64, f64)>)> {
    let set = CorrectionSet::new(alpha, k, phi0.grid())?;
    let candidates = [C64::new(1.0, 0.0), C64::new(-1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.0, -1.0)];
    let mut scores = Vec::new();
    for c in candidates {
        let o = ResidualOptions { constant: c, ..opts.clone() };
        scores.push((c, residual_norm(phi0, alpha, k, eps, &set, &o)?));
    }
    let best = scores.iter().min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap().0;
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_core::make_grid;

    #[test]
    fn dispersion_and_resonance_examples() {
        assert_eq!(omega(2.0, 1.0), -4.0);
        assert_eq!(omega(0.0, 1.5), 0.0);
        assert_eq!(omega(-3.0, 2.0), 27.0);
        assert_eq!(resonance(1.0, 1.0, 1.0), 2.0);
        assert_eq!(resonance(1.0, 2.0, 2.0), 18.0);
        for a in [0.5, 1.0, 2.0] {
            assert_eq!(resonance(3.7, -3.7, a), 0.0);
        }
        let s = resonance_equiv_check(1.0, &[(1.0, 1.0)]).unwrap();
        assert_eq!(s.min, 1.0);
        assert_eq!(resonance_equiv_check(2.0, &[(1.0, 2.0)]).unwrap().max, 2.0);
        assert!(resonance_equiv_check(1.0, &[(1.0, -1.0)]).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_degree_fifteen() {
        let rule = gauss_legendre_unit(8);
        let total: f64 = rule.iter().map(|(h, w)| w * h.powi(15)).sum();
        assert!((total - 1.0 / 16.0).abs() < 1e-15);
        assert!((rule.iter().map(|r| r.1).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_symbol_is_product() {
        let grid = make_grid(0, 64).unwrap();
        let u = Field::from_fn(&grid, |x| (3.0 * x).cos() + 0.5 * (5.0 * x).sin());
        let v = Field::from_fn(&grid, |x| (2.0 * x).sin() - 0.25);
        let one = FnSymbol(|_, _| C64::new(1.0, 0.0));
        let direct = apply_bilinear(&one, &u, &v).unwrap();
        assert!(direct.max_diff(&u.mul(&v).unwrap()) < 1e-13);
        let dv = FnSymbol(|_, b: f64| C64::new(0.0, b));
        let got = apply_bilinear(&dv, &u, &v).unwrap();
        assert!(got.max_diff(&u.mul(&derivative(&v).unwrap()).unwrap()) < 1e-12);
    }

    #[test]
    fn q2k_paths_agree() {
        let grid = make_grid(0, 256).unwrap();
        let k = 4;
        let u = Field::from_fn(&grid, |x| (16.0 * x).cos() + 0.3 * (3.0 * x).sin() + 0.2 * (21.0 * x + 0.4).cos());
        let v = Field::from_fn(&grid, |x| (1.0 * x).cos() + 0.7 * (12.0 * x).sin() + 0.1 * (30.0 * x).cos());
        let a = q2k_apply(&u, &v, k).unwrap();
        let b = apply_bilinear(&BilinearSymbol::new(SymbolId::Q2k, k, 1.5), &u, &v).unwrap();
        assert!(a.max_diff(&b) < 1e-10, "{}", a.max_diff(&b));
    }

    #[test]
    fn guards_hold_on_grid() {
        let grid = make_grid(0, 256).unwrap();
        for alpha in [1.0, 1.5, 2.0] {
            assert!(CorrectionSet::new(alpha, 5, &grid).is_ok());
        }
        // The unlocalized Q2k numerator is nonzero on ξ = 0.
        assert!(guard_scan(&BilinearSymbol::new(SymbolId::Q2k, 5, 1.5), &grid).is_err());
    }

    #[test]
    fn single_mode_cancellation() {
        let grid = make_grid(0, 128).unwrap();
        let u = Field::from_complex_fn(&grid, |x| C64::from_polar(1.0, 3.0 * x));
        let v = Field::from_complex_fn(&grid, |x| C64::from_polar(1.0, 14.0 * x));
        let corr = NormalFormCorrection::new(SymbolId::QexpI, 4, 1.5, &grid).unwrap();
        let r = nf_cancellation_check(&u, &v, 0.3, &corr).unwrap();
        assert!(r.q_sup > 0.1);
        assert!(r.sup < 1e-10);
    }

    #[test]
    fn zero_field_has_zero_correction() {
        let grid = make_grid(0, 256).unwrap();
        let r = renormalize_nonlinear(&Field::zeros(&grid), 1.5, 4).unwrap();
        assert_eq!(r.renormalized.sup_norm(), 0.0);
        let phi = Field::from_fn(&grid, |x| (-(x - 3.0).powi(2) / 0.02).exp());
        let r = renormalize_linearized(&Field::zeros(&grid), &phi, 1.5, 4).unwrap();
        assert_eq!(r.renormalized.sup_norm(), 0.0);
    }
}
