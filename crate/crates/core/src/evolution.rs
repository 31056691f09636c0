//! Time integration: the nonlinear equation `∂_tφ = |D|^α∂_xφ + ½∂_x(φ²)`, its
//! linearization around a stored trajectory, and the transport-dispersive model
//! `i∂_t u = -A u + f`.
//!
//! All three use the integrating-factor (Lawson) RK4 scheme: the diagonal stiff
//! part is propagated exactly in spectral space and RK4 only sees the
//! interaction-picture remainder.

use std::io::{self, Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::spectral_core::{
    abs_pow, chi_block, dealias, dealias_in_place, derivative, dispersive_multiplier, Field, Grid,
    SpectralError, C64,
};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("blow-up: sup norm {norm:e} exceeded {threshold:e} at t = {t}")]
    BlowUp { t: f64, norm: f64, threshold: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("background trajectory covers [0, {covers}] but [0, {needed}] is required")]
    BackgroundTooShort { covers: f64, needed: f64 },
    #[error("background sample spacing {gap} exceeds the time step {dt}")]
    InterpolationGap { gap: f64, dt: f64 },
    #[error("initial datum is not band-limited: spectral tail {tail:e}")]
    NotBandLimited { tail: f64 },
    #[error("malformed trajectory record: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, EvolutionError>;

/// Sup-norm threshold that aborts a nonlinear run.
pub const BLOW_UP_THRESHOLD: f64 = 1e6;

/// Integrator settings shared by every solver in this module.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionConfig {
    pub alpha: f64,
    pub dt: f64,
    pub t_final: f64,
    pub dealias: bool,
    /// Store every `save_every`-th step (the final state is always stored).
    pub save_every: usize,
}

impl EvolutionConfig {
    pub fn new(alpha: f64, dt: f64, t_final: f64) -> Self {
        Self { alpha, dt, t_final, dealias: true, save_every: 1 }
    }

    pub fn with_save_every(mut self, every: usize) -> Self {
        self.save_every = every.max(1);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EvolutionError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(EvolutionError::Config(format!("T must be nonnegative, got {}", self.t_final)));
        }
        if !(0.0..=3.0).contains(&self.alpha) {
            return Err(EvolutionError::Config(format!("alpha {} outside [0, 3]", self.alpha)));
        }
        Ok(())
    }

    /// Step sizes covering `[0, T]`; the last one may be partial.
    fn steps(&self) -> Vec<f64> {
        let n_full = (self.t_final / self.dt * (1.0 - 1e-12)).floor() as usize;
        let mut steps = vec![self.dt; n_full];
        let rest = self.t_final - n_full as f64 * self.dt;
        if rest > 1e-12 * self.dt {
            steps.push(rest);
        }
        steps
    }
}

/// Time-indexed sequence of fields.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
    pub config: EvolutionConfig,
}

impl Trajectory {
    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn last(&self) -> &Field {
        self.fields.last().expect("trajectories are never empty")
    }

    /// Binary record: magic, `N`, `L`, `dt`, `α`, sample count and a complex flag,
    /// then per sample the time followed by the samples (re/im interleaved when complex).
    /// Every number is little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let grid = self.grid();
        let complex = self.fields.iter().any(|f| !f.is_real());
        w.write_all(b"GBOT")?;
        w.write_all(&(grid.n() as u64).to_le_bytes())?;
        w.write_all(&grid.k_l().to_le_bytes())?;
        w.write_all(&grid.length().to_le_bytes())?;
        w.write_all(&self.config.dt.to_le_bytes())?;
        w.write_all(&self.config.alpha.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&[complex as u8])?;
        for (t, f) in self.times.iter().zip(&self.fields) {
            w.write_all(&t.to_le_bytes())?;
            for v in f.values() {
                w.write_all(&v.re.to_le_bytes())?;
                if complex {
                    w.write_all(&v.im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GBOT" {
            return Err(EvolutionError::Format("bad magic".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let mut k4 = [0u8; 4];
        r.read_exact(&mut k4)?;
        let k_l = i32::from_le_bytes(k4);
        let _length = read_f64(&mut r)?;
        let dt = read_f64(&mut r)?;
        let alpha = read_f64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let complex = flag[0] != 0;
        let grid = Grid::new(k_l, n)?;
        let mut times = Vec::with_capacity(count);
        let mut fields = Vec::with_capacity(count);
        for _ in 0..count {
            times.push(read_f64(&mut r)?);
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                let re = read_f64(&mut r)?;
                let im = if complex { read_f64(&mut r)? } else { 0.0 };
                vals.push(C64::new(re, im));
            }
            fields.push(if complex {
                Field::from_complex(&grid, vals)?
            } else {
                Field::from_real(&grid, &vals.iter().map(|c| c.re).collect::<Vec<_>>())?
            });
        }
        let t_final = times.last().copied().unwrap_or(0.0);
        Ok(Self { times, fields, config: EvolutionConfig::new(alpha, dt, t_final) })
    }

    /// Long-format CSV `t,x,value` (plus `value_im` for complex trajectories).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let complex = self.fields.iter().any(|f| !f.is_real());
        if complex {
            writeln!(w, "t,x,value,value_im")?;
        } else {
            writeln!(w, "t,x,value")?;
        }
        let xs = self.grid().points();
        for (t, f) in self.times.iter().zip(&self.fields) {
            for (x, v) in xs.iter().zip(f.values()) {
                if complex {
                    writeln!(w, "{:.17e},{:.17e},{:.17e},{:.17e}", t, x, v.re, v.im)?;
                } else {
                    writeln!(w, "{:.17e},{:.17e},{:.17e}", t, x, v.re)?;
                }
            }
        }
        Ok(())
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Symbol `iξ|ξ|^α` of the linear part.
fn linear_symbol(grid: &Grid, alpha: f64) -> Vec<C64> {
    let ny = grid.nyquist_index();
    grid.freqs()
        .iter()
        .enumerate()
        .map(|(j, &xi)| if j == ny { C64::new(0.0, 0.0) } else { C64::new(0.0, xi * abs_pow(xi, alpha)) })
        .collect()
}

/// Exact linear propagator `e^{t·iξ|ξ|^α}` applied to a field.
pub fn linear_propagate(f: &Field, alpha: f64, t: f64) -> Result<Field> {
    let sym = linear_symbol(f.grid(), alpha);
    let spec: Vec<C64> = f.spectrum().iter().zip(&sym).map(|(c, s)| c * (s * t).exp()).collect();
    Ok(Field::from_spectrum(f.grid(), spec, f.is_real())?)
}

/// Right-hand side `|D|^α∂_xφ + ½∂_x(dealias(φ²))`.
pub fn gbo_rhs(phi: &Field, alpha: f64) -> Result<Field> {
    let lin = dispersive_multiplier(phi, alpha)?;
    let sq = dealias(&phi.mul(phi)?);
    let nl = derivative(&sq)?.scale(0.5);
    Ok(lin.add(&nl)?)
}

/// Quadratic part `½∂_x(φ²)` in spectral form, optionally dealiased.
fn burgers_term(grid: &Grid, spec: &[C64], dealias: bool, real: bool) -> (Vec<C64>, f64) {
    let mut phys = spec.to_vec();
    grid.inverse_in_place(&mut phys);
    let mut sup = 0.0f64;
    for v in phys.iter_mut() {
        if real {
            v.im = 0.0;
        }
        sup = sup.max(v.norm());
        *v = *v * *v;
    }
    grid.forward_in_place(&mut phys);
    if dealias {
        dealias_in_place(grid, &mut phys);
    }
    let ny = grid.nyquist_index();
    for (j, (c, &xi)) in phys.iter_mut().zip(grid.freqs()).enumerate() {
        *c = if j == ny { C64::new(0.0, 0.0) } else { *c * C64::new(0.0, 0.5 * xi) };
    }
    (phys, sup)
}

/// One Lawson RK4 step for `û_t = Λû + N(t, û)` with diagonal `Λ`.
fn lawson_step(
    lambda: &[C64],
    u: &[C64],
    t: f64,
    h: f64,
    mut nonlinear: impl FnMut(f64, &[C64]) -> Result<Vec<C64>>,
) -> Result<Vec<C64>> {
    let half: Vec<C64> = lambda.iter().map(|l| (l * (0.5 * h)).exp()).collect();
    let full: Vec<C64> = half.iter().map(|e| e * e).collect();
    let n = u.len();
    let a = nonlinear(t, u)?;
    let stage: Vec<C64> = (0..n).map(|j| half[j] * (u[j] + a[j] * (0.5 * h))).collect();
    let b = nonlinear(t + 0.5 * h, &stage)?;
    let stage: Vec<C64> = (0..n).map(|j| half[j] * u[j] + b[j] * (0.5 * h)).collect();
    let c = nonlinear(t + 0.5 * h, &stage)?;
    let stage: Vec<C64> = (0..n).map(|j| full[j] * u[j] + half[j] * c[j] * h).collect();
    let d = nonlinear(t + h, &stage)?;
    Ok((0..n)
        .map(|j| full[j] * u[j] + (full[j] * a[j] + half[j] * (b[j] + c[j]) * 2.0 + d[j]) * (h / 6.0))
        .collect())
}

fn drive(
    grid: &Grid,
    u0: &Field,
    cfg: &EvolutionConfig,
    lambda: &[C64],
    real: bool,
    nonlinear: impl FnMut(f64, &[C64]) -> Result<Vec<C64>>,
) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut fields = Vec::new();
    drive_visit(grid, u0, cfg, lambda, real, nonlinear, |t, f| {
        times.push(t);
        fields.push(f.clone());
    })?;
    Ok(Trajectory { times, fields, config: cfg.clone() })
}

/// Step the integrator, handing every saved state to `visit` instead of storing it.
fn drive_visit(
    grid: &Grid,
    u0: &Field,
    cfg: &EvolutionConfig,
    lambda: &[C64],
    real: bool,
    mut nonlinear: impl FnMut(f64, &[C64]) -> Result<Vec<C64>>,
    mut visit: impl FnMut(f64, &Field),
) -> Result<()> {
    cfg.validate()?;
    let steps = cfg.steps();
    let mut u = u0.spectrum().to_vec();
    let mut t = 0.0;
    visit(0.0, u0);
    for (i, &h) in steps.iter().enumerate() {
        u = lawson_step(lambda, &u, t, h, &mut nonlinear)?;
        t = if i + 1 == steps.len() { cfg.t_final } else { t + h };
        if (i + 1) % cfg.save_every == 0 || i + 1 == steps.len() {
            visit(t, &Field::from_spectrum(grid, u.clone(), real)?);
        }
    }
    Ok(())
}

/// Integrate the nonlinear equation from `φ0`.
pub fn gbo_solve(phi0: &Field, cfg: &EvolutionConfig) -> Result<Trajectory> {
    let grid = phi0.grid().clone();
    let lambda = linear_symbol(&grid, cfg.alpha);
    let dealias = cfg.dealias;
    drive(&grid, phi0, cfg, &lambda, true, |t, u| {
        let (nl, sup) = burgers_term(&grid, u, dealias, true);
        if !(sup <= BLOW_UP_THRESHOLD) {
            return Err(EvolutionError::BlowUp { t, norm: sup, threshold: BLOW_UP_THRESHOLD });
        }
        Ok(nl)
    })
}

/// Cubic Hermite interpolation of a stored trajectory and its time derivative.
struct HermiteBackground {
    times: Vec<f64>,
    values: Vec<Vec<C64>>,
    slopes: Vec<Vec<C64>>,
}

impl HermiteBackground {
    fn new(background: &Trajectory) -> Result<Self> {
        let alpha = background.config.alpha;
        let mut slopes = Vec::with_capacity(background.len());
        for f in &background.fields {
            slopes.push(gbo_rhs(f, alpha)?.values().to_vec());
        }
        Ok(Self {
            times: background.times.clone(),
            values: background.fields.iter().map(|f| f.values().to_vec()).collect(),
            slopes,
        })
    }

    fn eval(&self, t: f64) -> Vec<C64> {
        let n = self.times.len();
        if n == 1 {
            return self.values[0].clone();
        }
        let i = match self.times.iter().position(|&s| s > t) {
            Some(0) => 0,
            Some(p) => p - 1,
            None => n - 2,
        }
        .min(n - 2);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let h00 = 2.0 * s * s * s - 3.0 * s * s + 1.0;
        let h10 = s * s * s - 2.0 * s * s + s;
        let h01 = -2.0 * s * s * s + 3.0 * s * s;
        let h11 = s * s * s - s * s;
        (0..self.values[i].len())
            .map(|j| {
                self.values[i][j] * h00
                    + self.slopes[i][j] * (h10 * h)
                    + self.values[i + 1][j] * h01
                    + self.slopes[i + 1][j] * (h11 * h)
            })
            .collect()
    }
}

/// Integrate `∂_t v = |D|^α∂_x v + ∂_x(φ v)` along a stored background `φ(t)`.
pub fn linearized_solve(v0: &Field, background: &Trajectory, cfg: &EvolutionConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let covers = *background.times.last().unwrap_or(&0.0);
    if covers + 1e-12 < cfg.t_final {
        return Err(EvolutionError::BackgroundTooShort { covers, needed: cfg.t_final });
    }
    let gap = background.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    if gap > cfg.dt * (1.0 + 1e-9) {
        return Err(EvolutionError::InterpolationGap { gap, dt: cfg.dt });
    }
    let grid = v0.grid().clone();
    let bg = HermiteBackground::new(background)?;
    let lambda = linear_symbol(&grid, cfg.alpha);
    let dealias = cfg.dealias;
    let ny = grid.nyquist_index();
    drive(&grid, v0, cfg, &lambda, true, |t, u| {
        let phi = bg.eval(t);
        let mut prod = u.to_vec();
        grid.inverse_in_place(&mut prod);
        for (p, f) in prod.iter_mut().zip(&phi) {
            *p = C64::new(p.re * f.re, 0.0);
        }
        grid.forward_in_place(&mut prod);
        if dealias {
            dealias_in_place(&grid, &mut prod);
        }
        for (j, (c, &xi)) in prod.iter_mut().zip(grid.freqs()).enumerate() {
            *c = if j == ny { C64::new(0.0, 0.0) } else { *c * C64::new(0.0, xi) };
        }
        Ok(prod)
    })
}

/// Smooth transport coefficient `b(t, x)` with analytic derivatives.
pub trait TransportCoefficient: Send + Sync {
    fn value(&self, t: f64, x: f64) -> f64;
    fn dx(&self, t: f64, x: f64) -> f64;
    fn dxx(&self, t: f64, x: f64) -> f64;
    fn dt(&self, t: f64, x: f64) -> f64;
    /// Largest spatial wavenumber present.
    fn max_wavenumber(&self) -> f64;

    fn sample(&self, grid: &Grid, t: f64) -> Field {
        Field::from_fn(grid, |x| self.value(t, x))
    }
}

/// The zero coefficient.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCoefficient;

impl TransportCoefficient for ZeroCoefficient {
    fn value(&self, _: f64, _: f64) -> f64 {
        0.0
    }
    fn dx(&self, _: f64, _: f64) -> f64 {
        0.0
    }
    fn dxx(&self, _: f64, _: f64) -> f64 {
        0.0
    }
    fn dt(&self, _: f64, _: f64) -> f64 {
        0.0
    }
    fn max_wavenumber(&self) -> f64 {
        0.0
    }
}

/// One travelling cosine `amp·cos(κx + νt + ϑ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineMode {
    pub amp: f64,
    pub wavenumber: f64,
    pub freq: f64,
    pub phase: f64,
}

/// Sum of travelling cosines, the synthetic transport coefficient family.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineField {
    pub modes: Vec<CosineMode>,
}

impl TransportCoefficient for CosineField {
    fn value(&self, t: f64, x: f64) -> f64 {
        self.modes.iter().map(|m| m.amp * (m.wavenumber * x + m.freq * t + m.phase).cos()).sum()
    }
    fn dx(&self, t: f64, x: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| -m.amp * m.wavenumber * (m.wavenumber * x + m.freq * t + m.phase).sin())
            .sum()
    }
    fn dxx(&self, t: f64, x: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| -m.amp * m.wavenumber * m.wavenumber * (m.wavenumber * x + m.freq * t + m.phase).cos())
            .sum()
    }
    fn dt(&self, t: f64, x: f64) -> f64 {
        self.modes.iter().map(|m| -m.amp * m.freq * (m.wavenumber * x + m.freq * t + m.phase).sin()).sum()
    }
    fn max_wavenumber(&self) -> f64 {
        self.modes.iter().map(|m| m.wavenumber.abs()).fold(0.0, f64::max)
    }
}

/// Measured seminorms of a coefficient against the admissibility bounds
/// `‖∂_x^a ∂_t^γ b‖_{L¹_tL^∞} ≤ C λ^{δ(a-1)}` (a ≥ 1) and `‖∂_t^γ b‖_{L^∞} ≤ C`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibilityReport {
    /// `(a, γ, measured, bound)` rows.
    pub rows: Vec<(u32, u32, f64, f64)>,
    pub constant: f64,
}

impl AdmissibilityReport {
    pub fn worst_ratio(&self) -> f64 {
        self.rows.iter().map(|&(_, _, m, b)| m / b).fold(0.0, f64::max)
    }
    pub fn admissible(&self) -> bool {
        self.worst_ratio() <= self.constant
    }
}

impl CosineField {
    /// Random admissible field: `J` modes with wavenumbers that are multiples of
    /// `base` (so the field lives on the torus with that spacing), amplitudes scaled
    /// so that derivatives up to third order respect the `λ^{δ(a-1)}` bounds.
    pub fn random_admissible<R: rand::Rng>(rng: &mut R, m: f64, lambda: f64, base: f64, modes: usize) -> Self {
        let delta = (2.0 - m) / 2.0;
        let mut out = Vec::with_capacity(modes);
        for j in 0..modes {
            let mult = (1 + j + rng.gen_range(0..2usize)) as f64;
            let kappa = base * mult;
            let freq: f64 = rng.gen_range(-1.0..1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            // Largest amplitude keeping every checked seminorm below its bound.
            let mut cap = 1.0f64 / (1.0 + freq.abs());
            for a in 1..=3 {
                let bound = lambda.powf(delta * (a as f64 - 1.0));
                cap = cap.min(bound / (kappa.powi(a) * (1.0 + freq.abs())));
            }
            let amp = cap * rng.gen_range(0.2..0.5) / modes as f64;
            out.push(CosineMode { amp, wavenumber: kappa, freq, phase });
        }
        Self { modes: out }
    }

    /// Verify admissibility on `t ∈ [0, 1]` by direct seminorm evaluation over a
    /// space-time sample covering one spatial period of the slowest mode.
    pub fn verify(&self, m: f64, lambda: f64) -> AdmissibilityReport {
        let delta = (2.0 - m) / 2.0;
        let kmin = self.modes.iter().map(|m| m.wavenumber.abs()).filter(|&k| k > 0.0).fold(f64::INFINITY, f64::min);
        let period = if kmin.is_finite() { std::f64::consts::TAU / kmin } else { 1.0 };
        let nx = 256;
        let nt = 65;
        let deriv = |a: u32, g: u32, t: f64, x: f64| -> f64 {
            self.modes
                .iter()
                .map(|md| {
                    let arg = md.wavenumber * x + md.freq * t + md.phase;
                    let order = a + g;
                    let base = match order % 4 {
                        0 => arg.cos(),
                        1 => -arg.sin(),
                        2 => -arg.cos(),
                        _ => arg.sin(),
                    };
                    md.amp * md.wavenumber.powi(a as i32) * md.freq.powi(g as i32) * base
                })
                .sum()
        };
        let sup_at = |a: u32, g: u32, t: f64| -> f64 {
            (0..nx).map(|i| deriv(a, g, t, period * i as f64 / nx as f64).abs()).fold(0.0, f64::max)
        };
        let mut rows = Vec::new();
        for g in 0..=1u32 {
            let linf = (0..nt).map(|i| sup_at(0, g, i as f64 / (nt - 1) as f64)).fold(0.0, f64::max);
            rows.push((0, g, linf, 1.0));
            for a in 1..=3u32 {
                let vals: Vec<f64> = (0..nt).map(|i| sup_at(a, g, i as f64 / (nt - 1) as f64)).collect();
                let l1 = vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / (nt - 1) as f64;
                rows.push((a, g, l1, lambda.powf(delta * (a as f64 - 1.0))));
            }
        }
        AdmissibilityReport { rows, constant: 1.0 }
    }
}

/// Transport-dispersive symbol `(b ξ + |ξ|^m) χ_λ` with `λ = 2^k`.
#[derive(Clone)]
pub struct TransportSymbol {
    pub b: Arc<dyn TransportCoefficient>,
    pub m: f64,
    pub k: i32,
}

impl std::fmt::Debug for TransportSymbol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransportSymbol").field("m", &self.m).field("k", &self.k).finish()
    }
}

impl TransportSymbol {
    pub fn new(b: Arc<dyn TransportCoefficient>, m: f64, k: i32) -> Self {
        Self { b, m, k }
    }
    pub fn lambda(&self) -> f64 {
        2f64.powi(self.k)
    }
    pub fn delta(&self) -> f64 {
        (2.0 - self.m) / 2.0
    }
    /// Frequency cutoff of the operator: the three dyadic blocks around `λ`,
    /// identically one on the support of `P_λ`.
    pub fn cutoff(&self, xi: f64) -> f64 {
        chi_block(self.k - 1, xi) + chi_block(self.k, xi) + chi_block(self.k + 1, xi)
    }
}

/// `A u = |D|^m χ_λ u + ½[b·(Dχ_λ u) + Dχ_λ(b u)]` with `D = -i∂_x`.
pub fn transport_operator_apply(u: &Field, sym: &TransportSymbol, t: f64) -> Result<Field> {
    let grid = u.grid();
    let b = sym.b.sample(grid, t);
    let disp: Vec<C64> = u
        .spectrum()
        .iter()
        .zip(grid.freqs())
        .map(|(c, &xi)| c * (abs_pow(xi, sym.m) * sym.cutoff(xi)))
        .collect();
    let transport = symmetric_transport(grid, u.spectrum(), b.values(), sym);
    let spec: Vec<C64> = disp.iter().zip(&transport).map(|(a, b)| a + b).collect();
    Ok(Field::from_spectrum(grid, spec, false)?)
}

/// Spectral coefficients of `½[b·(Dχ u) + Dχ(b u)]`.
fn symmetric_transport(grid: &Grid, u_hat: &[C64], b_phys: &[C64], sym: &TransportSymbol) -> Vec<C64> {
    let ny = grid.nyquist_index();
    let dchi: Vec<f64> = grid
        .freqs()
        .iter()
        .enumerate()
        .map(|(j, &xi)| if j == ny { 0.0 } else { xi * sym.cutoff(xi) })
        .collect();
    let mut first: Vec<C64> = u_hat.iter().zip(&dchi).map(|(c, d)| c * d).collect();
    grid.inverse_in_place(&mut first);
    let mut u_phys = u_hat.to_vec();
    grid.inverse_in_place(&mut u_phys);
    for ((f, u), b) in first.iter_mut().zip(u_phys.iter_mut()).zip(b_phys) {
        *f *= b.re;
        *u *= b.re;
    }
    grid.forward_in_place(&mut first);
    grid.forward_in_place(&mut u_phys);
    first.iter().zip(&u_phys).zip(&dchi).map(|((a, bu), d)| (a + bu * d) * 0.5).collect()
}

/// Integrate `i∂_t u = -A u + f` from a frequency-localized datum.
///
/// The dispersive part `|ξ|^m χ_λ` is propagated exactly; the transport part and
/// the forcing go through RK4 in the interaction picture.
pub fn transport_dispersive_solve(
    u0: &Field,
    sym: &TransportSymbol,
    forcing: Option<&dyn Fn(f64) -> Field>,
    cfg: &EvolutionConfig,
) -> Result<Trajectory> {
    let grid = u0.grid().clone();
    let k = sym.k;
    let scale = u0.spectrum().iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tail = u0.spectral_tail(|xi| chi_block(k, xi) > 0.0) / scale;
    if tail > 1e-8 {
        return Err(EvolutionError::NotBandLimited { tail });
    }
    let ny = grid.nyquist_index();
    let lambda: Vec<C64> = grid
        .freqs()
        .iter()
        .enumerate()
        .map(|(j, &xi)| if j == ny { C64::new(0.0, 0.0) } else { C64::new(0.0, abs_pow(xi, sym.m) * sym.cutoff(xi)) })
        .collect();
    let i = C64::new(0.0, 1.0);
    drive(&grid, u0, cfg, &lambda, false, |t, u| {
        let b = sym.b.sample(&grid, t);
        let mut out = symmetric_transport(&grid, u, b.values(), sym);
        out.iter_mut().for_each(|c| *c *= i);
        if let Some(f) = forcing {
            let fh = f(t);
            for (o, c) in out.iter_mut().zip(fh.spectrum()) {
                *o -= i * c;
            }
        }
        Ok(out)
    })
}

/// Relative sup-norm mismatch between the rescaled run `ψ0 = 2^αφ0(2x)` up to
/// time `t` and `2^αφ(2^{1+α}t, 2x)` from the unscaled run.
///
/// The rescaled run lives on the grid of half the period with the same `N`,
/// so both runs sample the same points of `φ0`.
pub fn scaling_check(phi0: &Field, alpha: f64, t: f64, dt: f64) -> Result<f64> {
    let grid = phi0.grid();
    let half = Grid::new(grid.k_l() - 1, grid.n())?;
    let factor = 2f64.powf(alpha);
    let stretch = 2f64.powf(1.0 + alpha);
    let scaled: Vec<f64> = phi0.values().iter().map(|c| factor * c.re).collect();
    let psi0 = Field::from_real(&half, &scaled)?;
    let unscaled = gbo_solve(phi0, &EvolutionConfig::new(alpha, dt, stretch * t).with_save_every(usize::MAX))?;
    let rescaled = gbo_solve(&psi0, &EvolutionConfig::new(alpha, dt / stretch, t).with_save_every(usize::MAX))?;
    let reference = unscaled.last().scale(factor);
    let err = reference.values().iter().zip(rescaled.last().values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    Ok(err / reference.sup_norm().max(f64::MIN_POSITIVE))
}

/// Integrate `∂_t u = |D|^α∂_x u + b ∂_x u + f` with `b` a prescribed low-frequency
/// coefficient (the frozen-background transport of the bilinear estimate).
pub fn paraproduct_transport_solve(
    u0: &Field,
    alpha: f64,
    b: &dyn TransportCoefficient,
    forcing: Option<&dyn Fn(f64) -> Field>,
    cfg: &EvolutionConfig,
) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut fields = Vec::new();
    paraproduct_transport_visit(u0, alpha, b, forcing, cfg, |t, f| {
        times.push(t);
        fields.push(f.clone());
    })?;
    Ok(Trajectory { times, fields, config: cfg.clone() })
}

/// [`paraproduct_transport_solve`] streaming the saved states to `visit`.
pub fn paraproduct_transport_visit(
    u0: &Field,
    alpha: f64,
    b: &dyn TransportCoefficient,
    forcing: Option<&dyn Fn(f64) -> Field>,
    cfg: &EvolutionConfig,
    visit: impl FnMut(f64, &Field),
) -> Result<()> {
    let grid = u0.grid().clone();
    let lambda = linear_symbol(&grid, alpha);
    let ny = grid.nyquist_index();
    let ik: Vec<C64> =
        grid.freqs().iter().enumerate().map(|(j, &xi)| C64::new(0.0, if j == ny { 0.0 } else { xi })).collect();
    let nonlinear = |t: f64, u: &[C64]| {
        let mut ux: Vec<C64> = u.iter().zip(&ik).map(|(c, d)| c * d).collect();
        grid.inverse_in_place(&mut ux);
        let coeff = b.sample(&grid, t);
        for (v, c) in ux.iter_mut().zip(coeff.values()) {
            *v *= c.re;
        }
        grid.forward_in_place(&mut ux);
        if let Some(f) = forcing {
            for (o, c) in ux.iter_mut().zip(f(t).spectrum()) {
                *o += c;
            }
        }
        Ok(ux)
    };
    drive_visit(&grid, u0, cfg, &lambda, u0.is_real(), nonlinear, visit)
}

/// Mass `∫φ²` and energy `∫ ½||D|^{α/2}φ|² + ⅙φ³`.
///
/// The cubic weight ⅙ is the one conserved by `∂_tφ = |D|^α∂_xφ + ½∂_x(φ²)`.
pub fn conserved_quantities(phi: &Field, alpha: f64) -> (f64, f64) {
    let grid = phi.grid();
    let mass = phi.values().iter().map(|c| c.re * c.re).sum::<f64>() * grid.dx();
    let kinetic: f64 = phi
        .spectrum()
        .iter()
        .zip(grid.freqs())
        .map(|(c, &xi)| abs_pow(xi, alpha) * c.norm_sqr())
        .sum::<f64>()
        * grid.length();
    let cubic = phi.values().iter().map(|c| c.re.powi(3)).sum::<f64>() * grid.dx();
    (mass, 0.5 * kinetic + cubic / 6.0)
}
