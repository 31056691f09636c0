//! Mixed space-time norms, frequency envelopes, control parameters, and the
//! bilinear-decay and regularized-data convergence experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::evolution::{
    gbo_solve, paraproduct_transport_visit, CosineField, CosineMode, EvolutionConfig, EvolutionError, Trajectory,
    TransportCoefficient,
};
use crate::spectral_core::{abs_pow, apply_real_multiplier, lp_project, make_grid, Field, Grid, Projection, SpectralError, C64};
use crate::wavepacket::log_log_fit;

#[derive(Debug, Error)]
pub enum EstimatesError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("empty trajectory")]
    Empty,
    #[error("trajectory samples are not uniform in time")]
    NonUniform,
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("background violates admissibility: {0}")]
    Background(String),
    #[error("under-resolved: {0}")]
    UnderResolved(String),
}

pub type Result<T> = std::result::Result<T, EstimatesError>;

/// Default slowly-varying exponent of frequency envelopes.
pub const DEFAULT_ENVELOPE_DELTA: f64 = 0.125;

/// Nesting of a mixed norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormOrder {
    /// `L^p_t L^q_x`.
    TimeOuter,
    /// `L^q_x L^p_t` (lateral).
    SpaceOuter,
}

/// Frequency weight applied before the norm is taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weight {
    /// `⟨D⟩^s`.
    Inhomogeneous(f64),
    /// `|D|^s` (zero on the mean).
    Homogeneous(f64),
}

/// `‖W u‖` with temporal exponent `p`, spatial exponent `q` (either may be infinite).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedNormSpec {
    pub p: f64,
    pub q: f64,
    pub weight: Weight,
    pub order: NormOrder,
}

impl MixedNormSpec {
    pub fn new(p: f64, q: f64) -> Self {
        Self { p, q, weight: Weight::Inhomogeneous(0.0), order: NormOrder::TimeOuter }
    }
    pub fn with_weight(mut self, weight: Weight) -> Self {
        self.weight = weight;
        self
    }
    pub fn lateral(mut self) -> Self {
        self.order = NormOrder::SpaceOuter;
        self
    }
}

fn weighted(f: &Field, w: Weight) -> Result<Field> {
    Ok(match w {
        Weight::Inhomogeneous(s) if s == 0.0 => f.clone(),
        Weight::Inhomogeneous(s) => apply_real_multiplier(f, |xi| (1.0 + xi * xi).powf(s / 2.0))?,
        Weight::Homogeneous(s) => apply_real_multiplier(f, |xi| abs_pow(xi, s))?,
    })
}

/// Discrete `L^r` norm of samples with uniform weight `h`; `r = ∞` is the max.
fn lr(values: impl Iterator<Item = f64>, r: f64, h: f64) -> f64 {
    if r.is_infinite() {
        values.fold(0.0, f64::max)
    } else {
        (values.map(|v| v.powf(r)).sum::<f64>() * h).powf(1.0 / r)
    }
}

/// Composite trapezoid `L^r` norm over uniformly spaced samples.
fn trapezoid_lr(values: &[f64], r: f64, h: f64) -> f64 {
    if r.is_infinite() {
        return values.iter().cloned().fold(0.0, f64::max);
    }
    let n = values.len();
    if n == 1 {
        return 0.0;
    }
    let sum: f64 = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            w * v.powf(r)
        })
        .sum();
    (sum * h).powf(1.0 / r)
}

fn time_step(traj: &Trajectory) -> Result<f64> {
    if traj.is_empty() {
        return Err(EstimatesError::Empty);
    }
    if traj.len() == 1 {
        return Ok(0.0);
    }
    let h = traj.times[1] - traj.times[0];
    for w in traj.times.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1e-300) {
            return Err(EstimatesError::NonUniform);
        }
    }
    Ok(h)
}

/// Mixed space-time norm of a uniformly sampled trajectory: trapezoid rule in
/// the outer variable, grid quadrature (exact for band-limited `L²`) inside.
pub fn mixed_norm(traj: &Trajectory, spec: &MixedNormSpec) -> Result<f64> {
    let h = time_step(traj)?;
    let grid = traj.grid();
    let fields: Vec<Field> = traj.fields.iter().map(|f| weighted(f, spec.weight)).collect::<Result<_>>()?;
    match spec.order {
        NormOrder::TimeOuter => {
            let inner: Vec<f64> =
                fields.iter().map(|f| lr(f.values().iter().map(|c| c.norm()), spec.q, grid.dx())).collect();
            Ok(trapezoid_lr(&inner, spec.p, h))
        }
        NormOrder::SpaceOuter => {
            let inner: Vec<f64> = (0..grid.n())
                .map(|i| {
                    let column: Vec<f64> = fields.iter().map(|f| f.values()[i].norm()).collect();
                    trapezoid_lr(&column, spec.p, h)
                })
                .collect();
            Ok(lr(inner.into_iter(), spec.q, grid.dx()))
        }
    }
}

/// `2/p + 1/q = 1/2` with `p ∈ [2, ∞]`, `q ∈ [1, ∞]`.
pub fn strichartz_admissible(p: f64, q: f64) -> bool {
    if !(p >= 2.0 && q >= 1.0) {
        return false;
    }
    let inv = |v: f64| if v.is_infinite() { 0.0 } else { 1.0 / v };
    (2.0 * inv(p) + inv(q) - 0.5).abs() < 1e-12
}

/// `‖u‖_{L^∞L²} + ‖⟨D⟩^{-(1-α)/4} u‖_{L⁴L^∞}`.
pub fn strichartz_norm(traj: &Trajectory, alpha: f64) -> Result<f64> {
    let energy = mixed_norm(traj, &MixedNormSpec::new(f64::INFINITY, 2.0))?;
    let dispersive = mixed_norm(
        traj,
        &MixedNormSpec::new(4.0, f64::INFINITY).with_weight(Weight::Inhomogeneous(-(1.0 - alpha) / 4.0)),
    )?;
    Ok(energy + dispersive)
}

/// `‖|D|^{-1/4} u‖_{L⁴_x L^∞_t} + ‖|D|^{α/2} u‖_{L^∞_x L²_t}`.
pub fn lateral_strichartz_norm(traj: &Trajectory, alpha: f64) -> Result<f64> {
    let maximal =
        mixed_norm(traj, &MixedNormSpec::new(f64::INFINITY, 4.0).with_weight(Weight::Homogeneous(-0.25)).lateral())?;
    let smoothing =
        mixed_norm(traj, &MixedNormSpec::new(2.0, f64::INFINITY).with_weight(Weight::Homogeneous(alpha / 2.0)).lateral())?;
    Ok(maximal + smoothing)
}

/// Envelope `{c_k}` over the blocks `k = 0..` with `P_0 = χ_{≤0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyEnvelope {
    pub values: Vec<f64>,
    /// `‖P_kφ‖_{H^s}` that the envelope dominates.
    pub block_norms: Vec<f64>,
    pub s: f64,
    pub delta: f64,
}

impl FrequencyEnvelope {
    /// `‖P_kφ‖_{H^s} ≤ c_k` for every block.
    pub fn dominates_blocks(&self) -> bool {
        self.values.iter().zip(&self.block_norms).all(|(c, b)| *b <= *c * (1.0 + 1e-12))
    }

    /// `c_j ≤ 2^{δ|j-k|} c_k` for every pair.
    pub fn slowly_varying(&self) -> bool {
        let n = self.values.len();
        (0..n).all(|j| {
            (0..n).all(|k| self.values[j] <= 2f64.powf(self.delta * (j as f64 - k as f64).abs()) * self.values[k] * (1.0 + 1e-12))
        })
    }

    /// Whether `c_j = 2^{δ|j-k|} c_k` for some pair `j ≠ k`.
    pub fn slowly_varying_attained(&self) -> bool {
        let n = self.values.len();
        (0..n).any(|j| {
            (0..n).any(|k| {
                j != k && self.values[k] > 0.0 && {
                    let bound = 2f64.powf(self.delta * (j as f64 - k as f64).abs()) * self.values[k];
                    (self.values[j] - bound).abs() <= 1e-12 * bound
                }
            })
        })
    }

    /// `Σ c_k²`.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|c| c * c).sum()
    }

    /// Sharp constant of `Σc_k² ≤ C Σ‖P_kφ‖²_{H^s}` for this block count:
    /// `max_j Σ_k 2^{-2δ|j-k|}`.
    pub fn energy_constant(&self) -> f64 {
        let n = self.values.len();
        (0..n)
            .map(|j| (0..n).map(|k| 2f64.powf(-2.0 * self.delta * (j as f64 - k as f64).abs())).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Projection onto block `k` of the envelope decomposition.
pub fn envelope_block(k: usize) -> Projection {
    if k == 0 {
        Projection::AtMost(0.0)
    } else {
        Projection::Block(k as i32)
    }
}

/// Number of envelope blocks the grid resolves.
pub fn envelope_block_count(grid: &Grid) -> usize {
    let mut k = 1;
    while 2f64.powi(k as i32 + 1) <= grid.nyquist() {
        k += 1;
    }
    k
}

/// Canonical envelope `c_k = sup_j 2^{-δ|j-k|} ‖P_jφ‖_{H^s}`.
pub fn frequency_envelope(phi: &Field, s: f64, delta: f64) -> Result<FrequencyEnvelope> {
    let count = envelope_block_count(phi.grid());
    let block_norms: Vec<f64> =
        (0..count).map(|k| Ok(lp_project(phi, envelope_block(k))?.sobolev_norm(s))).collect::<Result<_>>()?;
    let values = (0..count)
        .map(|k| {
            block_norms
                .iter()
                .enumerate()
                .map(|(j, b)| 2f64.powf(-delta * (j as f64 - k as f64).abs()) * b)
                .fold(0.0, f64::max)
        })
        .collect();
    let env = FrequencyEnvelope { values, block_norms, s, delta };
    debug_assert!(env.dominates_blocks() && env.slowly_varying());
    Ok(env)
}

/// Control parameters `(‖⟨D⟩^{(1-3α)/4}φ‖_∞, ‖⟨D⟩^{(1-α)/2}φ‖_∞)`.
pub fn control_params(phi: &Field, alpha: f64) -> Result<(f64, f64)> {
    let a = weighted(phi, Weight::Inhomogeneous((1.0 - 3.0 * alpha) / 4.0))?.sup_norm();
    let b = weighted(phi, Weight::Inhomogeneous((1.0 - alpha) / 2.0))?.sup_norm();
    Ok((a, b))
}

/// Least-squares log-log slope over the middle 80% of a sweep.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    let trim = n / 10;
    log_log_fit(&xs[trim..n - trim], &ys[trim..n - trim]).0
}

/// Low-frequency background `φ_{<1}` for the bilinear experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum BackgroundSpec {
    Zero,
    /// Free waves `Σ a_j cos(k_j x + k_j^{1+α} t)` with `k_j < 1` and `Σ|a_j| = amplitude`.
    Waves { seed: u64, amplitude: f64, modes: usize },
}

impl BackgroundSpec {
    /// Build the background on `grid` and verify it stays below unit frequency and small.
    pub fn build(&self, grid: &Grid, alpha: f64) -> Result<CosineField> {
        match self {
            BackgroundSpec::Zero => Ok(CosineField { modes: vec![] }),
            BackgroundSpec::Waves { seed, amplitude, modes } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let top = ((1.0 / grid.dk()).ceil() as i64 - 1).max(1);
                let raw: Vec<f64> = (0..*modes).map(|_| rng.gen_range(0.2..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let modes: Vec<CosineMode> = raw
                    .iter()
                    .map(|a| {
                        let k = rng.gen_range(1..=top) as f64 * grid.dk();
                        CosineMode {
                            amp: amplitude * a / total,
                            wavenumber: k,
                            freq: k.powf(1.0 + alpha),
                            phase: rng.gen_range(0.0..std::f64::consts::TAU),
                        }
                    })
                    .collect();
                let field = CosineField { modes };
                verify_background(&field)?;
                Ok(field)
            }
        }
    }
}

fn verify_background(field: &CosineField) -> Result<()> {
    if let Some(m) = field.modes.iter().find(|m| m.wavenumber.abs() >= 1.0) {
        return Err(EstimatesError::Background(format!("wavenumber {} is not below 1", m.wavenumber)));
    }
    let sup: f64 = field.modes.iter().map(|m| m.amp.abs()).sum();
    if sup > 0.5 {
        return Err(EstimatesError::Background(format!("amplitude bound {sup} exceeds 0.5")));
    }
    Ok(())
}

/// One point of the bilinear sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearRow {
    pub lambda: f64,
    pub mu: f64,
    /// `sup_y ‖u_λ T_y v_μ‖_{L²_{t,x}}`.
    pub product: f64,
    pub u_energy: f64,
    pub v_energy: f64,
    /// `product / (u_energy · v_energy)`.
    pub ratio: f64,
    pub t_final: f64,
}

/// Sweep result with the fitted `λ`-exponent of the normalized product.
#[derive(Clone, Debug)]
pub struct BilinearReport {
    pub alpha: f64,
    pub rows: Vec<BilinearRow>,
    pub exponent: f64,
    /// `sup_t` of the first control parameter of the background.
    pub control_a: f64,
}

/// Packet `P_λ^+(e^{iλx} g((x-c)/w))` with a Gaussian envelope of width `8/λ`.
fn band_packet(grid: &Grid, k: i32, centre: f64) -> Result<Field> {
    let lambda = 2f64.powi(k);
    let width = 8.0 / lambda;
    let len = grid.length();
    let raw = Field::from_complex_fn(grid, |x| {
        let d = (x - centre + len / 2.0).rem_euclid(len) - len / 2.0;
        C64::from_polar((-d * d / (2.0 * width * width)).exp(), lambda * x)
    });
    Ok(lp_project(&raw, Projection::BlockPos(k))?)
}

/// Bilinear interaction of a high-frequency packet `u_λ` crossing a low one `v_μ`
/// under `∂_t - |D|^α∂_x - φ_{<1}∂_x`.
///
/// The packets start a distance `L/8` apart and `T` covers three such
/// separations at the relative group speed, so that `u_λ` passes every
/// translate `T_y v_μ` (`|y| ≤ L/16`) exactly once.
pub fn bilinear_pair(alpha: f64, lambda_exp: i32, mu_exp: i32, background: &BackgroundSpec, shifts: usize) -> Result<(BilinearRow, f64)> {
    if lambda_exp <= mu_exp {
        return Err(EstimatesError::Invalid(format!("need λ > μ, got 2^{lambda_exp} and 2^{mu_exp}")));
    }
    let (lambda, mu) = (2f64.powi(lambda_exp), 2f64.powi(mu_exp));
    let k_l = 4;
    let n = ((48.0 * lambda).ceil() as usize).next_power_of_two().max(512);
    let grid = make_grid(k_l, n)?;
    let phi = background.build(&grid, alpha)?;
    let control_a = control_params(&phi.sample(&grid, 0.0), alpha)?.0;
    let len = grid.length();
    let gap = len / 8.0;
    let (xv, xu) = (len / 2.0, len / 2.0 + gap);
    let u0 = band_packet(&grid, lambda_exp, xu)?;
    let v0 = band_packet(&grid, mu_exp, xv)?;
    let relative = (1.0 + alpha) * (lambda.powf(alpha) - mu.powf(alpha));
    let t_final = 3.0 * gap / relative;
    let amp: f64 = phi.modes.iter().map(|m| m.amp.abs()).sum();
    let stable = 0.25 / (amp * 1.5 * lambda).max(1e-12);
    let steps = ((t_final / stable).ceil() as usize).max(800);
    let cfg = EvolutionConfig::new(alpha, t_final / steps as f64, t_final);
    let offsets: Vec<isize> = (0..shifts)
        .map(|i| {
            let y = if shifts == 1 { 0.0 } else { (i as f64 / (shifts - 1) as f64 - 0.5) * gap };
            (y / grid.dx()).round() as isize
        })
        .collect();
    let mut v_frames: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    let mut v_energy = 0.0f64;
    paraproduct_transport_visit(&v0, alpha, &phi, None, &cfg, |_, f| {
        v_energy = v_energy.max(f.l2_norm());
        v_frames.push(f.values().iter().map(|c| c.norm_sqr()).collect());
    })?;
    let mut densities: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); shifts];
    let mut u_energy = 0.0f64;
    let mut frame = 0;
    paraproduct_transport_visit(&u0, alpha, &phi, None, &cfg, |_, f| {
        u_energy = u_energy.max(f.l2_norm());
        let u2: Vec<f64> = f.values().iter().map(|c| c.norm_sqr()).collect();
        let v2 = &v_frames[frame];
        let rows: Vec<f64> = offsets
            .par_iter()
            .map(|&s| {
                let nn = n as isize;
                u2.iter()
                    .enumerate()
                    .map(|(l, a)| a * v2[((l as isize + s).rem_euclid(nn)) as usize])
                    .sum::<f64>()
                    * grid.dx()
            })
            .collect();
        for (d, r) in densities.iter_mut().zip(rows) {
            d.push(r);
        }
        frame += 1;
    })?;
    let h = cfg.dt;
    let product = densities.iter().map(|d| trapezoid_lr(&d.iter().map(|v| v.sqrt()).collect::<Vec<_>>(), 2.0, h)).fold(0.0, f64::max);
    let ratio = product / (u_energy * v_energy);
    Ok((BilinearRow { lambda, mu, product, u_energy, v_energy, ratio, t_final }, control_a))
}

/// Sweep of [`bilinear_pair`] over `λ = 2^e`, fitting the `λ`-exponent of the normalized product.
pub fn bilinear_decay_experiment(
    alpha: f64,
    lambda_exps: &[i32],
    mu_exp: i32,
    background: &BackgroundSpec,
    shifts: usize,
) -> Result<BilinearReport> {
    let mut rows = Vec::with_capacity(lambda_exps.len());
    let mut control_a = 0.0f64;
    for &e in lambda_exps {
        let (row, a) = bilinear_pair(alpha, e, mu_exp, background, shifts)?;
        control_a = control_a.max(a);
        rows.push(row);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    Ok(BilinearReport { alpha, exponent: fit_exponent(&xs, &ys), rows, control_a })
}

/// Real datum with `|φ̂(ξ)| ∝ ⟨ξ⟩^{-(1/2 + s + γ)}`, seeded phases, scaled to `‖φ‖_{H^s} = ε`.
pub fn rough_datum(grid: &Grid, s: f64, eps: f64, gamma: f64, seed: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.n();
    let ny = grid.nyquist_index();
    let cutoff = grid.dealias_cutoff();
    let mut spec = vec![C64::new(0.0, 0.0); n];
    for j in 1..ny {
        let xi = grid.freqs()[j];
        if xi > cutoff {
            continue;
        }
        let amp = (1.0 + xi * xi).powf(-(0.5 + s + gamma) / 2.0);
        let c = C64::from_polar(amp, rng.gen_range(0.0..std::f64::consts::TAU));
        spec[j] = c;
        spec[n - j] = c.conj();
    }
    let f = Field::from_spectrum(grid, spec, true)?;
    let norm = f.sobolev_norm(s);
    Ok(f.scale(eps / norm))
}

/// Outcome of the regularized-data convergence scheme.
#[derive(Clone, Debug)]
pub struct LwpReport {
    /// `(n, sup_t ‖φ^{(n)} - φ^{(n+1)}‖_{H^{s-1/2}})`.
    pub differences: Vec<(i32, f64)>,
    /// Fitted exponent `κ` in `difference ∝ 2^{κ n}`.
    pub rate_exponent: f64,
    /// `max_{n,t,k} ‖P_kφ^{(n)}(t)‖_{H^s} / c_k` with `c_k` the envelope of `φ0`.
    pub envelope_constant: f64,
    /// `(j, k, 2^{α max(j,k)/2} ‖φ_jφ_k‖_{L²_{t,x}} / (c_j c_k))` for the finest run.
    pub bilinear_table: Vec<(usize, usize, f64)>,
}

/// Solve from `P_{<n}φ0` for each `n` and compare successive regularizations.
pub fn lwp_convergence_experiment(
    phi0: &Field,
    alpha: f64,
    s: f64,
    n_list: &[i32],
    t_final: f64,
    dt: f64,
) -> Result<LwpReport> {
    if s <= 0.75 * (1.0 - alpha) {
        return Err(EstimatesError::Invalid(format!("s = {s} is not above 3(1-α)/4")));
    }
    let size = phi0.sobolev_norm(s);
    if size > 0.1 {
        return Err(EstimatesError::Invalid(format!("‖φ0‖_H^s = {size} exceeds 0.1")));
    }
    let grid = phi0.grid();
    let top = n_list.iter().copied().max().ok_or_else(|| EstimatesError::Invalid("empty n list".into()))?;
    if 2f64.powi(top) > grid.dealias_cutoff() {
        return Err(EstimatesError::UnderResolved(format!(
            "2^{top} exceeds the dealias cutoff {}",
            grid.dealias_cutoff()
        )));
    }
    let steps = (t_final / dt).round().max(1.0) as usize;
    let cfg = EvolutionConfig::new(alpha, dt, t_final).with_save_every((steps / 50).max(1));
    let runs: Vec<Trajectory> = n_list
        .par_iter()
        .map(|&n| {
            let data = lp_project(phi0, Projection::Below(n))?;
            Ok(gbo_solve(&data, &cfg)?)
        })
        .collect::<Result<_>>()?;
    let mut differences = Vec::new();
    for (i, w) in runs.windows(2).enumerate() {
        let mut sup = 0.0f64;
        for (a, b) in w[0].fields.iter().zip(&w[1].fields) {
            sup = sup.max(a.sub(b)?.sobolev_norm(s - 0.5));
        }
        differences.push((n_list[i], sup));
    }
    let positive: Vec<&(i32, f64)> = differences.iter().filter(|(_, d)| *d > 0.0).collect();
    let rate_exponent = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|(n, _)| 2f64.powi(*n)).collect();
        let ys: Vec<f64> = positive.iter().map(|(_, d)| *d).collect();
        fit_exponent(&xs, &ys)
    } else {
        f64::NEG_INFINITY
    };
    let env = frequency_envelope(phi0, s, DEFAULT_ENVELOPE_DELTA)?;
    let count = env.values.len();
    let mut envelope_constant = 0.0f64;
    for run in &runs {
        for f in &run.fields {
            for k in 0..count {
                if env.values[k] > 0.0 {
                    let block = lp_project(f, envelope_block(k))?.sobolev_norm(s);
                    envelope_constant = envelope_constant.max(block / env.values[k]);
                }
            }
        }
    }
    let finest = runs.last().expect("n list is non-empty");
    let bilinear_table = bilinear_bound_table(finest, &env, alpha, 3..count.min(9))?;
    Ok(LwpReport { differences, rate_exponent, envelope_constant, bilinear_table })
}

/// `2^{α max(j,k)/2} ‖φ_jφ_k‖_{L²_{t,x}} / (c_j c_k)` for `j ≠ k` in `blocks`,
/// with `c` an envelope of the data (so `ε d_k = c_k`).
pub fn bilinear_bound_table(
    traj: &Trajectory,
    env: &FrequencyEnvelope,
    alpha: f64,
    blocks: std::ops::Range<usize>,
) -> Result<Vec<(usize, usize, f64)>> {
    let h = time_step(traj)?;
    let pieces: Vec<Vec<Field>> = blocks
        .clone()
        .map(|k| traj.fields.iter().map(|f| Ok(lp_project(f, envelope_block(k))?)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (a, j) in blocks.clone().enumerate() {
        for (b, k) in blocks.clone().enumerate() {
            if j >= k || env.values[j] == 0.0 || env.values[k] == 0.0 {
                continue;
            }
            let norms: Vec<f64> =
                pieces[a].iter().zip(&pieces[b]).map(|(x, y)| Ok(x.mul(y)?.l2_norm())).collect::<Result<_>>()?;
            let norm = trapezoid_lr(&norms, 2.0, h);
            let value = 2f64.powf(alpha * j.max(k) as f64 / 2.0) * norm / (env.values[j] * env.values[k]);
            out.push((j, k, value));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::linear_propagate;

    fn constant_trajectory(grid: &Grid, t: f64, frames: usize) -> Trajectory {
        let f = Field::from_fn(grid, |_| 1.0);
        Trajectory {
            times: (0..frames).map(|i| t * i as f64 / (frames - 1) as f64).collect(),
            fields: vec![f; frames],
            config: EvolutionConfig::new(1.0, t / (frames - 1) as f64, t),
        }
    }

    #[test]
    fn constant_norms_are_exact() {
        let grid = make_grid(1, 64).unwrap();
        let l = grid.length();
        let traj = constant_trajectory(&grid, 2.0, 11);
        for (p, q) in [(2.0, 2.0), (4.0, 1.0), (f64::INFINITY, 3.0), (1.0, f64::INFINITY)] {
            let expect = 2f64.powf(if p.is_infinite() { 0.0 } else { 1.0 / p }) * l.powf(if q.is_infinite() { 0.0 } else { 1.0 / q });
            for spec in [MixedNormSpec::new(p, q), MixedNormSpec::new(p, q).lateral()] {
                let got = mixed_norm(&traj, &spec).unwrap();
                assert!((got - expect).abs() < 1e-12 * expect, "{p} {q} {got} {expect}");
            }
        }
    }

    #[test]
    fn unitary_flow_keeps_energy_norm() {
        let grid = make_grid(2, 256).unwrap();
        let u0 = Field::from_fn(&grid, |x| (-(x - 10.0).powi(2)).exp());
        let times: Vec<f64> = (0..21).map(|i| i as f64 * 0.05).collect();
        let fields = times.iter().map(|&t| linear_propagate(&u0, 1.5, t).unwrap()).collect();
        let traj = Trajectory { times, fields, config: EvolutionConfig::new(1.5, 0.05, 1.0) };
        let got = mixed_norm(&traj, &MixedNormSpec::new(f64::INFINITY, 2.0)).unwrap();
        assert!((got - u0.l2_norm()).abs() < 1e-12);
    }

    #[test]
    fn single_mode_weighted_norm() {
        let grid = make_grid(0, 64).unwrap();
        let alpha = 1.5;
        let times: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let speed = grid.dx() / 0.1;
        let fields = times.iter().map(|&t| Field::from_fn(&grid, |x| (3.0 * (x + speed * t)).cos())).collect();
        let traj = Trajectory { times, fields, config: EvolutionConfig::new(alpha, 0.1, 1.0) };
        let s = -(1.0 - alpha) / 4.0;
        let got = mixed_norm(&traj, &MixedNormSpec::new(4.0, f64::INFINITY).with_weight(Weight::Inhomogeneous(s))).unwrap();
        let expect = 10f64.powf(s / 2.0);
        assert!((got - expect).abs() < 1e-12, "{got} {expect}");
    }

    #[test]
    fn non_uniform_and_empty_trajectories_are_rejected() {
        let grid = make_grid(0, 16).unwrap();
        let mut traj = constant_trajectory(&grid, 1.0, 4);
        traj.times[2] += 0.01;
        assert!(matches!(mixed_norm(&traj, &MixedNormSpec::new(2.0, 2.0)), Err(EstimatesError::NonUniform)));
        traj.times.clear();
        traj.fields.clear();
        assert!(matches!(mixed_norm(&traj, &MixedNormSpec::new(2.0, 2.0)), Err(EstimatesError::Empty)));
    }

    #[test]
    fn admissible_pairs() {
        assert!(strichartz_admissible(4.0, f64::INFINITY));
        assert!(strichartz_admissible(f64::INFINITY, 2.0));
        assert!(!strichartz_admissible(4.0, 4.0));
        assert!(!strichartz_admissible(1.0, 2.0));
    }

    #[test]
    fn envelope_of_single_block() {
        let grid = make_grid(2, 1024).unwrap();
        let raw = Field::from_fn(&grid, |x| (32.0 * x).cos() * (-(x - 12.0).powi(2) / 4.0).exp());
        let phi = lp_project(&raw, Projection::Block(5)).unwrap();
        let blocked = lp_project(&phi, Projection::Block(5)).unwrap();
        let env = frequency_envelope(&blocked, 0.5, DEFAULT_ENVELOPE_DELTA).unwrap();
        let top = env.values[5];
        assert!((top - env.block_norms[5]).abs() < 1e-12 * top);
        assert!(env.dominates_blocks() && env.slowly_varying() && env.slowly_varying_attained());
        let zero = frequency_envelope(&Field::zeros(&grid), 0.0, DEFAULT_ENVELOPE_DELTA).unwrap();
        assert!(zero.values.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn control_parameters_of_cosine() {
        let grid = make_grid(0, 64).unwrap();
        let phi = Field::from_fn(&grid, f64::cos);
        for alpha in [1.0, 1.5, 2.0] {
            let (a, b) = control_params(&phi, alpha).unwrap();
            assert!((a - 2f64.powf((1.0 - 3.0 * alpha) / 8.0)).abs() < 1e-12);
            assert!((b - 2f64.powf((1.0 - alpha) / 4.0)).abs() < 1e-12);
        }
        assert_eq!(control_params(&Field::zeros(&grid), 1.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn fit_trims_the_ends() {
        let xs: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| x.powf(-0.5)).collect();
        ys[0] = 100.0;
        ys[9] = 1e-9;
        assert!((fit_exponent(&xs, &ys) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn band_limited_data_have_vanishing_differences() {
        let grid = make_grid(0, 256).unwrap();
        let phi0 = Field::from_fn(&grid, |x| 0.01 * (x.cos() + 0.5 * (2.0 * x).sin()));
        let rep = lwp_convergence_experiment(&phi0, 1.5, 0.0, &[4, 5, 6], 0.1, 1e-3).unwrap();
        assert!(rep.differences.iter().all(|(_, d)| *d < 1e-14), "{:?}", rep.differences);
    }

    #[test]
    fn background_must_stay_low_and_small() {
        let bad = CosineField { modes: vec![CosineMode { amp: 0.1, wavenumber: 1.5, freq: 0.0, phase: 0.0 }] };
        assert!(verify_background(&bad).is_err());
        let big = CosineField { modes: vec![CosineMode { amp: 0.9, wavenumber: 0.5, freq: 0.0, phase: 0.0 }] };
        assert!(verify_background(&big).is_err());
    }
}
