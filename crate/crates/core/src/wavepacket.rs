//! Rescaled transport-dispersive symbols, their Hamilton flow, eikonal phases
//! built by characteristics, the FBI transform, and packet diagnostics.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::evolution::{
    transport_dispersive_solve, CosineField, EvolutionConfig, EvolutionError, TransportCoefficient, TransportSymbol,
    ZeroCoefficient,
};
use crate::spectral_core::{apply_real_multiplier, chi_block, lp_project, make_grid, Field, Grid, Projection, SpectralError, C64};

#[derive(Debug, Error)]
pub enum WavepacketError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("frequency {xi} left the window [{lo}, {hi}] at t = {t}")]
    LeftWindow { t: f64, xi: f64, lo: f64, hi: f64 },
    #[error("characteristic map is not monotone near y = {0}")]
    NotMonotone(f64),
    #[error("transport coefficient is not periodic on the grid")]
    NotPeriodic,
    #[error("phase-space grid under-resolved: {0}")]
    UnderResolved(String),
    #[error("wrap-around diagnostic {0:e} exceeds 1e-3")]
    WrapAround(f64),
    #[error("transport coefficient failed admissibility (worst ratio {0})")]
    NotAdmissible(f64),
}

pub type Result<T> = std::result::Result<T, WavepacketError>;

/// `ã(t, y, ξ) = b̃ ξ + τ μ^{-m} |ξ|^m` with `b̃ = τ μ^{-1} b(τt, μy)` and
/// `μ = τ^{1/2} λ^{-δ}`, `δ = (2-m)/2`.
#[derive(Clone)]
pub struct RescaledSymbol {
    pub b: Arc<dyn TransportCoefficient>,
    pub lambda: f64,
    pub m: f64,
    pub tau: f64,
}

impl std::fmt::Debug for RescaledSymbol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RescaledSymbol").field("lambda", &self.lambda).field("m", &self.m).field("tau", &self.tau).finish()
    }
}

impl RescaledSymbol {
    pub fn new(b: Arc<dyn TransportCoefficient>, lambda: f64, m: f64, tau: f64) -> Result<Self> {
        let lo = lambda.powf(-m);
        if !(tau >= lo * (1.0 - 1e-12) && tau <= 1.0) {
            return Err(WavepacketError::Invalid(format!("tau {tau} outside [{lo}, 1]")));
        }
        Ok(Self { b, lambda, m, tau })
    }

    pub fn delta(&self) -> f64 {
        (2.0 - self.m) / 2.0
    }
    pub fn mu(&self) -> f64 {
        self.tau.sqrt() * self.lambda.powf(-self.delta())
    }
    /// Rescaled frequency `μλ = (τλ^m)^{1/2}`.
    pub fn frequency(&self) -> f64 {
        self.mu() * self.lambda
    }
    fn disp(&self) -> f64 {
        self.tau * self.mu().powf(-self.m)
    }

    pub fn b_tilde(&self, t: f64, y: f64) -> f64 {
        self.tau / self.mu() * self.b.value(self.tau * t, self.mu() * y)
    }
    pub fn b_tilde_x(&self, t: f64, y: f64) -> f64 {
        self.tau * self.b.dx(self.tau * t, self.mu() * y)
    }
    pub fn b_tilde_xx(&self, t: f64, y: f64) -> f64 {
        self.tau * self.mu() * self.b.dxx(self.tau * t, self.mu() * y)
    }

    pub fn value(&self, t: f64, y: f64, xi: f64) -> f64 {
        self.b_tilde(t, y) * xi + self.disp() * xi.abs().powf(self.m)
    }
    pub fn d_xi(&self, t: f64, y: f64, xi: f64) -> f64 {
        self.b_tilde(t, y) + self.disp() * self.m * xi.abs().powf(self.m - 1.0) * xi.signum()
    }
    pub fn d_x(&self, t: f64, y: f64, xi: f64) -> f64 {
        self.b_tilde_x(t, y) * xi
    }
    fn d_xixi(&self, xi: f64) -> f64 {
        self.disp() * self.m * (self.m - 1.0) * xi.abs().powf(self.m - 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: f64,
    pub xi: f64,
}

#[derive(Clone, Debug)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub points: Vec<PhasePoint>,
}

impl FlowPath {
    pub fn last(&self) -> PhasePoint {
        *self.points.last().expect("path has the initial point")
    }
}

/// State `(x, ξ, ∂x, ∂ξ-columns, ψ)` integrated together.
#[derive(Clone, Copy, Debug)]
struct State {
    x: f64,
    xi: f64,
    /// `(∂x^t, ∂ξ^t)` with respect to one initial coordinate.
    jx: [f64; 2],
    jxi: [f64; 2],
    phase: f64,
}

impl State {
    fn axpy(&self, h: f64, d: &State) -> State {
        State {
            x: self.x + h * d.x,
            xi: self.xi + h * d.xi,
            jx: [self.jx[0] + h * d.jx[0], self.jx[1] + h * d.jx[1]],
            jxi: [self.jxi[0] + h * d.jxi[0], self.jxi[1] + h * d.jxi[1]],
            phase: self.phase + h * d.phase,
        }
    }
}

fn rhs(sym: &RescaledSymbol, t: f64, s: &State) -> State {
    let bx = sym.b_tilde_x(t, s.x);
    let bxx = sym.b_tilde_xx(t, s.x);
    let a_xixi = sym.d_xixi(s.xi);
    let a_xi = sym.d_xi(t, s.x, s.xi);
    let lin = |v: [f64; 2]| [bx * v[0] + a_xixi * v[1], -bxx * s.xi * v[0] - bx * v[1]];
    State {
        x: a_xi,
        xi: -sym.d_x(t, s.x, s.xi),
        jx: lin(s.jx),
        jxi: lin(s.jxi),
        phase: s.xi * a_xi - sym.value(t, s.x, s.xi),
    }
}

fn rk4(sym: &RescaledSymbol, t: f64, h: f64, s: &State) -> State {
    let k1 = rhs(sym, t, s);
    let k2 = rhs(sym, t + 0.5 * h, &s.axpy(0.5 * h, &k1));
    let k3 = rhs(sym, t + 0.5 * h, &s.axpy(0.5 * h, &k2));
    let k4 = rhs(sym, t + h, &s.axpy(h, &k3));
    State {
        x: s.x + h / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
        xi: s.xi + h / 6.0 * (k1.xi + 2.0 * k2.xi + 2.0 * k3.xi + k4.xi),
        jx: [
            s.jx[0] + h / 6.0 * (k1.jx[0] + 2.0 * k2.jx[0] + 2.0 * k3.jx[0] + k4.jx[0]),
            s.jx[1] + h / 6.0 * (k1.jx[1] + 2.0 * k2.jx[1] + 2.0 * k3.jx[1] + k4.jx[1]),
        ],
        jxi: [
            s.jxi[0] + h / 6.0 * (k1.jxi[0] + 2.0 * k2.jxi[0] + 2.0 * k3.jxi[0] + k4.jxi[0]),
            s.jxi[1] + h / 6.0 * (k1.jxi[1] + 2.0 * k2.jxi[1] + 2.0 * k3.jxi[1] + k4.jxi[1]),
        ],
        phase: s.phase + h / 6.0 * (k1.phase + 2.0 * k2.phase + 2.0 * k3.phase + k4.phase),
    }
}

/// Integrate from `t0` to `t1` (either direction) with `steps` RK4 steps,
/// checking the frequency window after each step.
fn integrate(
    sym: &RescaledSymbol,
    start: State,
    t0: f64,
    t1: f64,
    steps: usize,
    mut visit: impl FnMut(f64, &State),
) -> Result<State> {
    let h = (t1 - t0) / steps as f64;
    let centre = sym.frequency();
    let (lo, hi) = (centre / 4.0, centre * 4.0);
    let mut s = start;
    visit(t0, &s);
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        s = rk4(sym, t, h, &s);
        if !(s.xi.abs() >= lo && s.xi.abs() <= hi) {
            return Err(WavepacketError::LeftWindow { t: t + h, xi: s.xi, lo, hi });
        }
        visit(t + h, &s);
    }
    Ok(s)
}

fn steps_for(t_start: f64, t_end: f64, dt: f64) -> Result<usize> {
    let span = (t_end - t_start).abs();
    if !(dt > 0.0) || dt > 1e-3 * span {
        return Err(WavepacketError::Invalid(format!("dt {dt} must be positive and at most 1e-3 of the span {span}")));
    }
    Ok((span / dt).ceil() as usize)
}

fn initial(p: PhasePoint) -> State {
    State { x: p.x, xi: p.xi, jx: [1.0, 0.0], jxi: [0.0, 1.0], phase: 0.0 }
}

/// RK4 path of `ẋ = ã_ξ, ξ̇ = -ã_x` from `p0` at time 0.
pub fn hamilton_flow(p0: PhasePoint, sym: &RescaledSymbol, t_end: f64, dt: f64) -> Result<FlowPath> {
    hamilton_flow_between(p0, sym, 0.0, t_end, dt)
}

/// Same as [`hamilton_flow`] between arbitrary times (backwards when `t_end < t_start`).
pub fn hamilton_flow_between(p0: PhasePoint, sym: &RescaledSymbol, t_start: f64, t_end: f64, dt: f64) -> Result<FlowPath> {
    let steps = steps_for(t_start, t_end, dt)?;
    let mut path = FlowPath { times: Vec::with_capacity(steps + 1), points: Vec::with_capacity(steps + 1) };
    integrate(sym, initial(p0), t_start, t_end, steps, |t, s| {
        path.times.push(t);
        path.points.push(PhasePoint { x: s.x, xi: s.xi });
    })?;
    Ok(path)
}

/// Derivatives of the time-`t` flow map with respect to the initial point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowJacobian {
    /// `∂_x x^t`
    pub x_x: f64,
    /// `∂_x ξ^t`
    pub xi_x: f64,
    /// `∂_ξ x^t`
    pub x_xi: f64,
    /// `∂_ξ ξ^t`
    pub xi_xi: f64,
}

/// Jacobian by the variational equations integrated along the flow.
pub fn flow_jacobian(p0: PhasePoint, sym: &RescaledSymbol, t_end: f64, dt: f64) -> Result<FlowJacobian> {
    let steps = steps_for(0.0, t_end, dt)?;
    let s = integrate(sym, initial(p0), 0.0, t_end, steps, |_, _| {})?;
    Ok(FlowJacobian { x_x: s.jx[0], xi_x: s.jx[1], x_xi: s.jxi[0], xi_xi: s.jxi[1] })
}

/// Jacobian by centered differences of the flow with offset `h`.
pub fn flow_jacobian_fd(p0: PhasePoint, sym: &RescaledSymbol, t_end: f64, dt: f64, h: f64) -> Result<FlowJacobian> {
    let end = |p: PhasePoint| hamilton_flow(p, sym, t_end, dt).map(|f| f.last());
    let xp = end(PhasePoint { x: p0.x + h, ..p0 })?;
    let xm = end(PhasePoint { x: p0.x - h, ..p0 })?;
    let kp = end(PhasePoint { xi: p0.xi + h, ..p0 })?;
    let km = end(PhasePoint { xi: p0.xi - h, ..p0 })?;
    Ok(FlowJacobian {
        x_x: (xp.x - xm.x) / (2.0 * h),
        xi_x: (xp.xi - xm.xi) / (2.0 * h),
        x_xi: (kp.x - km.x) / (2.0 * h),
        xi_xi: (kp.xi - km.xi) / (2.0 * h),
    })
}

/// Eikonal phase `ψ_{x,ξ}(t, ·)` tabulated on a periodic grid. Stores the
/// periodic part `g = ψ - ξ(y - x)` at the characteristic end points.
#[derive(Clone, Debug)]
pub struct EikonalTable {
    pub t: f64,
    pub x: f64,
    pub xi: f64,
    grid: Grid,
    /// Characteristic end points reduced to one period, increasing.
    nodes: Vec<f64>,
    g: Vec<f64>,
    slope: Vec<f64>,
    /// `∂_{y0} y^t` and `∂_{y0} η^t` at each node.
    jac: Vec<(f64, f64)>,
}

impl EikonalTable {
    fn locate(&self, y: f64) -> (usize, f64, f64) {
        let period = self.grid.length();
        let n = self.nodes.len();
        let base = self.nodes[0];
        let yr = base + (y - base).rem_euclid(period);
        let i = match self.nodes.partition_point(|&v| v <= yr) {
            0 => 0,
            p => p - 1,
        };
        let (y0, y1) = if i + 1 < n { (self.nodes[i], self.nodes[i + 1]) } else { (self.nodes[i], base + period) };
        (i, y0, (yr - y0) / (y1 - y0))
    }

    fn hermite(&self, y: f64) -> (f64, f64) {
        let n = self.nodes.len();
        let (i, y0, s) = self.locate(y);
        let j = (i + 1) % n;
        let y1 = if i + 1 < n { self.nodes[i + 1] } else { self.nodes[0] + self.grid.length() };
        let h = y1 - y0;
        let (g0, g1, m0, m1) = (self.g[i], self.g[j], self.slope[i], self.slope[j]);
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        let value = h00 * g0 + h10 * h * m0 + h01 * g1 + h11 * h * m1;
        let d00 = 6.0 * s * s - 6.0 * s;
        let d10 = 3.0 * s * s - 4.0 * s + 1.0;
        let d01 = -6.0 * s * s + 6.0 * s;
        let d11 = 3.0 * s * s - 2.0 * s;
        let deriv = (d00 * g0 + d01 * g1) / h + d10 * m0 + d11 * m1;
        (value, deriv)
    }

    /// `ψ(t, y)`.
    pub fn psi(&self, y: f64) -> f64 {
        self.hermite(y).0 + self.xi * (y - self.x)
    }

    /// `∂_y ψ(t, y)`.
    pub fn psi_y(&self, y: f64) -> f64 {
        self.hermite(y).1 + self.xi
    }

    /// Periodic part on the grid.
    pub fn periodic_part(&self) -> Field {
        Field::from_fn(&self.grid, |y| self.hermite(y).0)
    }

    /// `∂_y² ψ` on the grid by spectral differentiation of the periodic part.
    pub fn psi_yy_spectral(&self) -> Result<Field> {
        Ok(apply_real_multiplier(&self.periodic_part(), |k| -k * k)?)
    }

    /// `∂_y² ψ` at the characteristic end points from the variational equations:
    /// `∂_{y0} η^t / ∂_{y0} y^t`.
    pub fn psi_yy_characteristic(&self) -> Vec<(f64, f64)> {
        self.nodes.iter().zip(&self.jac).map(|(&y, &(a, b))| (y, b / a)).collect()
    }
}

/// Phase `ψ(t_end, ·)` with `ψ(0, y) = ξ(y - x)` by characteristics launched from
/// every grid point. `ã` must be periodic with the grid period.
pub fn eikonal_solve(x: f64, xi: f64, sym: &RescaledSymbol, grid: &Grid, t_end: f64, dt: f64) -> Result<EikonalTable> {
    let period = grid.length();
    for &t in &[0.0, 0.37 * t_end, t_end] {
        for &y in &[0.0, 0.3, 1.7] {
            let d = (sym.b_tilde(t, y + period) - sym.b_tilde(t, y)).abs();
            if d > 1e-9 * (1.0 + sym.b_tilde(t, y).abs()) {
                return Err(WavepacketError::NotPeriodic);
            }
        }
    }
    let steps = steps_for(0.0, t_end, dt)?;
    let launches: Vec<f64> = (0..grid.n()).map(|i| x + grid.x(i)).collect();
    let ends: Vec<State> = launches
        .par_iter()
        .map(|&y0| {
            let mut st = initial(PhasePoint { x: y0, xi });
            st.phase = 0.0;
            integrate(sym, st, 0.0, t_end, steps, |_, _| {})
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<(f64, f64, f64, (f64, f64))> = Vec::with_capacity(ends.len());
    for (y0, s) in launches.iter().zip(&ends) {
        if s.jx[0] <= 0.0 {
            return Err(WavepacketError::NotMonotone(*y0));
        }
        let psi = xi * (y0 - x) + s.phase;
        let g = psi - xi * (s.x - x);
        rows.push((s.x, g, s.xi - xi, (s.jx[0], s.jx[1])));
    }
    for w in rows.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(WavepacketError::NotMonotone(w[0].0));
        }
    }
    if rows[0].0 + period <= rows[rows.len() - 1].0 {
        return Err(WavepacketError::NotMonotone(rows[0].0));
    }
    let nodes = rows.iter().map(|r| r.0).collect();
    let g = rows.iter().map(|r| r.1).collect();
    let slope = rows.iter().map(|r| r.2).collect();
    let jac = rows.iter().map(|r| r.3).collect();
    Ok(EikonalTable { t: t_end, x, xi, grid: grid.clone(), nodes, g, slope, jac })
}

/// `2^{-1/2} π^{-3/4}`
const FBI_NORM: f64 = 0.299_655_737_576_611_9;

/// Samples of `(Tf)(x_i, ξ_j)` on the position × frequency grid.
#[derive(Clone, Debug)]
pub struct PhaseSpace {
    grid: Grid,
    /// Row `i` (position), column `j` (frequency slot).
    pub data: Vec<C64>,
}

impl PhaseSpace {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn at(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.grid.n() + j]
    }
    /// `‖F‖_{L²(dx dξ)}`.
    pub fn l2_norm(&self) -> f64 {
        let w = self.grid.dx() * self.grid.dk();
        (self.data.iter().map(|c| c.norm_sqr()).sum::<f64>() * w).sqrt()
    }
    /// `⟨F, G⟩` in `L²(dx dξ)`.
    pub fn inner(&self, other: &PhaseSpace) -> C64 {
        let w = self.grid.dx() * self.grid.dk();
        self.data.iter().zip(&other.data).map(|(a, b)| a * b.conj()).sum::<C64>() * w
    }
    /// Unit mass at the sample nearest `(x0, ξ0)`, scaled so that it has `L²` norm one.
    pub fn delta(grid: &Grid, x0: f64, xi0: f64) -> Self {
        let n = grid.n();
        let i = ((x0 / grid.dx()).round() as i64).rem_euclid(n as i64) as usize;
        let j = grid.slot((xi0 / grid.dk()).round() as i64).unwrap_or(0);
        let mut data = vec![C64::new(0.0, 0.0); n * n];
        data[i * n + j] = C64::new(1.0 / (grid.dx() * grid.dk()).sqrt(), 0.0);
        Self { grid: grid.clone(), data }
    }
    /// Long-format rows `(x, ξ, |F|²)`.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let n = self.grid.n();
        (0..n * n).map(move |idx| (self.grid.x(idx / n), self.grid.freqs()[idx % n], self.data[idx].norm_sqr()))
    }
}

fn check_fbi_grid(grid: &Grid) -> Result<()> {
    if grid.length() < 4.0 * std::f64::consts::PI - 1e-12 {
        return Err(WavepacketError::UnderResolved(format!("period {} below 4π", grid.length())));
    }
    if grid.dx() > 0.5 {
        return Err(WavepacketError::UnderResolved(format!("dx {} above 0.5", grid.dx())));
    }
    Ok(())
}

/// Periodized window `Σ_n e^{-(s + nL)²/2}` at every grid offset.
fn window(grid: &Grid) -> Vec<f64> {
    let l = grid.length();
    (0..grid.n())
        .map(|d| {
            let s = grid.x(d);
            (-3..=3).map(|n| (-(s + n as f64 * l).powi(2) / 2.0).exp()).sum()
        })
        .collect()
}

/// `(Tf)(x, ξ) = 2^{-1/2}π^{-3/4} ∫ e^{-(x-y)²/2} e^{iξ(x-y)} f(y) dy` with one FFT per position.
pub fn fbi_transform(f: &Field) -> Result<PhaseSpace> {
    let grid = f.grid();
    check_fbi_grid(grid)?;
    let n = grid.n();
    let w = window(grid);
    let l = grid.length();
    let rows: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi_pos = grid.x(i);
            let g: Vec<C64> = (0..n).map(|l_| f.values()[l_] * w[(i + n - l_) % n]).collect();
            let spec = grid.forward(&g);
            spec.iter()
                .zip(grid.freqs())
                .map(|(c, &k)| c * C64::from_polar(FBI_NORM * l, k * xi_pos))
                .collect()
        })
        .collect();
    Ok(PhaseSpace { grid: grid.clone(), data: rows.concat() })
}

/// Adjoint `T^*F(y) = 2^{-1/2}π^{-3/4} ∫ e^{-(x-y)²/2} e^{-iξ(x-y)} F(x, ξ) dx dξ`.
pub fn fbi_inverse(ps: &PhaseSpace) -> Result<Field> {
    let grid = &ps.grid;
    check_fbi_grid(grid)?;
    let n = grid.n();
    let w = window(grid);
    let scale = FBI_NORM * grid.dx() * grid.dk();
    let backs: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = grid.x(i);
            let h: Vec<C64> = (0..n).map(|j| ps.data[i * n + j] * C64::from_polar(1.0, -grid.freqs()[j] * x)).collect();
            grid.inverse(&h)
        })
        .collect();
    let out: Vec<C64> = (0..n)
        .into_par_iter()
        .map(|l_| (0..n).map(|i| backs[i][l_] * (scale * w[(i + n - l_) % n])).sum())
        .collect();
    Ok(Field::from_complex(grid, out)?)
}

/// Normalized coherent state centred at `(x0, ξ0)`.
pub fn coherent_state(grid: &Grid, x0: f64, xi0: f64) -> Result<Field> {
    let f = fbi_inverse(&PhaseSpace::delta(grid, x0, xi0))?;
    let norm = f.l2_norm();
    Ok(f.scale(1.0 / norm))
}

/// Phase-space concentration of an evolved packet.
#[derive(Clone, Debug)]
pub struct CoherenceReport {
    pub centre: PhasePoint,
    pub radius: f64,
    pub fraction: f64,
}

/// Centre of a packet evolved by `i u_t = -A u`: the flow of `-a` with
/// `a = bξ + |ξ|^m` in unscaled variables.
pub fn packet_centre(p0: PhasePoint, sym: &TransportSymbol, t_end: f64, steps: usize) -> PhasePoint {
    let m = sym.m;
    let f = |t: f64, p: PhasePoint| -> (f64, f64) {
        let vx = -(sym.b.value(t, p.x) + m * p.xi.abs().powf(m - 1.0) * p.xi.signum());
        let vxi = sym.b.dx(t, p.x) * p.xi;
        (vx, vxi)
    };
    let h = t_end / steps as f64;
    let mut p = p0;
    for s in 0..steps {
        let t = s as f64 * h;
        let k1 = f(t, p);
        let k2 = f(t + 0.5 * h, PhasePoint { x: p.x + 0.5 * h * k1.0, xi: p.xi + 0.5 * h * k1.1 });
        let k3 = f(t + 0.5 * h, PhasePoint { x: p.x + 0.5 * h * k2.0, xi: p.xi + 0.5 * h * k2.1 });
        let k4 = f(t + h, PhasePoint { x: p.x + h * k3.0, xi: p.xi + h * k3.1 });
        p = PhasePoint {
            x: p.x + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            xi: p.xi + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        };
    }
    p
}

/// Fraction of `|Tu|²` within phase-space distance `radius` of `centre`.
pub fn mass_fraction(ps: &PhaseSpace, centre: PhasePoint, radius: f64) -> f64 {
    let grid = ps.grid();
    let n = grid.n();
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 0..n {
        let dx = grid.torus_distance(grid.x(i), centre.x);
        for j in 0..n {
            let w = ps.data[i * n + j].norm_sqr();
            total += w;
            let dxi = grid.freqs()[j] - centre.xi;
            if dx * dx + dxi * dxi <= radius * radius {
                inside += w;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

/// Evolve a coherent state at `(x0, ξ0)` and measure its concentration around
/// the transported phase-space point.
pub fn packet_coherence_check(sym: &TransportSymbol, grid: &Grid, p0: PhasePoint, t_end: f64, dt: f64, radius: f64) -> Result<CoherenceReport> {
    let u0 = coherent_state(grid, p0.x, p0.xi)?;
    let u0 = lp_project(&u0, Projection::Block(sym.k))?;
    let u = if t_end == 0.0 {
        u0
    } else {
        let cfg = EvolutionConfig::new(0.0, dt, t_end).with_save_every(usize::MAX);
        transport_dispersive_solve(&u0, sym, None, &cfg)?.last().clone()
    };
    let steps = ((t_end / dt).ceil() as usize).max(1);
    let centre = if t_end == 0.0 { p0 } else { packet_centre(p0, sym, t_end, steps) };
    let ps = fbi_transform(&u)?;
    Ok(CoherenceReport { centre, radius, fraction: mass_fraction(&ps, centre, radius) })
}

/// Least-squares `log y = slope·log x + c`.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Transport coefficient choice for the decay experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientSpec {
    Zero,
    /// Random admissible cosine field, verified before use.
    Random { seed: u64, modes: usize },
}

impl CoefficientSpec {
    /// Build and verify the coefficient for `(m, λ)`.
    pub fn build(&self, m: f64, lambda: f64) -> Result<Arc<dyn TransportCoefficient>> {
        match self {
            CoefficientSpec::Zero => Ok(Arc::new(ZeroCoefficient)),
            CoefficientSpec::Random { seed, modes } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let field = CosineField::random_admissible(&mut rng, m, lambda, 1.0, *modes);
                let report = field.verify(m, lambda);
                if !report.admissible() {
                    return Err(WavepacketError::NotAdmissible(report.worst_ratio()));
                }
                Ok(Arc::new(field))
            }
        }
    }
}

/// Result of one decay run.
#[derive(Clone, Debug)]
pub struct DecayRun {
    pub lambda: f64,
    pub m: f64,
    /// `(t, ‖u(t)‖_∞)` over the fit window.
    pub samples: Vec<(f64, f64)>,
    pub l1_initial: f64,
    pub slope: f64,
    /// Median of `t^{1/2}‖u(t)‖_∞ / ‖u0‖_{L¹}` over the window.
    pub prefactor: f64,
    pub wrap: f64,
    /// `sup_y |u(t,y)| / (λ^{1/2} t^{-1/2} ∫|y-ỹ|^{-1/2}|u0(ỹ)| dỹ)` at the last sample.
    pub lateral_ratio: f64,
}

/// Sweep result: per-λ runs and the fitted `λ`-exponent of the prefactor.
#[derive(Clone, Debug)]
pub struct DecaySweep {
    pub runs: Vec<DecayRun>,
    pub lambda_exponent: f64,
}

/// Grid for a decay run at `λ`: Nyquist at least `4λ`, period covering twice the
/// distance swept by the band's group velocities.
pub fn decay_grid(lambda: f64, m: f64, t_max: f64) -> Result<Grid> {
    let swept = t_max * m * (2.0 * lambda).powf(m - 1.0);
    let needed = 2.0 * swept + 40.0 / lambda + 8.0;
    let mut k_l = 0;
    while std::f64::consts::TAU * 2f64.powi(k_l) < needed {
        k_l += 1;
    }
    let min_n = 8.0 * lambda * 2f64.powi(k_l);
    let n = (min_n.ceil() as usize).next_power_of_two().max(64);
    Ok(make_grid(k_l, n)?)
}

fn swept_interval(x0: f64, lambda: f64, m: f64, t: f64, drift: f64) -> (f64, f64) {
    let fast = m * (2.0 * lambda).powf(m - 1.0);
    let slow = m * (0.5 * lambda).powf(m - 1.0);
    let margin = 20.0 / lambda + drift * t + 1.0;
    (x0 - t * fast - margin, x0 - t * slow + margin)
}

/// Default upper end of the decay window in units of `λ^{-m}`.
pub const DECAY_HORIZON: f64 = 256.0;

/// `‖u(t)‖_∞` decay for `u0 = P_λ^+(narrow bump)` under `i u_t = -A u`.
///
/// The fit uses `samples` equally spaced times in `[4λ^{-m}, horizon·λ^{-m}]`;
/// [`DECAY_HORIZON`] keeps the early pre-asymptotic regime from dominating.
pub fn dispersive_decay_run(lambda_exp: i32, m: f64, coeff: &CoefficientSpec, samples: usize, horizon: f64) -> Result<DecayRun> {
    let lambda = 2f64.powi(lambda_exp);
    let t0 = 4.0 * lambda.powf(-m);
    let t1 = horizon * lambda.powf(-m);
    let grid = decay_grid(lambda, m, t1)?;
    let b = coeff.build(m, lambda)?;
    let drift = (0..64).map(|i| b.value(0.0, i as f64 * 0.1).abs()).fold(0.0, f64::max) * 2.0;
    let sym = TransportSymbol::new(b, m, lambda_exp);
    let x0 = 0.75 * grid.length();
    let width = 1.0 / lambda;
    let bump = Field::from_fn(&grid, |x| {
        let d = grid.torus_distance(x, x0);
        (-d * d / (2.0 * width * width)).exp()
    });
    let u0 = lp_project(&bump, Projection::BlockPos(lambda_exp))?;
    let l1_initial = u0.l1_norm();
    let targets: Vec<f64> = (0..samples).map(|i| t0 + (t1 - t0) * i as f64 / (samples - 1) as f64).collect();
    let top = 2.0 * lambda;
    let rate = top * (1.0 + top.powf(m - 1.0)) + 1.0;
    let steps = (t1 / (0.5 / rate).min(t0 / 20.0)).ceil() as usize;
    let dt = t1 / steps as f64;
    let save_every = (steps / 400).max(1);
    let cfg = EvolutionConfig::new(0.0, dt, t1).with_save_every(save_every);
    let traj = transport_dispersive_solve(&u0, &sym, None, &cfg)?;
    let mut out = Vec::with_capacity(samples);
    let mut wrap = 0.0f64;
    for &target in &targets {
        let idx = traj
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - target).abs().partial_cmp(&(b.1 - target).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (t, current) = (traj.times[idx], &traj.fields[idx]);
        out.push((t, current.sup_norm()));
        let (lo, hi) = swept_interval(x0, lambda, m, t, drift);
        if hi - lo >= grid.length() {
            return Err(WavepacketError::WrapAround(1.0));
        }
        let total = current.l2_norm().powi(2);
        let outside: f64 = current
            .values()
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let x = grid.x(*i);
                lo + (x - lo).rem_euclid(grid.length()) > hi
            })
            .map(|(_, v)| v.norm_sqr())
            .sum::<f64>()
            * grid.dx();
        wrap = wrap.max(outside / total);
    }
    out.dedup_by(|a, b| a.0 == b.0);
    let current = traj.fields.last().expect("trajectory has frames");
    if wrap > 1e-3 {
        return Err(WavepacketError::WrapAround(wrap));
    }
    let (ts, sups): (Vec<f64>, Vec<f64>) = out.iter().cloned().unzip();
    let (slope, _) = log_log_fit(&ts, &sups);
    let mut pref: Vec<f64> = out.iter().map(|(t, s)| t.sqrt() * s / l1_initial).collect();
    pref.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let prefactor = pref[pref.len() / 2];
    let lateral_ratio = lateral_ratio(&u0, current, lambda, t1);
    Ok(DecayRun { lambda, m, samples: out, l1_initial, slope, prefactor, wrap, lateral_ratio })
}

/// `sup_y |u(y)| / (λ^{1/2} t^{-1/2} ∫ |y-ỹ|^{-1/2} |u0(ỹ)| dỹ)` over the grid,
/// with the kernel floored at half a cell.
pub fn lateral_ratio(u0: &Field, u: &Field, lambda: f64, t: f64) -> f64 {
    let grid = u0.grid();
    let n = grid.n();
    let abs0: Vec<(usize, f64)> = u0.values().iter().map(|c| c.norm()).enumerate().filter(|(_, v)| *v > 1e-12).collect();
    let step = (n / 512).max(1);
    (0..n)
        .into_par_iter()
        .step_by(step)
        .map(|i| {
            let y = grid.x(i);
            let kernel: f64 = abs0
                .iter()
                .map(|&(j, v)| {
                    let d = grid.torus_distance(y, grid.x(j)).max(0.5 * grid.dx());
                    v * d.powf(-0.5)
                })
                .sum::<f64>()
                * grid.dx();
            u.values()[i].norm() / (lambda.sqrt() * t.powf(-0.5) * kernel)
        })
        .reduce(|| 0.0, f64::max)
}

/// Decay runs over `λ = 2^e` for `e` in `exps`, with the `λ`-exponent of the prefactor.
pub fn dispersive_decay_experiment(exps: &[i32], m: f64, coeff: &CoefficientSpec, samples: usize, horizon: f64) -> Result<DecaySweep> {
    let runs: Vec<DecayRun> =
        exps.par_iter().map(|&e| dispersive_decay_run(e, m, coeff, samples, horizon)).collect::<Result<_>>()?;
    let lambdas: Vec<f64> = runs.iter().map(|r| r.lambda).collect();
    let prefs: Vec<f64> = runs.iter().map(|r| r.prefactor).collect();
    let (lambda_exponent, _) = log_log_fit(&lambdas, &prefs);
    Ok(DecaySweep { runs, lambda_exponent })
}

/// Frequency window of the block `λ = 2^k` (used by callers building data).
pub fn in_block(k: i32, xi: f64) -> bool {
    chi_block(k, xi) > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free(lambda: f64, m: f64, tau: f64) -> RescaledSymbol {
        RescaledSymbol::new(Arc::new(ZeroCoefficient), lambda, m, tau).unwrap()
    }

    #[test]
    fn rescaling_identities() {
        let s = free(64.0, 3.0, 0.01);
        assert!((s.mu() - 0.1 * 64f64.powf(0.5)).abs() < 1e-12);
        assert!((s.frequency() - (0.01 * 64f64.powi(3)).sqrt()).abs() < 1e-9);
        assert!(RescaledSymbol::new(Arc::new(ZeroCoefficient), 64.0, 2.0, 1e-6).is_err());
    }

    #[test]
    fn free_flow_is_linear_drift() {
        let s = free(32.0, 2.5, 0.5);
        let xi0 = s.frequency();
        let path = hamilton_flow(PhasePoint { x: 0.3, xi: xi0 }, &s, 1.0, 1e-3).unwrap();
        let end = path.last();
        let speed = s.d_xi(0.0, 0.0, xi0);
        assert_eq!(end.xi, xi0);
        assert!((end.x - 0.3 - speed).abs() < 1e-9 * speed);
        let j = flow_jacobian(PhasePoint { x: 0.3, xi: xi0 }, &s, 1.0, 1e-3).unwrap();
        assert_eq!((j.x_x, j.xi_x), (1.0, 0.0));
    }

    #[test]
    fn fbi_is_isometric_and_inverted() {
        let grid = make_grid(2, 256).unwrap();
        let f = Field::from_complex_fn(&grid, |x| C64::new((x.sin() * 2.0).exp() * 0.1, (3.0 * x).cos()));
        let t = fbi_transform(&f).unwrap();
        assert!((t.l2_norm() / f.l2_norm() - 1.0).abs() < 1e-10);
        let back = fbi_inverse(&t).unwrap();
        assert!(back.max_diff(&f) < 1e-10 * f.sup_norm());
        assert!(fbi_transform(&Field::zeros(&make_grid(0, 64).unwrap())).is_err());
    }

    #[test]
    fn hermite_fit_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        let (s, c) = log_log_fit(&xs, &ys);
        assert!((s + 0.5).abs() < 1e-12 && (c - 3f64.ln()).abs() < 1e-12);
    }

    fn admissible(m: f64, lambda: f64, base: f64, seed: u64) -> Arc<dyn TransportCoefficient> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = CosineField::random_admissible(&mut rng, m, lambda, base, 3);
        assert!(b.verify(m, lambda).admissible());
        Arc::new(b)
    }

    #[test]
    fn variational_jacobian_matches_differences_and_flow_reverses() {
        let s = RescaledSymbol::new(admissible(2.5, 64.0, 1.0, 11), 64.0, 2.5, 0.02).unwrap();
        let t = 0.1 / s.tau;
        let p0 = PhasePoint { x: 0.7, xi: s.frequency() };
        let j = flow_jacobian(p0, &s, t, t * 1e-3).unwrap();
        let fd = flow_jacobian_fd(p0, &s, t, t * 1e-3, 1e-5).unwrap();
        for (a, b) in [(j.x_x, fd.x_x), (j.xi_x, fd.xi_x), (j.x_xi, fd.x_xi), (j.xi_xi, fd.xi_xi)] {
            assert!((a - b).abs() < 1e-5 * (1.0 + a.abs()), "{j:?} {fd:?}");
        }
        assert!((j.x_x - 1.0).abs() <= 0.5);
        assert!((j.x_xi / t / (2.5 * 1.5) - 1.0).abs() < 0.1);
        let dt = t * 1e-4;
        let end = hamilton_flow(p0, &s, t, dt).unwrap().last();
        let back = hamilton_flow_between(end, &s, t, 0.0, dt).unwrap().last();
        assert!((back.x - p0.x).abs() < 1e-8 && (back.xi - p0.xi).abs() < 1e-8 * p0.xi);
    }

    #[test]
    fn flow_leaving_window_is_reported() {
        let s = free(16.0, 2.0, 1.0);
        let err = hamilton_flow(PhasePoint { x: 0.0, xi: 100.0 }, &s, 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, WavepacketError::LeftWindow { .. }));
    }

    #[test]
    fn free_eikonal_matches_closed_form() {
        let grid = make_grid(1, 64).unwrap();
        let s = free(32.0, 3.0, 0.1);
        let xi = s.frequency();
        let tab = eikonal_solve(0.5, xi, &s, &grid, 1.0, 1e-3).unwrap();
        let disp = s.tau * s.mu().powf(-3.0);
        for i in 0..40 {
            let y = -3.0 + 0.37 * i as f64;
            let exact = xi * (y - 0.5) - disp * xi.powi(3);
            assert!((tab.psi(y) - exact).abs() < 1e-8 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn eikonal_solves_its_equation_for_variable_transport() {
        let grid = make_grid(2, 256).unwrap();
        let (m, lambda, tau): (f64, f64, f64) = (2.0, 64.0, 0.05);
        let mu = tau.sqrt();
        let s = RescaledSymbol::new(admissible(m, lambda, 1.0 / (mu * 4.0), 7), lambda, m, tau).unwrap();
        let (xi, t) = (s.frequency(), 0.1 / tau);
        let dt = t * 0.9e-3;
        let h = t * 1e-3;
        let tab = eikonal_solve(1.0, xi, &s, &grid, t, dt).unwrap();
        let plus = eikonal_solve(1.0, xi, &s, &grid, t + h, dt).unwrap();
        let minus = eikonal_solve(1.0, xi, &s, &grid, t - h, dt).unwrap();
        for i in 0..100 {
            let y = 0.23 * i as f64;
            let a = s.value(t, y, tab.psi_y(y));
            let residual = (plus.psi(y) - minus.psi(y)) / (2.0 * h) + a;
            assert!(residual.abs() <= 1e-3 * a.abs());
        }
        let spectral = tab.psi_yy_spectral().unwrap();
        for (y, v) in tab.psi_yy_characteristic().into_iter().step_by(16) {
            let interp: C64 =
                spectral.spectrum().iter().zip(grid.freqs()).map(|(c, &k)| c * C64::from_polar(1.0, k * y)).sum();
            assert!((interp.re - v).abs() < 1e-3 * (1.0 + v.abs()), "{y}: {} vs {v}", interp.re);
        }
    }

    #[test]
    fn eikonal_rejects_aperiodic_transport() {
        let grid = make_grid(2, 64).unwrap();
        let s = RescaledSymbol::new(admissible(2.0, 64.0, 0.3, 1), 64.0, 2.0, 0.05).unwrap();
        let err = eikonal_solve(0.0, s.frequency(), &s, &grid, 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, WavepacketError::NotPeriodic));
    }

    #[test]
    fn coherent_state_concentrates_and_drifts() {
        let grid = make_grid(3, 1024).unwrap();
        let p0 = PhasePoint { x: 30.0, xi: 16.0 };
        let zero = TransportSymbol::new(Arc::new(ZeroCoefficient), 2.0, 4);
        let at_rest = packet_coherence_check(&zero, &grid, p0, 0.0, 1e-3, 5.0).unwrap();
        assert!(at_rest.fraction >= 0.99);
        let moved = packet_coherence_check(&zero, &grid, p0, 0.5, 1e-3, 5.0).unwrap();
        assert!((moved.centre.x - (30.0 - 2.0 * 16.0 * 0.5)).abs() < 1e-9);
        assert!(moved.fraction >= 0.9);
    }

    #[test]
    fn free_schroedinger_band_decays_at_half_rate() {
        let run = dispersive_decay_run(4, 2.0, &CoefficientSpec::Zero, 64, DECAY_HORIZON).unwrap();
        assert!((run.slope + 0.5).abs() <= 0.05, "{}", run.slope);
        assert!(run.wrap < 1e-3);
    }
}
