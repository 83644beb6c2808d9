//! Finite-volume plant: uniform grid on Ω = (−1,1)², controlled
//! advection–diffusion of a density, semi-implicit time stepping.
//!
//! The state y is a cell-centered density. One step advances
//!
//! ```text
//! (h²I + Δt·ν·L) y' = h² y − Δt · Adv(u + v, y)
//! ```
//!
//! where L is the Neumann graph Laplacian (ghost-cell reflection, zero
//! diffusive flux through ∂Ω), and Adv is the conservative first-order
//! upwind advective divergence with zero boundary flux. Both flux families
//! telescope over interior faces, so the total mass Σ y h² is conserved to
//! solver roundoff at every step; no renormalization is ever applied.
//!
//! The implicit system is solved in increment form S·d = −Δt(Adv + νLy)
//! with conjugate gradients on mirror-paired reductions (see [`crate::sym`]),
//! which makes a zero right-hand side return y unchanged bitwise and makes
//! mirroring about x2 = 0 commute with [`step`] bit for bit.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::sym::{mirror_cells, sym_dot, sym_sum};
use crate::{Error, Result};

/// Relative CG residual reduction for the implicit diffusion solve.
///
/// The system is near-identity (κ ≈ 1 + 4Δtν/h²), so the tight tolerance
/// costs only a few iterations while keeping the residual-induced mass
/// error far below the 1e-10 conservation budget.
pub const CG_RTOL: f64 = 1e-14;

/// Uniform cell-centered nx×nx grid on (−1,1)².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    nx: usize,
    h: f64,
}

impl Grid {
    /// Builds a grid with nx cells per direction. nx must be even and ≥ 8.
    pub fn build(nx: usize) -> Result<Grid> {
        if nx < 8 {
            return Err(Error::invalid(format!("grid nx = {nx} is below the minimum of 8")));
        }
        if nx % 2 != 0 {
            return Err(Error::invalid(format!("grid nx = {nx} must be even")));
        }
        Ok(Grid { nx, h: 2.0 / nx as f64 })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Cell width h = 2/nx.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.nx
    }

    /// Flat index of cell (i, j); i runs along x1, j along x2.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.nx);
        j * self.nx + i
    }

    /// Center of cell k: (−1 + (i+0.5)h, −1 + (j+0.5)h) with k = j·nx + i.
    pub fn cell_center(&self, k: usize) -> (f64, f64) {
        let i = k % self.nx;
        let j = k / self.nx;
        (
            -1.0 + (i as f64 + 0.5) * self.h,
            -1.0 + (j as f64 + 0.5) * self.h,
        )
    }

    /// All cell centers in flat-index order.
    pub fn cell_centers(&self) -> Vec<(f64, f64)> {
        (0..self.n_cells()).map(|k| self.cell_center(k)).collect()
    }

    /// Flat index of the nearest cell center to a point.
    pub fn nearest_cell(&self, x1: f64, x2: f64) -> usize {
        let clamp = |t: f64| -> usize {
            let i = ((t + 1.0) / self.h).floor() as isize;
            i.clamp(0, self.nx as isize - 1) as usize
        };
        self.index(clamp(x1), clamp(x2))
    }
}

/// Cell-centered density field.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub grid: Grid,
    pub values: DVector<f64>,
}

impl StateField {
    pub fn new(grid: Grid, values: DVector<f64>) -> Result<StateField> {
        if values.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "state field has {} values for a grid of {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        Ok(StateField { grid, values })
    }

    pub fn zeros(grid: Grid) -> StateField {
        StateField { grid, values: DVector::zeros(grid.n_cells()) }
    }

    /// Field mirrored about x2 = 0.
    pub fn mirrored(&self) -> StateField {
        let vals = mirror_cells(self.grid.nx(), self.values.as_slice());
        StateField { grid: self.grid, values: DVector::from_vec(vals) }
    }
}

/// Cell-centered velocity field with components along x1 (ux) and x2 (uy).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    pub grid: Grid,
    pub ux: DVector<f64>,
    pub uy: DVector<f64>,
}

impl ControlField {
    pub fn new(grid: Grid, ux: DVector<f64>, uy: DVector<f64>) -> Result<ControlField> {
        if ux.len() != grid.n_cells() || uy.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "control field components have {}/{} values for a grid of {} cells",
                ux.len(),
                uy.len(),
                grid.n_cells()
            )));
        }
        Ok(ControlField { grid, ux, uy })
    }

    pub fn zeros(grid: Grid) -> ControlField {
        ControlField {
            grid,
            ux: DVector::zeros(grid.n_cells()),
            uy: DVector::zeros(grid.n_cells()),
        }
    }

    /// Mirror about x2 = 0: rows reversed, x2-component negated.
    pub fn mirrored(&self) -> ControlField {
        let nx = self.grid.nx();
        let ux = mirror_cells(nx, self.ux.as_slice());
        let mut uy = mirror_cells(nx, self.uy.as_slice());
        for v in &mut uy {
            *v = -*v;
        }
        ControlField {
            grid: self.grid,
            ux: DVector::from_vec(ux),
            uy: DVector::from_vec(uy),
        }
    }
}

/// Analytic background flow: v(x) = ((x1+1)(1−x1)·γ·sin α, γ·cos α).
///
/// A crosswind with vertical strength γ·cos α and a horizontal shear that
/// vanishes on the lateral walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFlow {
    pub gamma: f64,
    pub alpha: f64,
}

/// Samples the analytic background flow at the cell centers.
pub fn background_flow(grid: Grid, flow: AnalyticFlow) -> ControlField {
    let n = grid.n_cells();
    let mut ux = DVector::zeros(n);
    let mut uy = DVector::zeros(n);
    let (s, c) = (flow.alpha.sin(), flow.alpha.cos());
    for k in 0..n {
        let (x1, _) = grid.cell_center(k);
        ux[k] = (x1 + 1.0) * (1.0 - x1) * flow.gamma * s;
        uy[k] = flow.gamma * c;
    }
    ControlField { grid, ux, uy }
}

/// A steering task: where the density should go, and through what medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Target distribution center (μ1, μ2).
    pub target: (f64, f64),
    /// Optional background flow the plant is immersed in.
    pub flow: Option<AnalyticFlow>,
}

impl Scenario {
    pub fn vacuum(mu1: f64, mu2: f64) -> Scenario {
        Scenario { target: (mu1, mu2), flow: None }
    }

    pub fn with_flow(mu1: f64, mu2: f64, gamma: f64, alpha: f64) -> Scenario {
        Scenario { target: (mu1, mu2), flow: Some(AnalyticFlow { gamma, alpha }) }
    }

    /// Scenario parameter vector: (μ1, μ2) and, with a flow, (γ, α) appended.
    pub fn mu(&self) -> Vec<f64> {
        match self.flow {
            None => vec![self.target.0, self.target.1],
            Some(f) => vec![self.target.0, self.target.1, f.gamma, f.alpha],
        }
    }

    /// Background velocity sampled on the grid, if any.
    pub fn flow_field(&self, grid: Grid) -> Option<ControlField> {
        self.flow.map(|f| background_flow(grid, f))
    }

    /// Mirror about x2 = 0 (target μ2 negated).
    ///
    /// Only vacuum scenarios mirror: the analytic flow family has a strictly
    /// upward component (γ·cos α with α ∈ (−1,1)), so its mirror image is not
    /// representable and augmentation would silently change the physics.
    pub fn mirrored(&self) -> Result<Scenario> {
        if self.flow.is_some() {
            return Err(Error::NotSupported(
                "mirror augmentation is untrue for background-flow scenarios".into(),
            ));
        }
        Ok(Scenario { target: (self.target.0, -self.target.1), flow: None })
    }
}

/// Plant discretization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FomConfig {
    /// Diffusion coefficient ν ≥ 0.
    pub nu: f64,
    /// Time step Δt.
    pub dt: f64,
    /// Horizon T; nt·dt = T.
    pub t_final: f64,
    /// Number of steps.
    pub nt: usize,
}

impl FomConfig {
    pub fn new(nu: f64, dt: f64, t_final: f64) -> Result<FomConfig> {
        if !(nu >= 0.0) {
            return Err(Error::invalid(format!("diffusion nu = {nu} must be ≥ 0")));
        }
        if !(dt > 0.0) || !(t_final > 0.0) {
            return Err(Error::invalid("dt and t_final must be positive"));
        }
        let nt = (t_final / dt).round();
        if nt < 1.0 || (nt * dt - t_final).abs() > 1e-9 * t_final {
            return Err(Error::invalid(format!(
                "horizon t_final = {t_final} is not an integer multiple of dt = {dt}"
            )));
        }
        Ok(FomConfig { nu, dt, t_final, nt: nt as usize })
    }
}

/// Truncated Gaussian density sampled at cell centers:
/// y(x) = exp(−|x−c|²/(2·var)) / (2π·var).
///
/// With var = 0.05 the peak is 10/π ≈ 3.1831 and the mass over Ω is ≈ 1 for
/// centers well inside the domain.
pub fn gaussian_density(grid: Grid, center: (f64, f64), variance: f64) -> Result<StateField> {
    let (c1, c2) = center;
    if !(c1 > -1.0 && c1 < 1.0 && c2 > -1.0 && c2 < 1.0) {
        return Err(Error::invalid(format!("gaussian center ({c1}, {c2}) lies outside (−1,1)²")));
    }
    if !(variance > 0.0) {
        return Err(Error::invalid(format!("gaussian variance = {variance} must be positive")));
    }
    let amp = 1.0 / (2.0 * std::f64::consts::PI * variance);
    let inv2v = 1.0 / (2.0 * variance);
    let n = grid.n_cells();
    let mut vals = DVector::zeros(n);
    for k in 0..n {
        let (x1, x2) = grid.cell_center(k);
        let d1 = x1 - c1;
        let d2 = x2 - c2;
        vals[k] = amp * (-(d1 * d1 + d2 * d2) * inv2v).exp();
    }
    Ok(StateField { grid, values: vals })
}

/// Total mass Σ y_k h², the midpoint quadrature of ∫y dΩ.
pub fn total_mass(y: &StateField) -> f64 {
    let h2 = y.grid.h() * y.grid.h();
    h2 * sym_sum(y.grid.nx(), |k| y.values[k])
}

/// Net advective outflux per cell (mass/time) for total velocity (wx, wy):
/// first-order upwind, face velocity averaged from the two cell values,
/// boundary faces carry zero flux.
pub(crate) fn advective_divergence(
    grid: Grid,
    y: &DVector<f64>,
    wx: &DVector<f64>,
    wy: &DVector<f64>,
) -> DVector<f64> {
    let nx = grid.nx();
    let h = grid.h();
    let n = grid.n_cells();
    let mut out = DVector::zeros(n);
    for k in 0..n {
        let i = k % nx;
        let j = k / nx;
        let fe = if i + 1 < nx {
            let wf = 0.5 * (wx[k] + wx[k + 1]);
            let up = if wf > 0.0 { y[k] } else { y[k + 1] };
            wf * up * h
        } else {
            0.0
        };
        let fw = if i > 0 {
            let wf = 0.5 * (wx[k - 1] + wx[k]);
            let up = if wf > 0.0 { y[k - 1] } else { y[k] };
            wf * up * h
        } else {
            0.0
        };
        let fn_ = if j + 1 < nx {
            let wf = 0.5 * (wy[k] + wy[k + nx]);
            let up = if wf > 0.0 { y[k] } else { y[k + nx] };
            wf * up * h
        } else {
            0.0
        };
        let fs = if j > 0 {
            let wf = 0.5 * (wy[k - nx] + wy[k]);
            let up = if wf > 0.0 { y[k - nx] } else { y[k] };
            wf * up * h
        } else {
            0.0
        };
        out[k] = (fe - fw) + (fn_ - fs);
    }
    out
}

/// Adjoint of the advective divergence with respect to the state, holding
/// the upwind pattern fixed: g_c = Σ over faces whose upwind cell is c of
/// w_f·h·(q_plus − q_minus).
pub(crate) fn adv_transpose_state(
    grid: Grid,
    wx: &DVector<f64>,
    wy: &DVector<f64>,
    q: &DVector<f64>,
) -> DVector<f64> {
    let nx = grid.nx();
    let h = grid.h();
    let n = grid.n_cells();
    let mut out = DVector::zeros(n);
    for k in 0..n {
        let i = k % nx;
        let j = k / nx;
        let te = if i + 1 < nx {
            let wf = 0.5 * (wx[k] + wx[k + 1]);
            if wf > 0.0 { wf * h * (q[k] - q[k + 1]) } else { 0.0 }
        } else {
            0.0
        };
        let tw = if i > 0 {
            let wf = 0.5 * (wx[k - 1] + wx[k]);
            if wf > 0.0 { 0.0 } else { wf * h * (q[k - 1] - q[k]) }
        } else {
            0.0
        };
        let tn = if j + 1 < nx {
            let wf = 0.5 * (wy[k] + wy[k + nx]);
            if wf > 0.0 { wf * h * (q[k] - q[k + nx]) } else { 0.0 }
        } else {
            0.0
        };
        let ts = if j > 0 {
            let wf = 0.5 * (wy[k - nx] + wy[k]);
            if wf > 0.0 { 0.0 } else { wf * h * (q[k - nx] - q[k]) }
        } else {
            0.0
        };
        out[k] = (te + tw) + (tn + ts);
    }
    out
}

/// Adjoint of the advective divergence with respect to the velocity,
/// holding the upwind pattern fixed. Each face velocity averages the two
/// adjacent cell values, hence the factor 0.5.
///
/// A face with exactly zero velocity sits on the upwind kink; there the
/// central average of the two cell values is used instead of either
/// one-sided choice. That subgradient is what a symmetric difference
/// quotient measures, and it is invariant under the mirror (the two
/// operands of one addition swap), which keeps the whole descent path
/// mirror-equivariant from a zero initial control.
pub(crate) fn adv_transpose_velocity(
    grid: Grid,
    y: &DVector<f64>,
    wx: &DVector<f64>,
    wy: &DVector<f64>,
    q: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let nx = grid.nx();
    let h = grid.h();
    let n = grid.n_cells();
    let upwind = |wf: f64, lo: f64, hi: f64| {
        if wf > 0.0 {
            lo
        } else if wf < 0.0 {
            hi
        } else {
            0.5 * (lo + hi)
        }
    };
    let mut gx = DVector::zeros(n);
    let mut gy = DVector::zeros(n);
    for k in 0..n {
        let i = k % nx;
        let j = k / nx;
        let te = if i + 1 < nx {
            let wf = 0.5 * (wx[k] + wx[k + 1]);
            let up = upwind(wf, y[k], y[k + 1]);
            0.5 * h * up * (q[k] - q[k + 1])
        } else {
            0.0
        };
        let tw = if i > 0 {
            let wf = 0.5 * (wx[k - 1] + wx[k]);
            let up = upwind(wf, y[k - 1], y[k]);
            0.5 * h * up * (q[k - 1] - q[k])
        } else {
            0.0
        };
        gx[k] = te + tw;
        let tn = if j + 1 < nx {
            let wf = 0.5 * (wy[k] + wy[k + nx]);
            let up = upwind(wf, y[k], y[k + nx]);
            0.5 * h * up * (q[k] - q[k + nx])
        } else {
            0.0
        };
        let ts = if j > 0 {
            let wf = 0.5 * (wy[k - nx] + wy[k]);
            let up = upwind(wf, y[k - nx], y[k]);
            0.5 * h * up * (q[k - nx] - q[k])
        } else {
            0.0
        };
        gy[k] = tn + ts;
    }
    (gx, gy)
}

/// Neumann graph Laplacian in difference form:
/// (Lx)_k = Σ_neighbors (x_k − x_nbr). Exactly zero on constants.
pub(crate) fn laplace_neumann(grid: Grid, x: &DVector<f64>) -> DVector<f64> {
    let nx = grid.nx();
    let n = grid.n_cells();
    let mut out = DVector::zeros(n);
    for k in 0..n {
        let i = k % nx;
        let j = k / nx;
        let dw = if i > 0 { x[k] - x[k - 1] } else { 0.0 };
        let de = if i + 1 < nx { x[k] - x[k + 1] } else { 0.0 };
        let ds = if j > 0 { x[k] - x[k - nx] } else { 0.0 };
        let dn = if j + 1 < nx { x[k] - x[k + nx] } else { 0.0 };
        out[k] = (dw + de) + (ds + dn);
    }
    out
}

/// Solves (h²I + coeff·L) x = b by conjugate gradients with mirror-paired
/// reductions. coeff = Δt·ν ≥ 0; the matrix is SPD and near-identity.
pub(crate) fn implicit_solve(
    grid: Grid,
    coeff: f64,
    b: &DVector<f64>,
    x0: DVector<f64>,
    rtol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, usize)> {
    let nx = grid.nx();
    let h2 = grid.h() * grid.h();
    if coeff == 0.0 {
        // Diagonal system: exact solve, and b = 0 maps to x = 0 bitwise.
        return Ok((b / h2, 0));
    }
    let matvec = |x: &DVector<f64>| -> DVector<f64> {
        let mut out = laplace_neumann(grid, x);
        for k in 0..out.len() {
            out[k] = h2 * x[k] + coeff * out[k];
        }
        out
    };
    let bnorm2 = sym_dot(nx, b.as_slice(), b.as_slice());
    if bnorm2 == 0.0 {
        return Ok((DVector::zeros(b.len()), 0));
    }
    let tol2 = rtol * rtol * bnorm2;
    let mut x = x0;
    let mut r = b - matvec(&x);
    let mut rs = sym_dot(nx, r.as_slice(), r.as_slice());
    let mut p = r.clone();
    for it in 0..max_iters {
        if rs <= tol2 {
            return Ok((x, it));
        }
        let ap = matvec(&p);
        let pap = sym_dot(nx, p.as_slice(), ap.as_slice());
        let alpha = rs / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = sym_dot(nx, r.as_slice(), r.as_slice());
        let beta = rs_new / rs;
        rs = rs_new;
        // p = r + beta p
        p.axpy(1.0, &r, beta);
    }
    if rs <= tol2 {
        return Ok((x, max_iters));
    }
    Err(Error::SolverFailure(format!(
        "conjugate gradients stalled at relative residual {:.3e} after {max_iters} iterations",
        (rs / bnorm2).sqrt()
    )))
}

static MAX_WARNED_CFL: AtomicU64 = AtomicU64::new(0);

/// Advective CFL number max_k (|wx| + |wy|)·dt/h — the sharp positivity
/// bound for four-face upwind outflow.
pub fn cfl_number(w_x: &DVector<f64>, w_y: &DVector<f64>, dt: f64, h: f64) -> f64 {
    let mut m: f64 = 0.0;
    for k in 0..w_x.len() {
        m = m.max(w_x[k].abs() + w_y[k].abs());
    }
    m * dt / h
}

fn warn_cfl(cfl: f64) {
    // Warn only on a new process-wide maximum so optimizer line searches do
    // not flood the log with thousands of identical messages.
    let bits = cfl.to_bits();
    if MAX_WARNED_CFL.fetch_max(bits, Ordering::Relaxed) < bits {
        log::warn!(
            "advective CFL number {cfl:.2} exceeds 1: explicit upwind transport can \
             amplify rough features (smooth states over few steps remain usable)"
        );
    }
}

/// One semi-implicit step: explicit upwind advection by u + v, implicit
/// diffusion. Violating the advective CFL bound warns but never aborts.
pub fn step(
    y: &StateField,
    u: &ControlField,
    v: Option<&ControlField>,
    cfg: &FomConfig,
) -> Result<StateField> {
    let grid = y.grid;
    if u.grid != grid || v.map_or(false, |f| f.grid != grid) {
        return Err(Error::ShapeMismatch("state and control grids differ".into()));
    }
    let n = grid.n_cells();
    let (wx, wy) = match v {
        None => (u.ux.clone(), u.uy.clone()),
        Some(f) => (&u.ux + &f.ux, &u.uy + &f.uy),
    };
    let cfl = cfl_number(&wx, &wy, cfg.dt, grid.h());
    if cfl > 1.0 {
        warn_cfl(cfl);
    }
    let adv = advective_divergence(grid, &y.values, &wx, &wy);
    let mut rhs = DVector::zeros(n);
    if cfg.nu > 0.0 {
        let ly = laplace_neumann(grid, &y.values);
        for k in 0..n {
            rhs[k] = -cfg.dt * (adv[k] + cfg.nu * ly[k]);
        }
    } else {
        for k in 0..n {
            rhs[k] = -cfg.dt * adv[k];
        }
    }
    let (d, _iters) = implicit_solve(
        grid,
        cfg.dt * cfg.nu,
        &rhs,
        DVector::zeros(n),
        CG_RTOL,
        10 * n,
    )?;
    let values = &y.values + d;
    Ok(StateField { grid, values })
}

/// Runs the plant for controls[0..nt] from y0, collecting all nt+1 states.
///
/// The scenario contributes its background flow; states are returned inside
/// a [`crate::ocp::Trajectory`] with no cost attached.
pub fn simulate(
    y0: &StateField,
    controls: &[ControlField],
    scenario: &Scenario,
    cfg: &FomConfig,
) -> Result<crate::ocp::Trajectory> {
    if controls.len() != cfg.nt {
        return Err(Error::ShapeMismatch(format!(
            "{} controls supplied for nt = {} steps",
            controls.len(),
            cfg.nt
        )));
    }
    let v = scenario.flow_field(y0.grid);
    let mut states = Vec::with_capacity(cfg.nt + 1);
    states.push(y0.clone());
    for u in controls {
        let next = step(states.last().unwrap(), u, v.as_ref(), cfg)?;
        states.push(next);
    }
    Ok(crate::ocp::Trajectory {
        scenario: *scenario,
        initial_center: None,
        states,
        controls: controls.to_vec(),
        cost: None,
    })
}
