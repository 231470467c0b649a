//! Trajectory integration and flow-map computation.
//!
//! The integrator is an embedded Dormand-Prince 5(4) pair with PI step
//! control. Rough gallery fields are continuous (the setting always works
//! with continuous representatives), so explicit stepping applies; near
//! declared singular points an optional cap keeps steps proportional to the
//! distance from the singularity, which is scale-invariant for fields like
//! x log(1/x) and prevents overshoot through the frozen point.
//!
//! Variational data (D_x X, the Liouville log-Jacobian and the running
//! integral of ||D_x b|| along the path) ride in an augmented state vector,
//! so they share the mesh and the error control of the base trajectory.

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{BoxDomain, SpatialGrid};
use crate::field::{FieldError, VectorField};
use crate::linalg::{self, MatrixSample};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("trajectory stopped before the target ({exit:?} at t = {at})")]
    Incomplete { exit: ExitStatus, at: f64 },
    #[error("intermediate point left the domain during {stage}")]
    DomainExit { stage: &'static str },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ExitStatus {
    ReachedTarget,
    HitTimeBoundary,
    HitSpaceBoundary,
    StepUnderflow,
}

/// Integration scheme. The embedded pair is the default; the fixed-step
/// schemes exist for convergence studies where every error source must
/// refine together with one mesh parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Dormand-Prince embedded 5(4), adaptive.
    Rk45,
    /// Classic fixed-step RK4 with the given number of steps per unit time.
    FixedRk4 { steps_per_unit: f64 },
    /// Fixed-step explicit Euler (first order) with steps per unit time.
    FixedEuler { steps_per_unit: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Minimum step as a fraction of the integration span.
    pub min_step_fraction: f64,
    pub method: Method,
    /// Extra membership margin when testing domain exit.
    pub domain_margin: f64,
    pub singular_slowdown: bool,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            max_step: f64::INFINITY,
            min_step_fraction: 1e-14,
            method: Method::Rk45,
            domain_margin: 0.0,
            singular_slowdown: true,
            max_steps: 10_000_000,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(rel: f64, abs: f64) -> Self {
        SolverConfig { rel_tol: rel, abs_tol: abs, ..SolverConfig::default() }
    }
}

/// One integral curve within the queried window.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub s: f64,
    pub x0: Vec<f64>,
    pub dim: usize,
    /// Mesh from s toward the target (monotone; decreasing for backward runs).
    pub times: Vec<f64>,
    /// Flattened states, dim entries per mesh node.
    pub states: Vec<f64>,
    pub exit: ExitStatus,
    /// Length of the maximal interval within the queried window.
    pub ell: f64,
    /// Boundary limit point when the curve exits the spatial domain.
    pub boundary_point: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn end_state(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn reached(&self) -> bool {
        self.exit == ExitStatus::ReachedTarget
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const ERR: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Right-hand sides the stepper can integrate.
trait OdeSystem {
    fn dim(&self) -> usize;
    /// Leading components that form the spatial position (domain checks).
    fn spatial_dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

struct PlainFlow<'a> {
    field: &'a VectorField,
}

impl OdeSystem for PlainFlow<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }
    fn spatial_dim(&self) -> usize {
        self.field.dim()
    }
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        self.field.eval_unchecked(t, y, dy);
    }
}

/// State layout: [x (n), Y row-major (n^2), log J, int ||D_x b|| dv].
struct AugmentedFlow<'a> {
    field: &'a VectorField,
}

impl AugmentedFlow<'_> {
    fn n(&self) -> usize {
        self.field.dim()
    }
}

impl OdeSystem for AugmentedFlow<'_> {
    fn dim(&self) -> usize {
        let n = self.n();
        n + n * n + 2
    }
    fn spatial_dim(&self) -> usize {
        self.n()
    }
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.n();
        let x = &y[..n];
        self.field.eval_unchecked(t, x, &mut dy[..n]);
        let jac = match self.field.jacobian(t, x) {
            Ok(j) => j,
            Err(_) => {
                dy.iter_mut().for_each(|v| *v = f64::NAN);
                return;
            }
        };
        // dY = B Y
        let ymat = &y[n..n + n * n];
        linalg::matmul(n, &jac.entries, ymat, &mut dy[n..n + n * n]);
        dy[n + n * n] = jac.trace; // d(log J)
        dy[n + n * n + 1] = jac.op_norm; // d(int ||D_x b||)
    }
}

struct ClosureSystem<F: Fn(f64, &[f64], &mut [f64])> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for ClosureSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn spatial_dim(&self) -> usize {
        self.dim
    }
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, dy)
    }
}

struct RawResult {
    times: Vec<f64>,
    states: Vec<f64>,
    exit: ExitStatus,
    boundary_point: Option<Vec<f64>>,
}

struct Constraints<'a> {
    domain: Option<&'a BoxDomain>,
    time_interval: (f64, f64),
    margin: f64,
    singular: &'a [Vec<f64>],
    breakpoints: &'a [f64],
}

fn integrate_system<S: OdeSystem>(
    sys: &S,
    s: f64,
    y0: &[f64],
    t_target: f64,
    cfg: &SolverConfig,
    cons: &Constraints,
    force_nodes: Option<&[f64]>,
) -> RawResult {
    let dim = sys.dim();
    let nsp = sys.spatial_dim();
    let dir = if t_target >= s { 1.0 } else { -1.0 };
    let t_end = t_target.clamp(cons.time_interval.0, cons.time_interval.1);
    let time_clipped = t_end != t_target;
    let span = (t_end - s).abs();

    let mut times = vec![s];
    let mut states = y0.to_vec();

    if span == 0.0 {
        return RawResult {
            times,
            states,
            exit: if time_clipped { ExitStatus::HitTimeBoundary } else { ExitStatus::ReachedTarget },
            boundary_point: None,
        };
    }

    // Per-component absolute tolerance: position components scale with the
    // starting point, so curves pinned many decades below 1 keep relative
    // accuracy instead of drowning in a fixed absolute floor.
    let mut atol = vec![cfg.abs_tol; dim];
    let sup0 = y0[..nsp].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let pos_scale = if sup0 == 0.0 { 1.0 } else { sup0 };
    for a in atol.iter_mut().take(nsp) {
        *a = cfg.abs_tol * pos_scale.min(1.0);
    }

    if let Method::FixedEuler { steps_per_unit } | Method::FixedRk4 { steps_per_unit } = cfg.method {
        let n_steps = ((span * steps_per_unit).ceil() as usize).max(1);
        let h = (t_end - s) / n_steps as f64;
        let rk4 = matches!(cfg.method, Method::FixedRk4 { .. });
        let mut y = y0.to_vec();
        let mut t = s;
        let mut k1 = vec![0.0; dim];
        let mut k2 = vec![0.0; dim];
        let mut k3 = vec![0.0; dim];
        let mut k4 = vec![0.0; dim];
        let mut tmp = vec![0.0; dim];
        for step in 0..n_steps {
            if rk4 {
                sys.rhs(t, &y, &mut k1);
                for i in 0..dim {
                    tmp[i] = y[i] + 0.5 * h * k1[i];
                }
                sys.rhs(t + 0.5 * h, &tmp, &mut k2);
                for i in 0..dim {
                    tmp[i] = y[i] + 0.5 * h * k2[i];
                }
                sys.rhs(t + 0.5 * h, &tmp, &mut k3);
                for i in 0..dim {
                    tmp[i] = y[i] + h * k3[i];
                }
                sys.rhs(t + h, &tmp, &mut k4);
                for i in 0..dim {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            } else {
                sys.rhs(t, &y, &mut k1);
                for i in 0..dim {
                    y[i] += h * k1[i];
                }
            }
            t = if step + 1 == n_steps { t_end } else { s + h * (step + 1) as f64 };
            if let Some(dom) = cons.domain {
                if !dom.contains_with_margin(&y[..nsp], cons.margin) {
                    return RawResult {
                        times,
                        states,
                        exit: ExitStatus::HitSpaceBoundary,
                        boundary_point: Some(y[..nsp].to_vec()),
                    };
                }
            }
            times.push(t);
            states.extend_from_slice(&y);
        }
        let exit = if time_clipped { ExitStatus::HitTimeBoundary } else { ExitStatus::ReachedTarget };
        return RawResult { times, states, exit, boundary_point: None };
    }

    // adaptive Dormand-Prince with FSAL and PI step control
    let mut y = y0.to_vec();
    let mut t = s;
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; dim]).collect();
    let mut ytmp = vec![0.0; dim];
    let mut ynew = vec![0.0; dim];
    sys.rhs(t, &y, &mut k[0]);

    let min_step = cfg.min_step_fraction * span;
    let mut h = (0.01 * span).min(cfg.max_step);
    let mut prev_err_norm = 1.0f64;
    let mut force_idx = next_force_index(force_nodes, s, dir);
    let mut exit = ExitStatus::ReachedTarget;
    let mut boundary_point = None;
    let mut done = false;

    for _ in 0..cfg.max_steps {
        if (t - t_end) * dir >= -1e-14 * span.max(1.0) {
            done = true;
            break;
        }
        let mut h_eff = h.min(cfg.max_step).max(min_step);
        let remaining = (t_end - t) * dir;
        h_eff = h_eff.min(remaining);
        if let (Some(fi), Some(nodes)) = (force_idx, force_nodes) {
            let gap = (nodes[fi] - t) * dir;
            if gap > 0.0 {
                h_eff = h_eff.min(gap);
            }
        }
        for &bp in cons.breakpoints {
            let gap = (bp - t) * dir;
            if gap > 1e-14 * span {
                h_eff = h_eff.min(gap);
            }
        }
        if cfg.singular_slowdown && !cons.singular.is_empty() {
            let speed = k[0].iter().take(nsp).map(|v| v * v).sum::<f64>().sqrt();
            if speed > 0.0 {
                let mut dist = f64::INFINITY;
                for p in cons.singular {
                    let d = y[..nsp]
                        .iter()
                        .zip(p)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    dist = dist.min(d);
                }
                if dist.is_finite() && dist > 0.0 {
                    h_eff = h_eff.min((0.5 * dist / speed).max(min_step));
                }
            }
        }

        let hs = h_eff * dir;
        for stage in 0..6 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage + 1) {
                    let a = A[stage][j];
                    if a != 0.0 {
                        acc += a * kj[i];
                    }
                }
                ytmp[i] = y[i] + hs * acc;
            }
            sys.rhs(t + C[stage] * hs, &ytmp, &mut k[stage + 1]);
        }
        for i in 0..dim {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if B5[j] != 0.0 {
                    acc += B5[j] * kj[i];
                }
            }
            ynew[i] = y[i] + hs * acc;
        }
        let mut err_sq = 0.0;
        let mut bad = false;
        for i in 0..dim {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if ERR[j] != 0.0 {
                    e += ERR[j] * kj[i];
                }
            }
            e *= hs;
            if !ynew[i].is_finite() || !e.is_finite() {
                bad = true;
                break;
            }
            let sc = atol[i] + cfg.rel_tol * y[i].abs().max(ynew[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err_norm = if bad { f64::INFINITY } else { (err_sq / dim as f64).sqrt() };

        if err_norm <= 1.0 {
            // accept: check the domain before committing
            if let Some(dom) = cons.domain {
                if !dom.contains_with_margin(&ynew[..nsp], cons.margin) {
                    let (t_exit, y_exit) = bisect_exit(sys, &y, t, hs, dom, cons.margin, nsp);
                    times.push(t_exit);
                    states.extend_from_slice(&y_exit);
                    return RawResult {
                        times,
                        states,
                        exit: ExitStatus::HitSpaceBoundary,
                        boundary_point: Some(y_exit[..nsp].to_vec()),
                    };
                }
            }
            t += hs;
            y.copy_from_slice(&ynew);
            k.swap(0, 6); // FSAL
            times.push(t);
            states.extend_from_slice(&y);
            if let (Some(fi), Some(nodes)) = (force_idx, force_nodes) {
                if (t - nodes[fi]) * dir >= -1e-13 * span.max(1.0) {
                    force_idx = next_force_index_from(nodes, fi + 1, t, dir);
                }
            }
            let e1 = err_norm.max(1e-10);
            let fac = 0.9 * e1.powf(-0.7 / 5.0) * prev_err_norm.powf(0.4 / 5.0);
            h = (h_eff * fac.clamp(0.2, 5.0)).max(min_step);
            prev_err_norm = e1;
        } else {
            if h_eff <= min_step * (1.0 + 1e-9) {
                exit = ExitStatus::StepUnderflow;
                done = true;
                break;
            }
            let fac = (0.9 * err_norm.powf(-0.2)).clamp(0.1, 0.9);
            h = (h_eff * fac).max(min_step);
        }
    }

    if !done && exit == ExitStatus::ReachedTarget && (t - t_end).abs() > 1e-12 * span.max(1.0) {
        exit = ExitStatus::StepUnderflow; // step budget exhausted
    }
    if exit == ExitStatus::ReachedTarget && time_clipped {
        exit = ExitStatus::HitTimeBoundary;
    }
    RawResult { times, states, exit, boundary_point }
}

fn next_force_index(nodes: Option<&[f64]>, t: f64, dir: f64) -> Option<usize> {
    nodes.and_then(|ns| next_force_index_from(ns, 0, t, dir))
}

fn next_force_index_from(nodes: &[f64], from: usize, t: f64, dir: f64) -> Option<usize> {
    (from..nodes.len()).find(|&i| (nodes[i] - t) * dir > 1e-13)
}

/// Bisection along a single accepted step for the domain-exit time; the
/// partial step is re-taken with the one-step method, whose local error is
/// far below the boundary-location tolerance.
fn bisect_exit<S: OdeSystem>(
    sys: &S,
    y_prev: &[f64],
    t_prev: f64,
    hs: f64,
    dom: &BoxDomain,
    margin: f64,
    nsp: usize,
) -> (f64, Vec<f64>) {
    let dim = sys.dim();
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; dim]).collect();
    let mut ytmp = vec![0.0; dim];
    let mut one_step = |sigma: f64| -> Vec<f64> {
        let h = hs * sigma;
        sys.rhs(t_prev, y_prev, &mut k[0]);
        for stage in 0..6 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage + 1) {
                    if A[stage][j] != 0.0 {
                        acc += A[stage][j] * kj[i];
                    }
                }
                ytmp[i] = y_prev[i] + h * acc;
            }
            sys.rhs(t_prev + C[stage] * h, &ytmp, &mut k[stage + 1]);
        }
        let mut out = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if B5[j] != 0.0 {
                    acc += B5[j] * kj[i];
                }
            }
            out[i] = y_prev[i] + h * acc;
        }
        out
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let y_mid = one_step(mid);
        if dom.contains_with_margin(&y_mid[..nsp], margin) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y_exit = one_step(lo);
    (t_prev + hs * lo, y_exit)
}

fn field_constraints<'a>(field: &'a VectorField, cfg: &SolverConfig) -> Constraints<'a> {
    Constraints {
        domain: Some(field.domain()),
        time_interval: field.time_interval(),
        margin: cfg.domain_margin,
        singular: field.singular_points(),
        breakpoints: field.time_breakpoints(),
    }
}

/// Integrate one trajectory from (s, x0) toward t_target (either direction).
/// Exits are recorded, never panicked on: a partial trajectory with its
/// boundary limit point comes back.
pub fn integrate_trajectory(
    field: &VectorField,
    s: f64,
    x0: &[f64],
    t_target: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory, FlowError> {
    field.eval(s, x0)?; // validates (s, x0) and finiteness
    let sys = PlainFlow { field };
    let cons = field_constraints(field, cfg);
    let raw = integrate_system(&sys, s, x0, t_target, cfg, &cons, None);
    let ell = (raw.times.last().unwrap() - s).abs();
    Ok(Trajectory {
        s,
        x0: x0.to_vec(),
        dim: field.dim(),
        times: raw.times,
        states: raw.states,
        exit: raw.exit,
        ell,
        boundary_point: raw.boundary_point,
    })
}

/// Maximal-interval length around s within the window, probing both time
/// directions.
pub fn maximal_interval_length(
    field: &VectorField,
    s: f64,
    x0: &[f64],
    window: (f64, f64),
    cfg: &SolverConfig,
) -> Result<f64, FlowError> {
    let fwd = integrate_trajectory(field, s, x0, window.1, cfg)?;
    let bwd = integrate_trajectory(field, s, x0, window.0, cfg)?;
    Ok(fwd.ell + bwd.ell)
}

/// Variational data along a trajectory's mesh.
#[derive(Debug, Clone)]
pub struct VariationalData {
    pub times: Vec<f64>,
    /// Base positions per node (n per node, flattened).
    pub positions: Vec<f64>,
    pub dim: usize,
    pub dx: Vec<MatrixSample>,
    /// det D_x X per node.
    pub jac_det: Vec<f64>,
    /// exp(int div b) per node (Liouville route).
    pub jac_liouville: Vec<f64>,
    /// int ||D_x b(v, X(v))|| dv per node.
    pub int_dxb_norm: Vec<f64>,
    pub exit: ExitStatus,
}

impl VariationalData {
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
    pub fn end_position(&self) -> &[f64] {
        self.position(self.times.len() - 1)
    }
    pub fn end_dx(&self) -> &MatrixSample {
        self.dx.last().unwrap()
    }
    pub fn end_jac_det(&self) -> f64 {
        *self.jac_det.last().unwrap()
    }
    pub fn end_jac_liouville(&self) -> f64 {
        *self.jac_liouville.last().unwrap()
    }
    pub fn end_int_dxb_norm(&self) -> f64 {
        *self.int_dxb_norm.last().unwrap()
    }
    pub fn reached(&self) -> bool {
        self.exit == ExitStatus::ReachedTarget
    }
}

/// Solve the variational and Liouville ODEs along a trajectory. The
/// augmented system is re-integrated from the trajectory's start with output
/// forced onto the trajectory's own time mesh.
pub fn variational_solve(
    field: &VectorField,
    traj: &Trajectory,
    cfg: &SolverConfig,
) -> Result<VariationalData, FlowError> {
    variational_solve_to(field, traj.s, &traj.x0, traj.end_time(), Some(&traj.times), cfg)
}

/// Augmented solve from (s, x0) to t, optionally forcing output nodes.
pub fn variational_solve_to(
    field: &VectorField,
    s: f64,
    x0: &[f64],
    t: f64,
    force_nodes: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<VariationalData, FlowError> {
    field.jacobian(s, x0)?;
    let n = field.dim();
    let sys = AugmentedFlow { field };
    let dim = sys.dim();
    let mut y0 = vec![0.0; dim];
    y0[..n].copy_from_slice(x0);
    for i in 0..n {
        y0[n + i * n + i] = 1.0;
    }
    let cons = field_constraints(field, cfg);
    let raw = integrate_system(&sys, s, &y0, t, cfg, &cons, force_nodes);

    let m = raw.times.len();
    let mut positions = Vec::with_capacity(m * n);
    let mut dx = Vec::with_capacity(m);
    let mut jac_det = Vec::with_capacity(m);
    let mut jac_liouville = Vec::with_capacity(m);
    let mut int_dxb = Vec::with_capacity(m);
    for i in 0..m {
        let yi = &raw.states[i * dim..(i + 1) * dim];
        positions.extend_from_slice(&yi[..n]);
        let mat = MatrixSample::from_entries(n, yi[n..n + n * n].to_vec());
        jac_det.push(mat.det());
        dx.push(mat);
        jac_liouville.push(yi[n + n * n].exp());
        int_dxb.push(yi[n + n * n + 1]);
    }
    Ok(VariationalData {
        times: raw.times,
        positions,
        dim: n,
        dx,
        jac_det,
        jac_liouville,
        int_dxb_norm: int_dxb,
        exit: raw.exit,
    })
}

/// Flow map X(t, s, .) on a grid of start points. Nodes whose maximal
/// interval does not reach t are marked by their exit status instead of
/// being filled with garbage.
#[derive(Debug, Clone)]
pub struct FlowMapGrid {
    pub t: f64,
    pub s: f64,
    pub grid: SpatialGrid,
    pub images: Vec<Option<Vec<f64>>>,
    pub exits: Vec<ExitStatus>,
    pub dx_matrices: Option<Vec<Option<MatrixSample>>>,
    pub jac: Option<Vec<Option<f64>>>,
    pub liouville_jac: Option<Vec<Option<f64>>>,
}

impl FlowMapGrid {
    pub fn coverage(&self) -> f64 {
        let ok = self.images.iter().filter(|i| i.is_some()).count();
        ok as f64 / self.images.len().max(1) as f64
    }
}

pub fn flow_map(
    field: &VectorField,
    t: f64,
    s: f64,
    grid: &SpatialGrid,
    cfg: &SolverConfig,
    with_variational: bool,
) -> FlowMapGrid {
    type NodeOut = (Option<Vec<f64>>, ExitStatus, Option<(MatrixSample, f64, f64)>);
    let results: Vec<NodeOut> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x0 = grid.point(i);
            if with_variational {
                match variational_solve_to(field, s, &x0, t, None, cfg) {
                    Ok(v) if v.reached() => (
                        Some(v.end_position().to_vec()),
                        ExitStatus::ReachedTarget,
                        Some((v.end_dx().clone(), v.end_jac_det(), v.end_jac_liouville())),
                    ),
                    Ok(v) => (None, v.exit, None),
                    Err(_) => (None, ExitStatus::StepUnderflow, None),
                }
            } else {
                match integrate_trajectory(field, s, &x0, t, cfg) {
                    Ok(tr) if tr.reached() => {
                        (Some(tr.end_state().to_vec()), tr.exit, None)
                    }
                    Ok(tr) => (None, tr.exit, None),
                    Err(_) => (None, ExitStatus::StepUnderflow, None),
                }
            }
        })
        .collect();

    let mut images = Vec::with_capacity(results.len());
    let mut exits = Vec::with_capacity(results.len());
    let mut dxm = with_variational.then(|| Vec::with_capacity(results.len()));
    let mut jac = with_variational.then(|| Vec::with_capacity(results.len()));
    let mut liou = with_variational.then(|| Vec::with_capacity(results.len()));
    for (img, exit, var) in results {
        images.push(img);
        exits.push(exit);
        if let (Some(dv), Some(jv), Some(lv)) = (dxm.as_mut(), jac.as_mut(), liou.as_mut()) {
            match var {
                Some((m, d, l)) => {
                    dv.push(Some(m));
                    jv.push(Some(d));
                    lv.push(Some(l));
                }
                None => {
                    dv.push(None);
                    jv.push(None);
                    lv.push(None);
                }
            }
        }
    }
    FlowMapGrid { t, s, grid: grid.clone(), images, exits, dx_matrices: dxm, jac, liouville_jac: liou }
}

/// Gronwall report: operator norm of D_x X at the end of the path against
/// the exponential of the accumulated ||D_x b|| integral.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GronwallReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub slack: f64,
}

pub fn gronwall_check(
    field: &VectorField,
    s: f64,
    x0: &[f64],
    t: f64,
    cfg: &SolverConfig,
    tol: f64,
) -> Result<GronwallReport, FlowError> {
    let v = variational_solve_to(field, s, x0, t, None, cfg)?;
    if !v.reached() {
        return Err(FlowError::Incomplete { exit: v.exit, at: *v.times.last().unwrap() });
    }
    let lhs = v.end_dx().op_norm;
    let rhs = v.end_int_dxb_norm().exp();
    Ok(GronwallReport { lhs, rhs, holds: lhs <= rhs * (1.0 + tol), slack: (rhs - lhs) / rhs })
}

/// |X(t3, t2, X(t2, t1, x)) - X(t3, t1, x)|.
pub fn semigroup_residual(
    field: &VectorField,
    t1: f64,
    t2: f64,
    t3: f64,
    x: &[f64],
    cfg: &SolverConfig,
) -> Result<f64, FlowError> {
    let leg1 = integrate_trajectory(field, t1, x, t2, cfg)?;
    if !leg1.reached() {
        return Err(FlowError::DomainExit { stage: "first leg" });
    }
    let leg2 = integrate_trajectory(field, t2, leg1.end_state(), t3, cfg)?;
    if !leg2.reached() {
        return Err(FlowError::DomainExit { stage: "second leg" });
    }
    let direct = integrate_trajectory(field, t1, x, t3, cfg)?;
    if !direct.reached() {
        return Err(FlowError::DomainExit { stage: "direct leg" });
    }
    let d = leg2
        .end_state()
        .iter()
        .zip(direct.end_state())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(d)
}

/// Per-radius funnel report: worst pairwise spread of a perturbation bundle
/// at the horizon against the Osgood comparison envelope.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FunnelReport {
    pub delta: f64,
    pub max_spread: f64,
    pub envelope: f64,
    pub within_envelope: bool,
}

/// Integrates bundles of trajectories started at distance <= delta from x0
/// and compares the final spread with the upper solution of D' = omega(D)
/// run over the accumulated phi-mass, D(0) = delta.
#[allow(clippy::too_many_arguments)]
pub fn uniqueness_funnel(
    field: &VectorField,
    s: f64,
    x0: &[f64],
    radii: &[f64],
    horizon: f64,
    omega: &(dyn Fn(f64) -> f64 + Sync),
    phi_integral: f64,
    n_perturb: usize,
    cfg: &SolverConfig,
) -> Result<Vec<FunnelReport>, FlowError> {
    let n = field.dim();
    let mut reports = Vec::with_capacity(radii.len());
    for &delta in radii {
        if delta < 0.0 {
            return Err(FlowError::InvalidInput("radii must be nonnegative".into()));
        }
        let mut starts: Vec<Vec<f64>> = Vec::with_capacity(n_perturb);
        if delta == 0.0 {
            starts.push(x0.to_vec());
        } else if n == 1 {
            for i in 0..n_perturb {
                let u = -1.0 + 2.0 * i as f64 / (n_perturb - 1).max(1) as f64;
                starts.push(vec![x0[0] + delta * u]);
            }
        } else {
            for i in 0..n_perturb {
                let th = 2.0 * std::f64::consts::PI * i as f64 / n_perturb as f64;
                let mut p = x0.to_vec();
                p[0] += delta * th.cos();
                p[1] += delta * th.sin();
                starts.push(p);
            }
        }
        let ends: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|p| {
                integrate_trajectory(field, s, p, s + horizon, cfg)
                    .map(|tr| tr.end_state().to_vec())
            })
            .collect::<Result<_, _>>()?;
        let mut max_spread = 0.0f64;
        for i in 0..ends.len() {
            for j in i + 1..ends.len() {
                let d = ends[i]
                    .iter()
                    .zip(&ends[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                max_spread = max_spread.max(d);
            }
        }
        let envelope = if delta == 0.0 { 0.0 } else { osgood_envelope(omega, delta, phi_integral) };
        reports.push(FunnelReport {
            delta,
            max_spread,
            envelope,
            within_envelope: max_spread <= envelope * (1.0 + 1e-9) || delta == 0.0,
        });
    }
    Ok(reports)
}

/// Upper solution of W' = omega(W), W(0) = delta, evaluated at tau =
/// phi_mass (time-reparameterized comparison ODE).
pub fn osgood_envelope(omega: &(dyn Fn(f64) -> f64 + Sync), delta: f64, phi_mass: f64) -> f64 {
    let sys = ClosureSystem {
        dim: 1,
        f: |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = omega(y[0].max(0.0)),
    };
    let cons = Constraints {
        domain: None,
        time_interval: (0.0, phi_mass),
        margin: 0.0,
        singular: &[],
        breakpoints: &[],
    };
    let cfg = SolverConfig::with_tol(1e-10, 1e-14);
    let raw = integrate_system(&sys, 0.0, &[delta], phi_mass, &cfg, &cons, None);
    raw.states[raw.states.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{make_example, ExampleSpec};

    const E: f64 = std::f64::consts::E;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn linear_flow_reaches_e() {
        let g = make_example(&ExampleSpec::Linear { lambda: 1.0 }).unwrap();
        let tr = integrate_trajectory(&g.field, 0.0, &[1.0], 1.0, &cfg()).unwrap();
        assert!(tr.reached());
        assert!((tr.end_state()[0] - E).abs() < 1e-8);
        assert_eq!(tr.state(0), &[1.0]);
        assert_eq!(tr.times[0], 0.0);
    }

    #[test]
    fn zero_field_constant_states() {
        use crate::field::EvalFn;
        use std::sync::Arc;
        let eval: EvalFn = Arc::new(|_t, _x, out| out[0] = 0.0);
        let f = VectorField::new(1, (0.0, 10.0), BoxDomain::unbounded(1), eval);
        let tr = integrate_trajectory(&f, 0.0, &[0.3], 5.0, &cfg()).unwrap();
        assert!(tr.reached());
        assert!(tr.states.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn loglinear_flow_matches_closed_form() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let tr = integrate_trajectory(&g.field, 0.0, &[1.0], std::f64::consts::LN_2, &cfg()).unwrap();
        let exact = g.flow(std::f64::consts::LN_2, 0.0, &[1.0]).unwrap()[0];
        assert!((tr.end_state()[0] - exact).abs() < 1e-6, "{} vs {exact}", tr.end_state()[0]);
    }

    #[test]
    fn loglinear_backward_flow() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let tr = integrate_trajectory(&g.field, 1.0, &[0.5], 0.0, &cfg()).unwrap();
        let exact = g.flow(0.0, 1.0, &[0.5]).unwrap()[0];
        assert!(tr.reached());
        assert!((tr.end_state()[0] - exact).abs() < 1e-7, "{} vs {exact}", tr.end_state()[0]);
    }

    #[test]
    fn rotation_full_period_identity() {
        let g = make_example(&ExampleSpec::Rotation).unwrap();
        let tr =
            integrate_trajectory(&g.field, 0.0, &[1.0, 0.0], 2.0 * std::f64::consts::PI, &cfg())
                .unwrap();
        assert!((tr.end_state()[0] - 1.0).abs() < 1e-7);
        assert!(tr.end_state()[1].abs() < 1e-7);
    }

    #[test]
    fn space_exit_detected_with_boundary_point() {
        use crate::field::EvalFn;
        use std::sync::Arc;
        let eval: EvalFn = Arc::new(|_t, x, out| out[0] = x[0]);
        let f = VectorField::new(1, (0.0, 10.0), BoxDomain::interval(-2.0, 2.0), eval);
        let tr = integrate_trajectory(&f, 0.0, &[1.0], 5.0, &cfg()).unwrap();
        assert_eq!(tr.exit, ExitStatus::HitSpaceBoundary);
        // exit time: e^t = 2 at t = ln 2
        assert!((tr.end_time() - (2.0f64).ln()).abs() < 1e-6, "{}", tr.end_time());
        let bp = tr.boundary_point.as_ref().unwrap();
        assert!((bp[0] - 2.0).abs() < 1e-6);
        assert!((tr.ell - (2.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn time_boundary_exit() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        // field time interval is (-20, 20)
        let tr = integrate_trajectory(&g.field, 0.0, &[1.0], 25.0, &cfg()).unwrap();
        assert_eq!(tr.exit, ExitStatus::HitTimeBoundary);
        assert!((tr.end_time() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn extended_field_keeps_second_coordinate() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let f2 = g.field.extend_dim(1).unwrap();
        let tr = integrate_trajectory(&f2, 0.0, &[1.0, 3.0], 0.7, &cfg()).unwrap();
        assert!(tr.reached());
        assert_eq!(tr.end_state()[1], 3.0);
        let exact = g.flow(0.7, 0.0, &[1.0]).unwrap()[0];
        assert!((tr.end_state()[0] - exact).abs() < 1e-7);
    }

    #[test]
    fn variational_rotation_keeps_unit_jacobian() {
        let g = make_example(&ExampleSpec::Rotation).unwrap();
        let tr = integrate_trajectory(&g.field, 0.0, &[1.0, 0.2], 1.3, &cfg()).unwrap();
        let v = variational_solve(&g.field, &tr, &cfg()).unwrap();
        for (d, l) in v.jac_det.iter().zip(&v.jac_liouville) {
            assert!((d - 1.0).abs() < 1e-8, "det node {d}");
            assert!((l - 1.0).abs() < 1e-12, "liouville node {l}");
        }
        // forced mesh contains the trajectory nodes
        for t in &tr.times {
            assert!(v.times.iter().any(|u| (u - t).abs() < 1e-12), "missing node {t}");
        }
    }

    #[test]
    fn variational_linear_matches_exponential() {
        let lam = 0.8;
        let g = make_example(&ExampleSpec::Linear { lambda: lam }).unwrap();
        let tr = integrate_trajectory(&g.field, 0.0, &[2.0], 1.5, &cfg()).unwrap();
        let v = variational_solve(&g.field, &tr, &cfg()).unwrap();
        let exact = (lam * 1.5f64).exp();
        assert!((v.end_dx().get(0, 0) - exact).abs() < 1e-8 * exact);
        assert!((v.end_jac_det() - exact).abs() < 1e-8 * exact);
        assert!((v.end_jac_liouville() - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn variational_loglinear_matches_closed_derivative() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let (t, s) = (1.0, 0.0);
        for &x in &[0.3, 0.9, 2.0] {
            let tr = integrate_trajectory(&g.field, s, &[x], t, &cfg()).unwrap();
            let v = variational_solve(&g.field, &tr, &cfg()).unwrap();
            let exact = g.flow_derivative(t, s, x).unwrap();
            let got = v.end_dx().get(0, 0);
            assert!((got - exact).abs() < 1e-5 * exact.abs(), "x={x}: {got} vs {exact}");
            assert!((v.end_jac_det() - v.end_jac_liouville()).abs() < 1e-5 * v.end_jac_det().abs());
            assert!(v.end_jac_det() > 0.0);
        }
    }

    #[test]
    fn gronwall_equality_for_positive_linear() {
        let lam = 1.3;
        let g = make_example(&ExampleSpec::Linear { lambda: lam }).unwrap();
        let r = gronwall_check(&g.field, 0.2, &[1.0], 1.7, &cfg(), 1e-3).unwrap();
        let exact = (lam * 1.5f64).exp();
        assert!(r.holds);
        assert!((r.lhs - exact).abs() < 1e-7 * exact);
        assert!((r.lhs - r.rhs).abs() < 1e-6 * r.rhs, "equality case: {} vs {}", r.lhs, r.rhs);
    }

    #[test]
    fn gronwall_strict_for_rotation() {
        let g = make_example(&ExampleSpec::Rotation).unwrap();
        let r = gronwall_check(&g.field, 0.0, &[1.0, 0.0], 1.0, &cfg(), 1e-3).unwrap();
        assert!(r.holds);
        assert!((r.lhs - 1.0).abs() < 1e-8);
        assert!((r.rhs - E).abs() < 1e-8 * E);
    }

    #[test]
    fn semigroup_residual_small() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let r0 = semigroup_residual(&g.field, 0.3, 0.3, 0.3, &[1.2], &cfg()).unwrap();
        assert_eq!(r0, 0.0);
        let r = semigroup_residual(&g.field, 0.0, 0.5, 1.0, &[1.0], &cfg()).unwrap();
        assert!(r <= 1e-8, "residual {r}");
    }

    #[test]
    fn flow_map_identity_at_equal_times() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let grid = SpatialGrid::new(BoxDomain::interval(0.1, 2.5), vec![9]);
        let fm = flow_map(&g.field, 0.5, 0.5, &grid, &cfg(), false);
        for (i, img) in fm.images.iter().enumerate() {
            let img = img.as_ref().unwrap();
            assert_eq!(img[0], grid.point(i)[0]);
        }
    }

    #[test]
    fn flow_map_matches_closed_form_nodewise() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let grid = SpatialGrid::new(BoxDomain::interval(0.01, E - 0.01), vec![25]);
        let fm = flow_map(&g.field, 1.0, 0.0, &grid, &cfg(), true);
        assert_eq!(fm.coverage(), 1.0);
        for (i, img) in fm.images.iter().enumerate() {
            let x = grid.point(i);
            let exact = g.flow(1.0, 0.0, &x).unwrap()[0];
            assert!((img.as_ref().unwrap()[0] - exact).abs() < 1e-6);
        }
        for j in fm.jac.as_ref().unwrap() {
            assert!(j.unwrap() > 0.0);
        }
    }

    #[test]
    fn inverse_flow_round_trip() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let c = cfg();
        for &x in &[0.2, 1.0, 2.2] {
            let fwd = integrate_trajectory(&g.field, 0.0, &[x], 0.8, &c).unwrap();
            let back = integrate_trajectory(&g.field, 0.8, fwd.end_state(), 0.0, &c).unwrap();
            assert!((back.end_state()[0] - x).abs() < 10.0 * c.rel_tol.max(1e-8), "x={x}");
        }
    }

    #[test]
    fn tolerance_refinement_reduces_error() {
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let exact = g.flow(1.0, 0.0, &[0.4]).unwrap()[0];
        let mut errs = Vec::new();
        for rel in [1e-5, 1e-7, 1e-9] {
            let c = SolverConfig::with_tol(rel, 1e-14);
            let tr = integrate_trajectory(&g.field, 0.0, &[0.4], 1.0, &c).unwrap();
            errs.push((tr.end_state()[0] - exact).abs().max(1e-16));
        }
        assert!(errs[2] < errs[0], "errors should drop with tolerance: {errs:?}");
    }

    #[test]
    fn sublog_rest_solution_stays_put() {
        // b(0) = 0: the explicit integrator follows gamma1 = 0 exactly
        let g = make_example(&ExampleSpec::Sublog { alpha: 1.5 }).unwrap();
        let tr = integrate_trajectory(&g.field, 0.0, &[0.0], 2.0, &cfg()).unwrap();
        assert!(tr.reached());
        assert!(tr.states.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn funnel_zero_radius_zero_spread() {
        let g = make_example(&ExampleSpec::Linear { lambda: 1.0 }).unwrap();
        let rep =
            uniqueness_funnel(&g.field, 0.0, &[1.0], &[0.0], 1.0, &|u| u, 1.0, 8, &cfg()).unwrap();
        assert_eq!(rep[0].max_spread, 0.0);
    }

    #[test]
    fn funnel_linear_gronwall_equality() {
        // omega(u) = u, phi mass = lambda T: envelope integrates to delta e^{lambda T}
        let lam = 0.9;
        let g = make_example(&ExampleSpec::Linear { lambda: lam }).unwrap();
        let delta = 1e-4;
        let rep = uniqueness_funnel(&g.field, 0.0, &[1.0], &[delta], 1.0, &|u| u, lam, 16, &cfg())
            .unwrap();
        let expected = 2.0 * delta * lam.exp();
        assert!(
            (rep[0].max_spread - expected).abs() < 1e-6 * expected,
            "{}",
            rep[0].max_spread
        );
        // the envelope starts from delta, the bundle diameter from 2 delta
        assert!(rep[0].max_spread / 2.0 <= rep[0].envelope * (1.0 + 1e-9));
    }

    #[test]
    fn maximal_interval_lower_bound() {
        // linear field on a box: ell(s, x) >= min(window, dist/sup|b|)
        use crate::field::{EvalFn, JacFn};
        use std::sync::Arc;
        let eval: EvalFn = Arc::new(|_t, x, out| out[0] = x[0]);
        let jac: JacFn = Arc::new(|_t, _x, out| out[0] = 1.0);
        let f = VectorField::new(1, (0.0, 1.0), BoxDomain::interval(-2.0, 2.0), eval)
            .with_analytic_jacobian(jac);
        let window = (0.0, 1.0);
        let sup_b = 2.0;
        for i in 0..40 {
            let x = -1.9 + 3.8 * i as f64 / 39.0;
            if x.abs() < 1e-3 {
                continue;
            }
            let s = 0.3;
            let ell = maximal_interval_length(&f, s, &[x], window, &cfg()).unwrap();
            let dist = 2.0 - x.abs();
            let bound = (window.1 - window.0).min(dist / sup_b);
            assert!(ell >= bound * 0.9, "x={x}: ell={ell} bound={bound}");
        }
    }

    #[test]
    fn fixed_euler_first_order_convergence() {
        let g = make_example(&ExampleSpec::Linear { lambda: 1.0 }).unwrap();
        let exact = E;
        let mut errs = Vec::new();
        for steps in [100.0, 200.0, 400.0] {
            let c = SolverConfig {
                method: Method::FixedEuler { steps_per_unit: steps },
                ..SolverConfig::default()
            };
            let tr = integrate_trajectory(&g.field, 0.0, &[1.0], 1.0, &c).unwrap();
            errs.push((tr.end_state()[0] - exact).abs());
        }
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!((r1 - 2.0).abs() < 0.1, "halving ratio {r1}");
        assert!((r2 - 2.0).abs() < 0.1, "halving ratio {r2}");
    }

    #[test]
    fn deep_start_keeps_relative_accuracy() {
        // starting many decades below 1 must not lose relative accuracy to
        // the absolute tolerance floor
        let g = make_example(&ExampleSpec::Loglinear).unwrap();
        let x0 = 1e-40;
        let tr = integrate_trajectory(&g.field, 0.0, &[x0], 1.0, &cfg()).unwrap();
        let exact = g.flow(1.0, 0.0, &[x0]).unwrap()[0];
        assert!(
            (tr.end_state()[0] - exact).abs() < 1e-6 * exact,
            "{} vs {exact}",
            tr.end_state()[0]
        );
    }
}
