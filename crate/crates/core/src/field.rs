//! Time-dependent vector fields b(t, x) with a uniform evaluation and
//! spatial-Jacobian interface.
//!
//! A field carries its time interval and an axis-aligned spatial domain;
//! evaluation outside either is an error, and NaN/inf from an evaluator is
//! reported rather than propagated. Jacobians come either from a closed form
//! or from central differences with a configurable step.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::domain::BoxDomain;
use crate::linalg::MatrixSample;

pub type EvalFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type JacFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("point (t={t}, x={x:?}) outside declared region")]
    OutOfDomain { t: f64, x: Vec<f64> },
    #[error("evaluator produced a non-finite value at (t={t}, x={x:?})")]
    NonFinite { t: f64, x: Vec<f64> },
    #[error("central-difference stencil at x={x:?} (step {h}) exits the domain")]
    StencilOutsideDomain { x: Vec<f64>, h: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("field file: {0}")]
    FileFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum JacobianMode {
    Analytic,
    /// Central differences; `step = None` selects cbrt(eps) * max(1, |x|).
    CentralDifference { step: Option<f64> },
}

#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    time_interval: (f64, f64),
    domain: BoxDomain,
    evaluator: EvalFn,
    jacobian_mode: JacobianMode,
    analytic_jacobian: Option<JacFn>,
    /// Points where D_x b blows up or is undefined; integrators and graded
    /// quadratures slow down / refine toward these.
    singular_points: Vec<Vec<f64>>,
    /// For fields only piecewise-continuous in t: integrator steps align here.
    time_breakpoints: Vec<f64>,
    label: String,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("time_interval", &self.time_interval)
            .field("domain", &self.domain)
            .field("jacobian_mode", &self.jacobian_mode)
            .field("label", &self.label)
            .finish()
    }
}

impl VectorField {
    pub fn new(
        dim: usize,
        time_interval: (f64, f64),
        domain: BoxDomain,
        evaluator: EvalFn,
    ) -> Self {
        assert_eq!(domain.dim(), dim);
        assert!(time_interval.0 < time_interval.1);
        VectorField {
            dim,
            time_interval,
            domain,
            evaluator,
            jacobian_mode: JacobianMode::CentralDifference { step: None },
            analytic_jacobian: None,
            singular_points: Vec::new(),
            time_breakpoints: Vec::new(),
            label: String::new(),
        }
    }

    pub fn with_analytic_jacobian(mut self, jac: JacFn) -> Self {
        self.analytic_jacobian = Some(jac);
        self.jacobian_mode = JacobianMode::Analytic;
        self
    }

    pub fn with_difference_step(mut self, step: f64) -> Self {
        self.jacobian_mode = JacobianMode::CentralDifference { step: Some(step) };
        self
    }

    pub fn with_singular_points(mut self, pts: Vec<Vec<f64>>) -> Self {
        self.singular_points = pts;
        self
    }

    pub fn with_time_breakpoints(mut self, t: Vec<f64>) -> Self {
        self.time_breakpoints = t;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_interval(&self) -> (f64, f64) {
        self.time_interval
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn singular_points(&self) -> &[Vec<f64>] {
        &self.singular_points
    }

    pub fn time_breakpoints(&self) -> &[f64] {
        &self.time_breakpoints
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn jacobian_mode(&self) -> &JacobianMode {
        &self.jacobian_mode
    }

    fn check_domain(&self, t: f64, x: &[f64]) -> Result<(), FieldError> {
        if x.len() != self.dim
            || t < self.time_interval.0
            || t > self.time_interval.1
            || !self.domain.contains(x)
        {
            return Err(FieldError::OutOfDomain { t, x: x.to_vec() });
        }
        Ok(())
    }

    /// b(t, x) written into `out`. Total on the declared region; NaN is an error.
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_domain(t, x)?;
        (self.evaluator)(t, x, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite { t, x: x.to_vec() });
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, x, &mut out)?;
        Ok(out)
    }

    /// Raw evaluation without domain/NaN checks, for inner integrator loops
    /// that have already validated their region.
    pub(crate) fn eval_unchecked(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.evaluator)(t, x, out);
    }

    /// Spatial Jacobian D_x b(t, x) with operator norm and trace (= div_x b).
    pub fn jacobian(&self, t: f64, x: &[f64]) -> Result<MatrixSample, FieldError> {
        self.check_domain(t, x)?;
        let n = self.dim;
        let mut entries = vec![0.0; n * n];
        match (&self.jacobian_mode, &self.analytic_jacobian) {
            (JacobianMode::Analytic, Some(jac)) => {
                jac(t, x, &mut entries);
            }
            (mode, _) => {
                let step = match mode {
                    JacobianMode::CentralDifference { step: Some(h) } => *h,
                    _ => {
                        let xmax = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                        f64::EPSILON.cbrt() * xmax.max(1.0)
                    }
                };
                self.central_difference_jacobian(t, x, step, &mut entries)?;
            }
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite { t, x: x.to_vec() });
        }
        Ok(MatrixSample::from_entries(n, entries))
    }

    /// Central-difference Jacobian regardless of the configured mode (used by
    /// consistency tests against the analytic form).
    pub fn difference_jacobian(
        &self,
        t: f64,
        x: &[f64],
        step: f64,
    ) -> Result<MatrixSample, FieldError> {
        self.check_domain(t, x)?;
        let n = self.dim;
        let mut entries = vec![0.0; n * n];
        self.central_difference_jacobian(t, x, step, &mut entries)?;
        Ok(MatrixSample::from_entries(n, entries))
    }

    fn central_difference_jacobian(
        &self,
        t: f64,
        x: &[f64],
        h: f64,
        entries: &mut [f64],
    ) -> Result<(), FieldError> {
        let n = self.dim;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        let mut bp = vec![0.0; n];
        let mut bm = vec![0.0; n];
        for j in 0..n {
            xp[j] = x[j] + h;
            xm[j] = x[j] - h;
            if !self.domain.contains(&xp) || !self.domain.contains(&xm) {
                return Err(FieldError::StencilOutsideDomain { x: x.to_vec(), h });
            }
            (self.evaluator)(t, &xp, &mut bp);
            (self.evaluator)(t, &xm, &mut bm);
            for i in 0..n {
                entries[i * n + j] = (bp[i] - bm[i]) / (2.0 * h);
            }
            xp[j] = x[j];
            xm[j] = x[j];
        }
        Ok(())
    }

    /// div_x b computed by summed directional central differences (independent
    /// of the Jacobian path).
    pub fn divergence_by_differences(&self, t: f64, x: &[f64], h: f64) -> Result<f64, FieldError> {
        self.check_domain(t, x)?;
        let n = self.dim;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        let mut bp = vec![0.0; n];
        let mut bm = vec![0.0; n];
        let mut div = 0.0;
        for j in 0..n {
            xp[j] = x[j] + h;
            xm[j] = x[j] - h;
            if !self.domain.contains(&xp) || !self.domain.contains(&xm) {
                return Err(FieldError::StencilOutsideDomain { x: x.to_vec(), h });
            }
            (self.evaluator)(t, &xp, &mut bp);
            (self.evaluator)(t, &xm, &mut bm);
            div += (bp[j] - bm[j]) / (2.0 * h);
            xp[j] = x[j];
            xm[j] = x[j];
        }
        Ok(div)
    }

    /// sup |b| estimated on a deterministic lattice over a bounded subbox and
    /// a few time slices.
    pub fn sup_speed_estimate(&self, bounds: &BoxDomain, tspan: (f64, f64)) -> f64 {
        let n = self.dim;
        let per_axis = match n {
            1 => 4097usize,
            2 => 129,
            _ => 17,
        };
        let times = 5;
        let mut out = vec![0.0; n];
        let mut sup: f64 = 0.0;
        let mut x = vec![0.0; n];
        let total: usize = per_axis.pow(n as u32);
        for k in 0..times {
            let t = tspan.0 + (tspan.1 - tspan.0) * k as f64 / (times - 1) as f64;
            for flat in 0..total {
                let mut f = flat;
                for axis in (0..n).rev() {
                    let i = f % per_axis;
                    f /= per_axis;
                    x[axis] = bounds.lo[axis]
                        + (bounds.hi[axis] - bounds.lo[axis]) * (i as f64 + 0.5)
                            / per_axis as f64;
                }
                if !self.domain.contains(&x) {
                    continue;
                }
                (self.evaluator)(t, &x, &mut out);
                let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm.is_finite() {
                    sup = sup.max(norm);
                }
            }
        }
        sup
    }

    /// The (n+m)-dimensional field (b(t, x), 0): its flow fixes the last m
    /// coordinates exactly.
    pub fn extend_dim(&self, m: usize) -> Result<VectorField, FieldError> {
        if m < 1 {
            return Err(FieldError::InvalidParam("extend_dim requires m >= 1".into()));
        }
        let n = self.dim;
        let base_eval = Arc::clone(&self.evaluator);
        let eval: EvalFn = Arc::new(move |t, x, out| {
            base_eval(t, &x[..n], &mut out[..n]);
            out[n..].iter_mut().for_each(|v| *v = 0.0);
        });
        let mut f = VectorField::new(
            n + m,
            self.time_interval,
            self.domain.extend(m),
            eval,
        );
        if let Some(jac) = &self.analytic_jacobian {
            let base_jac = Arc::clone(jac);
            let nm = n + m;
            let jac_ext: JacFn = Arc::new(move |t, x, out| {
                let mut small = vec![0.0; n * n];
                base_jac(t, &x[..n], &mut small);
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    for j in 0..n {
                        out[i * nm + j] = small[i * n + j];
                    }
                }
            });
            f = f.with_analytic_jacobian(jac_ext);
        }
        f.singular_points = self
            .singular_points
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.extend(std::iter::repeat(0.0).take(m));
                q
            })
            .collect();
        f.time_breakpoints = self.time_breakpoints.clone();
        f.label = format!("{}+{}d", self.label, m);
        Ok(f)
    }
}

/// Grid-sampled field file: a CSV layout with a header carrying dimension,
/// box bounds and grid shape, then one time block per snapshot with row-major
/// vector samples. Evaluation is multilinear in space and piecewise-constant
/// in time (the snapshot with the largest time <= t applies).
///
/// ```text
/// roughflow-grid-field,v1
/// dim,<n>
/// axis,<i>,<lo>,<hi>,<npts>     (one line per axis, npts >= 2)
/// time,<t0>
/// <v_1>,...,<v_n>               (npts_0 * ... * npts_{n-1} rows, last axis fastest)
/// time,<t1>
/// ...
/// ```
pub fn load_grid_field(path: &Path) -> Result<VectorField, FieldError> {
    let text = std::fs::read_to_string(path)?;
    parse_grid_field(&text)
}

pub fn parse_grid_field(text: &str) -> Result<VectorField, FieldError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let bad = |m: &str| FieldError::FileFormat(m.to_string());
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    if header.trim() != "roughflow-grid-field,v1" {
        return Err(bad("missing magic line 'roughflow-grid-field,v1'"));
    }
    let dim_line = lines.next().ok_or_else(|| bad("missing dim line"))?;
    let dim: usize = dim_line
        .trim()
        .strip_prefix("dim,")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("malformed dim line"))?;
    let mut lo = vec![0.0; dim];
    let mut hi = vec![0.0; dim];
    let mut shape = vec![0usize; dim];
    for _ in 0..dim {
        let l = lines.next().ok_or_else(|| bad("missing axis line"))?;
        let parts: Vec<&str> = l.trim().split(',').collect();
        if parts.len() != 5 || parts[0] != "axis" {
            return Err(bad("malformed axis line"));
        }
        let i: usize = parts[1].parse().map_err(|_| bad("axis index"))?;
        if i >= dim {
            return Err(bad("axis index out of range"));
        }
        lo[i] = parts[2].parse().map_err(|_| bad("axis lo"))?;
        hi[i] = parts[3].parse().map_err(|_| bad("axis hi"))?;
        shape[i] = parts[4].parse().map_err(|_| bad("axis npts"))?;
        if shape[i] < 2 {
            return Err(bad("axis needs at least 2 points"));
        }
    }
    let total: usize = shape.iter().product();
    let mut times: Vec<f64> = Vec::new();
    let mut snapshots: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<Vec<f64>> = None;
    for l in lines {
        let t = l.trim();
        if let Some(tv) = t.strip_prefix("time,") {
            if let Some(c) = current.take() {
                if c.len() != total * dim {
                    return Err(bad("snapshot row count mismatch"));
                }
                snapshots.push(c);
            }
            times.push(tv.parse().map_err(|_| bad("time value"))?);
            current = Some(Vec::with_capacity(total * dim));
        } else {
            let c = current.as_mut().ok_or_else(|| bad("samples before first time line"))?;
            for part in t.split(',') {
                c.push(part.trim().parse().map_err(|_| bad("sample value"))?);
            }
        }
    }
    if let Some(c) = current.take() {
        if c.len() != total * dim {
            return Err(bad("snapshot row count mismatch"));
        }
        snapshots.push(c);
    }
    if snapshots.is_empty() {
        return Err(bad("no time snapshots"));
    }
    if !times.windows(2).all(|w| w[0] < w[1]) {
        return Err(bad("time snapshots must be strictly increasing"));
    }

    let bounds = BoxDomain::new(lo.clone(), hi.clone());
    let grid_shape = shape.clone();
    let glo = lo.clone();
    let ghi = hi.clone();
    let times_for_eval = times.clone();
    let eval: EvalFn = Arc::new(move |t, x, out| {
        // piecewise-constant in time: most recent snapshot
        let k = match times_for_eval.iter().rposition(|&tv| tv <= t) {
            Some(k) => k,
            None => 0,
        };
        let data = &snapshots[k];
        multilinear(&glo, &ghi, &grid_shape, data, dim, x, out);
    });
    let tmin = *times.first().unwrap();
    let f = VectorField::new(dim, (tmin.min(0.0) - 1e9, 1e9), bounds, eval)
        .with_time_breakpoints(times)
        .with_label("grid-field");
    Ok(f)
}

fn multilinear(
    lo: &[f64],
    hi: &[f64],
    shape: &[usize],
    data: &[f64],
    dim: usize,
    x: &[f64],
    out: &mut [f64],
) {
    // Locate the base corner and interpolation weights per axis.
    let mut base = vec![0usize; dim];
    let mut w = vec![0.0; dim];
    for a in 0..dim {
        let n = shape[a];
        let rel = (x[a] - lo[a]) / (hi[a] - lo[a]) * (n - 1) as f64;
        let rel = rel.clamp(0.0, (n - 1) as f64);
        let i = (rel.floor() as usize).min(n - 2);
        base[a] = i;
        w[a] = rel - i as f64;
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    // Accumulate over the 2^dim corners.
    for corner in 0..(1usize << dim) {
        let mut weight = 1.0;
        let mut flat = 0usize;
        for a in 0..dim {
            let up = (corner >> a) & 1 == 1;
            weight *= if up { w[a] } else { 1.0 - w[a] };
            flat = flat * shape[a] + base[a] + usize::from(up);
        }
        if weight == 0.0 {
            continue;
        }
        for c in 0..dim {
            out[c] += weight * data[flat * dim + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotation() -> VectorField {
        let eval: EvalFn = Arc::new(|_t, x, out| {
            out[0] = -x[1];
            out[1] = x[0];
        });
        let jac: JacFn = Arc::new(|_t, _x, out| {
            out.copy_from_slice(&[0.0, -1.0, 1.0, 0.0]);
        });
        VectorField::new(2, (-10.0, 10.0), BoxDomain::unbounded(2), eval)
            .with_analytic_jacobian(jac)
    }

    #[test]
    fn rotation_eval_and_jacobian() {
        let f = rotation();
        assert_eq!(f.eval(0.0, &[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        let j = f.jacobian(0.0, &[0.3, -0.2]).unwrap();
        assert_eq!(j.entries, vec![0.0, -1.0, 1.0, 0.0]);
        assert!((j.op_norm - 1.0).abs() < 1e-14);
        assert_eq!(j.trace, 0.0);
    }

    #[test]
    fn constant_field_zero_jacobian() {
        let eval: EvalFn = Arc::new(|_t, _x, out| {
            out[0] = 2.5;
        });
        let f = VectorField::new(1, (0.0, 1.0), BoxDomain::unbounded(1), eval);
        let j = f.jacobian(0.5, &[0.7]).unwrap();
        assert_eq!(j.op_norm, 0.0);
    }

    #[test]
    fn out_of_domain_reported() {
        let f = rotation();
        assert!(matches!(f.eval(11.0, &[0.0, 0.0]), Err(FieldError::OutOfDomain { .. })));
    }

    #[test]
    fn nan_reported_not_propagated() {
        let eval: EvalFn = Arc::new(|_t, x, out| {
            out[0] = (x[0]).ln(); // NaN for negative x
        });
        let f = VectorField::new(1, (0.0, 1.0), BoxDomain::unbounded(1), eval);
        assert!(matches!(f.eval(0.0, &[-1.0]), Err(FieldError::NonFinite { .. })));
    }

    #[test]
    fn stencil_exit_detected() {
        let eval: EvalFn = Arc::new(|_t, x, out| out[0] = x[0] * x[0]);
        let f = VectorField::new(1, (0.0, 1.0), BoxDomain::interval(0.0, 1.0), eval)
            .with_difference_step(1e-2);
        assert!(matches!(
            f.jacobian(0.0, &[0.001]),
            Err(FieldError::StencilOutsideDomain { .. })
        ));
        let j = f.jacobian(0.0, &[0.5]).unwrap();
        assert!((j.get(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extend_dim_zero_component() {
        let eval: EvalFn = Arc::new(|_t, x, out| out[0] = x[0] * (1.0 - x[0].ln()));
        let f = VectorField::new(1, (0.0, 1.0), BoxDomain::interval(1e-12, 10.0), eval);
        let g = f.extend_dim(1).unwrap();
        let v = g.eval(0.0, &[1.0, 7.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0]);
        let j = g.jacobian(0.0, &[1.0, 7.0]).unwrap();
        // block structure [[D_x b, 0], [0, 0]]
        assert!(j.get(0, 1).abs() < 1e-8);
        assert_eq!(j.get(1, 0), 0.0);
        assert_eq!(j.get(1, 1), 0.0);
    }

    #[test]
    fn grid_field_roundtrip_linear() {
        // Sample b(x, y) = (y, -x) on a coarse grid: multilinear interpolation
        // reproduces a linear field exactly, including between nodes.
        let mut text = String::from("roughflow-grid-field,v1\ndim,2\n");
        text.push_str("axis,0,-1,1,5\naxis,1,-1,1,5\ntime,0\n");
        for i in 0..5 {
            for j in 0..5 {
                let x = -1.0 + 0.5 * i as f64;
                let y = -1.0 + 0.5 * j as f64;
                text.push_str(&format!("{},{}\n", y, -x));
            }
        }
        let f = parse_grid_field(&text).unwrap();
        let v = f.eval(0.3, &[0.37, -0.21]).unwrap();
        assert!((v[0] - (-0.21)).abs() < 1e-12);
        assert!((v[1] - (-0.37)).abs() < 1e-12);
        // piecewise-constant in time: same values later
        let v2 = f.eval(5.0, &[0.37, -0.21]).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn grid_field_bad_header() {
        assert!(matches!(
            parse_grid_field("nonsense\n"),
            Err(FieldError::FileFormat(_))
        ));
    }
}
