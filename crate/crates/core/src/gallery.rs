//! Example fields with closed-form flows and known pathologies. Every other
//! module is tested against these.
//!
//! * `loglinear` — b(x) = x log(e/x) on (0, e): well-posed, exponentially
//!   summable derivative, flow X(t,s,x) = e (x/e)^k with k = exp(s-t) and a
//!   sharp Sobolev exponent 1/(1-exp(s-t)).
//! * `sublog(alpha)` — b(x) = x log(1/x) (loglog(1/x) - 1)^alpha on
//!   (0, e^-e): for alpha = 1 well-posed with flow in W^{1,1} only; for
//!   alpha > 1 uniqueness fails (see [`nonuniqueness_pair`]).
//! * `cantor(level)` — planar field (1, b) whose integral curves are the
//!   parabolas x = s + a(s) tau^2 / 2 over the Cantor staircase a: well-posed
//!   but the flow maps the Cantor set to positive measure.
//! * `rotation`, `linear(lambda)` — smooth controls.

use std::sync::Arc;

use thiserror::Error;

use crate::domain::BoxDomain;
use crate::field::{EvalFn, JacFn, VectorField};

pub const E: f64 = std::f64::consts::E;
/// e^{-e}, the right support endpoint of the sublog fields.
pub const SUBLOG_SUPPORT_END: f64 = 0.06598803584531254;

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("unknown example '{0}'")]
    UnknownExample(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("argument {0} outside [0, 1]")]
    OutOfRange(f64),
}

/// Which gallery field to build.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleSpec {
    Loglinear,
    Sublog { alpha: f64 },
    Cantor { level: u32 },
    Rotation,
    Linear { lambda: f64 },
}

impl ExampleSpec {
    pub fn parse(name: &str, alpha: Option<f64>, level: Option<u32>, lambda: Option<f64>) -> Result<Self, GalleryError> {
        match name {
            "loglinear" => Ok(ExampleSpec::Loglinear),
            "sublog" => {
                let a = alpha.ok_or_else(|| GalleryError::InvalidParam("sublog requires alpha".into()))?;
                if a < 1.0 {
                    return Err(GalleryError::InvalidParam("sublog requires alpha >= 1".into()));
                }
                Ok(ExampleSpec::Sublog { alpha: a })
            }
            "cantor" => {
                let l = level.unwrap_or(12);
                if l < 1 {
                    return Err(GalleryError::InvalidParam("cantor requires level >= 1".into()));
                }
                Ok(ExampleSpec::Cantor { level: l })
            }
            "rotation" => Ok(ExampleSpec::Rotation),
            "linear" => {
                let l = lambda.ok_or_else(|| GalleryError::InvalidParam("linear requires lambda".into()))?;
                Ok(ExampleSpec::Linear { lambda: l })
            }
            other => Err(GalleryError::UnknownExample(other.to_string())),
        }
    }
}

pub type ClosedFlowFn = Arc<dyn Fn(f64, f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type ClosedFlowDerivFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ExampleMeta {
    /// Exponent q*(t, s) such that X(t,s,.) is in W^{1,q} exactly for q < q*
    /// (None where the flow is smooth or the notion does not apply).
    pub sharp_sobolev_exponent: Option<Arc<dyn Fn(f64, f64) -> Option<f64> + Send + Sync>>,
    pub wellposed: bool,
    pub notes: String,
}

#[derive(Clone)]
pub struct ExampleField {
    pub field: VectorField,
    pub closed_flow: Option<ClosedFlowFn>,
    /// Exact spatial derivative of the flow; one-dimensional examples only.
    pub closed_flow_derivative: Option<ClosedFlowDerivFn>,
    pub metadata: ExampleMeta,
}

impl ExampleField {
    pub fn flow(&self, t: f64, s: f64, x: &[f64]) -> Option<Vec<f64>> {
        self.closed_flow.as_ref().map(|f| f(t, s, x))
    }

    pub fn flow_derivative(&self, t: f64, s: f64, x: f64) -> Option<f64> {
        self.closed_flow_derivative.as_ref().map(|f| f(t, s, x))
    }
}

pub fn make_example(spec: &ExampleSpec) -> Result<ExampleField, GalleryError> {
    match spec {
        ExampleSpec::Loglinear => Ok(loglinear()),
        ExampleSpec::Sublog { alpha } => sublog(*alpha),
        ExampleSpec::Cantor { level } => cantor(*level),
        ExampleSpec::Rotation => Ok(rotation()),
        ExampleSpec::Linear { lambda } => Ok(linear(*lambda)),
    }
}

fn loglinear() -> ExampleField {
    let eval: EvalFn = Arc::new(|_t, x, out| {
        let z = x[0];
        out[0] = if z > 0.0 && z < E { z * (E / z).ln() } else { 0.0 };
    });
    let jac: JacFn = Arc::new(|_t, x, out| {
        let z = x[0];
        out[0] = if z > 0.0 && z < E { (1.0 / z).ln() } else { 0.0 };
    });
    let field = VectorField::new(1, (-20.0, 20.0), BoxDomain::interval(-1.0, 3.0), eval)
        .with_analytic_jacobian(jac)
        .with_singular_points(vec![vec![0.0]])
        .with_label("loglinear");
    let flow: ClosedFlowFn = Arc::new(|t, s, x| {
        let z = x[0];
        if z <= 0.0 || z >= E {
            vec![z]
        } else {
            let k = (s - t).exp();
            vec![E * (z / E).powf(k)]
        }
    });
    let deriv: ClosedFlowDerivFn = Arc::new(|t, s, z| {
        if z <= 0.0 || z >= E {
            1.0
        } else {
            let k = (s - t).exp();
            k * (z / E).powf(k - 1.0)
        }
    });
    let sharp = Arc::new(|t: f64, s: f64| {
        if s < t {
            Some(1.0 / (1.0 - (s - t).exp()))
        } else {
            None
        }
    });
    ExampleField {
        field,
        closed_flow: Some(flow),
        closed_flow_derivative: Some(deriv),
        metadata: ExampleMeta {
            sharp_sobolev_exponent: Some(sharp),
            wellposed: true,
            notes: "x log(e/x): exponentially summable derivative, sharp W^{1,q} loss in time".into(),
        },
    }
}

/// b for the sublog family on the open support (0, e^-e); 0 elsewhere.
fn sublog_b(alpha: f64, z: f64) -> f64 {
    if z <= 0.0 || z >= SUBLOG_SUPPORT_END {
        return 0.0;
    }
    let u = (1.0 / z).ln(); // > e on the support
    let l = u.ln(); // > 1
    z * u * (l - 1.0).powf(alpha)
}

fn sublog_db(alpha: f64, z: f64) -> f64 {
    if z <= 0.0 || z >= SUBLOG_SUPPORT_END {
        return 0.0;
    }
    let u = (1.0 / z).ln();
    let l = u.ln();
    (u - 1.0) * (l - 1.0).powf(alpha) - alpha * (l - 1.0).powf(alpha - 1.0)
}

fn sublog(alpha: f64) -> Result<ExampleField, GalleryError> {
    if alpha < 1.0 {
        return Err(GalleryError::InvalidParam("sublog requires alpha >= 1".into()));
    }
    let a = alpha;
    let eval: EvalFn = Arc::new(move |_t, x, out| out[0] = sublog_b(a, x[0]));
    let jac: JacFn = Arc::new(move |_t, x, out| out[0] = sublog_db(a, x[0]));
    let field = VectorField::new(1, (-20.0, 20.0), BoxDomain::interval(-1.0, 1.0), eval)
        .with_analytic_jacobian(jac)
        .with_singular_points(vec![vec![0.0]])
        .with_label(format!("sublog(alpha={a})"));
    if alpha == 1.0 {
        let flow: ClosedFlowFn = Arc::new(|t, s, x| {
            let z = x[0];
            if z <= 0.0 || z >= SUBLOG_SUPPORT_END {
                vec![z]
            } else {
                let k = (s - t).exp();
                let u = (1.0 / z).ln();
                vec![(-E * (u / E).powf(k)).exp()]
            }
        });
        let deriv: ClosedFlowDerivFn = Arc::new(|t, s, z| {
            if z <= 0.0 || z >= SUBLOG_SUPPORT_END {
                1.0
            } else {
                let k = (s - t).exp();
                let u = (1.0 / z).ln();
                let x_img = (-E * (u / E).powf(k)).exp();
                x_img * (k / z) * (u / E).powf(k - 1.0)
            }
        });
        // Flow in W^{1,q} for q = 1 only once t > s.
        let sharp = Arc::new(|t: f64, s: f64| if t > s { Some(1.0) } else { None });
        Ok(ExampleField {
            field,
            closed_flow: Some(flow),
            closed_flow_derivative: Some(deriv),
            metadata: ExampleMeta {
                sharp_sobolev_exponent: Some(sharp),
                wellposed: true,
                notes: "subexponential order 1: flow absolutely continuous but in no W^{1,p}, p > 1".into(),
            },
        })
    } else {
        Ok(ExampleField {
            field,
            closed_flow: None,
            closed_flow_derivative: None,
            metadata: ExampleMeta {
                sharp_sobolev_exponent: None,
                wellposed: false,
                notes: "subexponential order 1 with beta > 1: two distinct solutions through 0".into(),
            },
        })
    }
}

fn rotation() -> ExampleField {
    let eval: EvalFn = Arc::new(|_t, x, out| {
        out[0] = -x[1];
        out[1] = x[0];
    });
    let jac: JacFn = Arc::new(|_t, _x, out| out.copy_from_slice(&[0.0, -1.0, 1.0, 0.0]));
    let field = VectorField::new(2, (-100.0, 100.0), BoxDomain::unbounded(2), eval)
        .with_analytic_jacobian(jac)
        .with_label("rotation");
    let flow: ClosedFlowFn = Arc::new(|t, s, x| {
        let th = t - s;
        let (sin, cos) = th.sin_cos();
        vec![cos * x[0] - sin * x[1], sin * x[0] + cos * x[1]]
    });
    ExampleField {
        field,
        closed_flow: Some(flow),
        closed_flow_derivative: None,
        metadata: ExampleMeta {
            sharp_sobolev_exponent: None,
            wellposed: true,
            notes: "divergence-free isometric control".into(),
        },
    }
}

fn linear(lambda: f64) -> ExampleField {
    let l = lambda;
    let eval: EvalFn = Arc::new(move |_t, x, out| out[0] = l * x[0]);
    let jac: JacFn = Arc::new(move |_t, _x, out| out[0] = l);
    let field = VectorField::new(1, (-100.0, 100.0), BoxDomain::unbounded(1), eval)
        .with_analytic_jacobian(jac)
        .with_label(format!("linear(lambda={l})"));
    let flow: ClosedFlowFn = Arc::new(move |t, s, x| vec![x[0] * (l * (t - s)).exp()]);
    let deriv: ClosedFlowDerivFn = Arc::new(move |t, s, _x| (l * (t - s)).exp());
    ExampleField {
        field,
        closed_flow: Some(flow),
        closed_flow_derivative: Some(deriv),
        metadata: ExampleMeta {
            sharp_sobolev_exponent: None,
            wellposed: true,
            notes: "scalar linear control; Gronwall bound is an equality for lambda(t-s) >= 0".into(),
        },
    }
}

/// Level-N ternary approximation of the Cantor staircase on [0, 1]:
/// a(x) = a(3x)/2 on [0, 1/3], 1/2 on [1/3, 2/3], 1/2 + a(3x-2)/2 on [2/3, 1],
/// closed with a_0(x) = x. Exact on every plateau present at level N and at
/// all level-N triadic endpoints.
pub fn cantor_staircase(s: f64, level: u32) -> Result<f64, GalleryError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(GalleryError::OutOfRange(s));
    }
    Ok(staircase_rec(s, level))
}

fn staircase_rec(s: f64, level: u32) -> f64 {
    let mut x = s;
    let mut value = 0.0;
    let mut scale = 1.0;
    for _ in 0..level {
        if x < 1.0 / 3.0 {
            x *= 3.0;
            scale *= 0.5;
        } else if x <= 2.0 / 3.0 {
            return value + scale * 0.5;
        } else {
            x = 3.0 * x - 2.0;
            value += scale * 0.5;
            scale *= 0.5;
        }
    }
    value + scale * x
}

/// Staircase extended to all of R: 0 for s <= 0, 1 for s >= 1.
pub fn staircase_extended(s: f64, level: u32) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        staircase_rec(s, level)
    }
}

/// Solve sigma + a(sigma) tau^2 / 2 = x for the parabola label sigma.
pub fn cantor_label(tau: f64, x: f64, level: u32) -> f64 {
    let half_t2 = 0.5 * tau * tau;
    if x <= 0.0 {
        return x;
    }
    if x >= 1.0 + half_t2 {
        return x - half_t2;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let g = mid + staircase_extended(mid, level) * half_t2;
        if g < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn cantor(level: u32) -> Result<ExampleField, GalleryError> {
    if level < 1 {
        return Err(GalleryError::InvalidParam("cantor requires level >= 1".into()));
    }
    let n = level;
    // State is (tau, x): the first coordinate advances at unit speed and the
    // second follows the parabola foliation x = sigma + a(sigma) tau^2 / 2.
    let eval: EvalFn = Arc::new(move |_t, p, out| {
        let sigma = cantor_label(p[0], p[1], n);
        out[0] = 1.0;
        out[1] = staircase_extended(sigma, n) * p[0];
    });
    let field = VectorField::new(2, (-20.0, 20.0), BoxDomain::unbounded(2), eval)
        .with_label(format!("cantor(level={n})"));
    let flow: ClosedFlowFn = Arc::new(move |t, s, p| {
        let sigma = cantor_label(p[0], p[1], n);
        let a = staircase_extended(sigma, n);
        let tau = p[0] + (t - s);
        vec![tau, sigma + 0.5 * a * tau * tau]
    });
    Ok(ExampleField {
        field,
        closed_flow: Some(flow),
        closed_flow_derivative: None,
        metadata: ExampleMeta {
            sharp_sobolev_exponent: None,
            wellposed: true,
            notes: "well-posed, but the Cantor set is mapped to measure t^2/2: flow not absolutely continuous".into(),
        },
    })
}

/// One trajectory given in closed form, for residual checking.
#[derive(Clone)]
pub struct TrajectoryOracle {
    eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub label: String,
}

impl TrajectoryOracle {
    pub fn eval(&self, t: f64) -> f64 {
        (self.eval)(t)
    }
}

/// Two distinct solutions of gamma' = b(gamma), gamma(0) = 0 for the
/// sublog(alpha) field with alpha > 1: the rest solution and the escaping
/// branch obtained by separation of variables,
/// gamma2(t) = exp(-exp(1 + ((alpha-1) t)^{-1/(alpha-1)})) for t > 0.
pub fn nonuniqueness_pair(alpha: f64) -> Result<(TrajectoryOracle, TrajectoryOracle), GalleryError> {
    if alpha <= 1.0 {
        return Err(GalleryError::InvalidParam(
            "non-uniqueness requires alpha > 1".into(),
        ));
    }
    let gamma1 = TrajectoryOracle {
        eval: Arc::new(|_t| 0.0),
        label: "gamma1 (rest)".into(),
    };
    let a = alpha;
    let gamma2 = TrajectoryOracle {
        eval: Arc::new(move |t| {
            if t <= 0.0 {
                0.0
            } else {
                let v = 1.0 + ((a - 1.0) * t).powf(-1.0 / (a - 1.0));
                (-v.exp()).exp()
            }
        }),
        label: "gamma2 (escaping)".into(),
    };
    Ok((gamma1, gamma2))
}

/// Endpoints of the 2^level closed intervals covering the Cantor set at the
/// given construction level, in increasing order.
pub fn cantor_intervals(level: u32) -> Vec<(f64, f64)> {
    let mut ivs = vec![(0.0f64, 1.0f64)];
    for _ in 0..level {
        let mut next = Vec::with_capacity(ivs.len() * 2);
        for (a, b) in ivs {
            let third = (b - a) / 3.0;
            next.push((a, a + third));
            next.push((b - third, b));
        }
        ivs = next;
    }
    ivs
}
