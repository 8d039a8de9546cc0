//! Itô formula terms evaluated on simulated Itô processes, plus Taylor
//! remainder diagnostics.
//!
//! Spatial terms are evaluated at the left grid time `t_k`. The continuous
//! displacement of step `k` is expanded around `X_{t_k}`; each jump is expanded
//! around its own pre-jump state, so the jump brackets are exact.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hilbert::{outer, trace_bilinear, BilinearTensor, HilbertVec, LinearOp};
use crate::integrate::{Integrand, ItoPath, JumpSource};
use crate::noise::{Flavor, NoiseModel};

pub type ValueFn = dyn Fn(f64, &HilbertVec) -> HilbertVec + Send + Sync;
pub type GradFn = dyn Fn(f64, &HilbertVec) -> LinearOp + Send + Sync;
pub type HessFn = dyn Fn(f64, &HilbertVec) -> BilinearTensor + Send + Sync;

const FD_STEP: f64 = 1e-5;
const FD_RTOL: f64 = 1e-4;
const FD_PROBES: usize = 8;

/// `f: [0,∞) × G → K` of class `C^{1,2}` with its derivatives.
#[derive(Clone)]
pub struct SmoothFunction {
    name: String,
    dim_g: usize,
    dim_k: usize,
    f: Arc<ValueFn>,
    f_t: Arc<ValueFn>,
    f_x: Arc<GradFn>,
    f_xx: Arc<HessFn>,
}

impl fmt::Debug for SmoothFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothFunction")
            .field("name", &self.name)
            .field("dim_g", &self.dim_g)
            .field("dim_k", &self.dim_k)
            .finish()
    }
}

fn fd_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FD_RTOL * a.abs().max(b.abs()).max(1.0)
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> HilbertVec {
    loop {
        let v = HilbertVec::from_vec((0..d).map(|_| rng.sample(StandardNormal)).collect());
        let n = v.norm();
        if n > 1e-3 {
            return v.scaled(1.0 / n);
        }
    }
}

impl SmoothFunction {
    /// Builds the function and checks `f_t`, `f_x`, `f_xx` against central
    /// finite differences at a few probes with `‖x‖ >= 0.5`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dim_g: usize,
        dim_k: usize,
        f: impl Fn(f64, &HilbertVec) -> HilbertVec + Send + Sync + 'static,
        f_t: impl Fn(f64, &HilbertVec) -> HilbertVec + Send + Sync + 'static,
        f_x: impl Fn(f64, &HilbertVec) -> LinearOp + Send + Sync + 'static,
        f_xx: impl Fn(f64, &HilbertVec) -> BilinearTensor + Send + Sync + 'static,
    ) -> Result<Self> {
        let fun = SmoothFunction {
            name: name.into(),
            dim_g,
            dim_k,
            f: Arc::new(f),
            f_t: Arc::new(f_t),
            f_x: Arc::new(f_x),
            f_xx: Arc::new(f_xx),
        };
        fun.gradient_check()?;
        Ok(fun)
    }

    fn gradient_check(&self) -> Result<()> {
        let fail = |detail: String| Error::GradientCheck {
            function: self.name.clone(),
            detail,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let h = FD_STEP;
        for _ in 0..FD_PROBES {
            let t: f64 = rng.random_range(0.0..1.0);
            let x = random_unit(&mut rng, self.dim_g).scaled(rng.random_range(0.5..1.5));
            let e = random_unit(&mut rng, self.dim_g);
            let e2 = random_unit(&mut rng, self.dim_g);
            let fx = self.value(t, &x);
            if fx.dim() != self.dim_k {
                return Err(fail(format!("f has dimension {}, declared {}", fx.dim(), self.dim_k)));
            }
            let grad = self.f_x(t, &x);
            let hess = self.f_xx(t, &x);
            if grad.dim_out() != self.dim_k || grad.dim_in() != self.dim_g {
                return Err(fail("f_x has the wrong shape".into()));
            }
            if hess.dim_k() != self.dim_k || hess.dim_g() != self.dim_g {
                return Err(fail("f_xx has the wrong shape".into()));
            }
            let xp = &x + &e.scaled(h);
            let xm = &x - &e.scaled(h);
            let fd_x = (&self.value(t, &xp) - &self.value(t, &xm)).scaled(0.5 / h);
            let an_x = grad.apply(&e);
            let fd_t = (&self.value(t + h, &x) - &self.value(t - h, &x)).scaled(0.5 / h);
            let an_t = self.f_t(t, &x);
            let x2p = &x + &e2.scaled(h);
            let x2m = &x - &e2.scaled(h);
            let fd_xx = (&self.f_x(t, &x2p).apply(&e) - &self.f_x(t, &x2m).apply(&e)).scaled(0.5 / h);
            let an_xx = hess.eval(&e, &e2);
            for c in 0..self.dim_k {
                if !fd_close(fd_x.coords()[c], an_x.coords()[c]) {
                    return Err(fail(format!(
                        "f_x mismatch at x={:?}: analytic {} vs finite difference {}",
                        x.coords(),
                        an_x.coords()[c],
                        fd_x.coords()[c]
                    )));
                }
                if !fd_close(fd_t.coords()[c], an_t.coords()[c]) {
                    return Err(fail(format!(
                        "f_t mismatch at t={t}: analytic {} vs finite difference {}",
                        an_t.coords()[c],
                        fd_t.coords()[c]
                    )));
                }
                if !fd_close(fd_xx.coords()[c], an_xx.coords()[c]) {
                    return Err(fail(format!(
                        "f_xx mismatch at x={:?}: analytic {} vs finite difference {}",
                        x.coords(),
                        an_xx.coords()[c],
                        fd_xx.coords()[c]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Registered functions: `quadratic`, `norm_p:<p>` (p >= 2),
    /// `linear:<a>` (`a` a single coefficient or one per coordinate),
    /// `gauss_cos` (`exp(-‖x‖²) cos t`).
    pub fn from_name(name: &str, dim_g: usize) -> Result<Self> {
        let (head, arg) = match name.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (name, None),
        };
        let bad = |why: &str| Error::InvalidArgument(format!("function '{name}': {why}"));
        match (head, arg) {
            ("quadratic", None) => Self::norm_p(2.0, dim_g),
            ("gauss_cos", None) => Self::gauss_cos(dim_g),
            ("norm_p", Some(a)) => {
                let p: f64 = a.parse().map_err(|_| bad("p is not a number"))?;
                Self::norm_p(p, dim_g)
            }
            ("linear", Some(a)) => {
                let coeffs = a
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("coefficients are not numbers"))?;
                let coeffs = match coeffs.len() {
                    1 => vec![coeffs[0]; dim_g],
                    n if n == dim_g => coeffs,
                    n => return Err(bad(&format!("{n} coefficients for dimension {dim_g}"))),
                };
                Self::linear(HilbertVec::from_vec(coeffs))
            }
            _ => Err(Error::InvalidArgument(format!(
                "unknown function '{name}'; valid: {}",
                Self::REGISTRY.join(", ")
            ))),
        }
    }

    pub const REGISTRY: [&'static str; 4] = ["quadratic", "norm_p:<p>", "linear:<a>", "gauss_cos"];

    /// `‖x‖^p`. `f_xx(0)` is `2I` for `p = 2` and `0` for `p > 2`.
    pub fn norm_p(p: f64, dim_g: usize) -> Result<Self> {
        if !(p >= 2.0) {
            return Err(Error::InvalidArgument(format!("norm_p needs p >= 2, got {p}")));
        }
        let name = if p == 2.0 { "quadratic".to_string() } else { format!("norm_p:{p}") };
        Self::new(
            name,
            dim_g,
            1,
            move |_, x| HilbertVec::from_slice(&[pow_norm(x, p)]),
            |_, _| HilbertVec::zeros(1),
            move |_, x| {
                let c = p * pow_norm(x, p - 2.0);
                LinearOp::from_fn(1, x.dim(), |_, i| c * x.coords()[i])
            },
            move |_, x| BilinearTensor::from_matrix(&norm_p_hessian(x, p)),
        )
    }

    /// `<a, x>`.
    pub fn linear(a: HilbertVec) -> Result<Self> {
        let d = a.dim();
        let (a1, a2) = (a.clone(), a.clone());
        Self::new(
            "linear",
            d,
            1,
            move |_, x| HilbertVec::from_slice(&[a1.dot(x)]),
            |_, _| HilbertVec::zeros(1),
            move |_, _| LinearOp::from_fn(1, d, |_, i| a2.coords()[i]),
            move |_, _| BilinearTensor::zeros(1, d),
        )
    }

    pub fn gauss_cos(dim_g: usize) -> Result<Self> {
        Self::new(
            "gauss_cos",
            dim_g,
            1,
            |t, x| HilbertVec::from_slice(&[(-x.norm_sq()).exp() * t.cos()]),
            |t, x| HilbertVec::from_slice(&[-(-x.norm_sq()).exp() * t.sin()]),
            |t, x| {
                let c = -2.0 * (-x.norm_sq()).exp() * t.cos();
                LinearOp::from_fn(1, x.dim(), |_, i| c * x.coords()[i])
            },
            |t, x| {
                let c = (-x.norm_sq()).exp() * t.cos();
                let m = &outer(x, x).scaled(4.0 * c) - &LinearOp::identity(x.dim()).scaled(2.0 * c);
                BilinearTensor::from_matrix(&m)
            },
        )
    }

    /// Component-wise stacking of functions on the same `G`.
    pub fn stack(parts: &[SmoothFunction]) -> Result<Self> {
        let dim_g = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?
            .dim_g;
        if parts.iter().any(|p| p.dim_g != dim_g) {
            return Err(Error::InvalidArgument("stacked functions must share G".into()));
        }
        let dim_k = parts.iter().map(|p| p.dim_k).sum();
        let name = parts.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join("+");
        let (p1, p2, p3, p4) = (parts.to_vec(), parts.to_vec(), parts.to_vec(), parts.to_vec());
        let cat = |vs: Vec<HilbertVec>| {
            HilbertVec::from_vec(vs.iter().flat_map(|v| v.coords().to_vec()).collect())
        };
        Self::new(
            name,
            dim_g,
            dim_k,
            move |t, x| cat(p1.iter().map(|p| p.value(t, x)).collect()),
            move |t, x| cat(p2.iter().map(|p| p.f_t(t, x)).collect()),
            move |t, x| {
                let rows: Vec<Vec<f64>> = p3.iter().flat_map(|p| p.f_x(t, x).rows()).collect();
                LinearOp::from_rows(&rows).expect("rows share G")
            },
            move |t, x| {
                let comps: Vec<LinearOp> = p4
                    .iter()
                    .flat_map(|p| {
                        let h = p.f_xx(t, x);
                        (0..h.dim_k()).map(move |k| h.component(k))
                    })
                    .collect();
                BilinearTensor::from_components(&comps)
            },
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_g(&self) -> usize {
        self.dim_g
    }

    pub fn dim_k(&self) -> usize {
        self.dim_k
    }

    pub fn value(&self, t: f64, x: &HilbertVec) -> HilbertVec {
        (self.f)(t, x)
    }

    pub fn f_t(&self, t: f64, x: &HilbertVec) -> HilbertVec {
        (self.f_t)(t, x)
    }

    pub fn f_x(&self, t: f64, x: &HilbertVec) -> LinearOp {
        (self.f_x)(t, x)
    }

    pub fn f_xx(&self, t: f64, x: &HilbertVec) -> BilinearTensor {
        (self.f_xx)(t, x)
    }
}

fn pow_norm(x: &HilbertVec, q: f64) -> f64 {
    if q == 0.0 {
        1.0
    } else {
        x.norm().powf(q)
    }
}

fn norm_p_hessian(x: &HilbertVec, p: f64) -> LinearOp {
    let d = x.dim();
    let r = x.norm();
    if r == 0.0 {
        return if p == 2.0 { LinearOp::identity(d).scaled(2.0) } else { LinearOp::zeros(d, d) };
    }
    let mut m = LinearOp::identity(d).scaled(p * r.powf(p - 2.0));
    if p != 2.0 {
        m += &outer(x, x).scaled(p * (p - 2.0) * r.powf(p - 4.0));
    }
    m
}

/// `h(t,y,x) = f(t,y) − f(t,x) − f_x(t,x)(y−x) − ½ f_xx(t,x)(y−x, y−x)`.
pub fn taylor_remainder(fun: &SmoothFunction, t: f64, y: &HilbertVec, x: &HilbertVec) -> HilbertVec {
    let d = y - x;
    let mut h = &fun.value(t, y) - &fun.value(t, x);
    h -= &fun.f_x(t, x).apply(&d);
    h -= &fun.f_xx(t, x).eval(&d, &d).scaled(0.5);
    h
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Integral form `∫_0^1 (1−θ)[f_xx(t, x+θd) − f_xx(t, x)](d, d) dθ` with
/// composite Gauss–Legendre quadrature.
pub fn taylor_remainder_integral(
    fun: &SmoothFunction,
    t: f64,
    y: &HilbertVec,
    x: &HilbertVec,
    nodes: usize,
    panels: usize,
) -> HilbertVec {
    let d = y - x;
    let base = fun.f_xx(t, x).eval(&d, &d);
    let (z, w) = gauss_legendre(nodes);
    let mut acc = HilbertVec::zeros(fun.dim_k());
    let width = 1.0 / panels as f64;
    for p in 0..panels {
        let a = p as f64 * width;
        for (zi, wi) in z.iter().zip(&w) {
            let theta = a + 0.5 * width * (zi + 1.0);
            let pt = x + &d.scaled(theta);
            let diff = &fun.f_xx(t, &pt).eval(&d, &d) - &base;
            acc.axpy(0.5 * width * wi * (1.0 - theta), &diff);
        }
    }
    acc
}

/// Sampled `Γ(T, R, δ) = sup |h(t,y,x)| / ‖y−x‖²` over `t ∈ [0,T]`, `‖x‖ <= R`,
/// `‖y−x‖ <= δ`. The same probes are scaled for every `δ` under one seed.
pub fn gamma_estimate(
    fun: &SmoothFunction,
    horizon: f64,
    ball_radius: f64,
    delta: f64,
    n_probe: usize,
    seed: u64,
) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
    }
    let d = fun.dim_g();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sup = 0.0f64;
    for _ in 0..n_probe {
        let t = rng.random_range(0.0..=horizon);
        let rx: f64 = rng.random::<f64>().powf(1.0 / d as f64) * ball_radius;
        let x = random_unit(&mut rng, d).scaled(rx);
        let ru: f64 = rng.random::<f64>().powf(1.0 / d as f64).max(1e-3);
        let u = random_unit(&mut rng, d).scaled(ru);
        let step = u.scaled(delta);
        let y = &x + &step;
        let h = taylor_remainder(fun, t, &y, &x);
        sup = sup.max(h.norm() / step.norm_sq());
    }
    Ok(sup)
}

/// Which second-order term closes the formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceVariant {
    /// `½ Tr_{ΦQ_{M^c}^{1/2}} f_xx · mass^c`.
    Compensator,
    /// `½ f_xx(D_k, D_k)` with `D_k` the realized continuous displacement.
    Realized,
}

/// The five terms of the Itô formula, both trace variants, and the endpoints.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItoTerms {
    pub time: HilbertVec,
    pub stoch: HilbertVec,
    pub fv: HilbertVec,
    pub trace: HilbertVec,
    pub trace_realized: HilbertVec,
    pub jump: HilbertVec,
    pub f_start: HilbertVec,
    pub f_end: HilbertVec,
}

impl ItoTerms {
    pub fn trace_term(&self, variant: TraceVariant) -> &HilbertVec {
        match variant {
            TraceVariant::Compensator => &self.trace,
            TraceVariant::Realized => &self.trace_realized,
        }
    }

    /// `f(t, X_t) − f(0, ξ) − Σ terms`.
    pub fn residual(&self, variant: TraceVariant) -> HilbertVec {
        let mut r = &self.f_end - &self.f_start;
        r -= &self.time;
        r -= &self.stoch;
        r -= &self.fv;
        r -= self.trace_term(variant);
        r -= &self.jump;
        r
    }

    /// Magnitude of the largest contribution; the natural scale for rounding.
    pub fn scale(&self, variant: TraceVariant) -> f64 {
        [
            &self.f_end,
            &self.f_start,
            &self.time,
            &self.stoch,
            &self.fv,
            self.trace_term(variant),
            &self.jump,
        ]
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max)
    }

    pub fn relative_residual(&self, variant: TraceVariant) -> f64 {
        let s = self.scale(variant);
        let r = self.residual(variant).norm();
        if s == 0.0 {
            r
        } else {
            r / s
        }
    }
}

fn check_function(fun: &SmoothFunction, ito_path: &ItoPath) -> Result<()> {
    if fun.dim_g() != ito_path.dim() {
        return Err(Error::DimensionMismatch {
            context: "function domain vs process dimension",
            expected: ito_path.dim(),
            actual: fun.dim_g(),
        });
    }
    Ok(())
}

/// All terms of the Itô formula for `f(t, X_t)` on one path up to `t`.
pub fn ito_terms(
    fun: &SmoothFunction,
    ito_path: &ItoPath,
    model: &NoiseModel,
    phi: &Integrand,
    t: f64,
) -> Result<ItoTerms> {
    ito_path.check_provenance(phi)?;
    check_function(fun, ito_path)?;
    let grid = *ito_path.grid();
    let kt = grid.step_of(t)?;
    if kt > ito_path.n_steps() {
        return Err(Error::InvalidArgument("Itô path is shorter than t".into()));
    }
    let dt = grid.dt();
    let dk = fun.dim_k();
    let mut terms = ItoTerms {
        time: HilbertVec::zeros(dk),
        stoch: HilbertVec::zeros(dk),
        fv: HilbertVec::zeros(dk),
        trace: HilbertVec::zeros(dk),
        trace_realized: HilbertVec::zeros(dk),
        jump: HilbertVec::zeros(dk),
        f_start: fun.value(0.0, ito_path.value(0)),
        f_end: fun.value(grid.time(kt), ito_path.value(kt)),
    };
    for k in 0..kt {
        let tk = grid.time(k);
        let x = ito_path.value(k);
        terms.time += &fun.f_t(tk, x).scaled(dt);
        let grad = fun.f_x(tk, x);
        let hess = fun.f_xx(tk, x);
        terms.stoch += &grad.apply(ito_path.stochastic_continuous_increment(k));
        terms.fv += &grad.apply(ito_path.drift_continuous_increment(k));
        let disp = ito_path.continuous_increment(k);
        terms.trace_realized += &hess.eval(&disp, &disp).scaled(0.5);
        for j in 0..ito_path.n_cells() {
            let rate = model.rate(j, Flavor::Continuous);
            if rate == 0.0 {
                continue;
            }
            let s = ito_path
                .operator(k, j)
                .compose(model.covariance_sqrt(j, Flavor::Continuous))?;
            terms.trace += &trace_bilinear(&hess, &s, &s)?.scaled(0.5 * rate * dt);
        }
        for jump in ito_path.jumps_in_step(k) {
            let pre = &jump.pre_value;
            let post = pre + &jump.delta;
            let linear = fun.f_x(tk, pre).apply(&jump.delta);
            let mut bracket = &fun.value(tk, &post) - &fun.value(tk, pre);
            bracket -= &linear;
            terms.jump += &bracket;
            match jump.source {
                JumpSource::Noise { .. } => terms.stoch += &linear,
                JumpSource::Driver => terms.fv += &linear,
            }
        }
    }
    Ok(terms)
}

pub fn ito_residual(
    fun: &SmoothFunction,
    ito_path: &ItoPath,
    model: &NoiseModel,
    phi: &Integrand,
    t: f64,
    variant: TraceVariant,
) -> Result<HilbertVec> {
    Ok(ito_terms(fun, ito_path, model, phi, t)?.residual(variant))
}

/// Terms of the expansion of `‖X_t‖^p` with the explicit derivatives of the norm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormPTerms {
    pub p: f64,
    /// `∫∫ p‖X‖^{p−2}<X, Φ dM>`.
    pub stochastic: f64,
    /// `∫ p‖X‖^{p−2}<X, ψ dA>`.
    pub drift: f64,
    /// `½ p(p−2) ∫∫ ‖X‖^{p−4} ‖Q^{1/2} Φ* X‖² d⟨⟨M^c⟩⟩`.
    pub outer_trace: f64,
    /// `½ p ∫∫ ‖X‖^{p−2} ‖Φ Q^{1/2}‖²_HS d⟨⟨M^c⟩⟩`.
    pub hs_norm: f64,
    /// `Σ ‖X_s‖^p − ‖X_{s−}‖^p − p‖X_{s−}‖^{p−2}<X_{s−}, ΔX_s>`.
    pub jump: f64,
}

pub fn norm_p_expansion(
    ito_path: &ItoPath,
    model: &NoiseModel,
    phi: &Integrand,
    p: f64,
    t: f64,
) -> Result<NormPTerms> {
    if !(p >= 2.0) {
        return Err(Error::InvalidArgument(format!("norm_p expansion needs p >= 2, got {p}")));
    }
    ito_path.check_provenance(phi)?;
    let grid = *ito_path.grid();
    let kt = grid.step_of(t)?;
    if kt > ito_path.n_steps() {
        return Err(Error::InvalidArgument("Itô path is shorter than t".into()));
    }
    let dt = grid.dt();
    let lin = |x: &HilbertVec, v: &HilbertVec| p * pow_norm(x, p - 2.0) * x.dot(v);
    let mut out = NormPTerms {
        p,
        stochastic: 0.0,
        drift: 0.0,
        outer_trace: 0.0,
        hs_norm: 0.0,
        jump: 0.0,
    };
    for k in 0..kt {
        let x = ito_path.value(k);
        let r = x.norm();
        out.stochastic += lin(x, ito_path.stochastic_continuous_increment(k));
        out.drift += lin(x, ito_path.drift_continuous_increment(k));
        for j in 0..ito_path.n_cells() {
            let rate = model.rate(j, Flavor::Continuous);
            if rate == 0.0 {
                continue;
            }
            let op = ito_path.operator(k, j);
            let s = op.compose(model.covariance_sqrt(j, Flavor::Continuous))?;
            let mass = rate * dt;
            let hs_coef = if r == 0.0 && p > 2.0 { 0.0 } else { pow_norm(x, p - 2.0) };
            out.hs_norm += 0.5 * p * hs_coef * s.hs_norm_sq() * mass;
            if p != 2.0 && r > 0.0 {
                let proj = s.adjoint().apply(x).norm_sq();
                out.outer_trace += 0.5 * p * (p - 2.0) * r.powf(p - 4.0) * proj * mass;
            }
        }
        for jump in ito_path.jumps_in_step(k) {
            let pre = &jump.pre_value;
            let post = pre + &jump.delta;
            let l = lin(pre, &jump.delta);
            out.jump += pow_norm(&post, p) - pow_norm(pre, p) - l;
            match jump.source {
                JumpSource::Noise { .. } => out.stochastic += l,
                JumpSource::Driver => out.drift += l,
            }
        }
    }
    Ok(out)
}
