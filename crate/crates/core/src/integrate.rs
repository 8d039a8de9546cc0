//! Stochastic integrals of operator-valued integrands against a sampled noise
//! path, and the Itô processes built from them.
//!
//! Integrands only ever see a [`StepState`]: the process value at the left grid
//! point and a [`PathPrefix`] that refuses to reveal anything past it. That is
//! the whole predictability story; there is no other way to reach the path.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::ensemble::Execution;
use crate::error::{Error, Result};
use crate::hilbert::{HilbertVec, LinearOp};
use crate::noise::{CellSet, Flavor, JumpEvent, NoiseModel, SamplePath, TimeGrid};
use crate::rng::SeedSequence;
use crate::stats::{z_score, Estimate};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// The part of a sample path observable at grid time `t_upto`.
#[derive(Clone, Copy)]
pub struct PathPrefix<'a> {
    path: &'a SamplePath,
    upto: usize,
}

impl<'a> PathPrefix<'a> {
    pub fn new(path: &'a SamplePath, upto: usize) -> Self {
        PathPrefix {
            path,
            upto: upto.min(path.n_steps()),
        }
    }

    /// Index of the current grid point.
    pub fn upto(&self) -> usize {
        self.upto
    }

    pub fn time(&self) -> f64 {
        self.path.grid().time(self.upto)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.path.grid()
    }

    pub fn n_cells(&self) -> usize {
        self.path.n_cells()
    }

    pub fn dim_h(&self) -> usize {
        self.path.dim_h()
    }

    /// An earlier prefix; never a later one.
    pub fn truncate(&self, upto: usize) -> PathPrefix<'a> {
        PathPrefix::new(self.path, upto.min(self.upto))
    }

    pub fn gauss_increment(&self, k: usize, j: usize) -> Option<&'a HilbertVec> {
        (k < self.upto).then(|| self.path.gauss_increment(k, j))
    }

    /// Jump events up to and including `t_upto`.
    pub fn jumps(&self) -> impl Iterator<Item = &'a JumpEvent> + 'a {
        let upto = self.upto;
        self.path.jumps().iter().take_while(move |e| e.step < upto)
    }

    /// `M((t_{k0}, t_{k1}], A)(h)` for `k1 <= upto`.
    pub fn evaluate(&self, k0: usize, k1: usize, cells: &CellSet, h: &HilbertVec) -> Result<f64> {
        if k1 > self.upto {
            return Err(Error::InvalidArgument(format!(
                "window ends at step {k1}, beyond the observable prefix {}",
                self.upto
            )));
        }
        self.path.evaluate_steps(k0, k1, cells, h, Flavor::Total)
    }
}

/// Everything an integrand may use at step `k`: the left-point value of the
/// process being built and the path history up to `t_k`.
#[derive(Clone, Copy)]
pub struct StepState<'a> {
    pub step: usize,
    pub time: f64,
    pub value: &'a HilbertVec,
    pub history: PathPrefix<'a>,
}

pub type DeterministicFn = dyn Fn(usize, usize) -> LinearOp + Send + Sync;
pub type AdaptedFn = dyn Fn(usize, &StepState) -> LinearOp + Send + Sync;
pub type EventFn = dyn Fn(&PathPrefix) -> bool + Send + Sync;

/// `1_{F} 1_{(t_start, t_end]} 1_{A_cell} S`, with `F` decided at `t_start`.
#[derive(Clone)]
pub struct SimpleBlock {
    pub start: usize,
    pub end: usize,
    pub cell: usize,
    pub op: LinearOp,
    pub event: Option<Arc<EventFn>>,
}

impl SimpleBlock {
    pub fn new(start: usize, end: usize, cell: usize, op: LinearOp) -> Self {
        SimpleBlock {
            start,
            end,
            cell,
            op,
            event: None,
        }
    }

    pub fn with_event(mut self, event: impl Fn(&PathPrefix) -> bool + Send + Sync + 'static) -> Self {
        self.event = Some(Arc::new(event));
        self
    }

    fn fires(&self, history: &PathPrefix) -> bool {
        match &self.event {
            None => true,
            Some(f) => f(&history.truncate(self.start)),
        }
    }
}

#[derive(Clone)]
enum Kind {
    Deterministic(Arc<DeterministicFn>),
    Adapted(Arc<AdaptedFn>),
    Simple(Arc<Vec<SimpleBlock>>),
}

/// A predictable `HS(H, G)`-valued integrand `Φ(k, j, state)`.
#[derive(Clone)]
pub struct Integrand {
    id: u64,
    dim_out: usize,
    dim_in: usize,
    kind: Kind,
    stop: Option<usize>,
}

impl std::fmt::Debug for Integrand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            Kind::Deterministic(_) => "deterministic",
            Kind::Adapted(_) => "adapted",
            Kind::Simple(_) => "simple",
        };
        f.debug_struct("Integrand")
            .field("id", &self.id)
            .field("dim_out", &self.dim_out)
            .field("dim_in", &self.dim_in)
            .field("kind", &kind)
            .field("stop", &self.stop)
            .finish()
    }
}

impl Integrand {
    fn with_kind(dim_out: usize, dim_in: usize, kind: Kind) -> Self {
        Integrand {
            id: fresh_id(),
            dim_out,
            dim_in,
            kind,
            stop: None,
        }
    }

    /// `Φ(k, j)` independent of ω.
    pub fn deterministic(
        dim_out: usize,
        dim_in: usize,
        f: impl Fn(usize, usize) -> LinearOp + Send + Sync + 'static,
    ) -> Self {
        Self::with_kind(dim_out, dim_in, Kind::Deterministic(Arc::new(f)))
    }

    /// `Φ(j, state)` evaluated from the left-point state.
    pub fn adapted(
        dim_out: usize,
        dim_in: usize,
        f: impl Fn(usize, &StepState) -> LinearOp + Send + Sync + 'static,
    ) -> Self {
        Self::with_kind(dim_out, dim_in, Kind::Adapted(Arc::new(f)))
    }

    pub fn constant(op: LinearOp) -> Self {
        let (o, i) = (op.dim_out(), op.dim_in());
        Self::deterministic(o, i, move |_, _| op.clone())
    }

    pub fn zero(dim_out: usize, dim_in: usize) -> Self {
        Self::constant(LinearOp::zeros(dim_out, dim_in))
    }

    pub fn simple(dim_out: usize, dim_in: usize, blocks: Vec<SimpleBlock>) -> Result<Self> {
        for b in &blocks {
            if b.op.dim_out() != dim_out || b.op.dim_in() != dim_in {
                return Err(Error::DimensionMismatch {
                    context: "simple block operator",
                    expected: dim_out * dim_in,
                    actual: b.op.dim_out() * b.op.dim_in(),
                });
            }
            if b.start >= b.end {
                return Err(Error::InvalidArgument(format!(
                    "simple block window ({}, {}] is empty",
                    b.start, b.end
                )));
            }
        }
        Ok(Self::with_kind(dim_out, dim_in, Kind::Simple(Arc::new(blocks))))
    }

    /// Identifies the integrand for provenance checks; clones share it.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn is_simple(&self) -> bool {
        matches!(self.kind, Kind::Simple(_))
    }

    pub fn is_deterministic(&self) -> bool {
        match &self.kind {
            Kind::Deterministic(_) => true,
            Kind::Adapted(_) => false,
            Kind::Simple(blocks) => blocks.iter().all(|b| b.event.is_none()),
        }
    }

    /// Last step (exclusive) at which the integrand can be nonzero.
    pub fn stop(&self) -> Option<usize> {
        self.stop
    }

    /// `Φ · 1_{[0, t_stop]}`.
    pub fn stopped_at(&self, stop: usize) -> Integrand {
        Integrand {
            id: fresh_id(),
            stop: Some(self.stop.map_or(stop, |s| s.min(stop))),
            ..self.clone()
        }
    }

    pub fn eval(&self, cell: usize, state: &StepState) -> LinearOp {
        if self.stop.is_some_and(|s| state.step >= s) {
            return LinearOp::zeros(self.dim_out, self.dim_in);
        }
        match &self.kind {
            Kind::Deterministic(f) => f(state.step, cell),
            Kind::Adapted(f) => f(cell, state),
            Kind::Simple(blocks) => {
                let mut acc = LinearOp::zeros(self.dim_out, self.dim_in);
                for b in blocks.iter() {
                    if b.cell == cell && b.start <= state.step && state.step < b.end && b.fires(&state.history) {
                        acc += &b.op;
                    }
                }
                acc
            }
        }
    }

    /// `Φ(k, j)` when the integrand does not depend on ω.
    pub fn eval_deterministic(&self, step: usize, cell: usize) -> Option<LinearOp> {
        if !self.is_deterministic() {
            return None;
        }
        if self.stop.is_some_and(|s| step >= s) {
            return Some(LinearOp::zeros(self.dim_out, self.dim_in));
        }
        Some(match &self.kind {
            Kind::Deterministic(f) => f(step, cell),
            Kind::Simple(blocks) => {
                let mut acc = LinearOp::zeros(self.dim_out, self.dim_in);
                for b in blocks.iter().filter(|b| b.cell == cell && b.start <= step && step < b.end) {
                    acc += &b.op;
                }
                acc
            }
            Kind::Adapted(_) => unreachable!(),
        })
    }

    /// `a Φ₁ + Φ₂`.
    pub fn linear_combination(a: f64, phi1: &Integrand, phi2: &Integrand) -> Result<Integrand> {
        if (phi1.dim_out, phi1.dim_in) != (phi2.dim_out, phi2.dim_in) {
            return Err(Error::DimensionMismatch {
                context: "linear combination of integrands",
                expected: phi1.dim_out * phi1.dim_in,
                actual: phi2.dim_out * phi2.dim_in,
            });
        }
        let (p1, p2) = (phi1.clone(), phi2.clone());
        if phi1.is_deterministic() && phi2.is_deterministic() {
            return Ok(Integrand::deterministic(phi1.dim_out, phi1.dim_in, move |k, j| {
                let mut op = p1.eval_deterministic(k, j).unwrap().scaled(a);
                op += &p2.eval_deterministic(k, j).unwrap();
                op
            }));
        }
        Ok(Integrand::adapted(phi1.dim_out, phi1.dim_in, move |j, s| {
            let mut op = p1.eval(j, s).scaled(a);
            op += &p2.eval(j, s);
            op
        }))
    }
}

/// Predictable `L(G, K)`-valued process `Ψ(k)`, driven by path history only.
#[derive(Clone)]
pub struct OperatorProcess {
    dim_out: usize,
    dim_in: usize,
    kind: PsiKind,
}

#[derive(Clone)]
enum PsiKind {
    Deterministic(Arc<dyn Fn(usize) -> LinearOp + Send + Sync>),
    Adapted(Arc<dyn Fn(usize, &PathPrefix) -> LinearOp + Send + Sync>),
}

impl OperatorProcess {
    pub fn deterministic(
        dim_out: usize,
        dim_in: usize,
        f: impl Fn(usize) -> LinearOp + Send + Sync + 'static,
    ) -> Self {
        OperatorProcess {
            dim_out,
            dim_in,
            kind: PsiKind::Deterministic(Arc::new(f)),
        }
    }

    pub fn adapted(
        dim_out: usize,
        dim_in: usize,
        f: impl Fn(usize, &PathPrefix) -> LinearOp + Send + Sync + 'static,
    ) -> Self {
        OperatorProcess {
            dim_out,
            dim_in,
            kind: PsiKind::Adapted(Arc::new(f)),
        }
    }

    pub fn constant(op: LinearOp) -> Self {
        let (o, i) = (op.dim_out(), op.dim_in());
        Self::deterministic(o, i, move |_| op.clone())
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn eval(&self, step: usize, history: &PathPrefix) -> LinearOp {
        match &self.kind {
            PsiKind::Deterministic(f) => f(step),
            PsiKind::Adapted(f) => f(step, history),
        }
    }
}

/// `Ψ ∘ Φ`, evaluated pointwise on `(k, j, state)`.
pub fn compose_integrands(psi: &OperatorProcess, phi: &Integrand) -> Result<Integrand> {
    if psi.dim_in != phi.dim_out {
        return Err(Error::DimensionMismatch {
            context: "compose_integrands",
            expected: phi.dim_out,
            actual: psi.dim_in,
        });
    }
    let (psi, phi_c) = (psi.clone(), phi.clone());
    match (&psi.kind, phi.is_deterministic()) {
        (PsiKind::Deterministic(f), true) => {
            let f = f.clone();
            Ok(Integrand::deterministic(psi.dim_out, phi.dim_in, move |k, j| {
                f(k).compose(&phi_c.eval_deterministic(k, j).unwrap())
                    .expect("dimensions checked at composition")
            }))
        }
        _ => Ok(Integrand::adapted(psi.dim_out, phi.dim_in, move |j, s| {
            psi.eval(s.step, &s.history)
                .compose(&phi_c.eval(j, s))
                .expect("dimensions checked at composition")
        })),
    }
}

/// Drift coefficient `ψ` of an Itô process.
#[derive(Clone)]
pub enum Drift {
    Zero,
    Constant(HilbertVec),
    Adapted(Arc<dyn Fn(&StepState) -> HilbertVec + Send + Sync>),
}

impl Drift {
    fn eval(&self, dim_g: usize, state: &StepState) -> HilbertVec {
        match self {
            Drift::Zero => HilbertVec::zeros(dim_g),
            Drift::Constant(v) => v.clone(),
            Drift::Adapted(f) => f(state),
        }
    }
}

/// Real finite-variation driver `A` on the grid: a continuous increment over
/// each step plus an optional jump at the right end point `t_{k+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FvDriver {
    continuous: Vec<f64>,
    jumps: Vec<f64>,
}

impl FvDriver {
    pub fn zero(n_steps: usize) -> Self {
        FvDriver {
            continuous: vec![0.0; n_steps],
            jumps: vec![0.0; n_steps],
        }
    }

    /// `A(t) = t`.
    pub fn time(grid: &TimeGrid) -> Self {
        FvDriver {
            continuous: (0..grid.n_steps())
                .map(|k| grid.time(k + 1) - grid.time(k))
                .collect(),
            jumps: vec![0.0; grid.n_steps()],
        }
    }

    pub fn new(continuous: Vec<f64>, jumps: Vec<f64>) -> Result<Self> {
        if continuous.len() != jumps.len() {
            return Err(Error::DimensionMismatch {
                context: "driver increments",
                expected: continuous.len(),
                actual: jumps.len(),
            });
        }
        if continuous.iter().chain(&jumps).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("driver increments must be finite".into()));
        }
        Ok(FvDriver { continuous, jumps })
    }

    /// Add a jump of size `size` at `t_{k+1}`.
    pub fn with_jump(mut self, k: usize, size: f64) -> Self {
        self.jumps[k] += size;
        self
    }

    pub fn n_steps(&self) -> usize {
        self.continuous.len()
    }

    pub fn continuous_increment(&self, k: usize) -> f64 {
        self.continuous[k]
    }

    pub fn jump(&self, k: usize) -> f64 {
        self.jumps[k]
    }

    pub fn total_variation(&self) -> f64 {
        self.continuous
            .iter()
            .chain(&self.jumps)
            .map(|v| v.abs())
            .sum()
    }
}

/// `X_t = ξ + ∫ψ dA + ∫∫Φ dM`.
#[derive(Clone)]
pub struct ItoProcessSpec {
    pub xi: HilbertVec,
    pub psi: Drift,
    pub driver: FvDriver,
    pub phi: Integrand,
}

impl ItoProcessSpec {
    /// `X = ∫∫Φ dM` started at 0.
    pub fn integral(phi: Integrand, n_steps: usize) -> Self {
        ItoProcessSpec {
            xi: HilbertVec::zeros(phi.dim_out()),
            psi: Drift::Zero,
            driver: FvDriver::zero(n_steps),
            phi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpSource {
    Noise { cell: usize },
    Driver,
}

/// A recorded discontinuity of an [`ItoPath`].
#[derive(Clone, Debug, PartialEq)]
pub struct ItoJump {
    pub step: usize,
    pub time: f64,
    pub source: JumpSource,
    pub delta: HilbertVec,
    /// `X_{s-}`, including the step's continuous displacement and earlier jumps.
    pub pre_value: HilbertVec,
}

/// Discrete trajectory of an Itô process.
///
/// Within step `k` the continuous displacement comes first, then the noise
/// jumps in time order, then any driver jump at `t_{k+1}`. All integrands are
/// frozen at `t_k`.
#[derive(Clone, Debug)]
pub struct ItoPath {
    integrand_id: u64,
    seed: u64,
    grid: TimeGrid,
    n_cells: usize,
    values: Vec<HilbertVec>,
    stoch_cont: Vec<HilbertVec>,
    drift_cont: Vec<HilbertVec>,
    jumps: Vec<ItoJump>,
    step_ranges: Vec<(usize, usize)>,
    operators: Vec<LinearOp>,
    drift_coeffs: Vec<HilbertVec>,
}

impl ItoPath {
    pub fn integrand_id(&self) -> u64 {
        self.integrand_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Number of steps actually simulated.
    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dim(&self) -> usize {
        self.values[0].dim()
    }

    pub fn values(&self) -> &[HilbertVec] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &HilbertVec {
        &self.values[k]
    }

    pub fn jumps(&self) -> &[ItoJump] {
        &self.jumps
    }

    pub fn jumps_in_step(&self, k: usize) -> &[ItoJump] {
        let (a, b) = self.step_ranges[k];
        &self.jumps[a..b]
    }

    /// `Σ_j Φ(k, j) ΔM^c(k, j)`.
    pub fn stochastic_continuous_increment(&self, k: usize) -> &HilbertVec {
        &self.stoch_cont[k]
    }

    /// `ψ(k) ΔA^c_k`.
    pub fn drift_continuous_increment(&self, k: usize) -> &HilbertVec {
        &self.drift_cont[k]
    }

    pub fn continuous_increment(&self, k: usize) -> HilbertVec {
        &self.stoch_cont[k] + &self.drift_cont[k]
    }

    /// `Φ(k, j)` as evaluated along this path.
    pub fn operator(&self, k: usize, j: usize) -> &LinearOp {
        &self.operators[k * self.n_cells + j]
    }

    pub fn drift_coefficient(&self, k: usize) -> &HilbertVec {
        &self.drift_coeffs[k]
    }

    /// Cumulative `∫∫Φ dM` at each grid point, without the drift or `ξ`.
    pub fn stochastic_part(&self) -> Vec<HilbertVec> {
        let mut acc = HilbertVec::zeros(self.dim());
        let mut out = Vec::with_capacity(self.values.len());
        out.push(acc.clone());
        for k in 0..self.n_steps() {
            acc += &self.stoch_cont[k];
            for j in self.jumps_in_step(k) {
                if matches!(j.source, JumpSource::Noise { .. }) {
                    acc += &j.delta;
                }
            }
            out.push(acc.clone());
        }
        out
    }

    /// `Σ_{s<=t_k} ‖ΔX_s‖²` over recorded jumps in the first `k` steps.
    pub fn jump_square_sum(&self, k: usize) -> f64 {
        (0..k)
            .flat_map(|s| self.jumps_in_step(s))
            .map(|j| j.delta.norm_sq())
            .sum()
    }

    /// Per-path `Σ_{k<upto,j} ‖Φ Q^{1/2}‖²_HS mass[k][j]` for one flavor.
    pub fn lambda2_mass(&self, model: &NoiseModel, flavor: Flavor, upto: usize) -> f64 {
        let dt = self.grid.dt();
        (0..upto.min(self.n_steps()))
            .map(|k| {
                (0..self.n_cells)
                    .map(|j| weighted_hs_sq(self.operator(k, j), model, j, flavor) * dt)
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn check_provenance(&self, phi: &Integrand) -> Result<()> {
        if self.integrand_id != phi.id() {
            return Err(Error::Provenance(format!(
                "path was generated by integrand #{}, not #{}",
                self.integrand_id,
                phi.id()
            )));
        }
        Ok(())
    }
}

/// `‖Φ Q^{1/2}‖²_HS · rate` for cell `j`.
pub(crate) fn weighted_hs_sq(op: &LinearOp, model: &NoiseModel, j: usize, flavor: Flavor) -> f64 {
    let rate = model.rate(j, flavor);
    if rate == 0.0 {
        return 0.0;
    }
    op.compose(model.covariance_sqrt(j, flavor))
        .expect("integrand domain matches noise dimension")
        .hs_norm_sq()
        * rate
}

fn check_dims(phi: &Integrand, path: &SamplePath) -> Result<()> {
    if phi.dim_in() != path.dim_h() {
        return Err(Error::DimensionMismatch {
            context: "integrand domain vs noise dimension",
            expected: path.dim_h(),
            actual: phi.dim_in(),
        });
    }
    Ok(())
}

fn walk(spec: &ItoProcessSpec, path: &SamplePath, n_walk: usize) -> Result<ItoPath> {
    let phi = &spec.phi;
    check_dims(phi, path)?;
    let dim_g = phi.dim_out();
    if spec.xi.dim() != dim_g {
        return Err(Error::DimensionMismatch {
            context: "initial value",
            expected: dim_g,
            actual: spec.xi.dim(),
        });
    }
    if spec.driver.n_steps() < n_walk {
        return Err(Error::DimensionMismatch {
            context: "driver length",
            expected: n_walk,
            actual: spec.driver.n_steps(),
        });
    }
    let grid = *path.grid();
    let m = path.n_cells();
    let mut x = spec.xi.clone();
    let mut values = Vec::with_capacity(n_walk + 1);
    values.push(x.clone());
    let mut stoch_cont = Vec::with_capacity(n_walk);
    let mut drift_cont = Vec::with_capacity(n_walk);
    let mut jumps = Vec::new();
    let mut step_ranges = Vec::with_capacity(n_walk);
    let mut operators = Vec::with_capacity(n_walk * m);
    let mut drift_coeffs = Vec::with_capacity(n_walk);
    for k in 0..n_walk {
        let state = StepState {
            step: k,
            time: grid.time(k),
            value: &x,
            history: PathPrefix::new(path, k),
        };
        let start = operators.len();
        for j in 0..m {
            let op = phi.eval(j, &state);
            if op.dim_out() != dim_g || op.dim_in() != path.dim_h() {
                return Err(Error::DimensionMismatch {
                    context: "integrand value",
                    expected: dim_g * path.dim_h(),
                    actual: op.dim_out() * op.dim_in(),
                });
            }
            operators.push(op);
        }
        let ops = &operators[start..];
        let psi = spec.psi.eval(dim_g, &state);
        if psi.dim() != dim_g {
            return Err(Error::DimensionMismatch {
                context: "drift coefficient",
                expected: dim_g,
                actual: psi.dim(),
            });
        }
        let dc = psi.scaled(spec.driver.continuous_increment(k));
        let mut sc = HilbertVec::zeros(dim_g);
        for (j, op) in ops.iter().enumerate() {
            sc += &op.apply(path.gauss_increment(k, j));
        }
        let mut y = &x + &dc;
        y += &sc;
        let jump_start = jumps.len();
        for e in path.jumps_in_step(k) {
            let delta = ops[e.cell].apply(&e.amplitude);
            let pre = y.clone();
            y += &delta;
            jumps.push(ItoJump {
                step: k,
                time: e.time,
                source: JumpSource::Noise { cell: e.cell },
                delta,
                pre_value: pre,
            });
        }
        let a_jump = spec.driver.jump(k);
        if a_jump != 0.0 {
            let delta = psi.scaled(a_jump);
            let pre = y.clone();
            y += &delta;
            jumps.push(ItoJump {
                step: k,
                time: grid.time(k + 1),
                source: JumpSource::Driver,
                delta,
                pre_value: pre,
            });
        }
        step_ranges.push((jump_start, jumps.len()));
        stoch_cont.push(sc);
        drift_cont.push(dc);
        drift_coeffs.push(psi);
        x = y;
        values.push(x.clone());
    }
    Ok(ItoPath {
        integrand_id: phi.id(),
        seed: path.seed(),
        grid,
        n_cells: m,
        values,
        stoch_cont,
        drift_cont,
        jumps,
        step_ranges,
        operators,
        drift_coeffs,
    })
}

pub fn simulate_ito_process(spec: &ItoProcessSpec, path: &SamplePath) -> Result<ItoPath> {
    walk(spec, path, path.n_steps())
}

/// `∫_0^t ∫_U Φ dM` as an [`ItoPath`] walked up to step `upto`.
pub fn integral_path(phi: &Integrand, path: &SamplePath, upto: usize) -> Result<ItoPath> {
    walk(&ItoProcessSpec::integral(phi.clone(), path.n_steps()), path, upto)
}

/// `I_t(Φ)` by the left-point sum over steps and cells.
pub fn integrate(phi: &Integrand, path: &SamplePath, t: f64) -> Result<HilbertVec> {
    let k = path.grid().step_of(t)?;
    Ok(integral_path(phi, path, k)?.value(k).clone())
}

/// `I_t(Φ)` for a simple integrand, from window evaluations of the noise.
pub fn integrate_simple(phi: &Integrand, path: &SamplePath, t: f64) -> Result<HilbertVec> {
    let Kind::Simple(blocks) = &phi.kind else {
        return Err(Error::InvalidArgument("integrate_simple needs a simple integrand".into()));
    };
    check_dims(phi, path)?;
    let kt = path.grid().step_of(t)?;
    let kt = phi.stop.map_or(kt, |s| kt.min(s));
    let mut acc = HilbertVec::zeros(phi.dim_out());
    for b in blocks.iter() {
        if b.start >= kt || !b.fires(&PathPrefix::new(path, b.start)) {
            continue;
        }
        let mut window = HilbertVec::zeros(path.dim_h());
        for k in b.start..b.end.min(kt) {
            window += &path.increment(k, b.cell, Flavor::Total);
        }
        acc += &b.op.apply(&window);
    }
    Ok(acc)
}

/// `(∫Φ dM^c, ∫Φ dM^d)` up to `t`.
pub fn decompose_integral(
    phi: &Integrand,
    path: &SamplePath,
    t: f64,
) -> Result<(HilbertVec, HilbertVec)> {
    let k = path.grid().step_of(t)?;
    let ip = integral_path(phi, path, k)?;
    let mut ic = HilbertVec::zeros(phi.dim_out());
    let mut id = HilbertVec::zeros(phi.dim_out());
    for s in 0..k {
        ic += ip.stochastic_continuous_increment(s);
        for j in ip.jumps_in_step(s) {
            id += &j.delta;
        }
    }
    Ok((ic, id))
}

/// Exact `‖Φ‖²_{Λ²}` over `[0, t]` for deterministic `Φ`.
pub fn lambda2_norm_sq_deterministic(
    phi: &Integrand,
    model: &NoiseModel,
    grid: &TimeGrid,
    t: f64,
    flavor: Flavor,
) -> Result<f64> {
    if !phi.is_deterministic() {
        return Err(Error::NotDeterministic);
    }
    if phi.dim_in() != model.dim_h() {
        return Err(Error::DimensionMismatch {
            context: "integrand domain vs noise dimension",
            expected: model.dim_h(),
            actual: phi.dim_in(),
        });
    }
    let kt = grid.step_of(t)?;
    let dt = grid.dt();
    let mut acc = 0.0;
    for k in 0..kt {
        for j in 0..model.n_cells() {
            let op = phi.eval_deterministic(k, j).expect("deterministic");
            acc += weighted_hs_sq(&op, model, j, flavor) * dt;
        }
    }
    Ok(acc)
}

/// `‖Φ‖²_{Λ²(M, t)}`: exact for deterministic `Φ`, otherwise the average of the
/// per-path masses over `paths`.
pub fn lambda2_norm_sq(
    phi: &Integrand,
    model: &NoiseModel,
    paths: &[SamplePath],
    t: f64,
    flavor: Flavor,
) -> Result<Estimate> {
    let grid = match paths.first() {
        Some(p) => *p.grid(),
        None if phi.is_deterministic() => {
            return Err(Error::InvalidArgument("need at least one path to fix the grid".into()))
        }
        None => return Err(Error::InvalidArgument("empty path ensemble".into())),
    };
    if phi.is_deterministic() {
        return Ok(Estimate::exact(lambda2_norm_sq_deterministic(
            phi, model, &grid, t, flavor,
        )?));
    }
    let kt = grid.step_of(t)?;
    let masses = paths
        .iter()
        .map(|p| Ok(integral_path(phi, p, kt)?.lambda2_mass(model, flavor, kt)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&masses))
}

/// `‖Φ‖_{Λ²(M, t)}`.
pub fn lambda2_norm(
    phi: &Integrand,
    model: &NoiseModel,
    paths: &[SamplePath],
    t: f64,
) -> Result<f64> {
    Ok(lambda2_norm_sq(phi, model, paths, t, Flavor::Total)?.mean.sqrt())
}

/// Stop `Φ` at the first grid time its running `Λ²` mass on this path reaches
/// `bound`. Returns the stopped integrand and the stopping step.
pub fn localize(
    phi: &Integrand,
    model: &NoiseModel,
    path: &SamplePath,
    bound: f64,
) -> Result<(Integrand, usize)> {
    if !(bound >= 0.0) {
        return Err(Error::InvalidArgument(format!("localization bound must be >= 0, got {bound}")));
    }
    let n = path.n_steps();
    let ip = integral_path(phi, path, n)?;
    let dt = path.grid().dt();
    let mut running = 0.0;
    let mut stop = n;
    for k in 0..=n {
        if running >= bound {
            stop = k;
            break;
        }
        if k < n {
            running += (0..path.n_cells())
                .map(|j| weighted_hs_sq(ip.operator(k, j), model, j, Flavor::Total) * dt)
                .sum::<f64>();
        }
    }
    Ok((phi.stopped_at(stop), stop))
}

/// `Σ_k Ψ(k)(Y_{k+1} - Y_k)` against the values of an Itô path.
pub fn integrate_against(
    psi: &OperatorProcess,
    ito_path: &ItoPath,
    path: &SamplePath,
    t: f64,
) -> Result<HilbertVec> {
    if psi.dim_in() != ito_path.dim() {
        return Err(Error::DimensionMismatch {
            context: "integrate_against",
            expected: ito_path.dim(),
            actual: psi.dim_in(),
        });
    }
    let kt = path.grid().step_of(t)?;
    if kt > ito_path.n_steps() {
        return Err(Error::InvalidArgument("Itô path is shorter than t".into()));
    }
    let mut acc = HilbertVec::zeros(psi.dim_out());
    for k in 0..kt {
        let dy = ito_path.value(k + 1) - ito_path.value(k);
        acc += &psi.eval(k, &PathPrefix::new(path, k)).apply(&dy);
    }
    Ok(acc)
}

/// Partition of the sample space into events observable at the conditioning time.
#[derive(Clone)]
pub struct Conditioning {
    pub labels: Vec<String>,
    pub classify: Arc<dyn Fn(&PathPrefix) -> usize + Send + Sync>,
}

impl Conditioning {
    pub fn trivial() -> Self {
        Conditioning {
            labels: vec!["Ω".into()],
            classify: Arc::new(|_| 0),
        }
    }

    /// Sign of `M((0, t_1], U)(h)`.
    pub fn first_increment_sign(h: HilbertVec) -> Self {
        Conditioning {
            labels: vec!["first increment >= 0".into(), "first increment < 0".into()],
            classify: Arc::new(move |p: &PathPrefix| {
                let v = p
                    .evaluate(0, 1, &CellSet::all(p.n_cells()), &h)
                    .expect("conditioning needs the first step");
                usize::from(v < 0.0)
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EventReport {
    pub label: String,
    pub count: usize,
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// z-score of the paired difference `lhs - rhs`.
    pub z: f64,
    /// Too few paths for a stderr; reported, not failed.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ConditionalIsometryReport {
    pub s: f64,
    pub t: f64,
    pub events: Vec<EventReport>,
}

impl ConditionalIsometryReport {
    pub fn max_abs_z(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| !e.flagged)
            .map(|e| e.z.abs())
            .fold(0.0, f64::max)
    }
}

/// Conditional Itô isometry on `(s, t]` given an `F_s`-measurable partition:
/// compares `|<I_t - I_s, g>|²` with `∫_s^t ‖Q_M^{1/2} Φ* g‖² d⟨⟨M⟩⟩` event by event.
#[allow(clippy::too_many_arguments)]
pub fn conditional_isometry_check(
    phi: &Integrand,
    model: &NoiseModel,
    grid: &TimeGrid,
    s: f64,
    t: f64,
    g: &HilbertVec,
    conditioning: &Conditioning,
    n_paths: usize,
    seeds: SeedSequence,
    exec: Execution,
) -> Result<ConditionalIsometryReport> {
    let ks = grid.step_of(s)?;
    let kt = grid.step_of(t)?;
    if ks >= kt {
        return Err(Error::InvalidArgument(format!("need s < t, got s={s}, t={t}")));
    }
    if g.dim() != phi.dim_out() {
        return Err(Error::DimensionMismatch {
            context: "conditional isometry direction",
            expected: phi.dim_out(),
            actual: g.dim(),
        });
    }
    let dt = grid.dt();
    let samples = exec.map(n_paths, |i| -> Result<(usize, f64, f64)> {
        let path = model.sample_path(grid, seeds.path_seed(i as u64));
        let ip = integral_path(phi, &path, kt)?;
        let event = (conditioning.classify)(&PathPrefix::new(&path, ks));
        let lhs = (ip.value(kt) - ip.value(ks)).dot(g).powi(2);
        let mut rhs = 0.0;
        for k in ks..kt {
            for j in 0..model.n_cells() {
                let rate = model.rate(j, Flavor::Total);
                if rate == 0.0 {
                    continue;
                }
                let phig = ip.operator(k, j).adjoint().apply(g);
                rhs += model.covariance(j, Flavor::Total).apply(&phig).dot(&phig) * rate * dt;
            }
        }
        Ok((event, lhs, rhs))
    });
    let mut per_event: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); conditioning.labels.len()];
    for sample in samples {
        let (e, l, r) = sample?;
        let slot = per_event.get_mut(e).ok_or_else(|| {
            Error::InvalidArgument(format!("conditioning returned unknown event {e}"))
        })?;
        slot.0.push(l);
        slot.1.push(r);
    }
    let events = conditioning
        .labels
        .iter()
        .zip(per_event)
        .map(|(label, (l, r))| {
            let diff: Vec<f64> = l.iter().zip(&r).map(|(a, b)| a - b).collect();
            let d = Estimate::from_samples(&diff);
            let flagged = l.len() < 2;
            EventReport {
                label: label.clone(),
                count: l.len(),
                lhs: Estimate::from_samples(&l),
                rhs: Estimate::from_samples(&r),
                z: if flagged { 0.0 } else { z_score(d.mean, d.stderr) },
                flagged,
            }
        })
        .collect();
    Ok(ConditionalIsometryReport { s, t, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::tests::{gaussian_cell, mixed_spec};
    use crate::noise::NoiseSpec;

    fn setup() -> (NoiseModel, TimeGrid, SamplePath) {
        let model = NoiseModel::new(&mixed_spec()).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let path = model.sample_path(&grid, 21);
        (model, grid, path)
    }

    fn close(a: &HilbertVec, b: &HilbertVec, tol: f64) -> bool {
        (a - b).norm() <= tol * (1.0 + a.norm().max(b.norm()))
    }

    #[test]
    fn zero_integrand_gives_zero() {
        let (_, _, path) = setup();
        let i = integrate(&Integrand::zero(3, 2), &path, 1.0).unwrap();
        assert!(i.is_zero());
    }

    #[test]
    fn identity_integrand_is_cumulative_sum() {
        let (_, grid, path) = setup();
        let i = integrate(&Integrand::constant(LinearOp::identity(2)), &path, 0.5).unwrap();
        let mut expect = HilbertVec::zeros(2);
        for k in 0..grid.step_of(0.5).unwrap() {
            for j in 0..2 {
                expect += &path.increment(k, j, Flavor::Total);
            }
        }
        assert!(close(&i, &expect, 1e-14));
        assert!(integrate(&Integrand::constant(LinearOp::identity(2)), &path, 0.3).is_err());
    }

    #[test]
    fn simple_single_block_is_window_increment() {
        let (_, grid, path) = setup();
        let phi = Integrand::simple(2, 2, vec![SimpleBlock::new(2, 6, 1, LinearOp::identity(2))]).unwrap();
        let got = integrate_simple(&phi, &path, 1.0).unwrap();
        let e1 = HilbertVec::basis(2, 0);
        let expect = path
            .evaluate(grid.time(2), grid.time(6), &CellSet::single(1), &e1)
            .unwrap();
        assert!((got.coords()[0] - expect).abs() < 1e-14);
        assert!(close(&got, &integrate(&phi, &path, 1.0).unwrap(), 1e-13));
    }

    #[test]
    fn simple_impossible_event_is_zero() {
        let (_, _, path) = setup();
        let phi = Integrand::simple(
            2,
            2,
            vec![SimpleBlock::new(1, 5, 0, LinearOp::identity(2)).with_event(|_| false)],
        )
        .unwrap();
        assert!(integrate_simple(&phi, &path, 1.0).unwrap().is_zero());
        assert!(integrate(&phi, &path, 1.0).unwrap().is_zero());
        assert!(!phi.is_deterministic());
    }

    #[test]
    fn simple_blocks_add() {
        let (_, _, path) = setup();
        let a = SimpleBlock::new(0, 3, 0, LinearOp::diag(&[1.0, 2.0]));
        let b = SimpleBlock::new(4, 8, 1, LinearOp::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]))
            .with_event(|p| p.evaluate(0, 1, &CellSet::all(2), &HilbertVec::basis(2, 0)).unwrap() > 0.0);
        let both = Integrand::simple(2, 2, vec![a.clone(), b.clone()]).unwrap();
        let ia = integrate_simple(&Integrand::simple(2, 2, vec![a]).unwrap(), &path, 1.0).unwrap();
        let ib = integrate_simple(&Integrand::simple(2, 2, vec![b]).unwrap(), &path, 1.0).unwrap();
        let iab = integrate_simple(&both, &path, 1.0).unwrap();
        assert!(close(&iab, &(&ia + &ib), 1e-14));
        assert!(close(&iab, &integrate(&both, &path, 1.0).unwrap(), 1e-13));
    }

    #[test]
    fn linearity_per_path() {
        let (_, _, path) = setup();
        let p1 = Integrand::adapted(2, 2, |j, s| {
            LinearOp::identity(2).scaled(1.0 + j as f64 + 0.1 * s.step as f64)
        });
        let p2 = Integrand::constant(LinearOp::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.4]));
        let combo = Integrand::linear_combination(2.5, &p1, &p2).unwrap();
        let lhs = integrate(&combo, &path, 1.0).unwrap();
        let rhs = &integrate(&p1, &path, 1.0).unwrap().scaled(2.5) + &integrate(&p2, &path, 1.0).unwrap();
        assert!(close(&lhs, &rhs, 1e-13));
    }

    #[test]
    fn decomposition_adds_up() {
        let (_, _, path) = setup();
        let phi = Integrand::adapted(2, 2, |_, s| LinearOp::identity(2).scaled(1.0 + s.value.norm()));
        let (ic, id) = decompose_integral(&phi, &path, 1.0).unwrap();
        let i = integrate(&phi, &path, 1.0).unwrap();
        assert!((&(&ic + &id) - &i).norm() < 1e-12);
    }

    #[test]
    fn decomposition_pure_models() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let gauss = NoiseModel::new(&NoiseSpec {
            dim_h: 2,
            cells: vec![gaussian_cell(LinearOp::identity(2), 1.0)],
        })
        .unwrap();
        let phi = Integrand::constant(LinearOp::identity(2));
        let (ic, id) = decompose_integral(&phi, &gauss.sample_path(&grid, 1), 1.0).unwrap();
        assert!(id.is_zero());
        assert!(!ic.is_zero());
        let mut spec = mixed_spec();
        spec.cells[0].continuous = None;
        let jump = NoiseModel::new(&spec).unwrap();
        let (ic, _) = decompose_integral(&phi, &jump.sample_path(&grid, 1), 1.0).unwrap();
        assert!(ic.is_zero());
    }

    #[test]
    fn lambda2_constant_identity() {
        // Q_M = I with unit rate: T·λ·dim(H).
        let model = NoiseModel::new(&NoiseSpec {
            dim_h: 3,
            cells: vec![gaussian_cell(LinearOp::identity(3), 1.5)],
        })
        .unwrap();
        let grid = TimeGrid::new(2.0, 16).unwrap();
        let paths = vec![model.sample_path(&grid, 0)];
        let phi = Integrand::constant(LinearOp::identity(3));
        let e = lambda2_norm_sq(&phi, &model, &paths, 2.0, Flavor::Total).unwrap();
        assert!((e.mean - 2.0 * 1.5 * 3.0).abs() < 1e-12);
        assert_eq!(e.stderr, 0.0);
        let zero = lambda2_norm(&Integrand::zero(2, 3), &model, &paths, 2.0).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn lambda2_additivity_over_flavors() {
        let (model, grid, path) = setup();
        let phi = Integrand::deterministic(2, 2, |k, j| {
            LinearOp::from_row_slice(2, 2, &[1.0 + k as f64 * 0.1, 0.2, -0.3 * j as f64, 0.7])
        });
        let paths = vec![path];
        let t = lambda2_norm_sq(&phi, &model, &paths, 1.0, Flavor::Total).unwrap().mean;
        let c = lambda2_norm_sq(&phi, &model, &paths, 1.0, Flavor::Continuous).unwrap().mean;
        let d = lambda2_norm_sq(&phi, &model, &paths, 1.0, Flavor::Discontinuous).unwrap().mean;
        assert!((t - c - d).abs() < 1e-12 * t);
        let _ = grid;
    }

    #[test]
    fn lambda2_adapted_estimator_variance_shrinks() {
        let (model, grid, _) = setup();
        let phi = Integrand::adapted(2, 2, |_, s| LinearOp::identity(2).scaled(1.0 + s.value.norm()));
        let paths: Vec<SamplePath> = (0..4000).map(|i| model.sample_path(&grid, i)).collect();
        let small = lambda2_norm_sq(&phi, &model, &paths[..1000], 1.0, Flavor::Total).unwrap();
        let large = lambda2_norm_sq(&phi, &model, &paths, 1.0, Flavor::Total).unwrap();
        let ratio = small.stderr / large.stderr;
        assert!((1.6..2.5).contains(&ratio), "stderr ratio {ratio}");
    }

    #[test]
    fn localize_examples() {
        let (model, _, path) = setup();
        let phi = Integrand::adapted(2, 2, |_, s| LinearOp::identity(2).scaled(1.0 + s.value.norm()));
        let (big, tau) = localize(&phi, &model, &path, 1e12).unwrap();
        assert_eq!(tau, 8);
        assert!(close(
            &integrate(&big, &path, 1.0).unwrap(),
            &integrate(&phi, &path, 1.0).unwrap(),
            0.0
        ));
        let (zero, tau0) = localize(&phi, &model, &path, 0.0).unwrap();
        assert_eq!(tau0, 0);
        assert!(integrate(&zero, &path, 1.0).unwrap().is_zero());
        let (l3, t3) = localize(&phi, &model, &path, 3.0).unwrap();
        let (l1, t1) = localize(&phi, &model, &path, 1.0).unwrap();
        let (l31, t31) = localize(&l3, &model, &path, 1.0).unwrap();
        assert!(t1 <= t3);
        assert_eq!(t31, t1);
        assert!(close(
            &integrate(&l31, &path, 1.0).unwrap(),
            &integrate(&l1, &path, 1.0).unwrap(),
            0.0
        ));
        assert!(localize(&phi, &model, &path, -1.0).is_err());
    }

    #[test]
    fn compose_examples() {
        let (_, grid, path) = setup();
        let phi = Integrand::deterministic(2, 2, |k, _| LinearOp::diag(&[1.0, k as f64]));
        let id = OperatorProcess::constant(LinearOp::identity(2));
        let composed = compose_integrands(&id, &phi).unwrap();
        assert!(close(
            &integrate(&composed, &path, 1.0).unwrap(),
            &integrate(&phi, &path, 1.0).unwrap(),
            1e-14
        ));
        let zero = OperatorProcess::constant(LinearOp::zeros(3, 2));
        assert!(integrate(&compose_integrands(&zero, &phi).unwrap(), &path, 1.0)
            .unwrap()
            .is_zero());
        let bad = OperatorProcess::constant(LinearOp::zeros(3, 4));
        assert!(compose_integrands(&bad, &phi).is_err());
        // Re-bracketing: ∫Ψ∘Φ dM = Σ Ψ(k) ΔY_k.
        let psi = OperatorProcess::adapted(3, 2, |k, p| {
            let sign = if p.upto() > 0
                && p.evaluate(0, 1, &CellSet::all(2), &HilbertVec::basis(2, 0)).unwrap() > 0.0
            {
                1.0
            } else {
                -1.0
            };
            LinearOp::from_fn(3, 2, |a, b| sign * (a as f64 - b as f64 + 0.1 * k as f64))
        });
        let composed = compose_integrands(&psi, &phi).unwrap();
        let y = integral_path(&phi, &path, grid.n_steps()).unwrap();
        let lhs = integrate(&composed, &path, 1.0).unwrap();
        let rhs = integrate_against(&psi, &y, &path, 1.0).unwrap();
        assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn ito_process_trivial_cases() {
        let (_, grid, path) = setup();
        let xi = HilbertVec::from_slice(&[1.0, -2.0]);
        let spec = ItoProcessSpec {
            xi: xi.clone(),
            psi: Drift::Zero,
            driver: FvDriver::time(&grid),
            phi: Integrand::zero(2, 2),
        };
        let x = simulate_ito_process(&spec, &path).unwrap();
        assert!(x.values().iter().all(|v| *v == xi));
        let drift = HilbertVec::from_slice(&[0.5, 1.0]);
        let spec = ItoProcessSpec {
            psi: Drift::Constant(drift.clone()),
            ..spec
        };
        let x = simulate_ito_process(&spec, &path).unwrap();
        for k in 0..=8 {
            let expect = &xi + &drift.scaled(grid.time(k));
            assert!(close(x.value(k), &expect, 1e-14));
        }
    }

    #[test]
    fn ito_process_jump_bookkeeping() {
        let (_, grid, path) = setup();
        let spec = ItoProcessSpec {
            xi: HilbertVec::from_slice(&[0.2, 0.1]),
            psi: Drift::Adapted(Arc::new(|s: &StepState| s.value.scaled(-0.5))),
            driver: FvDriver::time(&grid).with_jump(3, 0.7),
            phi: Integrand::adapted(2, 2, |j, s| {
                LinearOp::identity(2).scaled(1.0 + 0.5 * j as f64 + s.value.coords()[0].tanh())
            }),
        };
        let x = simulate_ito_process(&spec, &path).unwrap();
        let mut jump_total = HilbertVec::zeros(2);
        let mut cont_total = HilbertVec::zeros(2);
        for k in 0..8 {
            cont_total += &x.continuous_increment(k);
            let mut step_total = x.continuous_increment(k);
            for j in x.jumps_in_step(k) {
                assert!(close(&(&j.pre_value + &j.delta), &{
                    // next pre-value or end of step
                    let mut v = j.pre_value.clone();
                    v += &j.delta;
                    v
                }, 0.0));
                jump_total += &j.delta;
                step_total += &j.delta;
            }
            assert!(close(&step_total, &(x.value(k + 1) - x.value(k)), 1e-13));
        }
        let displacement = x.value(8) - x.value(0);
        assert!(close(&jump_total, &(&displacement - &cont_total), 1e-13));
        assert!(x.jumps().iter().any(|j| j.source == JumpSource::Driver && j.step == 3));
    }

    #[test]
    fn provenance_is_tracked() {
        let (_, _, path) = setup();
        let phi = Integrand::constant(LinearOp::identity(2));
        let other = Integrand::constant(LinearOp::identity(2));
        let x = integral_path(&phi, &path, 8).unwrap();
        assert!(x.check_provenance(&phi).is_ok());
        assert!(x.check_provenance(&phi.clone()).is_ok());
        assert!(matches!(x.check_provenance(&other), Err(Error::Provenance(_))));
    }

    #[test]
    fn prefix_hides_the_future() {
        let (_, _, path) = setup();
        let p = PathPrefix::new(&path, 3);
        assert!(p.gauss_increment(2, 0).is_some());
        assert!(p.gauss_increment(3, 0).is_none());
        assert!(p.evaluate(0, 4, &CellSet::all(2), &HilbertVec::basis(2, 0)).is_err());
        assert!(p.jumps().all(|e| e.step < 3));
        assert_eq!(p.truncate(5).upto(), 3);
    }

    #[test]
    fn conditional_isometry_trivial_cases() {
        let (model, grid, _) = setup();
        let phi = Integrand::constant(LinearOp::identity(2));
        let rep = conditional_isometry_check(
            &phi,
            &model,
            &grid,
            0.25,
            1.0,
            &HilbertVec::zeros(2),
            &Conditioning::first_increment_sign(HilbertVec::basis(2, 0)),
            200,
            SeedSequence::new(1),
            Execution::Sequential,
        )
        .unwrap();
        for e in &rep.events {
            assert_eq!(e.lhs.mean, 0.0);
            assert_eq!(e.rhs.mean, 0.0);
            assert_eq!(e.z, 0.0);
        }
        assert!(conditional_isometry_check(
            &phi,
            &model,
            &grid,
            0.5,
            0.5,
            &HilbertVec::basis(2, 0),
            &Conditioning::trivial(),
            10,
            SeedSequence::new(1),
            Execution::Sequential,
        )
        .is_err());
    }

    #[test]
    fn conditional_isometry_flags_empty_events() {
        let (model, grid, _) = setup();
        let never = Conditioning {
            labels: vec!["all".into(), "none".into()],
            classify: Arc::new(|_| 0),
        };
        let rep = conditional_isometry_check(
            &Integrand::constant(LinearOp::identity(2)),
            &model,
            &grid,
            0.25,
            1.0,
            &HilbertVec::basis(2, 1),
            &never,
            300,
            SeedSequence::new(4),
            Execution::Parallel,
        )
        .unwrap();
        assert!(rep.events[1].flagged);
        assert_eq!(rep.events[1].count, 0);
        assert!(!rep.events[0].flagged);
        assert!(rep.events[0].z.abs() < 4.0);
    }
}
