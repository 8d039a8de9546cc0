//! Named noise presets, integrands and processes for configs.

use std::f64::consts::PI;
use std::sync::Arc;

use cmvm_core::hilbert::{HilbertVec, LinearOp};
use cmvm_core::integrate::{
    Drift, FvDriver, Integrand, ItoProcessSpec, OperatorProcess, PathPrefix, SimpleBlock, StepState,
};
use cmvm_core::noise::{
    CellNoise, CellSet, GaussianPart, JumpAmplitude, JumpPart, NoiseModel, NoiseSpec, TimeGrid,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ExperimentConfig;
use crate::HarnessError;

pub const PRESETS: [&str; 3] = ["gaussian", "jump", "mixed"];
pub const INTEGRANDS: [&str; 5] = ["constant", "diagonal", "state-linear", "sign-adapted", "tanh-state"];

fn unknown(kind: &str, name: &str, valid: &[&str]) -> HarnessError {
    HarnessError::UnknownName {
        kind: kind.to_string(),
        name: name.to_string(),
        valid: valid.join(", "),
    }
}

fn gaussian_part(d: usize, j: usize) -> GaussianPart {
    let diag: Vec<f64> = (0..d).map(|i| 1.0 / (1 + (i + j) % d) as f64).collect();
    GaussianPart {
        covariance: LinearOp::diag(&diag),
        intensity: 1.0,
    }
}

fn jump_part(d: usize, j: usize) -> JumpPart {
    let amplitude = if j % 2 == 0 {
        let mut v = HilbertVec::basis(d, j % d);
        v.axpy(0.5, &HilbertVec::basis(d, (j + 1) % d));
        JumpAmplitude::TwoPoint {
            direction: v.scaled(1.0 / v.norm()),
        }
    } else {
        JumpAmplitude::Gaussian {
            covariance: LinearOp::diag(&(0..d).map(|i| 1.0 / (1 + i) as f64).collect::<Vec<_>>()),
        }
    };
    JumpPart {
        rate: 2.0 + (j % 2) as f64,
        scale: 0.25,
        amplitude,
    }
}

/// `gaussian`: every cell Gaussian. `jump`: every cell compensated Poisson.
/// `mixed`: every cell Gaussian, odd cells (or the only cell) also jump.
pub fn preset_spec(name: &str, dim_h: usize, n_cells: usize, weights: Option<&[f64]>) -> Result<NoiseSpec, HarnessError> {
    if !PRESETS.contains(&name) {
        return Err(unknown("noise preset", name, &PRESETS));
    }
    if n_cells == 0 {
        return Err(HarnessError::Config("noise.n_cells must be >= 1".into()));
    }
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() == n_cells => w.to_vec(),
        Some(w) => {
            return Err(HarnessError::Config(format!(
                "{} weights for {n_cells} cells",
                w.len()
            )))
        }
        None => vec![1.0 / n_cells as f64; n_cells],
    };
    let cells = (0..n_cells)
        .map(|j| {
            let (cont, jump) = match name {
                "gaussian" => (true, false),
                "jump" => (false, true),
                _ => (true, j % 2 == 1 || n_cells == 1),
            };
            CellNoise {
                weight: weights[j],
                continuous: cont.then(|| gaussian_part(dim_h, j)),
                jump: jump.then(|| jump_part(dim_h, j)),
            }
        })
        .collect();
    let spec = NoiseSpec { dim_h, cells };
    spec.validate()?;
    Ok(spec)
}

pub fn noise_spec(cfg: &ExperimentConfig) -> Result<NoiseSpec, HarnessError> {
    let n = &cfg.noise;
    let spec = match (&n.spec, &n.file, &n.preset) {
        (Some(spec), _, _) => {
            spec.validate()?;
            spec.clone()
        }
        (None, Some(file), _) => {
            let text = std::fs::read_to_string(file)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", file.display())))?;
            NoiseSpec::from_json(&text)?
        }
        (None, None, Some(preset)) => preset_spec(preset, cfg.dims.h, n.n_cells, n.weights.as_deref())?,
        (None, None, None) => return Err(HarnessError::Config("noise needs a preset, file or spec".into())),
    };
    if spec.dim_h != cfg.dims.h {
        return Err(HarnessError::Config(format!(
            "noise has dim_h = {}, config dims.h = {}",
            spec.dim_h, cfg.dims.h
        )));
    }
    Ok(spec)
}

pub fn build_noise(cfg: &ExperimentConfig) -> Result<NoiseModel, HarnessError> {
    Ok(NoiseModel::new(&noise_spec(cfg)?)?)
}

pub fn build_grid(cfg: &ExperimentConfig) -> Result<TimeGrid, HarnessError> {
    Ok(TimeGrid::new(cfg.grid.horizon, cfg.grid.n_steps)?)
}

/// Fixed well-conditioned `G × H` operator.
pub fn base_operator(g: usize, h: usize) -> LinearOp {
    LinearOp::from_fn(g, h, |a, b| if a == b { 1.0 } else { 0.2 / (1 + a + b) as f64 })
}

fn first_direction_sign(history: &PathPrefix) -> f64 {
    if history.upto() == 0 {
        return 1.0;
    }
    let h = HilbertVec::basis(history.dim_h(), 0);
    let v = history
        .evaluate(0, history.upto(), &CellSet::all(history.n_cells()), &h)
        .expect("prefix window");
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `constant`: `scale·A`. `diagonal`: deterministic, modulated in time and
/// cell. `state-linear`: `scale·A + coupling·X ⊗ e_0`. `sign-adapted`: the
/// sign of `M((0,t_k], U)(e_0)` times `scale·A·(1 + coupling·tanh‖X‖)`.
/// `tanh-state`: `scale·(1 − coupling + coupling·tanh x_0)·E` with `E` the
/// canonical embedding.
pub fn integrand(name: &str, g: usize, h: usize, grid: &TimeGrid, n_cells: usize, scale: f64, coupling: f64) -> Result<Integrand, HarnessError> {
    let a = base_operator(g, h).scaled(scale);
    Ok(match name {
        "constant" => Integrand::constant(a),
        "diagonal" => {
            let (dt, horizon) = (grid.dt(), grid.horizon());
            Integrand::deterministic(g, h, move |k, j| {
                let t = k as f64 * dt;
                let f = (1.0 + 0.5 * (2.0 * PI * t / horizon).sin()) * (1.0 + j as f64 / n_cells as f64);
                LinearOp::embedding(g, h).scaled(scale * f)
            })
        }
        "state-linear" => Integrand::adapted(g, h, move |_, s: &StepState| {
            let mut op = a.clone();
            op += &LinearOp::from_fn(g, h, |r, c| if c == 0 { coupling * s.value.coords()[r] } else { 0.0 });
            op
        }),
        "sign-adapted" => Integrand::adapted(g, h, move |_, s: &StepState| {
            let sign = first_direction_sign(&s.history);
            a.scaled(sign * (1.0 + coupling * s.value.norm().tanh()))
        }),
        "tanh-state" => Integrand::adapted(g, h, move |_, s: &StepState| {
            let x0 = s.value.coords().first().copied().unwrap_or(0.0);
            LinearOp::embedding(g, h).scaled(scale * (1.0 - coupling + coupling * x0.tanh()))
        }),
        other => return Err(unknown("integrand", other, &INTEGRANDS)),
    })
}

pub fn build_integrand(cfg: &ExperimentConfig) -> Result<Integrand, HarnessError> {
    let grid = build_grid(cfg)?;
    let n_cells = noise_spec(cfg)?.cells.len();
    integrand(
        &cfg.integrand.name,
        cfg.dims.g,
        cfg.dims.h,
        &grid,
        n_cells,
        cfg.integrand.scale,
        cfg.integrand.coupling,
    )
}

/// `X = ξ − κ∫X dt + ∫∫Φ dM` on the given grid.
pub fn process(cfg: &ExperimentConfig, grid: &TimeGrid, phi: Integrand) -> ItoProcessSpec {
    let g = cfg.dims.g;
    let xi = match &cfg.process.xi {
        Some(v) => HilbertVec::from_slice(v),
        None => HilbertVec::from_vec(vec![cfg.process.xi_norm / (g as f64).sqrt(); g]),
    };
    let kappa = cfg.process.mean_reversion;
    let psi = if kappa == 0.0 {
        Drift::Zero
    } else {
        Drift::Adapted(Arc::new(move |s: &StepState| s.value.scaled(-kappa)))
    };
    ItoProcessSpec {
        xi,
        psi,
        driver: FvDriver::time(grid),
        phi,
    }
}

#[derive(Clone, Copy, Debug)]
enum EventKind {
    Always,
    FirstDirectionNonNegative,
    EvenJumpCount,
}

impl EventKind {
    fn holds(self, p: &PathPrefix) -> bool {
        match self {
            EventKind::Always => true,
            EventKind::FirstDirectionNonNegative => first_direction_sign(p) > 0.0,
            EventKind::EvenJumpCount => p.jumps().count() % 2 == 0,
        }
    }

    fn random(rng: &mut impl Rng) -> Self {
        match rng.random_range(0..3) {
            0 => EventKind::Always,
            1 => EventKind::FirstDirectionNonNegative,
            _ => EventKind::EvenJumpCount,
        }
    }
}

fn random_op(rng: &mut impl Rng, rows: usize, cols: usize) -> LinearOp {
    LinearOp::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_window(rng: &mut impl Rng, n_steps: usize) -> (usize, usize) {
    let a = rng.random_range(0..n_steps);
    let b = rng.random_range(a + 1..=n_steps);
    (a, b)
}

/// Random simple `Φ: H → G` and simple `Ψ: G → K`, both with events decided
/// at the left end of their windows.
pub fn random_simple_pair(
    rng: &mut impl Rng,
    dims: (usize, usize, usize),
    n_steps: usize,
    n_cells: usize,
) -> (OperatorProcess, Integrand) {
    let (h, g, k) = dims;
    let n_phi = rng.random_range(1..=4);
    let blocks: Vec<SimpleBlock> = (0..n_phi)
        .map(|_| {
            let (a, b) = random_window(rng, n_steps);
            let cell = rng.random_range(0..n_cells);
            let ev = EventKind::random(rng);
            SimpleBlock::new(a, b, cell, random_op(rng, g, h)).with_event(move |p| ev.holds(p))
        })
        .collect();
    let phi = Integrand::simple(g, h, blocks).expect("consistent block shapes");
    let n_psi = rng.random_range(1..=4);
    let psi_blocks: Vec<(usize, usize, LinearOp, EventKind)> = (0..n_psi)
        .map(|_| {
            let (a, b) = random_window(rng, n_steps);
            (a, b, random_op(rng, k, g), EventKind::random(rng))
        })
        .collect();
    let psi = OperatorProcess::adapted(k, g, move |step, p| {
        let mut acc = LinearOp::zeros(k, g);
        for (a, b, op, ev) in &psi_blocks {
            if *a <= step && step < *b && ev.holds(&p.truncate(*a)) {
                acc += op;
            }
        }
        acc
    });
    (psi, phi)
}
