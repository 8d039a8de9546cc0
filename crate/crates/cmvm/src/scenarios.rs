//! Named verification scenarios.

use cmvm_core::burkholder::{self, BurkholderReport, ConstantSource, McOptions};
use cmvm_core::hilbert::{BilinearTensor, HilbertVec};
use cmvm_core::integrate::{
    compose_integrands, conditional_isometry_check, decompose_integral, integral_path,
    integrate, integrate_against, lambda2_norm_sq_deterministic, simulate_ito_process,
    Conditioning, Integrand,
};
use cmvm_core::ito::{
    gamma_estimate, ito_terms, taylor_remainder, taylor_remainder_integral, SmoothFunction,
    TraceVariant,
};
use cmvm_core::noise::{Flavor, NoiseModel, TimeGrid};
use cmvm_core::quadvar::{
    make_dyadic_partition, medians_strictly_decrease, optional_qv, predictable_operator_qv_path,
    predictable_qv_path, riemann_qv, riemann_weighted_bilinear, weighted_bilinear_target,
    RefinementRow,
};
use cmvm_core::rng::{stream_rng, SeedSequence};
use cmvm_core::stats::{median, quantile, Estimate};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::output::Row;
use crate::registry;
use crate::HarnessError;

/// One named comparison. Passes when `|value − target| <= tolerance`;
/// unreliable checks (too few samples for a stderr) are reported but pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub reliable: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            target,
            tolerance,
            pass: (value - target).abs() <= tolerance,
            reliable: true,
        }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Check::new(name, if ok { 1.0 } else { 0.0 }, 1.0, 0.0)
    }

    /// `|z|` of `est` against `target`.
    pub fn z(name: impl Into<String>, est: &Estimate, target: f64, z_max: f64) -> Self {
        if !est.reliable() {
            return Check::unreliable(name, f64::NAN, z_max);
        }
        Check::new(name, est.z_score(target).abs(), 0.0, z_max)
    }

    pub fn unreliable(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            target: 0.0,
            tolerance,
            pass: true,
            reliable: false,
        }
    }
}

/// What a scenario produces before it is written out.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub rows: Vec<Row>,
    pub details: Value,
}

pub type ScenarioFn = fn(&ExperimentConfig) -> Result<Outcome, HarnessError>;

pub const SCENARIOS: [(&str, ScenarioFn, &str); 10] = [
    ("verify-isometry", verify_isometry, "E‖I_T‖² against the Λ² norm"),
    ("verify-conditional-isometry", verify_conditional_isometry, "isometry on (s, t] per F_s event"),
    ("verify-qv", verify_qv, "‖I‖², ⟨I⟩ and [I] share their mean; ⟨⟨I⟩⟩ matches E[I ⊗ I]"),
    ("qv-converge", qv_converge, "dyadic Riemann sums to the optional QV"),
    ("verify-ito", verify_ito, "Itô formula residuals for the configured function"),
    ("ito-converge", ito_converge, "Itô residual under mesh refinement"),
    ("verify-decomposition", verify_decomposition, "I = I^c + I^d, Λ² flavor and covariance identities"),
    ("burkholder", burkholder_scenario, "Burkholder inequality per p"),
    ("verify-associativity", verify_associativity, "∫Ψ d(∫Φ dM) = ∫ΨΦ dM on random simple pairs"),
    ("verify-taylor", verify_taylor, "Taylor remainder: direct against quadrature; Γ decay"),
];

pub fn names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|s| s.0).collect()
}

pub fn lookup(name: &str) -> Result<ScenarioFn, HarnessError> {
    SCENARIOS
        .iter()
        .find(|s| s.0 == name)
        .map(|s| s.1)
        .ok_or_else(|| HarnessError::UnknownName {
            kind: "scenario".into(),
            name: name.into(),
            valid: names().join(", "),
        })
}

struct Setup {
    model: NoiseModel,
    grid: TimeGrid,
    phi: Integrand,
    seeds: SeedSequence,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, HarnessError> {
    Ok(Setup {
        model: registry::build_noise(cfg)?,
        grid: registry::build_grid(cfg)?,
        phi: registry::build_integrand(cfg)?,
        seeds: SeedSequence::new(cfg.seed),
    })
}

fn collect<T>(v: Vec<Result<T, cmvm_core::Error>>) -> Result<Vec<T>, HarnessError> {
    Ok(v.into_iter().collect::<Result<Vec<T>, _>>()?)
}

fn row(cfg: &ExperimentConfig, level: usize, mesh: f64, metric: &str, xs: &[f64]) -> Row {
    Row {
        experiment: cfg.scenario.clone(),
        level,
        mesh,
        metric: metric.into(),
        value: if xs.len() == 1 { xs[0] } else { Estimate::from_samples(xs).mean },
        q25: quantile(xs, 0.25),
        q75: quantile(xs, 0.75),
        n_paths: xs.len(),
        seed: cfg.seed,
    }
}

fn median_row(cfg: &ExperimentConfig, r: &RefinementRow, metric: &str) -> Row {
    Row {
        experiment: cfg.scenario.clone(),
        level: r.level,
        mesh: r.mesh,
        metric: metric.into(),
        value: r.median_abs_err,
        q25: r.q25,
        q75: r.q75,
        n_paths: r.n_paths,
        seed: r.seed_base,
    }
}

fn relative_error(est: f64, target: f64) -> f64 {
    if target == 0.0 {
        est.abs()
    } else {
        ((est - target) / target).abs()
    }
}

fn verify_isometry(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let Setup { model, grid, phi, seeds } = setup(cfg)?;
    let n = grid.n_steps();
    let samples = collect(cfg.execution.map(cfg.n_paths, |i| {
        let path = model.sample_path(&grid, seeds.path_seed(i as u64));
        let x = integral_path(&phi, &path, n)?;
        Ok((x.value(n).clone(), x.lambda2_mass(&model, Flavor::Total, n)))
    }))?;
    let sq: Vec<f64> = samples.iter().map(|(v, _)| v.norm_sq()).collect();
    let tol = &cfg.tolerances;
    let mut checks = Vec::new();
    let target = if phi.is_deterministic() {
        let target = lambda2_norm_sq_deterministic(&phi, &model, &grid, grid.horizon(), Flavor::Total)?;
        checks.push(Check::z("isometry |z|", &Estimate::from_samples(&sq), target, tol.z_max));
        target
    } else {
        let diff: Vec<f64> = samples.iter().map(|(v, m)| v.norm_sq() - m).collect();
        checks.push(Check::z("isometry |z| (paired)", &Estimate::from_samples(&diff), 0.0, tol.z_max));
        Estimate::from_samples(&samples.iter().map(|(_, m)| *m).collect::<Vec<_>>()).mean
    };
    let est = Estimate::from_samples(&sq);
    let rel = relative_error(est.mean, target);
    checks.push(if est.reliable() {
        Check::new("isometry relative error", rel, 0.0, tol.rel_err)
    } else {
        Check::unreliable("isometry relative error", rel, tol.rel_err)
    });
    for c in 0..phi.dim_out() {
        let xs: Vec<f64> = samples.iter().map(|(v, _)| v.coords()[c]).collect();
        checks.push(Check::z(format!("mean of I_T[{c}] |z|"), &Estimate::from_samples(&xs), 0.0, tol.z_max));
    }
    Ok(Outcome {
        rows: vec![
            row(cfg, 0, grid.dt(), "norm_sq", &sq),
            row(cfg, 0, grid.dt(), "lambda2_target", &[target]),
        ],
        details: json!({"mc_mean": est.mean, "mc_stderr": est.stderr, "target": target, "n_paths": cfg.n_paths}),
        checks,
    })
}

fn direction(dim: usize) -> HilbertVec {
    if dim == 2 {
        return HilbertVec::from_slice(&[0.8, -0.6]);
    }
    let v = HilbertVec::from_vec((0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect());
    v.scaled(1.0 / v.norm())
}

fn verify_conditional_isometry(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let Setup { model, grid, phi, seeds } = setup(cfg)?;
    let s = grid.time((grid.n_steps() / 4).max(1));
    let t = grid.horizon();
    if s >= t {
        return Err(HarnessError::Config("conditional isometry needs grid.n_steps >= 2".into()));
    }
    let rep = conditional_isometry_check(
        &phi,
        &model,
        &grid,
        s,
        t,
        &direction(phi.dim_out()),
        &Conditioning::first_increment_sign(HilbertVec::basis(model.dim_h(), 0)),
        cfg.n_paths,
        seeds,
        cfg.execution,
    )?;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for (i, e) in rep.events.iter().enumerate() {
        let name = format!("event '{}' |z|", e.label);
        checks.push(if e.flagged {
            Check::unreliable(name, e.z.abs(), cfg.tolerances.z_max)
        } else {
            Check::new(name, e.z.abs(), 0.0, cfg.tolerances.z_max)
        });
        rows.push(Row {
            experiment: cfg.scenario.clone(),
            level: i,
            mesh: grid.dt(),
            metric: format!("lhs:{}", e.label),
            value: e.lhs.mean,
            q25: e.lhs.mean - e.lhs.stderr,
            q75: e.lhs.mean + e.lhs.stderr,
            n_paths: e.count,
            seed: cfg.seed,
        });
        rows.push(Row {
            metric: format!("rhs:{}", e.label),
            value: e.rhs.mean,
            q25: e.rhs.mean - e.rhs.stderr,
            q75: e.rhs.mean + e.rhs.stderr,
            ..rows.last().expect("just pushed").clone()
        });
    }
    Ok(Outcome {
        checks,
        rows,
        details: serde_json::to_value(&rep)?,
    })
}

fn verify_qv(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let Setup { model, grid, phi, seeds } = setup(cfg)?;
    let n = grid.n_steps();
    let t = grid.horizon();
    let samples = collect(cfg.execution.map(cfg.n_paths, |i| {
        let path = model.sample_path(&grid, seeds.path_seed(i as u64));
        let x = integral_path(&phi, &path, n)?;
        let v = x.value(n).clone();
        let pred = predictable_qv_path(&x, &model, t, Flavor::Total)?;
        let opt = optional_qv(&x, &phi, &model, t)?;
        let op = predictable_operator_qv_path(&x, &model, t, Flavor::Total)?;
        Ok((v, pred, opt, op))
    }))?;
    let z = cfg.tolerances.z_max;
    let paired = |f: &dyn Fn(&(HilbertVec, f64, f64, cmvm_core::hilbert::LinearOp)) -> f64| {
        Estimate::from_samples(&samples.iter().map(f).collect::<Vec<_>>())
    };
    let mut checks = vec![
        Check::z("E(‖I_T‖² − ⟨I⟩_T) |z|", &paired(&|s| s.0.norm_sq() - s.1), 0.0, z),
        Check::z("E(‖I_T‖² − [I]_T) |z|", &paired(&|s| s.0.norm_sq() - s.2), 0.0, z),
        Check::z("E([I]_T − ⟨I⟩_T) |z|", &paired(&|s| s.2 - s.1), 0.0, z),
    ];
    let d = phi.dim_out();
    let mut worst = Check::new("E(I⊗I − ⟨⟨I⟩⟩) max entry |z|", 0.0, 0.0, z);
    for a in 0..d {
        for b in 0..d {
            let c = Check::z(
                "E(I⊗I − ⟨⟨I⟩⟩) max entry |z|",
                &paired(&|s| s.0.coords()[a] * s.0.coords()[b] - s.3.entry(a, b)),
                0.0,
                z,
            );
            if !c.reliable || c.value > worst.value {
                worst = c;
            }
        }
    }
    checks.push(worst);
    let col = |f: &dyn Fn(&(HilbertVec, f64, f64, cmvm_core::hilbert::LinearOp)) -> f64| -> Vec<f64> {
        samples.iter().map(f).collect()
    };
    Ok(Outcome {
        rows: vec![
            row(cfg, 0, grid.dt(), "norm_sq", &col(&|s| s.0.norm_sq())),
            row(cfg, 0, grid.dt(), "predictable_qv", &col(&|s| s.1)),
            row(cfg, 0, grid.dt(), "optional_qv", &col(&|s| s.2)),
        ],
        details: json!({"n_paths": cfg.n_paths}),
        checks,
    })
}

fn bilinear_weight(dim_g: usize) -> impl Fn(usize, &HilbertVec) -> BilinearTensor {
    let base = BilinearTensor::inner_product(dim_g);
    move |_, x: &HilbertVec| base.scaled(1.0 / (1.0 + x.norm_sq()))
}

fn qv_converge(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let Setup { model, grid, phi, seeds } = setup(cfg)?;
    let levels = &cfg.study.levels;
    let top = *levels.iter().max().ok_or_else(|| HarnessError::Config("study.levels is empty".into()))?;
    let partition = make_dyadic_partition(&grid, top)?;
    let n = grid.n_steps();
    let t = grid.horizon();
    let weight = bilinear_weight(phi.dim_out());
    let errors = collect(cfg.execution.map(cfg.n_paths, |i| {
        let path = model.sample_path(&grid, seeds.path_seed(i as u64));
        let x = integral_path(&phi, &path, n)?;
        let target = optional_qv(&x, &phi, &model, t)?;
        let wt = weighted_bilinear_target(&x, &weight, &model, t)?;
        let mut plain = Vec::with_capacity(levels.len());
        let mut weighted = Vec::with_capacity(levels.len());
        for &m in levels {
            plain.push(relative_error(riemann_qv(&x, &partition, m as usize, t)?, target));
            let r = riemann_weighted_bilinear(&x, &weight, &partition, m as usize, t)?;
            weighted.push((&r - &wt).norm() / wt.norm().max(f64::MIN_POSITIVE));
        }
        Ok((plain, weighted))
    }))?;
    let mut plain_rows = Vec::new();
    let mut weighted_rows = Vec::new();
    for (li, &m) in levels.iter().enumerate() {
        let p: Vec<f64> = errors.iter().map(|e| e.0[li]).collect();
        let w: Vec<f64> = errors.iter().map(|e| e.1[li]).collect();
        plain_rows.push(RefinementRow::from_errors(m as usize, partition.mesh(m as usize), &p, cfg.seed));
        weighted_rows.push(RefinementRow::from_errors(m as usize, partition.mesh(m as usize), &w, cfg.seed));
    }
    let tol = cfg.tolerances.finest_rel_err;
    let finest = |rows: &[RefinementRow]| rows.last().map_or(f64::NAN, |r| r.median_abs_err);
    let checks = vec![
        Check::flag("riemann_qv medians strictly decrease", medians_strictly_decrease(&plain_rows)),
        Check::new("riemann_qv finest median relative error", finest(&plain_rows), 0.0, tol),
        Check::flag("weighted bilinear medians strictly decrease", medians_strictly_decrease(&weighted_rows)),
        Check::new("weighted bilinear finest median relative error", finest(&weighted_rows), 0.0, tol),
    ];
    let mut rows: Vec<Row> = plain_rows.iter().map(|r| median_row(cfg, r, "riemann_qv_rel_err")).collect();
    rows.extend(weighted_rows.iter().map(|r| median_row(cfg, r, "weighted_bilinear_rel_err")));
    Ok(Outcome {
        checks,
        rows,
        details: json!({"riemann_qv": plain_rows, "weighted_bilinear": weighted_rows}),
    })
}

fn ito_residuals(
    cfg: &ExperimentConfig,
    grid: &TimeGrid,
    fun: &SmoothFunction,
) -> Result<Vec<cmvm_core::ito::ItoTerms>, HarnessError> {
    let model = registry::build_noise(cfg)?;
    let phi = registry::integrand(
        &cfg.integrand.name,
        cfg.dims.g,
        cfg.dims.h,
        grid,
        model.n_cells(),
        cfg.integrand.scale,
        cfg.integrand.coupling,
    )?;
    let spec = registry::process(cfg, grid, phi.clone());
    let seeds = SeedSequence::new(cfg.seed);
    collect(cfg.execution.map(cfg.n_paths, |i| {
        let path = model.sample_path(grid, seeds.path_seed(i as u64));
        let x = simulate_ito_process(&spec, &path)?;
        ito_terms(fun, &x, &model, &phi, grid.horizon())
    }))
}

fn verify_ito(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let grid = registry::build_grid(cfg)?;
    let fun = SmoothFunction::from_name(&cfg.function, cfg.dims.g)?;
    let terms = ito_residuals(cfg, &grid, &fun)?;
    let realized: Vec<f64> = terms.iter().map(|t| t.relative_residual(TraceVariant::Realized)).collect();
    let comp: Vec<HilbertVec> = terms.iter().map(|t| t.residual(TraceVariant::Compensator)).collect();
    let mut checks = Vec::new();
    let worst = realized.iter().copied().fold(0.0, f64::max);
    if fun.name() == "quadratic" {
        checks.push(Check::new("realized variant max relative residual", worst, 0.0, cfg.tolerances.exact));
    }
    for c in 0..fun.dim_k() {
        let xs: Vec<f64> = comp.iter().map(|r| r.coords()[c]).collect();
        checks.push(Check::z(
            format!("compensator residual[{c}] mean |z|"),
            &Estimate::from_samples(&xs),
            0.0,
            cfg.tolerances.z_max,
        ));
    }
    let comp_norm: Vec<f64> = comp.iter().map(|r| r.norm()).collect();
    Ok(Outcome {
        checks,
        rows: vec![
            row(cfg, 0, grid.dt(), "realized_rel_residual", &realized),
            row(cfg, 0, grid.dt(), "compensator_abs_residual", &comp_norm),
        ],
        details: json!({
            "function": fun.name(),
            "realized_max_rel_residual": worst,
            "realized_median_rel_residual": median(&realized),
            "compensator_median_abs_residual": median(&comp_norm),
        }),
    })
}

fn ito_converge(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let fun = SmoothFunction::from_name(&cfg.function, cfg.dims.g)?;
    if cfg.study.levels.is_empty() {
        return Err(HarnessError::Config("study.levels is empty".into()));
    }
    let mut comp_rows = Vec::new();
    let mut real_rows = Vec::new();
    for &m in &cfg.study.levels {
        let grid = TimeGrid::new(cfg.grid.horizon, 1usize << m)?;
        let terms = ito_residuals(cfg, &grid, &fun)?;
        let comp: Vec<f64> = terms.iter().map(|t| t.residual(TraceVariant::Compensator).norm()).collect();
        let real: Vec<f64> = terms.iter().map(|t| t.residual(TraceVariant::Realized).norm()).collect();
        comp_rows.push(RefinementRow::from_errors(m as usize, grid.dt(), &comp, cfg.seed));
        real_rows.push(RefinementRow::from_errors(m as usize, grid.dt(), &real, cfg.seed));
    }
    let ratio = |rows: &[RefinementRow]| rows[rows.len() - 1].median_abs_err / rows[0].median_abs_err;
    let checks = vec![
        Check::flag("compensator medians strictly decrease", medians_strictly_decrease(&comp_rows)),
        Check::new("compensator finest / coarsest median", ratio(&comp_rows), 0.0, cfg.tolerances.finest_ratio),
    ];
    let mut rows: Vec<Row> = comp_rows.iter().map(|r| median_row(cfg, r, "compensator_abs_residual")).collect();
    rows.extend(real_rows.iter().map(|r| median_row(cfg, r, "realized_abs_residual")));
    Ok(Outcome {
        checks,
        rows,
        details: json!({
            "function": fun.name(),
            "compensator": comp_rows,
            "realized": real_rows,
            "realized_strictly_decreasing": medians_strictly_decrease(&real_rows),
            "realized_finest_over_coarsest": ratio(&real_rows),
        }),
    })
}

fn verify_decomposition(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let Setup { model, grid, phi, seeds } = setup(cfg)?;
    let t = grid.horizon();
    let errs = collect(cfg.execution.map(cfg.n_paths, |i| {
        let path = model.sample_path(&grid, seeds.path_seed(i as u64));
        let whole = integrate(&phi, &path, t)?;
        let (ic, id) = decompose_integral(&phi, &path, t)?;
        Ok((&(&ic + &id) - &whole).norm() / (1.0 + whole.norm()))
    }))?;
    let tol = cfg.tolerances.identity;
    let mut checks = vec![Check::new(
        "max |I − I^c − I^d| / (1 + |I|)",
        errs.iter().copied().fold(0.0, f64::max),
        0.0,
        tol,
    )];
    let det = if phi.is_deterministic() {
        phi.clone()
    } else {
        registry::integrand("diagonal", cfg.dims.g, cfg.dims.h, &grid, model.n_cells(), cfg.integrand.scale, 0.0)?
    };
    let f = |fl| lambda2_norm_sq_deterministic(&det, &model, &grid, t, fl);
    let (tot, c, d) = (f(Flavor::Total)?, f(Flavor::Continuous)?, f(Flavor::Discontinuous)?);
    checks.push(Check::new(
        "Λ² additivity relative gap",
        (tot - c - d).abs() / tot.max(f64::MIN_POSITIVE),
        0.0,
        tol,
    ));
    let mut worst: f64 = 0.0;
    for j in 0..model.n_cells() {
        let (rc, rd, rt) = (
            model.rate(j, Flavor::Continuous),
            model.rate(j, Flavor::Discontinuous),
            model.rate(j, Flavor::Total),
        );
        let combo = &model.covariance(j, Flavor::Continuous).scaled(rc)
            + &model.covariance(j, Flavor::Discontinuous).scaled(rd);
        worst = worst.max(combo.distance(&model.covariance(j, Flavor::Total).scaled(rt)) / rt.max(1.0));
    }
    checks.push(Check::new("covariance field convex combination residual", worst, 0.0, tol));
    Ok(Outcome {
        checks,
        rows: vec![
            row(cfg, 0, grid.dt(), "decomposition_rel_err", &errs),
            row(cfg, 0, grid.dt(), "lambda2_total", &[tot]),
            row(cfg, 0, grid.dt(), "lambda2_continuous", &[c]),
            row(cfg, 0, grid.dt(), "lambda2_discontinuous", &[d]),
        ],
        details: json!({"lambda2": {"total": tot, "continuous": c, "discontinuous": d}, "field_residual": worst}),
    })
}

fn burkholder_scenario(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let Setup { model, grid, phi, seeds } = setup(cfg)?;
    let sigma = cfg.tolerances.sigma;
    let opts = McOptions {
        n_paths: cfg.n_paths,
        seeds,
        exec: cfg.execution,
    };
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let mut reports: Vec<BurkholderReport> = Vec::new();
    let mut stability = Vec::new();
    for &p in &cfg.p {
        for rep in burkholder::check(&phi, &model, &grid, p, &opts, sigma)? {
            let tag = format!("p={p} {}", rep.flavor);
            let bound = rep.effective_constant();
            let rel = if rep.ratio > 0.0 && rep.ratio_stderr.is_finite() { rep.ratio_stderr / rep.ratio } else { 0.0 };
            checks.push(Check {
                name: format!("{tag}: lhs / rhs_core within C(p)"),
                value: rep.ratio,
                target: 0.0,
                tolerance: bound * (1.0 + sigma * rel),
                pass: rep.satisfied,
                reliable: rep.ratio_stderr.is_finite(),
            });
            if let Some(z) = rep.isometry_z {
                checks.push(Check::new(format!("{tag}: E‖X_T‖² = rhs_core |z|"), z.abs(), 0.0, cfg.tolerances.z_max));
            }
            let expected = if rep.flavor == "continuous" { ConstantSource::Paper } else { ConstantSource::Heuristic };
            checks.push(Check::flag(format!("{tag}: constant_source"), rep.constant_source == expected));
            rows.push(Row {
                experiment: cfg.scenario.clone(),
                level: 0,
                mesh: grid.dt(),
                metric: format!("ratio:p={p}:{}", rep.flavor),
                value: rep.ratio,
                q25: rep.ratio - rep.ratio_stderr,
                q75: rep.ratio + rep.ratio_stderr,
                n_paths: rep.n_paths,
                seed: cfg.seed,
            });
            if rep.flavor == "discontinuous" {
                let s = stability_ratios(cfg, &model, &phi, p, seeds, sigma, rep.ratio)?;
                let spread = s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    / s.iter().copied().fold(f64::INFINITY, f64::min);
                checks.push(Check::flag(
                    format!("{tag}: ratio finite"),
                    s.iter().all(|r| r.is_finite() && *r > 0.0),
                ));
                checks.push(Check::new(
                    format!("{tag}: ratio spread over N and mesh"),
                    spread,
                    1.0,
                    cfg.tolerances.stability_factor - 1.0,
                ));
                stability.push(json!({"p": p, "ratios": s, "spread": spread}));
            }
            reports.push(rep);
        }
    }
    Ok(Outcome {
        checks,
        rows,
        details: json!({"reports": reports, "stability": stability}),
    })
}

/// Ratios at `(N, mesh)`, `(N/4, mesh)`, `(N, mesh/2)` and `(N/4, mesh/2)`.
fn stability_ratios(
    cfg: &ExperimentConfig,
    model: &NoiseModel,
    phi: &Integrand,
    p: f64,
    seeds: SeedSequence,
    sigma: f64,
    base: f64,
) -> Result<Vec<f64>, HarnessError> {
    let fine = TimeGrid::new(cfg.grid.horizon, 2 * cfg.grid.n_steps)?;
    let coarse = registry::build_grid(cfg)?;
    let small = (cfg.n_paths / 4).max(1);
    let mut out = vec![base];
    for (grid, n) in [(coarse, small), (fine, cfg.n_paths), (fine, small)] {
        let phi = if grid.n_steps() == coarse.n_steps() {
            phi.clone()
        } else {
            registry::integrand(
                &cfg.integrand.name,
                cfg.dims.g,
                cfg.dims.h,
                &grid,
                model.n_cells(),
                cfg.integrand.scale,
                cfg.integrand.coupling,
            )?
        };
        let opts = McOptions {
            n_paths: n,
            seeds: seeds.child(grid.n_steps() as u64),
            exec: cfg.execution,
        };
        let reps = burkholder::check(&phi, model, &grid, p, &opts, sigma)?;
        let r = reps
            .iter()
            .find(|r| r.flavor == "discontinuous")
            .map_or(f64::NAN, |r| r.ratio);
        out.push(r);
    }
    Ok(out)
}

fn verify_associativity(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let model = registry::build_noise(cfg)?;
    let grid = registry::build_grid(cfg)?;
    let seeds = SeedSequence::new(cfg.seed);
    let (h, g, k) = (cfg.dims.h, cfg.dims.g, cfg.dims.k);
    let t = grid.horizon();
    let n = grid.n_steps();
    let errs = collect(cfg.execution.map(cfg.n_paths, |i| {
        let seed = seeds.path_seed(i as u64);
        let path = model.sample_path(&grid, seed);
        let mut rng = stream_rng(seed, u64::MAX);
        let (psi, phi) = registry::random_simple_pair(&mut rng, (h, g, k), n, model.n_cells());
        let composed = compose_integrands(&psi, &phi)?;
        let lhs = integrate(&composed, &path, t)?;
        let y = integral_path(&phi, &path, n)?;
        let rhs = integrate_against(&psi, &y, &path, t)?;
        Ok((&lhs - &rhs).norm() / (1.0 + lhs.norm()))
    }))?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok(Outcome {
        checks: vec![Check::new("max |∫ΨΦ dM − ∫Ψ dY| / (1 + |∫ΨΦ dM|)", worst, 0.0, cfg.tolerances.identity)],
        rows: vec![row(cfg, 0, grid.dt(), "associativity_rel_err", &errs)],
        details: json!({"pairs": cfg.n_paths, "max_rel_err": worst}),
    })
}

pub const TAYLOR_FUNCTIONS: [&str; 6] = ["quadratic", "norm_p:3", "norm_p:4", "linear:1.5", "linear:1,-2", "gauss_cos"];

fn verify_taylor(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let g = cfg.dims.g;
    let mut rng = stream_rng(SeedSequence::new(cfg.seed).path_seed(0), 0);
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let mut funs: Vec<&str> = TAYLOR_FUNCTIONS.to_vec();
    if g != 2 {
        funs.retain(|f| *f != "linear:1,-2");
    }
    let probes = cfg.n_paths.clamp(1, 500);
    for name in funs {
        let fun = SmoothFunction::from_name(name, g)?;
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let x = random_in_shell(&mut rng, g, 0.5, 1.5);
            let d = random_in_shell(&mut rng, g, 0.05, 0.4);
            let y = &x + &d;
            let time = rng.random_range(0.0..=cfg.grid.horizon);
            let direct = taylor_remainder(&fun, time, &y, &x);
            let quad = taylor_remainder_integral(&fun, time, &y, &x, 8, 8);
            let scale = fun.value(time, &y).norm()
                + fun.value(time, &x).norm()
                + fun.f_x(time, &x).apply(&d).norm()
                + fun.f_xx(time, &x).eval(&d, &d).norm();
            worst = worst.max((&direct - &quad).norm() / scale.max(f64::MIN_POSITIVE));
        }
        checks.push(Check::new(format!("{name}: direct vs quadrature"), worst, 0.0, cfg.tolerances.quadrature));
        rows.push(row(cfg, 0, 0.0, &format!("taylor_gap:{name}"), &[worst]));
    }
    let quartic = SmoothFunction::from_name("norm_p:4", g)?;
    let deltas = [0.4, 0.2, 0.1, 0.05];
    let gammas = deltas
        .iter()
        .map(|&d| gamma_estimate(&quartic, cfg.grid.horizon, 1.0, d, 2000, cfg.seed))
        .collect::<Result<Vec<f64>, _>>()?;
    checks.push(Check::flag(
        "Γ(δ) decreases across δ halvings for ‖x‖⁴",
        gammas.windows(2).all(|w| w[1] < w[0]),
    ));
    for (i, (d, gm)) in deltas.iter().zip(&gammas).enumerate() {
        rows.push(row(cfg, i, *d, "gamma:norm_p:4", &[*gm]));
    }
    Ok(Outcome {
        checks,
        rows,
        details: json!({"gamma": {"delta": deltas, "value": gammas}}),
    })
}

fn random_in_shell(rng: &mut impl Rng, dim: usize, lo: f64, hi: f64) -> HilbertVec {
    loop {
        let v = HilbertVec::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let n = v.norm();
        if n > 1e-3 {
            return v.scaled(rng.random_range(lo..hi) / n);
        }
    }
}
