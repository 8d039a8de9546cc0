//! Predictable and optional quadratic variations of stochastic integrals and
//! their Riemann-sum estimators along (random) partitions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{outer, trace_bilinear, BilinearTensor, HilbertVec, LinearOp};
use crate::integrate::{weighted_hs_sq, Integrand, ItoPath, JumpSource};
use crate::noise::{Flavor, NoiseModel, TimeGrid};
use crate::stats::quantile;

/// `Φ Q Φ* · rate` for cell `j`.
fn weighted_outer(op: &LinearOp, model: &NoiseModel, j: usize, flavor: Flavor) -> LinearOp {
    let rate = model.rate(j, flavor);
    if rate == 0.0 {
        return LinearOp::zeros(op.dim_out(), op.dim_out());
    }
    op.compose(model.covariance(j, flavor))
        .and_then(|a| a.compose(&op.adjoint()))
        .expect("integrand domain matches noise dimension")
        .scaled(rate)
}

fn check_model(phi: &Integrand, model: &NoiseModel) -> Result<()> {
    if phi.dim_in() != model.dim_h() {
        return Err(Error::DimensionMismatch {
            context: "integrand domain vs noise dimension",
            expected: model.dim_h(),
            actual: phi.dim_in(),
        });
    }
    Ok(())
}

/// `⟨⟨I⟩⟩_t = Σ Φ Q_M Φ* · mass` for deterministic `Φ`.
pub fn predictable_operator_qv(
    phi: &Integrand,
    model: &NoiseModel,
    grid: &TimeGrid,
    t: f64,
    flavor: Flavor,
) -> Result<LinearOp> {
    if !phi.is_deterministic() {
        return Err(Error::NotDeterministic);
    }
    check_model(phi, model)?;
    let kt = grid.step_of(t)?;
    let dt = grid.dt();
    let mut acc = LinearOp::zeros(phi.dim_out(), phi.dim_out());
    for k in 0..kt {
        for j in 0..model.n_cells() {
            let op = phi.eval_deterministic(k, j).expect("deterministic");
            acc += &weighted_outer(&op, model, j, flavor).scaled(dt);
        }
    }
    Ok(acc)
}

/// `⟨I⟩_t`, the trace of [`predictable_operator_qv`].
pub fn predictable_qv(
    phi: &Integrand,
    model: &NoiseModel,
    grid: &TimeGrid,
    t: f64,
    flavor: Flavor,
) -> Result<f64> {
    Ok(predictable_operator_qv(phi, model, grid, t, flavor)?.trace())
}

/// Per-path `⟨⟨I⟩⟩_t` from the operators recorded along an Itô path.
pub fn predictable_operator_qv_path(
    ito_path: &ItoPath,
    model: &NoiseModel,
    t: f64,
    flavor: Flavor,
) -> Result<LinearOp> {
    let kt = ito_path.grid().step_of(t)?;
    if kt > ito_path.n_steps() {
        return Err(Error::InvalidArgument("Itô path is shorter than t".into()));
    }
    let dt = ito_path.grid().dt();
    let d = ito_path.dim();
    let mut acc = LinearOp::zeros(d, d);
    for k in 0..kt {
        for j in 0..ito_path.n_cells() {
            acc += &weighted_outer(ito_path.operator(k, j), model, j, flavor).scaled(dt);
        }
    }
    Ok(acc)
}

pub fn predictable_qv_path(ito_path: &ItoPath, model: &NoiseModel, t: f64, flavor: Flavor) -> Result<f64> {
    Ok(predictable_operator_qv_path(ito_path, model, t, flavor)?.trace())
}

/// `[[I]]_t = Σ Φ Q_{M^c} Φ* · mass^c + Σ ΔI ⊗ ΔI`.
pub fn optional_operator_qv(
    ito_path: &ItoPath,
    phi: &Integrand,
    model: &NoiseModel,
    t: f64,
) -> Result<LinearOp> {
    ito_path.check_provenance(phi)?;
    let kt = ito_path.grid().step_of(t)?;
    let mut acc = predictable_operator_qv_path(ito_path, model, t, Flavor::Continuous)?;
    for k in 0..kt {
        for j in ito_path.jumps_in_step(k) {
            acc += &outer(&j.delta, &j.delta);
        }
    }
    Ok(acc)
}

/// `[I]_t`, the trace of [`optional_operator_qv`].
pub fn optional_qv(ito_path: &ItoPath, phi: &Integrand, model: &NoiseModel, t: f64) -> Result<f64> {
    Ok(optional_operator_qv(ito_path, phi, model, t)?.trace())
}

/// Refining sequence of partitions by grid steps, one per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomPartition {
    n_steps: usize,
    dt: f64,
    levels: Vec<Vec<usize>>,
    meshes: Vec<f64>,
}

impl RandomPartition {
    pub fn new(grid: &TimeGrid, levels: Vec<Vec<usize>>, meshes: Vec<f64>) -> Result<Self> {
        if levels.len() != meshes.len() {
            return Err(Error::DimensionMismatch {
                context: "partition meshes",
                expected: levels.len(),
                actual: meshes.len(),
            });
        }
        let p = RandomPartition {
            n_steps: grid.n_steps(),
            dt: grid.dt(),
            levels,
            meshes,
        };
        for n in 0..p.levels.len() {
            let pts = &p.levels[n];
            if pts.first() != Some(&0) || pts.last() != Some(&p.n_steps) {
                return Err(Error::InvalidArgument(format!(
                    "level {n} must start at 0 and end at {}",
                    p.n_steps
                )));
            }
            if pts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("level {n} is not strictly increasing")));
            }
            if p.max_gap(n) > p.meshes[n] * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "level {n} gap {} exceeds declared mesh {}",
                    p.max_gap(n),
                    p.meshes[n]
                )));
            }
        }
        Ok(p)
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn points(&self, level: usize) -> &[usize] {
        &self.levels[level]
    }

    /// Declared mesh bound of a level, in time units.
    pub fn mesh(&self, level: usize) -> f64 {
        self.meshes[level]
    }

    /// Largest realized gap of a level, in time units.
    pub fn max_gap(&self, level: usize) -> f64 {
        self.levels[level]
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 * self.dt)
            .fold(0.0, f64::max)
    }

    fn check_level(&self, level: usize) -> Result<&[usize]> {
        self.levels
            .get(level)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("partition has no level {level}")))
    }
}

/// Dyadic levels `0..=n`: level `m` cuts at multiples of `n_steps / 2^m`.
pub fn make_dyadic_partition(grid: &TimeGrid, n: u32) -> Result<RandomPartition> {
    let steps = grid.n_steps();
    if n >= usize::BITS || (1usize << n) > steps || steps % (1usize << n) != 0 {
        return Err(Error::InvalidArgument(format!(
            "dyadic level {n} does not divide a grid of {steps} steps"
        )));
    }
    let mut levels = Vec::new();
    let mut meshes = Vec::new();
    for m in 0..=n {
        let stride = steps >> m;
        levels.push((0..=(1usize << m)).map(|i| i * stride).collect());
        meshes.push(grid.horizon() / (1u64 << m) as f64);
    }
    RandomPartition::new(grid, levels, meshes)
}

/// Adaptive levels `0..=n`. At level `m` a new cut is placed at the first grid
/// point where, since the previous cut, any of elapsed time, displacement of
/// the stochastic part (checked before and after every jump), continuous
/// `Λ²` mass, or drift variation reaches `2^-m`.
pub fn make_adaptive_partition(ito_path: &ItoPath, model: &NoiseModel, n: u32) -> Result<RandomPartition> {
    let grid = *ito_path.grid();
    let steps = ito_path.n_steps();
    if steps != grid.n_steps() {
        return Err(Error::InvalidArgument("adaptive partition needs a full-length path".into()));
    }
    let dt = grid.dt();
    let stoch = ito_path.stochastic_part();
    let mut levels = Vec::new();
    let mut meshes = Vec::new();
    for m in 0..=n {
        let eps = (-(m as f64)).exp2();
        let time_steps = ((eps / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let mut pts = vec![0usize];
        let mut last = 0usize;
        let mut mass = 0.0;
        let mut variation = 0.0;
        for k in 0..steps {
            mass += (0..ito_path.n_cells())
                .map(|j| weighted_hs_sq(ito_path.operator(k, j), model, j, Flavor::Continuous) * dt)
                .sum::<f64>();
            variation += ito_path.drift_continuous_increment(k).norm();
            let mut s = &stoch[k] + ito_path.stochastic_continuous_increment(k);
            let mut moved = (&s - &stoch[last]).norm() >= eps;
            for j in ito_path.jumps_in_step(k) {
                match j.source {
                    JumpSource::Noise { .. } => {
                        s += &j.delta;
                        moved |= (&s - &stoch[last]).norm() >= eps;
                    }
                    JumpSource::Driver => variation += j.delta.norm(),
                }
            }
            let cut = k + 1 - last >= time_steps || moved || mass >= eps || variation >= eps;
            if cut || k + 1 == steps {
                pts.push(k + 1);
                last = k + 1;
                mass = 0.0;
                variation = 0.0;
            }
        }
        levels.push(pts);
        meshes.push(time_steps as f64 * dt);
    }
    RandomPartition::new(&grid, levels, meshes)
}

fn truncated_pairs(points: &[usize], kt: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    points
        .windows(2)
        .map(move |w| (w[0].min(kt), w[1].min(kt)))
        .filter(|(a, b)| a < b)
}

/// `Σ ‖X_{τ_{i+1}∧t} − X_{τ_i∧t}‖²` at the given level.
pub fn riemann_qv(ito_path: &ItoPath, partition: &RandomPartition, level: usize, t: f64) -> Result<f64> {
    let pts = partition.check_level(level)?;
    let kt = ito_path.grid().step_of(t)?.min(ito_path.n_steps());
    Ok(truncated_pairs(pts, kt)
        .map(|(a, b)| (ito_path.value(b) - ito_path.value(a)).norm_sq())
        .sum())
}

/// Left-evaluated weight `F(step, x)` for bilinear Riemann sums.
pub type BilinearWeight<'a> = dyn Fn(usize, &HilbertVec) -> BilinearTensor + 'a;

/// `Σ F(τ_i, X_{τ_i})(ΔX_i, ΔX_i)` at the given level.
pub fn riemann_weighted_bilinear(
    ito_path: &ItoPath,
    f: &BilinearWeight,
    partition: &RandomPartition,
    level: usize,
    t: f64,
) -> Result<HilbertVec> {
    let pts = partition.check_level(level)?;
    let kt = ito_path.grid().step_of(t)?.min(ito_path.n_steps());
    let mut acc: Option<HilbertVec> = None;
    for (a, b) in truncated_pairs(pts, kt) {
        let dx = ito_path.value(b) - ito_path.value(a);
        let term = f(a, ito_path.value(a)).eval(&dx, &dx);
        match acc.as_mut() {
            Some(v) => *v += &term,
            None => acc = Some(term),
        }
    }
    Ok(acc.unwrap_or_else(|| HilbertVec::zeros(f(0, ito_path.value(0)).dim_k())))
}

/// `∫ F d[[X]]`: `Σ Tr_{ΦQ^{1/2}}F · mass^c` over steps plus `Σ F(X_{s-})(ΔX, ΔX)`.
pub fn weighted_bilinear_target(
    ito_path: &ItoPath,
    f: &BilinearWeight,
    model: &NoiseModel,
    t: f64,
) -> Result<HilbertVec> {
    let kt = ito_path.grid().step_of(t)?;
    if kt > ito_path.n_steps() {
        return Err(Error::InvalidArgument("Itô path is shorter than t".into()));
    }
    let dt = ito_path.grid().dt();
    let mut acc = HilbertVec::zeros(f(0, ito_path.value(0)).dim_k());
    for k in 0..kt {
        let zeta = f(k, ito_path.value(k));
        for j in 0..ito_path.n_cells() {
            let rate = model.rate(j, Flavor::Continuous);
            if rate == 0.0 {
                continue;
            }
            let s = ito_path
                .operator(k, j)
                .compose(model.covariance_sqrt(j, Flavor::Continuous))?;
            acc += &trace_bilinear(&zeta, &s, &s)?.scaled(rate * dt);
        }
        for jump in ito_path.jumps_in_step(k) {
            acc += &f(k, &jump.pre_value).eval(&jump.delta, &jump.delta);
        }
    }
    Ok(acc)
}

/// One row of a refinement study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub level: usize,
    pub mesh: f64,
    pub median_abs_err: f64,
    pub q25: f64,
    pub q75: f64,
    pub n_paths: usize,
    pub seed_base: u64,
}

impl RefinementRow {
    pub fn from_errors(level: usize, mesh: f64, errors: &[f64], seed_base: u64) -> Self {
        RefinementRow {
            level,
            mesh,
            median_abs_err: quantile(errors, 0.5),
            q25: quantile(errors, 0.25),
            q75: quantile(errors, 0.75),
            n_paths: errors.len(),
            seed_base,
        }
    }
}

/// Strictly decreasing medians across consecutive rows.
pub fn medians_strictly_decrease(rows: &[RefinementRow]) -> bool {
    rows.windows(2).all(|w| w[1].median_abs_err < w[0].median_abs_err)
}

pub fn write_refinement_csv(rows: &[RefinementRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "level",
            "mesh",
            "median_abs_err",
            "q25",
            "q75",
            "n_paths",
            "seed_base",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integral_path, simulate_ito_process, Drift, FvDriver, ItoProcessSpec};
    use crate::noise::tests::{gaussian_cell, mixed_spec};
    use crate::noise::NoiseSpec;
    use crate::rng::SeedSequence;
    use std::sync::Arc;

    fn mixed() -> NoiseModel {
        NoiseModel::new(&mixed_spec()).unwrap()
    }

    fn gaussian(dim: usize) -> NoiseModel {
        NoiseModel::new(&NoiseSpec {
            dim_h: dim,
            cells: vec![gaussian_cell(LinearOp::identity(dim), 1.0)],
        })
        .unwrap()
    }

    fn pure_jump() -> NoiseModel {
        let mut spec = mixed_spec();
        spec.cells[0].continuous = None;
        NoiseModel::new(&spec).unwrap()
    }

    fn phi_det() -> Integrand {
        Integrand::deterministic(2, 2, |k, j| {
            LinearOp::from_row_slice(2, 2, &[1.0, 0.1 * k as f64, -0.2, 0.5 + j as f64])
        })
    }

    #[test]
    fn predictable_examples() {
        let grid = TimeGrid::new(2.0, 16).unwrap();
        let model = gaussian(3);
        let zero = Integrand::zero(2, 3);
        assert_eq!(predictable_qv(&zero, &model, &grid, 2.0, Flavor::Total).unwrap(), 0.0);
        assert!(predictable_operator_qv(&zero, &model, &grid, 2.0, Flavor::Total)
            .unwrap()
            .is_zero());
        let id = Integrand::constant(LinearOp::identity(3));
        let q = predictable_qv(&id, &model, &grid, 1.0, Flavor::Total).unwrap();
        assert!((q - 3.0 * 1.0).abs() < 1e-12);
        let rank1 = Integrand::constant(LinearOp::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 2.0, 4.0, 0.0]));
        let op = predictable_operator_qv(&rank1, &model, &grid, 2.0, Flavor::Total).unwrap();
        let (vals, _) = op.symmetric_eigen();
        assert!(vals[0].abs() < 1e-12 * vals[1]);
    }

    #[test]
    fn trace_identity_and_flavor_tower() {
        let model = mixed();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let phi = phi_det();
        for flavor in [Flavor::Total, Flavor::Continuous, Flavor::Discontinuous] {
            let op = predictable_operator_qv(&phi, &model, &grid, 1.0, flavor).unwrap();
            assert_eq!(op.trace(), predictable_qv(&phi, &model, &grid, 1.0, flavor).unwrap());
            assert!(op.max_asymmetry() < 1e-14);
        }
        let t = predictable_qv(&phi, &model, &grid, 1.0, Flavor::Total).unwrap();
        let c = predictable_qv(&phi, &model, &grid, 1.0, Flavor::Continuous).unwrap();
        let d = predictable_qv(&phi, &model, &grid, 1.0, Flavor::Discontinuous).unwrap();
        assert!((t - c - d).abs() < 1e-12 * t);
        let path = model.sample_path(&grid, 3);
        let ip = integral_path(&phi, &path, 8).unwrap();
        let per_path = predictable_qv_path(&ip, &model, 1.0, Flavor::Total).unwrap();
        assert!((per_path - t).abs() < 1e-12 * t);
    }

    #[test]
    fn optional_examples() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let phi = phi_det();
        let jm = pure_jump();
        let path = jm.sample_path(&grid, 5);
        let ip = integral_path(&phi, &path, 16).unwrap();
        let jumps: f64 = ip.jumps().iter().map(|j| j.delta.norm_sq()).sum();
        assert_eq!(optional_qv(&ip, &phi, &jm, 1.0).unwrap(), jumps);

        let gm = gaussian(2);
        let path = gm.sample_path(&grid, 5);
        let ip = integral_path(&phi, &path, 16).unwrap();
        let cont = predictable_qv(&phi, &gm, &grid, 1.0, Flavor::Continuous).unwrap();
        assert!((optional_qv(&ip, &phi, &gm, 1.0).unwrap() - cont).abs() < 1e-12 * cont);

        let mm = mixed();
        let path = mm.sample_path(&grid, 5);
        let ip = integral_path(&phi, &path, 16).unwrap();
        let op = optional_operator_qv(&ip, &phi, &mm, 1.0).unwrap();
        assert_eq!(op.trace(), optional_qv(&ip, &phi, &mm, 1.0).unwrap());
        let cont = predictable_qv(&phi, &mm, &grid, 1.0, Flavor::Continuous).unwrap();
        let jumps: f64 = ip.jumps().iter().map(|j| j.delta.norm_sq()).sum();
        assert!((op.trace() - cont - jumps).abs() < 1e-12 * op.trace());
        assert!(matches!(
            optional_qv(&ip, &phi_det(), &mm, 1.0),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn dyadic_partition_examples() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let p = make_dyadic_partition(&grid, 3).unwrap();
        assert_eq!(p.points(0), &[0, 8]);
        assert_eq!(p.points(1), &[0, 4, 8]);
        for n in 0..3 {
            assert!(p.points(n).iter().all(|x| p.points(n + 1).contains(x)));
            assert_eq!(p.max_gap(n), p.mesh(n));
        }
        assert!(make_dyadic_partition(&grid, 4).is_err());
        assert!(make_dyadic_partition(&TimeGrid::new(1.0, 12).unwrap(), 3).is_err());
    }

    #[test]
    fn riemann_examples() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let model = mixed();
        let path = model.sample_path(&grid, 8);
        let p = make_dyadic_partition(&grid, 4).unwrap();
        let zero = integral_path(&Integrand::zero(2, 2), &path, 16).unwrap();
        assert_eq!(riemann_qv(&zero, &p, 4, 1.0).unwrap(), 0.0);

        let phi = phi_det();
        let ip = integral_path(&phi, &path, 16).unwrap();
        let full: f64 = (0..16).map(|k| (ip.value(k + 1) - ip.value(k)).norm_sq()).sum();
        assert!((riemann_qv(&ip, &p, 4, 1.0).unwrap() - full).abs() < 1e-14);

        let inner = |_: usize, _: &HilbertVec| BilinearTensor::inner_product(2);
        for level in 0..=4 {
            let b = riemann_weighted_bilinear(&ip, &inner, &p, level, 0.5).unwrap();
            assert!((b.coords()[0] - riemann_qv(&ip, &p, level, 0.5).unwrap()).abs() < 1e-14);
        }
        let zero_f = |_: usize, _: &HilbertVec| BilinearTensor::zeros(3, 2);
        assert!(riemann_weighted_bilinear(&ip, &zero_f, &p, 2, 1.0).unwrap().is_zero());
        let target = weighted_bilinear_target(&ip, &inner, &model, 1.0).unwrap();
        assert!((target.coords()[0] - optional_qv(&ip, &phi, &model, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn adaptive_quiet_path_is_time_triggered() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let path = gaussian(2).sample_path(&grid, 1);
        let ip = integral_path(&Integrand::zero(2, 2), &path, 16).unwrap();
        let p = make_adaptive_partition(&ip, &gaussian(2), 3).unwrap();
        for m in 0..=3 {
            let stride = 16 >> m;
            assert_eq!(p.points(m), (0..=(1 << m)).map(|i| i * stride).collect::<Vec<_>>());
        }
    }

    #[test]
    fn adaptive_big_jump_forces_cut() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let model = pure_jump();
        let phi = Integrand::constant(LinearOp::identity(2).scaled(50.0));
        for seed in 0..20 {
            let path = model.sample_path(&grid, seed);
            let ip = integral_path(&phi, &path, 64).unwrap();
            let p = make_adaptive_partition(&ip, &model, 2).unwrap();
            for j in ip.jumps() {
                if j.delta.norm() >= 0.25 {
                    assert!(p.points(2).contains(&(j.step + 1)), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn adaptive_replay_bounds() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let model = mixed();
        let spec = |path_grid: &TimeGrid| ItoProcessSpec {
            xi: HilbertVec::zeros(2),
            psi: Drift::Adapted(Arc::new(|s: &crate::integrate::StepState| s.value.scaled(-1.0))),
            driver: FvDriver::time(path_grid).with_jump(40, 0.5),
            phi: Integrand::adapted(2, 2, |_, s| LinearOp::identity(2).scaled(0.2 + s.value.norm().min(1.0))),
        };
        for seed in 0..30 {
            let path = model.sample_path(&grid, seed);
            let ip = simulate_ito_process(&spec(&grid), &path).unwrap();
            let stoch = ip.stochastic_part();
            let p = make_adaptive_partition(&ip, &model, 4).unwrap();
            for m in 0..=4 {
                let eps = (-(m as f64)).exp2();
                assert!(p.max_gap(m) <= p.mesh(m) + 1e-15);
                for w in p.points(m).windows(2) {
                    let (a, b) = (w[0], w[1]);
                    for k in a + 1..b {
                        assert!((&stoch[k] - &stoch[a]).norm() < eps, "interior k={k}");
                    }
                    let last = (&stoch[b] - &stoch[b - 1]).norm()
                        + ip.jumps_in_step(b - 1).iter().map(|j| j.delta.norm()).sum::<f64>()
                        + ip.stochastic_continuous_increment(b - 1).norm();
                    assert!((&stoch[b] - &stoch[a]).norm() <= eps + last + 1e-12);
                }
            }
        }
    }

    #[test]
    fn martingale_compensation() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let model = mixed();
        let phi = phi_det();
        let seeds = SeedSequence::new(99);
        for t in [0.5, 1.0] {
            let comp = predictable_qv(&phi, &model, &grid, t, Flavor::Total).unwrap();
            let k = grid.step_of(t).unwrap();
            let xs: Vec<f64> = (0..20_000)
                .map(|i| {
                    let path = model.sample_path(&grid, seeds.path_seed(i));
                    integral_path(&phi, &path, k).unwrap().value(k).norm_sq() - comp
                })
                .collect();
            let e = crate::stats::Estimate::from_samples(&xs);
            assert!(e.z_score(0.0).abs() < 4.0, "t={t} z={}", e.z_score(0.0));
        }
    }

    #[test]
    fn operator_qv_matches_mc_covariance() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let model = mixed();
        let phi = phi_det();
        let seeds = SeedSequence::new(7);
        let target = predictable_operator_qv(&phi, &model, &grid, 1.0, Flavor::Total).unwrap();
        let finals: Vec<HilbertVec> = (0..20_000)
            .map(|i| {
                let path = model.sample_path(&grid, seeds.path_seed(i));
                integral_path(&phi, &path, 8).unwrap().value(8).clone()
            })
            .collect();
        for a in 0..2 {
            for b in 0..2 {
                let xs: Vec<f64> = finals.iter().map(|v| v.coords()[a] * v.coords()[b]).collect();
                let e = crate::stats::Estimate::from_samples(&xs);
                assert!(e.z_score(target.entry(a, b)).abs() < 4.0, "({a},{b})");
            }
        }
    }

    #[test]
    fn refinement_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_refinement_csv(&[], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap().trim(),
            "level,mesh,median_abs_err,q25,q75,n_paths,seed_base"
        );
        let row = RefinementRow::from_errors(3, 0.125, &[0.1, 0.2, 0.3], 5);
        write_refinement_csv(&[row], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("3,0.125,0.2,"));
    }
}
