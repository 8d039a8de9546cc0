//! Orthogonal cylindrical martingale-valued measures on a finite partition of
//! `U = [0, 1)`, built from a Gaussian part and a compensated compound-Poisson
//! part in each cell.
//!
//! The spatial ring is generated by the cells of a [`SpatialPartition`]; every
//! quantity is evaluated on unions of cells, so the measure identities hold
//! exactly. Jumps are compensated by drawing mean-zero amplitudes, so no
//! explicit compensator process appears in the path data.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{outer, psd_sqrt, HilbertVec, LinearOp, DEFAULT_TOL_PSD};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// `t_k = k T / n`; exact at `k = n`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of the grid point `t`; errors for anything off the grid.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round();
        if !(x.is_finite() && (x - k).abs() <= 1e-9 * x.abs().max(1.0) && k >= 0.0) {
            return Err(Error::NonGridTime(t));
        }
        let k = k as usize;
        if k > self.n_steps {
            return Err(Error::NonGridTime(t));
        }
        Ok(k)
    }
}

/// Disjoint subintervals `A_j = [a_j, b_j)` of `U = [0, 1)`, with lengths
/// proportional to the reference weights `w_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPartition {
    weights: Vec<f64>,
}

impl SpatialPartition {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidSpec("partition needs at least one cell".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidSpec("cell weights must be finite and nonnegative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidSpec("cell weights must have positive total".into()));
        }
        Ok(SpatialPartition { weights })
    }

    pub fn uniform(n_cells: usize) -> Result<Self> {
        Self::from_weights(vec![1.0 / n_cells.max(1) as f64; n_cells])
    }

    pub fn n_cells(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `[a_j, b_j)` inside `[0, 1)`.
    pub fn bounds(&self, j: usize) -> (f64, f64) {
        let total = self.total_mass();
        let a: f64 = self.weights[..j].iter().sum::<f64>() / total;
        let b = if j + 1 == self.weights.len() {
            1.0
        } else {
            a + self.weights[j] / total
        };
        (a, b)
    }

    /// The cell containing `u ∈ [0, 1)`.
    pub fn cell_of(&self, u: f64) -> Option<usize> {
        if !(0.0..1.0).contains(&u) {
            return None;
        }
        (0..self.n_cells()).find(|&j| {
            let (a, b) = self.bounds(j);
            a <= u && u < b
        })
    }
}

/// A union of partition cells, i.e. an element of the finite ring.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CellSet(Vec<usize>);

impl CellSet {
    pub fn new(mut cells: Vec<usize>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        CellSet(cells)
    }

    pub fn empty() -> Self {
        CellSet(Vec::new())
    }

    pub fn all(n_cells: usize) -> Self {
        CellSet((0..n_cells).collect())
    }

    pub fn single(j: usize) -> Self {
        CellSet(vec![j])
    }

    pub fn cells(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn union(&self, other: &CellSet) -> CellSet {
        CellSet::new(self.0.iter().chain(&other.0).copied().collect())
    }

    pub fn is_disjoint(&self, other: &CellSet) -> bool {
        !self.0.iter().any(|j| other.contains(*j))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Total,
    Continuous,
    Discontinuous,
}

impl std::str::FromStr for Flavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(Flavor::Total),
            "continuous" => Ok(Flavor::Continuous),
            "discontinuous" => Ok(Flavor::Discontinuous),
            other => Err(Error::InvalidArgument(format!(
                "unknown flavor `{other}` (expected total, continuous or discontinuous)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPart {
    pub covariance: LinearOp,
    /// Intensity per unit time.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpAmplitude {
    /// `±direction` with equal probability.
    TwoPoint { direction: HilbertVec },
    /// Centered Gaussian with the given covariance.
    Gaussian { covariance: LinearOp },
}

impl JumpAmplitude {
    pub fn covariance(&self) -> LinearOp {
        match self {
            JumpAmplitude::TwoPoint { direction } => outer(direction, direction),
            JumpAmplitude::Gaussian { covariance } => covariance.clone(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            JumpAmplitude::TwoPoint { direction } => direction.dim(),
            JumpAmplitude::Gaussian { covariance } => covariance.dim_in(),
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpPart {
    /// Jumps per unit time.
    pub rate: f64,
    /// Amplitudes are `sqrt(scale)` times a draw from `amplitude`.
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub amplitude: JumpAmplitude,
}

impl JumpPart {
    /// Covariance of a single amplitude draw.
    pub fn amplitude_covariance(&self) -> LinearOp {
        self.amplitude.covariance().scaled(self.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellNoise {
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuous: Option<GaussianPart>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump: Option<JumpPart>,
}

impl CellNoise {
    fn continuous_rate_op(&self) -> Option<LinearOp> {
        self.continuous
            .as_ref()
            .filter(|g| g.intensity > 0.0 && !g.covariance.is_zero())
            .map(|g| g.covariance.scaled(g.intensity))
    }

    fn jump_rate_op(&self) -> Option<LinearOp> {
        self.jump
            .as_ref()
            .map(|j| j.amplitude_covariance().scaled(j.rate))
            .filter(|op| !op.is_zero())
    }

    pub fn is_active(&self) -> bool {
        self.continuous_rate_op().is_some() || self.jump_rate_op().is_some()
    }
}

/// Parametric law of the noise: one [`CellNoise`] per partition cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim_h: usize,
    pub cells: Vec<CellNoise>,
}

impl NoiseSpec {
    pub fn partition(&self) -> Result<SpatialPartition> {
        SpatialPartition::from_weights(self.cells.iter().map(|c| c.weight).collect())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: NoiseSpec =
            serde_json::from_str(s).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("noise spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_h == 0 {
            return Err(Error::InvalidSpec("dim_h must be at least 1".into()));
        }
        self.partition()?;
        let check_op = |op: &LinearOp, what: &str, j: usize| -> Result<()> {
            if op.dim_in() != self.dim_h || op.dim_out() != self.dim_h {
                return Err(Error::InvalidSpec(format!(
                    "cell {j}: {what} must be {d}x{d}",
                    d = self.dim_h
                )));
            }
            psd_sqrt(op, DEFAULT_TOL_PSD)
                .map(|_| ())
                .map_err(|e| Error::InvalidSpec(format!("cell {j}: {what}: {e}")))
        };
        for (j, cell) in self.cells.iter().enumerate() {
            if let Some(g) = &cell.continuous {
                check_op(&g.covariance, "continuous covariance", j)?;
                if !(g.intensity.is_finite() && g.intensity >= 0.0) {
                    return Err(Error::InvalidSpec(format!("cell {j}: intensity must be >= 0")));
                }
            }
            if let Some(jp) = &cell.jump {
                if !(jp.rate.is_finite() && jp.rate >= 0.0) {
                    return Err(Error::InvalidSpec(format!("cell {j}: jump rate must be >= 0")));
                }
                if !(jp.scale.is_finite() && jp.scale >= 0.0) {
                    return Err(Error::InvalidSpec(format!("cell {j}: jump scale must be >= 0")));
                }
                if jp.amplitude.dim() != self.dim_h {
                    return Err(Error::InvalidSpec(format!(
                        "cell {j}: jump amplitude must live in dimension {}",
                        self.dim_h
                    )));
                }
                check_op(&jp.amplitude.covariance(), "jump covariance", j)?;
            }
        }
        Ok(())
    }
}

fn near_one(x: f64) -> bool {
    (x - 1.0).abs() <= 1e-12
}

/// Rescale every cell operator to operator norm 1, moving the magnitude into
/// the intensity (continuous part) or the amplitude scale (jump part). The law
/// of every increment is unchanged.
pub fn normalize_spec(spec: &NoiseSpec) -> Result<NoiseSpec> {
    spec.validate()?;
    if !spec.cells.iter().any(CellNoise::is_active) {
        return Err(Error::InvalidSpec("all cells are zero".into()));
    }
    let mut out = spec.clone();
    for cell in &mut out.cells {
        if let Some(g) = &mut cell.continuous {
            let n = g.covariance.op_norm();
            if n > 0.0 && !near_one(n) {
                g.covariance = g.covariance.scaled(1.0 / n);
                g.intensity *= n;
            }
        }
        if let Some(jp) = &mut cell.jump {
            let n = jp.amplitude.covariance().op_norm();
            if n > 0.0 && !near_one(n) {
                jp.amplitude = match &jp.amplitude {
                    JumpAmplitude::TwoPoint { direction } => JumpAmplitude::TwoPoint {
                        direction: direction.scaled(1.0 / n.sqrt()),
                    },
                    JumpAmplitude::Gaussian { covariance } => JumpAmplitude::Gaussian {
                        covariance: covariance.scaled(1.0 / n),
                    },
                };
                jp.scale *= n;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct CellModel {
    /// `λ^c` after normalization; zero when the cell has no Gaussian part.
    cont_rate: f64,
    cont_cov: LinearOp,
    cont_sqrt: LinearOp,
    /// `λ^d · scale`, the jump contribution to the quadratic variation rate.
    jump_intensity: f64,
    jump_rate: f64,
    jump_scale_sqrt: f64,
    jump_shape: LinearOp,
    jump_shape_sqrt: LinearOp,
    jump_direction: Option<HilbertVec>,
    total_rate: f64,
    total_cov: LinearOp,
    total_sqrt: LinearOp,
}

/// A normalized [`NoiseSpec`] with the per-cell operators it needs precomputed.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    spec: NoiseSpec,
    partition: SpatialPartition,
    cells: Vec<CellModel>,
}

impl NoiseModel {
    pub fn new(spec: &NoiseSpec) -> Result<Self> {
        let spec = normalize_spec(spec)?;
        let partition = spec.partition()?;
        let d = spec.dim_h;
        let zero = LinearOp::zeros(d, d);
        let mut cells = Vec::with_capacity(spec.cells.len());
        for cell in &spec.cells {
            let (cont_rate, cont_cov) = match &cell.continuous {
                Some(g) if g.intensity > 0.0 && !g.covariance.is_zero() => {
                    (g.intensity, g.covariance.clone())
                }
                _ => (0.0, zero.clone()),
            };
            let (jump_rate, scale, jump_shape, jump_direction) = match &cell.jump {
                Some(jp) if jp.rate > 0.0 && jp.scale > 0.0 && !jp.amplitude.covariance().is_zero() => {
                    let dir = match &jp.amplitude {
                        JumpAmplitude::TwoPoint { direction } => Some(direction.clone()),
                        JumpAmplitude::Gaussian { .. } => None,
                    };
                    (jp.rate, jp.scale, jp.amplitude.covariance(), dir)
                }
                _ => (0.0, 0.0, zero.clone(), None),
            };
            let jump_intensity = jump_rate * scale;
            let mut combined = cont_cov.scaled(cont_rate);
            combined += &jump_shape.scaled(jump_intensity);
            let total_rate = combined.op_norm();
            let total_cov = if total_rate > 0.0 {
                combined.scaled(1.0 / total_rate)
            } else {
                zero.clone()
            };
            cells.push(CellModel {
                cont_rate,
                cont_sqrt: psd_sqrt(&cont_cov, DEFAULT_TOL_PSD)?,
                cont_cov,
                jump_intensity,
                jump_rate,
                jump_scale_sqrt: scale.sqrt(),
                jump_shape_sqrt: psd_sqrt(&jump_shape, DEFAULT_TOL_PSD)?,
                jump_shape,
                jump_direction,
                total_rate,
                total_sqrt: psd_sqrt(&total_cov, DEFAULT_TOL_PSD)?,
                total_cov,
            });
        }
        Ok(NoiseModel {
            spec,
            partition,
            cells,
        })
    }

    /// The normalized spec this model was built from.
    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn partition(&self) -> &SpatialPartition {
        &self.partition
    }

    pub fn dim_h(&self) -> usize {
        self.spec.dim_h
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn has_continuous_part(&self) -> bool {
        self.cells.iter().any(|c| c.cont_rate > 0.0)
    }

    pub fn has_jump_part(&self) -> bool {
        self.cells.iter().any(|c| c.jump_intensity > 0.0)
    }

    /// Quadratic-variation mass per unit time of cell `j`.
    pub fn rate(&self, j: usize, flavor: Flavor) -> f64 {
        let c = &self.cells[j];
        match flavor {
            Flavor::Total => c.total_rate,
            Flavor::Continuous => c.cont_rate,
            Flavor::Discontinuous => c.jump_intensity,
        }
    }

    /// Normalized covariance `Q` of cell `j` (zero operator off support).
    pub fn covariance(&self, j: usize, flavor: Flavor) -> &LinearOp {
        let c = &self.cells[j];
        match flavor {
            Flavor::Total => &c.total_cov,
            Flavor::Continuous => &c.cont_cov,
            Flavor::Discontinuous => &c.jump_shape,
        }
    }

    /// `Q^{1/2}` of cell `j`.
    pub fn covariance_sqrt(&self, j: usize, flavor: Flavor) -> &LinearOp {
        let c = &self.cells[j];
        match flavor {
            Flavor::Total => &c.total_sqrt,
            Flavor::Continuous => &c.cont_sqrt,
            Flavor::Discontinuous => &c.jump_shape_sqrt,
        }
    }

    pub fn qv_measure(&self, grid: &TimeGrid, flavor: Flavor) -> QVMeasure {
        let dt = grid.dt();
        let rates: Vec<f64> = (0..self.n_cells()).map(|j| self.rate(j, flavor) * dt).collect();
        let mut data = Vec::with_capacity(grid.n_steps() * self.n_cells());
        for _ in 0..grid.n_steps() {
            data.extend_from_slice(&rates);
        }
        QVMeasure {
            flavor,
            mass: CellArray {
                n_steps: grid.n_steps(),
                n_cells: self.n_cells(),
                data,
            },
        }
    }

    /// `Q_M(k, j)` for the requested part of the noise.
    pub fn covariance_field(
        &self,
        grid: &TimeGrid,
        k: usize,
        j: usize,
        flavor: Flavor,
    ) -> Result<LinearOp> {
        if k >= grid.n_steps() || j >= self.n_cells() {
            return Err(Error::InvalidArgument(format!("no grid cell ({k}, {j})")));
        }
        if self.rate(j, flavor) <= 0.0 {
            return Err(Error::OffSupport { step: k, cell: j });
        }
        Ok(self.covariance(j, flavor).clone())
    }

    /// `ν_h[k][j] = <Q_M h, h> · mass[k][j]`.
    pub fn intensity_nu(&self, grid: &TimeGrid, h: &HilbertVec) -> Result<CellArray> {
        if h.dim() != self.dim_h() {
            return Err(Error::DimensionMismatch {
                context: "intensity_nu direction",
                expected: self.dim_h(),
                actual: h.dim(),
            });
        }
        let mass = self.qv_measure(grid, Flavor::Total).mass;
        let per_cell: Vec<f64> = (0..self.n_cells())
            .map(|j| self.covariance(j, Flavor::Total).apply(h).dot(h))
            .collect();
        let data = mass
            .data
            .iter()
            .enumerate()
            .map(|(i, m)| per_cell[i % self.n_cells()] * m)
            .collect();
        Ok(CellArray { data, ..mass })
    }

    /// Draw one path. Each cell uses its own stream keyed by `seed`.
    pub fn sample_path(&self, grid: &TimeGrid, seed: u64) -> SamplePath {
        let n = grid.n_steps();
        let m = self.n_cells();
        let d = self.dim_h();
        let dt = grid.dt();
        let mut gauss = vec![HilbertVec::zeros(d); n * m];
        let mut per_step: Vec<Vec<JumpEvent>> = vec![Vec::new(); n];
        for (j, cell) in self.cells.iter().enumerate() {
            let mut rng = stream_rng(seed, j as u64);
            let gauss_sd = (dt * cell.cont_rate).sqrt();
            let poisson = if cell.jump_rate > 0.0 {
                Some(Poisson::new(cell.jump_rate * dt).expect("positive Poisson mean"))
            } else {
                None
            };
            for (k, jumps) in per_step.iter_mut().enumerate() {
                if cell.cont_rate > 0.0 {
                    let z = standard_normal(&mut rng, d);
                    gauss[k * m + j] = cell.cont_sqrt.apply(&z).scaled(gauss_sd);
                }
                if let Some(p) = &poisson {
                    let count = p.sample(&mut rng) as usize;
                    for _ in 0..count {
                        let u: f64 = rng.random();
                        let time = grid.time(k) + (1.0 - u) * dt;
                        let amplitude = match &cell.jump_direction {
                            Some(v) => {
                                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                                v.scaled(sign * cell.jump_scale_sqrt)
                            }
                            None => cell
                                .jump_shape_sqrt
                                .apply(&standard_normal(&mut rng, d))
                                .scaled(cell.jump_scale_sqrt),
                        };
                        jumps.push(JumpEvent {
                            step: k,
                            cell: j,
                            time: time.min(grid.time(k + 1)),
                            amplitude,
                        });
                    }
                }
            }
        }
        let mut jumps = Vec::new();
        let mut step_ranges = Vec::with_capacity(n);
        for mut events in per_step {
            // Stable sort: ties keep cell-then-draw order.
            events.sort_by(|a, b| a.time.total_cmp(&b.time));
            let start = jumps.len();
            jumps.extend(events);
            step_ranges.push((start, jumps.len()));
        }
        SamplePath {
            grid: *grid,
            n_cells: m,
            dim_h: d,
            seed,
            gauss,
            jumps,
            step_ranges,
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, d: usize) -> HilbertVec {
    HilbertVec::from_vec((0..d).map(|_| StandardNormal.sample(rng)).collect())
}

/// Nonnegative array indexed by `(step, cell)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellArray {
    pub n_steps: usize,
    pub n_cells: usize,
    pub data: Vec<f64>,
}

impl CellArray {
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.data[k * self.n_cells + j]
    }

    /// Sum over steps in `[k0, k1)` and the given cells.
    pub fn window_sum(&self, k0: usize, k1: usize, cells: &CellSet) -> f64 {
        (k0..k1)
            .map(|k| cells.cells().iter().map(|&j| self.get(k, j)).sum::<f64>())
            .sum()
    }
}

/// Discrete realization of `⟨⟨M⟩⟩`, `⟨⟨M^c⟩⟩` or `⟨⟨M^d⟩⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct QVMeasure {
    pub flavor: Flavor,
    pub mass: CellArray,
}

impl QVMeasure {
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.mass.get(k, j)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JumpEvent {
    pub step: usize,
    pub cell: usize,
    /// Exact time in `(t_k, t_{k+1}]`.
    pub time: f64,
    pub amplitude: HilbertVec,
}

/// One realized path of the noise: Gaussian increments per `(step, cell)` and
/// the jump events, ordered by time within each step.
#[derive(Clone, Debug)]
pub struct SamplePath {
    grid: TimeGrid,
    n_cells: usize,
    dim_h: usize,
    seed: u64,
    gauss: Vec<HilbertVec>,
    jumps: Vec<JumpEvent>,
    step_ranges: Vec<(usize, usize)>,
}

impl SamplePath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dim_h(&self) -> usize {
        self.dim_h
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Increment of `M^c` over `(t_k, t_{k+1}] × A_j`.
    pub fn gauss_increment(&self, k: usize, j: usize) -> &HilbertVec {
        &self.gauss[k * self.n_cells + j]
    }

    pub fn jumps(&self) -> &[JumpEvent] {
        &self.jumps
    }

    pub fn jumps_in_step(&self, k: usize) -> &[JumpEvent] {
        let (a, b) = self.step_ranges[k];
        &self.jumps[a..b]
    }

    /// Sum of jump amplitudes of cell `j` in step `k`.
    pub fn jump_sum(&self, k: usize, j: usize) -> HilbertVec {
        let mut acc = HilbertVec::zeros(self.dim_h);
        for e in self.jumps_in_step(k).iter().filter(|e| e.cell == j) {
            acc += &e.amplitude;
        }
        acc
    }

    pub fn increment(&self, k: usize, j: usize, flavor: Flavor) -> HilbertVec {
        match flavor {
            Flavor::Continuous => self.gauss_increment(k, j).clone(),
            Flavor::Discontinuous => self.jump_sum(k, j),
            Flavor::Total => self.gauss_increment(k, j) + &self.jump_sum(k, j),
        }
    }

    /// `M((s, t], A)(h)`.
    pub fn evaluate(&self, s: f64, t: f64, cells: &CellSet, h: &HilbertVec) -> Result<f64> {
        self.evaluate_flavor(s, t, cells, h, Flavor::Total)
    }

    pub fn evaluate_flavor(
        &self,
        s: f64,
        t: f64,
        cells: &CellSet,
        h: &HilbertVec,
        flavor: Flavor,
    ) -> Result<f64> {
        let k0 = self.grid.step_of(s)?;
        let k1 = self.grid.step_of(t)?;
        if k0 > k1 {
            return Err(Error::InvalidArgument(format!("window ({s}, {t}] is reversed")));
        }
        self.evaluate_steps(k0, k1, cells, h, flavor)
    }

    /// `M((t_{k0}, t_{k1}], A)(h)` by step indices.
    pub fn evaluate_steps(
        &self,
        k0: usize,
        k1: usize,
        cells: &CellSet,
        h: &HilbertVec,
        flavor: Flavor,
    ) -> Result<f64> {
        if h.dim() != self.dim_h {
            return Err(Error::DimensionMismatch {
                context: "evaluate direction",
                expected: self.dim_h,
                actual: h.dim(),
            });
        }
        if let Some(&bad) = cells.cells().iter().find(|&&j| j >= self.n_cells) {
            return Err(Error::InvalidArgument(format!("cell {bad} out of range")));
        }
        let mut acc = 0.0;
        for k in k0..k1 {
            for &j in cells.cells() {
                if flavor != Flavor::Discontinuous {
                    acc += self.gauss_increment(k, j).dot(h);
                }
            }
            if flavor != Flavor::Continuous {
                for e in self.jumps_in_step(k) {
                    if cells.contains(e.cell) {
                        acc += e.amplitude.dot(h);
                    }
                }
            }
        }
        Ok(acc)
    }
}
