use cmvm_core::hilbert::{HilbertVec, LinearOp};
use cmvm_core::integrate::{
    compose_integrands, decompose_integral, integral_path, integrate, integrate_against,
    integrate_simple, lambda2_norm_sq_deterministic, Integrand, OperatorProcess, SimpleBlock,
};
use cmvm_core::noise::{
    normalize_spec, CellNoise, CellSet, Flavor, GaussianPart, JumpAmplitude, JumpPart, NoiseModel,
    NoiseSpec, TimeGrid,
};
use proptest::prelude::*;

const STEPS: usize = 8;

fn op_strategy(rows: usize, cols: usize) -> impl Strategy<Value = LinearOp> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |v| LinearOp::from_row_slice(rows, cols, &v))
}

fn psd_strategy(d: usize) -> impl Strategy<Value = LinearOp> {
    op_strategy(d, d).prop_map(|a| a.compose(&a.adjoint()).unwrap())
}

fn cell_strategy(d: usize) -> impl Strategy<Value = CellNoise> {
    (
        prop::option::of((psd_strategy(d), 0.1..3.0f64)),
        prop::option::of((0.1..4.0f64, 0.05..1.0f64, psd_strategy(d))),
    )
        .prop_filter_map("inactive cell", move |(c, j)| {
            let cell = CellNoise {
                weight: 1.0,
                continuous: c
                    .filter(|(q, _)| q.op_norm() > 1e-3)
                    .map(|(covariance, intensity)| GaussianPart { covariance, intensity }),
                jump: j.filter(|(_, _, q)| q.op_norm() > 1e-3).map(|(rate, scale, covariance)| JumpPart {
                    rate,
                    scale,
                    amplitude: JumpAmplitude::Gaussian { covariance },
                }),
            };
            cell.is_active().then_some(cell)
        })
}

fn spec_strategy() -> impl Strategy<Value = NoiseSpec> {
    prop::collection::vec(cell_strategy(2), 1..4).prop_map(|mut cells| {
        let w = 1.0 / cells.len() as f64;
        for c in &mut cells {
            c.weight = w;
        }
        NoiseSpec { dim_h: 2, cells }
    })
}

fn block_strategy(n_cells: usize, rows: usize, cols: usize) -> impl Strategy<Value = (usize, usize, usize, LinearOp, i8)> {
    (0..STEPS, 1..=STEPS, 0..n_cells, op_strategy(rows, cols), -1i8..=1)
        .prop_filter("empty window", |(a, b, ..)| a < b)
}

fn to_block((start, end, cell, op, ev): (usize, usize, usize, LinearOp, i8)) -> SimpleBlock {
    let b = SimpleBlock::new(start, end, cell, op);
    match ev {
        0 => b,
        s => b.with_event(move |p| {
            let h = HilbertVec::basis(2, 0);
            let v = if p.upto() == 0 { 0.0 } else { p.evaluate(0, p.upto(), &CellSet::all(p.n_cells()), &h).unwrap() };
            (v >= 0.0) == (s > 0)
        }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalization_is_idempotent_and_unit(spec in spec_strategy()) {
        let once = normalize_spec(&spec).unwrap();
        let twice = normalize_spec(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        let model = NoiseModel::new(&spec).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        for j in 0..model.n_cells() {
            for flavor in [Flavor::Total, Flavor::Continuous, Flavor::Discontinuous] {
                if let Ok(q) = model.covariance_field(&grid, 0, j, flavor) {
                    prop_assert!((q.op_norm() - 1.0).abs() < 1e-10);
                }
            }
            let c = model.rate(j, Flavor::Continuous);
            let d = model.rate(j, Flavor::Discontinuous);
            let t = model.rate(j, Flavor::Total);
            prop_assert!(t <= c + d + 1e-12 && t >= c.max(d) - 1e-12);
            let combo = &model.covariance(j, Flavor::Continuous).scaled(c)
                + &model.covariance(j, Flavor::Discontinuous).scaled(d);
            prop_assert!(combo.distance(&model.covariance(j, Flavor::Total).scaled(t)) < 1e-12 * t.max(1.0));
        }
    }

    #[test]
    fn simple_integral_matches_general_and_decomposes(
        spec in spec_strategy(),
        blocks in prop::collection::vec(block_strategy(1, 3, 2), 1..5),
        seed in any::<u64>(),
    ) {
        let model = NoiseModel::new(&spec).unwrap();
        let grid = TimeGrid::new(1.0, STEPS).unwrap();
        let path = model.sample_path(&grid, seed);
        let blocks: Vec<SimpleBlock> = blocks.into_iter().map(to_block).collect();
        let phi = Integrand::simple(3, 2, blocks).unwrap();
        let a = integrate_simple(&phi, &path, 1.0).unwrap();
        let b = integrate(&phi, &path, 1.0).unwrap();
        prop_assert!((&a - &b).norm() <= 1e-12 * (1.0 + a.norm()));
        let (ic, id) = decompose_integral(&phi, &path, 1.0).unwrap();
        prop_assert!((&(&ic + &id) - &b).norm() <= 1e-12 * (1.0 + b.norm()));
    }

    #[test]
    fn associativity_for_simple_pairs(
        spec in spec_strategy(),
        phi_blocks in prop::collection::vec(block_strategy(1, 2, 2), 1..4),
        psi_ops in prop::collection::vec(op_strategy(3, 2), STEPS),
        seed in any::<u64>(),
    ) {
        let model = NoiseModel::new(&spec).unwrap();
        let grid = TimeGrid::new(1.0, STEPS).unwrap();
        let path = model.sample_path(&grid, seed);
        let phi = Integrand::simple(2, 2, phi_blocks.into_iter().map(to_block).collect()).unwrap();
        let psi = OperatorProcess::adapted(3, 2, move |k, p| {
            let flip = p.jumps().count() % 2 == 1;
            psi_ops[k].scaled(if flip { -1.0 } else { 1.0 })
        });
        let composed = compose_integrands(&psi, &phi).unwrap();
        let lhs = integrate(&composed, &path, 1.0).unwrap();
        let y = integral_path(&phi, &path, STEPS).unwrap();
        let rhs = integrate_against(&psi, &y, &path, 1.0).unwrap();
        prop_assert!((&lhs - &rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
    }

    #[test]
    fn lambda2_flavors_add(spec in spec_strategy(), op in op_strategy(2, 2)) {
        let model = NoiseModel::new(&spec).unwrap();
        let grid = TimeGrid::new(2.0, STEPS).unwrap();
        let phi = Integrand::deterministic(2, 2, move |k, _| op.scaled(1.0 + k as f64));
        let f = |fl| lambda2_norm_sq_deterministic(&phi, &model, &grid, 2.0, fl).unwrap();
        let (t, c, d) = (f(Flavor::Total), f(Flavor::Continuous), f(Flavor::Discontinuous));
        prop_assert!((t - c - d).abs() <= 1e-12 * t.max(1e-300));
    }

    #[test]
    fn evaluate_is_additive_in_time_and_space(spec in spec_strategy(), seed in any::<u64>(), split in 1..STEPS) {
        let model = NoiseModel::new(&spec).unwrap();
        let grid = TimeGrid::new(1.0, STEPS).unwrap();
        let path = model.sample_path(&grid, seed);
        let h = HilbertVec::from_slice(&[0.3, -1.1]);
        let all = CellSet::all(model.n_cells());
        let whole = path.evaluate_steps(0, STEPS, &all, &h, Flavor::Total).unwrap();
        let parts = path.evaluate_steps(0, split, &all, &h, Flavor::Total).unwrap()
            + path.evaluate_steps(split, STEPS, &all, &h, Flavor::Total).unwrap();
        prop_assert!((whole - parts).abs() < 1e-12 * (1.0 + whole.abs()));
        let by_cell: f64 = (0..model.n_cells())
            .map(|j| path.evaluate_steps(0, STEPS, &CellSet::single(j), &h, Flavor::Total).unwrap())
            .sum();
        prop_assert!((whole - by_cell).abs() < 1e-12 * (1.0 + whole.abs()));
    }
}
