//! One line per acceptance criterion. Tolerances live in the config
//! defaults and the files under `configs/`.

use std::path::PathBuf;
use std::time::Instant;

use cmvm::{run, ExperimentConfig, RunRecord};

fn config(name: &str, out: &tempfile::TempDir, sets: &[&str]) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut all: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    all.push(format!("output={}", serde_json::to_string(out.path()).unwrap()));
    ExperimentConfig::load(&path).unwrap().with_overrides(&all).unwrap()
}

fn summarize(records: &[RunRecord]) -> (bool, String) {
    let mut failed = Vec::new();
    let mut shown = Vec::new();
    for r in records {
        for c in &r.checks {
            if !c.pass {
                failed.push(format!("{} = {:.3e} (tol {:.1e})", c.name, c.value, c.tolerance));
            }
        }
        if let Some(c) = r.checks.first() {
            shown.push(format!("{} = {:.3e}", c.name, c.value));
        }
    }
    if failed.is_empty() {
        (true, shown.join("; "))
    } else {
        (false, failed.join("; "))
    }
}

struct Criterion {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn criterion(id: u32, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Criterion {
    let (pass, detail) = f();
    let c = Criterion { id, title, pass, detail };
    println!(
        "[{}] criterion {:>2}: {} | {}",
        if c.pass { "PASS" } else { "FAIL" },
        c.id,
        c.title,
        c.detail
    );
    c
}

fn record(name: &str, sets: &[&str]) -> RunRecord {
    let out = tempfile::tempdir().unwrap();
    run(&config(name, &out, sets)).unwrap()
}

#[test]
fn acceptance() {
    let mut results = Vec::new();

    results.push(criterion(1, "Itô isometry, mixed noise, N = 20000, single-threaded < 60 s", || {
        let start = Instant::now();
        let r = record("isometry.json", &["execution=sequential"]);
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = summarize(&[r]);
        (ok && secs < 60.0, format!("{detail}; {secs:.1}s"))
    }));

    results.push(criterion(2, "conditional isometry per first-step sign event, N = 50000", || {
        summarize(&[record("conditional-isometry.json", &[])])
    }));

    results.push(criterion(3, "‖x‖² Itô identity exact (realized) and unbiased (compensator)", || {
        let recs: Vec<RunRecord> = ["gaussian", "jump", "mixed"]
            .iter()
            .map(|p| record("ito-quadratic.json", &[&format!("noise.preset={p}")]))
            .collect();
        summarize(&recs)
    }));

    results.push(criterion(4, "gauss_cos Itô residual shrinks over Δt = 2^-4..2^-8, finest <= 25% of coarsest", || {
        let r = record("ito-converge.json", &[]);
        let ratio = r.checks.iter().find(|c| c.name.contains("finest")).map(|c| c.value);
        let (ok, _) = summarize(std::slice::from_ref(&r));
        (ok, format!("compensator finest/coarsest = {:.3}", ratio.unwrap_or(f64::NAN)))
    }));

    results.push(criterion(5, "dyadic Riemann sums to [I] and ∫F d[[I]], finest median rel. err. < 10%", || {
        let r = record("qv-converge.json", &[]);
        let finest: Vec<String> = r
            .checks
            .iter()
            .filter(|c| c.name.contains("finest"))
            .map(|c| format!("{:.3}", c.value))
            .collect();
        let (ok, detail) = summarize(&[r]);
        (ok, if ok { format!("finest = {}", finest.join(", ")) } else { detail })
    }));

    results.push(criterion(6, "I = I^c + I^d, Λ² additivity, covariance field identity to 1e-12", || {
        summarize(&[record("decomposition.json", &[])])
    }));

    results.push(criterion(7, "Burkholder continuous case, p = 1, 2, 3, 4 with C(p) = 3, 1, D(3)^{3/2}, 48", || {
        summarize(&[record("burkholder-continuous.json", &[])])
    }));

    results.push(criterion(8, "Burkholder jump case, p = 3, 4: finite, stable ratio, heuristic constant flagged", || {
        summarize(&[record("burkholder-jump.json", &[])])
    }));

    results.push(criterion(9, "associativity on 1000 random simple pairs to 1e-12", || {
        summarize(&[record("associativity.json", &[])])
    }));

    results.push(criterion(10, "Taylor remainder direct vs quadrature to 1e-8; Γ decays for ‖x‖⁴", || {
        summarize(&[record("taylor.json", &[])])
    }));

    let failed: Vec<u32> = results.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    println!("{} / {} criteria pass", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
