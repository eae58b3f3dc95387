//! A desk-sized experiment: a few methods over a few replications, with
//! the report tables printed to stdout.
//!
//! cargo run --release --example small_experiment -- [reps]

use synthlab::dgp::{CalibrationSet, ScenarioConfig};
use synthlab::evalx::{run_experiment, ExperimentSpec, Method, Scenario};

fn main() -> synthlab::Result<()> {
    let reps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = ExperimentSpec {
        scenarios: vec![Scenario::Calibrated(ScenarioConfig::default())],
        methods: vec![Method::SynthRegweights, Method::SynthNocov, Method::AugsynthNocov, Method::IfeNocov],
        rank_methods: vec![Method::SynthNocov, Method::AugsynthNocov, Method::IfeNocov],
        replications: reps,
        seed: 42,
        ..Default::default()
    };
    let out = run_experiment(&spec, &CalibrationSet::default_set())?;
    for r in &out.report.fig1 {
        println!("{:<18} rmse {:.5}  mean |bias| {:.5}  failed {}", r.method.id(), r.rmse, r.mean_abs_bias, r.n_failed);
    }
    for r in &out.report.fig6 {
        println!("{:<18} spearman(rmspe, |bias|) {:?}", r.method.id(), r.rho);
    }
    Ok(())
}
