//! Prints outcome moments of simulated panels under the shipped (or a given) calibration.
//!
//! cargo run --release --example calibration_moments -- [path/to/calibration.json] [reps]

use std::path::PathBuf;

use synthlab::dgp::{simulate, CalibrationSet, OutcomeKind, Overlap, ScenarioConfig};
use synthlab::panel::sample_sd;

fn main() -> synthlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let calib = CalibrationSet::load(args.first().map(PathBuf::from).as_deref())?;
    let reps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    println!("scenario,kind,state_mean,state_sd,treated_mean,treated_sd");
    for overlap in [Overlap::FullOverlap, Overlap::TreatmentOffset, Overlap::StateOffset, Overlap::RandomOffset] {
        for kind in [OutcomeKind::Linear, OutcomeKind::Factor] {
            let cfg = ScenarioConfig::new(overlap, kind);
            let (mut mean, mut sd, mut tmean, mut tsd) = (0.0, 0.0, 0.0, 0.0);
            for rep in 0..reps {
                let ds = simulate(&cfg, &calib, 2024, rep)?;
                let y = ds.panel.outcome();
                let t0 = ds.panel.t0();
                // state means over the pre-period, as in the paper's summary statistics
                let state_means: Vec<f64> =
                    (0..y.ncols()).map(|s| (0..t0).map(|t| y[(t, s)]).sum::<f64>() / t0 as f64).collect();
                mean += state_means.iter().sum::<f64>() / state_means.len() as f64;
                sd += sample_sd(state_means.iter().copied());
                tmean += state_means[0];
                tsd += sample_sd((0..t0).map(|t| y[(t, 0)]));
            }
            let r = reps as f64;
            println!("{},{},{:.4},{:.4},{:.4},{:.4}", overlap.id(), kind.id(), mean / r, sd / r, tmean / r, tsd / r);
        }
    }
    Ok(())
}
