//! Writes one simulated panel per overlap scenario to stdout as CSV
//! (first scenario only unless `all` is passed).
//!
//! cargo run --example simulate_panel -- [all]

use synthlab::dgp::{simulate, CalibrationSet, OutcomeKind, Overlap, ScenarioConfig};

fn main() -> synthlab::Result<()> {
    let calib = CalibrationSet::load(None)?;
    let all = std::env::args().nth(1).as_deref() == Some("all");
    let overlaps = [Overlap::FullOverlap, Overlap::TreatmentOffset, Overlap::StateOffset, Overlap::RandomOffset];
    for overlap in overlaps.iter().take(if all { 4 } else { 1 }) {
        let ds = simulate(&ScenarioConfig::new(*overlap, OutcomeKind::Linear), &calib, 1, 0)?;
        eprintln!("{}: true effect {}", overlap.id(), ds.true_tau);
        ds.panel.write_csv(std::io::stdout())?;
    }
    Ok(())
}
