//! Enumerates reference-category choices and shows how the design changes.
//!
//! cargo run --example omission_sweep

use synthlab::dgp::{simulate, CalibrationSet, ScenarioConfig};
use synthlab::panel::{build_design, enumerate_omissions};

fn main() -> synthlab::Result<()> {
    let calib = CalibrationSet::default_set();
    let ds = simulate(&ScenarioConfig::default(), &calib, 7, 0)?;
    let omissions = enumerate_omissions(&ds.spec);
    println!("{} omission choices", omissions.len());
    for o in omissions.iter().take(3) {
        let d = build_design(&ds.panel, &ds.spec, o)?;
        println!("{:<40} columns: {}", o.id(&ds.spec), d.column_names().join(" "));
    }
    Ok(())
}
