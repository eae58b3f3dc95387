//! Standard synthetic control on one simulated panel: regression-weight V
//! against the nested V search.
//!
//! cargo run --release --example synth_fit

use synthlab::dgp::{simulate, CalibrationSet, ScenarioConfig};
use synthlab::panel::{build_design, OmissionChoice};
use synthlab::synth::{fixed_v_fit, nested_fit, regression_v_or_uniform, NestedOptions};

fn main() -> synthlab::Result<()> {
    let calib = CalibrationSet::default_set();
    let ds = simulate(&ScenarioConfig::default(), &calib, 11, 0)?;
    let design = build_design(&ds.panel, &ds.spec, &OmissionChoice::first(&ds.spec))?.standardized();
    let (v0, from_regression) = regression_v_or_uniform(&design, &ds.panel);
    let reg = fixed_v_fit(&ds.panel, &design, &v0)?;
    let nested = nested_fit(&ds.panel, &design, &v0, &NestedOptions::default())?;
    println!("true effect       {:.5}", ds.true_tau);
    println!(
        "regression V ({}) att {:.5}  pre-RMSPE {:.5}",
        if from_regression { "ols" } else { "uniform" },
        reg.att_mean,
        reg.rmspe_pre
    );
    println!("nested V          att {:.5}  pre-RMSPE {:.5}", nested.att_mean, nested.rmspe_pre);
    let top: Vec<(usize, f64)> = {
        let mut w: Vec<(usize, f64)> = nested.w.as_slice().iter().copied().enumerate().collect();
        w.sort_by(|a, b| b.1.total_cmp(&a.1));
        w.into_iter().take(5).collect()
    };
    for (j, w) in top {
        println!("  {:<8} {:.4}", ds.panel.unit_ids()[j + 1], w);
    }
    Ok(())
}
