//! Fixed-effects counterfactuals with and without latent factors.
//!
//! cargo run --release --example ife_fit

use synthlab::dgp::{simulate, CalibrationSet, ScenarioConfig};
use synthlab::ife::ife_fit;
use synthlab::panel::{covariate_names, OmissionChoice};

fn main() -> synthlab::Result<()> {
    let calib = CalibrationSet::default_set();
    let ds = simulate(&ScenarioConfig::default(), &calib, 9, 0)?;
    let names = covariate_names(&ds.spec, &OmissionChoice::first(&ds.spec))?;
    println!("true effect {:.5}", ds.true_tau);
    for r in 0..3 {
        let fit = ife_fit(&ds.panel, &names, r)?;
        println!("r = {r}: att {:.5}  pre-RMSPE {:.5}  iterations {}", fit.att_mean, fit.rmspe_pre, fit.iterations);
    }
    let plain = ife_fit(&ds.panel, &[], 0)?;
    println!("no covariates: att {:.5}", plain.att_mean);
    Ok(())
}
