//! Augmented synthetic control in its three covariate modes.
//!
//! cargo run --release --example augmented_fit

use synthlab::augment::{augmented_fit, covariate_imbalance, AugmentMode, AugmentOptions};
use synthlab::dgp::{simulate, CalibrationSet, ScenarioConfig};
use synthlab::panel::{build_design, OmissionChoice};

fn main() -> synthlab::Result<()> {
    let calib = CalibrationSet::default_set();
    let ds = simulate(&ScenarioConfig::default(), &calib, 5, 0)?;
    let design = build_design(&ds.panel, &ds.spec, &OmissionChoice::first(&ds.spec))?;
    println!("true effect {:.5}", ds.true_tau);
    for mode in [AugmentMode::NoCovariates, AugmentMode::AllCovariates, AugmentMode::Residualized] {
        let fit = augmented_fit(&ds.panel, &design, &AugmentOptions::new(mode))?;
        println!(
            "{:<14?} att {:.5}  base att {:.5}  pre-RMSPE {:.5}  covariate imbalance {:.2e}",
            mode,
            fit.att_mean,
            fit.base_att_mean,
            fit.rmspe_pre,
            covariate_imbalance(&design, &fit.augmented_weights)
        );
    }
    Ok(())
}
