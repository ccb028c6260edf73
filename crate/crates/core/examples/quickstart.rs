//! Joint fit, sparse covariance and minimum-variance weights on the
//! bundled synthetic market.
//!
//! `cargo run -p ppfm-core --example quickstart`

use ppfm_core::covariance::{self, ThresholdRule};
use ppfm_core::panel;
use ppfm_core::portfolio;
use ppfm_core::ppfm::{self, PpfmConfig};
use ppfm_core::simulation::{self, MarketConfig};
use ppfm_core::tuning::{self, LambdaCvOptions};

fn main() -> ppfm_core::Result<()> {
    let market = simulation::synthetic_market(&MarketConfig::default())?;
    let excess = panel::to_excess(&market.returns, &market.risk_free)?;
    let sectors = panel::group_by_sector(&excess, &market.sectors, 3).panels;

    // complete assets over the first 100 days
    let windows = sectors
        .iter()
        .map(|p| panel::complete_case_window(p, 0, 100))
        .collect::<ppfm_core::Result<Vec<_>>>()?;
    let returns: Vec<_> = windows.iter().map(|w| w.values().clone()).collect();
    let ks = vec![2; returns.len()];

    let grid = tuning::default_lambda_grid(&returns);
    let cv = tuning::select_lambda(&returns, &ks, &grid, &LambdaCvOptions::default())?;
    println!("cross-validated λ = {:.3e}", cv.chosen);

    let fit = ppfm::ppfm_fit(&returns, &ks, &PpfmConfig::with_lambda(cv.chosen))?;
    println!("{} sweeps, loss {:?}", fit.iterations, fit.loss_trace.last());
    for (w, f) in windows.iter().zip(&fit.fits) {
        let (sigma, sparse) = covariance::factor_return_cov(f, 0.5, ThresholdRule::Soft)?;
        let weights = portfolio::mvp_weights(&sigma)?;
        println!(
            "sector {}: {} assets, {} nonzero residual covariances, min risk {:.3e}, largest weight {:.3}",
            w.sector_label().unwrap_or("?"),
            w.num_assets(),
            sparse.nonzeros,
            portfolio::min_risk(&sigma)?,
            weights.max()
        );
    }
    Ok(())
}
