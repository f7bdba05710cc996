use serde::{Deserialize, Serialize};

use super::fd::FundamentalDiagram;
use super::{Result, SimError};

/// Boundary treatment for a one-dimensional cell array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Boundary {
    /// Last cell feeds the first.
    Periodic,
    /// Ghost cells with fixed densities on both ends.
    Ghost { left: f64, right: f64 },
    /// Upstream inflow demand (veh/h/lane); vehicles leave freely downstream.
    Open { inflow: f64 },
}

/// Rejects steps that let a free-flow wave cross more than one cell.
pub fn check_cfl(fd: &FundamentalDiagram, dt_min: f64, dx_km: f64) -> Result<()> {
    let limit = dx_km / fd.free_speed * 60.0;
    if !(dt_min > 0.0) || dt_min > limit * (1.0 + 1e-12) {
        return Err(SimError::Cfl { dt: dt_min, limit });
    }
    Ok(())
}

/// One conservative Godunov update of per-lane densities.
///
/// Interface fluxes are `min(demand(upstream), supply(downstream))`.
pub fn godunov_step(
    density: &[f64],
    fd: &FundamentalDiagram,
    dt_min: f64,
    dx_km: f64,
    boundary: Boundary,
) -> Result<Vec<f64>> {
    check_cfl(fd, dt_min, dx_km)?;
    let n = density.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    // fluxes[i] is the flow entering cell i; fluxes[n] leaves the last cell.
    let mut fluxes = vec![0.0; n + 1];
    for i in 1..n {
        fluxes[i] = fd.demand(density[i - 1]).min(fd.supply(density[i]));
    }
    match boundary {
        Boundary::Periodic => {
            let f = fd.demand(density[n - 1]).min(fd.supply(density[0]));
            fluxes[0] = f;
            fluxes[n] = f;
        }
        Boundary::Ghost { left, right } => {
            fluxes[0] = fd.demand(left).min(fd.supply(density[0]));
            fluxes[n] = fd.demand(density[n - 1]).min(fd.supply(right));
        }
        Boundary::Open { inflow } => {
            fluxes[0] = inflow.max(0.0).min(fd.supply(density[0]));
            fluxes[n] = fd.demand(density[n - 1]);
        }
    }
    let ratio = dt_min / 60.0 / dx_km;
    Ok((0..n)
        .map(|i| density[i] + ratio * (fluxes[i] - fluxes[i + 1]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_density_is_stationary() {
        let fd = FundamentalDiagram::default();
        for rho in [0.0, 10.0, 15.0, 60.0, 115.0] {
            let d = vec![rho; 12];
            let out = godunov_step(&d, &fd, 0.1, 0.4, Boundary::Periodic).unwrap();
            assert_eq!(out, d);
        }
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let fd = FundamentalDiagram::default();
        // dx / v_f = 0.4 / 120 h = 0.2 min
        assert!(godunov_step(&[1.0; 4], &fd, 0.21, 0.4, Boundary::Periodic).is_err());
        assert!(godunov_step(&[1.0; 4], &fd, 0.2, 0.4, Boundary::Periodic).is_ok());
    }

    #[test]
    fn densities_stay_in_range() {
        let fd = FundamentalDiagram::default();
        let mut d: Vec<f64> = (0..20).map(|i| (i * 37 % 116) as f64).collect();
        for _ in 0..200 {
            d = godunov_step(&d, &fd, 0.2, 0.4, Boundary::Ghost { left: 30.0, right: 100.0 }).unwrap();
            assert!(d.iter().all(|&r| (-1e-9..=115.0 + 1e-9).contains(&r)));
        }
    }
}
